//! On-disk scene directories.
//!
//! ```text
//! <scene>/manifest.txt        key = value lines
//! <scene>/images/NNN.ppm      view images
//! <scene>/cams/NNN_cam.txt    camera text files with the depth range
//! <scene>/depths/NNN.pfm      ground-truth depth, 0 where nothing was hit
//! ```
//!
//! A dataset is either a single scene directory or a directory whose
//! subdirectories are scenes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::geometry::io::CameraFile;
use crate::geometry::{CameraView, SyntheticScene};
use crate::io::{read_pfm, read_ppm, write_pfm, write_ppm};

pub const MANIFEST: &str = "manifest.txt";
pub const FORMAT_TAG: &str = "mvs-scene-1";

#[derive(Debug, Clone, PartialEq)]
pub struct SceneData {
    pub name: String,
    pub views: Vec<CameraView>,
    pub d_min: f64,
    pub d_max: f64,
}

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("images").join(format!("{i:03}.ppm"))
}

pub fn camera_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("cams").join(format!("{i:03}_cam.txt"))
}

pub fn depth_path(dir: &Path, i: usize) -> PathBuf {
    dir.join("depths").join(format!("{i:03}.pfm"))
}

/// Writes images, cameras (with `count` hypotheses over the scene range),
/// ground-truth depths and the manifest.
pub fn write_scene(dir: &Path, scene: &SyntheticScene, count: usize) -> Result<()> {
    for sub in ["images", "cams", "depths"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let (d_min, d_max) = (scene.spec.d_min, scene.spec.d_max);
    let interval = (d_max - d_min) / (count.max(2) - 1) as f64;
    for (i, v) in scene.views.iter().enumerate() {
        write_ppm(&image_path(dir, i), &v.image)?;
        CameraFile {
            camera: v.camera,
            d_min,
            interval,
            count: Some(count),
            d_max: Some(d_max),
        }
        .write(&camera_path(dir, i))?;
        if let Some(d) = &v.depth {
            write_pfm(&depth_path(dir, i), d)?;
        }
    }
    let mut m = String::new();
    let _ = writeln!(m, "format = {FORMAT_TAG}");
    let _ = writeln!(m, "views = {}", scene.views.len());
    let _ = writeln!(m, "height = {}", scene.spec.height);
    let _ = writeln!(m, "width = {}", scene.spec.width);
    let _ = writeln!(m, "seed = {}", scene.seed);
    let _ = writeln!(m, "d_min = {d_min}");
    let _ = writeln!(m, "d_max = {d_max}");
    fs::write(dir.join(MANIFEST), m)?;
    Ok(())
}

fn manifest_value<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == key).then(|| v.trim())
    })
}

pub fn read_scene(dir: &Path) -> Result<SceneData> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Parse(format!("{}: {e}", dir.join(MANIFEST).display())))?;
    if manifest_value(&manifest, "format") != Some(FORMAT_TAG) {
        return Err(Error::Parse(format!(
            "{}: not a {FORMAT_TAG} manifest",
            dir.display()
        )));
    }
    let n: usize = manifest_value(&manifest, "views")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Parse("manifest lacks a view count".into()))?;
    let mut views = Vec::with_capacity(n);
    let mut range = None;
    for i in 0..n {
        let cam = CameraFile::read(&camera_path(dir, i))?;
        let d_max = cam
            .d_max
            .unwrap_or(cam.d_min + cam.interval * (cam.count.unwrap_or(2) - 1) as f64);
        range.get_or_insert((cam.d_min, d_max));
        let image = read_ppm(&image_path(dir, i))?;
        let dp = depth_path(dir, i);
        let depth = if dp.exists() {
            Some(read_pfm(&dp)?)
        } else {
            None
        };
        let valid = depth
            .as_ref()
            .map(|d| d.data.iter().map(|&v| v > 0.0).collect());
        views.push(CameraView {
            camera: cam.camera,
            image,
            depth,
            valid,
        });
    }
    let (d_min, d_max) = range.ok_or_else(|| Error::Parse("scene has no views".into()))?;
    Ok(SceneData {
        name: dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        views,
        d_min,
        d_max,
    })
}

/// One scene if `dir` holds a manifest, otherwise every scene subdirectory
/// in name order.
pub fn read_dataset(dir: &Path) -> Result<Vec<SceneData>> {
    if dir.join(MANIFEST).exists() {
        return Ok(vec![read_scene(dir)?]);
    }
    let mut subs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(MANIFEST).exists())
        .collect();
    subs.sort();
    if subs.is_empty() {
        return Err(Error::Parse(format!("{}: no scenes found", dir.display())));
    }
    subs.iter().map(|p| read_scene(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{render_synthetic_scene, SceneSpec};

    #[test]
    fn scene_round_trip() {
        let spec = SceneSpec {
            height: 16,
            width: 20,
            focal: 40.0,
            ..SceneSpec::default()
        };
        let scene = render_synthetic_scene(&spec, 4).unwrap();
        let tmp = tempfile::tempdir().unwrap();
        write_scene(tmp.path(), &scene, 16).unwrap();
        let back = read_scene(tmp.path()).unwrap();
        assert_eq!(back.views.len(), 3);
        assert_eq!((back.d_min, back.d_max), (1.5, 5.0));
        for (a, b) in back.views.iter().zip(&scene.views) {
            assert_eq!(a.valid, b.valid);
            let (da, db) = (a.depth.as_ref().unwrap(), b.depth.as_ref().unwrap());
            for (x, y) in da.data.iter().zip(&db.data) {
                assert!((x - y).abs() <= 1e-6 * y.abs().max(1.0));
            }
            for (x, y) in a.image.data.iter().zip(&b.image.data) {
                assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
        assert_eq!(read_dataset(tmp.path()).unwrap().len(), 1);
    }
}
