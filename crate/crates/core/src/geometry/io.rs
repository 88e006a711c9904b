//! Camera text files in the common MVS layout:
//!
//! ```text
//! extrinsic
//! r00 r01 r02 t0
//! r10 r11 r12 t1
//! r20 r21 r22 t2
//! 0 0 0 1
//!
//! intrinsic
//! fx 0 cx
//! 0 fy cy
//! 0 0 1
//!
//! d_min interval [count d_max]
//! ```

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

use super::camera::{Camera, Extrinsics, Intrinsics};

#[derive(Debug, Clone, PartialEq)]
pub struct CameraFile {
    pub camera: Camera,
    pub d_min: f64,
    pub interval: f64,
    pub count: Option<usize>,
    pub d_max: Option<f64>,
}

impl CameraFile {
    pub fn parse(text: &str) -> Result<Self> {
        let rest: Vec<&str> = text.split_whitespace().collect();
        if rest.first() != Some(&"extrinsic") {
            return Err(Error::Parse(format!(
                "expected `extrinsic`, found {:?}",
                rest.first()
            )));
        }
        let numbers = |from: usize, n: usize| -> Result<Vec<f64>> {
            rest.get(from..from + n)
                .ok_or_else(|| Error::Parse("camera file is truncated".into()))?
                .iter()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Parse(format!("`{t}`: {e}")))
                })
                .collect()
        };
        let e = numbers(1, 16)?;
        if rest.get(17) != Some(&"intrinsic") {
            return Err(Error::Parse(format!(
                "expected `intrinsic`, found {:?}",
                rest.get(17)
            )));
        }
        let k = numbers(18, 9)?;
        let tail = rest.len().saturating_sub(27);
        if tail != 2 && tail != 4 {
            return Err(Error::Parse(format!(
                "depth line needs 2 or 4 values, found {tail}"
            )));
        }
        let depth = numbers(27, tail)?;

        if (e[12], e[13], e[14], e[15]) != (0.0, 0.0, 0.0, 1.0) {
            return Err(Error::Parse("last extrinsic row must be 0 0 0 1".into()));
        }
        if k[1] != 0.0 || k[3] != 0.0 || (k[6], k[7], k[8]) != (0.0, 0.0, 1.0) {
            return Err(Error::Parse(
                "intrinsic matrix must be zero-skew pinhole".into(),
            ));
        }
        let rotation = Matrix3::new(e[0], e[1], e[2], e[4], e[5], e[6], e[8], e[9], e[10]);
        let translation = Vector3::new(e[3], e[7], e[11]);
        let camera = Camera::new(
            Intrinsics::new(k[0], k[4], k[2], k[5])?,
            Extrinsics::new(rotation, translation)?,
        );
        let (count, d_max) = if tail == 4 {
            let c = depth[2];
            if c < 0.0 || c.fract() != 0.0 {
                return Err(Error::Parse(format!(
                    "hypothesis count must be a whole number, got {c}"
                )));
            }
            (Some(c as usize), Some(depth[3]))
        } else {
            (None, None)
        };
        Ok(Self {
            camera,
            d_min: depth[0],
            interval: depth[1],
            count,
            d_max,
        })
    }

    pub fn to_text(&self) -> String {
        let r = &self.camera.extrinsics.rotation;
        let t = &self.camera.extrinsics.translation;
        let k = &self.camera.intrinsics;
        let mut s = String::from("extrinsic\n");
        for i in 0..3 {
            let _ = writeln!(
                s,
                "{:e} {:e} {:e} {:e}",
                r[(i, 0)],
                r[(i, 1)],
                r[(i, 2)],
                t[i]
            );
        }
        s.push_str("0 0 0 1\n\nintrinsic\n");
        let _ = writeln!(
            s,
            "{:e} 0 {:e}\n0 {:e} {:e}\n0 0 1\n",
            k.fx, k.cx, k.fy, k.cy
        );
        let _ = write!(s, "{:e} {:e}", self.d_min, self.interval);
        if let (Some(c), Some(d)) = (self.count, self.d_max) {
            let _ = write!(s, " {c} {d:e}");
        }
        s.push('\n');
        s
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let ext = Extrinsics::look_at(
            Vector3::new(0.6, 0.1, 0.0),
            Vector3::new(0.0, 0.0, 3.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
        .unwrap();
        let f = CameraFile {
            camera: Camera::new(Intrinsics::new(80.0, 80.0, 39.5, 31.5).unwrap(), ext),
            d_min: 1.8,
            interval: 2.4 / 31.0,
            count: Some(32),
            d_max: Some(4.2),
        };
        assert_eq!(CameraFile::parse(&f.to_text()).unwrap(), f);
        let short = CameraFile {
            count: None,
            d_max: None,
            ..f.clone()
        };
        assert_eq!(CameraFile::parse(&short.to_text()).unwrap(), short);
    }

    #[test]
    fn rejects_malformed() {
        assert!(CameraFile::parse("intrinsic 1 0 0").is_err());
        assert!(CameraFile::parse(
            "extrinsic 1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1 intrinsic 1 0 0 0 1 0 0 0 1"
        )
        .is_err());
    }
}
