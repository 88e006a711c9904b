//! PFM depth maps, PPM images and ASCII PLY point clouds.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::fusion::{Point, PointCloud};
use crate::image::{Image, Map};

/// Single-channel PFM, little-endian, rows stored bottom-up.
pub fn encode_pfm(map: &Map) -> Vec<u8> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", map.width, map.height).into_bytes();
    for y in (0..map.height).rev() {
        for x in 0..map.width {
            out.extend_from_slice(&(map.get(y, x) as f32).to_le_bytes());
        }
    }
    out
}

/// Splits off `n` whitespace-separated header tokens, returning them and
/// the offset just past the single whitespace byte that ends the last one.
fn header_tokens(bytes: &[u8], n: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(Error::Parse("truncated header".into()));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() {
        return Err(Error::Parse("header not terminated".into()));
    }
    Ok((tokens, i + 1))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Parse(format!("bad {what} `{s}`")))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<Map> {
    let (t, off) = header_tokens(bytes, 4)?;
    if t[0] != "Pf" {
        return Err(Error::Parse(format!(
            "expected a single-channel PFM (`Pf`), got `{}`",
            t[0]
        )));
    }
    let (w, h): (usize, usize) = (parse_num(&t[1], "width")?, parse_num(&t[2], "height")?);
    let scale: f64 = parse_num(&t[3], "scale")?;
    if scale == 0.0 {
        return Err(Error::Parse("PFM scale must be non-zero".into()));
    }
    let body = &bytes[off..];
    if body.len() < w * h * 4 {
        return Err(Error::Parse(format!(
            "PFM body holds {} bytes, need {}",
            body.len(),
            w * h * 4
        )));
    }
    let mut data = vec![0.0; w * h];
    for (k, c) in body.chunks_exact(4).take(w * h).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if scale < 0.0 {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, x) = (k / w, k % w);
        data[(h - 1 - row) * w + x] = v as f64;
    }
    Map::new(h, w, data)
}

pub fn write_pfm(path: &Path, map: &Map) -> Result<()> {
    fs::write(path, encode_pfm(map))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<Map> {
    decode_pfm(&fs::read(path)?)
}

/// Binary PPM (P6, maxval 255); values in `[0, 1]` are rounded.
pub fn encode_ppm(image: &Image) -> Result<Vec<u8>> {
    if image.channels != 3 {
        return Err(Error::contract(format!(
            "PPM needs 3 channels, got {}",
            image.channels
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for y in 0..image.height {
        for x in 0..image.width {
            for c in 0..3 {
                out.push((image.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let (t, off) = header_tokens(bytes, 4)?;
    if t[0] != "P6" {
        return Err(Error::Parse(format!(
            "expected binary PPM (`P6`), got `{}`",
            t[0]
        )));
    }
    let (w, h): (usize, usize) = (parse_num(&t[1], "width")?, parse_num(&t[2], "height")?);
    let maxval: u32 = parse_num(&t[3], "maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Parse(format!("unsupported PPM maxval {maxval}")));
    }
    let body = &bytes[off..];
    if body.len() < w * h * 3 {
        return Err(Error::Parse("PPM body truncated".into()));
    }
    let mut img = Image::zeros(3, h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(c, y, x, body[(y * w + x) * 3 + c] as f64 / maxval as f64);
            }
        }
    }
    Ok(img)
}

pub fn write_ppm(path: &Path, image: &Image) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    decode_ppm(&fs::read(path)?)
}

pub fn encode_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::new();
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        cloud.len()
    );
    for p in &cloud.points {
        let q = p.position;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            q.x as f32, q.y as f32, q.z as f32, p.color[0], p.color[1], p.color[2]
        );
    }
    out
}

/// Reads the ASCII vertex layout written by [`encode_ply`]; color
/// properties are optional.
pub fn decode_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::Parse("missing `ply` magic".into()));
    }
    let mut count = None;
    let mut props = Vec::new();
    for line in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["format", fmt, ..] if *fmt != "ascii" => {
                return Err(Error::Parse(format!(
                    "only ASCII PLY is supported, got {fmt}"
                )));
            }
            ["element", "vertex", n] => count = Some(parse_num::<usize>(n, "vertex count")?),
            ["property", _, name] => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let count = count.ok_or_else(|| Error::Parse("no vertex element".into()))?;
    let col = |n: &str| props.iter().position(|p| p == n);
    let (ix, iy, iz) = match (col("x"), col("y"), col("z")) {
        (Some(a), Some(b), Some(c)) => (a, b, c),
        _ => return Err(Error::Parse("vertex needs x, y, z".into())),
    };
    let rgb = [col("red"), col("green"), col("blue")];
    let mut cloud = PointCloud::default();
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("fewer vertices than declared".into()))?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| parse_num(t, "vertex value"))
            .collect::<Result<_>>()?;
        if v.len() < props.len() {
            return Err(Error::Parse(format!("vertex line `{line}` is short")));
        }
        let color = rgb.map(|c| c.map_or(0, |k| v[k].clamp(0.0, 255.0) as u8));
        cloud.points.push(Point {
            position: Vector3::new(v[ix], v[iy], v[iz]),
            color,
        });
    }
    Ok(cloud)
}

pub fn write_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    fs::write(path, encode_ply(cloud))?;
    Ok(())
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    decode_ply(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pfm_round_trip_and_orientation() {
        let m = Map::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        let bytes = encode_pfm(&m);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        // First stored row is the bottom one.
        let body = &bytes[b"Pf\n3 2\n-1.0\n".len()..];
        assert_eq!(
            f32::from_le_bytes([body[0], body[1], body[2], body[3]]),
            4.0
        );
        assert_eq!(decode_pfm(&bytes).unwrap(), m);
        assert!(decode_pfm(b"PF\n1 1\n-1\n").is_err());
        assert!(decode_pfm(b"Pf\n2 2\n-1.0\n\0\0").is_err());
    }

    #[test]
    fn ppm_round_trip() {
        let mut img = Image::zeros(3, 2, 2);
        img.set(0, 0, 1, 1.0);
        img.set(2, 1, 0, 128.0 / 255.0);
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn ply_round_trip() {
        let cloud = PointCloud {
            points: vec![
                Point {
                    position: Vector3::new(0.5, -1.25, 3.0),
                    color: [255, 0, 7],
                },
                Point {
                    position: Vector3::new(1.0, 2.0, 4.0),
                    color: [1, 2, 3],
                },
            ],
        };
        let text = String::from_utf8(encode_ply(&cloud)).unwrap();
        assert!(text.contains("element vertex 2"));
        assert_eq!(decode_ply(&text).unwrap(), cloud);
        assert!(decode_ply("ply\nformat binary_little_endian 1.0\nend_header\n").is_err());
    }
}
