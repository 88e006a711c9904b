//! Plain raster containers for images, depth maps and confidence maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Multi-channel image, channel-major (`C × H × W`), values nominally in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "image",
                &[data.len()],
                &[channels, height, width],
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Grey level: mean over channels.
    pub fn luminance(&self) -> Map {
        let n = self.height * self.width;
        let mut out = vec![0.0; n];
        for c in 0..self.channels {
            for (o, v) in out.iter_mut().zip(&self.data[c * n..(c + 1) * n]) {
                *o += v / self.channels as f64;
            }
        }
        Map {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&self.data, &[self.channels, self.height, self.width])
            .expect("image extents are consistent")
    }
}

/// Single-channel raster (depth, confidence, error maps).
#[derive(Debug, Clone, PartialEq)]
pub struct Map {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Depth in scene units; non-positive entries mean "no depth".
pub type DepthMap = Map;

impl Map {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim("map", &[data.len()], &[height, width]));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        Self {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Bilinear lookup at continuous `(x, y)`; `None` outside the raster.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> Option<f64> {
        let (w, h) = (self.width, self.height);
        if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let top = (1.0 - fx) * self.get(y0, x0) + fx * self.get(y0, x1);
        let bot = (1.0 - fx) * self.get(y1, x0) + fx * self.get(y1, x1);
        Some((1.0 - fy) * top + fy * bot)
    }

    /// Value at the nearest pixel; `None` outside the raster.
    pub fn sample_nearest(&self, x: f64, y: f64) -> Option<f64> {
        let (xr, yr) = (x.round(), y.round());
        if xr < 0.0 || yr < 0.0 || xr > (self.width - 1) as f64 || yr > (self.height - 1) as f64 {
            return None;
        }
        Some(self.get(yr as usize, xr as usize))
    }

    /// Keeps every `factor`-th sample in both directions (pixel `i` of the
    /// result is pixel `factor · i` of the input).
    pub fn downsample_nearest(&self, factor: usize) -> Map {
        let (h, w) = (self.height / factor, self.width / factor);
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(self.get(y * factor, x * factor));
            }
        }
        Map {
            height: h,
            width: w,
            data,
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(&self.data, &[self.height, self.width])
            .expect("map extents are consistent")
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 2 {
            return Err(Error::dim("map_from_tensor", s, &[]));
        }
        Map::new(s[0], s[1], t.to_f64_vec())
    }
}
