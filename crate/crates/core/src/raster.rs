//! Plain image-like containers used outside the autodiff graph.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Planar (CHW) image with values nominally in [0, 1].
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
            return Err(Error::Shape(format!(
                "image {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// `[1, C, H, W]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, self.channels, self.height, self.width])
    }

    /// Stacks equally sized images into `[B, C, H, W]`.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::domain("cannot batch zero images"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if (im.channels, im.height, im.width) != (first.channels, first.height, first.width) {
                return Err(Error::Shape(format!(
                    "cannot batch {}x{}x{} with {}x{}x{}",
                    im.channels, im.height, im.width, first.channels, first.height, first.width
                )));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(
            data,
            &[images.len(), first.channels, first.height, first.width],
        ))
    }

    /// Splits a `[B, C, H, W]` tensor into images.
    pub fn unbatch(t: &Tensor) -> Vec<Image> {
        let (b, c, h, w) = t.dims4();
        let n = c * h * w;
        (0..b)
            .map(|i| Image {
                channels: c,
                height: h,
                width: w,
                data: t.data()[i * n..(i + 1) * n].to_vec(),
            })
            .collect()
    }
}

/// Per-pixel depth along the optical axis, in scene units.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "depth map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(DepthMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, v: f64) -> Self {
        DepthMap {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.data.clone(), &[1, 1, self.height, self.width])
    }

    pub fn from_tensor(t: &Tensor) -> Vec<DepthMap> {
        let (b, c, h, w) = t.dims4();
        assert_eq!(c, 1, "depth tensors have one channel");
        (0..b)
            .map(|i| DepthMap {
                height: h,
                width: w,
                data: t.data()[i * h * w..(i + 1) * h * w].to_vec(),
            })
            .collect()
    }
}

/// `true` where a pixel carries a usable value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl ValidityMask {
    pub fn full(height: usize, width: usize, v: bool) -> Self {
        ValidityMask {
            height,
            width,
            data: vec![v; height * width],
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn at(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn and(&self, other: &ValidityMask) -> ValidityMask {
        ValidityMask {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        }
    }
}

/// Camera-frame 3-D points, one per pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub height: usize,
    pub width: usize,
    pub points: Vec<[f64; 3]>,
}

/// Continuous pixel coordinates, one pair per source pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelCoords {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}
