//! Dense per-pixel maps. Pixels are stored row-major, channels innermost.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureImage {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        FeatureImage {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::input("feature image data has the wrong length"));
        }
        Ok(FeatureImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [f64] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn at(&self, col: usize, row: usize) -> &[f64] {
        self.pixel(row * self.width + col)
    }

    pub fn same_shape(&self, other: &FeatureImage) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ProbImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        ProbImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn at(&self, col: usize, row: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Views the map as a one-channel feature image.
    pub fn to_feature_image(&self) -> FeatureImage {
        FeatureImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.clone(),
        }
    }

    pub fn from_feature_image(img: &FeatureImage) -> Result<Self> {
        if img.channels != 1 {
            return Err(Error::input("probability image needs exactly one channel"));
        }
        Ok(ProbImage {
            width: img.width,
            height: img.height,
            data: img.data.clone(),
        })
    }
}
