use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Image dimensions plus the square patch size used to cut them up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "Ch")]
    pub channels: usize,
    #[serde(rename = "P")]
    pub patch: usize,
}

impl ImageGeometry {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        let geometry = Self {
            height,
            width,
            channels,
            patch,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::validation("geometry", "H and W must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::validation("geometry.Ch", "at least one channel required"));
        }
        if self.patch == 0 {
            return Err(Error::validation("geometry.P", "patch size must be positive"));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::validation(
                "geometry.P",
                format!(
                    "H={} and W={} must both be divisible by P={}",
                    self.height, self.width, self.patch
                ),
            ));
        }
        Ok(())
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    /// M = HW / P².
    pub fn patch_count(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// P² · Ch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width * self.channels
    }
}

/// Dense H×W×Ch image, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image data has {} values, expected {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image".into()));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[self.index(y, x, c)]
    }

    pub fn matches(&self, geometry: &ImageGeometry) -> bool {
        self.height == geometry.height && self.width == geometry.width && self.channels == geometry.channels
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }

    pub fn from_le_bytes(geometry: &ImageGeometry, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != geometry.pixel_count() * 4 {
            return Err(Error::Shape(format!(
                "image payload has {} bytes, expected {}",
                bytes.len(),
                geometry.pixel_count() * 4
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_data(geometry.height, geometry.width, geometry.channels, data)
    }
}
