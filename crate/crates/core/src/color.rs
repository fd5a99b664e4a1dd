//! RGB patches and the optical-density (Beer–Lambert) transform.
//!
//! Pixels are stored row-major from the top-left corner as `[r, g, b]`
//! triples of `f64` in `[0, 1]`. Optical density is
//! `OD = -log10(max(I, eps) / I0)` per channel, capped at `od_cap`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [f64; 3];

/// An H×W×3 image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbPatch {
    width: usize,
    height: usize,
    data: Vec<Rgb>,
}

impl RgbPatch {
    pub fn new(width: usize, height: usize, data: Vec<Rgb>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} pixels for {width}x{height}, got {}",
                width * height,
                data.len()
            )));
        }
        if let Some(bad) = data
            .iter()
            .flatten()
            .find(|v| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidImage(format!(
                "channel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// A patch filled with a single colour.
    pub fn filled(width: usize, height: usize, pixel: Rgb) -> Result<Self> {
        Self::new(width, height, vec![pixel; width * height])
    }

    /// Builds a patch from interleaved 8-bit RGB bytes.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height * 3 {
            return Err(Error::InvalidImage(format!(
                "expected {} bytes, got {}",
                width * height * 3,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(3)
            .map(|px| {
                [
                    f64::from(px[0]) / 255.0,
                    f64::from(px[1]) / 255.0,
                    f64::from(px[2]) / 255.0,
                ]
            })
            .collect();
        Self::new(width, height, data)
    }

    /// Interleaved 8-bit RGB, rounding half up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .flat_map(|px| px.iter().map(|&v| channel_to_u8(v)))
            .collect()
    }

    /// Snaps every channel to the nearest 8-bit level.
    pub fn quantized(&self) -> Self {
        let data = self
            .data
            .iter()
            .map(|px| px.map(|v| f64::from(channel_to_u8(v)) / 255.0))
            .collect();
        Self {
            width: self.width,
            height: self.height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.data
    }

    pub fn into_pixels(self) -> Vec<Rgb> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.data[y * self.width + x]
    }

    pub fn is_square(&self) -> bool {
        self.width == self.height
    }

    /// Clamps a pixel buffer into `[0, 1]` and wraps it; used by
    /// transforms whose arithmetic may overshoot by rounding error.
    pub(crate) fn from_clamped(width: usize, height: usize, mut data: Vec<Rgb>) -> Self {
        for v in data.iter_mut().flatten() {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            width,
            height,
            data,
        }
    }
}

fn channel_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Background intensity, zero floor and cap for the OD transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OdConfig {
    pub background: f64,
    pub epsilon: f64,
    pub od_cap: f64,
}

impl OdConfig {
    pub fn new(background: f64, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < background) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < epsilon < I0, got epsilon={epsilon}, I0={background}"
            )));
        }
        Ok(Self {
            background,
            epsilon,
            od_cap: -(epsilon / background).log10(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < self.background) || !(self.od_cap > 0.0) {
            return Err(Error::InvalidConfig(format!("invalid OD config {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn pixel_to_od(&self, px: Rgb) -> Rgb {
        px.map(|v| (-(v.max(self.epsilon) / self.background).log10()).clamp(0.0, self.od_cap))
    }

    #[inline]
    pub fn od_to_pixel(&self, od: Rgb) -> Rgb {
        od.map(|d| (self.background * 10f64.powf(-d)).clamp(0.0, 1.0))
    }
}

impl Default for OdConfig {
    fn default() -> Self {
        Self::new(1.0, 1e-6).expect("default OD config is valid")
    }
}

/// Per-pixel optical densities, same layout as [`RgbPatch`].
#[derive(Debug, Clone, PartialEq)]
pub struct OdImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<Rgb>,
}

impl OdImage {
    pub fn max_channel(&self) -> impl Iterator<Item = f64> + '_ {
        self.data.iter().map(|od| od[0].max(od[1]).max(od[2]))
    }
}

pub fn rgb_to_od(patch: &RgbPatch, cfg: &OdConfig) -> OdImage {
    OdImage {
        width: patch.width,
        height: patch.height,
        data: patch.data.iter().map(|&px| cfg.pixel_to_od(px)).collect(),
    }
}

pub fn od_to_rgb(od: &OdImage, cfg: &OdConfig) -> RgbPatch {
    let data = od.data.iter().map(|&d| cfg.od_to_pixel(d)).collect();
    RgbPatch::from_clamped(od.width, od.height, data)
}
