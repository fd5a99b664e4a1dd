//! Pixel-space augmentations: H&E stain-matrix perturbation, HSV colour
//! jitter and the dihedral rotations/flips used for class balancing.

use std::str::FromStr;

use rand::Rng as _;

use serde::{Deserialize, Serialize};

use crate::color::{od_to_rgb, rgb_to_od, OdConfig, OdImage, Rgb, RgbPatch};
use crate::deconv::{compose_rows, compute_concentrations, StainMatrix};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Ranges of the stain-matrix scale (`sigma1`) and offset (`sigma2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StainAugConfig {
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for StainAugConfig {
    fn default() -> Self {
        Self {
            sigma1: 0.2,
            sigma2: 0.2,
        }
    }
}

impl StainAugConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma1) || !(0.0..1.0).contains(&self.sigma2) {
            return Err(Error::InvalidConfig(format!(
                "sigma1 and sigma2 must be in [0, 1), got {} and {}",
                self.sigma1, self.sigma2
            )));
        }
        Ok(())
    }
}

/// Per-stain-row scale `alpha` and offset `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainPerturbation {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
}

impl StainPerturbation {
    pub const IDENTITY: Self = Self {
        alpha: [1.0, 1.0],
        beta: [0.0, 0.0],
    };

    /// Draws `alpha_i ~ U(1-s1, 1+s1)` and `beta_i ~ U(-s2, s2)` for each row.
    pub fn sample(cfg: &StainAugConfig, rng: &mut Rng) -> Self {
        let mut out = Self::IDENTITY;
        for i in 0..2 {
            out.alpha[i] = rng.random_range(1.0 - cfg.sigma1..=1.0 + cfg.sigma1);
            out.beta[i] = rng.random_range(-cfg.sigma2..=cfg.sigma2);
        }
        out
    }

    /// `alpha ⊙ M + beta` with every entry clamped to `[0, 1]`.
    pub fn perturb(&self, m: &StainMatrix) -> [Rgb; 2] {
        let rows = m.rows();
        let mut out = [[0.0; 3]; 2];
        for i in 0..2 {
            for c in 0..3 {
                out[i][c] = (self.alpha[i] * rows[i][c] + self.beta[i]).clamp(0.0, 1.0);
            }
        }
        out
    }
}

/// Random stain augmentation of a patch whose stain matrix is `m`.
pub fn stain_augment(
    patch: &RgbPatch,
    m: &StainMatrix,
    cfg: &StainAugConfig,
    rng: &mut Rng,
    od_cfg: &OdConfig,
) -> Result<RgbPatch> {
    cfg.validate()?;
    let p = StainPerturbation::sample(cfg, rng);
    apply_stain_perturbation(patch, m, &p, od_cfg)
}

/// Deconvolves with `m` and recomposes with the perturbed matrix.
pub fn apply_stain_perturbation(
    patch: &RgbPatch,
    m: &StainMatrix,
    p: &StainPerturbation,
    od_cfg: &OdConfig,
) -> Result<RgbPatch> {
    let od = rgb_to_od(patch, od_cfg);
    let cmap = compute_concentrations(&od, m)?;
    let rows = p.perturb(m);
    let out = OdImage {
        width: od.width,
        height: od.height,
        data: cmap.data.iter().map(|&c| compose_rows(&rows, c)).collect(),
    };
    Ok(od_to_rgb(&out, od_cfg))
}

/// Colour-augmentation shift ranges. Hue is in degrees, saturation and
/// brightness in percent of full scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvAugConfig {
    pub hue_shift: (f64, f64),
    pub sat_shift: (f64, f64),
    pub brightness_shift: (f64, f64),
}

impl HsvAugConfig {
    pub fn colon() -> Self {
        Self {
            hue_shift: (-15.0, 8.0),
            sat_shift: (-20.0, 10.0),
            brightness_shift: (-8.0, 8.0),
        }
    }

    pub fn prostate() -> Self {
        Self {
            hue_shift: (-9.0, 9.0),
            sat_shift: (-25.0, 25.0),
            brightness_shift: (-10.0, 10.0),
        }
    }

    pub fn identity() -> Self {
        Self {
            hue_shift: (0.0, 0.0),
            sat_shift: (0.0, 0.0),
            brightness_shift: (0.0, 0.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("hue", self.hue_shift),
            ("saturation", self.sat_shift),
            ("brightness", self.brightness_shift),
        ] {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "{name} shift range is inverted: ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

/// Named augmentation presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Colon,
    Prostate,
}

impl Preset {
    pub fn hsv(self) -> HsvAugConfig {
        match self {
            Preset::Colon => HsvAugConfig::colon(),
            Preset::Prostate => HsvAugConfig::prostate(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Colon => "colon",
            Preset::Prostate => "prostate",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "colon" => Ok(Preset::Colon),
            "prostate" => Ok(Preset::Prostate),
            other => Err(Error::InvalidConfig(format!("unknown preset `{other}`"))),
        }
    }
}

/// A concrete HSV shift (hue degrees, saturation/brightness percent).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HsvShift {
    pub hue: f64,
    pub sat: f64,
    pub brightness: f64,
}

impl HsvShift {
    pub fn sample(cfg: &HsvAugConfig, rng: &mut Rng) -> Self {
        let draw = |rng: &mut Rng, (lo, hi): (f64, f64)| rng.random_range(lo..=hi);
        let hue = draw(rng, cfg.hue_shift);
        let sat = draw(rng, cfg.sat_shift);
        let brightness = draw(rng, cfg.brightness_shift);
        Self {
            hue,
            sat,
            brightness,
        }
    }
}

pub fn hsv_augment(patch: &RgbPatch, cfg: &HsvAugConfig, rng: &mut Rng) -> Result<RgbPatch> {
    cfg.validate()?;
    Ok(apply_hsv_shift(patch, &HsvShift::sample(cfg, rng)))
}

/// Applies one shift to every pixel. Achromatic pixels have no hue, so
/// they only receive the brightness shift.
pub fn apply_hsv_shift(patch: &RgbPatch, shift: &HsvShift) -> RgbPatch {
    let data = patch
        .pixels()
        .iter()
        .map(|&px| {
            let [h, s, v] = rgb_to_hsv(px);
            let (h, s) = if s > 0.0 {
                (
                    (h + shift.hue).rem_euclid(360.0),
                    (s + shift.sat / 100.0).clamp(0.0, 1.0),
                )
            } else {
                (h, s)
            };
            let v = (v + shift.brightness / 100.0).clamp(0.0, 1.0);
            hsv_to_rgb([h, s, v])
        })
        .collect();
    RgbPatch::from_clamped(patch.width(), patch.height(), data)
}

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: Rgb) -> [f64; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f64; 3]) -> Rgb {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Flip applied after rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
}

/// Clockwise quarter turns followed by an optional flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GeomOp {
    pub quarter_turns: u8,
    pub flip: Flip,
}

impl GeomOp {
    pub const IDENTITY: Self = Self {
        quarter_turns: 0,
        flip: Flip::None,
    };

    pub fn sample(rng: &mut Rng) -> Self {
        let quarter_turns = rng.random_range(0..4u8);
        let flip = match rng.random_range(0..3u8) {
            0 => Flip::None,
            1 => Flip::Horizontal,
            _ => Flip::Vertical,
        };
        Self {
            quarter_turns,
            flip,
        }
    }

    /// Output dimensions for a `width`×`height` input.
    pub fn output_dims(&self, width: usize, height: usize) -> (usize, usize) {
        if self.quarter_turns % 2 == 1 {
            (height, width)
        } else {
            (width, height)
        }
    }

    /// Where the input pixel `(x, y)` lands.
    pub fn map_position(&self, width: usize, height: usize, x: usize, y: usize) -> (usize, usize) {
        let (mut x, mut y) = (x, y);
        let (mut w, mut h) = (width, height);
        for _ in 0..self.quarter_turns % 4 {
            // clockwise: (x, y) -> (h - 1 - y, x)
            (x, y) = (h - 1 - y, x);
            (w, h) = (h, w);
        }
        match self.flip {
            Flip::None => (x, y),
            Flip::Horizontal => (w - 1 - x, y),
            Flip::Vertical => (x, h - 1 - y),
        }
    }
}

pub fn apply_geometric(patch: &RgbPatch, op: &GeomOp) -> RgbPatch {
    let (w, h) = (patch.width(), patch.height());
    let (ow, oh) = op.output_dims(w, h);
    let mut out = vec![[0.0; 3]; ow * oh];
    for y in 0..h {
        for x in 0..w {
            let (nx, ny) = op.map_position(w, h, x, y);
            out[ny * ow + nx] = patch.get(x, y);
        }
    }
    RgbPatch::from_clamped(ow, oh, out)
}

pub fn geometric_augment(patch: &RgbPatch, rng: &mut Rng) -> RgbPatch {
    apply_geometric(patch, &GeomOp::sample(rng))
}
