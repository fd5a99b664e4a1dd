//! Procedural multi-center H&E-like datasets, grid splitting of large
//! images into fixed-magnification patches, and OD-threshold tissue masks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{od_to_rgb, rgb_to_od, OdConfig, OdImage, Rgb, RgbPatch};
use crate::deconv::StainMatrix;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::train::LabeledPatch;

/// Stain appearance of one acquisition center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterSpec {
    pub center_id: usize,
    pub stain_matrix: StainMatrix,
    /// Standard deviation of the per-patch rotation of each stain row, in degrees.
    pub stain_jitter_deg: f64,
    /// Range of the per-patch concentration scale.
    pub intensity: (f64, f64),
    /// White level of the slide background, in `(0, 1]`.
    pub background: f64,
    /// Per-channel scanner response exponent applied after staining.
    #[serde(default = "unit_gamma")]
    pub gamma: [f64; 3],
    /// Patches per class for this center; overrides the dataset default.
    #[serde(default)]
    pub class_counts: Option<Vec<usize>>,
}

fn unit_gamma() -> [f64; 3] {
    [1.0; 3]
}

impl CenterSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.intensity;
        if !(self.stain_jitter_deg >= 0.0 && self.stain_jitter_deg.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "center {}: stain jitter must be >= 0",
                self.center_id
            )));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "center {}: intensity range must satisfy 0 < min <= max",
                self.center_id
            )));
        }
        if !(self.background > 0.0 && self.background <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "center {}: background must be in (0, 1]",
                self.center_id
            )));
        }
        if self.gamma.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidConfig(format!(
                "center {}: gamma must be positive",
                self.center_id
            )));
        }
        Ok(())
    }
}

/// Morphology of one tissue class. Lengths are fractions of the patch side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    /// Inclusive range of the number of glands.
    pub gland_count: (usize, usize),
    pub gland_radius: f64,
    /// Relative spread of gland radii.
    pub radius_jitter: f64,
    /// Epithelial rim width as a fraction of the gland radius; 1 fills the gland.
    pub boundary_thickness: f64,
    /// Free nuclei per 1000 px².
    pub nucleus_density: f64,
}

impl ClassSpec {
    fn params(&self) -> [f64; 4] {
        let g = (self.gland_count.0 + self.gland_count.1) as f64 / 2.0;
        [g, self.gland_radius, self.boundary_thickness, self.nucleus_density]
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.gland_count.0 <= self.gland_count.1
            && self.gland_radius > 0.0
            && (0.0..1.0).contains(&self.radius_jitter)
            && self.boundary_thickness > 0.0
            && self.boundary_thickness <= 1.0
            && self.nucleus_density >= 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("class {} has invalid morphology", self.class_id)));
        }
        Ok(())
    }

    /// Whether some structural parameter differs by at least 20%.
    pub fn distinct_from(&self, other: &ClassSpec) -> bool {
        self.params()
            .iter()
            .zip(other.params())
            .any(|(a, b)| (a - b).abs() >= 0.2 * a.abs().max(b.abs()))
    }

    /// Normal mucosa, dysplasia and carcinoma stand-ins.
    pub fn colon_like() -> Vec<ClassSpec> {
        vec![
            ClassSpec {
                class_id: 0,
                gland_count: (2, 3),
                gland_radius: 0.24,
                radius_jitter: 0.15,
                boundary_thickness: 0.3,
                nucleus_density: 2.0,
            },
            ClassSpec {
                class_id: 1,
                gland_count: (4, 6),
                gland_radius: 0.16,
                radius_jitter: 0.25,
                boundary_thickness: 0.5,
                nucleus_density: 5.0,
            },
            ClassSpec {
                class_id: 2,
                gland_count: (8, 11),
                gland_radius: 0.1,
                radius_jitter: 0.35,
                boundary_thickness: 0.85,
                nucleus_density: 9.0,
            },
        ]
    }
}

/// Magnification arithmetic of grid splitting:
/// `target_size : target_magnification = p_s : source_magnification`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub target_size: usize,
    pub target_magnification: f64,
    pub source_magnification: f64,
}

impl GridSpec {
    /// 224 px at 10×.
    pub fn colon(source_magnification: f64) -> Self {
        Self {
            target_size: 224,
            target_magnification: 10.0,
            source_magnification,
        }
    }

    /// 750 px at 40×.
    pub fn prostate(source_magnification: f64) -> Self {
        Self {
            target_size: 750,
            target_magnification: 40.0,
            source_magnification,
        }
    }

    /// Source patch side `p_s`; non-integer results are rejected.
    pub fn source_patch_size(&self) -> Result<usize> {
        if !(self.target_magnification > 0.0 && self.source_magnification > 0.0) || self.target_size == 0 {
            return Err(Error::InvalidConfig("grid sizes and magnifications must be positive".into()));
        }
        let p = self.target_size as f64 * self.source_magnification / self.target_magnification;
        let r = p.round();
        if (p - r).abs() > 1e-9 * p.max(1.0) || r < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "{} px at {}x does not map to a whole patch at {}x ({p})",
                self.target_size, self.target_magnification, self.source_magnification
            )));
        }
        Ok(r as usize)
    }
}

/// Non-overlapping `p_s × p_s` tiles from the top-left, each resized to
/// the target size; partial tiles at the right and bottom are dropped.
pub fn grid_patches(image: &RgbPatch, grid: &GridSpec) -> Result<Vec<RgbPatch>> {
    let ps = grid.source_patch_size()?;
    let (w, h) = (image.width(), image.height());
    if w < ps || h < ps {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            patch: ps,
        });
    }
    let mut out = Vec::with_capacity((w / ps) * (h / ps));
    for ty in 0..h / ps {
        for tx in 0..w / ps {
            let mut tile = Vec::with_capacity(ps * ps);
            for y in 0..ps {
                let row = (ty * ps + y) * w + tx * ps;
                tile.extend_from_slice(&image.pixels()[row..row + ps]);
            }
            let tile = RgbPatch::new(ps, ps, tile)?;
            out.push(resize_bilinear(&tile, grid.target_size, grid.target_size)?);
        }
    }
    Ok(out)
}

/// Bilinear resampling with pixel centers at half-integer positions.
pub fn resize_bilinear(image: &RgbPatch, width: usize, height: usize) -> Result<RgbPatch> {
    let (sw, sh) = (image.width(), image.height());
    if sw == width && sh == height {
        return Ok(image.clone());
    }
    let src = |x: usize, y: usize| image.pixels()[y * sw + x];
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let pos = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src_len - 1);
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, pos - lo as f64)
    };
    let mut data = Vec::with_capacity(width * height);
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sh, height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sw, width);
            let mut px = [0.0; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let top = src(x0, y0)[c] * (1.0 - fx) + src(x1, y0)[c] * fx;
                let bottom = src(x0, y1)[c] * (1.0 - fx) + src(x1, y1)[c] * fx;
                *v = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
            data.push(px);
        }
    }
    RgbPatch::new(width, height, data)
}

pub const DEFAULT_MASK_THRESHOLD: f64 = 0.1;
pub const MIN_COVERAGE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
    pub coverage: f64,
}

/// Tissue is every pixel whose max-channel OD exceeds `od_threshold`.
pub fn tissue_mask(image: &RgbPatch, od_threshold: f64) -> TissueMask {
    let od = rgb_to_od(image, &OdConfig::default());
    let mask: Vec<bool> = od.max_channel().map(|v| v > od_threshold).collect();
    let coverage = mask.iter().filter(|&&t| t).count() as f64 / mask.len() as f64;
    TissueMask {
        width: image.width(),
        height: image.height(),
        mask,
        coverage,
    }
}

const LUMEN_E: f64 = 0.04;
const STROMA_E: f64 = 0.45;
const STROMA_H: f64 = 0.06;
const RIM_H: f64 = 0.75;
const RIM_E: f64 = 0.3;
const NUCLEUS_H: f64 = 0.9;
const NUCLEUS_RADIUS: f64 = 0.035;
const PIXEL_NOISE: f64 = 0.01;

/// Rotates each row by a normal angle about a random perpendicular axis,
/// redrawing until the result is a valid stain matrix.
pub fn jitter_stain(m: &StainMatrix, jitter_deg: f64, rng: &mut Rng) -> StainMatrix {
    if jitter_deg == 0.0 {
        return *m;
    }
    let angle = Normal::new(0.0, jitter_deg.to_radians()).expect("finite jitter");
    for _ in 0..64 {
        let mut rows = [[0.0; 3]; 2];
        for (out, row) in rows.iter_mut().zip(m.rows()) {
            let r: Rgb = [rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5];
            let d = dot(&r, row);
            let mut perp = [r[0] - d * row[0], r[1] - d * row[1], r[2] - d * row[2]];
            let n = dot(&perp, &perp).sqrt();
            if n < 1e-9 {
                continue;
            }
            perp.iter_mut().for_each(|v| *v /= n);
            let t: f64 = angle.sample(rng);
            for c in 0..3 {
                out[c] = row[c] * t.cos() + perp[c] * t.sin();
            }
        }
        if rows.iter().flatten().all(|&v| v >= 0.0) {
            if let Ok(j) = StainMatrix::from_unnormalized(rows) {
                return j;
            }
        }
    }
    *m
}

fn dot(a: &Rgb, b: &Rgb) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn smoothstep(edge0: f64, edge1: f64, x: f64) -> f64 {
    let t = ((x - edge0) / (edge1 - edge0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// H and E concentration fields of one patch.
pub fn render_concentrations(class: &ClassSpec, size: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    let s = size as f64;
    let mut h = vec![STROMA_H; size * size];
    let mut e = vec![STROMA_E; size * size];
    // low-frequency stromal texture
    let (fx, fy, ph) = (
        rng.random_range(1.0..3.0),
        rng.random_range(1.0..3.0),
        rng.random_range(0.0..std::f64::consts::TAU),
    );
    for y in 0..size {
        for x in 0..size {
            let t = ((fx * x as f64 + fy * y as f64) / s * std::f64::consts::TAU + ph).sin();
            e[y * size + x] *= 1.0 + 0.25 * t;
        }
    }
    let glands = rng.random_range(class.gland_count.0..=class.gland_count.1);
    for _ in 0..glands {
        let cx = rng.random::<f64>() * s;
        let cy = rng.random::<f64>() * s;
        let r = class.gland_radius * s * (1.0 + class.radius_jitter * (2.0 * rng.random::<f64>() - 1.0));
        let aspect = rng.random_range(0.6..1.0);
        let theta = rng.random_range(0.0..std::f64::consts::PI);
        let (ct, st) = (theta.cos(), theta.sin());
        let (rx, ry) = (r.max(1.0), (r * aspect).max(1.0));
        let inner = 1.0 - class.boundary_thickness;
        let reach = rx.max(ry) + 2.0;
        let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach).ceil() as usize).min(size));
        let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let u = (dx * ct + dy * st) / rx;
                let v = (-dx * st + dy * ct) / ry;
                let d = (u * u + v * v).sqrt();
                let inside = 1.0 - smoothstep(0.9, 1.1, d);
                if inside <= 0.0 {
                    continue;
                }
                let rim = if inner <= 0.0 { 1.0 } else { smoothstep(inner - 0.1, inner + 0.1, d) };
                let i = y * size + x;
                let gh = RIM_H * rim;
                let ge = RIM_E * rim + LUMEN_E * (1.0 - rim);
                h[i] = h[i] * (1.0 - inside) + gh * inside;
                e[i] = e[i] * (1.0 - inside) + ge * inside;
            }
        }
    }
    let nuclei = (class.nucleus_density * s * s / 1000.0).round() as usize;
    let sigma = (NUCLEUS_RADIUS * s).max(0.6);
    for _ in 0..nuclei {
        let cx = rng.random::<f64>() * s;
        let cy = rng.random::<f64>() * s;
        let reach = 3.0 * sigma;
        let (x0, x1) = ((cx - reach).max(0.0) as usize, ((cx + reach).ceil() as usize).min(size));
        let (y0, y1) = ((cy - reach).max(0.0) as usize, ((cy + reach).ceil() as usize).min(size));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let w = (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                let i = y * size + x;
                h[i] = h[i].max(NUCLEUS_H * w);
            }
        }
    }
    h.into_iter().zip(e).map(|(a, b)| [a, b]).collect()
}

/// Composes concentrations with a stain matrix under a background level
/// and per-channel response curve, adds pixel noise and quantizes to 8 bits.
pub fn compose_patch(
    conc: &[[f64; 2]],
    size: usize,
    m: &StainMatrix,
    background: f64,
    gamma: [f64; 3],
    noise: f64,
    rng: &mut Rng,
) -> Result<RgbPatch> {
    let od = OdImage {
        width: size,
        height: size,
        data: conc.iter().map(|&c| m.compose(c)).collect(),
    };
    let clean = od_to_rgb(&od, &OdConfig::default());
    let dist = Normal::new(0.0, noise.max(0.0)).expect("finite noise");
    let data = clean
        .pixels()
        .iter()
        .map(|px| {
            let mut out = [0.0; 3];
            for c in 0..3 {
                let v = (px[c] * background).powf(gamma[c]);
                let n = if noise > 0.0 { dist.sample(rng) } else { 0.0 };
                out[c] = (v + n).clamp(0.0, 1.0);
            }
            out
        })
        .collect();
    Ok(RgbPatch::new(size, size, data)?.quantized())
}

/// Draws one labeled patch of `class` as stained at `center`.
pub fn render_patch(class: &ClassSpec, center: &CenterSpec, size: usize, rng: &mut Rng) -> Result<LabeledPatch> {
    let m = jitter_stain(&center.stain_matrix, center.stain_jitter_deg, rng);
    let scale = rng.random_range(center.intensity.0..=center.intensity.1);
    let conc: Vec<[f64; 2]> = render_concentrations(class, size, rng)
        .into_iter()
        .map(|[a, b]| [a * scale, b * scale])
        .collect();
    let patch = compose_patch(&conc, size, &m, center.background, center.gamma, PIXEL_NOISE, rng)?;
    Ok(LabeledPatch {
        patch,
        y: class.class_id,
        m,
        center_id: center.center_id,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    InternalTest,
    ExternalTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::InternalTest, Split::ExternalTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::InternalTest => "internal_test",
            Split::ExternalTest => "external_test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown split `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub centers: Vec<CenterSpec>,
    pub classes: Vec<ClassSpec>,
    pub patch_size: usize,
    /// Patches per class per center unless a center overrides it.
    pub patches_per_class: usize,
    /// Centers used only as the external test set.
    pub held_out: Vec<usize>,
    /// Fractions of each in-distribution center/class going to train and val;
    /// the rest is the internal test set.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub mask_threshold: f64,
    pub min_coverage: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::four_center(32, 200, 0)
    }
}

impl DatasetSpec {
    /// Two in-distribution centers plus two held-out centers with
    /// progressively shifted stains.
    pub fn four_center(patch_size: usize, patches_per_class: usize, seed: u64) -> Self {
        let m = |h: Rgb, e: Rgb| StainMatrix::from_unnormalized([h, e]).expect("valid preset");
        let n = patches_per_class;
        // the two training centers see the classes in opposite proportions
        let skewed = |w: [usize; 3]| Some(w.iter().map(|k| n * k / 2).collect::<Vec<_>>());
        let center = |id, stain_matrix, intensity, background, gamma, class_counts| CenterSpec {
            center_id: id,
            stain_matrix,
            stain_jitter_deg: 3.0,
            intensity,
            background,
            gamma,
            class_counts,
        };
        Self {
            centers: vec![
                center(0, m([0.65, 0.70, 0.29], [0.07, 0.99, 0.11]), (0.8, 1.2), 1.0, [1.0; 3], skewed([3, 2, 1])),
                center(1, m([0.55, 0.75, 0.37], [0.12, 0.92, 0.37]), (0.7, 1.1), 0.97, [1.1, 0.95, 0.9], skewed([1, 2, 3])),
                center(2, m([0.42, 0.80, 0.43], [0.05, 0.90, 0.43]), (0.8, 1.3), 0.98, [0.85, 1.1, 1.2], None),
                center(3, m([0.74, 0.62, 0.25], [0.20, 0.95, 0.22]), (0.6, 1.0), 0.95, [1.2, 0.9, 1.0], None),
            ],
            classes: ClassSpec::colon_like(),
            patch_size,
            patches_per_class,
            held_out: vec![2, 3],
            train_fraction: 0.6,
            val_fraction: 0.2,
            seed,
            mask_threshold: DEFAULT_MASK_THRESHOLD,
            min_coverage: MIN_COVERAGE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.centers.len() < 3 {
            return Err(Error::InsufficientCenters(self.centers.len()));
        }
        let mut ids: Vec<usize> = self.centers.iter().map(|c| c.center_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.centers.len() {
            return Err(Error::InvalidConfig("center ids must be distinct".into()));
        }
        if self.held_out.is_empty() || self.held_out.len() >= self.centers.len() {
            return Err(Error::InsufficientCenters(self.centers.len()));
        }
        if let Some(h) = self.held_out.iter().find(|h| ids.binary_search(h).is_err()) {
            return Err(Error::InvalidConfig(format!("held-out center {h} is not defined")));
        }
        for c in &self.centers {
            c.validate()?;
            if let Some(counts) = &c.class_counts {
                if counts.len() != self.classes.len() {
                    return Err(Error::InvalidConfig(format!(
                        "center {} lists {} class counts for {} classes",
                        c.center_id,
                        counts.len(),
                        self.classes.len()
                    )));
                }
            }
        }
        if self.classes.len() < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        for (i, c) in self.classes.iter().enumerate() {
            c.validate()?;
            if c.class_id != i {
                return Err(Error::InvalidConfig("class ids must be 0..K in order".into()));
            }
            for other in &self.classes[..i] {
                if !c.distinct_from(other) {
                    return Err(Error::InvalidConfig(format!(
                        "classes {} and {} differ by less than 20% in every parameter",
                        other.class_id, c.class_id
                    )));
                }
            }
        }
        if self.patch_size < 8 {
            return Err(Error::InvalidConfig("patch size must be at least 8".into()));
        }
        let f = (self.train_fraction, self.val_fraction);
        if !(f.0 > 0.0 && f.1 > 0.0 && f.0 + f.1 < 1.0) {
            return Err(Error::InvalidConfig("train and val fractions must be positive and sum below 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_coverage) || !(self.mask_threshold > 0.0) {
            return Err(Error::InvalidConfig("invalid tissue-mask settings".into()));
        }
        Ok(())
    }

    /// Patches of `class` rendered for `center`.
    pub fn count(&self, center: &CenterSpec, class: usize) -> usize {
        center
            .class_counts
            .as_ref()
            .map_or(self.patches_per_class, |c| c[class])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub patch: LabeledPatch,
    pub split: Split,
    /// Index within its center and class.
    pub index: usize,
}

impl DatasetEntry {
    pub fn relative_path(&self) -> String {
        format!(
            "center_{}/class_{}/patch_{}.png",
            self.patch.center_id, self.patch.y, self.index
        )
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<LabeledPatch> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.patch.clone())
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

const MAX_RENDER_ATTEMPTS: u64 = 100;

/// Renders the dataset; a pure function of `spec`.
///
/// Every patch has its own seed derived from (center, class, index), and
/// patches whose tissue coverage falls below the cutoff are redrawn.
pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut entries = Vec::new();
    for center in &spec.centers {
        let held_out = spec.held_out.contains(&center.center_id);
        for class in &spec.classes {
            let n = spec.count(center, class.class_id);
            let mut order: Vec<usize> = (0..n).collect();
            let split_seed = derive_seed(spec.seed, &[center.center_id as u64, class.class_id as u64, u64::MAX]);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seeded(split_seed));
            let n_train = (n as f64 * spec.train_fraction).round() as usize;
            let n_val = ((n as f64 * spec.val_fraction).round() as usize).min(n - n_train);
            let mut split_of = vec![Split::InternalTest; n];
            for (rank, &i) in order.iter().enumerate() {
                split_of[i] = if held_out {
                    Split::ExternalTest
                } else if rank < n_train {
                    Split::Train
                } else if rank < n_train + n_val {
                    Split::Val
                } else {
                    Split::InternalTest
                };
            }
            for (index, &split) in split_of.iter().enumerate() {
                let patch = render_accepted(spec, center, class, index)?;
                entries.push(DatasetEntry { patch, split, index });
            }
        }
    }
    Ok(Dataset { entries })
}

fn render_accepted(spec: &DatasetSpec, center: &CenterSpec, class: &ClassSpec, index: usize) -> Result<LabeledPatch> {
    for attempt in 0..MAX_RENDER_ATTEMPTS {
        let seed = derive_seed(
            spec.seed,
            &[center.center_id as u64, class.class_id as u64, index as u64, attempt],
        );
        let lp = render_patch(class, center, spec.patch_size, &mut seeded(seed))?;
        if tissue_mask(&lp.patch, spec.mask_threshold).coverage >= spec.min_coverage {
            return Ok(lp);
        }
    }
    Err(Error::InvalidConfig(format!(
        "center {} class {} never reaches {:.0}% tissue coverage",
        center.center_id,
        class.class_id,
        spec.min_coverage * 100.0
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn magnification_presets() {
        assert_eq!(GridSpec::colon(40.0).source_patch_size().unwrap(), 896);
        assert_eq!(GridSpec::prostate(40.0).source_patch_size().unwrap(), 750);
        assert!(GridSpec::colon(7.0).source_patch_size().is_err());
    }

    #[test]
    fn two_tiles_from_a_wide_image() {
        let img = RgbPatch::filled(1800, 900, [0.5; 3]).unwrap();
        let tiles = grid_patches(&img, &GridSpec::colon(40.0)).unwrap();
        assert_eq!(tiles.len(), 2);
        assert_eq!((tiles[0].width(), tiles[0].height()), (224, 224));
    }

    #[test]
    fn small_image_is_rejected() {
        let img = RgbPatch::filled(800, 900, [0.5; 3]).unwrap();
        assert!(matches!(
            grid_patches(&img, &GridSpec::colon(40.0)),
            Err(Error::ImageTooSmall { patch: 896, .. })
        ));
    }

    #[test]
    fn coverage_extremes() {
        let white = RgbPatch::filled(8, 8, [1.0; 3]).unwrap();
        assert_eq!(tissue_mask(&white, 0.1).coverage, 0.0);
        let dark = RgbPatch::filled(8, 8, [0.2; 3]).unwrap();
        assert_eq!(tissue_mask(&dark, 0.1).coverage, 1.0);
    }

    #[test]
    fn zero_concentration_is_white() {
        let conc = vec![[0.0, 0.0]; 16];
        let p = compose_patch(&conc, 4, &StainMatrix::conventional(), 1.0, [1.0; 3], 0.0, &mut seeded(0)).unwrap();
        assert!(p.pixels().iter().all(|px| *px == [1.0; 3]));
    }

    #[test]
    fn preset_classes_are_distinct() {
        let c = ClassSpec::colon_like();
        assert!(c[0].distinct_from(&c[1]) && c[1].distinct_from(&c[2]) && c[0].distinct_from(&c[2]));
        assert!(!c[0].distinct_from(&c[0].clone()));
    }

    #[test]
    fn three_centers_minimum() {
        let mut spec = DatasetSpec::four_center(16, 2, 0);
        spec.centers.truncate(2);
        spec.held_out = vec![1];
        assert!(matches!(build_dataset(&spec), Err(Error::InsufficientCenters(2))));
    }
}
