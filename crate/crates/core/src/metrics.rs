//! Evaluation statistics: quadratic-weighted Cohen's κ, the Wilcoxon
//! rank-sum test, 2-D PCA projection and a linear probe that measures how
//! well frozen features identify their source center.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Quadratic-weighted Cohen's κ with sample-marginal expected counts.
pub fn quadratic_kappa(predictions: &[usize], truths: &[usize], n_classes: usize) -> Result<f64> {
    if predictions.len() != truths.len() || predictions.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "kappa needs equal, nonempty label vectors, got {} and {}",
            predictions.len(),
            truths.len()
        )));
    }
    if n_classes < 2 {
        return Err(Error::InvalidConfig("kappa needs at least 2 classes".into()));
    }
    if let Some(&bad) = predictions.iter().chain(truths).find(|&&c| c >= n_classes) {
        return Err(Error::InvalidConfig(format!("class id {bad} >= {n_classes}")));
    }
    let k = n_classes;
    let n = predictions.len() as f64;
    let mut observed = vec![0.0; k * k];
    let mut row = vec![0.0; k];
    let mut col = vec![0.0; k];
    for (&p, &t) in predictions.iter().zip(truths) {
        observed[t * k + p] += 1.0;
        row[t] += 1.0;
        col[p] += 1.0;
    }
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64) - (j as f64)).powi(2) / denom_w;
            num += w * observed[i * k + j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedKappa);
    }
    Ok(1.0 - num / den)
}

/// Outcome of a two-sided rank-sum test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Mann–Whitney U of the first sample (midranks for ties).
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Largest pooled size for which the p-value is computed exactly.
pub const EXACT_LIMIT: usize = 12;

const MIN_SAMPLE: usize = 3;

/// Pooled midranks (1-based), in input order.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && values[idx[j]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + 1 + j) as f64 / 2.0;
        for &t in &idx[i..j] {
            ranks[t] = r;
        }
        i = j;
    }
    ranks
}

fn check_samples(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < MIN_SAMPLE || b.len() < MIN_SAMPLE {
        return Err(Error::SampleTooSmall {
            a: a.len(),
            b: b.len(),
            required: MIN_SAMPLE,
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank-sum sample".into()));
    }
    Ok(())
}

fn pooled(a: &[f64], b: &[f64]) -> (Vec<f64>, f64) {
    let all: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&all);
    let n = a.len() as f64;
    let u = ranks[..a.len()].iter().sum::<f64>() - n * (n + 1.0) / 2.0;
    (ranks, u)
}

/// Two-sided Wilcoxon rank-sum test; exact when `|a| + |b| <= 12`,
/// tie-corrected normal approximation otherwise.
pub fn wilcoxon_rank_sum(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    check_samples(a, b)?;
    if a.len() + b.len() <= EXACT_LIMIT {
        wilcoxon_exact(a, b)
    } else {
        wilcoxon_normal(a, b)
    }
}

/// Exact permutation p-value over all `C(n+m, n)` rank assignments.
pub fn wilcoxon_exact(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    check_samples(a, b)?;
    let (ranks, u) = pooled(a, b);
    let n = a.len();
    // doubled midranks are integers, so subset sums can be counted exactly
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // ways[k][s]: subsets of size k with doubled rank sum s
    let mut ways = vec![vec![0u64; max_sum + 1]; n + 1];
    ways[0][0] = 1;
    for &d in &doubled {
        for k in (1..=n).rev() {
            for s in (d..=max_sum).rev() {
                ways[k][s] += ways[k - 1][s - d];
            }
        }
    }
    let total: u64 = ways[n].iter().sum();
    let observed: usize = doubled[..n].iter().sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for (s, &c) in ways[n].iter().enumerate() {
        if s <= observed {
            le += c;
        }
        if s >= observed {
            ge += c;
        }
    }
    let tail = le.min(ge) as f64 / total as f64;
    Ok(RankSumResult {
        u,
        p_value: (2.0 * tail).min(1.0),
        exact: true,
    })
}

/// Normal approximation with tie and continuity corrections.
pub fn wilcoxon_normal(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    check_samples(a, b)?;
    let (ranks, u) = pooled(a, b);
    let (n, m) = (a.len() as f64, b.len() as f64);
    let big_n = n + m;
    let mut sorted = ranks.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = n * m / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    let mean = n * m / 2.0;
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
        (2.0 * (1.0 - std_normal.cdf(z))).min(1.0)
    };
    Ok(RankSumResult {
        u,
        p_value,
        exact: false,
    })
}

/// 2-D (or `k`-D) principal-component projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    /// Orthonormal component directions, one per output dimension.
    pub components: Vec<Vec<f64>>,
    /// Per-sample coordinates on the components.
    pub coordinates: Vec<Vec<f64>>,
    /// Share of the total variance captured by each component.
    pub explained: Vec<f64>,
    pub mean: Vec<f64>,
}

/// Mean-centered PCA via symmetric eigendecomposition of the covariance.
/// Each component's largest-magnitude entry is made positive.
pub fn pca_project(vectors: &[Vec<f64>], out_dims: usize) -> Result<Projection> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::InsufficientSamples(format!("PCA needs at least 3 vectors, got {n}")));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch(format!(
            "PCA needs equal-length vectors of dimension >= 2 (first has {d})"
        )));
    }
    if out_dims == 0 || out_dims > d {
        return Err(Error::InvalidConfig(format!("cannot project {d}-D data onto {out_dims} dims")));
    }
    if vectors.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x / n as f64;
        }
    }
    let centered = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let scale = values.first().copied().unwrap_or(0.0).max(1.0);
    if total <= 1e-12 * scale || total == 0.0 {
        return Err(Error::DegenerateData("all vectors are identical".into()));
    }
    let mut components = Vec::with_capacity(out_dims);
    for &i in &order[..out_dims] {
        let mut c: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        let lead = c.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if lead < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
    }
    let coordinates = (0..n)
        .map(|i| {
            components
                .iter()
                .map(|c| (0..d).map(|j| centered[(i, j)] * c[j]).sum())
                .collect()
        })
        .collect();
    Ok(Projection {
        components,
        coordinates,
        explained: values[..out_dims].iter().map(|v| v / total).collect(),
        mean,
    })
}

/// Cross-validated accuracy of a linear probe predicting the center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent center.
    pub chance: f64,
}

pub const PROBE_FOLDS: usize = 5;
pub const PROBE_MIN_PER_CENTER: usize = 20;
const PROBE_ITERS: usize = 300;
const PROBE_STEP: f64 = 0.5;
const PROBE_L2: f64 = 1e-3;

/// 5-fold cross-validated multinomial logistic regression on standardized
/// features. Folds are assigned round-robin within each center, so the
/// result is deterministic. Lower accuracy means more stain-invariant
/// features.
pub fn stain_invariance_probe(features: &[Vec<f64>], center_ids: &[usize]) -> Result<ProbeResult> {
    if features.len() != center_ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} feature vectors but {} center ids",
            features.len(),
            center_ids.len()
        )));
    }
    let mut centers: Vec<usize> = center_ids.to_vec();
    centers.sort_unstable();
    centers.dedup();
    if centers.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "probe needs at least 2 centers, got {}",
            centers.len()
        )));
    }
    let labels: Vec<usize> = center_ids
        .iter()
        .map(|c| centers.binary_search(c).expect("present"))
        .collect();
    let mut counts = vec![0usize; centers.len()];
    for &l in &labels {
        counts[l] += 1;
    }
    if let Some(min) = counts.iter().copied().min().filter(|&m| m < PROBE_MIN_PER_CENTER) {
        return Err(Error::InsufficientSamples(format!(
            "probe needs {PROBE_MIN_PER_CENTER} samples per center, smallest has {min}"
        )));
    }
    let f = features[0].len();
    if f == 0 || features.iter().any(|v| v.len() != f) {
        return Err(Error::ShapeMismatch("feature vectors must share a nonzero length".into()));
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("probe features".into()));
    }

    let mut seen = vec![0usize; centers.len()];
    let folds: Vec<usize> = labels
        .iter()
        .map(|&l| {
            seen[l] += 1;
            (seen[l] - 1) % PROBE_FOLDS
        })
        .collect();

    let mut correct = 0usize;
    for fold in 0..PROBE_FOLDS {
        let train: Vec<usize> = (0..features.len()).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..features.len()).filter(|&i| folds[i] == fold).collect();
        let (mu, sd) = standardizer(features, &train);
        let z = |i: usize| -> Vec<f64> {
            features[i]
                .iter()
                .zip(mu.iter().zip(&sd))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        };
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();
        let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let model = fit_softmax(&xs, &ys, centers.len());
        correct += test
            .iter()
            .filter(|&&i| model.predict(&z(i)) == labels[i])
            .count();
    }
    let n = features.len() as f64;
    Ok(ProbeResult {
        accuracy: correct as f64 / n,
        chance: *counts.iter().max().expect("nonempty") as f64 / n,
    })
}

fn standardizer(features: &[Vec<f64>], rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let f = features[0].len();
    let n = rows.len() as f64;
    let mut mu = vec![0.0; f];
    for &i in rows {
        for (m, x) in mu.iter_mut().zip(&features[i]) {
            *m += x / n;
        }
    }
    let mut var = vec![0.0; f];
    for &i in rows {
        for ((v, x), m) in var.iter_mut().zip(&features[i]).zip(&mu) {
            *v += (x - m).powi(2) / n;
        }
    }
    // constant features carry no signal; a unit scale keeps them at zero
    let sd = var.iter().map(|v| if *v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mu, sd)
}

struct Softmax {
    /// `[classes][features + 1]`, bias last.
    weights: Vec<Vec<f64>>,
}

impl Softmax {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..x.len()].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[x.len()])
            .collect()
    }

    fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        (0..s.len()).fold(0, |best, k| if s[k] > s[best] { k } else { best })
    }
}

fn fit_softmax(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Softmax {
    let f = xs[0].len();
    let n = xs.len() as f64;
    let mut model = Softmax {
        weights: vec![vec![0.0; f + 1]; classes],
    };
    let mut grad = vec![vec![0.0; f + 1]; classes];
    for _ in 0..PROBE_ITERS {
        grad.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
        for (x, &y) in xs.iter().zip(ys) {
            let s = model.scores(x);
            let top = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for k in 0..classes {
                let d = e[k] / z - if k == y { 1.0 } else { 0.0 };
                for (g, xv) in grad[k][..f].iter_mut().zip(x) {
                    *g += d * xv / n;
                }
                grad[k][f] += d / n;
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&grad) {
            for j in 0..=f {
                let decay = if j < f { PROBE_L2 * w[j] } else { 0.0 };
                w[j] -= PROBE_STEP * (g[j] + decay);
            }
        }
    }
    model
}
