//! Central finite-difference verification of analytic gradients.

/// Default step for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// A coordinate is treated as sitting on a kink (e.g. a ReLU at zero) when
/// the gap between one-sided slopes fails to halve with the step, relative
/// to this tolerance. Smooth coordinates halve it up to O(h³).
pub const KINK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// max over checked coordinates of `|a − n| / max(|a|, |n|, 1e-8)`.
    pub max_rel_error: f64,
    /// Coordinate attaining the maximum.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates excluded as non-differentiable.
    pub kinks: Vec<usize>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Finite-difference slope of `f` at `theta` along coordinate `i`.
/// Returns `None` when the function is not differentiable there.
pub fn numeric_partial<F: FnMut(&[f64]) -> f64>(
    f: &mut F,
    theta: &mut [f64],
    i: usize,
    h: f64,
) -> Option<f64> {
    let orig = theta[i];
    let f0 = f(theta);
    let mut at = |x: f64, theta: &mut [f64]| {
        theta[i] = x;
        let v = f(theta);
        theta[i] = orig;
        v
    };
    let (fp, fm) = (at(orig + h, theta), at(orig - h, theta));
    let (fp2, fm2) = (at(orig + h / 2.0, theta), at(orig - h / 2.0, theta));
    let gap = (fp - 2.0 * f0 + fm) / h;
    let gap_half = (fp2 - 2.0 * f0 + fm2) / (h / 2.0);
    let c = (fp - fm) / (2.0 * h);
    if (gap_half - gap / 2.0).abs() > KINK_TOLERANCE * c.abs().max(1e-4) {
        return None;
    }
    Some(c)
}

/// Compares `analytic` against central differences of `f` at every
/// coordinate listed in `coords` (all coordinates when `None`).
pub fn finite_diff_check<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    coords: Option<&[usize]>,
) -> FdReport {
    assert_eq!(theta.len(), analytic.len(), "gradient length");
    let mut work = theta.to_vec();
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..theta.len()).collect();
            &all
        }
    };
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        kinks: Vec::new(),
    };
    for &i in coords {
        match numeric_partial(&mut f, &mut work, i, h) {
            None => report.kinks.push(i),
            Some(n) => {
                let e = relative_error(analytic[i], n);
                report.checked += 1;
                if e > report.max_rel_error || report.worst_index.is_none() {
                    report.max_rel_error = report.max_rel_error.max(e);
                    report.worst_index = Some(i);
                }
            }
        }
    }
    report
}
