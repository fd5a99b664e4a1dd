//! Repeated multi-mode training runs and the comparison report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{quadratic_kappa, stain_invariance_probe, wilcoxon_rank_sum, RankSumResult};
use crate::model::MethodMode;
use crate::rng::{derive_seed, hash_str};
use crate::stats::{mean, std_dev};
use crate::synth::{Dataset, Split};
use crate::train::{train, LabeledPatch, TrainConfig, TrainHistory, TrainedModel};

/// Seed of repetition `i` of `mode`; adding a mode leaves the others alone.
pub fn run_seed(master: u64, mode: MethodMode, i: usize) -> u64 {
    derive_seed(master, &[hash_str(mode.name()), i as u64])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub modes: Vec<MethodMode>,
    pub repetitions: usize,
    pub master_seed: u64,
    /// Shared training settings; `mode`, `seed` and `lambda` are set per run.
    pub train: TrainConfig,
    /// Per-mode λ overrides.
    pub lambda: BTreeMap<MethodMode, f64>,
    /// The mode tested against its best competitor.
    pub proposed: MethodMode,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            modes: MethodMode::ALL.to_vec(),
            repetitions: 10,
            master_seed: 0,
            train: TrainConfig::default(),
            lambda: BTreeMap::new(),
            proposed: MethodMode::HeAdv,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modes.len() < 2 {
            return Err(Error::InvalidConfig(format!(
                "comparison needs at least 2 modes, got {}",
                self.modes.len()
            )));
        }
        if self.repetitions == 0 {
            return Err(Error::InvalidConfig("repetitions must be at least 1".into()));
        }
        self.train.validate()?;
        for &l in self.lambda.values() {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        Ok(())
    }

    /// Training config of one run.
    pub fn run_config(&self, mode: MethodMode, rep: usize) -> TrainConfig {
        TrainConfig {
            mode,
            seed: run_seed(self.master_seed, mode, rep),
            lambda: self.lambda.get(&mode).copied().or(self.train.lambda),
            ..self.train.clone()
        }
    }
}

/// Evaluation of one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: MethodMode,
    pub repetition: usize,
    pub seed: u64,
    pub kappa_internal: Option<f64>,
    pub kappa_external: Option<f64>,
    /// Internal and external test patches pooled into one confusion matrix.
    pub kappa_cumulative: Option<f64>,
    /// Center-probe accuracy on test-set features.
    pub probe_accuracy: Option<f64>,
    pub probe_chance: Option<f64>,
    pub history: TrainHistory,
    /// Hash of everything that determines this run.
    pub config_hash: String,
}

fn kappa_or_none(pred: &[usize], truth: &[usize], k: usize) -> Result<Option<f64>> {
    if pred.is_empty() {
        return Ok(None);
    }
    match quadratic_kappa(pred, truth, k) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedKappa) => Ok(None),
        Err(e) => Err(e),
    }
}

/// κ on the internal, external and pooled test sets plus the probe.
pub fn evaluate(
    model: &TrainedModel,
    internal: &[LabeledPatch],
    external: &[LabeledPatch],
) -> Result<(Option<f64>, Option<f64>, Option<f64>, Option<(f64, f64)>)> {
    let k = model.model.arch.n_classes;
    let all: Vec<&LabeledPatch> = internal.iter().chain(external).collect();
    let patches: Vec<_> = all.iter().map(|p| &p.patch).collect();
    let (feats, probs) = {
        let f = model.features_batch(&patches)?;
        let p = model.predict_batch(&patches)?;
        (f, p)
    };
    let pred: Vec<usize> = probs.iter().map(|p| crate::train::argmax(p)).collect();
    let truth: Vec<usize> = all.iter().map(|p| p.y).collect();
    let ni = internal.len();
    let ki = kappa_or_none(&pred[..ni], &truth[..ni], k)?;
    let ke = kappa_or_none(&pred[ni..], &truth[ni..], k)?;
    let kc = kappa_or_none(&pred, &truth, k)?;
    let centers: Vec<usize> = all.iter().map(|p| p.center_id).collect();
    let probe = match stain_invariance_probe(&feats, &centers) {
        Ok(r) => Some((r.accuracy, r.chance)),
        Err(Error::InsufficientSamples(_)) => None,
        Err(e) => return Err(e),
    };
    Ok((ki, ke, kc, probe))
}

/// Trains and evaluates repetition `rep` of `mode`.
pub fn run_one(dataset: &Dataset, cfg: &ExperimentConfig, mode: MethodMode, rep: usize, hash: &str) -> Result<RunResult> {
    let tc = cfg.run_config(mode, rep);
    let train_set = dataset.split(Split::Train);
    let val_set = dataset.split(Split::Val);
    let out = train(&train_set, &val_set, &tc)?;
    let (ki, ke, kc, probe) = evaluate(
        &out.model,
        &dataset.split(Split::InternalTest),
        &dataset.split(Split::ExternalTest),
    )?;
    Ok(RunResult {
        mode,
        repetition: rep,
        seed: tc.seed,
        kappa_internal: ki,
        kappa_external: ke,
        kappa_cumulative: kc,
        probe_accuracy: probe.map(|p| p.0),
        probe_chance: probe.map(|p| p.1),
        history: out.history,
        config_hash: hash.to_string(),
    })
}

/// Stable hash of a run's full configuration.
pub fn config_hash(dataset_key: &str, tc: &TrainConfig) -> Result<String> {
    let json = serde_json::to_string(tc)?;
    Ok(format!("{:016x}", hash_str(&format!("{dataset_key}\n{json}"))))
}

/// Runs every distinct (mode, repetition) pair, in parallel, reusing results
/// already stored under `cache_dir` with a matching configuration hash.
/// Results come back in (mode order, repetition) order.
pub fn run_experiment(
    dataset: &Dataset,
    dataset_key: &str,
    cfg: &ExperimentConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();
    let jobs: Vec<(MethodMode, usize)> = modes
        .iter()
        .flat_map(|&m| (0..cfg.repetitions).map(move |r| (m, r)))
        .collect();
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir)?;
    }
    jobs.par_iter()
        .map(|&(mode, rep)| {
            let hash = config_hash(dataset_key, &cfg.run_config(mode, rep))?;
            let path = cache_dir.map(|d| d.join(format!("{}_{rep}.json", mode.name())));
            if let Some(p) = path.as_ref().filter(|p| p.exists()) {
                if let Ok(prev) = serde_json::from_slice::<RunResult>(&fs::read(p)?) {
                    if prev.config_hash == hash {
                        return Ok(prev);
                    }
                }
            }
            let result = run_one(dataset, cfg, mode, rep, &hash)?;
            if let Some(p) = path {
                fs::write(p, serde_json::to_vec_pretty(&result)?)?;
            }
            Ok(result)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestSplit {
    Internal,
    External,
    Cumulative,
}

impl TestSplit {
    pub const ALL: [TestSplit; 3] = [TestSplit::Internal, TestSplit::External, TestSplit::Cumulative];

    pub fn name(self) -> &'static str {
        match self {
            TestSplit::Internal => "internal",
            TestSplit::External => "external",
            TestSplit::Cumulative => "cumulative",
        }
    }

    pub fn of(self, r: &RunResult) -> Option<f64> {
        match self {
            TestSplit::Internal => r.kappa_internal,
            TestSplit::External => r.kappa_external,
            TestSplit::Cumulative => r.kappa_cumulative,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: f64,
    pub std: f64,
    /// Runs whose κ was defined.
    pub n: usize,
    /// Set on the proposed mode's cell when it differs significantly from
    /// the best competitor on that split.
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub mode: MethodMode,
    pub cells: Vec<Cell>,
    pub probe_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitTest {
    pub split: TestSplit,
    pub competitor: MethodMode,
    pub test: Option<RankSumResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    pub proposed: MethodMode,
    pub tests: Vec<SplitTest>,
}

pub const SIGNIFICANCE: f64 = 0.05;

fn samples(results: &[RunResult], mode: MethodMode, split: TestSplit) -> Vec<f64> {
    results
        .iter()
        .filter(|r| r.mode == mode)
        .filter_map(|r| split.of(r))
        .collect()
}

/// Mean ± std per mode and split, with a rank-sum test of the proposed mode
/// against the competitor with the highest mean on each split. Rows follow
/// the order of `modes`, duplicates included.
pub fn build_report(results: &[RunResult], modes: &[MethodMode], proposed: MethodMode) -> Report {
    let proposed = if modes.contains(&proposed) { proposed } else { modes[0] };
    let mut tests = Vec::new();
    for split in TestSplit::ALL {
        let mine = samples(results, proposed, split);
        // the first listed mode other than the proposed one's own row
        let own_row = modes.iter().position(|&m| m == proposed).expect("present");
        let best = modes
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != own_row)
            .map(|(_, &m)| (m, mean(&samples(results, m, split))))
            .filter(|(_, v)| v.is_finite())
            .fold(None::<(MethodMode, f64)>, |acc, c| match acc {
                Some(a) if a.1 >= c.1 => Some(a),
                _ => Some(c),
            });
        if let Some((competitor, _)) = best {
            let theirs = samples(results, competitor, split);
            tests.push(SplitTest {
                split,
                competitor,
                test: wilcoxon_rank_sum(&mine, &theirs).ok(),
            });
        }
    }
    let rows = modes
        .iter()
        .map(|&mode| {
            let cells = TestSplit::ALL
                .iter()
                .map(|&split| {
                    let v = samples(results, mode, split);
                    let significant = mode == proposed
                        && tests
                            .iter()
                            .any(|t| t.split == split && t.test.is_some_and(|r| r.p_value < SIGNIFICANCE));
                    Cell {
                        mean: mean(&v),
                        std: std_dev(&v),
                        n: v.len(),
                        significant,
                    }
                })
                .collect();
            let probes: Vec<f64> = results
                .iter()
                .filter(|r| r.mode == mode)
                .filter_map(|r| r.probe_accuracy)
                .collect();
            ReportRow {
                mode,
                cells,
                probe_accuracy: mean(&probes),
            }
        })
        .collect();
    Report { rows, proposed, tests }
}

impl Report {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode");
        for s in TestSplit::ALL {
            let _ = write!(out, ",{0}_mean,{0}_std,{0}_significant", s.name());
        }
        out.push_str(",probe_accuracy\n");
        for row in &self.rows {
            out.push_str(row.mode.name());
            for c in &row.cells {
                let _ = write!(out, ",{:.6},{:.6},{}", c.mean, c.std, c.significant);
            }
            let _ = writeln!(out, ",{:.6}", row.probe_accuracy);
        }
        out
    }

    /// Aligned text table; `*` marks p < 0.05 against the best competitor.
    pub fn to_text(&self) -> String {
        let header: Vec<String> = std::iter::once("mode".to_string())
            .chain(TestSplit::ALL.iter().map(|s| format!("{} kappa", s.name())))
            .chain(std::iter::once("probe acc".to_string()))
            .collect();
        let mut lines = vec![header];
        for row in &self.rows {
            let mut cols = vec![row.mode.name().to_string()];
            for c in &row.cells {
                let star = if c.significant { "*" } else { "" };
                cols.push(format!("{:.3} ± {:.3}{star}", c.mean, c.std));
            }
            cols.push(format!("{:.3}", row.probe_accuracy));
            lines.push(cols);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|j| lines.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for l in &lines {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
        }
        for t in &self.tests {
            let p = t.test.map_or("n/a".to_string(), |r| format!("{:.4}", r.p_value));
            let _ = writeln!(
                out,
                "{} vs {} ({}): p = {p}",
                self.proposed.name(),
                t.competitor.name(),
                t.split.name()
            );
        }
        out
    }
}
