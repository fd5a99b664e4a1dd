//! Training loop for the six method modes, with validation-based early
//! stopping and best-checkpoint selection.

use std::borrow::Cow;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::augment::{geometric_augment, hsv_augment, stain_augment, HsvAugConfig, Preset, StainAugConfig};
use crate::color::{OdConfig, RgbPatch};
use crate::deconv::{normalize_to_target, MacenkoParams, StainMatrix, StainTarget};
use crate::error::{Error, Result};
use crate::metrics::quadratic_kappa;
use crate::model::{build_model, ArchSpec, AuxHead, AuxTarget, MethodMode, Model};
use crate::nn::ops::{cross_entropy_loss, softmax};
use crate::nn::{apply_update_with_rates, GroupRates, OptimConfig, OptimState, Tensor};
use crate::rng::{derive_seed, seeded};

/// One training example: the patch, its class, the H&E matrix the
/// adversarial head regresses, and the center it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub patch: RgbPatch,
    pub y: usize,
    pub m: StainMatrix,
    pub center_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: MethodMode,
    /// Reversal strength; `None` takes the mode's default.
    pub lambda: Option<f64>,
    pub optim: OptimConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub preset: Preset,
    /// Overrides the preset's HSV ranges.
    pub hsv: Option<HsvAugConfig>,
    pub stain_aug: StainAugConfig,
    pub macenko: MacenkoParams,
    pub od: OdConfig,
    /// Conv block widths of the extractor.
    pub channels: Vec<usize>,
    pub hidden: usize,
    /// Defaults to `max(y) + 1` over the training and validation data.
    pub n_classes: Option<usize>,
    /// Oversample minority classes up to the majority count.
    pub balance_classes: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: MethodMode::None,
            lambda: None,
            optim: OptimConfig::default(),
            max_epochs: 15,
            patience: 5,
            batch_size: 32,
            seed: 0,
            preset: Preset::default(),
            hsv: None,
            stain_aug: StainAugConfig::default(),
            macenko: MacenkoParams::default(),
            od: OdConfig::default(),
            channels: vec![16, 32, 64],
            hidden: 128,
            n_classes: None,
            balance_classes: true,
        }
    }
}

impl TrainConfig {
    /// λ actually used: zero for modes without an adversarial head.
    pub fn effective_lambda(&self) -> f64 {
        if self.mode.is_adversarial() {
            self.lambda.unwrap_or(self.mode.default_lambda())
        } else {
            0.0
        }
    }

    pub fn hsv_config(&self) -> HsvAugConfig {
        self.hsv.unwrap_or(self.preset.hsv())
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "max_epochs, patience and batch_size must be at least 1".into(),
            ));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidConfig(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        self.optim.validate()?;
        self.hsv_config().validate()?;
        self.stain_aug.validate()?;
        self.od.validate()?;
        self.macenko.validate(self.od.od_cap)?;
        if self.channels.is_empty() || self.hidden == 0 {
            return Err(Error::InvalidConfig("need at least one conv block and a hidden layer".into()));
        }
        Ok(())
    }
}

/// Per-epoch training record. Losses are patch-weighted epoch means.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_cl: f64,
    pub loss_r: f64,
    /// `loss_cl + λ · loss_r`.
    pub loss_total: f64,
    pub val_loss_cl: f64,
    /// `None` when κ is undefined on the validation set.
    pub val_kappa: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss_cl,loss_r,loss_total,val_loss_cl,val_kappa\n");
        for r in &self.epochs {
            let kappa = r.val_kappa.map_or_else(String::new, |k| format!("{k:.17e}"));
            out.push_str(&format!(
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{kappa}\n",
                r.epoch, r.loss_cl, r.loss_r, r.loss_total, r.val_loss_cl
            ));
        }
        out
    }
}

/// Stops once the monitored loss has not improved for `patience` epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    /// Records the loss of the next epoch (1-based).
    pub fn observe(&mut self, loss: f64) -> StopDecision {
        self.epoch += 1;
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.best_epoch = self.epoch;
        }
        StopDecision {
            improved,
            stop: self.epoch - self.best_epoch >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

/// A trained network together with what inference needs to reproduce the
/// training-time input pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: Model,
    pub mode: MethodMode,
    pub lambda: f64,
    pub seed: u64,
    /// Reference appearance for `stain_norm`.
    pub norm_target: Option<StainTarget>,
    pub macenko: MacenkoParams,
    pub od: OdConfig,
}

const EVAL_BATCH: usize = 128;

impl TrainedModel {
    /// The patch as the network should see it (normalized in `stain_norm`).
    pub fn prepare<'a>(&self, patch: &'a RgbPatch) -> Cow<'a, RgbPatch> {
        prepare_input(patch, self.norm_target.as_ref(), &self.macenko, &self.od)
    }

    /// Class probabilities for each patch.
    pub fn predict_batch(&self, patches: &[&RgbPatch]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run_batched(patches)?.1)
    }

    pub fn predict(&self, patch: &RgbPatch) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[patch])?.remove(0))
    }

    pub fn predict_labels(&self, patches: &[&RgbPatch]) -> Result<Vec<usize>> {
        Ok(self.predict_batch(patches)?.iter().map(|p| argmax(p)).collect())
    }

    pub fn features_batch(&self, patches: &[&RgbPatch]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run_batched(patches)?.0)
    }

    fn run_batched(&self, patches: &[&RgbPatch]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let prepared: Vec<Cow<RgbPatch>> = patches.iter().map(|p| self.prepare(p)).collect();
        let refs: Vec<&RgbPatch> = prepared.iter().map(|c| c.as_ref()).collect();
        let (mut feats, mut probs) = (Vec::new(), Vec::new());
        for chunk in refs.chunks(EVAL_BATCH) {
            let (f, logits) = self.model.infer(chunk)?;
            let p = softmax(&logits)?;
            feats.extend(rows(&f));
            probs.extend(rows(&p));
        }
        Ok((feats, probs))
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let n = t.shape()[0];
    (0..n).map(|i| t.row(i).to_vec()).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    (0..v.len()).fold(0, |best, k| if v[k] > v[best] { k } else { best })
}

fn prepare_input<'a>(
    patch: &'a RgbPatch,
    target: Option<&StainTarget>,
    macenko: &MacenkoParams,
    od: &OdConfig,
) -> Cow<'a, RgbPatch> {
    match target {
        // patches without enough tissue for an estimate pass through unchanged
        Some(t) => normalize_to_target(patch, &t.matrix, t.max_conc, macenko, od)
            .map_or(Cow::Borrowed(patch), Cow::Owned),
        None => Cow::Borrowed(patch),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub history: TrainHistory,
}

/// Independent random streams, so modes that skip a stochastic step do not
/// shift the draws of the others.
mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const OVERSAMPLE: u64 = 3;
    pub const GEOMETRY: u64 = 4;
    pub const COLOUR: u64 = 5;
    pub const TARGET: u64 = 6;
}

fn check_patches(set: &[LabeledPatch], size: usize, what: &str) -> Result<()> {
    for lp in set {
        if lp.patch.width() != size || lp.patch.height() != size {
            return Err(Error::ShapeMismatch(format!(
                "{what} patch is {}x{}, expected {size}x{size}",
                lp.patch.width(),
                lp.patch.height()
            )));
        }
    }
    Ok(())
}

/// Architecture implied by the config and data.
pub fn arch_for(cfg: &TrainConfig, train: &[LabeledPatch], val: &[LabeledPatch]) -> Result<ArchSpec> {
    let first = train
        .first()
        .ok_or_else(|| Error::EmptyDataset("training set is empty".into()))?;
    let size = first.patch.width();
    let n_classes = match cfg.n_classes {
        Some(k) => k,
        None => train.iter().chain(val).map(|p| p.y).max().unwrap_or(0) + 1,
    };
    if let Some(bad) = train.iter().chain(val).find(|p| p.y >= n_classes) {
        return Err(Error::InvalidConfig(format!("label {} >= {n_classes} classes", bad.y)));
    }
    let mut arch = ArchSpec::with_channels(n_classes, size, &cfg.channels, cfg.hidden);
    if cfg.mode == MethodMode::DomainAdv {
        arch.aux = AuxHead::Domain {
            n_domains: distinct_centers(train).len(),
        };
    }
    arch.validate()?;
    Ok(arch)
}

pub fn distinct_centers(set: &[LabeledPatch]) -> Vec<usize> {
    let mut ids: Vec<usize> = set.iter().map(|p| p.center_id).collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

/// Trains one model and returns the parameters of the epoch with the
/// lowest validation classification loss.
pub fn train(train: &[LabeledPatch], val: &[LabeledPatch], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training set is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptyDataset("validation set is empty".into()));
    }
    let arch = arch_for(cfg, train, val)?;
    check_patches(train, arch.input_size, "training")?;
    check_patches(val, arch.input_size, "validation")?;
    let centers = distinct_centers(train);
    if cfg.mode == MethodMode::DomainAdv && centers.len() < 2 {
        return Err(Error::SingleDomain(centers.len()));
    }

    let lambda = cfg.effective_lambda();
    let rates = match cfg.mode {
        MethodMode::HeAdv => GroupRates::adversarial(lambda),
        MethodMode::DomainAdv => GroupRates::UNIFORM,
        _ => GroupRates::adversarial(0.0),
    };
    let mut model = build_model(&arch, derive_seed(cfg.seed, &[stream::INIT]))?;
    let mut opt = OptimState::new(cfg.optim);

    let norm_target = if cfg.mode == MethodMode::StainNorm {
        Some(pick_target(train, cfg)?)
    } else {
        None
    };
    let inputs: Vec<Cow<RgbPatch>> = train
        .iter()
        .map(|lp| prepare_input(&lp.patch, norm_target.as_ref(), &cfg.macenko, &cfg.od))
        .collect();
    let val_inputs: Vec<Cow<RgbPatch>> = val
        .iter()
        .map(|lp| prepare_input(&lp.patch, norm_target.as_ref(), &cfg.macenko, &cfg.od))
        .collect();
    let val_refs: Vec<&RgbPatch> = val_inputs.iter().map(|c| c.as_ref()).collect();
    let val_labels: Vec<usize> = val.iter().map(|p| p.y).collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); arch.n_classes];
    for (i, lp) in train.iter().enumerate() {
        by_class[lp.y].push(i);
    }
    let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);

    let mut shuffle_rng = seeded(derive_seed(cfg.seed, &[stream::SHUFFLE]));
    let mut over_rng = seeded(derive_seed(cfg.seed, &[stream::OVERSAMPLE]));
    let mut geom_rng = seeded(derive_seed(cfg.seed, &[stream::GEOMETRY]));
    let mut colour_rng = seeded(derive_seed(cfg.seed, &[stream::COLOUR]));
    let hsv = cfg.hsv_config();

    let mut stopper = EarlyStopper::new(cfg.patience);
    let mut history = TrainHistory::default();
    let mut best = model.params.clone();

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        if cfg.balance_classes {
            for members in by_class.iter().filter(|m| !m.is_empty()) {
                for _ in members.len()..majority {
                    order.push(members[over_rng.random_range(0..members.len())]);
                }
            }
        }
        order.shuffle(&mut shuffle_rng);

        let (mut sum_cl, mut sum_r, mut seen) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut patches = Vec::with_capacity(batch.len());
            for &i in batch {
                let lp = &train[i];
                let coloured = match cfg.mode {
                    MethodMode::HsvAug => hsv_augment(&inputs[i], &hsv, &mut colour_rng)?,
                    MethodMode::StainAug => stain_augment(&lp.patch, &lp.m, &cfg.stain_aug, &mut colour_rng, &cfg.od)?,
                    _ => inputs[i].as_ref().clone(),
                };
                patches.push(geometric_augment(&coloured, &mut geom_rng));
            }
            let refs: Vec<&RgbPatch> = patches.iter().collect();
            let input = crate::model::patches_to_tensor(&refs, arch.input_size)?;
            let labels: Vec<usize> = batch.iter().map(|&i| train[i].y).collect();
            let aux = match cfg.mode {
                MethodMode::HeAdv => {
                    let data = batch.iter().flat_map(|&i| train[i].m.to_flat()).collect();
                    AuxTarget::Stain(Tensor::new(vec![batch.len(), 6], data)?)
                }
                MethodMode::DomainAdv => AuxTarget::Domain(
                    batch
                        .iter()
                        .map(|&i| centers.binary_search(&train[i].center_id).expect("training center"))
                        .collect(),
                ),
                _ => AuxTarget::None,
            };
            let (loss, grads) = model.compute_gradients(input, &labels, &aux, lambda)?;
            apply_update_with_rates(&mut model.params, &grads, &mut opt, rates, epoch)?;
            sum_cl += loss.classification * batch.len() as f64;
            sum_r += loss.adversarial * batch.len() as f64;
            seen += batch.len();
        }

        let (val_loss, val_kappa) = evaluate_val(&model, &val_refs, &val_labels)?;
        let loss_cl = sum_cl / seen as f64;
        let loss_r = sum_r / seen as f64;
        history.epochs.push(EpochRecord {
            epoch,
            loss_cl,
            loss_r,
            loss_total: loss_cl + lambda * loss_r,
            val_loss_cl: val_loss,
            val_kappa,
        });
        let decision = stopper.observe(val_loss);
        if decision.improved {
            best = model.params.clone();
        }
        if decision.stop {
            break;
        }
    }
    history.best_epoch = stopper.best_epoch().max(1);
    if stopper.best_epoch() > 0 {
        model.params = best;
    }
    Ok(TrainOutcome {
        model: TrainedModel {
            model,
            mode: cfg.mode,
            lambda,
            seed: cfg.seed,
            norm_target,
            macenko: cfg.macenko,
            od: cfg.od,
        },
        history,
    })
}

/// The first training patch, in seeded order, that yields a usable target.
fn pick_target(train: &[LabeledPatch], cfg: &TrainConfig) -> Result<StainTarget> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut seeded(derive_seed(cfg.seed, &[stream::TARGET])));
    order
        .iter()
        .find_map(|&i| StainTarget::from_patch(&train[i].patch, &cfg.macenko, &cfg.od).ok())
        .ok_or_else(|| Error::EmptyDataset("no training patch yields a normalization target".into()))
}

fn evaluate_val(model: &Model, patches: &[&RgbPatch], labels: &[usize]) -> Result<(f64, Option<f64>)> {
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(labels.len());
    for (chunk, ys) in patches.chunks(EVAL_BATCH).zip(labels.chunks(EVAL_BATCH)) {
        let (_, logits) = model.infer(chunk)?;
        let (loss, _) = cross_entropy_loss(&logits, ys)?;
        loss_sum += loss * ys.len() as f64;
        preds.extend(rows(&logits).iter().map(|r| argmax(r)));
    }
    let kappa = match quadratic_kappa(&preds, labels, model.arch.n_classes) {
        Ok(k) => Some(k),
        Err(Error::UndefinedKappa) => None,
        Err(e) => return Err(e),
    };
    Ok((loss_sum / labels.len() as f64, kappa))
}
