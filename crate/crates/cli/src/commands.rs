use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stainforge_core::augment::{
    geometric_augment, hsv_augment, stain_augment, HsvAugConfig, Preset, StainAugConfig,
};
use stainforge_core::experiment::{build_report, run_experiment, ExperimentConfig};
use stainforge_core::io::{
    load_checkpoint, read_dataset, read_image, save_checkpoint, stain_csv, write_dataset, write_image, MANIFEST,
};
use stainforge_core::metrics::{pca_project, quadratic_kappa};
use stainforge_core::model::MethodMode;
use stainforge_core::rng::{hash_str, seeded};
use stainforge_core::synth::{build_dataset, DatasetSpec, Split};
use stainforge_core::train::{argmax, train, TrainConfig};
use stainforge_core::{
    compute_concentrations, estimate_from_od, od_to_rgb, rgb_to_od, robust_max_concentration, normalize_to_target,
    MacenkoParams, OdConfig, OdImage, StainTarget,
};

use crate::error::CliError;
use crate::table::{read_labels, read_vectors, scatter_svg};
use crate::{AugmentKind, Command, GlobalArgs};

type Result<T> = std::result::Result<T, CliError>;

pub fn run(cmd: Command, g: &GlobalArgs) -> Result<()> {
    let out = g
        .out
        .clone()
        .ok_or_else(|| CliError::invalid("--out <dir> is required"))?;
    match cmd {
        Command::Deconv { input } => deconv(&input, g, &out),
        Command::Normalize { input, target } => normalize(&input, &target, g, &out),
        Command::Augment {
            input,
            kind,
            count,
            preset,
        } => augment(&input, kind, count, &preset, g, &out),
        Command::GenData {
            patches_per_class,
            patch_size,
        } => gen_data(patches_per_class, patch_size, g, &out),
        Command::Train {
            data,
            mode,
            lambda,
            epochs,
        } => train_cmd(&data, mode, lambda, epochs, g, &out),
        Command::Predict { model, input } => predict(&model, &input, &out),
        Command::Eval { pred, truth, classes } => eval(&pred, &truth, classes, &out),
        Command::Project { input, label } => project(&input, label.as_deref(), &out),
        Command::Compare { data, jobs } => compare(data, jobs, g, &out),
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::invalid(format!("{} does not exist", path.display())))
    }
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    Ok(())
}

/// Parses the `--config` file, or returns the default.
fn load_config<T: for<'de> Deserialize<'de> + Default>(g: &GlobalArgs) -> Result<T> {
    match &g.config {
        Some(path) => {
            require(path)?;
            let text = fs::read_to_string(path)?;
            serde_json::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
        }
        None => Ok(T::default()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct DeconvConfig {
    macenko: MacenkoParams,
    od: OdConfig,
}

#[derive(Serialize)]
struct DeconvSummary {
    stain_matrix: [[f64; 3]; 2],
    max_concentration: (f64, f64),
    residual_rms: f64,
}

fn deconv(input: &Path, g: &GlobalArgs, out: &Path) -> Result<()> {
    require(input)?;
    let cfg: DeconvConfig = load_config(g)?;
    cfg.od.validate()?;
    cfg.macenko.validate(cfg.od.od_cap)?;
    let patch = read_image(input)?;
    let od = rgb_to_od(&patch, &cfg.od);
    let m = estimate_from_od(&od, &cfg.macenko, &cfg.od)?;
    let cmap = compute_concentrations(&od, &m)?;
    let maxc = robust_max_concentration(&cmap, cfg.macenko.robust_conc_percentile)?;
    prepare_out(out)?;
    fs::write(out.join("stain_matrix.csv"), stain_csv(&m))?;
    for (k, name) in ["hematoxylin.png", "eosin.png"].iter().enumerate() {
        let single = OdImage {
            width: od.width,
            height: od.height,
            data: cmap
                .data
                .iter()
                .map(|c| {
                    let mut only = [0.0; 2];
                    only[k] = c[k];
                    m.compose(only)
                })
                .collect(),
        };
        write_image(&out.join(name), &od_to_rgb(&single, &cfg.od))?;
    }
    write_json(
        &out.join("deconv.json"),
        &DeconvSummary {
            stain_matrix: *m.rows(),
            max_concentration: maxc,
            residual_rms: cmap.residual_rms,
        },
    )?;
    print!("{}", stain_csv(&m));
    Ok(())
}

fn normalize(input: &Path, target: &Path, g: &GlobalArgs, out: &Path) -> Result<()> {
    require(input)?;
    require(target)?;
    let cfg: DeconvConfig = load_config(g)?;
    cfg.od.validate()?;
    cfg.macenko.validate(cfg.od.od_cap)?;
    let source = read_image(input)?;
    let t = StainTarget::from_patch(&read_image(target)?, &cfg.macenko, &cfg.od)?;
    let normalized = normalize_to_target(&source, &t.matrix, t.max_conc, &cfg.macenko, &cfg.od)?;
    prepare_out(out)?;
    write_image(&out.join("normalized.png"), &normalized)?;
    fs::write(out.join("target_matrix.csv"), stain_csv(&t.matrix))?;
    Ok(())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AugmentConfig {
    stain: StainAugConfig,
    hsv: Option<HsvAugConfig>,
    macenko: MacenkoParams,
    od: OdConfig,
}

fn augment(input: &Path, kind: AugmentKind, count: usize, preset: &str, g: &GlobalArgs, out: &Path) -> Result<()> {
    require(input)?;
    let cfg: AugmentConfig = load_config(g)?;
    let preset: Preset = preset.parse()?;
    let hsv = cfg.hsv.unwrap_or(preset.hsv());
    hsv.validate()?;
    cfg.stain.validate()?;
    let patch = read_image(input)?;
    let mut rng = seeded(g.seed.unwrap_or(0));
    let m = match kind {
        AugmentKind::Stain => Some(estimate_from_od(&rgb_to_od(&patch, &cfg.od), &cfg.macenko, &cfg.od)?),
        _ => None,
    };
    prepare_out(out)?;
    for i in 0..count {
        let aug = match kind {
            AugmentKind::Stain => stain_augment(&patch, m.as_ref().expect("estimated"), &cfg.stain, &mut rng, &cfg.od)?,
            AugmentKind::Hsv => hsv_augment(&patch, &hsv, &mut rng)?,
            AugmentKind::Geometric => geometric_augment(&patch, &mut rng),
        };
        write_image(&out.join(format!("augment_{i}.png")), &aug)?;
    }
    Ok(())
}

fn gen_data(per_class: Option<usize>, patch_size: Option<usize>, g: &GlobalArgs, out: &Path) -> Result<()> {
    let mut spec: DatasetSpec = load_config(g)?;
    if let Some(s) = g.seed {
        spec.seed = s;
    }
    if let Some(n) = per_class {
        spec.patches_per_class = n;
    }
    if let Some(s) = patch_size {
        spec.patch_size = s;
    }
    spec.validate()?;
    let ds = build_dataset(&spec)?;
    prepare_out(out)?;
    write_dataset(out, &ds)?;
    write_json(&out.join("dataset.json"), &spec)?;
    for split in Split::ALL {
        println!("{}: {}", split.name(), ds.count(split));
    }
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    mode: MethodMode,
    lambda: f64,
    seed: u64,
    best_epoch: usize,
    epochs_run: usize,
    kappa_internal: Option<f64>,
    kappa_external: Option<f64>,
    kappa_cumulative: Option<f64>,
    probe_accuracy: Option<f64>,
}

fn train_cmd(
    data: &Path,
    mode: Option<String>,
    lambda: Option<f64>,
    epochs: Option<usize>,
    g: &GlobalArgs,
    out: &Path,
) -> Result<()> {
    require(data)?;
    let mut cfg: TrainConfig = load_config(g)?;
    if let Some(m) = mode {
        cfg.mode = m.parse()?;
    }
    if lambda.is_some() {
        cfg.lambda = lambda;
    }
    if let Some(e) = epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = read_dataset(data)?;
    let outcome = train(&ds.split(Split::Train), &ds.split(Split::Val), &cfg)?;
    let (ki, ke, kc, probe) = stainforge_core::experiment::evaluate(
        &outcome.model,
        &ds.split(Split::InternalTest),
        &ds.split(Split::ExternalTest),
    )?;
    prepare_out(out)?;
    save_checkpoint(&out.join("model.ckpt"), &outcome.model)?;
    fs::write(out.join("history.csv"), outcome.history.to_csv())?;
    write_json(&out.join("train_config.json"), &cfg)?;
    write_json(
        &out.join("summary.json"),
        &TrainSummary {
            mode: cfg.mode,
            lambda: outcome.model.lambda,
            seed: cfg.seed,
            best_epoch: outcome.history.best_epoch,
            epochs_run: outcome.history.epochs.len(),
            kappa_internal: ki,
            kappa_external: ke,
            kappa_cumulative: kc,
            probe_accuracy: probe.map(|p| p.0),
        },
    )?;
    Ok(())
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png") || e.eq_ignore_ascii_case("ppm"))
}

fn predict(model: &Path, input: &Path, out: &Path) -> Result<()> {
    require(model)?;
    require(input)?;
    let m = load_checkpoint(model)?;
    let (names, patches, truth): (Vec<String>, Vec<_>, Option<Vec<usize>>) = if input.join(MANIFEST).exists() {
        let ds = read_dataset(input)?;
        (
            ds.entries.iter().map(|e| e.relative_path()).collect(),
            ds.entries.iter().map(|e| e.patch.patch.clone()).collect(),
            Some(ds.entries.iter().map(|e| e.patch.y).collect()),
        )
    } else if input.is_dir() {
        let mut files: Vec<PathBuf> = fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| is_image(p))
            .collect();
        files.sort();
        let patches = files.iter().map(|f| read_image(f)).collect::<stainforge_core::Result<Vec<_>>>()?;
        let names = files
            .iter()
            .map(|f| f.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned()))
            .collect();
        (names, patches, None)
    } else {
        let name = input.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        (vec![name], vec![read_image(input)?], None)
    };
    if patches.is_empty() {
        return Err(CliError::invalid(format!("no images found in {}", input.display())));
    }
    let refs: Vec<_> = patches.iter().collect();
    let probs = m.predict_batch(&refs)?;
    let k = m.model.arch.n_classes;
    let mut csv = String::from("path,label");
    for c in 0..k {
        csv.push_str(&format!(",p{c}"));
    }
    csv.push('\n');
    for (name, p) in names.iter().zip(&probs) {
        csv.push_str(&format!("{name},{}", argmax(p)));
        for v in p {
            csv.push_str(&format!(",{v:.9}"));
        }
        csv.push('\n');
    }
    prepare_out(out)?;
    fs::write(out.join("predictions.csv"), csv)?;
    if let Some(t) = truth {
        let mut csv = String::from("path,label\n");
        for (name, y) in names.iter().zip(t) {
            csv.push_str(&format!("{name},{y}\n"));
        }
        fs::write(out.join("truth.csv"), csv)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    kappa: f64,
    n: usize,
    n_classes: usize,
}

fn eval(pred: &Path, truth: &Path, classes: Option<usize>, out: &Path) -> Result<()> {
    require(pred)?;
    require(truth)?;
    let p = read_labels(&fs::read_to_string(pred)?)?;
    let t = read_labels(&fs::read_to_string(truth)?)?;
    let k = classes.unwrap_or_else(|| p.iter().chain(&t).max().map_or(0, |m| m + 1).max(2));
    let kappa = quadratic_kappa(&p, &t, k)?;
    prepare_out(out)?;
    write_json(
        &out.join("eval.json"),
        &EvalSummary {
            kappa,
            n: p.len(),
            n_classes: k,
        },
    )?;
    println!("kappa = {kappa:.6}");
    Ok(())
}

#[derive(Serialize)]
struct ProjectionSummary {
    components: Vec<Vec<f64>>,
    explained: Vec<f64>,
}

fn project(input: &Path, label: Option<&str>, out: &Path) -> Result<()> {
    require(input)?;
    let (vectors, labels) = read_vectors(&fs::read_to_string(input)?, label)?;
    let proj = pca_project(&vectors, 2)?;
    prepare_out(out)?;
    let mut csv = String::new();
    if label.is_some() {
        csv.push_str("label,");
    }
    csv.push_str("pc1,pc2\n");
    for (i, c) in proj.coordinates.iter().enumerate() {
        if let Some(l) = &labels {
            csv.push_str(&l[i]);
            csv.push(',');
        }
        csv.push_str(&format!("{:.9},{:.9}\n", c[0], c[1]));
    }
    fs::write(out.join("coords.csv"), csv)?;
    fs::write(
        out.join("scatter.svg"),
        scatter_svg(&proj.coordinates, labels.as_deref(), &proj.explained),
    )?;
    write_json(
        &out.join("projection.json"),
        &ProjectionSummary {
            components: proj.components,
            explained: proj.explained,
        },
    )?;
    Ok(())
}

/// Configuration of `compare`: the experiment plus where the data lives.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    data: Option<PathBuf>,
    modes: Vec<MethodMode>,
    repetitions: usize,
    master_seed: u64,
    train: TrainConfig,
    lambda: BTreeMap<MethodMode, f64>,
    proposed: MethodMode,
    jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            data: None,
            modes: e.modes,
            repetitions: e.repetitions,
            master_seed: e.master_seed,
            train: e.train,
            lambda: e.lambda,
            proposed: e.proposed,
            jobs: 0,
        }
    }
}

#[derive(Serialize)]
struct CompareResult<'a> {
    results: &'a [stainforge_core::experiment::RunResult],
    report: &'a stainforge_core::experiment::Report,
}

fn compare(data: Option<PathBuf>, jobs: Option<usize>, g: &GlobalArgs, out: &Path) -> Result<()> {
    let mut rc: RunConfig = load_config(g)?;
    if data.is_some() {
        rc.data = data;
    }
    if let Some(j) = jobs {
        rc.jobs = j;
    }
    if let Some(s) = g.seed {
        rc.master_seed = s;
    }
    let exp = ExperimentConfig {
        modes: rc.modes.clone(),
        repetitions: rc.repetitions,
        master_seed: rc.master_seed,
        train: rc.train.clone(),
        lambda: rc.lambda.clone(),
        proposed: rc.proposed,
    };
    exp.validate()?;
    let data = rc
        .data
        .clone()
        .ok_or_else(|| CliError::invalid("compare needs a dataset (--data or `data` in the config)"))?;
    require(&data.join(MANIFEST))?;
    let manifest = fs::read_to_string(data.join(MANIFEST))?;
    let dataset_key = format!("{:016x}", hash_str(&manifest));
    let ds = read_dataset(&data)?;

    prepare_out(out)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(rc.jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let results = pool.install(|| run_experiment(&ds, &dataset_key, &exp, Some(&out.join("runs"))))?;
    let report = build_report(&results, &exp.modes, exp.proposed);
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("report.txt"), report.to_text())?;
    write_json(
        &out.join("result.json"),
        &CompareResult {
            results: &results,
            report: &report,
        },
    )?;
    print!("{}", report.to_text());
    Ok(())
}
