//! Command orchestration: dataset synthesis, training, evaluation, per-image
//! explanation export, sensitivity benchmarking, ablations, and global
//! interpretation export.
//!
//! Each command reads a resolved [`Config`], runs the relevant modules in
//! `f32`, writes its artifacts under the output directory, and returns the
//! list of paths it wrote. A resolved-config snapshot is always among them,
//! so any run is reproducible from its output directory alone.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use serde::Serialize;

use crate::config::{Config, ConfigError};
use crate::data::{
    self, generate_synthetic_dataset, load_cxr_dataset, load_synthetic_dataset, split_dataset,
    CxrLayout, DataError, Dataset, LoadOptions, UncertaintyPolicy,
};
use crate::eval::{
    class_sensitivity, evaluate_model, run_ablation, write_ablation_csv, EvalError, EvalSettings,
};
use crate::grad::Scalar;
use crate::taskgen::{counterfactual, maps_for_all_classes};
use crate::training::{
    load_checkpoint, save_checkpoint, train, write_metrics_csv, TrainError, TrainOutcome,
    TrainState,
};
use crate::viz::{self, VizError};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Viz(#[from] VizError),
    #[error("{0}")]
    Usage(String),
    #[error("writing {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// The seven subcommands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Train,
    Eval,
    Explain,
    Sensitivity,
    Ablate,
    ExportGlobal,
}

/// Parsed command-line arguments, independent of the argument parser.
#[derive(Debug, Clone)]
pub struct CliArgs {
    pub command: Command,
    pub config: Option<PathBuf>,
    pub ckpt: Option<PathBuf>,
    pub out: PathBuf,
    /// Overrides the run's own seed keys (`seed`, `synth.seed`, `eval.seed`);
    /// the fold split stays pinned by the config.
    pub seed: Option<u64>,
}

/// Run one command. Returns every path written, in write order. The process
/// exit code is 0 exactly when this returns `Ok` — partial output and an
/// `Ok` return cannot coexist.
pub fn run(args: &CliArgs) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Io { path: args.out.clone(), source: e })?;
    let cfg = load_config(args)?;
    let mut written = Vec::new();
    match args.command {
        Command::Synth => cmd_synth(&cfg, &args.out, &mut written)?,
        Command::Train => cmd_train(&cfg, &args.out, &mut written)?,
        Command::Eval => cmd_eval(&cfg, require_ckpt(args)?, &args.out, &mut written)?,
        Command::Explain => cmd_explain(&cfg, require_ckpt(args)?, &args.out, &mut written)?,
        Command::Sensitivity => {
            cmd_sensitivity(&cfg, require_ckpt(args)?, &args.out, &mut written)?
        }
        Command::Ablate => cmd_ablate(&cfg, &args.out, &mut written)?,
        Command::ExportGlobal => {
            cmd_export_global(&cfg, require_ckpt(args)?, &args.out, &mut written)?
        }
    }
    Ok(written)
}

fn require_ckpt(args: &CliArgs) -> Result<&Path, CliError> {
    args.ckpt
        .as_deref()
        .ok_or_else(|| CliError::Usage("this command needs --ckpt <checkpoint>".into()))
}

fn load_config(args: &CliArgs) -> Result<Config, CliError> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => {
            if matches!(args.command, Command::ExportGlobal) {
                Config::default()
            } else {
                return Err(CliError::Usage("this command needs --config <file>".into()));
            }
        }
    };
    if let Some(seed) = args.seed {
        let s = seed.to_string();
        cfg.set("seed", &s);
        cfg.set("synth.seed", &s);
        cfg.set("eval.seed", &s);
    }
    Ok(cfg)
}

fn snapshot(cfg: &Config, out: &Path, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let path = out.join("resolved.cfg");
    cfg.write_snapshot(&path)?;
    written.push(path);
    Ok(())
}

/// Build the dataset the config describes.
pub fn build_dataset(cfg: &Config) -> Result<Dataset<f32>, CliError> {
    match cfg.get("data.kind").unwrap_or("synthetic") {
        "synthetic" => Ok(generate_synthetic_dataset(&cfg.synthetic_spec()?)?),
        "saved" => {
            let root: String = cfg.require("data.root", "path")?;
            Ok(load_synthetic_dataset(Path::new(&root))?)
        }
        kind @ ("chexpert" | "chestxray8" | "vindrcxr") => {
            let layout = match kind {
                "chexpert" => CxrLayout::Chexpert,
                "chestxray8" => CxrLayout::ChestXray8,
                _ => CxrLayout::VindrCxr,
            };
            let csv: String = cfg.require("data.csv", "path")?;
            let root: String = cfg.require("data.root", "path")?;
            let class_names = cfg
                .list::<String>("data.classes", "name list")?
                .ok_or_else(|| ConfigError::MissingKey { key: "data.classes".into() })?;
            let uncertainty = match cfg.get("data.uncertainty").unwrap_or("zeros") {
                "zeros" => UncertaintyPolicy::Zeros,
                "ones" => UncertaintyPolicy::Ones,
                "drop" => UncertaintyPolicy::Drop,
                v => {
                    return Err(ConfigError::BadValue {
                        key: "data.uncertainty".into(),
                        value: v.into(),
                        expected: "`zeros`, `ones`, or `drop`",
                    }
                    .into())
                }
            };
            let (h, w) = cfg.geometry()?;
            let opts = LoadOptions { layout, class_names, uncertainty, h, w };
            let (ds, report) = load_cxr_dataset::<f32>(Path::new(&csv), Path::new(&root), &opts)?;
            if report.skipped_unreadable > 0 || report.dropped_uncertain > 0 {
                log::warn!(
                    "dataset load skipped {} unreadable rows, dropped {} uncertain rows",
                    report.skipped_unreadable,
                    report.dropped_uncertain
                );
            }
            Ok(ds)
        }
        other => Err(CliError::Usage(format!(
            "data.kind `{other}` is not one of synthetic/saved/chexpert/chestxray8/vindrcxr"
        ))),
    }
}

fn eval_settings(cfg: &Config, thresholds: Option<Vec<f64>>) -> Result<EvalSettings, CliError> {
    Ok(EvalSettings {
        n_grids: cfg.parsed_or("eval.n_grids", "integer", 200)?,
        seed: cfg.parsed_or("eval.seed", "integer", 0)?,
        thresholds,
    })
}

fn stored_thresholds(state: &TrainState<f32>) -> Option<Vec<f64>> {
    if state.thresholds.is_empty() { None } else { Some(state.thresholds.clone()) }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_synth(cfg: &Config, out: &Path, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let spec = cfg.synthetic_spec()?;
    let ds = generate_synthetic_dataset::<f32>(&spec)?;
    data::save_dataset(&ds, out)?;
    written.push(out.join("labels.csv"));
    written.push(out.join("images"));
    written.push(out.join("masks"));
    snapshot(cfg, out, written)?;
    log::info!(
        "synthesized {} samples, {} classes at {}x{}",
        ds.len(),
        ds.num_classes(),
        spec.h,
        spec.w
    );
    Ok(())
}

#[derive(Serialize)]
struct ThresholdsSummary {
    class_names: Vec<String>,
    thresholds: Vec<f64>,
}

fn cmd_train(cfg: &Config, out: &Path, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    let (ratios, split_seed) = cfg.split()?;
    let (train_ds, _test_ds, val_ds) = split_dataset(&ds, ratios, split_seed)?;
    let tc = cfg.training_config(ds.num_classes())?;
    let (state, metrics, outcome) = train(tc, &train_ds, &val_ds)?;
    if let TrainOutcome::Diverged { at_step } = outcome {
        log::warn!(
            "training diverged at step {at_step}; the checkpoint holds the last finite state"
        );
    }

    let ckpt = out.join("checkpoint.bin");
    save_checkpoint(&state, &ckpt)?;
    written.push(ckpt);

    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&metrics, &metrics_path)?;
    written.push(metrics_path);

    let summary = ThresholdsSummary {
        class_names: ds.class_names.clone(),
        thresholds: state.thresholds.clone(),
    };
    let thr_path = out.join("thresholds.json");
    std::fs::write(&thr_path, serde_json::to_string_pretty(&summary).expect("serializable"))
        .map_err(|e| CliError::Io { path: thr_path.clone(), source: e })?;
    written.push(thr_path);

    snapshot(cfg, out, written)
}

fn cmd_eval(
    cfg: &Config,
    ckpt: &Path,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let state = load_checkpoint::<f32>(ckpt)?;
    let ds = build_dataset(cfg)?;
    let (ratios, split_seed) = cfg.split()?;
    let (_train_ds, test_ds, _val_ds) = split_dataset(&ds, ratios, split_seed)?;
    let settings = eval_settings(cfg, stored_thresholds(&state))?;
    let report = evaluate_model(&state.gen, &state.head, &state.store, &test_ds, &settings)?;

    let csv = out.join("report.csv");
    report.write_csv(&csv)?;
    written.push(csv);
    let json = out.join("report.json");
    report.write_json(&json)?;
    written.push(json);
    snapshot(cfg, out, written)
}

#[derive(Serialize)]
struct ClassProbability {
    probability: f64,
    threshold: f64,
    positive: bool,
}

/// Class names for a checkpoint: the config's `data.classes` when present,
/// otherwise `class0..classN`.
fn checkpoint_class_names(cfg: &Config, num_classes: usize) -> Result<Vec<String>, CliError> {
    match cfg.list::<String>("data.classes", "name list")? {
        Some(names) if names.len() == num_classes => Ok(names),
        Some(names) => Err(CliError::Usage(format!(
            "data.classes lists {} names but the checkpoint has {num_classes} classes",
            names.len()
        ))),
        None => Ok((0..num_classes).map(|c| format!("class{c}")).collect()),
    }
}

fn cmd_explain(
    cfg: &Config,
    ckpt: &Path,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let state = load_checkpoint::<f32>(ckpt)?;
    let c = state.config.num_classes;
    let names = checkpoint_class_names(cfg, c)?;

    let image_path: String = cfg.require("explain.image", "path")?;
    let (img, h, w) = data::read_gray_image::<f32>(
        Path::new(&image_path),
        Some((state.config.h, state.config.w)),
    )?;
    let scale: u32 = cfg.parsed_or("explain.scale", "integer", 4)?;

    // Requested classes: indices or names; default all.
    let requested: Vec<usize> = match cfg.list::<String>("explain.classes", "class list")? {
        None => (0..c).collect(),
        Some(items) => items
            .iter()
            .map(|item| {
                if let Ok(idx) = item.parse::<usize>() {
                    if idx < c {
                        return Ok(idx);
                    }
                    return Err(CliError::Usage(format!(
                        "class index {idx} out of range for {c} classes"
                    )));
                }
                names.iter().position(|n| n == item).ok_or_else(|| {
                    CliError::Usage(format!("unknown class name `{item}`"))
                })
            })
            .collect::<Result<_, _>>()?,
    };

    let batch = img
        .clone()
        .into_shape_with_order(IxDyn(&[1, 1, h, w]))
        .expect("image reshapes to a single row");
    let maps = maps_for_all_classes(&state.gen, &state.store, &batch);
    let probs = crate::head::predict_all(&state.gen, &state.head, &state.store, &batch);

    let mut prob_json = BTreeMap::new();
    for class in 0..c {
        let threshold = state.thresholds.get(class).copied().unwrap_or(0.5);
        let p = probs[class].to_f64();
        prob_json.insert(
            names[class].clone(),
            ClassProbability { probability: p, threshold, positive: p >= threshold },
        );
    }

    for &class in &requested {
        let map = maps
            .index_axis(ndarray::Axis(0), class)
            .to_owned()
            .into_shape_with_order(IxDyn(&[h, w]))
            .expect("map reshapes to (H, W)");
        let cf = counterfactual(&img, &map);
        let threshold = state.thresholds.get(class).copied().unwrap_or(0.5);
        let annotation = format!("{} p={:.2} ({:.2})", names[class], probs[class].to_f64(), threshold);
        let panel = viz::explanation_panel(&img, &map, &cf, &annotation, scale)?;
        let panel_path = out.join(format!("explain_{}.png", names[class]));
        viz::save_png(&panel, &panel_path)?;
        written.push(panel_path);
        let values_path = out.join(format!("map_{}.csv", names[class]));
        viz::save_map_values(&map, &values_path)?;
        written.push(values_path);
    }

    let json_path = out.join("probabilities.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&prob_json).expect("serializable"))
        .map_err(|e| CliError::Io { path: json_path.clone(), source: e })?;
    written.push(json_path);
    snapshot(cfg, out, written)
}

fn cmd_sensitivity(
    cfg: &Config,
    ckpt: &Path,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let state = load_checkpoint::<f32>(ckpt)?;
    let ds = build_dataset(cfg)?;
    let (ratios, split_seed) = cfg.split()?;
    let (_train_ds, test_ds, _val_ds) = split_dataset(&ds, ratios, split_seed)?;
    let settings = eval_settings(cfg, None)?;

    let c = test_ds.num_classes();
    let mut scores = Vec::with_capacity(c);
    for class in 0..c {
        let mut explain = |img: &ArrayD<f32>| -> ArrayD<f32> {
            let (gh, gw) = (img.shape()[0], img.shape()[1]);
            let batch = img.clone().into_shape_with_order(IxDyn(&[1, 1, gh, gw])).unwrap();
            let m = crate::taskgen::attribution_maps(&state.gen, &state.store, &batch, &[class]);
            m.into_shape_with_order(IxDyn(&[gh, gw])).unwrap()
        };
        scores.push(class_sensitivity(
            &mut explain,
            &test_ds,
            class,
            settings.n_grids,
            settings.seed,
        )?);
    }

    let mut text = String::from("class,sensitivity\n");
    for (class, s) in scores.iter().enumerate() {
        text.push_str(&format!("{},{s}\n", test_ds.class_names[class]));
    }
    let macro_s = scores.iter().sum::<f64>() / c as f64;
    text.push_str(&format!("macro,{macro_s}\n"));
    let path = out.join("sensitivity.csv");
    std::fs::write(&path, text).map_err(|e| CliError::Io { path: path.clone(), source: e })?;
    written.push(path);
    snapshot(cfg, out, written)
}

fn cmd_ablate(cfg: &Config, out: &Path, written: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let ds = build_dataset(cfg)?;
    let (ratios, split_seed) = cfg.split()?;
    let (train_ds, test_ds, val_ds) = split_dataset(&ds, ratios, split_seed)?;
    let base = cfg.training_config(ds.num_classes())?;
    let n_grids = cfg.parsed_or("eval.n_grids", "integer", 200)?;
    let eval_seed = cfg.parsed_or("eval.seed", "integer", 0)?;
    let rows = run_ablation(&base, &train_ds, &val_ds, &test_ds, n_grids, eval_seed)?;
    let path = out.join("ablation.csv");
    write_ablation_csv(&rows, &path)?;
    written.push(path);
    snapshot(cfg, out, written)
}

fn cmd_export_global(
    cfg: &Config,
    ckpt: &Path,
    out: &Path,
    written: &mut Vec<PathBuf>,
) -> Result<(), CliError> {
    let state = load_checkpoint::<f32>(ckpt)?;
    let c = state.config.num_classes;
    let names = checkpoint_class_names(cfg, c)?;
    let gamma = state.head.gamma as u32;

    let weights = state.store.value(state.head.w);
    for class in 0..c {
        for (which, map) in [
            ("center_pos", state.centers.pos[class].clone()),
            ("center_neg", state.centers.neg[class].clone()),
        ] {
            let (img, _) = viz::render_map(&map)?;
            let path = out.join(format!("{}_{which}.png", names[class]));
            viz::save_png(&img, &path)?;
            written.push(path);
        }

        // The weight grid lives at pooled resolution; upscale by the pooling
        // factor so it overlays the map geometry.
        let k = state.head.pooled_h * state.head.pooled_w;
        let row: Vec<f32> = (0..k).map(|i| weights[[class, i]]).collect();
        let grid = ArrayD::from_shape_vec(
            IxDyn(&[state.head.pooled_h, state.head.pooled_w]),
            row,
        )
        .expect("weight row reshapes to the pooled grid");
        let (small, _) = viz::render_map(&grid)?;
        let img = viz::upscale(&small, gamma);
        let path = out.join(format!("{}_weights.png", names[class]));
        viz::save_png(&img, &path)?;
        written.push(path);
    }
    snapshot(cfg, out, written)
}
