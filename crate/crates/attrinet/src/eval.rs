//! Evaluation: ROC-AUC, Youden-index thresholding, the class-sensitivity grid
//! benchmark, mask-based localization scoring, and report serialization.
//!
//! The class-sensitivity metric probes whether an attribution method is
//! actually class-specific: four images are composed into a 2x2 grid in which
//! exactly one tile is positive for the probed class, the explainer runs on
//! the composite, and the score is the fraction of total absolute attribution
//! that lands on the positive tile. A perfectly class-specific explainer
//! scores 1, a class-blind one scores 0.25.

use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, ImageSample};
use crate::grad::Scalar;
use crate::head::Head;
use crate::nn::ParamStore;
use crate::taskgen::Generator;
use crate::training::TrainingConfig;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("labels contain only one polarity; metric undefined")]
    SinglePolarity,
    #[error("class {class} needs at least {need_pos} positive and {need_neg} negative samples")]
    InsufficientSamples { class: usize, need_pos: usize, need_neg: usize },
    #[error("map shape {map:?} does not match mask shape {mask:?}")]
    ShapeMismatch { map: Vec<usize>, mask: Vec<usize> },
    #[error("mask is empty")]
    EmptyMask,
    #[error("failed to write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// Ranking metrics
// ---------------------------------------------------------------------------

/// Area under the ROC curve: the probability that a uniformly random positive
/// outranks a uniformly random negative, ties counted one half.
///
/// Computed by average ranks (Mann-Whitney), which matches pairwise
/// concordance counting exactly: rank sums are integers-plus-halves, exact in
/// f64 at any realistic size.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::SinglePolarity);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));

    // Average rank over each tie group, 1-based.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &k in &order[i..j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Threshold maximizing the Youden index J(t) = sensitivity + specificity - 1,
/// predicting positive when `score >= t`.
///
/// Candidates are the midpoints between consecutive distinct sorted scores
/// plus -inf/+inf sentinels; ties in J break toward the smallest threshold.
pub fn youden_threshold(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch { scores: scores.len(), labels: labels.len() });
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    if n_pos == 0.0 || n_neg == 0.0 {
        return Err(EvalError::SinglePolarity);
    }

    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("scores must not be NaN"));
    distinct.dedup();

    let mut candidates = vec![f64::NEG_INFINITY];
    candidates.extend(distinct.windows(2).map(|w| (w[0] + w[1]) / 2.0));
    candidates.push(f64::INFINITY);

    let j_of = |t: f64| -> f64 {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&s, &l) in scores.iter().zip(labels) {
            if s >= t {
                if l == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        tp / n_pos - fp / n_neg
    };

    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY); // (J, threshold)
    for t in candidates {
        let j = j_of(t);
        if j > best.0 {
            best = (j, t);
        }
    }
    Ok(best.1)
}

// ---------------------------------------------------------------------------
// Class-sensitivity grids
// ---------------------------------------------------------------------------

/// A 2x2 arrangement of samples with exactly one tile positive for `class`.
/// Slots are row-major: 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
pub struct SensitivityGrid<'a, F: Scalar> {
    pub tiles: [&'a ImageSample<F>; 4],
    pub positive_slot: usize,
    pub class: usize,
}

/// Build `n_grids` grids for `class`. The positive tile is drawn uniformly
/// from the class positives, the three negatives without replacement, and the
/// positive slot uniformly over the four positions. Grid `i` uses rng
/// substream `i` of `seed`, so the set is deterministic and each grid is
/// independently reproducible.
pub fn build_sensitivity_grids<F: Scalar>(
    ds: &Dataset<F>,
    class: usize,
    n_grids: usize,
    seed: u64,
) -> Result<Vec<SensitivityGrid<'_, F>>, EvalError> {
    let pos: Vec<usize> =
        (0..ds.samples.len()).filter(|&i| ds.samples[i].labels[class] == 1).collect();
    let neg: Vec<usize> =
        (0..ds.samples.len()).filter(|&i| ds.samples[i].labels[class] == 0).collect();
    if pos.is_empty() || neg.len() < 3 {
        return Err(EvalError::InsufficientSamples { class, need_pos: 1, need_neg: 3 });
    }

    let mut grids = Vec::with_capacity(n_grids);
    for g in 0..n_grids {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        rng.set_stream(g as u64);

        let p = pos[rng.gen_range(0..pos.len())];
        let mut negs = Vec::with_capacity(3);
        while negs.len() < 3 {
            let cand = neg[rng.gen_range(0..neg.len())];
            if !negs.contains(&cand) {
                negs.push(cand);
            }
        }
        let slot = rng.gen_range(0..4usize);

        let mut tiles: Vec<&ImageSample<F>> = Vec::with_capacity(4);
        let mut next_neg = negs.iter();
        for s in 0..4 {
            if s == slot {
                tiles.push(&ds.samples[p]);
            } else {
                tiles.push(&ds.samples[*next_neg.next().unwrap()]);
            }
        }
        grids.push(SensitivityGrid {
            tiles: [tiles[0], tiles[1], tiles[2], tiles[3]],
            positive_slot: slot,
            class,
        });
    }
    Ok(grids)
}

/// Compose a grid's four tiles into one `(2h, 2w)` image.
pub fn assemble_grid<F: Scalar>(grid: &SensitivityGrid<'_, F>) -> ArrayD<F> {
    let (h, w) = (grid.tiles[0].image.shape()[0], grid.tiles[0].image.shape()[1]);
    let mut out = ArrayD::zeros(IxDyn(&[2 * h, 2 * w]));
    for (slot, tile) in grid.tiles.iter().enumerate() {
        let (y0, x0) = (h * (slot / 2), w * (slot % 2));
        for y in 0..h {
            for x in 0..w {
                out[[y0 + y, x0 + x]] = tile.image[[y, x]];
            }
        }
    }
    out
}

/// Fraction of total absolute attribution falling on `positive_slot` of a
/// `(2h, 2w)` map; a map with zero total scores chance (0.25).
pub fn grid_score<F: Scalar>(map: &ArrayD<F>, positive_slot: usize) -> f64 {
    assert_eq!(map.ndim(), 2, "grid map must be 2-d");
    let (gh, gw) = (map.shape()[0], map.shape()[1]);
    assert!(gh % 2 == 0 && gw % 2 == 0, "grid dimensions must be even");
    let (h, w) = (gh / 2, gw / 2);

    let mut quadrant = [0.0f64; 4];
    for y in 0..gh {
        for x in 0..gw {
            let slot = (y / h) * 2 + x / w;
            quadrant[slot] += map[[y, x]].to_f64().abs();
        }
    }
    let total: f64 = quadrant.iter().sum();
    if total == 0.0 {
        0.25
    } else {
        quadrant[positive_slot] / total
    }
}

/// Mean grid score of an explainer over `n_grids` class-`class` grids.
///
/// The explainer is any pure function from a `(2h, 2w)` image to a same-shape
/// attribution map, so external methods can be benchmarked with the same
/// protocol.
pub fn class_sensitivity<F: Scalar>(
    explain: &mut dyn FnMut(&ArrayD<F>) -> ArrayD<F>,
    ds: &Dataset<F>,
    class: usize,
    n_grids: usize,
    seed: u64,
) -> Result<f64, EvalError> {
    let grids = build_sensitivity_grids(ds, class, n_grids, seed)?;
    let mut sum = 0.0;
    for grid in &grids {
        let composite = assemble_grid(grid);
        let map = explain(&composite);
        assert_eq!(map.shape(), composite.shape(), "explainer changed the shape");
        sum += grid_score(&map, grid.positive_slot);
    }
    Ok(sum / n_grids as f64)
}

// ---------------------------------------------------------------------------
// Localization
// ---------------------------------------------------------------------------

/// Fraction of total absolute attribution inside a ground-truth evidence
/// mask; zero-total maps score the mask's area fraction (chance level).
pub fn localization_score<F: Scalar>(map: &ArrayD<F>, mask: &ArrayD<u8>) -> Result<f64, EvalError> {
    if map.shape() != mask.shape() {
        return Err(EvalError::ShapeMismatch {
            map: map.shape().to_vec(),
            mask: mask.shape().to_vec(),
        });
    }
    let area = mask.iter().filter(|&&m| m != 0).count();
    if area == 0 {
        return Err(EvalError::EmptyMask);
    }
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (&v, &m) in map.iter().zip(mask.iter()) {
        let a = v.to_f64().abs();
        total += a;
        if m != 0 {
            inside += a;
        }
    }
    if total == 0.0 {
        Ok(area as f64 / mask.len() as f64)
    } else {
        Ok(inside / total)
    }
}

// ---------------------------------------------------------------------------
// Whole-model evaluation
// ---------------------------------------------------------------------------

/// Settings for [`evaluate_model`].
pub struct EvalSettings {
    /// Grids per class for the sensitivity metric.
    pub n_grids: usize,
    pub seed: u64,
    /// Stored per-class decision thresholds to report; when absent, Youden
    /// thresholds are fitted on the evaluated set itself.
    pub thresholds: Option<Vec<f64>>,
}

/// Per-class metrics plus macro averages; serializes to CSV and JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub auc: Vec<f64>,
    pub youden_threshold: Vec<f64>,
    pub sensitivity: Vec<f64>,
    pub macro_auc: f64,
    pub macro_sensitivity: f64,
    pub n_grids: usize,
    pub seed: u64,
}

impl EvalReport {
    pub fn write_csv(&self, path: &Path) -> Result<(), EvalError> {
        let mut rows = String::from("class,auc,youden_threshold,sensitivity\n");
        for c in 0..self.class_names.len() {
            rows.push_str(&format!(
                "{},{},{},{}\n",
                self.class_names[c], self.auc[c], self.youden_threshold[c], self.sensitivity[c]
            ));
        }
        rows.push_str(&format!("macro,{},,{}\n", self.macro_auc, self.macro_sensitivity));
        std::fs::write(path, rows).map_err(|e| EvalError::Io { path: path.into(), source: e })
    }

    pub fn write_json(&self, path: &Path) -> Result<(), EvalError> {
        let text = serde_json::to_string_pretty(self).expect("report is serializable");
        std::fs::write(path, text).map_err(|e| EvalError::Io { path: path.into(), source: e })
    }
}

/// Score every test sample for every class and run the sensitivity protocol.
///
/// AUC uses the model's pooled class probabilities; sensitivity uses the
/// generator's attribution maps on grid composites (the generator is fully
/// convolutional, so the doubled geometry needs no retraining).
pub fn evaluate_model<F: Scalar>(
    gen: &Generator,
    head: &Head,
    store: &ParamStore<F>,
    test: &Dataset<F>,
    settings: &EvalSettings,
) -> Result<EvalReport, EvalError> {
    let c = test.num_classes();
    let mut auc = Vec::with_capacity(c);
    let mut thresholds = Vec::with_capacity(c);
    let mut sensitivity = Vec::with_capacity(c);

    for class in 0..c {
        let (scores, labels) = class_scores(gen, head, store, test, class);
        auc.push(roc_auc(&scores, &labels)?);
        thresholds.push(match &settings.thresholds {
            Some(t) => t[class],
            None => youden_threshold(&scores, &labels)?,
        });

        let mut explain = |img: &ArrayD<F>| -> ArrayD<F> {
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let batch = img.clone().into_shape_with_order(IxDyn(&[1, 1, h, w])).unwrap();
            let maps = crate::taskgen::attribution_maps(gen, store, &batch, &[class]);
            maps.into_shape_with_order(IxDyn(&[h, w])).unwrap()
        };
        sensitivity.push(class_sensitivity(&mut explain, test, class, settings.n_grids, settings.seed)?);
    }

    let macro_auc = auc.iter().sum::<f64>() / c as f64;
    let macro_sensitivity = sensitivity.iter().sum::<f64>() / c as f64;
    Ok(EvalReport {
        class_names: test.class_names.clone(),
        auc,
        youden_threshold: thresholds,
        sensitivity,
        macro_auc,
        macro_sensitivity,
        n_grids: settings.n_grids,
        seed: settings.seed,
    })
}

/// Pooled class-`class` probabilities over a whole dataset, with labels.
pub fn class_scores<F: Scalar>(
    gen: &Generator,
    head: &Head,
    store: &ParamStore<F>,
    ds: &Dataset<F>,
    class: usize,
) -> (Vec<f64>, Vec<u8>) {
    let mut scores = Vec::with_capacity(ds.len());
    let mut labels = Vec::with_capacity(ds.len());
    for chunk in ds.samples.chunks(8) {
        let refs: Vec<&ImageSample<F>> = chunk.iter().collect();
        let images = crate::data::stack_images(&refs);
        let classes = vec![class; refs.len()];
        let maps = crate::taskgen::attribution_maps(gen, store, &images, &classes);

        let tape = crate::grad::Tape::<F>::new();
        let binder = crate::nn::Binder::new(&tape, store);
        let m = tape.leaf(maps);
        let p = head.class_probs(&binder, m, &classes);
        let probs = tape.value(p);
        for (i, s) in chunk.iter().enumerate() {
            scores.push(probs[[i, 0]].to_f64());
            labels.push(s.labels[class]);
        }
    }
    (scores, labels)
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

/// Result of one ablation run: which loss terms were enabled, and the macro
/// metrics of the resulting model on the test fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    /// Canonical label for the enabled loss set.
    pub losses: String,
    pub macro_auc: f64,
    pub macro_sensitivity: f64,
}

/// The four loss configurations of the ablation protocol, in canonical order.
///
/// The classification term is the anchor and always stays on; the adversarial,
/// regularization, and center terms are switched in cumulatively.
pub fn ablation_configs(base: &TrainingConfig) -> Vec<(String, TrainingConfig)> {
    let mut out = Vec::with_capacity(4);
    for (label, adv, reg, ctr) in [
        ("cls", false, false, false),
        ("cls+adv", true, false, false),
        ("cls+adv+reg", true, true, false),
        ("all", true, true, true),
    ] {
        let mut cfg = base.clone();
        cfg.enable_adv = adv;
        cfg.enable_reg = reg;
        cfg.enable_ctr = ctr;
        out.push((label.to_string(), cfg));
    }
    out
}

/// Train the four ablation configurations from the same seed and evaluate
/// each on the test fold. Returns one row per configuration, in the order of
/// [`ablation_configs`].
pub fn run_ablation<F: Scalar>(
    base: &TrainingConfig,
    train_ds: &Dataset<F>,
    val_ds: &Dataset<F>,
    test_ds: &Dataset<F>,
    n_grids: usize,
    eval_seed: u64,
) -> Result<Vec<AblationRow>, crate::training::TrainError> {
    let mut rows = Vec::with_capacity(4);
    for (label, cfg) in ablation_configs(base) {
        log::info!("ablation run `{label}` starting");
        let (state, _metrics, outcome) = crate::training::train(cfg, train_ds, val_ds)?;
        if let crate::training::TrainOutcome::Diverged { at_step } = outcome {
            log::warn!("ablation run `{label}` diverged at step {at_step}; evaluating last good state");
        }
        let settings = EvalSettings {
            n_grids,
            seed: eval_seed,
            thresholds: Some(state.thresholds.clone()),
        };
        let report = evaluate_model(&state.gen, &state.head, &state.store, test_ds, &settings)?;
        rows.push(AblationRow {
            losses: label,
            macro_auc: report.macro_auc,
            macro_sensitivity: report.macro_sensitivity,
        });
    }
    Ok(rows)
}

/// Write ablation rows as CSV: `losses,macro_auc,macro_sensitivity`.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<(), EvalError> {
    let mut text = String::from("losses,macro_auc,macro_sensitivity\n");
    for row in rows {
        text.push_str(&format!("{},{},{}\n", row.losses, row.macro_auc, row.macro_sensitivity));
    }
    std::fs::write(path, text).map_err(|e| EvalError::Io { path: path.into(), source: e })
}
