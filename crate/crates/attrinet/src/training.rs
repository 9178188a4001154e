//! Loss assembly, the per-class two-batch training schedule, optimizers, and
//! checkpointing.
//!
//! One training step ("class visit") works on a single class c: a batch of
//! class-positive and a batch of class-negative images are drawn, the critic
//! takes `n_critic` updates telling apart real negatives from counterfactuals,
//! and then the generator and classification head take one joint update on
//!
//! ```text
//! L = lambda_cls * L_cls + lambda_adv * L_adv + lambda_reg * L_reg + lambda_ctr * L_ctr
//! ```
//!
//! Classes are visited round-robin. Everything is driven by one seeded rng and
//! runs single-threaded, so a (config, seed) pair reproduces the checkpoint
//! bit for bit.

use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::{critic_loss, Critic, CriticLossParts};
use crate::data::{class_pool, sample_class_batch, stack_images, DataError, Dataset};
use crate::eval::{class_scores, youden_threshold, EvalError};
use crate::grad::{Scalar, Tape, Var};
use crate::head::{center_loss, ClassCenters, Head};
use crate::nn::{Adam, Binder, ParamStore};
use crate::taskgen::{task_codes_batch, Generator};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the binary
/// cross entropy so saturated sigmoids cannot produce infinite loss.
pub const BCE_EPS: f64 = 1e-7;

/// Checkpoint container layout version.
pub const CHECKPOINT_SCHEMA: u32 = 1;

const CHECKPOINT_MAGIC: [u8; 8] = *b"ATRINET1";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("fitting the class-{class} threshold on validation data: {source}")]
    Threshold {
        class: usize,
        #[source]
        source: EvalError,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint encoding: {0}")]
    Encode(#[from] bincode::Error),
    #[error("{path} is not a checkpoint file (bad magic)")]
    BadMagic { path: PathBuf },
    #[error("checkpoint schema {found}; this build reads schema {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds {found} parameters but this model uses {expected}")]
    DtypeMismatch { found: String, expected: String },
    #[error("checkpoint does not match the configured architecture: {0}")]
    LayoutMismatch(String),
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Which classes the classification loss covers on a class-c visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClsMode {
    /// Full multi-label BCE over all C classes (all labels are known anyway).
    AllClasses,
    /// Only the visited class — one generator pass instead of C per image.
    VisitedClassOnly,
}

/// Everything that defines a run. Weight defaults follow the published
/// objective; architecture defaults are config knobs with no canonical value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub num_classes: usize,
    pub h: usize,
    pub w: usize,

    /// Generator channel width after the first convolution.
    pub base_ch: usize,
    /// Residual blocks in the generator bottleneck.
    pub n_res: usize,
    /// Critic channel width of the first convolution.
    pub critic_base_ch: usize,
    /// Stride-2 critic stages; bounded by the image size.
    pub critic_depth: usize,
    /// Head pooling factor.
    pub gamma: usize,

    pub lambda_cls: f64,
    pub lambda_adv: f64,
    pub lambda_reg: f64,
    pub lambda_ctr: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub lambda_gp: f64,
    pub alpha_ctr: f64,

    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub n_critic: usize,
    /// Visits per class; the run performs `num_classes *` this many steps.
    pub total_class_visits: usize,
    pub seed: u64,

    pub enable_adv: bool,
    pub enable_reg: bool,
    pub enable_ctr: bool,
    pub cls_mode: ClsMode,

    /// Every this many full class cycles, score the model on a validation
    /// subset and keep the best snapshot; the returned state is the best
    /// one seen (the adversarial game does not improve monotonically).
    /// 0 disables selection and returns the final state.
    pub select_every: usize,
}

impl TrainingConfig {
    /// Published defaults: lambda (100, 1, 100, 0.01), alpha (2, 1), lr 1e-4,
    /// batch 4, gradient-penalty weight 10, one critic step per visit.
    pub fn new(num_classes: usize, h: usize, w: usize, total_class_visits: usize, seed: u64) -> Self {
        TrainingConfig {
            num_classes,
            h,
            w,
            base_ch: 64,
            n_res: 6,
            critic_base_ch: 64,
            critic_depth: Critic::max_depth_for(h, w).min(6),
            gamma: 32,
            lambda_cls: 100.0,
            lambda_adv: 1.0,
            lambda_reg: 100.0,
            lambda_ctr: 0.01,
            alpha0: 2.0,
            alpha1: 1.0,
            lambda_gp: 10.0,
            alpha_ctr: 0.5,
            learning_rate: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 4,
            n_critic: 1,
            total_class_visits,
            seed,
            enable_adv: true,
            enable_reg: true,
            enable_ctr: true,
            cls_mode: ClsMode::AllClasses,
            select_every: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::InvalidConfig(msg));
        for (name, v) in [
            ("lambda_cls", self.lambda_cls),
            ("lambda_adv", self.lambda_adv),
            ("lambda_reg", self.lambda_reg),
            ("lambda_ctr", self.lambda_ctr),
            ("alpha0", self.alpha0),
            ("alpha1", self.alpha1),
            ("lambda_gp", self.lambda_gp),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} = {v} must be a finite nonnegative number"));
            }
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning_rate = {} must be positive", self.learning_rate));
        }
        if !(self.alpha_ctr > 0.0 && self.alpha_ctr <= 1.0) {
            return bad(format!("alpha_ctr = {} must be in (0, 1]", self.alpha_ctr));
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if self.total_class_visits < 1 {
            return bad("total_class_visits must be at least 1".into());
        }
        if self.num_classes < 1 {
            return bad("need at least one class".into());
        }
        if self.h % 4 != 0 || self.w % 4 != 0 {
            return bad(format!("geometry {}x{} must be divisible by 4", self.h, self.w));
        }
        if self.h % self.gamma != 0 || self.w % self.gamma != 0 {
            return bad(format!(
                "geometry {}x{} must be divisible by the pooling factor {}",
                self.h, self.w, self.gamma
            ));
        }
        let max_depth = Critic::max_depth_for(self.h, self.w);
        if self.critic_depth < 1 || self.critic_depth > max_depth {
            return bad(format!(
                "critic_depth {} outside 1..={max_depth} for {}x{} images",
                self.critic_depth, self.h, self.w
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Generator-side adversarial term: mean of `-score` over counterfactuals of
/// class-positive inputs (the generator wants the critic to score them high).
pub fn adversarial_loss<F: Scalar>(t: &Tape<F>, fake_scores: Var) -> Var {
    assert!(t.shape(fake_scores)[0] > 0, "adversarial loss over an empty batch");
    t.neg(t.mean_all(fake_scores))
}

/// Sparsity term: `alpha0 * mean_neg ||M||_1 + alpha1 * mean_pos ||M||_1`,
/// the mean running over each polarity's batch rows. Class-negative maps are
/// pushed toward zero harder — ideally nothing needs erasing there.
pub fn regularization_loss<F: Scalar>(
    t: &Tape<F>,
    neg_maps: Option<Var>,
    pos_maps: Option<Var>,
    alpha0: f64,
    alpha1: f64,
) -> Var {
    assert!(
        neg_maps.is_some() || pos_maps.is_some(),
        "regularization loss needs at least one polarity group"
    );
    let mean_l1 = |maps: Var| t.mean_all(t.sum_hw(t.abs(maps)));
    let mut total = t.scalar(F::zero());
    if let Some(m) = neg_maps {
        total = t.add(total, t.mul_scalar(mean_l1(m), F::cast(alpha0)));
    }
    if let Some(m) = pos_maps {
        total = t.add(total, t.mul_scalar(mean_l1(m), F::cast(alpha1)));
    }
    total
}

/// Multi-label binary cross entropy: per sample the BCE terms are summed over
/// the given classes, then averaged over the batch. Probabilities are clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn classification_loss<F: Scalar>(t: &Tape<F>, probs: Var, targets: &ArrayD<F>) -> Var {
    let shape = t.shape(probs);
    assert_eq!(shape.as_slice(), targets.shape(), "probs and targets must align");
    assert_eq!(shape.len(), 2, "probs must be (rows, classes)");
    let rows = shape[0];
    assert!(rows > 0, "classification loss over an empty batch");

    let eps = F::cast(BCE_EPS);
    let one = F::one();
    let y = t.leaf(targets.clone());
    let one_minus_y = t.add_scalar(t.neg(y), one);

    let p = t.clamp(probs, eps, one - eps);
    let one_minus_p = t.add_scalar(t.neg(p), one);
    let ll = t.add(t.mul(y, t.ln(p)), t.mul(one_minus_y, t.ln(one_minus_p)));
    t.mul_scalar(t.sum_all(ll), -F::one() / F::cast(rows as f64))
}

/// The weighted sum of the enabled objective terms. Disabled terms are simply
/// absent (`None`), so their gradient contribution is structurally zero.
pub fn total_generator_loss<F: Scalar>(
    t: &Tape<F>,
    cls: Var,
    adv: Option<Var>,
    reg: Option<Var>,
    ctr: Option<Var>,
    config: &TrainingConfig,
) -> Var {
    let mut total = t.mul_scalar(cls, F::cast(config.lambda_cls));
    for (term, weight) in [
        (adv, config.lambda_adv),
        (reg, config.lambda_reg),
        (ctr, config.lambda_ctr),
    ] {
        if let Some(v) = term {
            total = t.add(total, t.mul_scalar(v, F::cast(weight)));
        }
    }
    total
}

// ---------------------------------------------------------------------------
// Training state
// ---------------------------------------------------------------------------

/// Mutable training state: parameters, centers, optimizers, rng, progress.
pub struct TrainState<F: Scalar> {
    pub config: TrainingConfig,
    pub store: ParamStore<F>,
    pub gen: Generator,
    pub critic: Critic,
    pub head: Head,
    pub centers: ClassCenters<F>,
    pub gen_opt: Adam,
    pub critic_opt: Adam,
    pub rng: ChaCha12Rng,
    /// Completed class visits.
    pub step: u64,
    /// Per-class decision thresholds; empty until fitted on validation data.
    pub thresholds: Vec<f64>,
}

/// Build the three networks in a fixed order so parameter ids are a pure
/// function of the config — checkpoints rely on this to re-attach.
fn build_models<F: Scalar>(
    config: &TrainingConfig,
    store: &mut ParamStore<F>,
    rng: &mut ChaCha12Rng,
) -> (Generator, Critic, Head) {
    let gen = Generator::new(store, config.num_classes, config.base_ch, config.n_res, rng);
    let critic =
        Critic::new(store, config.num_classes, config.critic_base_ch, config.critic_depth, rng);
    let head = Head::new(store, config.num_classes, config.h, config.w, config.gamma);
    (gen, critic, head)
}

/// Copy of everything a visit mutates, for divergence rollback.
struct Snapshot<F: Scalar> {
    store: ParamStore<F>,
    centers: ClassCenters<F>,
    gen_opt: Adam,
    critic_opt: Adam,
    rng: ChaCha12Rng,
    step: u64,
}

impl<F: Scalar> TrainState<F> {
    /// Fresh seeded initialization.
    pub fn new(config: TrainingConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let (gen, critic, head) = build_models(&config, &mut store, &mut rng);
        let centers = ClassCenters::zeros(config.num_classes, config.h, config.w);
        let lr = config.learning_rate;
        let (b1, b2) = (config.beta1, config.beta2);
        Ok(TrainState {
            config,
            store,
            gen,
            critic,
            head,
            centers,
            gen_opt: Adam::new(lr, b1, b2),
            critic_opt: Adam::new(lr, b1, b2),
            rng,
            step: 0,
            thresholds: Vec::new(),
        })
    }

    fn snapshot(&self) -> Snapshot<F> {
        Snapshot {
            store: self.store.clone(),
            centers: self.centers.clone(),
            gen_opt: self.gen_opt.clone(),
            critic_opt: self.critic_opt.clone(),
            rng: self.rng.clone(),
            step: self.step,
        }
    }

    fn restore(&mut self, snap: Snapshot<F>) {
        self.store = snap.store;
        self.centers = snap.centers;
        self.gen_opt = snap.gen_opt;
        self.critic_opt = snap.critic_opt;
        self.rng = snap.rng;
        self.step = snap.step;
    }
}

/// True when every parameter of every tensor is finite.
pub fn store_is_finite<F: Scalar>(store: &ParamStore<F>) -> bool {
    store.ids().all(|id| store.value(id).iter().all(|&v| v.to_f64().is_finite()))
}

// ---------------------------------------------------------------------------
// One class visit
// ---------------------------------------------------------------------------

/// Loss record of one visit. Component losses are raw (unweighted); the total
/// is the lambda-weighted objective. Disabled components are `None`.
#[derive(Debug, Clone)]
pub struct VisitMetrics {
    pub step: u64,
    pub class: usize,
    pub loss_cls: f64,
    pub loss_adv: Option<f64>,
    pub loss_reg: Option<f64>,
    pub loss_ctr: Option<f64>,
    pub loss_total: f64,
    pub critic: Option<CriticLossParts>,
}

impl VisitMetrics {
    pub fn is_finite(&self) -> bool {
        let opt = |v: Option<f64>| v.map_or(true, f64::is_finite);
        self.loss_cls.is_finite()
            && self.loss_total.is_finite()
            && opt(self.loss_adv)
            && opt(self.loss_reg)
            && opt(self.loss_ctr)
            && self.critic.as_ref().map_or(true, |c| {
                c.mean_fake.is_finite() && c.mean_real.is_finite() && c.gradient_penalty.is_finite()
            })
    }
}

/// Gradients of `loss` for the parameters whose names match `keep`, ready for
/// the optimizer.
fn grads_for<F: Scalar>(
    tape: &Tape<F>,
    binder: &Binder<'_, F>,
    store: &ParamStore<F>,
    loss: Var,
    keep: impl Fn(&str) -> bool,
) -> Vec<(crate::nn::ParamId, Rc<ArrayD<F>>)> {
    let bound: Vec<_> = binder
        .bound()
        .into_iter()
        .filter(|(id, _)| keep(store.name(*id)))
        .collect();
    let vars: Vec<Var> = bound.iter().map(|&(_, v)| v).collect();
    let grads = tape.backward(loss, &vars);
    bound.iter().zip(grads).map(|(&(id, _), g)| (id, tape.value(g))).collect()
}

/// One training step on class `class`: two batches, `n_critic` critic updates,
/// one generator+head update, one center update.
pub fn train_class_visit<F: Scalar>(
    state: &mut TrainState<F>,
    train: &Dataset<F>,
    class: usize,
) -> Result<VisitMetrics, TrainError> {
    let cfg = state.config.clone();
    let bsz = cfg.batch_size;
    let c = cfg.num_classes;

    let pos = sample_class_batch(train, class, true, bsz, &mut state.rng)?;
    let neg = sample_class_batch(train, class, false, bsz, &mut state.rng)?;
    let pos_x = stack_images(&pos);
    let neg_x = stack_images(&neg);

    // --- Critic updates -----------------------------------------------------
    // The critic separates real class-negative images from counterfactuals of
    // class-positive ones. Counterfactuals enter as constants: the critic step
    // must not reach into the generator.
    let mut critic_parts = None;
    if cfg.enable_adv {
        for _ in 0..cfg.n_critic {
            let fake = {
                let maps =
                    crate::taskgen::attribution_maps(&state.gen, &state.store, &pos_x, &vec![class; bsz]);
                crate::taskgen::counterfactual(&pos_x, &maps)
            };
            let tape = Tape::<F>::new();
            let binder = Binder::new(&tape, &state.store);
            let (loss, parts) = critic_loss(
                &binder,
                &state.critic,
                &neg_x,
                &fake,
                class,
                cfg.lambda_gp,
                &mut state.rng,
            );
            let grads = grads_for(&tape, &binder, &state.store, loss, |n| n.starts_with("critic."));
            state.critic_opt.step(&mut state.store, &grads);
            critic_parts = Some(parts);
        }
    }

    // --- Generator + head update -------------------------------------------
    let tape = Tape::<F>::new();
    let b = Binder::new(&tape, &state.store);

    let pos_leaf = tape.leaf(pos_x.clone());
    let neg_leaf = tape.leaf(neg_x.clone());
    let codes_pos = tape.leaf(task_codes_batch(&vec![class; bsz], c));
    let codes_neg = tape.leaf(task_codes_batch(&vec![class; bsz], c));
    let pos_maps = state.gen.attribution(&b, pos_leaf, codes_pos);
    let neg_maps = state.gen.attribution(&b, neg_leaf, codes_neg);

    // Class-c maps of both batches, rows: positives then negatives.
    let both_maps = tape.add(
        tape.pad_zero(pos_maps, 0, 0, 2 * bsz),
        tape.pad_zero(neg_maps, 0, bsz, 2 * bsz),
    );
    let both_labels: Vec<bool> = pos
        .iter()
        .map(|_| true)
        .chain(neg.iter().map(|_| false))
        .collect();

    // Classification: full C-class BCE needs maps of every class for every
    // image; the visited-class-only mode reuses the maps already computed.
    let cls = match cfg.cls_mode {
        ClsMode::AllClasses => {
            let rows = 2 * bsz * c;
            let mut images = ArrayD::<F>::zeros(IxDyn(&[rows, 1, cfg.h, cfg.w]));
            let mut row_classes = Vec::with_capacity(rows);
            for (i, s) in pos.iter().chain(neg.iter()).enumerate() {
                for class_j in 0..c {
                    images
                        .index_axis_mut(ndarray::Axis(0), i * c + class_j)
                        .assign(&s.image.view().into_shape_with_order((1, cfg.h, cfg.w)).unwrap());
                    row_classes.push(class_j);
                }
            }
            let x = tape.leaf(images);
            let codes = tape.leaf(task_codes_batch(&row_classes, c));
            let maps = state.gen.attribution(&b, x, codes);
            let probs = state.head.class_probs(&b, maps, &row_classes);
            let probs = tape.reshape(probs, &[2 * bsz, c]);

            let mut targets = ArrayD::<F>::zeros(IxDyn(&[2 * bsz, c]));
            for (i, s) in pos.iter().chain(neg.iter()).enumerate() {
                for (j, &l) in s.labels.iter().enumerate() {
                    targets[[i, j]] = F::cast(l as f64);
                }
            }
            classification_loss(&tape, probs, &targets)
        }
        ClsMode::VisitedClassOnly => {
            let row_classes = vec![class; 2 * bsz];
            let probs = state.head.class_probs(&b, both_maps, &row_classes);
            let mut targets = ArrayD::<F>::zeros(IxDyn(&[2 * bsz, 1]));
            for (i, s) in pos.iter().chain(neg.iter()).enumerate() {
                targets[[i, 0]] = F::cast(s.labels[class] as f64);
            }
            classification_loss(&tape, probs, &targets)
        }
    };

    let adv = cfg.enable_adv.then(|| {
        let fake = tape.add(pos_leaf, pos_maps);
        let codes = tape.leaf(task_codes_batch(&vec![class; bsz], c));
        let scores = state.critic.scores(&b, fake, codes);
        adversarial_loss(&tape, scores)
    });
    let reg = cfg
        .enable_reg
        .then(|| regularization_loss(&tape, Some(neg_maps), Some(pos_maps), cfg.alpha0, cfg.alpha1));
    let ctr = cfg
        .enable_ctr
        .then(|| center_loss(&b, both_maps, &both_labels, &state.centers, class));

    let total = total_generator_loss(&tape, cls, adv, reg, ctr, &cfg);

    let metrics = VisitMetrics {
        step: state.step,
        class,
        loss_cls: tape.scalar_value(cls).to_f64(),
        loss_adv: adv.map(|v| tape.scalar_value(v).to_f64()),
        loss_reg: reg.map(|v| tape.scalar_value(v).to_f64()),
        loss_ctr: ctr.map(|v| tape.scalar_value(v).to_f64()),
        loss_total: tape.scalar_value(total).to_f64(),
        critic: critic_parts,
    };

    // The adversarial term runs through the critic, but only generator and
    // head parameters receive this update.
    let maps_value = tape.value(both_maps);
    let grads = grads_for(&tape, &b, &state.store, total, |n| {
        n.starts_with("gen.") || n.starts_with("head.")
    });
    drop(tape);
    state.gen_opt.step(&mut state.store, &grads);

    if cfg.enable_ctr {
        state.centers.update(&maps_value, &both_labels, class, cfg.alpha_ctr);
    }

    state.step += 1;
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// How a run ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainOutcome {
    Completed,
    /// The objective went non-finite; the returned state is the last finite
    /// one and `at_step` is the visit that diverged.
    Diverged { at_step: u64 },
}

/// Train from scratch; see [`train_from`].
pub fn train<F: Scalar>(
    config: TrainingConfig,
    train_ds: &Dataset<F>,
    val_ds: &Dataset<F>,
) -> Result<(TrainState<F>, Vec<VisitMetrics>, TrainOutcome), TrainError> {
    let state = TrainState::new(config)?;
    train_from(state, train_ds, val_ds)
}

/// Run (or resume) the round-robin class schedule until every class has had
/// `total_class_visits` visits, then fit per-class Youden thresholds on the
/// validation fold.
///
/// After every finite visit the full mutable state is snapshotted; if a visit
/// produces a non-finite loss or parameter, the state rolls back to the last
/// good snapshot and the run stops with [`TrainOutcome::Diverged`].
pub fn train_from<F: Scalar>(
    mut state: TrainState<F>,
    train_ds: &Dataset<F>,
    val_ds: &Dataset<F>,
) -> Result<(TrainState<F>, Vec<VisitMetrics>, TrainOutcome), TrainError> {
    let cfg = state.config.clone();
    let c = cfg.num_classes;
    for ds in [train_ds, val_ds] {
        if ds.num_classes() != c || ds.geometry() != (cfg.h, cfg.w) {
            return Err(TrainError::InvalidConfig(format!(
                "config expects {c} classes at {}x{}, dataset has {} at {:?}",
                cfg.h,
                cfg.w,
                ds.num_classes(),
                ds.geometry()
            )));
        }
    }
    for class in 0..c {
        for (positive, name) in [(true, "positive"), (false, "negative")] {
            if class_pool(train_ds, class, positive).is_empty() {
                return Err(TrainError::InvalidConfig(format!(
                    "training fold has no {name} samples for class {class}"
                )));
            }
        }
    }

    let total_steps = cfg.total_class_visits as u64 * c as u64;
    let mut snapshot = state.snapshot();
    let mut metrics = Vec::new();
    let mut outcome = TrainOutcome::Completed;
    let selection_val = (cfg.select_every > 0).then(|| selection_subset(val_ds));
    let mut best: Option<((f64, f64), Snapshot<F>)> = None;
    let consider = |state: &TrainState<F>, best: &mut Option<((f64, f64), Snapshot<F>)>| {
        let subset = selection_val.as_ref().expect("selection enabled");
        let key = selection_key(state, subset);
        if best.as_ref().is_none_or(|(b, _)| key > *b) {
            log::info!(
                "selection: step {} val AUC min {:.4} mean {:.4} is the best so far",
                state.step,
                key.0,
                key.1
            );
            *best = Some((key, state.snapshot()));
        }
    };

    while state.step < total_steps {
        let class = (state.step % c as u64) as usize;
        let rec = train_class_visit(&mut state, train_ds, class)?;
        if !rec.is_finite() || !store_is_finite(&state.store) {
            let at_step = rec.step;
            log::warn!(
                "visit {at_step} (class {class}) went non-finite; rolling back to step {}",
                snapshot.step
            );
            state.restore(snapshot);
            outcome = TrainOutcome::Diverged { at_step };
            break;
        }
        if rec.step % 50 == 0 {
            log::info!(
                "visit {}/{total_steps}: class {class}, total {:.4}, cls {:.4}",
                rec.step,
                rec.loss_total,
                rec.loss_cls
            );
        }
        metrics.push(rec);
        snapshot = state.snapshot();
        if cfg.select_every > 0 && state.step % (cfg.select_every as u64 * c as u64) == 0 {
            consider(&state, &mut best);
        }
    }

    // The final state competes too, then the best seen wins.
    if cfg.select_every > 0 {
        consider(&state, &mut best);
        if let Some((key, snap)) = best {
            log::info!(
                "selection: restoring step {} (val AUC min {:.4} mean {:.4})",
                snap.step,
                key.0,
                key.1
            );
            state.restore(snap);
        }
    }

    state.thresholds = (0..c)
        .map(|class| {
            let (scores, labels) = class_scores(&state.gen, &state.head, &state.store, val_ds, class);
            youden_threshold(&scores, &labels).map_err(|source| TrainError::Threshold { class, source })
        })
        .collect::<Result<_, _>>()?;

    Ok((state, metrics, outcome))
}

/// Validation samples used for snapshot selection: the fold's head, extended
/// until every class has both polarities (so AUC is defined), capped for
/// speed — selection needs a cheap, stable ranking signal, not a report.
fn selection_subset<F: Scalar>(val_ds: &Dataset<F>) -> Dataset<F> {
    const BASE: usize = 192;
    let c = val_ds.num_classes();
    let n = val_ds.samples.len();
    let mut take = BASE.min(n);
    let covered = |k: usize| {
        (0..c).all(|class| {
            let mut pos = false;
            let mut neg = false;
            for s in &val_ds.samples[..k] {
                if s.labels[class] == 1 {
                    pos = true;
                } else {
                    neg = true;
                }
            }
            pos && neg
        })
    };
    while take < n && !covered(take) {
        take += 1;
    }
    Dataset { samples: val_ds.samples[..take].to_vec(), class_names: val_ds.class_names.clone() }
}

/// Per-class AUC on a dataset; classes with one polarity count 0.5.
fn per_class_val_auc<F: Scalar>(state: &TrainState<F>, ds: &Dataset<F>) -> Vec<f64> {
    (0..ds.num_classes())
        .map(|class| {
            let (scores, labels) = class_scores(&state.gen, &state.head, &state.store, ds, class);
            crate::eval::roc_auc(&scores, &labels).unwrap_or(0.5)
        })
        .collect()
}

/// Snapshot-selection ranking: worst-class AUC first, mean AUC as the
/// tie-break. A model is only as usable as its weakest class, so the
/// selection maximizes the minimum rather than the average.
fn selection_key<F: Scalar>(state: &TrainState<F>, ds: &Dataset<F>) -> (f64, f64) {
    let per_class = per_class_val_auc(state, ds);
    let min = per_class.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = per_class.iter().sum::<f64>() / per_class.len().max(1) as f64;
    (min, mean)
}

/// Write visit metrics as CSV; disabled components leave empty cells.
pub fn write_metrics_csv(metrics: &[VisitMetrics], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from(
        "step,class,loss_cls,loss_adv,loss_reg,loss_ctr,loss_total,critic_total,critic_fake,critic_real,critic_gp\n",
    );
    let cell = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for m in metrics {
        let (ct, cf, cr, cg) = match &m.critic {
            Some(p) => (
                Some(p.mean_fake - p.mean_real + p.gradient_penalty),
                Some(p.mean_fake),
                Some(p.mean_real),
                Some(p.gradient_penalty),
            ),
            None => (None, None, None, None),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            m.step,
            m.class,
            m.loss_cls,
            cell(m.loss_adv),
            cell(m.loss_reg),
            cell(m.loss_ctr),
            m.loss_total,
            cell(ct),
            cell(cf),
            cell(cr),
            cell(cg),
        ));
    }
    std::fs::write(path, out).map_err(|e| TrainError::Io { path: path.into(), source: e })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    magic: [u8; 8],
    schema: u32,
    dtype: String,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
struct CheckpointPayload<F: Scalar> {
    config: TrainingConfig,
    store: ParamStore<F>,
    centers: ClassCenters<F>,
    thresholds: Vec<f64>,
    step: u64,
    rng: ChaCha12Rng,
    gen_opt: Adam,
    critic_opt: Adam,
}

/// Serialize the full training state as one versioned binary file.
pub fn save_checkpoint<F: Scalar>(state: &TrainState<F>, path: &Path) -> Result<(), TrainError> {
    let io = |e: std::io::Error| TrainError::Io { path: path.into(), source: e };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        magic: CHECKPOINT_MAGIC,
        schema: CHECKPOINT_SCHEMA,
        dtype: F::DTYPE.to_string(),
    };
    bincode::serialize_into(&mut w, &header)?;
    let payload = CheckpointPayload {
        config: state.config.clone(),
        store: state.store.clone(),
        centers: state.centers.clone(),
        thresholds: state.thresholds.clone(),
        step: state.step,
        rng: state.rng.clone(),
        gen_opt: state.gen_opt.clone(),
        critic_opt: state.critic_opt.clone(),
    };
    bincode::serialize_into(&mut w, &payload)?;
    w.flush().map_err(io)?;
    Ok(())
}

/// Load a checkpoint saved by [`save_checkpoint`] with the same float type,
/// rebuilding the model structure from the stored config.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<TrainState<F>, TrainError> {
    let file = std::fs::File::open(path)
        .map_err(|e| TrainError::Io { path: path.into(), source: e })?;
    let mut r = BufReader::new(file);
    let header: CheckpointHeader =
        bincode::deserialize_from(&mut r).map_err(|_| TrainError::BadMagic { path: path.into() })?;
    if header.magic != CHECKPOINT_MAGIC {
        return Err(TrainError::BadMagic { path: path.into() });
    }
    if header.schema != CHECKPOINT_SCHEMA {
        return Err(TrainError::SchemaMismatch { found: header.schema, expected: CHECKPOINT_SCHEMA });
    }
    if header.dtype != F::DTYPE {
        return Err(TrainError::DtypeMismatch {
            found: header.dtype,
            expected: F::DTYPE.to_string(),
        });
    }
    let payload: CheckpointPayload<F> = bincode::deserialize_from(&mut r)?;
    payload.config.validate()?;

    // Rebuild the architecture (parameter ids are a function of the config),
    // then adopt the stored parameters after checking they actually fit.
    let mut fresh = ParamStore::<F>::new();
    let mut init_rng = ChaCha12Rng::seed_from_u64(payload.config.seed);
    let (gen, critic, head) = build_models(&payload.config, &mut fresh, &mut init_rng);
    if fresh.len() != payload.store.len() {
        return Err(TrainError::LayoutMismatch(format!(
            "{} parameter tensors stored, {} expected",
            payload.store.len(),
            fresh.len()
        )));
    }
    for (a, b) in fresh.ids().zip(payload.store.ids()) {
        let (na, nb) = (fresh.name(a), payload.store.name(b));
        if na != nb || fresh.value(a).shape() != payload.store.value(b).shape() {
            return Err(TrainError::LayoutMismatch(format!(
                "parameter {na:?} {:?} vs stored {nb:?} {:?}",
                fresh.value(a).shape(),
                payload.store.value(b).shape()
            )));
        }
    }

    Ok(TrainState {
        config: payload.config,
        store: payload.store,
        gen,
        critic,
        head,
        centers: payload.centers,
        gen_opt: payload.gen_opt,
        critic_opt: payload.critic_opt,
        rng: payload.rng,
        step: payload.step,
        thresholds: payload.thresholds,
    })
}
