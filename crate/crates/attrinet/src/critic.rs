//! Task-conditioned Wasserstein critic with gradient penalty.
//!
//! The critic scores how much an image looks like a *real class-negative*
//! example for the task selected by the code — counterfactuals from the
//! generator are the fakes it learns to push down. Architecture: a stack of
//! stride-2 4x4 convolutions (channels doubling per layer), each followed by
//! AdaIN conditioning and ReLU, then a 3x3 output convolution whose score map
//! is averaged to one scalar per sample.
//!
//! The stack depth adapts to the input size: every layer halves the spatial
//! extent, and instance statistics over a 1x1 plane would collapse the
//! features, so the final feature map must keep at least 2x2 pixels.
//!
//! The Lipschitz constraint is enforced with a gradient penalty on straight
//! lines between real and fake samples; computing its parameter gradient means
//! differentiating through an input gradient, which the tape supports
//! natively.

use ndarray::ArrayD;
use rand::Rng;

use crate::grad::{Scalar, Tape, Var};
use crate::nn::{AdaIn, Binder, Conv2d, ParamStore};
use crate::taskgen::{task_codes_batch, EmbeddingNet};

/// Keeps gradient-norm derivatives finite when a norm is exactly zero.
const NORM_EPS: f64 = 1e-12;

/// Scalar values of the critic-loss components, for metrics logging.
#[derive(Debug, Clone, Copy)]
pub struct CriticLossParts {
    pub mean_fake: f64,
    pub mean_real: f64,
    pub gradient_penalty: f64,
}

/// The conditioned critic network.
pub struct Critic {
    pub emb: EmbeddingNet,
    layers: Vec<(Conv2d, AdaIn)>,
    out: Conv2d,
    pub num_classes: usize,
    pub base_ch: usize,
    pub depth: usize,
}

impl Critic {
    /// `depth` stride-2 conv layers with channels `base_ch * 2^i`.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        num_classes: usize,
        base_ch: usize,
        depth: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(depth >= 1, "critic needs at least one conv layer");
        let p = "critic";
        let emb = EmbeddingNet::new(store, p, num_classes, rng);
        let e = emb.out_dim();
        let mut layers = Vec::with_capacity(depth);
        let mut in_ch = 1;
        for i in 0..depth {
            let out_ch = base_ch << i;
            let conv = Conv2d::new(store, &format!("{p}.conv.{i}"), in_ch, out_ch, 4, 2, 1, rng);
            let ada = AdaIn::new(store, &format!("{p}.conv.{i}.ada"), e, out_ch);
            layers.push((conv, ada));
            in_ch = out_ch;
        }
        let out = Conv2d::new(store, &format!("{p}.out"), in_ch, 1, 3, 1, 1, rng);
        Critic { emb, layers, out, num_classes, base_ch, depth }
    }

    /// Largest stack depth usable for `h x w` inputs (final plane >= 2x2).
    pub fn max_depth_for(h: usize, w: usize) -> usize {
        let mut depth = 0;
        let (mut h, mut w) = (h, w);
        while h % 2 == 0 && w % 2 == 0 && h >= 4 && w >= 4 {
            h /= 2;
            w /= 2;
            depth += 1;
        }
        depth
    }

    /// Per-sample scores, shape `(N, 1, 1, 1)`. `x: (N, 1, H, W)`,
    /// `codes: (N, 20C)`.
    pub fn scores<F: Scalar>(&self, b: &Binder<F>, x: Var, codes: Var) -> Var {
        let shape = b.tape.shape(x);
        assert_eq!(shape.len(), 4, "critic input must be (N, 1, H, W)");
        assert_eq!(shape[1], 1, "critic expects one input channel");
        let reduced = 1usize << self.depth;
        assert!(
            shape[2] % reduced == 0 && shape[3] % reduced == 0 && shape[2] / reduced >= 2 && shape[3] / reduced >= 2,
            "critic of depth {} needs input divisible by {} with at least a 2x2 final plane, got {}x{}",
            self.depth,
            reduced,
            shape[2],
            shape[3]
        );
        let e = self.emb.forward(b, codes);
        let mut h = x;
        for (conv, ada) in &self.layers {
            h = b.tape.relu(ada.forward(b, conv.forward(b, h), e));
        }
        let map = self.out.forward(b, h);
        b.tape.mean_hw(map)
    }
}

/// `mean(fake scores) - mean(real scores)`, the Wasserstein part of the critic
/// objective. Both inputs are per-sample score tensors.
pub fn wasserstein_loss<F: Scalar>(t: &Tape<F>, fake_scores: Var, real_scores: Var) -> Var {
    t.sub(t.mean_all(fake_scores), t.mean_all(real_scores))
}

/// Gradient penalty for an arbitrary per-sample scoring function:
/// `mean_i (|| d score_i / d x~_i ||_2 - 1)^2` at per-sample uniform
/// interpolates `x~ = t * real + (1 - t) * fake`.
///
/// The score function must return one score per sample (any shape with N
/// leading); per-sample input gradients are recovered from one backward pass
/// of the summed scores, which is exact because sample `i`'s score cannot
/// depend on sample `j`'s input.
pub fn gradient_penalty_with<F: Scalar>(
    t: &Tape<F>,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    rng: &mut impl Rng,
    score_fn: impl FnOnce(&Tape<F>, Var) -> Var,
) -> Var {
    assert_eq!(real.shape(), fake.shape(), "real and fake batches must match");
    assert_eq!(real.ndim(), 4, "expected (N, 1, H, W) batches");
    let n = real.shape()[0];
    assert!(n > 0, "empty batch");

    let mut interp = ArrayD::zeros(real.raw_dim());
    for i in 0..n {
        let ti = F::cast(rng.gen_range(0.0..1.0));
        let one_m = F::one() - ti;
        let mut row = interp.index_axis_mut(ndarray::Axis(0), i);
        let r = real.index_axis(ndarray::Axis(0), i);
        let f = fake.index_axis(ndarray::Axis(0), i);
        row.assign(&(&r.mapv(|v| v * ti) + &f.mapv(|v| v * one_m)));
    }

    let x = t.leaf(interp);
    let scores = score_fn(t, x);
    assert_eq!(t.shape(scores)[0], n, "score function must keep the batch axis");
    let summed = t.sum_all(scores);
    let gx = t.backward(summed, &[x])[0];

    let sq = t.sum_hw(t.square(gx)); // (N, 1, 1, 1)
    let norm = t.sqrt(t.add_scalar(sq, F::cast(NORM_EPS)));
    let dev = t.add_scalar(norm, -F::one());
    t.mean_all(t.square(dev))
}

/// Gradient penalty of a [`Critic`] for one class.
pub fn gradient_penalty<F: Scalar>(
    b: &Binder<F>,
    critic: &Critic,
    real: &ArrayD<F>,
    fake: &ArrayD<F>,
    class: usize,
    rng: &mut impl Rng,
) -> Var {
    let n = real.shape()[0];
    let codes = b.tape.leaf(task_codes_batch(&vec![class; n], critic.num_classes));
    gradient_penalty_with(b.tape, real, fake, rng, |t, x| {
        let _ = t;
        critic.scores(b, x, codes)
    })
}

/// Full critic objective for one class visit:
/// `mean(D(fake)) - mean(D(real_neg)) + lambda_gp * gradient_penalty`.
///
/// `real_neg` are images with label 0 for the class; `fake` are counterfactual
/// arrays from class-positive images (constants here — the critic step must
/// not push gradients into the generator).
pub fn critic_loss<F: Scalar>(
    b: &Binder<F>,
    critic: &Critic,
    real_neg: &ArrayD<F>,
    fake: &ArrayD<F>,
    class: usize,
    lambda_gp: f64,
    rng: &mut impl Rng,
) -> (Var, CriticLossParts) {
    assert!(real_neg.shape()[0] > 0 && fake.shape()[0] > 0, "empty batch");
    let t = b.tape;
    let nf = fake.shape()[0];
    let nr = real_neg.shape()[0];
    let fake_codes = t.leaf(task_codes_batch(&vec![class; nf], critic.num_classes));
    let real_codes = t.leaf(task_codes_batch(&vec![class; nr], critic.num_classes));

    let fake_scores = critic.scores(b, t.leaf(fake.clone()), fake_codes);
    let real_scores = critic.scores(b, t.leaf(real_neg.clone()), real_codes);
    let w = wasserstein_loss(t, fake_scores, real_scores);
    let gp = gradient_penalty(b, critic, real_neg, fake, class, rng);
    let loss = t.add(w, t.mul_scalar(gp, F::cast(lambda_gp)));

    let parts = CriticLossParts {
        mean_fake: t.scalar_value(t.mean_all(fake_scores)).to_f64(),
        mean_real: t.scalar_value(t.mean_all(real_scores)).to_f64(),
        gradient_penalty: t.scalar_value(gp).to_f64(),
    };
    (loss, parts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Adam;
    use crate::taskgen::{attribution_maps, counterfactual, Generator};
    use ndarray::IxDyn;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn randn(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
        use rand::Rng as _;
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
    }

    fn tiny_critic(seed: u64, num_classes: usize) -> (ParamStore<f64>, Critic) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let critic = Critic::new(&mut store, num_classes, 4, 2, &mut rng);
        (store, critic)
    }

    #[test]
    fn zero_output_conv_scores_zero_for_any_input() {
        let (mut store, critic) = tiny_critic(1, 2);
        store.set_value(critic.out.w, ArrayD::zeros(IxDyn(&[1, 8, 3, 3])));
        let mut rng = StdRng::seed_from_u64(2);
        let x = randn(&mut rng, &[3, 1, 8, 8], -1.0, 1.0);

        let tape = Tape::new();
        let b = Binder::new(&tape, &store);
        let xv = tape.leaf(x);
        let codes = tape.leaf(task_codes_batch(&[0, 1, 0], 2));
        let s = tape.value(critic.scores(&b, xv, codes));
        assert!(s.iter().all(|&v| v == 0.0), "scores {s:?}");
    }

    #[test]
    fn scores_are_deterministic() {
        let (store, critic) = tiny_critic(3, 2);
        let mut rng = StdRng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
        let run = || {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let xv = tape.leaf(x.clone());
            let codes = tape.leaf(task_codes_batch(&[1, 0], 2));
            tape.value(critic.scores(&b, xv, codes)).as_ref().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn max_depth_keeps_a_two_by_two_plane() {
        assert_eq!(Critic::max_depth_for(64, 64), 5);
        assert_eq!(Critic::max_depth_for(128, 128), 6);
        assert_eq!(Critic::max_depth_for(8, 8), 2);
        assert_eq!(Critic::max_depth_for(6, 6), 1);
    }

    #[test]
    fn wasserstein_loss_matches_hand_arithmetic() {
        let t: Tape<f64> = Tape::new();
        let fake = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0, 2.0]).unwrap());
        let real = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![2.0, 2.0]).unwrap());
        assert_eq!(t.scalar_value(wasserstein_loss(&t, fake, real)), 0.0);

        let fake = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.0, 0.0]).unwrap());
        let real = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![1.0, 3.0]).unwrap());
        assert_eq!(t.scalar_value(wasserstein_loss(&t, fake, real)), -2.0);
    }

    #[test]
    fn unit_gradient_score_gives_zero_penalty() {
        // score_i = sum(x_i) / sqrt(hw) has gradient norm exactly 1 per sample.
        let mut rng = StdRng::seed_from_u64(5);
        let real = randn(&mut rng, &[3, 1, 4, 4], -1.0, 1.0);
        let fake = randn(&mut rng, &[3, 1, 4, 4], -1.0, 1.0);
        let t: Tape<f64> = Tape::new();
        let pen = gradient_penalty_with(&t, &real, &fake, &mut rng, |t, x| {
            t.mul_scalar(t.sum_hw(x), 1.0 / 4.0)
        });
        assert!(t.scalar_value(pen).abs() < 1e-9);
    }

    #[test]
    fn linear_score_penalty_matches_closed_form() {
        // score_i = 2 sum(x_i) on 4x4: gradient norm 2 sqrt(16) = 8, penalty (8-1)^2.
        let mut rng = StdRng::seed_from_u64(6);
        let real = randn(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
        let fake = randn(&mut rng, &[2, 1, 4, 4], -1.0, 1.0);
        let t: Tape<f64> = Tape::new();
        let pen = gradient_penalty_with(&t, &real, &fake, &mut rng, |t, x| {
            t.mul_scalar(t.sum_hw(x), 2.0)
        });
        let expect = (2.0 * 4.0 - 1.0) * (2.0 * 4.0 - 1.0);
        assert!((t.scalar_value(pen) - expect).abs() < 1e-9);
    }

    #[test]
    fn penalty_parameter_gradient_matches_finite_differences() {
        let (store, critic) = tiny_critic(7, 1);
        let mut rng = StdRng::seed_from_u64(8);
        let real = randn(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
        let fake = randn(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);

        // Freeze the interpolation draw so every probe sees the same x~.
        let penalty_with = |probe: &ArrayD<f64>, id: crate::nn::ParamId| -> f64 {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let mut draw = StdRng::seed_from_u64(99);
            let codes_arr = task_codes_batch(&[0, 0], 1);
            let pen = gradient_penalty_with(&tape, &real, &fake, &mut draw, |t, x| {
                let codes = t.leaf(codes_arr.clone());
                let pv = t.leaf(probe.clone());
                // Re-run the critic with one tensor substituted.
                let e = critic.emb.forward(&b, codes);
                let mut h = x;
                for (conv, ada) in &critic.layers {
                    let w = if conv.w == id { pv } else { b.var(conv.w) };
                    h = t.relu(ada.forward(&b, t.conv(h, w, conv.geom), e));
                }
                let w = if critic.out.w == id { pv } else { b.var(critic.out.w) };
                t.mean_hw(t.conv(h, w, critic.out.geom))
            });
            tape.scalar_value(pen)
        };

        // Finite differences on the first conv kernel, against the tape's
        // second-order gradient computed in one graph.
        let id = critic.layers[0].0.w;
        let w0 = store.value(id).as_ref().clone();

        let analytic = {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let mut draw = StdRng::seed_from_u64(99);
            let codes_arr = task_codes_batch(&[0, 0], 1);
            let pv = tape.leaf(w0.clone());
            let pen = gradient_penalty_with(&tape, &real, &fake, &mut draw, |t, x| {
                let codes = t.leaf(codes_arr.clone());
                let e = critic.emb.forward(&b, codes);
                let mut h = x;
                for (conv, ada) in &critic.layers {
                    let w = if conv.w == id { pv } else { b.var(conv.w) };
                    h = t.relu(ada.forward(&b, t.conv(h, w, conv.geom), e));
                }
                t.mean_hw(t.conv(h, b.var(critic.out.w), critic.out.geom))
            });
            let g = tape.backward(pen, &[pv])[0];
            tape.value(g).as_ref().clone()
        };

        let eps = 1e-5;
        let mut probe = w0.clone();
        let mut max_rel = 0.0f64;
        for i in 0..w0.len() {
            let orig = probe.as_slice().unwrap()[i];
            probe.as_slice_mut().unwrap()[i] = orig + eps;
            let up = penalty_with(&probe, id);
            probe.as_slice_mut().unwrap()[i] = orig - eps;
            let down = penalty_with(&probe, id);
            probe.as_slice_mut().unwrap()[i] = orig;
            let fd = (up - down) / (2.0 * eps);
            let an = analytic.as_slice().unwrap()[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1.0);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-3, "max relative error {max_rel:.3e}");
    }

    #[test]
    fn critic_training_separates_real_from_fake() {
        // Frozen fresh generator provides fakes; 200 critic-only steps must
        // push real-negative scores above fake scores, with a decreasing loss
        // trend across 50-step windows.
        let mut rng = StdRng::seed_from_u64(10);
        let mut gen_store: ParamStore<f64> = ParamStore::new();
        let gen = Generator::new(&mut gen_store, 1, 2, 1, &mut rng);

        let (mut store, critic) = tiny_critic(11, 1);
        let mut adam = Adam::new(2e-3, 0.5, 0.999);

        // Real negatives: dark images. Positives (sources of fakes): bright blobs.
        let real: ArrayD<f64> = randn(&mut rng, &[4, 1, 8, 8], -0.9, -0.5);
        let pos: ArrayD<f64> = randn(&mut rng, &[4, 1, 8, 8], 0.4, 0.9);
        let maps = attribution_maps(&gen, &gen_store, &pos, &[0, 0, 0, 0]);
        let fake = counterfactual(&pos, &maps);

        let mut losses = Vec::new();
        let mut final_parts = None;
        for step in 0..200 {
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let mut draw = StdRng::seed_from_u64(1000 + step);
            let (loss, parts) = critic_loss(&b, &critic, &real, &fake, 0, 10.0, &mut draw);
            losses.push(tape.scalar_value(loss));
            let grads: Vec<_> = {
                let bound = b.bound();
                let ids: Vec<_> = bound.iter().map(|(id, _)| *id).collect();
                let vars: Vec<_> = bound.iter().map(|(_, v)| *v).collect();
                let gs = tape.backward(loss, &vars);
                ids.into_iter().zip(gs.into_iter().map(|g| tape.value(g))).collect()
            };
            adam.step(&mut store, &grads);
            final_parts = Some(parts);
        }

        let parts = final_parts.unwrap();
        assert!(
            parts.mean_real > parts.mean_fake,
            "real-negative scores should exceed fake scores: real {} vs fake {}",
            parts.mean_real,
            parts.mean_fake
        );
        let window = |range: std::ops::Range<usize>| -> f64 {
            losses[range.clone()].iter().sum::<f64>() / range.len() as f64
        };
        assert!(
            window(150..200) < window(0..50),
            "loss trend should decrease: first window {} vs last {}",
            window(0..50),
            window(150..200)
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn gradient_penalty_is_nonnegative(seed in 0u64..500) {
            let (store, critic) = tiny_critic(seed, 2);
            let mut rng = StdRng::seed_from_u64(seed.wrapping_add(1));
            let real = randn(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
            let fake = randn(&mut rng, &[2, 1, 8, 8], -1.0, 1.0);
            let tape = Tape::new();
            let b = Binder::new(&tape, &store);
            let pen = gradient_penalty(&b, &critic, &real, &fake, 1, &mut rng);
            prop_assert!(tape.scalar_value(pen) >= 0.0);
        }
    }
}
