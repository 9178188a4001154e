//! Verify every loss term's reverse-mode gradient against central finite
//! differences on small double-precision problems.
//!
//! Input-space losses go through the generic checking harness; the gradient
//! penalty — whose value already contains a derivative, so its parameter
//! gradient exercises second-order differentiation — is probed directly in
//! parameter space.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use attrinet::critic::{gradient_penalty, Critic};
use attrinet::grad::check::max_grad_error;
use attrinet::grad::Tape;
use attrinet::head::{center_loss, ClassCenters, Head};
use attrinet::nn::{Binder, ParamStore};
use attrinet::training::{adversarial_loss, classification_loss, regularization_loss};

const TOL: f64 = 1e-3;

fn random_array(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha12Rng) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    ArrayD::from_shape_vec(IxDyn(shape), vals).unwrap()
}

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let mut failures = 0usize;
    let mut report = |name: &str, err: f64| {
        let verdict = if err < TOL { "ok" } else { "FAIL" };
        println!("{name:<26} max rel err {err:.2e}  {verdict}");
        if err >= TOL {
            failures += 1;
        }
    };

    let maps = random_array(&[2, 1, 8, 8], -0.3, 0.3, &mut rng);

    // Regularization: weighted L1 over both label groups.
    let err = max_grad_error(&maps, 1e-5, |t, m| {
        regularization_loss(t, Some(m), Some(m), 2.0, 1.0)
    });
    report("regularization", err);

    // Binary cross-entropy over probabilities.
    let probs = random_array(&[3, 2], 0.15, 0.85, &mut rng);
    let targets =
        ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]).unwrap();
    let err = max_grad_error(&probs, 1e-6, |t, p| classification_loss(t, p, &targets));
    report("binary cross-entropy", err);

    // Pooled logistic head: downscale, weight, sigmoid.
    let mut head_store = ParamStore::<f64>::new();
    let head = Head::new(&mut head_store, 2, 8, 8, 4);
    let mut w = head_store.value(head.w).as_ref().clone();
    w.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    head_store.set_value(head.w, w);
    let err = max_grad_error(&maps, 1e-5, |t, m| {
        let b = Binder::new(t, &head_store);
        t.sum_all(head.class_probs(&b, m, &[0, 1]))
    });
    report("pooled logistic head", err);

    // Center loss towards per-class polarity targets.
    let mut centers = ClassCenters::<f64>::zeros(2, 8, 8);
    centers.pos[0] = random_array(&[8, 8], -0.2, 0.2, &mut rng);
    centers.neg[0] = random_array(&[8, 8], -0.2, 0.2, &mut rng);
    let err = max_grad_error(&maps, 1e-5, |t, m| {
        let _ = t;
        let b = Binder::new(t, &head_store);
        center_loss(&b, m, &[false, true], &centers, 0)
    });
    report("center loss", err);

    // Adversarial loss through the critic, with respect to the map.
    let mut critic_store = ParamStore::<f64>::new();
    let mut critic_rng = ChaCha12Rng::seed_from_u64(1);
    let critic = Critic::new(&mut critic_store, 2, 4, 2, &mut critic_rng);
    let x = random_array(&[2, 1, 8, 8], -0.8, 0.8, &mut rng);
    let codes = attrinet::taskgen::task_codes_batch(&[0, 0], 2);
    let err = max_grad_error(&maps, 1e-5, |t, m| {
        let b = Binder::new(t, &critic_store);
        let fake = t.add(t.leaf(x.clone()), m);
        adversarial_loss(t, critic.scores(&b, fake, t.leaf(codes.clone())))
    });
    report("adversarial", err);

    // Gradient penalty with respect to a critic weight (second-order).
    let real = random_array(&[2, 1, 8, 8], -0.8, 0.8, &mut rng);
    let fake = random_array(&[2, 1, 8, 8], -0.8, 0.8, &mut rng);
    let gp_value = |store: &ParamStore<f64>| -> f64 {
        let tape = Tape::new();
        let b = Binder::new(&tape, store);
        let mut gp_rng = ChaCha12Rng::seed_from_u64(7);
        tape.scalar_value(gradient_penalty(&b, &critic, &real, &fake, 0, &mut gp_rng))
    };
    let target = critic_store
        .ids()
        .find(|&id| critic_store.name(id).contains("conv"))
        .expect("critic has conv weights");

    let tape = Tape::new();
    let b = Binder::new(&tape, &critic_store);
    let mut gp_rng = ChaCha12Rng::seed_from_u64(7);
    let gp = gradient_penalty(&b, &critic, &real, &fake, 0, &mut gp_rng);
    let leaf = b.var(target);
    let analytic = tape.value(tape.backward(gp, &[leaf])[0]);

    let base = critic_store.value(target).as_ref().clone();
    let eps = 1e-5;
    let mut err = 0.0f64;
    for i in 0..base.len().min(32) {
        let mut up = base.clone();
        up.as_slice_mut().unwrap()[i] += eps;
        let mut probe = critic_store.clone();
        probe.set_value(target, up);
        let f_up = gp_value(&probe);

        let mut down = base.clone();
        down.as_slice_mut().unwrap()[i] -= eps;
        let mut probe = critic_store.clone();
        probe.set_value(target, down);
        let f_down = gp_value(&probe);

        let numeric = (f_up - f_down) / (2.0 * eps);
        let analytic_i = analytic.as_slice().unwrap()[i];
        let denom = analytic_i.abs().max(numeric.abs()).max(1.0);
        err = err.max((analytic_i - numeric).abs() / denom);
    }
    report("gradient penalty (2nd)", err);

    if failures == 0 {
        println!("\nall gradients agree with finite differences (tolerance {TOL:.0e})");
    } else {
        println!("\n{failures} checks FAILED");
        std::process::exit(1);
    }
}
