//! Model building blocks: a named parameter store, the layers the generator
//! and critic are assembled from, and the Adam optimiser.
//!
//! Parameters live in a [`ParamStore`] as shared tensors. Each training step
//! opens a fresh tape and binds the parameters it touches through a
//! [`Binder`], which guarantees every parameter becomes exactly one leaf per
//! tape — the invariant that makes gradient accumulation across repeated uses
//! (the task embedding feeds every AdaIN layer) come out right.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::grad::{ConvGeom, Scalar, Tape, Var};

/// Epsilon added to the per-instance variance before the square root.
pub const ADAIN_EPS: f64 = 1e-5;

/// Handle to one tensor in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
struct Param<F: Scalar> {
    name: String,
    value: Rc<ArrayD<F>>,
    /// Adam first and second moments, zero until the first optimiser step.
    m: ArrayD<F>,
    v: ArrayD<F>,
}

/// All learnable tensors of a model, with their optimiser state.
#[derive(Clone, Serialize, Deserialize, Default)]
#[serde(bound = "F: Scalar")]
pub struct ParamStore<F: Scalar> {
    params: Vec<Param<F>>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    /// Register a tensor under a unique name.
    pub fn add(&mut self, name: &str, value: ArrayD<F>) -> ParamId {
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter name {name:?}"
        );
        let (m, v) = (ArrayD::zeros(value.raw_dim()), ArrayD::zeros(value.raw_dim()));
        self.params.push(Param { name: name.to_string(), value: Rc::new(value), m, v });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn num_weights(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> Rc<ArrayD<F>> {
        self.params[id.0].value.clone()
    }

    /// Overwrite a parameter tensor (shape-checked).
    pub fn set_value(&mut self, id: ParamId, value: ArrayD<F>) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), value.shape(), "set_value: shape mismatch for {}", p.name);
        p.value = Rc::new(value);
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }
}

/// Per-tape memo binding parameters to leaves.
pub struct Binder<'a, F: Scalar> {
    pub tape: &'a Tape<F>,
    store: &'a ParamStore<F>,
    bound: RefCell<(HashMap<usize, Var>, Vec<(ParamId, Var)>)>,
}

impl<'a, F: Scalar> Binder<'a, F> {
    pub fn new(tape: &'a Tape<F>, store: &'a ParamStore<F>) -> Self {
        Binder { tape, store, bound: RefCell::new((HashMap::new(), Vec::new())) }
    }

    /// The tape leaf for a parameter, created on first use and shared after.
    pub fn var(&self, id: ParamId) -> Var {
        let mut bound = self.bound.borrow_mut();
        if let Some(&v) = bound.0.get(&id.0) {
            return v;
        }
        let v = self.tape.leaf_rc(self.store.value(id));
        bound.0.insert(id.0, v);
        bound.1.push((id, v));
        v
    }

    /// Every parameter bound so far, in first-use order.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.bound.borrow().1.clone()
    }
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean Gaussian with He/Kaiming fan-in scaling, `std = sqrt(2 / fan_in)`.
    HeNormal,
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    Zeros,
}

impl Init {
    fn draw<F: Scalar>(self, shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> ArrayD<F> {
        match self {
            Init::Zeros => ArrayD::zeros(IxDyn(shape)),
            Init::HeNormal => {
                let std = (2.0 / fan_in as f64).sqrt();
                Self::gaussian(shape, std, rng)
            }
            Init::Normal(std) => Self::gaussian(shape, std, rng),
        }
    }

    fn gaussian<F: Scalar>(shape: &[usize], std: f64, rng: &mut impl Rng) -> ArrayD<F> {
        let dist = Normal::new(0.0, std).expect("std must be finite");
        ArrayD::from_shape_simple_fn(IxDyn(shape), || F::cast(dist.sample(rng)))
    }
}

/// Fully connected layer, `y = x W^T + b`, weight stored as `(out, in)`.
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add(&format!("{name}.w"), init.draw(&[out_dim, in_dim], in_dim, rng));
        let b = store.add(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[out_dim])));
        Linear { w, b: Some(b), in_dim, out_dim }
    }

    /// A layer with explicitly given weight and bias tensors.
    pub fn from_values<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        w: ArrayD<F>,
        b: ArrayD<F>,
    ) -> Self {
        let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
        assert_eq!(b.len(), out_dim);
        let w = store.add(&format!("{name}.w"), w);
        let b = store.add(&format!("{name}.b"), b);
        Linear { w, b: Some(b), in_dim, out_dim }
    }

    pub fn forward<F: Scalar>(&self, b: &Binder<F>, x: Var) -> Var {
        let shape = b.tape.shape(x);
        assert_eq!(shape.len(), 2, "linear input must be (N, D)");
        assert_eq!(shape[1], self.in_dim, "linear input dim mismatch");
        let y = b.tape.matmul(x, b.var(self.w), false, true);
        match self.b {
            Some(bias) => {
                let rows = b.tape.spread_rows(b.var(bias), shape[0]);
                b.tape.add(y, rows)
            }
            None => y,
        }
    }
}

/// Bias-free 2-d convolution; normalisation layers directly after each
/// convolution make a bias redundant.
pub struct Conv2d {
    pub w: ParamId,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(&format!("{name}.w"), Init::HeNormal.draw(&[out_ch, in_ch, k, k], fan_in, rng));
        Conv2d { w, geom: ConvGeom { stride, pad, kh: k, kw: k }, in_ch, out_ch }
    }

    pub fn forward<F: Scalar>(&self, b: &Binder<F>, x: Var) -> Var {
        b.tape.conv(x, b.var(self.w), self.geom)
    }
}

/// Bias-free transposed convolution (fractional stride upsampling), weight
/// stored as `(in, out, k, k)`.
pub struct Deconv2d {
    pub w: ParamId,
    pub geom: ConvGeom,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Deconv2d {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * k * k;
        let w = store.add(&format!("{name}.w"), Init::HeNormal.draw(&[in_ch, out_ch, k, k], fan_in, rng));
        Deconv2d { w, geom: ConvGeom { stride, pad, kh: k, kw: k }, in_ch, out_ch }
    }

    /// Output spatial size for an input of `h x w`.
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let g = self.geom;
        ((h - 1) * g.stride + g.kh - 2 * g.pad, (w - 1) * g.stride + g.kw - 2 * g.pad)
    }

    pub fn forward<F: Scalar>(&self, b: &Binder<F>, x: Var) -> Var {
        let s = b.tape.shape(x);
        let (oh, ow) = self.out_size(s[2], s[3]);
        b.tape.conv_input_grad(x, b.var(self.w), self.geom, oh, ow)
    }
}

/// Adaptive instance normalisation: normalise each `(sample, channel)` plane
/// to zero mean and unit variance, then scale and shift it with values
/// projected from a per-sample conditioning embedding.
///
/// The projection starts at identity — zero weight, bias `[1, .., 1, 0, .., 0]`
/// — so an untrained network behaves like plain instance normalisation.
pub struct AdaIn {
    pub proj: Linear,
    pub channels: usize,
}

impl AdaIn {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        emb_dim: usize,
        channels: usize,
    ) -> Self {
        let w = ArrayD::zeros(IxDyn(&[2 * channels, emb_dim]));
        let mut bias = vec![F::one(); channels];
        bias.extend(std::iter::repeat(F::zero()).take(channels));
        let b = ArrayD::from_shape_vec(IxDyn(&[2 * channels]), bias).unwrap();
        AdaIn { proj: Linear::from_values(store, name, w, b), channels }
    }

    /// `x: (N, C, H, W)`, `emb: (N, E)`.
    pub fn forward<F: Scalar>(&self, b: &Binder<F>, x: Var, emb: Var) -> Var {
        let t = b.tape;
        let shape = t.shape(x);
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.channels, "adain channel mismatch");
        assert_eq!(t.shape(emb)[0], n, "adain batch mismatch");

        let params = self.proj.forward(b, emb); // (N, 2C)
        let scale = t.reshape(t.narrow(params, 1, 0, c), &[n, c, 1, 1]);
        let shift = t.reshape(t.narrow(params, 1, c, c), &[n, c, 1, 1]);

        let mean = t.mean_hw(x);
        let centered = t.sub(x, t.spread_hw(mean, h, w));
        let var = t.mean_hw(t.square(centered));
        let std = t.sqrt(t.add_scalar(var, F::cast(ADAIN_EPS)));
        let normed = t.div(centered, t.spread_hw(std, h, w));

        let scaled = t.mul(normed, t.spread_hw(scale, h, w));
        t.add(scaled, t.spread_hw(shift, h, w))
    }
}

/// Adam with the usual bias correction. One instance per optimised network,
/// sharing its step count across all parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam { lr, beta1, beta2, eps: 1e-8, t: 0 }
    }

    /// Apply one update from `(parameter, gradient)` pairs.
    pub fn step<F: Scalar>(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &[(ParamId, Rc<ArrayD<F>>)],
    ) {
        self.t += 1;
        let b1 = F::cast(self.beta1);
        let b2 = F::cast(self.beta2);
        let one = F::one();
        let corr1 = F::cast(1.0 / (1.0 - self.beta1.powi(self.t as i32)));
        let corr2 = F::cast(1.0 / (1.0 - self.beta2.powi(self.t as i32)));
        let lr = F::cast(self.lr);
        let eps = F::cast(self.eps);
        for (id, g) in grads {
            let p = &mut store.params[id.0];
            assert_eq!(p.value.shape(), g.shape(), "gradient shape mismatch for {}", p.name);
            let value = Rc::make_mut(&mut p.value);
            for (((w, m), v), &gi) in value
                .iter_mut()
                .zip(p.m.iter_mut())
                .zip(p.v.iter_mut())
                .zip(g.iter())
            {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let m_hat = *m * corr1;
                let v_hat = *v * corr2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
