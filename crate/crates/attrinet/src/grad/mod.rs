//! Tape-based reverse-mode automatic differentiation.
//!
//! Every operation appends a node to a [`Tape`] and evaluates eagerly; a
//! [`Var`] is an index into that tape. [`Tape::backward`] walks the recorded
//! graph in reverse and — crucially — builds each vector-Jacobian product out
//! of ordinary tape operations. Gradients are therefore themselves
//! differentiable, which the Wasserstein critic's gradient penalty needs: it
//! takes the gradient of an input-gradient norm with respect to the critic
//! parameters.
//!
//! The op set is closed under differentiation. The convolution trio
//! (`conv`, `conv_input_grad`, `conv_weight_grad`) are the three partial
//! derivatives of the trilinear form `<conv(x, w), g>`, so each one's VJPs are
//! expressed by the other two; piecewise-linear ops (`relu`, `abs`, `clamp`)
//! back-propagate through a captured constant mask, so their second derivative
//! is zero almost everywhere, as it should be.
//!
//! Tapes are cheap, single-threaded, and meant to live for one training step:
//! build the graph, call `backward`, read the gradients, drop the tape.

pub mod check;
pub mod kernels;
pub mod scalar;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

pub use kernels::ConvGeom;
pub use scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    /// Tape index of this variable (diagnostics only).
    pub fn id(self) -> usize {
        self.0
    }
}

/// One recorded operation, holding the indices of its differentiable inputs
/// plus whatever constants the VJP needs.
#[derive(Clone)]
enum Op<F: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var),
    MulScalar(Var, F),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    Ln(Var),
    Relu(Var),
    Abs(Var),
    Clamp(Var, F, F),
    /// Elementwise product with a constant (non-differentiable) mask.
    MaskMul(Var, Rc<ArrayD<F>>),
    Matmul { a: Var, b: Var, ta: bool, tb: bool },
    SumAll(Var),
    SpreadAll(Var),
    SumHw(Var),
    SpreadHw(Var),
    SumRows(Var),
    SpreadRows(Var),
    Reshape(Var),
    Narrow { a: Var, axis: usize, start: usize, orig_len: usize },
    PadZero { a: Var, axis: usize, start: usize },
    Conv { x: Var, w: Var, geom: ConvGeom },
    ConvInputGrad { gy: Var, w: Var, geom: ConvGeom },
    ConvWeightGrad { x: Var, gy: Var, geom: ConvGeom },
    AvgPool { a: Var, k: usize },
    AvgPoolSpread { a: Var, k: usize },
}

impl<F: Scalar> Op<F> {
    /// Indices of the inputs gradient can flow through.
    fn inputs(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                out.extend([a.0, b.0])
            }
            Op::Neg(a)
            | Op::AddScalar(a)
            | Op::MulScalar(a, _)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Sqrt(a)
            | Op::Ln(a)
            | Op::Relu(a)
            | Op::Abs(a)
            | Op::Clamp(a, _, _)
            | Op::MaskMul(a, _)
            | Op::SumAll(a)
            | Op::SpreadAll(a)
            | Op::SumHw(a)
            | Op::SpreadHw(a)
            | Op::SumRows(a)
            | Op::SpreadRows(a)
            | Op::Reshape(a)
            | Op::Narrow { a, .. }
            | Op::PadZero { a, .. }
            | Op::AvgPool { a, .. }
            | Op::AvgPoolSpread { a, .. } => out.push(a.0),
            Op::Matmul { a, b, .. } => out.extend([a.0, b.0]),
            Op::Conv { x, w, .. } => out.extend([x.0, w.0]),
            Op::ConvInputGrad { gy, w, .. } => out.extend([gy.0, w.0]),
            Op::ConvWeightGrad { x, gy, .. } => out.extend([x.0, gy.0]),
        }
    }
}

struct Node<F: Scalar> {
    value: Rc<ArrayD<F>>,
    op: Op<F>,
}

/// Records a computation graph and evaluates it eagerly.
pub struct Tape<F: Scalar> {
    nodes: RefCell<Vec<Node<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()) }
    }

    /// Number of recorded nodes (diagnostics).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<F>, op: Op<F>) -> Var {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&self, value: Rc<ArrayD<F>>, op: Op<F>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var(nodes.len() - 1)
    }

    /// Current value of a variable (shared, not copied).
    pub fn value(&self, v: Var) -> Rc<ArrayD<F>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    /// Value of a single-element variable.
    pub fn scalar_value(&self, v: Var) -> F {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on tensor of shape {:?}", val.shape());
        val.sum()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    // ---- leaves ------------------------------------------------------------

    /// Record an owned tensor as a leaf.
    pub fn leaf(&self, value: ArrayD<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Record a shared tensor as a leaf without copying it. This is how model
    /// parameters enter the graph.
    pub fn leaf_rc(&self, value: Rc<ArrayD<F>>) -> Var {
        self.push_rc(value, Op::Leaf)
    }

    /// A zero-dimensional constant.
    pub fn scalar(&self, v: F) -> Var {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), v))
    }

    // ---- elementwise -------------------------------------------------------

    fn same_shape(&self, what: &str, a: Var, b: Var) -> (Rc<ArrayD<F>>, Rc<ArrayD<F>>) {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{what}: shape mismatch");
        (va, vb)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.same_shape("add", a, b);
        self.push(&*va + &*vb, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.same_shape("sub", a, b);
        self.push(&*va - &*vb, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.same_shape("mul", a, b);
        self.push(&*va * &*vb, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.same_shape("div", a, b);
        self.push(&*va / &*vb, Op::Div(a, b))
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| -v), Op::Neg(a))
    }

    pub fn add_scalar(&self, a: Var, s: F) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| v + s), Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, s: F) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| v * s), Op::MulScalar(a, s))
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| v.tanh()), Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(
            va.mapv(|v| {
                // Split per sign so the exponential never overflows.
                if v >= F::zero() {
                    F::one() / (F::one() + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (F::one() + e)
                }
            }),
            Op::Sigmoid(a),
        )
    }

    pub fn sqrt(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| v.sqrt()), Op::Sqrt(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| v.ln()), Op::Ln(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| if v > F::zero() { v } else { F::zero() }), Op::Relu(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(|v| v.abs()), Op::Abs(a))
    }

    pub fn clamp(&self, a: Var, lo: F, hi: F) -> Var {
        let va = self.value(a);
        self.push(
            va.mapv(|v| if v < lo { lo } else if v > hi { hi } else { v }),
            Op::Clamp(a, lo, hi),
        )
    }

    fn mask_mul(&self, a: Var, mask: Rc<ArrayD<F>>) -> Var {
        let va = self.value(a);
        assert_eq!(va.shape(), mask.shape(), "mask_mul: shape mismatch");
        self.push(&*va * &*mask, Op::MaskMul(a, mask))
    }

    // ---- linear algebra ----------------------------------------------------

    /// 2-d matrix product `op(a) . op(b)` where `op` transposes when the flag
    /// is set.
    pub fn matmul(&self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(matmul_kernel(&va, &vb, ta, tb), Op::Matmul { a, b, ta, tb })
    }

    // ---- reductions and broadcasts -----------------------------------------

    /// Sum every element down to a zero-dimensional scalar.
    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(ArrayD::from_elem(IxDyn(&[]), va.sum()), Op::SumAll(a))
    }

    /// Mean of every element, as a zero-dimensional scalar.
    pub fn mean_all(&self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum_all(a);
        self.mul_scalar(s, F::cast(1.0 / n as f64))
    }

    /// Broadcast a scalar to an arbitrary shape.
    pub fn spread_all(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(va.len(), 1, "spread_all input must be scalar");
        self.push(ArrayD::from_elem(IxDyn(shape), va.sum()), Op::SpreadAll(a))
    }

    /// Sum a `(N, C, H, W)` tensor over its spatial axes, keeping them as
    /// singleton dimensions: output `(N, C, 1, 1)`.
    pub fn sum_hw(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 4, "sum_hw expects a 4-d tensor");
        let summed = va
            .sum_axis(Axis(3))
            .sum_axis(Axis(2))
            .insert_axis(Axis(2))
            .insert_axis(Axis(3));
        self.push(summed, Op::SumHw(a))
    }

    /// Mean over the spatial axes of a `(N, C, H, W)` tensor; output `(N, C, 1, 1)`.
    pub fn mean_hw(&self, a: Var) -> Var {
        let sh = self.shape(a);
        let s = self.sum_hw(a);
        self.mul_scalar(s, F::cast(1.0 / (sh[2] * sh[3]) as f64))
    }

    /// Broadcast a `(N, C, 1, 1)` tensor over spatial axes to `(N, C, H, W)`.
    pub fn spread_hw(&self, a: Var, h: usize, w: usize) -> Var {
        let va = self.value(a);
        let s = va.shape();
        assert!(s.len() == 4 && s[2] == 1 && s[3] == 1, "spread_hw expects (N, C, 1, 1)");
        let out = va.broadcast(IxDyn(&[s[0], s[1], h, w])).unwrap().to_owned();
        self.push(out, Op::SpreadHw(a))
    }

    /// Sum a `(N, D)` matrix over its rows; output `(D,)`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 2, "sum_rows expects a 2-d tensor");
        self.push(va.sum_axis(Axis(0)), Op::SumRows(a))
    }

    /// Repeat a `(D,)` vector over `n` rows; output `(n, D)`.
    pub fn spread_rows(&self, a: Var, n: usize) -> Var {
        let va = self.value(a);
        assert_eq!(va.ndim(), 1, "spread_rows expects a 1-d tensor");
        let d = va.len();
        let out = va.broadcast(IxDyn(&[n, d])).unwrap().to_owned();
        self.push(out, Op::SpreadRows(a))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Var {
        let va = self.value(a);
        assert_eq!(
            va.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch"
        );
        let data: Vec<F> = va.iter().copied().collect();
        self.push(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(), Op::Reshape(a))
    }

    /// Slice `len` entries starting at `start` along one axis.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let va = self.value(a);
        let orig_len = va.shape()[axis];
        assert!(start + len <= orig_len, "narrow out of range");
        let out = va
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(out, Op::Narrow { a, axis, start, orig_len })
    }

    /// Embed a tensor into a larger zero tensor along one axis (adjoint of
    /// [`Tape::narrow`]).
    pub fn pad_zero(&self, a: Var, axis: usize, start: usize, padded_len: usize) -> Var {
        let va = self.value(a);
        let len = va.shape()[axis];
        assert!(start + len <= padded_len, "pad_zero out of range");
        let mut shape = va.shape().to_vec();
        shape[axis] = padded_len;
        let mut out = ArrayD::zeros(IxDyn(&shape));
        out.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(&va);
        self.push(out, Op::PadZero { a, axis, start })
    }

    // ---- convolution and pooling -------------------------------------------

    /// 2-d convolution of `x: (N, Ci, H, W)` with `w: (Co, Ci, KH, KW)`.
    pub fn conv(&self, x: Var, w: Var, geom: ConvGeom) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        self.push(kernels::conv_forward(&vx, &vw, geom), Op::Conv { x, w, geom })
    }

    /// Transposed convolution: routes `gy: (N, Co, OH, OW)` backwards through
    /// the geometry to a `(N, Ci, h, wd)` output. `w` is `(Co, Ci, KH, KW)`,
    /// i.e. the first weight axis matches the *input* side of this op.
    pub fn conv_input_grad(&self, gy: Var, w: Var, geom: ConvGeom, h: usize, wd: usize) -> Var {
        let (vg, vw) = (self.value(gy), self.value(w));
        self.push(
            kernels::conv_input_grad(&vg, &vw, geom, h, wd),
            Op::ConvInputGrad { gy, w, geom },
        )
    }

    /// Weight-shaped product of `x: (N, Ci, H, W)` and `gy: (N, Co, OH, OW)`.
    pub fn conv_weight_grad(&self, x: Var, gy: Var, geom: ConvGeom) -> Var {
        let (vx, vg) = (self.value(x), self.value(gy));
        self.push(
            kernels::conv_weight_grad(&vx, &vg, geom),
            Op::ConvWeightGrad { x, gy, geom },
        )
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        self.push(kernels::avg_pool(&va, k), Op::AvgPool { a, k })
    }

    /// Adjoint of [`Tape::avg_pool`]: spread each cell over its `k x k` block,
    /// divided by `k*k`.
    pub fn avg_pool_spread(&self, a: Var, k: usize) -> Var {
        let va = self.value(a);
        let s = va.shape();
        let out = kernels::avg_pool_spread(&va, k, s[2] * k, s[3] * k);
        self.push(out, Op::AvgPoolSpread { a, k })
    }

    // ---- differentiation ---------------------------------------------------

    /// Reverse-mode gradients of `root` with respect to each entry of `wrt`.
    ///
    /// Gradients are returned as new tape variables, so they can be used in
    /// further computation and differentiated again. Entries of `wrt` that do
    /// not influence `root` get zero gradients. When `root` is not scalar the
    /// seed cotangent is all ones (i.e. this differentiates `sum(root)`).
    pub fn backward(&self, root: Var, wrt: &[Var]) -> Vec<Var> {
        let n = root.0 + 1;

        // Forward scan: which nodes depend on some wrt entry?
        let mut influenced = vec![false; n];
        for v in wrt {
            if v.0 < n {
                influenced[v.0] = true;
            }
        }
        let mut inputs = Vec::with_capacity(4);
        for i in 0..n {
            if influenced[i] {
                continue;
            }
            self.nodes.borrow()[i].op.inputs(&mut inputs);
            influenced[i] = inputs.iter().any(|&j| influenced[j]);
        }

        // Reverse sweep, accumulating cotangents as tape variables.
        let mut cot: Vec<Option<Var>> = vec![None; n];
        cot[root.0] = Some(self.leaf(ArrayD::ones(IxDyn(&self.shape(root)))));
        for i in (0..n).rev() {
            if !influenced[i] {
                continue;
            }
            let g = match cot[i] {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes.borrow()[i].op.clone();
            let flow = |tape: &Self, dst: Var, contrib: Var, cot: &mut Vec<Option<Var>>| {
                if dst.0 < n && influenced[dst.0] {
                    cot[dst.0] = Some(match cot[dst.0] {
                        None => contrib,
                        Some(prev) => tape.add(prev, contrib),
                    });
                }
            };
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    flow(self, a, g, &mut cot);
                    flow(self, b, g, &mut cot);
                }
                Op::Sub(a, b) => {
                    flow(self, a, g, &mut cot);
                    let gb = self.neg(g);
                    flow(self, b, gb, &mut cot);
                }
                Op::Mul(a, b) => {
                    if influenced[a.0] {
                        let ga = self.mul(g, b);
                        flow(self, a, ga, &mut cot);
                    }
                    if influenced[b.0] {
                        let gb = self.mul(g, a);
                        flow(self, b, gb, &mut cot);
                    }
                }
                Op::Div(a, b) => {
                    if influenced[a.0] {
                        let ga = self.div(g, b);
                        flow(self, a, ga, &mut cot);
                    }
                    if influenced[b.0] {
                        // d(a/b)/db = -y/b with y the recorded quotient.
                        let gy = self.mul(g, Var(i));
                        let gb = self.neg(self.div(gy, b));
                        flow(self, b, gb, &mut cot);
                    }
                }
                Op::Neg(a) => {
                    let ga = self.neg(g);
                    flow(self, a, ga, &mut cot);
                }
                Op::AddScalar(a) => flow(self, a, g, &mut cot),
                Op::MulScalar(a, s) => {
                    let ga = self.mul_scalar(g, s);
                    flow(self, a, ga, &mut cot);
                }
                Op::Tanh(a) => {
                    // g * (1 - y^2)
                    let y = Var(i);
                    let gy = self.mul(g, y);
                    let ga = self.sub(g, self.mul(gy, y));
                    flow(self, a, ga, &mut cot);
                }
                Op::Sigmoid(a) => {
                    // g * y * (1 - y)
                    let y = Var(i);
                    let gy = self.mul(g, y);
                    let ga = self.sub(gy, self.mul(gy, y));
                    flow(self, a, ga, &mut cot);
                }
                Op::Sqrt(a) => {
                    // g / (2 sqrt(a))
                    let y = Var(i);
                    let ga = self.div(self.mul_scalar(g, F::cast(0.5)), y);
                    flow(self, a, ga, &mut cot);
                }
                Op::Ln(a) => {
                    let ga = self.div(g, a);
                    flow(self, a, ga, &mut cot);
                }
                Op::Relu(a) => {
                    let va = self.value(a);
                    let mask = va.mapv(|v| if v > F::zero() { F::one() } else { F::zero() });
                    let ga = self.mask_mul(g, Rc::new(mask));
                    flow(self, a, ga, &mut cot);
                }
                Op::Abs(a) => {
                    let va = self.value(a);
                    let mask = va.mapv(|v| {
                        if v > F::zero() {
                            F::one()
                        } else if v < F::zero() {
                            -F::one()
                        } else {
                            F::zero()
                        }
                    });
                    let ga = self.mask_mul(g, Rc::new(mask));
                    flow(self, a, ga, &mut cot);
                }
                Op::Clamp(a, lo, hi) => {
                    let va = self.value(a);
                    let mask =
                        va.mapv(|v| if v >= lo && v <= hi { F::one() } else { F::zero() });
                    let ga = self.mask_mul(g, Rc::new(mask));
                    flow(self, a, ga, &mut cot);
                }
                Op::MaskMul(a, mask) => {
                    let ga = self.mask_mul(g, mask);
                    flow(self, a, ga, &mut cot);
                }
                Op::Matmul { a, b, ta, tb } => {
                    if influenced[a.0] {
                        let ga = if ta {
                            self.matmul(b, g, tb, true)
                        } else {
                            self.matmul(g, b, false, !tb)
                        };
                        flow(self, a, ga, &mut cot);
                    }
                    if influenced[b.0] {
                        let gb = if tb {
                            self.matmul(g, a, true, ta)
                        } else {
                            self.matmul(a, g, !ta, false)
                        };
                        flow(self, b, gb, &mut cot);
                    }
                }
                Op::SumAll(a) => {
                    let ga = self.spread_all(g, &self.shape(a));
                    flow(self, a, ga, &mut cot);
                }
                Op::SpreadAll(a) => {
                    let ga = self.sum_all(g);
                    flow(self, a, ga, &mut cot);
                }
                Op::SumHw(a) => {
                    let sh = self.shape(a);
                    let ga = self.spread_hw(g, sh[2], sh[3]);
                    flow(self, a, ga, &mut cot);
                }
                Op::SpreadHw(a) => {
                    let ga = self.sum_hw(g);
                    flow(self, a, ga, &mut cot);
                }
                Op::SumRows(a) => {
                    let n_rows = self.shape(a)[0];
                    let ga = self.spread_rows(g, n_rows);
                    flow(self, a, ga, &mut cot);
                }
                Op::SpreadRows(a) => {
                    let ga = self.sum_rows(g);
                    flow(self, a, ga, &mut cot);
                }
                Op::Reshape(a) => {
                    let ga = self.reshape(g, &self.shape(a));
                    flow(self, a, ga, &mut cot);
                }
                Op::Narrow { a, axis, start, orig_len } => {
                    let ga = self.pad_zero(g, axis, start, orig_len);
                    flow(self, a, ga, &mut cot);
                }
                Op::PadZero { a, axis, start } => {
                    let len = self.shape(a)[axis];
                    let ga = self.narrow(g, axis, start, len);
                    flow(self, a, ga, &mut cot);
                }
                Op::Conv { x, w, geom } => {
                    if influenced[x.0] {
                        let sh = self.shape(x);
                        let gx = self.conv_input_grad(g, w, geom, sh[2], sh[3]);
                        flow(self, x, gx, &mut cot);
                    }
                    if influenced[w.0] {
                        let gw = self.conv_weight_grad(x, g, geom);
                        flow(self, w, gw, &mut cot);
                    }
                }
                Op::ConvInputGrad { gy, w, geom } => {
                    // <cig(gy, w), c> = <conv(c, w), gy> = <cwg(c, gy), w>
                    if influenced[gy.0] {
                        let gg = self.conv(g, w, geom);
                        flow(self, gy, gg, &mut cot);
                    }
                    if influenced[w.0] {
                        let gw = self.conv_weight_grad(g, gy, geom);
                        flow(self, w, gw, &mut cot);
                    }
                }
                Op::ConvWeightGrad { x, gy, geom } => {
                    // <cwg(x, gy), c> = <conv(x, c), gy>
                    if influenced[x.0] {
                        let sh = self.shape(x);
                        let gx = self.conv_input_grad(gy, g, geom, sh[2], sh[3]);
                        flow(self, x, gx, &mut cot);
                    }
                    if influenced[gy.0] {
                        let gg = self.conv(x, g, geom);
                        flow(self, gy, gg, &mut cot);
                    }
                }
                Op::AvgPool { a, k } => {
                    let ga = self.avg_pool_spread(g, k);
                    flow(self, a, ga, &mut cot);
                }
                Op::AvgPoolSpread { a, k } => {
                    let ga = self.avg_pool(g, k);
                    flow(self, a, ga, &mut cot);
                }
            }
        }

        wrt.iter()
            .map(|v| match cot.get(v.0).copied().flatten() {
                Some(g) => g,
                None => self.leaf(ArrayD::zeros(IxDyn(&self.shape(*v)))),
            })
            .collect()
    }
}

/// Row-major 2-d GEMM with transpose flags, via the BLAS bindings.
fn matmul_kernel<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, ta: bool, tb: bool) -> ArrayD<F> {
    assert_eq!(a.ndim(), 2, "matmul lhs must be 2-d");
    assert_eq!(b.ndim(), 2, "matmul rhs must be 2-d");
    let (ra, ca) = (a.shape()[0], a.shape()[1]);
    let (rb, cb) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
    let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
    assert_eq!(k, kb, "matmul: inner dimensions {k} and {kb} do not match");
    let mut out = vec![F::zero(); m * n];
    F::gemm(
        ta,
        tb,
        m,
        n,
        k,
        F::one(),
        a.as_slice().expect("matmul lhs must be contiguous"),
        ca,
        b.as_slice().expect("matmul rhs must be contiguous"),
        cb,
        F::zero(),
        &mut out,
        n,
    );
    ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap()
}
