//! Classification directly from attribution maps.
//!
//! The head is deliberately minimal: average-pool the class-`c` attribution
//! map by a factor `gamma`, take a weighted sum of the pooled pixels with the
//! class's weight grid, and squash with a sigmoid — logistic regression on
//! pooled map pixels, no bias, nothing else. Since the logit is linear in the
//! map, the map itself is a faithful account of the prediction, and the weight
//! grids double as a global explanation of what each class looks for.
//!
//! Training additionally shapes the map distribution with a center loss: per
//! class, one target map for the negative polarity and one for the positive,
//! pulled towards the batch means by a damped update after every step.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::grad::{Scalar, Tape, Var};
use crate::nn::{Binder, ParamId, ParamStore};
use crate::taskgen::{maps_for_all_classes, Generator};

/// Pooling factor from the reference configuration.
pub const DEFAULT_GAMMA: usize = 32;

/// Per-class logistic regression over pooled attribution maps.
pub struct Head {
    /// One weight grid per class, stored flat as `(C, pooled_h * pooled_w)`.
    pub w: ParamId,
    pub gamma: usize,
    pub pooled_h: usize,
    pub pooled_w: usize,
    pub num_classes: usize,
}

impl Head {
    /// Zero-initialised head for `h x w` maps: predictions start at 0.5 and
    /// the training signal arrives through the classification loss.
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        num_classes: usize,
        h: usize,
        w: usize,
        gamma: usize,
    ) -> Self {
        assert!(gamma >= 1, "pooling factor must be at least 1");
        assert!(
            h % gamma == 0 && w % gamma == 0,
            "map size {h}x{w} not divisible by pooling factor {gamma}"
        );
        let (ph, pw) = (h / gamma, w / gamma);
        let w_id = store.add("head.w", ArrayD::zeros(IxDyn(&[num_classes, ph * pw])));
        Head { w: w_id, gamma, pooled_h: ph, pooled_w: pw, num_classes }
    }

    /// Logits for a batch of `(map, class)` rows: `maps (R, 1, H, W)`, one
    /// class index per row; returns `(R, 1)`.
    pub fn class_logits<F: Scalar>(&self, b: &Binder<F>, maps: Var, classes: &[usize]) -> Var {
        let t = b.tape;
        let shape = t.shape(maps);
        assert_eq!(shape.len(), 4, "maps must be (R, 1, H, W)");
        assert_eq!(shape[0], classes.len(), "one class per map row");
        assert_eq!(shape[2] / self.gamma, self.pooled_h, "map height mismatch");
        assert_eq!(shape[3] / self.gamma, self.pooled_w, "map width mismatch");

        let r = classes.len();
        let d = self.pooled_h * self.pooled_w;
        let pooled = t.avg_pool(maps, self.gamma);
        let flat = t.reshape(pooled, &[r, d]);
        let full = t.matmul(flat, b.var(self.w), false, true); // (R, C)

        // Keep each row's own class column, discard the rest.
        let mut mask = ArrayD::zeros(IxDyn(&[r, self.num_classes]));
        for (i, &c) in classes.iter().enumerate() {
            assert!(c < self.num_classes, "class {c} out of range");
            mask[[i, c]] = F::one();
        }
        let picked = t.mul(full, t.leaf(mask));
        let ones = t.leaf(ArrayD::ones(IxDyn(&[self.num_classes, 1])));
        t.matmul(picked, ones, false, false) // (R, 1)
    }

    /// Probabilities for `(map, class)` rows, same layout as
    /// [`Head::class_logits`].
    pub fn class_probs<F: Scalar>(&self, b: &Binder<F>, maps: Var, classes: &[usize]) -> Var {
        let logits = self.class_logits(b, maps, classes);
        b.tape.sigmoid(logits)
    }
}

/// Probability that a single `(H, W)` attribution map belongs to a positive of
/// `class`.
pub fn predict_class<F: Scalar>(
    head: &Head,
    store: &ParamStore<F>,
    map: &ArrayD<F>,
    class: usize,
) -> F {
    assert_eq!(map.ndim(), 2, "predict_class takes one (H, W) map");
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let tape = Tape::new();
    let b = Binder::new(&tape, store);
    let data: Vec<F> = map.iter().copied().collect();
    let rows = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, 1, h, w]), data).unwrap());
    let p = head.class_probs(&b, rows, &[class]);
    tape.scalar_value(p)
}

/// All class probabilities for one image: generate every class's attribution
/// map, classify each with its own weight grid.
pub fn predict_all<F: Scalar>(
    gen: &Generator,
    head: &Head,
    store: &ParamStore<F>,
    image: &ArrayD<F>,
) -> Vec<F> {
    let maps = maps_for_all_classes(gen, store, image);
    let classes: Vec<usize> = (0..gen.num_classes).collect();
    let tape = Tape::new();
    let b = Binder::new(&tape, store);
    let rows = tape.leaf(maps);
    let p = tape.value(head.class_probs(&b, rows, &classes));
    p.iter().copied().collect()
}

/// Per-class target maps for both label polarities.
#[derive(Clone, Serialize, Deserialize)]
#[serde(bound = "F: Scalar")]
pub struct ClassCenters<F: Scalar> {
    /// `neg[c]`, `pos[c]`: `(H, W)` centers for label 0 / label 1 of class c.
    pub neg: Vec<ArrayD<F>>,
    pub pos: Vec<ArrayD<F>>,
}

impl<F: Scalar> ClassCenters<F> {
    /// Zero centers — attribution maps start near zero under the tanh
    /// residual construction, so zero is the natural initial target.
    pub fn zeros(num_classes: usize, h: usize, w: usize) -> Self {
        let make = || (0..num_classes).map(|_| ArrayD::zeros(IxDyn(&[h, w]))).collect();
        ClassCenters { neg: make(), pos: make() }
    }

    pub fn num_classes(&self) -> usize {
        self.neg.len()
    }

    /// Move each polarity center towards its batch mean with the damped rule
    /// `v <- v + alpha * sum_i (m_i - v) / (1 + n)`, using only maps of that
    /// polarity. An empty polarity group leaves its center untouched.
    pub fn update(&mut self, maps: &ArrayD<F>, labels: &[bool], class: usize, alpha: f64) {
        assert_eq!(maps.shape()[0], labels.len(), "one label per map row");
        assert_eq!(maps.shape()[1], 1, "maps must be (R, 1, H, W)");
        let a = F::cast(alpha);
        for polarity in [false, true] {
            let rows: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == polarity).collect();
            if rows.is_empty() {
                continue;
            }
            let center = if polarity { &mut self.pos[class] } else { &mut self.neg[class] };
            let damp = F::cast(1.0 / (1.0 + rows.len() as f64));
            let mut delta = ArrayD::<F>::zeros(center.raw_dim());
            for &i in &rows {
                let m = maps.index_axis(ndarray::Axis(0), i);
                let m = m.index_axis(ndarray::Axis(0), 0);
                delta = delta + &m.to_owned() - &*center;
            }
            center.zip_mut_with(&delta, |c, &d| *c = *c + a * damp * d);
        }
    }
}

/// Center loss for one class:
/// `1/2 * (mean_neg ||M - v_neg||^2 + mean_pos ||M - v_pos||^2)`.
///
/// `maps` is an in-graph `(R, 1, H, W)` row batch with one polarity label per
/// row; the centers enter as constants, so only the generator feels this loss.
/// An empty polarity group contributes zero (with a warning).
pub fn center_loss<F: Scalar>(
    b: &Binder<F>,
    maps: Var,
    labels: &[bool],
    centers: &ClassCenters<F>,
    class: usize,
) -> Var {
    let t = b.tape;
    let shape = t.shape(maps);
    assert_eq!(shape[0], labels.len(), "one label per map row");
    assert_eq!(shape[1], 1, "maps must be (R, 1, H, W)");
    let (r, h, w) = (labels.len(), shape[2], shape[3]);

    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = r - n_pos;
    for (polarity, n) in [("positive", n_pos), ("negative", n_neg)] {
        if n == 0 {
            log::warn!("center loss: no {polarity} maps for class {class} in this batch");
        }
    }

    // Row-matched center tensor and per-row weights 1 / (2 * group size).
    let mut center_rows = ArrayD::zeros(IxDyn(&[r, 1, h, w]));
    let mut weights = ArrayD::zeros(IxDyn(&[r, 1, 1, 1]));
    for (i, &lab) in labels.iter().enumerate() {
        let c = if lab { &centers.pos[class] } else { &centers.neg[class] };
        assert_eq!(c.shape(), &[h, w], "center shape mismatch");
        center_rows
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(c);
        let n = if lab { n_pos } else { n_neg };
        weights[[i, 0, 0, 0]] = F::cast(1.0 / (2.0 * n as f64));
    }

    let diff = t.sub(maps, t.leaf(center_rows));
    let row_sq = t.sum_hw(t.square(diff)); // (R, 1, 1, 1)
    t.sum_all(t.mul(row_sq, t.leaf(weights)))
}
