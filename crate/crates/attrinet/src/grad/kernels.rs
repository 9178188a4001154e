//! Raw array kernels behind the tape ops: im2col convolution (forward,
//! input-gradient, weight-gradient) and non-overlapping average pooling.
//!
//! Layouts: activations `(N, C, H, W)`, convolution weights `(C_out, C_in, KH, KW)`,
//! all row-major contiguous. The three convolution kernels realise the partial
//! derivatives of the trilinear form `<conv(x, w), g>`, which is what lets the
//! tape express each one's gradients in terms of the other two.

use ndarray::{ArrayD, IxDyn};

use super::scalar::Scalar;

/// Spatial geometry of one convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kh) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kw) / self.stride + 1;
        (oh, ow)
    }
}

/// Scatter one image `(C, H, W)` into a column matrix `(C*KH*KW, OH*OW)`.
fn im2col<F: Scalar>(
    x: &[F],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    col: &mut [F],
) {
    debug_assert_eq!(col.len(), c * g.kh * g.kw * oh * ow);
    for ch in 0..c {
        let x_ch = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ch * g.kh + ky) * g.kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src_row = &x_ch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[ox] = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate a column matrix back into image positions.
fn col2im_acc<F: Scalar>(
    col: &[F],
    c: usize,
    h: usize,
    w: usize,
    g: ConvGeom,
    oh: usize,
    ow: usize,
    x: &mut [F],
) {
    for ch in 0..c {
        let x_ch = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ch * g.kh + ky) * g.kw + kx) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut x_ch[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

fn dims4(a: &ArrayD<impl Scalar>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected a 4-d tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn as_slice<F: Scalar>(a: &ArrayD<F>) -> &[F] {
    a.as_slice().expect("tensor must be contiguous")
}

/// `y[n] = w . im2col(x[n])` for every batch element.
pub fn conv_forward<F: Scalar>(x: &ArrayD<F>, w: &ArrayD<F>, g: ConvGeom) -> ArrayD<F> {
    let (n, ci, h, wd) = dims4(x);
    let (co, wci, kh, kw) = dims4(w);
    assert_eq!(ci, wci, "input channels do not match weight");
    assert_eq!((kh, kw), (g.kh, g.kw));
    let (oh, ow) = g.out_size(h, wd);
    let ckk = ci * kh * kw;
    let xs = as_slice(x);
    let ws = as_slice(w);
    let mut out = vec![F::zero(); n * co * oh * ow];
    let mut col = vec![F::zero(); ckk * oh * ow];
    for i in 0..n {
        im2col(&xs[i * ci * h * wd..], ci, h, wd, g, oh, ow, &mut col);
        F::gemm(
            false,
            false,
            co,
            oh * ow,
            ckk,
            F::one(),
            ws,
            ckk,
            &col,
            oh * ow,
            F::zero(),
            &mut out[i * co * oh * ow..(i + 1) * co * oh * ow],
            oh * ow,
        );
    }
    ArrayD::from_shape_vec(IxDyn(&[n, co, oh, ow]), out).unwrap()
}

/// Gradient of a convolution w.r.t. its input: `dx[n] = col2im(w^T . gy[n])`.
///
/// Also serves as the forward pass of a stride-`s` transposed convolution when
/// `gy` is the layer input; `(h, wd)` is then the output size.
pub fn conv_input_grad<F: Scalar>(
    gy: &ArrayD<F>,
    w: &ArrayD<F>,
    g: ConvGeom,
    h: usize,
    wd: usize,
) -> ArrayD<F> {
    let (n, co, oh, ow) = dims4(gy);
    let (wco, ci, kh, kw) = dims4(w);
    assert_eq!(co, wco, "gradient channels do not match weight");
    assert_eq!((kh, kw), (g.kh, g.kw));
    assert_eq!(g.out_size(h, wd), (oh, ow), "inconsistent conv geometry");
    let ckk = ci * kh * kw;
    let gs = as_slice(gy);
    let ws = as_slice(w);
    let mut dx = vec![F::zero(); n * ci * h * wd];
    let mut col = vec![F::zero(); ckk * oh * ow];
    for i in 0..n {
        F::gemm(
            true,
            false,
            ckk,
            oh * ow,
            co,
            F::one(),
            ws,
            ckk,
            &gs[i * co * oh * ow..(i + 1) * co * oh * ow],
            oh * ow,
            F::zero(),
            &mut col,
            oh * ow,
        );
        col2im_acc(&col, ci, h, wd, g, oh, ow, &mut dx[i * ci * h * wd..(i + 1) * ci * h * wd]);
    }
    ArrayD::from_shape_vec(IxDyn(&[n, ci, h, wd]), dx).unwrap()
}

/// Gradient of a convolution w.r.t. its weight: `dw = sum_n gy[n] . im2col(x[n])^T`.
pub fn conv_weight_grad<F: Scalar>(
    x: &ArrayD<F>,
    gy: &ArrayD<F>,
    g: ConvGeom,
) -> ArrayD<F> {
    let (n, ci, h, wd) = dims4(x);
    let (gn, co, oh, ow) = dims4(gy);
    assert_eq!(n, gn, "batch sizes do not match");
    assert_eq!(g.out_size(h, wd), (oh, ow), "inconsistent conv geometry");
    let ckk = ci * g.kh * g.kw;
    let xs = as_slice(x);
    let gs = as_slice(gy);
    let mut dw = vec![F::zero(); co * ckk];
    let mut col = vec![F::zero(); ckk * oh * ow];
    for i in 0..n {
        im2col(&xs[i * ci * h * wd..], ci, h, wd, g, oh, ow, &mut col);
        F::gemm(
            false,
            true,
            co,
            ckk,
            oh * ow,
            F::one(),
            &gs[i * co * oh * ow..(i + 1) * co * oh * ow],
            oh * ow,
            &col,
            oh * ow,
            F::one(),
            &mut dw,
            ckk,
        );
    }
    ArrayD::from_shape_vec(IxDyn(&[co, ci, g.kh, g.kw]), dw).unwrap()
}

/// Non-overlapping `k x k` average pooling.
pub fn avg_pool<F: Scalar>(x: &ArrayD<F>, k: usize) -> ArrayD<F> {
    let (n, c, h, w) = dims4(x);
    assert!(h % k == 0 && w % k == 0, "spatial dims {h}x{w} not divisible by pool factor {k}");
    let (oh, ow) = (h / k, w / k);
    let xs = as_slice(x);
    let inv = F::cast(1.0 / (k * k) as f64);
    let mut out = vec![F::zero(); n * c * oh * ow];
    for img in 0..n * c {
        let src = &xs[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * oh * ow..(img + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::zero();
                for dy in 0..k {
                    let row = (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        acc = acc + src[row + dx];
                    }
                }
                dst[oy * ow + ox] = acc * inv;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap()
}

/// Adjoint of [`avg_pool`]: spread each pooled gradient uniformly over its block.
pub fn avg_pool_spread<F: Scalar>(gy: &ArrayD<F>, k: usize, h: usize, w: usize) -> ArrayD<F> {
    let (n, c, oh, ow) = dims4(gy);
    assert_eq!((oh * k, ow * k), (h, w), "inconsistent pool geometry");
    let gs = as_slice(gy);
    let inv = F::cast(1.0 / (k * k) as f64);
    let mut out = vec![F::zero(); n * c * h * w];
    for img in 0..n * c {
        let src = &gs[img * oh * ow..(img + 1) * oh * ow];
        let dst = &mut out[img * h * w..(img + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let v = src[oy * ow + ox] * inv;
                for dy in 0..k {
                    let row = (oy * k + dy) * w + ox * k;
                    for dx in 0..k {
                        dst[row + dx] = v;
                    }
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(-1.0..1.0))
    }

    /// Reference convolution: direct nested loops.
    fn conv_naive(x: &ArrayD<f64>, w: &ArrayD<f64>, g: ConvGeom) -> ArrayD<f64> {
        let (n, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let co = w.shape()[0];
        let (oh, ow) = g.out_size(h, wd);
        let mut out = ArrayD::zeros(IxDyn(&[n, co, oh, ow]));
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for i in 0..ci {
                            for ky in 0..g.kh {
                                for kx in 0..g.kw {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[b, i, iy as usize, ix as usize]]
                                            * w[[o, i, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[b, o, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn dot(a: &ArrayD<f64>, b: &ArrayD<f64>) -> f64 {
        a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_forward_matches_naive() {
        let mut rng = StdRng::seed_from_u64(1);
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 4), (1, 3, 7)] {
            let g = ConvGeom { stride, pad, kh, kw: kh };
            let x = randn(&mut rng, &[2, 3, 8, 8]);
            let w = randn(&mut rng, &[4, 3, kh, kh]);
            let got = conv_forward(&x, &w, g);
            let want = conv_naive(&x, &w, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    /// The three kernels must agree as partial derivatives of <conv(x,w), g>.
    #[test]
    fn conv_gradients_satisfy_adjoint_identities() {
        let mut rng = StdRng::seed_from_u64(2);
        for &(stride, pad, kh) in &[(1usize, 1usize, 3usize), (2, 1, 4)] {
            let g = ConvGeom { stride, pad, kh, kw: kh };
            let x = randn(&mut rng, &[2, 3, 8, 8]);
            let w = randn(&mut rng, &[4, 3, kh, kh]);
            let y = conv_forward(&x, &w, g);
            let gy = randn(&mut rng, y.shape());
            let dx = conv_input_grad(&gy, &w, g, 8, 8);
            let dw = conv_weight_grad(&x, &gy, g);
            let t = dot(&y, &gy);
            assert!((dot(&x, &dx) - t).abs() < 1e-9, "input-grad adjoint");
            assert!((dot(&w, &dw) - t).abs() < 1e-9, "weight-grad adjoint");
        }
    }

    #[test]
    fn transposed_conv_doubles_spatial_size() {
        let mut rng = StdRng::seed_from_u64(3);
        let g = ConvGeom { stride: 2, pad: 1, kh: 4, kw: 4 };
        let x = randn(&mut rng, &[1, 5, 6, 6]);
        let w = randn(&mut rng, &[5, 2, 4, 4]);
        let y = conv_input_grad(&x, &w, g, 12, 12);
        assert_eq!(y.shape(), &[1, 2, 12, 12]);
    }

    #[test]
    fn avg_pool_matches_block_means_and_adjoint() {
        let mut rng = StdRng::seed_from_u64(4);
        let x = randn(&mut rng, &[2, 3, 8, 8]);
        let y = avg_pool(&x, 4);
        assert_eq!(y.shape(), &[2, 3, 2, 2]);
        let mut mean = 0.0;
        for dy in 0..4 {
            for dx in 0..4 {
                mean += x[[0, 0, dy, dx]];
            }
        }
        assert!((y[[0, 0, 0, 0]] - mean / 16.0).abs() < 1e-12);

        let gy = randn(&mut rng, y.shape());
        let gx = avg_pool_spread(&gy, 4, 8, 8);
        assert!((dot(&x, &gx) - dot(&y, &gy)).abs() < 1e-10);
    }
}
