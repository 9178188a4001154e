//! Floating-point scalar abstraction over `f32`/`f64`.
//!
//! Training runs in `f32`; gradient verification against finite differences
//! runs in `f64`. GEMM calls dispatch to the system CBLAS (OpenBLAS), pinned
//! to a single thread so results are bit-reproducible run to run.

use std::sync::Once;

use ndarray::NdFloat;
use serde::de::DeserializeOwned;
use serde::Serialize;

#[allow(non_upper_case_globals)]
const CblasRowMajor: i32 = 101;
#[allow(non_upper_case_globals)]
const CblasNoTrans: i32 = 111;
#[allow(non_upper_case_globals)]
const CblasTrans: i32 = 112;

extern "C" {
    fn openblas_set_num_threads(n: i32);

    fn cblas_sgemm(
        layout: i32,
        transa: i32,
        transb: i32,
        m: i32,
        n: i32,
        k: i32,
        alpha: f32,
        a: *const f32,
        lda: i32,
        b: *const f32,
        ldb: i32,
        beta: f32,
        c: *mut f32,
        ldc: i32,
    );

    #[allow(clippy::too_many_arguments)]
    fn cblas_dgemm(
        layout: i32,
        transa: i32,
        transb: i32,
        m: i32,
        n: i32,
        k: i32,
        alpha: f64,
        a: *const f64,
        lda: i32,
        b: *const f64,
        ldb: i32,
        beta: f64,
        c: *mut f64,
        ldc: i32,
    );
}

static BLAS_INIT: Once = Once::new();

fn init_blas() {
    BLAS_INIT.call_once(|| unsafe {
        openblas_set_num_threads(1);
    });
}

/// Element type of all tensors in this crate.
pub trait Scalar: NdFloat + Serialize + DeserializeOwned + Default + 'static {
    /// Tag stored in checkpoints so a file cannot be loaded at the wrong width.
    const DTYPE: &'static str;

    fn cast(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * op(a) * op(b) + beta * c`, row-major.
    ///
    /// `a` is `m x k` after the optional transpose, `b` is `k x n`, `c` is `m x n`.
    /// Leading dimensions are those of the arrays as stored (pre-transpose).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        transa: bool,
        transb: bool,
        m: usize,
        n: usize,
        k: usize,
        alpha: Self,
        a: &[Self],
        lda: usize,
        b: &[Self],
        ldb: usize,
        beta: Self,
        c: &mut [Self],
        ldc: usize,
    );
}

macro_rules! impl_scalar {
    ($t:ty, $tag:expr, $gemm:ident) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn cast(x: f64) -> Self {
                x as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                transa: bool,
                transb: bool,
                m: usize,
                n: usize,
                k: usize,
                alpha: Self,
                a: &[Self],
                lda: usize,
                b: &[Self],
                ldb: usize,
                beta: Self,
                c: &mut [Self],
                ldc: usize,
            ) {
                init_blas();
                debug_assert!(a.len() >= if transa { k } else { m } * lda);
                debug_assert!(b.len() >= if transb { n } else { k } * ldb);
                debug_assert!(c.len() >= m * ldc);
                unsafe {
                    $gemm(
                        CblasRowMajor,
                        if transa { CblasTrans } else { CblasNoTrans },
                        if transb { CblasTrans } else { CblasNoTrans },
                        m as i32,
                        n as i32,
                        k as i32,
                        alpha,
                        a.as_ptr(),
                        lda as i32,
                        b.as_ptr(),
                        ldb as i32,
                        beta,
                        c.as_mut_ptr(),
                        ldc as i32,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", cblas_sgemm);
impl_scalar!(f64, "f64", cblas_dgemm);
