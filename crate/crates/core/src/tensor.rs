//! Dense row-major tensors plus the matrix product the layer math leans on.
//!
//! Element type is generic so the same layer code runs in f32 for training and
//! f64 for finite-difference gradient checking.

use ndarray::{Array2, ArrayD, ArrayView2, Axis, IxDyn};
use rayon::prelude::*;

/// Element type of network tensors.
pub trait Scalar:
    num_traits::Float
    + ndarray::LinalgScalar
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Row-major n-dimensional tensor.
pub type Tensor<F> = ArrayD<F>;

pub fn zeros<F: Scalar>(shape: &[usize]) -> Tensor<F> {
    ArrayD::zeros(IxDyn(shape))
}

pub fn from_vec<F: Scalar>(shape: &[usize], data: Vec<F>) -> Option<Tensor<F>> {
    ArrayD::from_shape_vec(IxDyn(shape), data).ok()
}

pub fn all_finite<F: Scalar>(t: &Tensor<F>) -> bool {
    t.iter().all(|v| v.is_finite())
}

// Products below this many multiply-adds are not worth fanning out.
const PAR_MIN_MULADDS: usize = 1 << 22;
// Fixed fan-out so the chunking (and therefore every accumulation order)
// depends only on the matrix sizes, never on the machine's core count.
const PAR_CHUNKS: usize = 16;

/// `a · b`, parallelized over fixed row chunks of `a` for large products.
///
/// Chunk boundaries are a pure function of the shapes, so repeated runs
/// produce bit-identical results regardless of thread scheduling.
pub fn matmul<F: Scalar>(a: ArrayView2<F>, b: ArrayView2<F>) -> Array2<F> {
    assert_eq!(
        a.ncols(),
        b.nrows(),
        "matmul: inner dimensions {} and {} differ",
        a.ncols(),
        b.nrows()
    );
    let muladds = a.nrows() * a.ncols() * b.ncols();
    let chunk_rows = a.nrows().div_ceil(PAR_CHUNKS).max(16);
    if muladds < PAR_MIN_MULADDS || chunk_rows >= a.nrows() {
        return standard(a.dot(&b));
    }
    let row_chunks: Vec<ArrayView2<F>> = a.axis_chunks_iter(Axis(0), chunk_rows).collect();
    let products: Vec<Array2<F>> = row_chunks.par_iter().map(|rows| rows.dot(&b)).collect();
    let views: Vec<ArrayView2<F>> = products.iter().map(|p| p.view()).collect();
    standard(ndarray::concatenate(Axis(0), &views).expect("row chunks share column count"))
}

// `dot` picks its output layout from its operands and goes column-major when
// both views pass for column-major (any product with an inner or outer
// dimension of 1). Downstream reshapes assume row-major, so normalize here.
fn standard<F: Scalar>(m: Array2<F>) -> Array2<F> {
    if m.is_standard_layout() {
        m
    } else {
        m.as_standard_layout().into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn parallel_matmul_matches_serial() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Array::from_shape_fn((1200, 96), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array::from_shape_fn((96, 80), |_| rng.gen_range(-1.0f32..1.0));
        let fast = matmul(a.view(), b.view());
        let slow = a.dot(&b);
        assert_eq!(fast.shape(), slow.shape());
        for (x, y) in fast.iter().zip(slow.iter()) {
            assert!((x - y).abs() <= 1e-5 * y.abs().max(1.0));
        }
    }

    #[test]
    fn matmul_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Array::from_shape_fn((4096, 64), |_| rng.gen_range(-1.0f32..1.0));
        let b = Array::from_shape_fn((64, 64), |_| rng.gen_range(-1.0f32..1.0));
        let first = matmul(a.view(), b.view());
        let second = matmul(a.view(), b.view());
        assert_eq!(first, second);
    }

    // An inner dimension of 1 makes both operands pass for column-major and
    // `dot` then allocates its output column-major; callers reshape the
    // product row-major, so matmul must hand back standard layout.
    #[test]
    fn matmul_output_is_standard_layout_even_for_rank_one_products() {
        let g = Array::from_shape_fn((4, 1), |(i, _)| i as f32 + 1.0);
        let w = Array::from_shape_fn((512, 1), |(i, _)| i as f32);
        let prod = matmul(g.view(), w.t());
        assert!(prod.is_standard_layout());
        assert_eq!(prod.shape(), &[4, 512]);
        assert_eq!(prod[[2, 3]], 9.0);
        let reshaped = prod.into_shape_with_order(ndarray::IxDyn(&[4, 512]));
        assert!(reshaped.is_ok());
    }
}
