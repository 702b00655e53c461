//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: a [`Tensor`] is a shape plus a flat
//! buffer, and differentiation happens on a [`tape::Tape`] that is rebuilt
//! on every forward pass. There is no broadcasting beyond scalar-times-tensor;
//! row- and channel-bias additions are explicit operations.

pub mod adamw;
pub mod check;
pub mod math;
pub mod param;
pub mod rng;
pub mod tape;

pub use adamw::{AdamW, AdamWConfig, ParamGroup};
pub use param::{GradStore, Init, ParamId, ParamStore};
pub use tape::{Tape, TapeGrads, Var};

/// Scalar type used throughout. Test builds use `f64`; the `real32`
/// feature switches to `f32` and relaxes tolerances by a factor of 1e3.
#[cfg(not(feature = "real32"))]
pub type Real = f64;
#[cfg(feature = "real32")]
pub type Real = f32;

/// True when [`Real`] is `f64`. Tests use this to pick tolerances.
pub const REAL_IS_F64: bool = std::mem::size_of::<Real>() == 8;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat buffer.
    pub fn new(shape: &[usize], data: Vec<Real>) -> Self {
        assert!(!shape.is_empty(), "tensor needs at least one axis");
        assert!(shape.iter().all(|&e| e > 0), "extents must be positive");
        let numel: usize = shape.iter().product();
        assert_eq!(numel, data.len(), "shape {shape:?} vs {} values", data.len());
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![0.0; numel])
    }

    pub fn full(shape: &[usize], v: Real) -> Self {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![v; numel])
    }

    /// Rank-1 tensor with a single element.
    pub fn scalar(v: Real) -> Self {
        Tensor::new(&[1], vec![v])
    }

    /// Rank-1 tensor from a flat vector.
    pub fn from_vec(data: Vec<Real>) -> Self {
        let n = data.len();
        Tensor::new(&[n], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// Value of the single element of a one-element tensor.
    pub fn item(&self) -> Real {
        assert_eq!(self.numel(), 1, "item() on shape {:?}", self.shape);
        self.data[0]
    }

    /// Row-major element access by multi-index.
    pub fn at(&self, idx: &[usize]) -> Real {
        self.data[self.flat_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: Real) {
        let f = self.flat_index(idx);
        self.data[f] = v;
    }

    fn flat_index(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&x, &e)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < e, "index {idx:?} out of bounds for {:?} at axis {i}", self.shape);
            flat = flat * e + x;
        }
        flat
    }

    /// Same buffer under a new shape; total element count must match.
    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(numel, self.data.len(), "reshape {:?} -> {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Tensor::new(&self.shape, self.data.iter().map(|&x| f(x)).collect())
    }

    /// 2-D transpose; materializes a copy.
    pub fn t2(&self) -> Self {
        assert_eq!(self.rank(), 2, "t2 on shape {:?}", self.shape);
        let (m, n) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(&[n, m], out)
    }

    /// Uniform random tensor in `[lo, hi)`.
    pub fn uniform(shape: &[usize], lo: Real, hi: Real, rng: &mut impl rand::Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
        Tensor::new(shape, data)
    }

    /// Largest elementwise absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, Real::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_indexing() {
        let t = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(t.at(&[0, 0]), 1.0);
        assert_eq!(t.at(&[1, 2]), 6.0);
        assert_eq!(t.numel(), 6);
    }

    #[test]
    #[should_panic(expected = "shape")]
    fn shape_data_mismatch_panics() {
        let _ = Tensor::new(&[2, 2], vec![1.0]);
    }

    #[test]
    fn reshape_transpose_roundtrip_bit_exact() {
        let t = Tensor::new(&[2, 3], vec![1.0, -2.0, 3.5, 4.0, 0.25, 6.0]);
        let r = t.clone().reshaped(&[3, 2]).reshaped(&[2, 3]);
        assert_eq!(t, r);
        let tt = t.t2().t2();
        assert_eq!(t, tt);
    }

    #[test]
    fn transpose_moves_elements() {
        let t = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let tt = t.t2();
        assert_eq!(tt.data(), &[1.0, 3.0, 2.0, 4.0]);
    }
}
