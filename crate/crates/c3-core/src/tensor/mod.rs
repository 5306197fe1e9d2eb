//! Dense tensors and reverse-mode differentiation for the small op set the
//! codec needs.
//!
//! Storage is row-major. Element type is generic over [`Elem`] (f32 for the
//! production pipeline, f64 for high-precision gradient checking); all
//! elementwise math and every reduction run internally in f64 with a single
//! rounding to the storage type per stored element, in a frozen order, so
//! results are deterministic and the f32/f64 pipelines only differ by storage
//! rounding.

mod graph;
pub(crate) mod kernels;

pub use graph::{Gradients, Graph, Var};
pub use kernels::{causal_mask_2d, causal_mask_3d, dense, matvec};

/// Storage element for tensors: f32 in production, f64 in gradient tests.
pub trait Elem:
    Copy + Clone + PartialEq + PartialOrd + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorOf<T: Elem> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// The production tensor type.
pub type Tensor = TensorOf<f32>;

impl<T: Elem> TensorOf<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        TensorOf {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n: usize = shape.iter().product();
        TensorOf {
            shape: shape.to_vec(),
            data: vec![T::from_f64(v); n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "shape {shape:?} wants {n} elements, got {}",
            data.len()
        );
        TensorOf {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Self {
        let v: Vec<T> = data.iter().map(|&x| T::from_f64(x)).collect();
        Self::from_vec(shape, v)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x.to_f64()).collect()
    }

    /// Value at a multi-index (row-major).
    pub fn at(&self, idx: &[usize]) -> T {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0usize;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        self.data[off]
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() needs a single-element tensor");
        self.data[0].to_f64()
    }

    /// Max |x| over all elements (0 for empty tensors).
    pub fn max_abs(&self) -> f64 {
        self.data
            .iter()
            .fold(0.0f64, |m, &x| m.max(x.to_f64().abs()))
    }

    /// Converts storage type (rounding through f64).
    pub fn cast<U: Elem>(&self) -> TensorOf<U> {
        TensorOf {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    /// Same data under a new shape (element count must match). Used to give
    /// 1x1 layers explicit kernel dims for convolution.
    pub fn reshaped(&self, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.data.len(), "reshape {shape:?} wants {n} elements");
        TensorOf {
            shape: shape.to_vec(),
            data: self.data.clone(),
        }
    }
}
