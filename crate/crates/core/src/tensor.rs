//! Dense row-major tensors.
//!
//! The training path runs at `f32`; gradient checking re-runs the same
//! generic code at `f64`. A tensor on its own carries no derivative
//! machinery — see [`crate::autograd`] for the tape.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },
    #[error("shape {shape:?} holds {expected} values, got {got}")]
    DataLength { shape: Vec<usize>, expected: usize, got: usize },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Element type of the engine: `f32` for training, `f64` for checking.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + Default
    + 'static
{
    const DTYPE: Dtype;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    /// Hyperbolic tangent on the hot path. The f32 impl is a vectorizable
    /// rational approximation (≈1e-6 absolute error); f64 stays exact so
    /// gradient checking sees the true function.
    fn tanh_fast(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    fn tanh_fast(self) -> Self {
        tanh_rational_f32(self)
    }
}

impl Scalar for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn tanh_fast(self) -> Self {
        self.tanh()
    }
}

/// Odd rational approximation of tanh, saturating past |x| ≈ 7.9; max
/// absolute error ≈ 4e-7. Evaluated in z = (x/7.90531)² so Horner stays
/// well conditioned in f32, and branch free so LLVM can vectorize callers.
fn tanh_rational_f32(x: f32) -> f32 {
    const CLAMP: f32 = 7.905_31;
    const INV_CLAMP2: f32 = 1.0 / (CLAMP * CLAMP);
    const P: [f32; 7] = [
        9.999_999_9e-1,
        8.204_832,
        1.232_059_6e1,
        2.856_213_5,
        -3.446_323_3e-1,
        6.223_141_8e-2,
        -7.200_266_4e-3,
    ];
    const Q: [f32; 4] = [1.0, 2.903_613_9e1, 9.644_941e1, 6.396_954_5e1];
    let x = x.clamp(-CLAMP, CLAMP);
    let z = x * x * INV_CLAMP2;
    let p = (((((P[6] * z + P[5]) * z + P[4]) * z + P[3]) * z + P[2]) * z + P[1]) * z + P[0];
    let q = ((Q[3] * z + Q[2]) * z + Q[1]) * z + Q[0];
    x * p / q
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "f64")]
    F64,
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => write!(f, "f32"),
            Dtype::F64 => write!(f, "f64"),
        }
    }
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength { shape, expected, got: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![T::zero(); n] }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: T) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_vec(data: Vec<T>) -> Self {
        Self { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn item(&self) -> T {
        assert_eq!(self.numel(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape of equal volume.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(TensorError::DataLength { shape, expected, got: self.data.len() });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Lossy dtype conversion, used when moving between the `f32` training
    /// path and the `f64` checking path.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(Scalar::to_f64(v))).collect(),
        }
    }
}

/// Row-major strides for `shape`.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Decomposes a flat index into coordinates under `shape`.
pub fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut coords = vec![0usize; shape.len()];
    for d in (0..shape.len()).rev() {
        coords[d] = flat % shape[d];
        flat /= shape[d];
    }
    coords
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_volume() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::DataLength { expected: 6, got: 5, .. }));
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[]), Vec::<usize>::new());
    }

    #[test]
    fn unravel_roundtrips() {
        let shape = [3, 4, 5];
        let strides = strides_of(&shape);
        for flat in 0..60 {
            let c = unravel(flat, &shape);
            let back: usize = c.iter().zip(&strides).map(|(a, b)| a * b).sum();
            assert_eq!(back, flat);
        }
    }
}

#[cfg(test)]
mod tanh_tests {
    use super::*;

    #[test]
    fn fast_tanh_tracks_std_tanh() {
        let mut max_err = 0.0f32;
        let mut x = -9.0f32;
        while x <= 9.0 {
            let err = (x.tanh_fast() - x.tanh()).abs();
            if err > max_err {
                max_err = err;
            }
            x += 0.001;
        }
        assert!(max_err < 5e-6, "fast tanh deviates by {max_err}");
        assert_eq!(0.0f32.tanh_fast(), 0.0);
        assert!((100.0f32.tanh_fast() - 1.0).abs() < 1e-6);
        assert!((-100.0f32).tanh_fast() + 1.0 < 1e-6);
    }
}
