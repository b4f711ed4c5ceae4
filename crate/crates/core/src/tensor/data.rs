//! Plain dense storage, detached from any tape.
//!
//! `TensorData` is what parameters, checkpoints and extracted patches are made
//! of. It carries no gradient state; autodiff happens on [`super::Tensor`]
//! handles after a value is inserted into a [`super::Tape`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array in row-major order.
///
/// Invariant: `shape.iter().product() == data.len()` (enforced on
/// construction; empty tensors are rejected since every extent is positive).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> TensorData<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(TensorData { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        TensorData {
            shape,
            data: vec![T::zero(); numel],
        }
    }

    pub fn filled(shape: Vec<usize>, v: T) -> Self {
        let numel: usize = shape.iter().product();
        TensorData {
            shape,
            data: vec![v; numel],
        }
    }

    pub fn scalar(v: T) -> Self {
        TensorData {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Identity matrix, shape `[n, n]`.
    pub fn eye(n: usize) -> Self {
        let mut data = vec![T::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = T::one();
        }
        TensorData {
            shape: vec![n, n],
            data,
        }
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

    pub fn into_parts(self) -> (Vec<usize>, Vec<T>) {
        (self.shape, self.data)
    }

    /// Row-major multi-index access. Debug-checked bounds.
    pub fn at(&self, idx: &[usize]) -> T {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut flat = 0;
        for (&i, &e) in idx.iter().zip(&self.shape) {
            debug_assert!(i < e);
            flat = flat * e + i;
        }
        self.data[flat]
    }

    /// Sub-tensor along the first axis: `[N, rest..] -> [rest..]`.
    pub fn index_axis0(&self, i: usize) -> Result<TensorData<T>> {
        if self.shape.len() < 2 {
            return Err(Error::Contract(
                "index_axis0 needs rank >= 2".to_string(),
            ));
        }
        if i >= self.shape[0] {
            return Err(Error::Contract(format!(
                "index {i} out of range for axis of extent {}",
                self.shape[0]
            )));
        }
        let block: usize = self.shape[1..].iter().product();
        let data = self.data[i * block..(i + 1) * block].to_vec();
        TensorData::new(self.shape[1..].to_vec(), data)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> TensorData<T> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise max |a - b|; shapes must agree.
    pub fn max_abs_diff(&self, other: &TensorData<T>) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut m = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a - b).abs();
            if d > m {
                m = d;
            }
        }
        Ok(m)
    }

    /// Convert element type, e.g. to pin a generic result to `f64`.
    pub fn cast<U: Scalar>(&self) -> TensorData<U> {
        TensorData {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64((*v).into_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_product_must_match_len() {
        assert!(TensorData::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(TensorData::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(TensorData::<f64>::new(vec![2, 0], vec![]).is_err());
        assert!(TensorData::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn index_axis0_slices_rows() {
        let t = TensorData::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        let r1 = t.index_axis0(1).unwrap();
        assert_eq!(r1.shape(), &[3]);
        assert_eq!(r1.data(), &[3.0, 4.0, 5.0]);
        assert!(t.index_axis0(2).is_err());
    }

    #[test]
    fn eye_and_at() {
        let i3 = TensorData::<f32>::eye(3);
        assert_eq!(i3.at(&[1, 1]), 1.0);
        assert_eq!(i3.at(&[1, 2]), 0.0);
    }
}
