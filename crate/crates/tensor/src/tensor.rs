//! Dense row-major tensors.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

/// A contiguous row-major array. Image-like tensors use `[N, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Independent standard-normal entries scaled by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: T, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z) * std
        })
    }

    pub fn rand_uniform<R: Rng + ?Sized>(shape: &[usize], lo: T, hi: T, rng: &mut R) -> Self {
        let (lo, hi) = (lo.as_f64(), hi.as_f64());
        Self::from_fn(shape, |_| T::lit(lo + (hi - lo) * rng.random::<f64>()))
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

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(TensorError::Shape(format!(
                "expected rank-4 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(TensorError::Shape(format!(
                "expected rank-2 tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::lit(self.data.len() as f64)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sample `index` along the batch axis of a rank-4 tensor, kept rank-4.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let (n, c, h, w) = self.dims4()?;
        if index >= n {
            return Err(TensorError::Shape(format!("batch index {index} >= {n}")));
        }
        let stride = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            data: self.data[index * stride..(index + 1) * stride].to_vec(),
        })
    }

    /// Concatenates rank-4 tensors along the batch axis.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| TensorError::Shape("cannot stack zero tensors".into()))?;
        let (_, c, h, w) = first.dims4()?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for item in items {
            let (ni, ci, hi, wi) = item.dims4()?;
            if (ci, hi, wi) != (c, h, w) {
                return Err(TensorError::Shape(format!(
                    "cannot stack {:?} with {:?}",
                    item.shape, first.shape
                )));
            }
            n += ni;
            data.extend_from_slice(&item.data);
        }
        Ok(Self {
            shape: vec![n, c, h, w],
            data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn batch_item_and_stack_are_inverse() {
        let t = Tensor::<f64>::from_fn(&[3, 2, 2, 2], |i| i as f64);
        let parts: Vec<_> = (0..3).map(|i| t.batch_item(i).unwrap()).collect();
        assert_eq!(Tensor::stack_batch(&parts).unwrap(), t);
    }
}
