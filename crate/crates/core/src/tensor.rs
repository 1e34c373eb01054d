use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major tensor.
///
/// Five-dimensional activations use the fixed axis order
/// `[batch, channel, depth, height, width]`; lower ranks drop leading axes.
/// Values are immutable while a tensor participates in a recorded graph; the
/// gradient buffer is the only part mutated by backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    /// Whether backward should produce a gradient for this tensor.
    pub requires_grad: bool,
    /// Same-element-count gradient buffer, allocated lazily by backward.
    pub grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    /// Builds a tensor from raw data; the element count must match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    numel,
                    data.len()
                ),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::ZERO; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-1 single-element tensor, the representation of a scalar.
    pub fn scalar(value: S) -> Self {
        Tensor::full(&[1], value)
    }

    /// Marks the tensor as a differentiation target (builder style).
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    /// Mutable access to values. Only legitimate outside a recorded graph
    /// (optimizer updates, checkpoint loading); ops never mutate inputs.
    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<S> {
        if !self.is_scalar() {
            return Err(Error::shape(
                "item",
                format!("expected a scalar, shape is {:?}", self.shape),
            ));
        }
        Ok(self.data[0])
    }

    /// The shape as `[B, C, D, H, W]`, rejecting other ranks.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[b, c, d, h, w] => Ok([b, c, d, h, w]),
            other => Err(Error::shape(
                "dims5",
                format!("expected rank 5, shape is {:?}", other),
            )),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-type conversion; used to run gradient checks at `f64`.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| T::from_f64(v.as_f64()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Ensures a zeroed gradient buffer exists and returns it.
    pub(crate) fn grad_buffer(&mut self) -> &mut [S] {
        if self.grad.is_none() {
            self.grad = Some(vec![S::ZERO; self.data.len()]);
        }
        self.grad.as_mut().unwrap()
    }
}

/// Flat offset into a `[B, C, D, H, W]` tensor.
#[inline]
pub fn idx5(shape: &[usize; 5], b: usize, c: usize, d: usize, h: usize, w: usize) -> usize {
    (((b * shape[1] + c) * shape[2] + d) * shape[3] + h) * shape[4] + w
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_element_count() {
        let err = Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(err.to_string().contains("6 elements"));
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_single_element() {
        let t = Tensor::scalar(4.0f32);
        assert!(t.is_scalar());
        assert_eq!(t.item().unwrap(), 4.0);
        assert_eq!(t.shape(), &[1]);
    }

    #[test]
    fn dims5_rejects_other_ranks() {
        assert!(Tensor::<f32>::zeros(&[1, 2, 3]).dims5().is_err());
        assert_eq!(
            Tensor::<f32>::zeros(&[1, 2, 3, 4, 5]).dims5().unwrap(),
            [1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn cast_round_trips_values() {
        let t = Tensor::from_vec(&[3], vec![1.5f32, -2.25, 0.125]).unwrap();
        let d = t.cast::<f64>();
        assert_eq!(d.data(), &[1.5f64, -2.25, 0.125]);
        let back = d.cast::<f32>();
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn idx5_is_row_major() {
        let shape = [2, 3, 4, 5, 6];
        assert_eq!(idx5(&shape, 0, 0, 0, 0, 0), 0);
        assert_eq!(idx5(&shape, 0, 0, 0, 0, 1), 1);
        assert_eq!(idx5(&shape, 0, 0, 0, 1, 0), 6);
        assert_eq!(idx5(&shape, 0, 0, 1, 0, 0), 30);
        assert_eq!(idx5(&shape, 0, 1, 0, 0, 0), 120);
        assert_eq!(idx5(&shape, 1, 0, 0, 0, 0), 360);
    }
}
