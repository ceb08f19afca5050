//! Dense tensors in batch-major, channel-second, row-major layout.

use crate::error::{shape_err, Result};
use crate::real::Real;

/// Dense N-dimensional float array with an optional gradient slot.
///
/// `shape.iter().product() == values.len()` always holds, and a present
/// gradient has the same length as the values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    values: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return shape_err(format!(
                "shape {shape:?} holds {n} values, got {}",
                values.len()
            ));
        }
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![value; n],
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            values: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            values: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.values.len() {
            return shape_err(format!(
                "gradient length {} does not match {} values",
                grad.len(),
                self.values.len()
            ));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        match self.values.as_slice() {
            [v] => Ok(*v),
            _ => shape_err(format!("item() on tensor of shape {:?}", self.shape)),
        }
    }

    /// Extents of a 4-D tensor as `(batch, channels, height, width)`.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h, w)),
            s => shape_err(format!("expected a 4-D BCHW tensor, got shape {s:?}")),
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            s => shape_err(format!("expected a 2-D tensor, got shape {s:?}")),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.values.len() {
            return shape_err(format!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| U::lit(v.as_f64())).collect()),
        }
    }

    /// Channels `start..end` of a BCHW tensor (or of a CHW tensor).
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let (b, c, plane) = self.channel_layout()?;
        if start > end || end > c {
            return shape_err(format!("channel range {start}..{end} out of 0..{c}"));
        }
        let mut values = Vec::with_capacity(b * (end - start) * plane);
        for n in 0..b {
            let base = n * c * plane;
            values.extend_from_slice(&self.values[base + start * plane..base + end * plane]);
        }
        let mut shape = self.shape.clone();
        let ch_axis = shape.len() - 3;
        shape[ch_axis] = end - start;
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    /// One batch element of a BCHW tensor as a `1 x C x H x W` tensor.
    pub fn batch_item(&self, index: usize) -> Result<Self> {
        let (b, c, h, w) = self.dims4()?;
        if index >= b {
            return shape_err(format!("batch index {index} out of {b}"));
        }
        let n = c * h * w;
        Ok(Self {
            shape: vec![1, c, h, w],
            values: self.values[index * n..(index + 1) * n].to_vec(),
            grad: None,
        })
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = match items.first() {
            Some(f) => f,
            None => return shape_err("stack of zero tensors"),
        };
        let mut values = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return shape_err(format!(
                    "stack shape mismatch {:?} vs {:?}",
                    t.shape, first.shape
                ));
            }
            values.extend_from_slice(&t.values);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self {
            shape,
            values,
            grad: None,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return shape_err(format!("compare {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    fn channel_layout(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[b, c, h, w] => Ok((b, c, h * w)),
            &[c, h, w] => Ok((1, c, h * w)),
            s => shape_err(format!("expected CHW or BCHW tensor, got {s:?}")),
        }
    }
}
