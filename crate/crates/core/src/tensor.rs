//! Dense row-major tensors.
//!
//! A [`Tensor`] is a plain value: a shape plus an `f64` buffer. Image maps use
//! the `channels x height x width` layout, convolution weights use
//! `out x in x k x k`, and scalars use the empty shape. Differentiable
//! computation does not happen here; it is recorded on a [`crate::tape::Tape`].
//! The methods on `Tensor` are the non-differentiable helpers used for image
//! constants, weight maps and the post-optimization enhancement stage.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape, data: vec![value; numel] }
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    /// The single value of a rank-0/one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    /// Dimensions of a rank-3 `channels x height x width` tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected a rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shape tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn clamp01(&self) -> Tensor {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn mean(&self) -> Result<f64> {
        if self.data.is_empty() {
            return Err(Error::EmptyTensor);
        }
        Ok(self.data.iter().sum::<f64>() / self.data.len() as f64)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Replicates a `1 x H x W` map to `channels x H x W`.
    pub fn replicate_channels(&self, channels: usize) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if c != 1 {
            return Err(Error::ShapeMismatch(format!(
                "expected a single-channel map, got {} channels",
                c
            )));
        }
        let mut data = Vec::with_capacity(channels * h * w);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Ok(Tensor { shape: vec![channels, h, w], data })
    }

    /// Per-pixel mean over channels of a rank-3 tensor (`C x H x W -> 1 x H x W`).
    pub fn channel_mean(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        let plane = h * w;
        let mut data = vec![0.0; plane];
        for ch in 0..c {
            let src = &self.data[ch * plane..(ch + 1) * plane];
            for (acc, &v) in data.iter_mut().zip(src) {
                *acc += v;
            }
        }
        let inv = 1.0 / c as f64;
        for v in &mut data {
            *v *= inv;
        }
        Ok(Tensor { shape: vec![1, h, w], data })
    }

    /// Per-pixel maximum over channels of a 3-channel tensor (`3 x H x W -> 1 x H x W`).
    pub fn per_pixel_max(&self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected 3 channels, got {}",
                c
            )));
        }
        let plane = h * w;
        let mut data = vec![f64::NEG_INFINITY; plane];
        for ch in 0..3 {
            let src = &self.data[ch * plane..(ch + 1) * plane];
            for (acc, &v) in data.iter_mut().zip(src) {
                if v > *acc {
                    *acc = v;
                }
            }
        }
        Ok(Tensor { shape: vec![1, h, w], data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(0.25);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 0.25);
    }

    #[test]
    fn replicate_channels_copies_plane() {
        let m = Tensor::new(vec![1, 2, 2], vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = m.replicate_channels(3).unwrap();
        assert_eq!(r.shape(), &[3, 2, 2]);
        assert_eq!(&r.data()[4..8], m.data());
    }

    #[test]
    fn channel_mean_and_max() {
        let t = Tensor::new(vec![3, 1, 1], vec![0.2, 0.5, 0.3]).unwrap();
        assert!((t.channel_mean().unwrap().data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(t.per_pixel_max().unwrap().data()[0], 0.5);
    }
}
