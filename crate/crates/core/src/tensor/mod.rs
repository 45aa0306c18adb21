//! Dense f64 tensors and the reverse-mode tape.
//!
//! Everything is double precision and row-major. Desk-scale problems are
//! small, so exact gradient checks and bit-reproducible runs take priority
//! over throughput.

mod conv;
mod tape;

pub use conv::{conv3d_out_extent, conv3d_seq};
#[cfg(feature = "parallel")]
pub use conv::conv3d_par;
pub use tape::{NodeId, Tape};

use crate::error::{Error, Result};
use crate::rng::{hash_f64s, Rng};

/// Dense N-dimensional array, row-major, with an optional gradient slot.
///
/// Convolution inputs use `[channels, depth, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                axis: 0,
                expected: numel,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false, grad: None }
    }

    /// Seeded Gaussian init with the given standard deviation.
    pub fn gaussian(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gaussian() * std).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
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

    /// Mutable view of the elements. The shape cannot change through this.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// FNV-1a digest of the element bytes.
    pub fn content_hash(&self) -> u64 {
        hash_f64s(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Crop a cubic spatial patch from a [C,D,H,W] tensor.
    pub fn crop(&self, start: [usize; 3], size: usize) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::RankMismatch {
                context: "crop",
                expected: 4,
                got: self.shape.len(),
            });
        }
        let (c, d, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        for (axis, (&s, &ext)) in start.iter().zip(&self.shape[1..]).enumerate() {
            if s + size > ext {
                return Err(Error::PatchTooLarge { axis: axis + 1, patch: s + size, extent: ext });
            }
        }
        let mut out = Vec::with_capacity(c * size * size * size);
        for ci in 0..c {
            for z in 0..size {
                for y in 0..size {
                    let row = ((ci * d + start[0] + z) * h + start[1] + y) * w + start[2];
                    out.extend_from_slice(&self.data[row..row + size]);
                }
            }
        }
        Tensor::new(vec![c, size, size, size], out)
    }

    /// Mean across channels: [C,D,H,W] -> [1,D,H,W].
    pub fn channel_mean(&self) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::RankMismatch {
                context: "channel_mean",
                expected: 4,
                got: self.shape.len(),
            });
        }
        let c = self.shape[0];
        let vox: usize = self.shape[1..].iter().product();
        let mut out = vec![0.0; vox];
        for ci in 0..c {
            for v in 0..vox {
                out[v] += self.data[ci * vox + v];
            }
        }
        for v in out.iter_mut() {
            *v /= c as f64;
        }
        Tensor::new(vec![1, self.shape[1], self.shape[2], self.shape[3]], out)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Set the gradient; the slot must match the tensor shape.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::set_grad",
                axis: 0,
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_slot_must_match_shape() {
        let mut t = Tensor::zeros(vec![2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        assert!(t.set_grad(vec![0.0; 4]).is_ok());
    }

    #[test]
    fn content_hash_tracks_data() {
        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let mut b = a.clone();
        assert_eq!(a.content_hash(), b.content_hash());
        b.data_mut()[0] = 1.5;
        assert_ne!(a.content_hash(), b.content_hash());
    }
}
