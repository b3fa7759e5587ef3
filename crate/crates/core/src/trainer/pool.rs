use candle_core::Tensor;
use rand::Rng;

use crate::error::Result;

/// History of generated images shown to a critic. With capacity 0 every
/// query returns its input unchanged.
#[derive(Debug, Clone, Default)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::new(),
        }
    }

    pub fn images(&self) -> &[Tensor] {
        &self.images
    }

    pub(crate) fn restore(capacity: usize, images: Vec<Tensor>) -> Self {
        Self { capacity, images }
    }

    /// Each batch element is either passed through or swapped for a stored
    /// image with probability one half once the pool is full.
    pub fn query<R: Rng + ?Sized>(&mut self, batch: &Tensor, rng: &mut R) -> Result<Tensor> {
        if self.capacity == 0 {
            return Ok(batch.clone());
        }
        let n = batch.dim(0)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let img = batch.narrow(0, i, 1)?.detach();
            if self.images.len() < self.capacity {
                self.images.push(img.clone());
                out.push(img);
            } else if rng.random_bool(0.5) {
                let k = rng.random_range(0..self.capacity);
                out.push(std::mem::replace(&mut self.images[k], img));
            } else {
                out.push(img);
            }
        }
        Ok(Tensor::cat(&out, 0)?)
    }
}
