use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scales `z` back onto the unit ball when its norm exceeds 1.
pub fn project_latent(z: &mut [f64]) {
    let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1.0 {
        for v in z.iter_mut() {
            *v /= norm;
        }
    }
}

/// One learnable code per training image; every row stays in the unit ball.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTable {
    z: Tensor,
}

impl LatentTable {
    /// Rows drawn from a standard normal, then projected.
    pub fn init<R: Rng + ?Sized>(count: usize, dim: usize, rng: &mut R) -> Self {
        let mut z = Tensor::randn(&[count, dim], 1.0, rng);
        for row in z.data_mut().chunks_mut(dim) {
            project_latent(row);
        }
        LatentTable { z }
    }

    pub fn from_tensor(z: Tensor) -> Result<Self> {
        if z.ndim() != 2 {
            return Err(Error::shape("latent_table", format!("expected (N, D), got {:?}", z.shape())));
        }
        Ok(LatentTable { z })
    }

    pub fn len(&self) -> usize {
        self.z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.z.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.z
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.z.data()[i * d..(i + 1) * d]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.z.data_mut()[i * d..(i + 1) * d]
    }

    /// Stacks the given rows into a `(rows.len(), D)` tensor.
    pub fn gather(&self, rows: &[usize]) -> Tensor {
        let d = self.dim();
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(self.row(r));
        }
        Tensor::from_vec(&[rows.len(), d], out)
    }

    pub fn max_row_norm(&self) -> f64 {
        (0..self.len())
            .map(|i| self.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}
