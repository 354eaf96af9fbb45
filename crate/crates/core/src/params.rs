//! Shared plumbing for named parameter sets: initialization, f32 storage
//! rounding, flattening and checksums.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::Tensor;
use crate::{Error, Result};

/// A model's parameters as an ordered list of named tensors. The order is
/// the on-disk order of the checkpoint blob.
pub trait ParamSet {
    fn named(&self) -> Vec<(String, &Tensor)>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;

    fn n_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn to_f32(&self) -> Vec<f32> {
        self.named().iter().flat_map(|(_, t)| t.data.iter().map(|&v| v as f32)).collect()
    }

    fn load_f32(&mut self, data: &[f32]) -> Result<()> {
        let n = self.n_params();
        if data.len() != n {
            return Err(Error::MissingParams(format!("expected {n} values, found {}", data.len())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            for (dst, &src) in t.data.iter_mut().zip(&data[off..off + n]) {
                *dst = src as f64;
            }
            off += n;
        }
        Ok(())
    }

    /// Rounds every value to the nearest f32 so that checkpoints are exact.
    fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in &mut t.data {
                *v = *v as f32 as f64;
            }
        }
    }

    /// SHA-256 over the f64 bit patterns, in parameter order.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named() {
            h.update(name.as_bytes());
            for v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    fn zero_all(&mut self) {
        for t in self.tensors_mut() {
            t.data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

pub fn normal(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive standard deviation");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

pub fn ones(cols: usize) -> Tensor {
    Tensor::filled(1, cols, 1.0)
}

pub fn zeros(cols: usize) -> Tensor {
    Tensor::zeros(1, cols)
}
