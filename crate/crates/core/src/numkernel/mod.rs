//! Minimal dense-network numerics: parameter storage, forward/backward passes,
//! an AdamW optimizer with warmup + cosine schedule, and counter-based random streams.
//!
//! Everything here is plain value semantics over `f64`. Models made of several
//! [`DenseNet`]s implement [`Parameterized`], which fixes a flattening order shared by
//! parameters, gradients, optimizer moments and checkpoints.

mod dense;
mod gradcheck;
mod optim;
mod rng;
mod tensor;

pub use dense::{Activation, DenseCache, DenseLayer, DenseNet};
pub use gradcheck::{grad_check, grad_check_model, max_relative_error, relative_error};
pub use optim::{AdamWConfig, OptState};
pub use rng::RngStream;
pub use tensor::Tensor2;

use crate::error::{Error, Result};

/// A model whose parameters can be visited in a fixed order.
///
/// Gradients of a model are represented by a value of the same type (see
/// `zeros_like` on the concrete types), so both sides flatten identically.
pub trait Parameterized {
    fn for_each_block(&self, f: &mut dyn FnMut(&[f64]));
    fn for_each_block_mut(&mut self, f: &mut dyn FnMut(&mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_block(&mut |b| n += b.len());
        n
    }

    /// Block lengths in visiting order; used as the checkpoint dimension manifest.
    fn block_lengths(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_block(&mut |b| out.push(b.len()));
        out
    }

    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_block(&mut |b| out.extend_from_slice(b));
        out
    }

    fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.param_count();
        if flat.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "flat parameter vector",
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        self.for_each_block_mut(&mut |b| {
            b.copy_from_slice(&flat[offset..offset + b.len()]);
            offset += b.len();
        });
        Ok(())
    }

    /// Adds `other` into `self` elementwise. Both must share a topology.
    fn add_assign_params(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.to_flat();
        let mut offset = 0;
        self.for_each_block_mut(&mut |b| {
            for (dst, src) in b.iter_mut().zip(&flat[offset..]) {
                *dst += *src;
            }
            offset += b.len();
        });
    }

    fn scale_params(&mut self, factor: f64) {
        self.for_each_block_mut(&mut |b| b.iter_mut().for_each(|v| *v *= factor));
    }
}
