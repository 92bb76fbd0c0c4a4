//! Minimal deterministic numeric kernel: fixed-topology MLPs with
//! reverse-mode gradients, Adam, seedable randomness, and diagonal-Gaussian
//! utilities. Everything is 64-bit and allocation is not a concern at this
//! scale; correctness and reproducibility are.

pub mod adam;
pub mod gaussian;
pub mod mlp;
pub mod rng;

pub use adam::AdamState;
pub use gaussian::{kl_diag, DiagGaussian};
pub use mlp::{Mlp, MlpBatchCache, MlpGrads};
pub use rng::{derive_seed, seed_rng, standard_normal_mat, standard_normal_vec, Prng};

use ndarray::Array1;

/// Concatenates vectors in order into a single vector.
pub fn concat_vecs(parts: &[&Array1<f64>]) -> Array1<f64> {
    let total: usize = parts.iter().map(|p| p.len()).sum();
    let mut out = Array1::zeros(total);
    let mut at = 0;
    for p in parts {
        out.slice_mut(ndarray::s![at..at + p.len()]).assign(p);
        at += p.len();
    }
    out
}
