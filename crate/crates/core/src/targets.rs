//! EMA target-distribution table: one diagonal Gaussian per (DoV, label),
//! updated by exponential moving average of the per-task posteriors seen in
//! training. The table anchors the disentanglement loss and supplies the
//! blocks for zero-shot composition. Entries are constants for
//! differentiation: no gradient ever flows into the table.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{kl_diag, DiagGaussian};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetEntry {
    pub dov: usize,
    pub label: usize,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetTable {
    tau: f64,
    entries: Vec<TargetEntry>,
}

impl TargetTable {
    pub fn new(tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(Error::Config(format!("tau must be in [0,1), got {tau}")));
        }
        Ok(Self {
            tau,
            entries: Vec::new(),
        })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn entries(&self) -> &[TargetEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, dov: usize, label: usize) -> bool {
        self.find(dov, label).is_some()
    }

    fn find(&self, dov: usize, label: usize) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.dov == dov && e.label == label)
    }

    /// EMA step for one (DoV, label) entry:
    /// mean ← τ·mean + (1-τ)·posterior_mean, same for the variance.
    /// An unseen entry is initialized to the posterior exactly, which makes
    /// the first disentanglement term zero instead of pulling the encoder
    /// toward an arbitrary point.
    pub fn ema_update(&mut self, dov: usize, label: usize, posterior: &DiagGaussian) {
        match self.find(dov, label) {
            Some(i) => {
                let e = &mut self.entries[i];
                let t = self.tau;
                e.mean.zip_mut_with(posterior.mean(), |m, &q| {
                    *m = t * *m + (1.0 - t) * q;
                });
                e.var.zip_mut_with(posterior.var(), |v, &q| {
                    *v = t * *v + (1.0 - t) * q;
                });
            }
            None => self.entries.push(TargetEntry {
                dov,
                label,
                mean: posterior.mean().clone(),
                var: posterior.var().clone(),
            }),
        }
    }

    /// Current target distribution for a (DoV, label) pair. A missing entry
    /// signals that zero-shot composition must go through the S2 path.
    pub fn get_target(&self, dov: usize, label: usize) -> Result<DiagGaussian> {
        let i = self
            .find(dov, label)
            .ok_or(Error::MissingLabel { dov, label })?;
        let e = &self.entries[i];
        DiagGaussian::new(e.mean.clone(), e.var.clone())
    }

    /// Entries sorted by (dov, label); useful for deterministic export.
    pub fn sorted_entries(&self) -> Vec<&TargetEntry> {
        let mut out: Vec<&TargetEntry> = self.entries.iter().collect();
        out.sort_by_key(|e| (e.dov, e.label));
        out
    }
}

/// Value and posterior-side gradients of the disentanglement loss for one
/// task: λ Σ_j KL(q_j ‖ target_{j, y_j}).
#[derive(Debug, Clone)]
pub struct DisLoss {
    pub value: f64,
    /// Per DoV: (dL/d mean_j, dL/d var_j). `None` when the entry was just
    /// initialized this step (zero loss, zero gradient).
    pub grads: Vec<Option<(Array1<f64>, Array1<f64>)>>,
}

/// Computes the disentanglement loss against the pre-update targets.
/// Any (j, y_j) entry not yet in the table is initialized from the current
/// posterior, contributing zero loss this step. Gradients flow into the
/// posteriors only; the table is a constant for differentiation.
pub fn disentangle_loss(
    table: &mut TargetTable,
    combo: &[usize],
    posteriors: &[DiagGaussian],
    lambda: f64,
) -> Result<DisLoss> {
    if combo.len() != posteriors.len() {
        return Err(Error::Shape(format!(
            "combo has {} labels but {} posteriors given",
            combo.len(),
            posteriors.len()
        )));
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(combo.len());
    for (j, (&label, q)) in combo.iter().zip(posteriors).enumerate() {
        if !table.contains(j, label) {
            table.ema_update(j, label, q);
            grads.push(None);
            continue;
        }
        let target = table.get_target(j, label)?;
        value += lambda * kl_diag(q, &target)?;
        if lambda == 0.0 {
            grads.push(None);
            continue;
        }
        // d KL(q‖p)/dμq = (μq - μp)/vp ; d/dvq = 0.5·(1/vp - 1/vq).
        let g_mean = Array1::from_shape_fn(q.dim(), |k| {
            lambda * (q.mean()[k] - target.mean()[k]) / target.var()[k]
        });
        let g_var = Array1::from_shape_fn(q.dim(), |k| {
            lambda * 0.5 * (1.0 / target.var()[k] - 1.0 / q.var()[k])
        });
        grads.push(Some((g_mean, g_var)));
    }
    Ok(DisLoss { value, grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn gauss(mean: f64, var: f64, d: usize) -> DiagGaussian {
        DiagGaussian::new(
            Array1::from_elem(d, mean),
            Array1::from_elem(d, var),
        )
        .unwrap()
    }

    #[test]
    fn ema_arithmetic_is_exact() {
        let mut table = TargetTable::new(0.99).unwrap();
        table.ema_update(0, 0, &gauss(0.0, 1.0, 1)); // init
        table.ema_update(0, 0, &gauss(1.0, 1.0, 1));
        let t = table.get_target(0, 0).unwrap();
        assert!((t.mean()[0] - 0.01).abs() <= 1e-15);
    }

    #[test]
    fn tau_zero_assigns_last_posterior() {
        let mut table = TargetTable::new(0.0).unwrap();
        table.ema_update(1, 3, &gauss(5.0, 2.0, 2));
        table.ema_update(1, 3, &gauss(-1.5, 0.25, 2));
        let t = table.get_target(1, 3).unwrap();
        assert_eq!(t.mean(), &array![-1.5, -1.5]);
        assert_eq!(t.var(), &array![0.25, 0.25]);
    }

    /// Closed-form geometric recursion: after k updates with constant input
    /// m from initial value m0, the entry is τ^k·m0 + (1-τ^k)·m.
    #[test]
    fn constant_updates_converge_geometrically() {
        let tau = 0.9;
        let mut table = TargetTable::new(tau).unwrap();
        let init = gauss(1.0, 2.0, 3);
        let incoming = gauss(4.0, 0.5, 3);
        table.ema_update(0, 1, &init);
        for k in 1..=25 {
            table.ema_update(0, 1, &incoming);
            let t = table.get_target(0, 1).unwrap();
            let w = tau_pow(tau, k);
            let expect_mean = w * 1.0 + (1.0 - w) * 4.0;
            let expect_var = w * 2.0 + (1.0 - w) * 0.5;
            for d in 0..3 {
                assert!((t.mean()[d] - expect_mean).abs() < 1e-12);
                assert!((t.var()[d] - expect_var).abs() < 1e-12);
            }
        }
    }

    fn tau_pow(tau: f64, k: usize) -> f64 {
        tau.powi(k as i32)
    }

    #[test]
    fn first_update_initializes_exactly() {
        let mut table = TargetTable::new(0.99).unwrap();
        let post = gauss(0.7, 1.3, 4);
        table.ema_update(2, 5, &post);
        let t = table.get_target(2, 5).unwrap();
        assert_eq!(t.mean(), post.mean());
        assert_eq!(t.var(), post.var());
    }

    #[test]
    fn unseen_label_is_a_missing_label_error() {
        let table = TargetTable::new(0.99).unwrap();
        assert!(matches!(
            table.get_target(0, 7),
            Err(Error::MissingLabel { dov: 0, label: 7 })
        ));
    }

    #[test]
    fn invalid_tau_rejected() {
        assert!(TargetTable::new(1.0).is_err());
        assert!(TargetTable::new(-0.1).is_err());
    }

    #[test]
    fn dis_loss_zero_when_posteriors_equal_targets() {
        let mut table = TargetTable::new(0.99).unwrap();
        let q0 = gauss(0.3, 0.8, 5);
        let q1 = gauss(-0.2, 1.1, 5);
        table.ema_update(0, 2, &q0);
        table.ema_update(1, 4, &q1);
        let out = disentangle_loss(&mut table, &[2, 4], &[q0, q1], 0.1).unwrap();
        assert!(out.value.abs() < 1e-15);
    }

    #[test]
    fn dis_loss_scales_with_lambda_and_zero_lambda_vanishes() {
        let mut table = TargetTable::new(0.99).unwrap();
        table.ema_update(0, 0, &gauss(0.0, 1.0, 3));
        table.ema_update(1, 1, &gauss(0.0, 1.0, 3));
        let qs = [gauss(1.0, 1.0, 3), gauss(-1.0, 1.0, 3)];

        let zero = disentangle_loss(&mut table.clone(), &[0, 1], &qs, 0.0).unwrap();
        assert_eq!(zero.value, 0.0);

        let one = disentangle_loss(&mut table.clone(), &[0, 1], &qs, 1.0).unwrap();
        let tenth = disentangle_loss(&mut table.clone(), &[0, 1], &qs, 0.1).unwrap();
        assert!((tenth.value - 0.1 * one.value).abs() < 1e-12);
    }

    /// Recompute via explicit kl_diag sum: M=2, both block KLs 0.5, λ=0.1.
    #[test]
    fn dis_loss_matches_blockwise_kl_sum() {
        let mut table = TargetTable::new(0.99).unwrap();
        table.ema_update(0, 0, &gauss(0.0, 1.0, 1));
        table.ema_update(1, 0, &gauss(0.0, 1.0, 1));
        // KL(N(1,1) ‖ N(0,1)) = 0.5 per block.
        let qs = [gauss(1.0, 1.0, 1), gauss(1.0, 1.0, 1)];
        let out = disentangle_loss(&mut table, &[0, 0], &qs, 0.1).unwrap();
        assert!((out.value - 0.1).abs() < 1e-12);

        let manual: f64 = qs
            .iter()
            .map(|q| kl_diag(q, &gauss(0.0, 1.0, 1)).unwrap())
            .sum();
        assert!((out.value - 0.1 * manual).abs() < 1e-15);
    }

    #[test]
    fn missing_entry_initializes_with_zero_loss() {
        let mut table = TargetTable::new(0.99).unwrap();
        let q = gauss(2.0, 0.5, 4);
        let out = disentangle_loss(&mut table, &[3], &[q.clone()], 0.1).unwrap();
        assert_eq!(out.value, 0.0);
        assert!(out.grads[0].is_none());
        let t = table.get_target(0, 3).unwrap();
        assert_eq!(t.mean(), q.mean());
    }

    /// Gradients w.r.t. the posterior match finite differences of the loss.
    #[test]
    fn dis_loss_gradients_match_finite_differences() {
        let mut table = TargetTable::new(0.99).unwrap();
        table.ema_update(0, 1, &gauss(0.4, 1.4, 3));
        let q = gauss(1.2, 0.6, 3);
        let out = disentangle_loss(&mut table.clone(), &[1], &[q.clone()], 0.3).unwrap();
        let (g_mean, g_var) = out.grads[0].clone().unwrap();

        let step = 1e-6;
        for k in 0..3 {
            let mut mean_hi = q.mean().clone();
            mean_hi[k] += step;
            let mut mean_lo = q.mean().clone();
            mean_lo[k] -= step;
            let hi = disentangle_loss(
                &mut table.clone(),
                &[1],
                &[DiagGaussian::new(mean_hi, q.var().clone()).unwrap()],
                0.3,
            )
            .unwrap()
            .value;
            let lo = disentangle_loss(
                &mut table.clone(),
                &[1],
                &[DiagGaussian::new(mean_lo, q.var().clone()).unwrap()],
                0.3,
            )
            .unwrap()
            .value;
            let fd = (hi - lo) / (2.0 * step);
            assert!((fd - g_mean[k]).abs() < 1e-6, "mean dim {k}: fd {fd} vs {}", g_mean[k]);

            let mut var_hi = q.var().clone();
            var_hi[k] += step;
            let mut var_lo = q.var().clone();
            var_lo[k] -= step;
            let hi = disentangle_loss(
                &mut table.clone(),
                &[1],
                &[DiagGaussian::new(q.mean().clone(), var_hi).unwrap()],
                0.3,
            )
            .unwrap()
            .value;
            let lo = disentangle_loss(
                &mut table.clone(),
                &[1],
                &[DiagGaussian::new(q.mean().clone(), var_lo).unwrap()],
                0.3,
            )
            .unwrap()
            .value;
            let fd = (hi - lo) / (2.0 * step);
            assert!((fd - g_var[k]).abs() < 1e-6, "var dim {k}: fd {fd} vs {}", g_var[k]);
        }
    }
}
