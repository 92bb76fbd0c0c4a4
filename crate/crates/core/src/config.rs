//! Experiment configuration. One struct carries every free hyperparameter;
//! it is echoed verbatim into each output directory so runs are
//! reproducible from their artifacts alone. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::envs::{DovSpec, Family};
use crate::error::{Error, Result};
use crate::sac::SacHyper;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub family: Family,
    /// Goal label count; the family default when absent.
    pub n_goals: Option<usize>,
    pub n_physics: usize,
    /// Std-dev of reset position noise (PointGoal only).
    pub reset_noise: f64,
    /// Physics label index excluded from training entirely; its tasks all
    /// become test tasks with an unseen label (the S2 protocol).
    pub holdout_physics: Option<usize>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            family: Family::LineVel,
            n_goals: None,
            n_physics: 5,
            reset_noise: 0.0,
            holdout_physics: None,
        }
    }
}

impl EnvConfig {
    pub fn n_goals(&self) -> usize {
        self.n_goals.unwrap_or(self.family.default_goal_count())
    }

    pub fn dov_spec(&self) -> DovSpec {
        let mut spec = match self.family {
            Family::PointGoal => DovSpec::point_goal(self.n_goals(), self.n_physics),
            Family::LineVel => DovSpec::line_vel(self.n_goals(), self.n_physics),
        };
        spec.reset_noise = self.reset_noise;
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub seed: u64,
    /// Probability of assigning a task to the training split.
    pub alpha: f64,

    /// Number of per-DoV encoders. `None` means one per environment DoV
    /// (the disentangled model). `Some(1)` is the single-encoder baseline
    /// (total latent width preserved); `Some(0)` disables task inference.
    pub num_dovs: Option<usize>,
    /// Train an embedding-free policy on a shared buffer, sampling a random
    /// training task each episode.
    pub sac_baseline: bool,
    /// Latent dimensions per DoV block.
    pub latent_dim: usize,

    /// Disentanglement loss weight.
    pub lambda: f64,
    /// EMA decay of the target table. 0 disables the moving average.
    pub tau: f64,
    /// Prior-KL weight.
    pub beta: f64,

    pub gamma: f64,
    /// Soft-update rate for target critics.
    pub rho: f64,
    pub entropy_coef: f64,
    pub lr_encoder: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub batch_size: usize,
    /// Transitions per inference context (N).
    pub context_size: usize,
    pub hidden_sizes: Vec<usize>,

    pub iterations: usize,
    pub steps_per_iteration: usize,
    /// Rollouts per task per iteration (K).
    pub rollouts_per_task: usize,
    /// Rollouts per task collected before the first iteration so batches
    /// are full from step one.
    pub init_rollouts_per_task: usize,
    pub buffer_capacity: usize,
    /// Training tasks sampled per gradient step. `None`: all tasks when
    /// there are at most 40, otherwise 16.
    pub tasks_per_step: Option<usize>,

    /// Episodes per task in evaluation reports (E).
    pub eval_episodes: usize,
    /// Episodes per task for the per-iteration metric columns.
    pub progress_eval_episodes: usize,
    /// Probe trajectories aggregated into the context for meta-test reports.
    pub metatest_probe_episodes: usize,
    /// Probe trajectories for the per-iteration meta-test column.
    pub progress_probe_episodes: usize,
    /// Probe episodes on the single probe task of the S2 protocol.
    pub s2_rollout_budget: usize,

    /// Sample composed blocks from the target Gaussians instead of taking
    /// their means.
    pub sample_composed_embeddings: bool,
    /// Sample the prior-baseline embedding from N(0, I) per task instead of
    /// using the prior mean.
    pub sample_prior_embedding: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            env: EnvConfig::default(),
            seed: 0,
            alpha: 0.5,
            num_dovs: None,
            sac_baseline: false,
            latent_dim: 5,
            lambda: 0.1,
            tau: 0.99,
            beta: 0.1,
            gamma: 0.95,
            rho: 0.05,
            entropy_coef: 0.05,
            lr_encoder: 1e-3,
            lr_actor: 1e-3,
            lr_critic: 1e-3,
            batch_size: 128,
            context_size: 32,
            hidden_sizes: vec![32, 32],
            iterations: 40,
            steps_per_iteration: 300,
            rollouts_per_task: 2,
            init_rollouts_per_task: 4,
            buffer_capacity: 20_000,
            tasks_per_step: Some(4),
            eval_episodes: 10,
            progress_eval_episodes: 1,
            metatest_probe_episodes: 8,
            progress_probe_episodes: 2,
            s2_rollout_budget: 2,
            sample_composed_embeddings: false,
            sample_prior_embedding: false,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    /// Encoder count after resolving defaults and the SAC-baseline override.
    pub fn resolved_num_dovs(&self, env_dovs: usize) -> usize {
        if self.sac_baseline {
            return 0;
        }
        self.num_dovs.unwrap_or(env_dovs)
    }

    /// Latent dimensions per encoder block. The single-encoder baseline gets
    /// the full width so the policy interface is unchanged.
    pub fn block_dim(&self, env_dovs: usize) -> usize {
        match self.resolved_num_dovs(env_dovs) {
            0 => 0,
            m => self.latent_dim * env_dovs / m,
        }
    }

    /// Flat embedding width seen by the actor and critics.
    pub fn embed_dim(&self, env_dovs: usize) -> usize {
        self.resolved_num_dovs(env_dovs) * self.block_dim(env_dovs)
    }

    pub fn sac_hyper(&self) -> SacHyper {
        SacHyper {
            gamma: self.gamma,
            rho: self.rho,
            entropy_coef: self.entropy_coef,
            batch_size: self.batch_size,
            lr_encoder: self.lr_encoder,
            lr_actor: self.lr_actor,
            lr_critic: self.lr_critic,
        }
    }

    pub fn tasks_per_step(&self, n_train: usize) -> usize {
        match self.tasks_per_step {
            Some(k) => k.min(n_train).max(1),
            None => {
                if n_train <= 40 {
                    n_train
                } else {
                    16
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!(
                "alpha must be in (0,1), got {}",
                self.alpha
            )));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must be in [0,1), got {}", self.tau)));
        }
        if self.lambda < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("lambda and beta must be nonnegative".into()));
        }
        self.sac_hyper().validate()?;
        let env_dovs = 2; // both built-in families have (goal, physics)
        let m = self.resolved_num_dovs(env_dovs);
        if m != 0 && m != 1 && m != env_dovs {
            return Err(Error::Config(format!(
                "num_dovs must be 0, 1, or {env_dovs}, got {m}"
            )));
        }
        if m != env_dovs && self.lambda > 0.0 && !self.sac_baseline {
            return Err(Error::Config(
                "disentanglement (lambda > 0) requires one encoder per environment DoV".into(),
            ));
        }
        if m != 0 && self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be positive".into()));
        }
        if self.env.n_physics == 0 || self.env.n_goals() == 0 {
            return Err(Error::Config("label counts must be positive".into()));
        }
        if let Some(h) = self.env.holdout_physics {
            if h >= self.env.n_physics {
                return Err(Error::Config(format!(
                    "holdout_physics {h} out of range (n_physics {})",
                    self.env.n_physics
                )));
            }
            if self.env.n_physics < 2 {
                return Err(Error::Config(
                    "holdout requires at least two physics labels".into(),
                ));
            }
        }
        if self.iterations == 0
            || self.steps_per_iteration == 0
            || self.rollouts_per_task == 0
            || self.init_rollouts_per_task == 0
            || self.context_size == 0
            || self.buffer_capacity == 0
            || self.eval_episodes == 0
            || self.progress_eval_episodes == 0
            || self.s2_rollout_budget == 0
        {
            return Err(Error::Config(
                "iteration, rollout, context, buffer, and episode counts must be positive".into(),
            ));
        }
        if self.hidden_sizes.is_empty() || self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden_sizes must be nonempty and positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_validates() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"not_a_key": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 9, "lambda": 0.2}"#).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lambda, 0.2);
        assert_eq!(cfg.alpha, 0.5);
    }

    #[test]
    fn pearl_mode_resolves_single_wide_encoder() {
        let mut cfg = ExperimentConfig {
            num_dovs: Some(1),
            lambda: 0.0,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.resolved_num_dovs(2), 1);
        assert_eq!(cfg.block_dim(2), 10);
        assert_eq!(cfg.embed_dim(2), 10);

        cfg.lambda = 0.1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sac_baseline_has_zero_embedding() {
        let cfg = ExperimentConfig {
            sac_baseline: true,
            ..Default::default()
        };
        cfg.validate().unwrap();
        assert_eq!(cfg.embed_dim(2), 0);
    }

    #[test]
    fn bad_ranges_are_rejected() {
        for patch in [
            r#"{"alpha": 0.0}"#,
            r#"{"alpha": 1.0}"#,
            r#"{"tau": 1.0}"#,
            r#"{"gamma": 1.5}"#,
            r#"{"iterations": 0}"#,
            r#"{"hidden_sizes": []}"#,
            r#"{"env": {"holdout_physics": 9}}"#,
        ] {
            let cfg: ExperimentConfig = serde_json::from_str(patch).unwrap();
            assert!(cfg.validate().is_err(), "{patch} should fail");
        }
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
