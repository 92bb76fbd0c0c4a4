//! Meta-training orchestration: per-task replay buffers, rollout collection
//! with a growing context, and the interleaved optimization of encoders,
//! actor, and critics with prior-KL and disentanglement regularization.
//!
//! The per-step gradient routing: encoder parameters receive
//! d(critic loss + β·prior-KL + disentanglement)/dφ summed over the task
//! batch; the actor sees the embedding as a constant; Bellman targets flow
//! no gradient at all. EMA target entries of each sampled task's combo are
//! updated once per step, after the loss against the pre-update targets.

mod replay;
mod run;

pub use replay::ReplayBuffer;
pub use run::{rebuild_split, run, MetricsRow, RunOptions, RunSummary, METRICS_HEADER};

use std::collections::BTreeMap;

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::encoder::{sample_embedding_with_noise, DovEncoderSet};
use crate::envs::{DovSpec, TaskInstance, Transition};
use crate::error::{Error, Result};
use crate::numerics::{
    standard_normal_mat, standard_normal_vec, AdamState, DiagGaussian, MlpGrads, Prng,
};
use crate::rollout::run_episode;
use crate::sac::{actor_loss, compute_targets, critic_loss, ActMode, Actor, CriticPair, SacHyper};
use crate::targets::{disentangle_loss, TargetTable};

/// Every trainable component plus the EMA target table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    pub encoders: DovEncoderSet,
    pub actor: Actor,
    pub critics: CriticPair,
    pub table: TargetTable,
}

impl Model {
    pub fn new(cfg: &ExperimentConfig, spec: &DovSpec, rng: &mut Prng) -> Result<Self> {
        let obs = spec.family.obs_dim();
        let act = spec.family.action_dim();
        let transition_dim = 2 * obs + act + 1;
        let m = cfg.resolved_num_dovs(spec.num_dovs());
        let block = cfg.block_dim(spec.num_dovs());
        let embed = m * block;
        let encoders = DovEncoderSet::new(m, block, transition_dim, &cfg.hidden_sizes, rng)?;
        let actor = Actor::new(obs, act, embed, &cfg.hidden_sizes, rng)?;
        let critics = CriticPair::new(obs, act, embed, &cfg.hidden_sizes, rng)?;
        let table = TargetTable::new(cfg.tau)?;
        Ok(Self {
            encoders,
            actor,
            critics,
            table,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoders.flat_dim()
    }

    /// True when encoder blocks correspond one-to-one with environment DoVs,
    /// which is what makes the target table and composition meaningful.
    pub fn blocks_match_env(&self, spec: &DovSpec) -> bool {
        self.encoders.num_dovs() == spec.num_dovs() && self.encoders.num_dovs() > 0
    }
}

/// Adam state for every component, sized to the model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Optimizers {
    pub encoders: Vec<AdamState>,
    pub actor: AdamState,
    pub q1: AdamState,
    pub q2: AdamState,
}

impl Optimizers {
    pub fn new(model: &Model, hyper: &SacHyper) -> Self {
        let encoders = (0..model.encoders.num_dovs())
            .map(|j| AdamState::new(model.encoders.net(j).num_params(), hyper.lr_encoder))
            .collect();
        Self {
            encoders,
            actor: AdamState::new(model.actor.net().num_params(), hyper.lr_actor),
            q1: AdamState::new(model.critics.q1().num_params(), hyper.lr_critic),
            q2: AdamState::new(model.critics.q2().num_params(), hyper.lr_critic),
        }
    }
}

/// Fixed inputs for one task's loss computation. Noise is passed explicitly
/// so gradient checks and reference comparisons can freeze it.
pub struct TaskLossInput<'a> {
    pub ctx: &'a [Transition],
    pub batch: &'a [Transition],
    /// One standard-normal vector per encoder block.
    pub embed_noise: &'a [Array1<f64>],
    /// (batch, action_dim) noise for the Bellman-target next actions.
    pub target_noise: &'a ndarray::Array2<f64>,
    /// (batch, action_dim) noise for the actor objective.
    pub actor_noise: &'a ndarray::Array2<f64>,
}

/// Loss values plus every gradient needed to apply one optimization step
/// for one task.
pub struct TaskLossOutput {
    pub critic_loss: f64,
    pub actor_loss: f64,
    /// β-scaled prior KL term (the loss component, not the raw divergence).
    pub prior_kl_loss: f64,
    /// λ-scaled disentanglement term.
    pub dis_loss: f64,
    pub posteriors: Vec<DiagGaussian>,
    pub encoder_grads: Vec<MlpGrads>,
    pub actor_grads: MlpGrads,
    pub q1_grads: MlpGrads,
    pub q2_grads: MlpGrads,
}

/// One task's contribution to a training step: infers the posterior from the
/// context, samples the embedding, and computes all four losses and their
/// gradients. `maintain_table` gates the disentanglement term and must be
/// false when encoder blocks do not correspond to environment DoVs.
#[allow(clippy::too_many_arguments)]
pub fn compute_task_losses(
    encoders: &DovEncoderSet,
    actor: &Actor,
    critics: &CriticPair,
    table: &mut TargetTable,
    combo: &[usize],
    input: &TaskLossInput<'_>,
    cfg_lambda: f64,
    cfg_beta: f64,
    hyper: &SacHyper,
    maintain_table: bool,
) -> Result<TaskLossOutput> {
    let m = encoders.num_dovs();
    if input.embed_noise.len() != m {
        return Err(Error::Shape("one embedding noise vector per DoV required".into()));
    }

    // Posterior inference with cached intermediates for the backward pass.
    let mut posteriors = Vec::with_capacity(m);
    let mut caches = Vec::with_capacity(m);
    for j in 0..m {
        let (post, cache) = encoders.posterior_with_cache(j, input.ctx)?;
        posteriors.push(post);
        caches.push(cache);
    }
    let embedding = sample_embedding_with_noise(&posteriors, input.embed_noise)?;
    let z = embedding.flat();

    // Bellman targets carry no gradient; the critic loss routes gradients to
    // the critic parameters and to the embedding.
    let targets_y = compute_targets(critics, actor, input.batch, &z, hyper, input.target_noise)?;
    let crit = critic_loss(critics, input.batch, &z, &targets_y)?;

    let act = actor_loss(
        actor,
        critics,
        input.batch,
        &z,
        hyper.entropy_coef,
        input.actor_noise,
    )?;

    let prior_kl_raw = crate::encoder::prior_kl(&posteriors)?;

    let dis = if maintain_table {
        disentangle_loss(table, combo, &posteriors, cfg_lambda)?
    } else {
        crate::targets::DisLoss {
            value: 0.0,
            grads: vec![None; m],
        }
    };

    // Chain all posterior-side gradients back into each encoder.
    let mut encoder_grads = Vec::with_capacity(m);
    for j in 0..m {
        let extra = match &dis.grads[j] {
            Some((d_mean, d_var)) => {
                let (pk_mean, pk_var) = crate::encoder::prior_kl_grads(&posteriors[j]);
                Some((
                    cfg_beta * &pk_mean + d_mean,
                    cfg_beta * &pk_var + d_var,
                ))
            }
            None => {
                let (pk_mean, pk_var) = crate::encoder::prior_kl_grads(&posteriors[j]);
                Some((cfg_beta * pk_mean, cfg_beta * pk_var))
            }
        };
        encoder_grads.push(chain_embedding_grad(
            encoders,
            j,
            &caches[j],
            &posteriors[j],
            &input.embed_noise[j],
            &crit.embed_grad,
            extra.as_ref().map(|(a, b)| (a, b)),
        )?);
    }

    Ok(TaskLossOutput {
        critic_loss: crit.loss,
        actor_loss: act.loss,
        prior_kl_loss: cfg_beta * prior_kl_raw,
        dis_loss: dis.value,
        posteriors,
        encoder_grads,
        actor_grads: act.actor_grads,
        q1_grads: crit.q1_grads,
        q2_grads: crit.q2_grads,
    })
}

/// Pushes a gradient on the flat embedding back into encoder `j`'s
/// parameters through the reparameterized sample z = μ + sqrt(v)·ε, adding
/// optional extra (dL/dμ, dL/dv) contributions (prior KL, disentanglement).
#[allow(clippy::too_many_arguments)]
pub fn chain_embedding_grad(
    encoders: &DovEncoderSet,
    j: usize,
    cache: &crate::encoder::PosteriorCache,
    posterior: &DiagGaussian,
    noise: &Array1<f64>,
    flat_embed_grad: &Array1<f64>,
    extra: Option<(&Array1<f64>, &Array1<f64>)>,
) -> Result<MlpGrads> {
    let block = encoders.block_dim();
    let gz = flat_embed_grad.slice(s![j * block..(j + 1) * block]);
    let mut g_mean = gz.to_owned();
    let mut g_var = Array1::from_shape_fn(block, |k| {
        gz[k] * noise[k] / (2.0 * posterior.var()[k].sqrt())
    });
    if let Some((e_mean, e_var)) = extra {
        g_mean += e_mean;
        g_var += e_var;
    }
    encoders.posterior_backward(j, cache, &g_mean, &g_var)
}

/// Collects `episodes` rollouts on one task, PEARL-style: the first episode
/// acts under a prior-sampled embedding, later episodes under an embedding
/// sampled from the posterior of a context drawn from the buffer's recent
/// window. Returns the mean episode return.
pub fn collect_rollouts(
    model: &Model,
    task: &TaskInstance,
    buffer: &mut ReplayBuffer,
    episodes: usize,
    context_size: usize,
    rng: &mut Prng,
) -> Result<f64> {
    let mut ctx: Vec<Transition> = Vec::new();
    let mut total = 0.0;
    for _ in 0..episodes {
        let (embedding, _) = model.encoders.sample_task_embedding(&ctx, rng)?;
        let z = embedding.flat();
        total += run_episode(task, &model.actor, &z, ActMode::Stochastic, rng, |t| {
            buffer.push(t)
        })?;
        ctx = buffer.sample_recent(context_size, task.horizon(), rng)?;
    }
    Ok(total / episodes as f64)
}

/// Mean loss components over the tasks that actually trained this step.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub prior_kl_loss: f64,
    pub dis_loss: f64,
    pub tasks_used: usize,
}

/// One meta-training gradient step over a batch of training tasks.
pub fn train_step(
    model: &mut Model,
    opts: &mut Optimizers,
    buffers: &mut BTreeMap<usize, ReplayBuffer>,
    train_tasks: &[TaskInstance],
    cfg: &ExperimentConfig,
    maintain_table: bool,
    rng: &mut Prng,
) -> Result<StepStats> {
    let hyper = cfg.sac_hyper();
    let n_select = cfg.tasks_per_step(train_tasks.len());
    let selected: Vec<&TaskInstance> = if n_select >= train_tasks.len() {
        train_tasks.iter().collect()
    } else {
        let mut idx = rand::seq::index::sample(rng, train_tasks.len(), n_select).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| &train_tasks[i]).collect()
    };

    let m = model.encoders.num_dovs();
    let a_dim = model.actor.action_dim();
    let block = model.encoders.block_dim();

    let mut enc_acc: Vec<MlpGrads> = (0..m)
        .map(|j| MlpGrads::zeros_like(model.encoders.net(j)))
        .collect();
    let mut actor_acc = MlpGrads::zeros_like(model.actor.net());
    let mut q1_acc = MlpGrads::zeros_like(model.critics.q1());
    let mut q2_acc = MlpGrads::zeros_like(model.critics.q2());
    let mut stats = StepStats::default();

    for task in selected {
        let buffer = buffers
            .get_mut(&task.id)
            .ok_or_else(|| Error::Config(format!("no buffer for task {}", task.id)))?;
        if buffer.len() < cfg.batch_size {
            log::warn!(
                "skipping task {}: buffer holds {} < batch size {}",
                task.id,
                buffer.len(),
                cfg.batch_size
            );
            continue;
        }
        let ctx = buffer.sample_recent(cfg.context_size, task.horizon(), rng)?;
        let batch = buffer.sample(cfg.batch_size, rng)?;
        let embed_noise: Vec<Array1<f64>> =
            (0..m).map(|_| standard_normal_vec(rng, block)).collect();
        let target_noise = standard_normal_mat(rng, cfg.batch_size, a_dim);
        let actor_noise = standard_normal_mat(rng, cfg.batch_size, a_dim);

        let input = TaskLossInput {
            ctx: &ctx,
            batch: &batch,
            embed_noise: &embed_noise,
            target_noise: &target_noise,
            actor_noise: &actor_noise,
        };
        let out = compute_task_losses(
            &model.encoders,
            &model.actor,
            &model.critics,
            &mut model.table,
            &task.combo,
            &input,
            cfg.lambda,
            cfg.beta,
            &hyper,
            maintain_table,
        )?;

        // EMA maintenance for exactly this task's combo, after the loss
        // against the pre-update targets.
        if maintain_table {
            for (j, post) in out.posteriors.iter().enumerate() {
                model.table.ema_update(j, task.combo[j], post);
            }
        }

        for (acc, g) in enc_acc.iter_mut().zip(&out.encoder_grads) {
            acc.add_assign(g);
        }
        actor_acc.add_assign(&out.actor_grads);
        q1_acc.add_assign(&out.q1_grads);
        q2_acc.add_assign(&out.q2_grads);
        stats.actor_loss += out.actor_loss;
        stats.critic_loss += out.critic_loss;
        stats.prior_kl_loss += out.prior_kl_loss;
        stats.dis_loss += out.dis_loss;
        stats.tasks_used += 1;
    }

    if stats.tasks_used == 0 {
        return Ok(stats);
    }
    let inv = 1.0 / stats.tasks_used as f64;
    stats.actor_loss *= inv;
    stats.critic_loss *= inv;
    stats.prior_kl_loss *= inv;
    stats.dis_loss *= inv;

    for j in 0..m {
        enc_acc[j].scale(inv);
        let mut params = model.encoders.net(j).params_flat();
        opts.encoders[j].step(&mut params, &enc_acc[j].flat())?;
        model.encoders.net_mut(j).set_params_flat(&params)?;
    }
    actor_acc.scale(inv);
    let mut params = model.actor.net().params_flat();
    opts.actor.step(&mut params, &actor_acc.flat())?;
    model.actor.net_mut().set_params_flat(&params)?;

    q1_acc.scale(inv);
    let mut params = model.critics.q1().params_flat();
    opts.q1.step(&mut params, &q1_acc.flat())?;
    model.critics.q1_mut().set_params_flat(&params)?;

    q2_acc.scale(inv);
    let mut params = model.critics.q2().params_flat();
    opts.q2.step(&mut params, &q2_acc.flat())?;
    model.critics.q2_mut().set_params_flat(&params)?;

    model.critics.soft_update(cfg.rho)?;
    Ok(stats)
}

/// Gradient step for the embedding-free SAC baseline on a shared buffer.
pub fn train_step_sac(
    model: &mut Model,
    opts: &mut Optimizers,
    buffer: &ReplayBuffer,
    cfg: &ExperimentConfig,
    rng: &mut Prng,
) -> Result<StepStats> {
    let hyper = cfg.sac_hyper();
    let mut stats = StepStats::default();
    if buffer.len() < cfg.batch_size {
        log::warn!(
            "skipping SAC step: buffer holds {} < batch size {}",
            buffer.len(),
            cfg.batch_size
        );
        return Ok(stats);
    }
    let batch = buffer.sample(cfg.batch_size, rng)?;
    let a_dim = model.actor.action_dim();
    let target_noise = standard_normal_mat(rng, cfg.batch_size, a_dim);
    let actor_noise = standard_normal_mat(rng, cfg.batch_size, a_dim);
    let z = Array1::zeros(0);

    let ys = compute_targets(&model.critics, &model.actor, &batch, &z, &hyper, &target_noise)?;
    let crit = critic_loss(&model.critics, &batch, &z, &ys)?;
    let act = actor_loss(
        &model.actor,
        &model.critics,
        &batch,
        &z,
        hyper.entropy_coef,
        &actor_noise,
    )?;

    let mut params = model.critics.q1().params_flat();
    opts.q1.step(&mut params, &crit.q1_grads.flat())?;
    model.critics.q1_mut().set_params_flat(&params)?;
    let mut params = model.critics.q2().params_flat();
    opts.q2.step(&mut params, &crit.q2_grads.flat())?;
    model.critics.q2_mut().set_params_flat(&params)?;
    let mut params = model.actor.net().params_flat();
    opts.actor.step(&mut params, &act.actor_grads.flat())?;
    model.actor.net_mut().set_params_flat(&params)?;
    model.critics.soft_update(cfg.rho)?;

    stats.actor_loss = act.loss;
    stats.critic_loss = crit.loss;
    stats.tasks_used = 1;
    Ok(stats)
}
