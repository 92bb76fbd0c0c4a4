//! Soft actor-critic conditioned on the task embedding: squashed-Gaussian
//! actor, twin critics with target copies, and the batched loss/gradient
//! computations. Gradient routing is explicit:
//!
//! - `critic_loss` returns gradients for the critic parameters and for the
//!   embedding input, so the encoders train through the critic objective.
//! - `actor_loss` treats the embedding as a constant and returns gradients
//!   for the actor parameters only.
//! - Bellman targets are computed against the target critics with no
//!   gradient path at all.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::{standard_normal_vec, Mlp, MlpGrads, Prng};

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Additive fudge inside the tanh log-density correction.
const SQUASH_EPS: f64 = 1e-6;
const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Hyperparameters of the actor-critic backbone. The three learning rates
/// drive the encoder, actor, and critic optimizers respectively.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SacHyper {
    pub gamma: f64,
    pub rho: f64,
    pub entropy_coef: f64,
    pub batch_size: usize,
    pub lr_encoder: f64,
    pub lr_actor: f64,
    pub lr_critic: f64,
}

impl SacHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) && self.gamma != 0.0 {
            return Err(Error::Config(format!(
                "gamma must be in [0,1), got {}",
                self.gamma
            )));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return Err(Error::Config(format!("rho must be in (0,1], got {}", self.rho)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Squashed-Gaussian policy: an MLP maps (state ⊕ embedding) to per-dimension
/// action mean and log-std; samples are tanh-squashed into the unit box.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Actor {
    net: Mlp,
    state_dim: usize,
    action_dim: usize,
    embed_dim: usize,
}

impl Actor {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut Prng,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * action_dim);
        Ok(Self {
            net: Mlp::new(&sizes, rng)?,
            state_dim,
            action_dim,
            embed_dim,
        })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn check_embed(&self, embedding: &Array1<f64>) -> Result<()> {
        if embedding.len() != self.embed_dim {
            return Err(Error::Shape(format!(
                "actor expects embedding dim {}, got {}",
                self.embed_dim,
                embedding.len()
            )));
        }
        Ok(())
    }

    /// One action. Deterministic mode squashes the mean; stochastic mode
    /// squashes a reparameterized sample. Always inside the unit box.
    pub fn act(
        &self,
        state: &Array1<f64>,
        embedding: &Array1<f64>,
        mode: ActMode,
        rng: &mut Prng,
    ) -> Result<Array1<f64>> {
        if state.len() != self.state_dim {
            return Err(Error::Shape(format!(
                "actor expects state dim {}, got {}",
                self.state_dim,
                state.len()
            )));
        }
        self.check_embed(embedding)?;
        let input = crate::numerics::concat_vecs(&[state, embedding]);
        let out = self.net.forward(&input)?;
        let a = self.action_dim;
        let action = match mode {
            ActMode::Deterministic => (0..a).map(|k| out[k].tanh()).collect::<Vec<_>>(),
            ActMode::Stochastic => {
                let noise = standard_normal_vec(rng, a);
                (0..a)
                    .map(|k| {
                        let sigma = out[a + k].clamp(LOG_STD_MIN, LOG_STD_MAX).exp();
                        (out[k] + sigma * noise[k]).tanh()
                    })
                    .collect()
            }
        };
        Ok(Array1::from_vec(action))
    }
}

/// Twin critics plus frozen target copies maintained by soft updates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CriticPair {
    q1: Mlp,
    q2: Mlp,
    target1: Mlp,
    target2: Mlp,
    state_dim: usize,
    action_dim: usize,
    embed_dim: usize,
}

impl CriticPair {
    pub fn new(
        state_dim: usize,
        action_dim: usize,
        embed_dim: usize,
        hidden: &[usize],
        rng: &mut Prng,
    ) -> Result<Self> {
        let mut sizes = vec![state_dim + action_dim + embed_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let q1 = Mlp::new(&sizes, rng)?;
        let q2 = Mlp::new(&sizes, rng)?;
        let target1 = q1.clone();
        let target2 = q2.clone();
        Ok(Self {
            q1,
            q2,
            target1,
            target2,
            state_dim,
            action_dim,
            embed_dim,
        })
    }

    pub fn q1(&self) -> &Mlp {
        &self.q1
    }

    pub fn q2(&self) -> &Mlp {
        &self.q2
    }

    pub fn q1_mut(&mut self) -> &mut Mlp {
        &mut self.q1
    }

    pub fn q2_mut(&mut self) -> &mut Mlp {
        &mut self.q2
    }

    pub fn targets(&self) -> (&Mlp, &Mlp) {
        (&self.target1, &self.target2)
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// target ← (1-ρ)·target + ρ·main, elementwise over all parameters.
    pub fn soft_update(&mut self, rho: f64) -> Result<()> {
        self.target1.blend_from(&self.q1, rho)?;
        self.target2.blend_from(&self.q2, rho)?;
        Ok(())
    }

    /// min(Q1, Q2) of the main critics for a single (s, a, z).
    pub fn q_min(
        &self,
        state: &Array1<f64>,
        action: &Array1<f64>,
        embedding: &Array1<f64>,
    ) -> Result<f64> {
        let input = crate::numerics::concat_vecs(&[state, action, embedding]);
        let v1 = self.q1.forward(&input)?[0];
        let v2 = self.q2.forward(&input)?[0];
        Ok(v1.min(v2))
    }
}

/// Per-dimension log-density of a tanh-squashed Gaussian sample, evaluated
/// at pre-squash value `u` with parameters (mean, sigma):
/// log N(u; mean, σ²) − ln(1 − tanh(u)² + ε), summed over dimensions.
pub fn squashed_log_prob(u: &Array1<f64>, mean: &Array1<f64>, sigma: &Array1<f64>) -> f64 {
    let mut acc = 0.0;
    for k in 0..u.len() {
        let z = (u[k] - mean[k]) / sigma[k];
        let t = u[k].tanh();
        acc += -0.5 * LN_2PI - sigma[k].ln() - 0.5 * z * z - (1.0 - t * t + SQUASH_EPS).ln();
    }
    acc
}

fn stack_rows(batch: &[Transition], pick_next: bool, extra: &[&Array1<f64>]) -> Array2<f64> {
    let state_dim = if pick_next {
        batch[0].next_state.len()
    } else {
        batch[0].state.len()
    };
    let extra_dim: usize = extra.iter().map(|e| e.len()).sum();
    let mut m = Array2::zeros((batch.len(), state_dim + extra_dim));
    for (i, tr) in batch.iter().enumerate() {
        let s_part = if pick_next { &tr.next_state } else { &tr.state };
        m.slice_mut(s![i, ..state_dim]).assign(s_part);
        let mut at = state_dim;
        for e in extra {
            m.slice_mut(s![i, at..at + e.len()]).assign(e);
            at += e.len();
        }
    }
    m
}

fn critic_inputs(batch: &[Transition], actions: &Array2<f64>, z: &Array1<f64>, next: bool) -> Array2<f64> {
    let s_dim = if next {
        batch[0].next_state.len()
    } else {
        batch[0].state.len()
    };
    let a_dim = actions.ncols();
    let mut m = Array2::zeros((batch.len(), s_dim + a_dim + z.len()));
    for (i, tr) in batch.iter().enumerate() {
        let s_part = if next { &tr.next_state } else { &tr.state };
        m.slice_mut(s![i, ..s_dim]).assign(s_part);
        m.slice_mut(s![i, s_dim..s_dim + a_dim]).assign(&actions.row(i));
        m.slice_mut(s![i, s_dim + a_dim..]).assign(z);
    }
    m
}

fn actor_heads(
    actor: &Actor,
    out: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let a = actor.action_dim;
    let mean = out.slice(s![.., ..a]).to_owned();
    let log_std = out.slice(s![.., a..]);
    let sigma = log_std.mapv(|ls| ls.clamp(LOG_STD_MIN, LOG_STD_MAX).exp());
    let clamp_open = log_std.mapv(|ls| {
        if ls > LOG_STD_MIN && ls < LOG_STD_MAX {
            1.0
        } else {
            0.0
        }
    });
    (mean, sigma, clamp_open)
}

/// Bellman regression targets, computed without any gradient path:
/// y = r + γ·(min target-Q(s', a', z) − α·log π(a'|s', z)), with a' a
/// reparameterized sample from the actor given `next_noise`.
pub fn compute_targets(
    critics: &CriticPair,
    actor: &Actor,
    batch: &[Transition],
    embedding: &Array1<f64>,
    hyper: &SacHyper,
    next_noise: &Array2<f64>,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty RL batch".into()));
    }
    let b = batch.len();
    let a_dim = actor.action_dim;
    if next_noise.nrows() != b || next_noise.ncols() != a_dim {
        return Err(Error::Shape("target noise must be (batch, action_dim)".into()));
    }
    let actor_in = stack_rows(batch, true, &[embedding]);
    let out = actor.net.forward_batch(&actor_in)?;
    let (mean, sigma, _) = actor_heads(actor, &out);
    let u = &mean + &(&sigma * next_noise);
    let next_actions = u.mapv(f64::tanh);

    let critic_in = critic_inputs(batch, &next_actions, embedding, true);
    let t1 = critics.target1.forward_batch(&critic_in)?;
    let t2 = critics.target2.forward_batch(&critic_in)?;

    let mut ys = Vec::with_capacity(b);
    for i in 0..b {
        let lp = squashed_log_prob(
            &u.row(i).to_owned(),
            &mean.row(i).to_owned(),
            &sigma.row(i).to_owned(),
        );
        let qmin = t1[[i, 0]].min(t2[[i, 0]]);
        ys.push(batch[i].reward + hyper.gamma * (qmin - hyper.entropy_coef * lp));
    }
    Ok(ys)
}

#[derive(Debug)]
pub struct CriticLossOut {
    pub loss: f64,
    pub q1_grads: MlpGrads,
    pub q2_grads: MlpGrads,
    /// dL/d(embedding): the path through which encoders learn.
    pub embed_grad: Array1<f64>,
}

/// Squared Bellman residual of both critics against fixed targets:
/// (1/B) Σ_b [(Q1 - y)² + (Q2 - y)²]. Gradients flow to critic parameters
/// and to the embedding input.
pub fn critic_loss(
    critics: &CriticPair,
    batch: &[Transition],
    embedding: &Array1<f64>,
    targets: &[f64],
) -> Result<CriticLossOut> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty RL batch".into()));
    }
    if targets.len() != batch.len() {
        return Err(Error::Shape("one target per batch row required".into()));
    }
    let b = batch.len();
    let z_dim = embedding.len();
    let s_dim = batch[0].state.len();
    let a_dim = batch[0].action.len();

    let mut actions = Array2::zeros((b, a_dim));
    for (i, tr) in batch.iter().enumerate() {
        actions.row_mut(i).assign(&tr.action);
    }
    let input = critic_inputs(batch, &actions, embedding, false);

    let (q1, c1) = critics.q1.forward_batch_cached(&input)?;
    let (q2, c2) = critics.q2.forward_batch_cached(&input)?;

    let mut loss = 0.0;
    let mut g1 = Array2::zeros((b, 1));
    let mut g2 = Array2::zeros((b, 1));
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let r1 = q1[[i, 0]] - targets[i];
        let r2 = q2[[i, 0]] - targets[i];
        loss += (r1 * r1 + r2 * r2) * inv_b;
        g1[[i, 0]] = 2.0 * r1 * inv_b;
        g2[[i, 0]] = 2.0 * r2 * inv_b;
    }

    let (q1_grads, in1) = critics.q1.backward_batch(&c1, &g1)?;
    let (q2_grads, in2) = critics.q2.backward_batch(&c2, &g2)?;
    let mut embed_grad = Array1::zeros(z_dim);
    let z_at = s_dim + a_dim;
    for i in 0..b {
        for k in 0..z_dim {
            embed_grad[k] += in1[[i, z_at + k]] + in2[[i, z_at + k]];
        }
    }
    Ok(CriticLossOut {
        loss,
        q1_grads,
        q2_grads,
        embed_grad,
    })
}

#[derive(Debug)]
pub struct ActorLossOut {
    pub loss: f64,
    pub actor_grads: MlpGrads,
}

/// SAC policy objective with the embedding treated as a constant input:
/// (1/B) Σ_b [α·log π(ã|s, z) − min Q(s, ã, z)] with ã reparameterized via
/// `action_noise` and α = `entropy_coef`. Gradients flow to the actor
/// parameters only.
pub fn actor_loss(
    actor: &Actor,
    critics: &CriticPair,
    batch: &[Transition],
    embedding: &Array1<f64>,
    entropy_coef: f64,
    action_noise: &Array2<f64>,
) -> Result<ActorLossOut> {
    if batch.is_empty() {
        return Err(Error::InsufficientData("empty RL batch".into()));
    }
    let b = batch.len();
    let a_dim = actor.action_dim;
    if action_noise.nrows() != b || action_noise.ncols() != a_dim {
        return Err(Error::Shape("action noise must be (batch, action_dim)".into()));
    }
    let s_dim = batch[0].state.len();

    let actor_in = stack_rows(batch, false, &[embedding]);
    let (out, actor_cache) = actor.net.forward_batch_cached(&actor_in)?;
    let (mean, sigma, clamp_open) = actor_heads(actor, &out);
    let u = &mean + &(&sigma * action_noise);
    let t = u.mapv(f64::tanh);

    let critic_in = critic_inputs(batch, &t, embedding, false);
    let (q1, c1) = critics.q1.forward_batch_cached(&critic_in)?;
    let (q2, c2) = critics.q2.forward_batch_cached(&critic_in)?;

    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut gq1 = Array2::zeros((b, 1));
    let mut gq2 = Array2::zeros((b, 1));
    for i in 0..b {
        let lp = squashed_log_prob(
            &u.row(i).to_owned(),
            &mean.row(i).to_owned(),
            &sigma.row(i).to_owned(),
        );
        let (v1, v2) = (q1[[i, 0]], q2[[i, 0]]);
        let qmin = v1.min(v2);
        loss += (entropy_coef * lp - qmin) * inv_b;
        if v1 <= v2 {
            gq1[[i, 0]] = -inv_b;
        } else {
            gq2[[i, 0]] = -inv_b;
        }
    }

    // Input gradients of the chosen critic, at the action slice.
    let (_, in1) = critics.q1.backward_batch(&c1, &gq1)?;
    let (_, in2) = critics.q2.backward_batch(&c2, &gq2)?;
    let mut g_a = Array2::zeros((b, a_dim));
    for i in 0..b {
        for k in 0..a_dim {
            g_a[[i, k]] = in1[[i, s_dim + k]] + in2[[i, s_dim + k]];
        }
    }

    // Chain through the squashed-Gaussian reparameterization. With
    // u = mean + σ·ε (ε constant) the Gaussian part of log π reduces to
    // -ln σ - ε²/2, so only the tanh correction depends on u:
    //   dlp/du = 2T(1-T²)/D,  dlp/dσ|explicit = -1/σ,  da/du = 1-T².
    let mut head_grad = Array2::zeros((b, 2 * a_dim));
    for i in 0..b {
        for k in 0..a_dim {
            let tt = t[[i, k]];
            let one_minus_t2 = 1.0 - tt * tt;
            let d = one_minus_t2 + SQUASH_EPS;
            let g_u = entropy_coef * inv_b * (2.0 * tt * one_minus_t2 / d)
                + g_a[[i, k]] * one_minus_t2;
            let g_sigma = g_u * action_noise[[i, k]] - entropy_coef * inv_b / sigma[[i, k]];
            head_grad[[i, k]] = g_u;
            head_grad[[i, a_dim + k]] = g_sigma * sigma[[i, k]] * clamp_open[[i, k]];
        }
    }
    let (actor_grads, _) = actor.net.backward_batch(&actor_cache, &head_grad)?;
    Ok(ActorLossOut { loss, actor_grads })
}
