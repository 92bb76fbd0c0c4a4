//! Per-DoV context encoders. Each encoder maps one flattened transition
//! (s ⊕ a ⊕ s' ⊕ r) to a Gaussian factor (mean, log-variance); the posterior
//! over a latent block is the precision-weighted product of all factors with
//! a unit N(0, I) prior factor included, so an empty context yields exactly
//! the prior. The concatenation of one sampled block per DoV is the task
//! embedding that conditions the policy and critics.

use ndarray::{s, Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::envs::Transition;
use crate::error::{Error, Result};
use crate::numerics::{
    kl_diag, standard_normal_vec, DiagGaussian, Mlp, MlpBatchCache, MlpGrads, Prng,
};

/// Factor log-variances are clamped to this range before exponentiation to
/// keep every downstream KL finite.
pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 6.0;

/// Concatenation of M per-DoV latent blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEmbedding {
    blocks: Vec<Array1<f64>>,
}

impl TaskEmbedding {
    pub fn from_blocks(blocks: Vec<Array1<f64>>) -> Self {
        Self { blocks }
    }

    pub fn blocks(&self) -> &[Array1<f64>] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Flat view: blocks concatenated in DoV order.
    pub fn flat(&self) -> Array1<f64> {
        let refs: Vec<&Array1<f64>> = self.blocks.iter().collect();
        crate::numerics::concat_vecs(&refs)
    }

    pub fn flat_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.len()).sum()
    }
}

/// Intermediates for one posterior computation, kept so gradients on the
/// posterior (mean, var) can be pushed back into the encoder parameters.
#[derive(Debug, Clone)]
pub struct PosteriorCache {
    mlp_cache: MlpBatchCache,
    /// (N, d) factor means.
    factor_mean: Array2<f64>,
    /// (N, d) factor variances after clamp+exp.
    factor_var: Array2<f64>,
    /// 1.0 where the log-variance clamp is inactive (gradient flows).
    clamp_open: Array2<f64>,
    post_mean: Array1<f64>,
    post_var: Array1<f64>,
}

/// The M per-DoV context encoders. With M = 0 (embedding-free baseline) all
/// operations degenerate gracefully: empty posteriors, zero-length embedding.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DovEncoderSet {
    nets: Vec<Mlp>,
    block_dim: usize,
    transition_dim: usize,
}

/// Flattens a transition into the common encoder input layout.
pub fn transition_features(t: &Transition) -> Array1<f64> {
    let reward = ndarray::array![t.reward];
    crate::numerics::concat_vecs(&[&t.state, &t.action, &t.next_state, &reward])
}

impl DovEncoderSet {
    /// `transition_dim` = 2·obs_dim + action_dim + 1.
    pub fn new(
        num_dovs: usize,
        block_dim: usize,
        transition_dim: usize,
        hidden: &[usize],
        rng: &mut Prng,
    ) -> Result<Self> {
        if num_dovs > 0 && block_dim == 0 {
            return Err(Error::Config("encoder block dimension must be positive".into()));
        }
        let mut sizes = vec![transition_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * block_dim);
        let nets = (0..num_dovs)
            .map(|_| Mlp::new(&sizes, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            nets,
            block_dim,
            transition_dim,
        })
    }

    pub fn num_dovs(&self) -> usize {
        self.nets.len()
    }

    pub fn block_dim(&self) -> usize {
        self.block_dim
    }

    pub fn flat_dim(&self) -> usize {
        self.nets.len() * self.block_dim
    }

    pub fn net(&self, j: usize) -> &Mlp {
        &self.nets[j]
    }

    pub fn net_mut(&mut self, j: usize) -> &mut Mlp {
        &mut self.nets[j]
    }

    /// Stacks context transitions into an (N, transition_dim) matrix.
    pub fn context_matrix(&self, ctx: &[Transition]) -> Result<Array2<f64>> {
        let mut feats = Array2::zeros((ctx.len(), self.transition_dim));
        for (i, t) in ctx.iter().enumerate() {
            let row = transition_features(t);
            if row.len() != self.transition_dim {
                return Err(Error::Shape(format!(
                    "transition flattens to {} entries, encoder expects {}",
                    row.len(),
                    self.transition_dim
                )));
            }
            feats.row_mut(i).assign(&row);
        }
        Ok(feats)
    }

    fn aggregate(&self, factor_mean: &Array2<f64>, factor_var: &Array2<f64>) -> DiagGaussian {
        let d = self.block_dim;
        let mut precision = Array1::<f64>::ones(d); // unit prior factor
        let mut weighted = Array1::<f64>::zeros(d); // prior mean is zero
        for t in 0..factor_mean.nrows() {
            for k in 0..d {
                let p = 1.0 / factor_var[[t, k]];
                precision[k] += p;
                weighted[k] += factor_mean[[t, k]] * p;
            }
        }
        let var = precision.mapv(|p| 1.0 / p);
        let mean = &weighted * &var;
        DiagGaussian::new(mean, var).expect("positive precision")
    }

    /// Posterior for DoV `j` given a context. An empty context returns
    /// exactly N(0, I).
    pub fn posterior(&self, j: usize, ctx: &[Transition]) -> Result<DiagGaussian> {
        if ctx.is_empty() {
            return Ok(DiagGaussian::standard(self.block_dim));
        }
        let feats = self.context_matrix(ctx)?;
        let out = self.nets[j].forward_batch(&feats)?;
        let d = self.block_dim;
        let factor_mean = out.slice(s![.., ..d]).to_owned();
        let factor_var = out
            .slice(s![.., d..])
            .mapv(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp());
        Ok(self.aggregate(&factor_mean, &factor_var))
    }

    /// All M posteriors for one context.
    pub fn posteriors(&self, ctx: &[Transition]) -> Result<Vec<DiagGaussian>> {
        (0..self.num_dovs()).map(|j| self.posterior(j, ctx)).collect()
    }

    /// Posterior plus the intermediates needed by [`Self::posterior_backward`].
    /// The context must be nonempty (training always has context).
    pub fn posterior_with_cache(
        &self,
        j: usize,
        ctx: &[Transition],
    ) -> Result<(DiagGaussian, PosteriorCache)> {
        if ctx.is_empty() {
            return Err(Error::InsufficientData(
                "posterior_with_cache needs a nonempty context".into(),
            ));
        }
        let feats = self.context_matrix(ctx)?;
        let (out, mlp_cache) = self.nets[j].forward_batch_cached(&feats)?;
        let d = self.block_dim;
        let factor_mean = out.slice(s![.., ..d]).to_owned();
        let log_var = out.slice(s![.., d..]);
        let factor_var = log_var.mapv(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp());
        let clamp_open = log_var.mapv(|lv| {
            if lv > LOG_VAR_MIN && lv < LOG_VAR_MAX {
                1.0
            } else {
                0.0
            }
        });
        let post = self.aggregate(&factor_mean, &factor_var);
        let cache = PosteriorCache {
            mlp_cache,
            factor_mean,
            factor_var,
            clamp_open,
            post_mean: post.mean().clone(),
            post_var: post.var().clone(),
        };
        Ok((post, cache))
    }

    /// Pushes gradients on the posterior (dL/dmean, dL/dvar) through the
    /// product-of-Gaussians aggregation and the encoder MLP, returning the
    /// parameter gradients for encoder `j`.
    pub fn posterior_backward(
        &self,
        j: usize,
        cache: &PosteriorCache,
        grad_mean: &Array1<f64>,
        grad_var: &Array1<f64>,
    ) -> Result<MlpGrads> {
        let d = self.block_dim;
        if grad_mean.len() != d || grad_var.len() != d {
            return Err(Error::Shape("posterior gradient dims must equal block dim".into()));
        }
        let n = cache.factor_mean.nrows();
        // posterior: v = 1/p with p = 1 + Σ_t 1/fv_t, μ = v · Σ_t fm_t/fv_t.
        // Let num = μ/v. For each dimension:
        //   dL/dnum = gμ·v, dL/dv_total = gv + gμ·num, dL/dp = -v²·dL/dv_total
        //   dL/dfm_t = dL/dnum / fv_t
        //   dL/dfv_t = -(dL/dnum·fm_t + dL/dp) / fv_t²
        let mut out_grad = Array2::<f64>::zeros((n, 2 * d));
        for k in 0..d {
            let v = cache.post_var[k];
            let num = cache.post_mean[k] / v;
            let g_num = grad_mean[k] * v;
            let g_v_total = grad_var[k] + grad_mean[k] * num;
            let g_p = -v * v * g_v_total;
            for t in 0..n {
                let fv = cache.factor_var[[t, k]];
                let r = 1.0 / fv;
                out_grad[[t, k]] = g_num * r;
                let g_fv = -(g_num * cache.factor_mean[[t, k]] + g_p) * r * r;
                // d(exp(clamped lv))/d lv = fv when the clamp is inactive.
                out_grad[[t, d + k]] = g_fv * fv * cache.clamp_open[[t, k]];
            }
        }
        let (grads, _) = self.nets[j].backward_batch(&cache.mlp_cache, &out_grad)?;
        Ok(grads)
    }

    /// Samples each block from its posterior (reparameterized) and
    /// concatenates. Returns the embedding plus the posteriors it came from.
    pub fn sample_task_embedding(
        &self,
        ctx: &[Transition],
        rng: &mut Prng,
    ) -> Result<(TaskEmbedding, Vec<DiagGaussian>)> {
        let posteriors = self.posteriors(ctx)?;
        let noises: Vec<Array1<f64>> = (0..self.num_dovs())
            .map(|_| standard_normal_vec(rng, self.block_dim))
            .collect();
        let embedding = sample_embedding_with_noise(&posteriors, &noises)?;
        Ok((embedding, posteriors))
    }
}

/// Reparameterized embedding from given posteriors and frozen noise.
pub fn sample_embedding_with_noise(
    posteriors: &[DiagGaussian],
    noises: &[Array1<f64>],
) -> Result<TaskEmbedding> {
    if posteriors.len() != noises.len() {
        return Err(Error::Shape("one noise vector per posterior required".into()));
    }
    let blocks = posteriors
        .iter()
        .zip(noises)
        .map(|(p, n)| p.sample_with_noise(n))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskEmbedding::from_blocks(blocks))
}

/// Deterministic embedding: each block is its posterior mean.
pub fn mean_embedding(posteriors: &[DiagGaussian]) -> TaskEmbedding {
    TaskEmbedding::from_blocks(posteriors.iter().map(|p| p.mean().clone()).collect())
}

/// Σ_j KL(q_j ‖ N(0, I)): the prior-regularization term summed over DoVs.
pub fn prior_kl(posteriors: &[DiagGaussian]) -> Result<f64> {
    let mut acc = 0.0;
    for q in posteriors {
        acc += kl_diag(q, &DiagGaussian::standard(q.dim()))?;
    }
    Ok(acc)
}

/// Gradient of KL(q ‖ N(0,I)) w.r.t. the posterior mean and variance:
/// d/dμ = μ, d/dvar = 0.5·(1 − 1/var).
pub fn prior_kl_grads(q: &DiagGaussian) -> (Array1<f64>, Array1<f64>) {
    let g_mean = q.mean().clone();
    let g_var = q.var().mapv(|v| 0.5 * (1.0 - 1.0 / v));
    (g_mean, g_var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seed_rng;
    use ndarray::array;
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn toy_transition(rng: &mut Prng, obs: usize, act: usize) -> Transition {
        Transition {
            state: standard_normal_vec(rng, obs),
            action: standard_normal_vec(rng, act),
            next_state: standard_normal_vec(rng, obs),
            reward: rng.random_range(-1.0..0.0),
        }
    }

    fn toy_encoders(num_dovs: usize, d: usize, seed: u64) -> DovEncoderSet {
        let mut rng = seed_rng(seed);
        DovEncoderSet::new(num_dovs, d, 2 * 3 + 2 + 1, &[16], &mut rng).unwrap()
    }

    fn toy_ctx(n: usize, seed: u64) -> Vec<Transition> {
        let mut rng = seed_rng(seed);
        (0..n).map(|_| toy_transition(&mut rng, 3, 2)).collect()
    }

    #[test]
    fn empty_context_returns_exact_prior() {
        let enc = toy_encoders(2, 5, 0);
        let post = enc.posterior(0, &[]).unwrap();
        assert_eq!(post, DiagGaussian::standard(5));
    }

    #[test]
    fn posterior_matches_explicit_factor_product() {
        let enc = toy_encoders(1, 4, 1);
        let ctx = toy_ctx(6, 2);
        let post = enc.posterior(0, &ctx).unwrap();

        // Re-derive via DiagGaussian::product over per-transition factors
        // plus the unit prior.
        let feats = enc.context_matrix(&ctx).unwrap();
        let out = enc.net(0).forward_batch(&feats).unwrap();
        let mut factors = vec![DiagGaussian::standard(4)];
        for t in 0..ctx.len() {
            let mean = out.slice(s![t, ..4]).to_owned();
            let var = out
                .slice(s![t, 4..])
                .mapv(|lv| lv.clamp(LOG_VAR_MIN, LOG_VAR_MAX).exp());
            factors.push(DiagGaussian::new(mean, var).unwrap());
        }
        let oracle = DiagGaussian::product(&factors).unwrap();
        for k in 0..4 {
            assert!((post.mean()[k] - oracle.mean()[k]).abs() < 1e-12);
            assert!((post.var()[k] - oracle.var()[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_is_permutation_invariant() {
        let enc = toy_encoders(2, 5, 3);
        let ctx = toy_ctx(16, 4);
        let base = enc.posterior(1, &ctx).unwrap();
        let mut shuffled = ctx.clone();
        shuffled.shuffle(&mut seed_rng(9));
        let perm = enc.posterior(1, &shuffled).unwrap();
        for k in 0..5 {
            assert!((base.mean()[k] - perm.mean()[k]).abs() <= 1e-9);
            assert!((base.var()[k] - perm.var()[k]).abs() <= 1e-9);
        }
    }

    #[test]
    fn appending_a_factor_never_increases_variance() {
        let enc = toy_encoders(1, 5, 5);
        let ctx = toy_ctx(12, 6);
        for n in 1..ctx.len() {
            let shorter = enc.posterior(0, &ctx[..n]).unwrap();
            let longer = enc.posterior(0, &ctx[..n + 1]).unwrap();
            for k in 0..5 {
                assert!(longer.var()[k] <= shorter.var()[k] + 1e-15);
            }
        }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let enc = toy_encoders(2, 5, 7);
        let ctx = toy_ctx(8, 8);
        let (emb_a, posts) = enc.sample_task_embedding(&ctx, &mut seed_rng(11)).unwrap();
        let (emb_b, _) = enc.sample_task_embedding(&ctx, &mut seed_rng(11)).unwrap();
        assert_eq!(emb_a.flat_dim(), 10);
        assert_eq!(emb_a.num_blocks(), 2);
        assert_eq!(emb_a.flat(), emb_b.flat());
        assert_eq!(posts.len(), 2);

        // Empty context: blocks are prior samples.
        let (emb_prior, posts_prior) = enc.sample_task_embedding(&[], &mut seed_rng(1)).unwrap();
        assert_eq!(posts_prior[0], DiagGaussian::standard(5));
        assert_eq!(emb_prior.flat_dim(), 10);
    }

    #[test]
    fn prior_kl_examples() {
        // All posteriors equal to the prior: zero.
        let prior = vec![DiagGaussian::standard(5), DiagGaussian::standard(5)];
        assert_eq!(prior_kl(&prior).unwrap(), 0.0);

        // One posterior N(1,1)^5: d·μ²/2 = 2.5.
        let shifted = vec![DiagGaussian::new(Array1::ones(5), Array1::ones(5)).unwrap()];
        assert!((prior_kl(&shifted).unwrap() - 2.5).abs() < 1e-12);

        // Random posteriors: equals the sum of independent kl_diag calls.
        let mut rng = seed_rng(13);
        let qs: Vec<DiagGaussian> = (0..3)
            .map(|_| {
                DiagGaussian::new(
                    standard_normal_vec(&mut rng, 4),
                    Array1::from_shape_fn(4, |_| rng.random_range(0.2..2.0)),
                )
                .unwrap()
            })
            .collect();
        let blockwise: f64 = qs
            .iter()
            .map(|q| kl_diag(q, &DiagGaussian::standard(4)).unwrap())
            .sum();
        assert!((prior_kl(&qs).unwrap() - blockwise).abs() < 1e-12);
    }

    #[test]
    fn perturbing_one_encoder_changes_only_its_block() {
        let mut enc = toy_encoders(2, 5, 17);
        let ctx = toy_ctx(8, 18);
        let noises = vec![
            standard_normal_vec(&mut seed_rng(2), 5),
            standard_normal_vec(&mut seed_rng(3), 5),
        ];
        let before = sample_embedding_with_noise(&enc.posteriors(&ctx).unwrap(), &noises).unwrap();

        let mut params = enc.net(1).params_flat();
        params[0] += 0.5;
        enc.net_mut(1).set_params_flat(&params).unwrap();
        let after = sample_embedding_with_noise(&enc.posteriors(&ctx).unwrap(), &noises).unwrap();

        assert_eq!(before.blocks()[0], after.blocks()[0]);
        assert_ne!(before.blocks()[1], after.blocks()[1]);
    }

    /// Reparameterization contract: with frozen noise, d(embedding)/d(params)
    /// matches finite differences through the posterior.
    #[test]
    fn posterior_backward_matches_finite_differences() {
        let enc = toy_encoders(1, 3, 23);
        let ctx = toy_ctx(5, 24);
        let noise = standard_normal_vec(&mut seed_rng(4), 3);
        // Scalar functional: f = Σ_k w_k · z_k with z = μ + sqrt(v)·ε.
        let w = array![0.7, -1.3, 0.4];

        let (post, cache) = enc.posterior_with_cache(0, &ctx).unwrap();
        // dz/dμ = 1, dz/dv = ε / (2 sqrt(v)).
        let g_mean = w.clone();
        let g_var = Array1::from_shape_fn(3, |k| w[k] * noise[k] / (2.0 * post.var()[k].sqrt()));
        let analytic = enc
            .posterior_backward(0, &cache, &g_mean, &g_var)
            .unwrap()
            .flat();

        let eval = |net_params: &[f64]| -> f64 {
            let mut e = enc.clone();
            e.net_mut(0).set_params_flat(net_params).unwrap();
            let p = e.posterior(0, &ctx).unwrap();
            let z = p.sample_with_noise(&noise).unwrap();
            (0..3).map(|k| w[k] * z[k]).sum()
        };
        let base = enc.net(0).params_flat();
        let step = 1e-5;
        let mut worst = 0.0_f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += step;
            let up = eval(&p);
            p[i] -= 2.0 * step;
            let down = eval(&p);
            let fd = (up - down) / (2.0 * step);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            worst = worst.max((fd - analytic[i]).abs() / denom);
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn zero_dov_encoder_set_degenerates() {
        let enc = toy_encoders(0, 5, 0);
        assert_eq!(enc.flat_dim(), 0);
        let (emb, posts) = enc.sample_task_embedding(&[], &mut seed_rng(0)).unwrap();
        assert_eq!(emb.flat_dim(), 0);
        assert!(posts.is_empty());
        assert_eq!(prior_kl(&posts).unwrap(), 0.0);
    }
}
