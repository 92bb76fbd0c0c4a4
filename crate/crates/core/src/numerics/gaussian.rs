//! Diagonal Gaussians: the common currency of posteriors, priors, and EMA
//! targets. Variances are per-dimension and strictly positive.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use super::rng::{standard_normal_vec, Prng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagGaussian {
    mean: Array1<f64>,
    var: Array1<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Array1<f64>, var: Array1<f64>) -> Result<Self> {
        if mean.len() != var.len() {
            return Err(Error::Shape(format!(
                "mean dim {} != var dim {}",
                mean.len(),
                var.len()
            )));
        }
        if var.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(
                "variance entries must be strictly positive and finite".into(),
            ));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Domain("mean entries must be finite".into()));
        }
        Ok(Self { mean, var })
    }

    /// N(0, I) in `dim` dimensions.
    pub fn standard(dim: usize) -> Self {
        Self {
            mean: Array1::zeros(dim),
            var: Array1::ones(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Array1<f64> {
        &self.mean
    }

    pub fn var(&self) -> &Array1<f64> {
        &self.var
    }

    pub fn into_parts(self) -> (Array1<f64>, Array1<f64>) {
        (self.mean, self.var)
    }

    /// Precision-weighted product of Gaussian densities, renormalized.
    /// The factor list must be nonempty with matching dimensions.
    pub fn product(factors: &[DiagGaussian]) -> Result<DiagGaussian> {
        let first = factors
            .first()
            .ok_or_else(|| Error::Domain("product of zero Gaussian factors".into()))?;
        let dim = first.dim();
        let mut precision = Array1::<f64>::zeros(dim);
        let mut weighted = Array1::<f64>::zeros(dim);
        for f in factors {
            if f.dim() != dim {
                return Err(Error::Shape("product factors must share dimension".into()));
            }
            for k in 0..dim {
                let p = 1.0 / f.var[k];
                precision[k] += p;
                weighted[k] += f.mean[k] * p;
            }
        }
        let var = precision.mapv(|p| 1.0 / p);
        let mean = &weighted * &var;
        DiagGaussian::new(mean, var)
    }

    /// Reparameterized sample: mean + sqrt(var) ⊙ noise. With frozen noise
    /// the sample is a differentiable function of (mean, var).
    pub fn sample_with_noise(&self, noise: &Array1<f64>) -> Result<Array1<f64>> {
        if noise.len() != self.dim() {
            return Err(Error::Shape(format!(
                "noise dim {} != gaussian dim {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(&self.mean + &(self.var.mapv(f64::sqrt) * noise))
    }

    pub fn sample(&self, rng: &mut Prng) -> Array1<f64> {
        let noise = standard_normal_vec(rng, self.dim());
        self.sample_with_noise(&noise).expect("matching dims")
    }
}

/// KL(q ‖ p) for diagonal Gaussians:
/// 0.5 Σ_d [ vq/vp + (μp − μq)² / vp − 1 + ln(vp / vq) ].
pub fn kl_diag(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(Error::Shape(format!(
            "kl dims differ: {} vs {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut acc = 0.0;
    for k in 0..q.dim() {
        let (vq, vp) = (q.var[k], p.var[k]);
        if !(vq > 0.0) || !(vp > 0.0) {
            return Err(Error::Domain("kl requires positive variances".into()));
        }
        let dm = p.mean[k] - q.mean[k];
        acc += vq / vp + dm * dm / vp - 1.0 + (vp / vq).ln();
    }
    Ok(0.5 * acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seed_rng;
    use ndarray::array;
    use rand::Rng as _;

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let g = DiagGaussian::standard(4);
        assert_eq!(kl_diag(&g, &g).unwrap(), 0.0);
    }

    #[test]
    fn kl_unit_mean_shift_is_half() {
        let q = DiagGaussian::new(array![1.0], array![1.0]).unwrap();
        let p = DiagGaussian::standard(1);
        assert!((kl_diag(&q, &p).unwrap() - 0.5).abs() < 1e-15);
    }

    /// Monte-Carlo oracle: KL(q‖p) = E_q[ln q(x) - ln p(x)].
    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = seed_rng(17);
        let d = 5;
        let q = DiagGaussian::new(
            Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5)),
            Array1::from_shape_fn(d, |_| rng.random_range(0.8..1.25)),
        )
        .unwrap();
        let p = DiagGaussian::new(
            Array1::from_shape_fn(d, |_| rng.random_range(-0.5..0.5)),
            Array1::from_shape_fn(d, |_| rng.random_range(0.8..1.25)),
        )
        .unwrap();

        let log_pdf = |g: &DiagGaussian, x: &Array1<f64>| -> f64 {
            let mut acc = 0.0;
            for k in 0..g.dim() {
                let z = x[k] - g.mean()[k];
                acc += -0.5 * (2.0 * std::f64::consts::PI * g.var()[k]).ln()
                    - 0.5 * z * z / g.var()[k];
            }
            acc
        };
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let x = q.sample(&mut rng);
            acc += log_pdf(&q, &x) - log_pdf(&p, &x);
        }
        let mc = acc / n as f64;
        let exact = kl_diag(&q, &p).unwrap();
        assert!((mc - exact).abs() < 1e-2, "mc {mc} vs exact {exact}");
    }

    #[test]
    fn near_zero_variance_sample_is_the_mean() {
        let g = DiagGaussian::new(array![3.0, -1.0], array![1e-30, 1e-30]).unwrap();
        let s = g.sample(&mut seed_rng(0));
        assert!((s[0] - 3.0).abs() < 1e-10);
        assert!((s[1] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn law_of_large_numbers_on_standard_normal() {
        let g = DiagGaussian::standard(1);
        let mut rng = seed_rng(23);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let x = g.sample(&mut rng)[0];
            sum += x;
            sumsq += x * x;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "empirical mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "empirical var {var}");
    }

    #[test]
    fn fixed_seed_reproduces_samples() {
        let g = DiagGaussian::new(array![0.5, 2.0], array![0.3, 1.7]).unwrap();
        assert_eq!(g.sample(&mut seed_rng(7)), g.sample(&mut seed_rng(7)));
    }

    #[test]
    fn invalid_construction_is_rejected() {
        assert!(DiagGaussian::new(array![0.0], array![0.0]).is_err());
        assert!(DiagGaussian::new(array![0.0], array![-1.0]).is_err());
        assert!(DiagGaussian::new(array![0.0, 1.0], array![1.0]).is_err());
        assert!(DiagGaussian::new(array![f64::NAN], array![1.0]).is_err());
    }

    #[test]
    fn product_of_two_unit_variance_factors() {
        // N(0,1) * N(2,1) ∝ N(1, 0.5).
        let f0 = DiagGaussian::new(array![0.0], array![1.0]).unwrap();
        let f1 = DiagGaussian::new(array![2.0], array![1.0]).unwrap();
        let prod = DiagGaussian::product(&[f0, f1]).unwrap();
        assert!((prod.mean()[0] - 1.0).abs() < 1e-15);
        assert!((prod.var()[0] - 0.5).abs() < 1e-15);
    }
}
