//! Shared helpers for the integration and acceptance suites.

#![allow(dead_code)]

use compmeta::config::ExperimentConfig;
use compmeta::envs::Transition;
use compmeta::numerics::{standard_normal_vec, Prng};
use compmeta::trainer::{run, RunOptions, RunSummary};
use rand::Rng as _;
use std::path::Path;

/// Central finite differences of a scalar function over a flat parameter
/// vector. The independent oracle for every gradient check.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, base: &[f64], step: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(base.len());
    let mut p = base.to_vec();
    for i in 0..base.len() {
        p[i] = base[i] + step;
        let hi = f(&p);
        p[i] = base[i] - step;
        let lo = f(&p);
        p[i] = base[i];
        out.push((hi - lo) / (2.0 * step));
    }
    out
}

/// Worst relative disagreement between analytic and finite-difference
/// gradients, with an absolute floor to keep near-zero entries meaningful.
pub fn max_rel_err(analytic: &[f64], fd: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(fd)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn sha256_file(path: &Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).expect("readable file");
    let digest = Sha256::digest(&bytes);
    format!("{digest:x}")
}

/// Strips the wall_seconds column (the only nondeterministic output) from a
/// metrics CSV for bit-exact comparison.
pub fn metrics_without_wall(path: &Path) -> String {
    let text = std::fs::read_to_string(path).expect("metrics file");
    text.lines()
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            let mut kept: Vec<&str> = Vec::with_capacity(cols.len());
            for (i, c) in cols.iter().enumerate() {
                if i != 1 {
                    kept.push(c);
                }
            }
            kept.join(",")
        })
        .collect::<Vec<_>>()
        .join("\n")
}

/// Random transitions with consistent dimensions; enough for kernel-level
/// gradient checks that do not need real dynamics.
pub fn toy_transitions(n: usize, obs: usize, act: usize, rng: &mut Prng) -> Vec<Transition> {
    (0..n)
        .map(|_| Transition {
            state: standard_normal_vec(rng, obs),
            action: standard_normal_vec(rng, act),
            next_state: standard_normal_vec(rng, obs),
            reward: rng.random_range(-1.0..0.0),
        })
        .collect()
}

pub struct Battery {
    pub summaries: Vec<RunSummary>,
    pub configs: Vec<ExperimentConfig>,
    pub build_seconds: f64,
}

/// Runs one training per config, sequentially, under `root`.
pub fn run_battery(root: &Path, configs: Vec<ExperimentConfig>) -> Battery {
    let t0 = std::time::Instant::now();
    let summaries = configs
        .iter()
        .map(|cfg| {
            let out = root.join(format!("seed{}", cfg.seed));
            run(cfg, &RunOptions::new(out)).expect("training run")
        })
        .collect();
    Battery {
        summaries,
        configs,
        build_seconds: t0.elapsed().as_secs_f64(),
    }
}
