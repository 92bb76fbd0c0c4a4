//! Embedding diagnostics: per-task posterior dumps, 2-D PCA projection via
//! power iteration, and per-DoV cluster-purity ratios quantifying how well
//! embedding blocks separate label values.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::envs::{TaskInstance, Transition};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seed_rng, Prng};
use crate::rollout::run_episode;
use crate::sac::ActMode;
use crate::trainer::Model;

/// One task's inferred posterior, sliced into one block per environment DoV
/// (so single-encoder baselines can be compared block-for-block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub task_id: usize,
    pub combo: Vec<usize>,
    pub block_means: Vec<Vec<f64>>,
    pub block_vars: Vec<Vec<f64>>,
    pub flat_mean: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
}

impl EmbeddingDump {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for row in &self.rows {
            writeln!(f, "{}", serde_json::to_string(row)?)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for line in text.lines() {
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(line)?);
        }
        Ok(Self { rows })
    }
}

/// Infers one posterior per task from fresh probe rollouts (meta-test
/// convention: a couple of trajectories aggregated into the context) and
/// records the block means/variances. Blocks follow the ENVIRONMENT DoV
/// count: a single wide encoder is sliced evenly.
pub fn dump_embeddings(
    model: &Model,
    tasks: &[TaskInstance],
    env_dovs: usize,
    probe_episodes: usize,
    base_seed: u64,
) -> Result<EmbeddingDump> {
    if model.encoders.num_dovs() == 0 {
        return Err(Error::Unsupported(
            "embedding dump requires a model with task inference".into(),
        ));
    }
    let flat_dim = model.encoders.flat_dim();
    if flat_dim % env_dovs != 0 {
        return Err(Error::Shape(format!(
            "flat embedding dim {flat_dim} does not split into {env_dovs} blocks"
        )));
    }
    let slice_dim = flat_dim / env_dovs;
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut rng: Prng = seed_rng(derive_seed(base_seed, &[0xD0B5, task.id as u64]));
        let mut ctx: Vec<Transition> = Vec::new();
        for _ in 0..probe_episodes {
            let (embedding, _) = model.encoders.sample_task_embedding(&ctx, &mut rng)?;
            let z = embedding.flat();
            run_episode(task, &model.actor, &z, ActMode::Stochastic, &mut rng, |t| {
                ctx.push(t)
            })?;
        }
        let posteriors = model.encoders.posteriors(&ctx)?;
        let flat_mean: Vec<f64> = posteriors.iter().flat_map(|p| p.mean().to_vec()).collect();
        let flat_var: Vec<f64> = posteriors.iter().flat_map(|p| p.var().to_vec()).collect();
        let block_means = (0..env_dovs)
            .map(|j| flat_mean[j * slice_dim..(j + 1) * slice_dim].to_vec())
            .collect();
        let block_vars = (0..env_dovs)
            .map(|j| flat_var[j * slice_dim..(j + 1) * slice_dim].to_vec())
            .collect();
        rows.push(EmbeddingRow {
            task_id: task.id,
            combo: task.combo.clone(),
            block_means,
            block_vars,
            flat_mean,
        });
    }
    Ok(EmbeddingDump { rows })
}

#[derive(Debug, Clone)]
pub struct Pca2d {
    pub coords: Vec<[f64; 2]>,
    /// Fractions of total variance captured by the two components,
    /// descending, each in [0, 1].
    pub explained: [f64; 2],
}

fn power_iterate(cov: &Array2<f64>, ortho_to: Option<&Array1<f64>>) -> Array1<f64> {
    let d = cov.nrows();
    let unit = |i: usize| {
        let mut e = Array1::zeros(d);
        e[i] = 1.0;
        e
    };
    // Deterministic start: e1, falling back to e2 when e1 is annihilated.
    let mut v = unit(0);
    if let Some(u) = ortho_to {
        v = &v - &(u * v.dot(u));
    }
    if cov.dot(&v).dot(&cov.dot(&v)).sqrt() < 1e-30 && d > 1 {
        v = unit(1);
        if let Some(u) = ortho_to {
            v = &v - &(u * v.dot(u));
        }
    }
    let norm = v.dot(&v).sqrt();
    if norm > 0.0 {
        v /= norm;
    }
    let mut prev_eig = f64::INFINITY;
    for _ in 0..500 {
        let mut w = cov.dot(&v);
        if let Some(u) = ortho_to {
            w = &w - &(u * w.dot(u));
        }
        let norm = w.dot(&w).sqrt();
        if norm < 1e-300 {
            break;
        }
        v = w / norm;
        let eig = v.dot(&cov.dot(&v));
        if (eig - prev_eig).abs() <= 1e-10 * eig.abs().max(1e-300) {
            break;
        }
        prev_eig = eig;
    }
    v
}

/// Projects points onto their top-2 principal directions, computed by power
/// iteration with deflation. Requires at least 3 points in dimension >= 2
/// with nonzero total variance.
pub fn pca2d(points: &[Array1<f64>]) -> Result<Pca2d> {
    if points.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "pca2d needs at least 3 points, got {}",
            points.len()
        )));
    }
    let d = points[0].len();
    if d < 2 {
        return Err(Error::Shape("pca2d needs dimension >= 2".into()));
    }
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Shape("pca2d points must share dimension".into()));
    }
    let n = points.len();
    let mut mean = Array1::<f64>::zeros(d);
    for p in points {
        mean += p;
    }
    mean /= n as f64;
    let mut centered = Array2::<f64>::zeros((n, d));
    for (i, p) in points.iter().enumerate() {
        centered.row_mut(i).assign(&(p - &mean));
    }
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let total: f64 = (0..d).map(|i| cov[[i, i]]).sum();
    if total <= 1e-300 {
        return Err(Error::DegenerateData(
            "all points identical; no principal directions".into(),
        ));
    }

    let v1 = power_iterate(&cov, None);
    let lambda1 = v1.dot(&cov.dot(&v1));
    let mut v2 = power_iterate(&cov, Some(&v1));
    // Re-orthonormalize against drift.
    v2 = &v2 - &(&v1 * v2.dot(&v1));
    let norm = v2.dot(&v2).sqrt();
    if norm > 1e-300 {
        v2 /= norm;
    }
    let lambda2 = v2.dot(&cov.dot(&v2));

    let (first, second, l1, l2) = if lambda2 > lambda1 {
        (v2, v1, lambda2, lambda1)
    } else {
        (v1, v2, lambda1, lambda2)
    };
    let coords = points
        .iter()
        .map(|p| {
            let c = p - &mean;
            [c.dot(&first), c.dot(&second)]
        })
        .collect();
    Ok(Pca2d {
        coords,
        explained: [
            (l1 / total).clamp(0.0, 1.0),
            (l2 / total).clamp(0.0, 1.0),
        ],
    })
}

/// Within-label over across-label mean pairwise distance of block-`dov`
/// means. Below 1 means tasks sharing a label sit closer together than
/// tasks with different labels; 0 means identical within-label embeddings.
pub fn cluster_purity(dump: &EmbeddingDump, dov: usize) -> Result<f64> {
    let rows = &dump.rows;
    if rows.is_empty() || dov >= rows[0].combo.len() {
        return Err(Error::InsufficientData("empty dump or DoV out of range".into()));
    }
    let mut label_counts = std::collections::BTreeMap::new();
    for r in rows {
        *label_counts.entry(r.combo[dov]).or_insert(0usize) += 1;
    }
    let rich_labels = label_counts.values().filter(|&&c| c >= 2).count();
    if label_counts.len() < 2 || rich_labels < 2 {
        return Err(Error::InsufficientData(
            "cluster purity needs >= 2 labels with >= 2 tasks each".into(),
        ));
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let mut within = (0.0, 0usize);
    let mut across = (0.0, 0usize);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = dist(&rows[i].block_means[dov], &rows[j].block_means[dov]);
            if rows[i].combo[dov] == rows[j].combo[dov] {
                within.0 += d;
                within.1 += 1;
            } else {
                across.0 += d;
                across.1 += 1;
            }
        }
    }
    if across.1 == 0 || within.1 == 0 {
        return Err(Error::InsufficientData("no label pairs to compare".into()));
    }
    let across_mean = across.0 / across.1 as f64;
    if across_mean <= 1e-300 {
        return Err(Error::DegenerateData(
            "across-label distances are all zero".into(),
        ));
    }
    Ok((within.0 / within.1 as f64) / across_mean)
}

/// Minimal SVG scatter of PCA coordinates colored by the labels of one DoV.
pub fn write_svg_scatter(
    coords: &[[f64; 2]],
    labels: &[usize],
    title: &str,
    path: &Path,
) -> Result<()> {
    if coords.len() != labels.len() {
        return Err(Error::Shape("one label per coordinate required".into()));
    }
    const PALETTE: [&str; 10] = [
        "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
        "#bcbd22", "#17becf",
    ];
    let (w, h, pad) = (480.0, 360.0, 30.0);
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for c in coords {
        xmin = xmin.min(c[0]);
        xmax = xmax.max(c[0]);
        ymin = ymin.min(c[1]);
        ymax = ymax.max(c[1]);
    }
    let sx = |x: f64| pad + (x - xmin) / (xmax - xmin).max(1e-12) * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - ymin) / (ymax - ymin).max(1e-12) * (h - 2.0 * pad);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{title}</text>\n",
        w / 2.0
    );
    for (c, &label) in coords.iter().zip(labels) {
        let color = PALETTE[label % PALETTE.len()];
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n",
            sx(c[0]),
            sy(c[1])
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seed_rng, standard_normal_vec};
    use rand::Rng as _;

    fn dump_from(points: &[(usize, Vec<f64>)]) -> EmbeddingDump {
        // One-DoV dump: combo = [label], single block.
        EmbeddingDump {
            rows: points
                .iter()
                .enumerate()
                .map(|(i, (label, mean))| EmbeddingRow {
                    task_id: i,
                    combo: vec![*label],
                    block_means: vec![mean.clone()],
                    block_vars: vec![vec![1.0; mean.len()]],
                    flat_mean: mean.clone(),
                })
                .collect(),
        }
    }

    #[test]
    fn planar_data_has_full_explained_variance_and_isometry() {
        // Random points in a 2-D plane embedded in 10-D.
        let mut rng = seed_rng(3);
        let b1 = standard_normal_vec(&mut rng, 10);
        let b1 = &b1 / b1.dot(&b1).sqrt();
        let mut b2 = standard_normal_vec(&mut rng, 10);
        b2 = &b2 - &(&b1 * b2.dot(&b1));
        let b2 = &b2 / b2.dot(&b2).sqrt();
        let points: Vec<Array1<f64>> = (0..40)
            .map(|_| {
                let (a, c): (f64, f64) = (rng.random_range(-2.0..2.0), rng.random_range(-1.0..1.0));
                &(&b1 * a) + &(&b2 * c)
            })
            .collect();
        let pca = pca2d(&points).unwrap();
        assert!((pca.explained[0] + pca.explained[1] - 1.0).abs() < 1e-6);
        assert!(pca.explained[0] >= pca.explained[1]);

        // Isometry on the plane: pairwise distances preserved.
        for i in 0..points.len() {
            for j in i + 1..points.len() {
                let orig = {
                    let d = &points[i] - &points[j];
                    d.dot(&d).sqrt()
                };
                let proj = {
                    let dx = pca.coords[i][0] - pca.coords[j][0];
                    let dy = pca.coords[i][1] - pca.coords[j][1];
                    (dx * dx + dy * dy).sqrt()
                };
                assert!((orig - proj).abs() <= 1e-6, "{orig} vs {proj}");
            }
        }
    }

    /// Full-eigendecomposition oracle via Jacobi rotations on the sample
    /// covariance; PCA explained fractions must match its top eigenvalues.
    #[test]
    fn explained_variance_matches_jacobi_eigenvalues() {
        let mut rng = seed_rng(7);
        let d = 6;
        let points: Vec<Array1<f64>> = (0..300)
            .map(|_| standard_normal_vec(&mut rng, d))
            .collect();
        let pca = pca2d(&points).unwrap();

        // Sample covariance.
        let n = points.len();
        let mut mean = Array1::<f64>::zeros(d);
        for p in &points {
            mean += p;
        }
        mean /= n as f64;
        let mut cov = vec![vec![0.0_f64; d]; d];
        for p in &points {
            let c = p - &mean;
            for i in 0..d {
                for j in 0..d {
                    cov[i][j] += c[i] * c[j] / (n as f64 - 1.0);
                }
            }
        }
        // Jacobi eigenvalue sweep.
        let mut a = cov.clone();
        for _ in 0..100 {
            let mut p = 0;
            let mut q = 1;
            let mut off = 0.0;
            for i in 0..d {
                for j in i + 1..d {
                    if a[i][j].abs() > off {
                        off = a[i][j].abs();
                        p = i;
                        q = j;
                    }
                }
            }
            if off < 1e-12 {
                break;
            }
            let theta = 0.5 * (2.0 * a[p][q]).atan2(a[p][p] - a[q][q]);
            let (c, s) = (theta.cos(), theta.sin());
            for k in 0..d {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp + s * akq;
                a[k][q] = -s * akp + c * akq;
            }
            for k in 0..d {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk + s * aqk;
                a[q][k] = -s * apk + c * aqk;
            }
        }
        let mut eigs: Vec<f64> = (0..d).map(|i| a[i][i]).collect();
        eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let total: f64 = eigs.iter().sum();

        assert!((pca.explained[0] - eigs[0] / total).abs() < 1e-6);
        assert!((pca.explained[1] - eigs[1] / total).abs() < 1e-6);
        // Isotropic cloud: each top fraction is near 1/d = 0.167.
        assert!((pca.explained[0] - 1.0 / d as f64).abs() < 0.08);
    }

    #[test]
    fn degenerate_and_undersized_inputs_error() {
        let p = Array1::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(
            pca2d(&[p.clone(), p.clone()]),
            Err(Error::InsufficientData(_))
        ));
        assert!(matches!(
            pca2d(&[p.clone(), p.clone(), p.clone()]),
            Err(Error::DegenerateData(_))
        ));
        let one_d = Array1::from_vec(vec![1.0]);
        assert!(pca2d(&[one_d.clone(), one_d.clone(), one_d]).is_err());
    }

    #[test]
    fn identical_within_label_blocks_give_zero_purity() {
        let dump = dump_from(&[
            (0, vec![1.0, 0.0]),
            (0, vec![1.0, 0.0]),
            (1, vec![0.0, 5.0]),
            (1, vec![0.0, 5.0]),
        ]);
        assert_eq!(cluster_purity(&dump, 0).unwrap(), 0.0);
    }

    /// Permutation-shuffle oracle: random label assignment gives ratio ~1.
    #[test]
    fn random_labels_give_purity_near_one() {
        let mut rng = seed_rng(13);
        let points: Vec<(usize, Vec<f64>)> = (0..160)
            .map(|_| {
                (
                    rng.random_range(0..4usize),
                    standard_normal_vec(&mut rng, 5).to_vec(),
                )
            })
            .collect();
        let dump = dump_from(&points);
        let ratio = cluster_purity(&dump, 0).unwrap();
        assert!((ratio - 1.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn purity_is_invariant_to_translation_and_rotation() {
        let mut rng = seed_rng(17);
        let points: Vec<(usize, Vec<f64>)> = (0..40)
            .map(|i| {
                let label = i % 3;
                let mut v = standard_normal_vec(&mut rng, 3).to_vec();
                v[0] += label as f64 * 4.0;
                (label, v)
            })
            .collect();
        let dump = dump_from(&points);
        let base = cluster_purity(&dump, 0).unwrap();

        // Rotation in the (0,1) plane plus a translation.
        let theta: f64 = 0.83;
        let rotated: Vec<(usize, Vec<f64>)> = points
            .iter()
            .map(|(l, v)| {
                let x = v[0] * theta.cos() - v[1] * theta.sin() + 7.0;
                let y = v[0] * theta.sin() + v[1] * theta.cos() - 2.0;
                (*l, vec![x, y, v[2] + 1.0])
            })
            .collect();
        let rotated_purity = cluster_purity(&dump_from(&rotated), 0).unwrap();
        assert!((base - rotated_purity).abs() < 1e-9);
    }

    #[test]
    fn insufficient_tasks_error() {
        let dump = dump_from(&[(0, vec![1.0]), (1, vec![2.0]), (1, vec![2.5])]);
        assert!(matches!(
            cluster_purity(&dump, 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn dump_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let dump = dump_from(&[
            (0, vec![0.1234567890123456, -1.5]),
            (1, vec![2.0, 3.0]),
            (0, vec![0.5, 0.25]),
        ]);
        let path = dir.path().join("dump.jsonl");
        dump.write_jsonl(&path).unwrap();
        let back = EmbeddingDump::read_jsonl(&path).unwrap();
        assert_eq!(dump, back);
    }
}
