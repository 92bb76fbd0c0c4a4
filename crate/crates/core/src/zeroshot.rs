//! Zero-shot composition and evaluation.
//!
//! Two composition routes build an embedding for a test task without any
//! interaction on it:
//!
//! - S1: every label of the test combo was seen in training; concatenate the
//!   EMA target means per (DoV, label).
//! - S2: exactly one label is unseen; probe a single task bearing it for a
//!   small rollout budget, extract that block's posterior, and compose the
//!   rest from the table as in S1.
//!
//! Baselines: prior embedding (no inference), PEARL-style meta-test
//! (context probing per test task), the embedding-free SAC policy, and a
//! mean-of-training-posteriors composition ablation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainPosteriorRow;
use crate::encoder::{mean_embedding, TaskEmbedding};
use crate::envs::{TaskInstance, Transition};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seed_rng, DiagGaussian, Prng};
use crate::rollout::run_episode;
use crate::sac::{ActMode, Actor};
use crate::targets::TargetTable;
use crate::trainer::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ZeroshotS1,
    ZeroshotS2,
    Prior,
    MetatestPearl,
    MetatestOurs,
    Sac,
    MeanCompose,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::ZeroshotS1 => "zeroshot_s1",
            Method::ZeroshotS2 => "zeroshot_s2",
            Method::Prior => "prior",
            Method::MetatestPearl => "metatest_pearl",
            Method::MetatestOurs => "metatest_ours",
            Method::Sac => "sac",
            Method::MeanCompose => "mean_compose",
        }
    }

    pub fn all() -> &'static [Method] {
        &[
            Method::ZeroshotS1,
            Method::ZeroshotS2,
            Method::Prior,
            Method::MetatestPearl,
            Method::MetatestOurs,
            Method::Sac,
            Method::MeanCompose,
        ]
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .iter()
            .copied()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown method '{s}' (expected one of: {})",
                    Method::all()
                        .iter()
                        .map(|m| m.tag())
                        .collect::<Vec<_>>()
                        .join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Per-task environment interaction counters, split into pre-evaluation
/// probing and the evaluation episodes themselves. Used to verify the
/// zero-shot purity contract.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub probe_steps: BTreeMap<usize, u64>,
    pub eval_steps: BTreeMap<usize, u64>,
}

impl InteractionLog {
    fn add_probe(&mut self, task: usize, steps: u64) {
        *self.probe_steps.entry(task).or_insert(0) += steps;
    }

    fn add_eval(&mut self, task: usize, steps: u64) {
        *self.eval_steps.entry(task).or_insert(0) += steps;
    }

    fn merge(&mut self, other: InteractionLog) {
        for (k, v) in other.probe_steps {
            *self.probe_steps.entry(k).or_insert(0) += v;
        }
        for (k, v) in other.eval_steps {
            *self.eval_steps.entry(k).or_insert(0) += v;
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub task_id: usize,
    pub combo: Vec<usize>,
    pub mean_return: f64,
    pub episodes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub rows: Vec<EvalRow>,
    pub aggregate_mean: f64,
    pub aggregate_stderr: f64,
}

impl EvalReport {
    fn from_rows(method: Method, rows: Vec<EvalRow>) -> Self {
        let n = rows.len();
        let mean = if n == 0 {
            f64::NAN
        } else {
            rows.iter().map(|r| r.mean_return).sum::<f64>() / n as f64
        };
        let stderr = if n < 2 {
            0.0
        } else {
            let var = rows
                .iter()
                .map(|r| (r.mean_return - mean).powi(2))
                .sum::<f64>()
                / (n - 1) as f64;
            (var / n as f64).sqrt()
        };
        Self {
            method: method.tag().to_string(),
            rows,
            aggregate_mean: mean,
            aggregate_stderr: stderr,
        }
    }

    /// Per-task rows with the mandatory method tag column.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "method,task_id,combo,mean_return,episodes")?;
        for r in &self.rows {
            let combo = r
                .combo
                .iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join("|");
            writeln!(
                f,
                "{},{},{},{},{}",
                r.method, r.task_id, combo, r.mean_return, r.episodes
            )?;
        }
        f.flush()?;
        Ok(())
    }

    /// One JSON object per row, then an aggregate line.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for r in &self.rows {
            writeln!(f, "{}", serde_json::to_string(r)?)?;
        }
        let aggregate = serde_json::json!({
            "method": self.method,
            "aggregate_mean": self.aggregate_mean,
            "aggregate_stderr": self.aggregate_stderr,
            "tasks": self.rows.len(),
        });
        writeln!(f, "{aggregate}")?;
        f.flush()?;
        Ok(())
    }
}

/// S1 composition: block j is the EMA target mean of (j, combo_j). Errors
/// with the missing label if any entry is untrained, signalling S2.
pub fn compose_s1(table: &TargetTable, combo: &[usize]) -> Result<TaskEmbedding> {
    let blocks = combo
        .iter()
        .enumerate()
        .map(|(j, &y)| Ok(table.get_target(j, y)?.mean().clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskEmbedding::from_blocks(blocks))
}

/// Sampled variant of S1: block j drawn from the target Gaussian.
pub fn compose_s1_sampled(
    table: &TargetTable,
    combo: &[usize],
    rng: &mut Prng,
) -> Result<TaskEmbedding> {
    let blocks = combo
        .iter()
        .enumerate()
        .map(|(j, &y)| Ok(table.get_target(j, y)?.sample(rng)))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskEmbedding::from_blocks(blocks))
}

/// Runs the PEARL-style probe on one task: `budget` stochastic episodes, the
/// embedding resampled from the growing context before each one. Returns the
/// final per-DoV posteriors and the probe context.
fn probe_task(
    model: &Model,
    task: &TaskInstance,
    budget: usize,
    rng: &mut Prng,
    log: &mut InteractionLog,
) -> Result<Vec<DiagGaussian>> {
    let mut ctx: Vec<Transition> = Vec::new();
    for _ in 0..budget {
        let (embedding, _) = model.encoders.sample_task_embedding(&ctx, rng)?;
        let z = embedding.flat();
        run_episode(task, &model.actor, &z, ActMode::Stochastic, rng, |t| {
            ctx.push(t)
        })?;
        log.add_probe(task.id, task.horizon() as u64);
    }
    model.encoders.posteriors(&ctx)
}

/// S2 step one: infer the unseen label's block from a single probe task.
/// Exactly `rollout_budget` episodes run on that one task; the returned
/// Gaussian is the block-`j_unseen` posterior of the aggregated context.
pub fn infer_unseen_label_s2(
    model: &Model,
    probe: &TaskInstance,
    j_unseen: usize,
    rollout_budget: usize,
    rng: &mut Prng,
    log: &mut InteractionLog,
) -> Result<DiagGaussian> {
    if j_unseen >= model.encoders.num_dovs() {
        return Err(Error::Config(format!(
            "DoV index {j_unseen} out of range for {} encoders",
            model.encoders.num_dovs()
        )));
    }
    let posteriors = probe_task(model, probe, rollout_budget, rng, log)?;
    Ok(posteriors.into_iter().nth(j_unseen).expect("index checked"))
}

/// S2 step two: block `j_unseen` comes from the inferred posterior mean,
/// every other block from the table as in S1. More than one unseen DoV is
/// unsupported.
pub fn compose_s2(
    table: &TargetTable,
    inferred: &DiagGaussian,
    combo: &[usize],
    j_unseen: usize,
) -> Result<TaskEmbedding> {
    let mut blocks = Vec::with_capacity(combo.len());
    for (j, &y) in combo.iter().enumerate() {
        if j == j_unseen {
            blocks.push(inferred.mean().clone());
        } else {
            match table.get_target(j, y) {
                Ok(t) => blocks.push(t.mean().clone()),
                Err(Error::MissingLabel { dov, label }) => {
                    return Err(Error::Unsupported(format!(
                        "more than one unseen DoV: label {label} of DoV {dov} is also untrained"
                    )));
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(TaskEmbedding::from_blocks(blocks))
}

/// Mean-composition ablation: block j is the average of the block-j posterior
/// means over training tasks sharing label combo_j.
pub fn mean_compose(
    train_posteriors: &[TrainPosteriorRow],
    combo: &[usize],
) -> Result<TaskEmbedding> {
    let mut blocks = Vec::with_capacity(combo.len());
    for (j, &y) in combo.iter().enumerate() {
        let members: Vec<&TrainPosteriorRow> = train_posteriors
            .iter()
            .filter(|r| r.combo[j] == y)
            .collect();
        if members.is_empty() {
            return Err(Error::MissingLabel { dov: j, label: y });
        }
        let d = members[0].block_means[j].len();
        let mut mean = Array1::<f64>::zeros(d);
        for r in &members {
            for k in 0..d {
                mean[k] += r.block_means[j][k];
            }
        }
        mean /= members.len() as f64;
        blocks.push(mean);
    }
    Ok(TaskEmbedding::from_blocks(blocks))
}

/// Deterministic-mode evaluation of `tasks` under per-task embeddings from
/// `embed_fn`. Runs `episodes` per task; per-task seeds derive from
/// `base_seed`, so serial and parallel execution agree bit-for-bit.
pub fn evaluate(
    actor: &Actor,
    tasks: &[TaskInstance],
    embed_fn: impl Fn(&TaskInstance) -> Result<Array1<f64>> + Sync,
    method: Method,
    episodes: usize,
    base_seed: u64,
    jobs: usize,
    log: &mut InteractionLog,
) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let eval_one = |task: &TaskInstance| -> Result<(EvalRow, u64)> {
        let embedding = embed_fn(task)?;
        let mut rng = seed_rng(derive_seed(base_seed, &[0xE7A1, task.id as u64]));
        let mut total = 0.0;
        for _ in 0..episodes {
            total += run_episode(
                task,
                actor,
                &embedding,
                ActMode::Deterministic,
                &mut rng,
                |_| {},
            )?;
        }
        Ok((
            EvalRow {
                method: method.tag().to_string(),
                task_id: task.id,
                combo: task.combo.clone(),
                mean_return: total / episodes as f64,
                episodes,
            },
            (episodes * task.horizon()) as u64,
        ))
    };

    let results: Vec<(EvalRow, u64)> = if jobs > 1 {
        tasks
            .par_iter()
            .map(eval_one)
            .collect::<Result<Vec<_>>>()?
    } else {
        tasks.iter().map(eval_one).collect::<Result<Vec<_>>>()?
    };

    let mut rows = Vec::with_capacity(results.len());
    for (row, steps) in results {
        log.add_eval(row.task_id, steps);
        rows.push(row);
    }
    Ok(EvalReport::from_rows(method, rows))
}

/// PEARL-style meta-test: probe each task for `probe_episodes` trajectories,
/// then evaluate deterministically under the posterior-mean embedding.
/// Not zero-shot; the probing interactions are logged per task.
pub fn metatest(
    model: &Model,
    tasks: &[TaskInstance],
    method: Method,
    probe_episodes: usize,
    eval_episodes: usize,
    base_seed: u64,
    jobs: usize,
    log: &mut InteractionLog,
) -> Result<EvalReport> {
    let test_one = |task: &TaskInstance| -> Result<(EvalRow, InteractionLog)> {
        let mut local = InteractionLog::default();
        let mut rng = seed_rng(derive_seed(base_seed, &[0x3E7A, task.id as u64]));
        let posteriors = probe_task(model, task, probe_episodes, &mut rng, &mut local)?;
        let embedding = mean_embedding(&posteriors).flat();
        let mut total = 0.0;
        for _ in 0..eval_episodes {
            total += run_episode(
                task,
                &model.actor,
                &embedding,
                ActMode::Deterministic,
                &mut rng,
                |_| {},
            )?;
        }
        local.add_eval(task.id, (eval_episodes * task.horizon()) as u64);
        Ok((
            EvalRow {
                method: method.tag().to_string(),
                task_id: task.id,
                combo: task.combo.clone(),
                mean_return: total / eval_episodes as f64,
                episodes: eval_episodes,
            },
            local,
        ))
    };

    let results: Vec<(EvalRow, InteractionLog)> = if jobs > 1 {
        tasks
            .par_iter()
            .map(test_one)
            .collect::<Result<Vec<_>>>()?
    } else {
        tasks.iter().map(test_one).collect::<Result<Vec<_>>>()?
    };

    let mut rows = Vec::with_capacity(results.len());
    for (row, local) in results {
        log.merge(local);
        rows.push(row);
    }
    Ok(EvalReport::from_rows(method, rows))
}

/// Outcome of the full S2 protocol run.
#[derive(Debug)]
pub struct S2Outcome {
    pub report: EvalReport,
    pub probe_task_id: usize,
    pub inferred: DiagGaussian,
    pub log: InteractionLog,
}

/// Full S2 protocol: probe exactly one task bearing the unseen label at
/// `j_unseen` with `rollout_budget` episodes, compose embeddings for every
/// OTHER task sharing that label, and evaluate them zero-shot.
#[allow(clippy::too_many_arguments)]
pub fn run_s2(
    model: &Model,
    test_tasks: &[TaskInstance],
    j_unseen: usize,
    probe_task_id: usize,
    rollout_budget: usize,
    eval_episodes: usize,
    base_seed: u64,
    jobs: usize,
) -> Result<S2Outcome> {
    let probe = test_tasks
        .iter()
        .find(|t| t.id == probe_task_id)
        .ok_or_else(|| Error::Config(format!("probe task {probe_task_id} not in test set")))?;
    let unseen_label = probe.combo[j_unseen];
    let targets: Vec<TaskInstance> = test_tasks
        .iter()
        .filter(|t| t.combo[j_unseen] == unseen_label && t.id != probe_task_id)
        .cloned()
        .collect();
    if targets.is_empty() {
        return Err(Error::Config(
            "no other test tasks share the probe task's unseen label".into(),
        ));
    }

    let mut log = InteractionLog::default();
    let mut rng = seed_rng(derive_seed(base_seed, &[0x52, probe_task_id as u64]));
    let inferred = infer_unseen_label_s2(model, probe, j_unseen, rollout_budget, &mut rng, &mut log)?;

    let table = &model.table;
    let inferred_ref = &inferred;
    let report = evaluate(
        &model.actor,
        &targets,
        |task| Ok(compose_s2(table, inferred_ref, &task.combo, j_unseen)?.flat()),
        Method::ZeroshotS2,
        eval_episodes,
        base_seed,
        jobs,
        &mut log,
    )?;
    Ok(S2Outcome {
        report,
        probe_task_id,
        inferred,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn table_with(entries: &[(usize, usize, f64)]) -> TargetTable {
        let mut table = TargetTable::new(0.99).unwrap();
        for &(dov, label, mean) in entries {
            let g = DiagGaussian::new(Array1::from_elem(3, mean), Array1::ones(3)).unwrap();
            table.ema_update(dov, label, &g);
        }
        table
    }

    #[test]
    fn compose_s1_concatenates_target_means() {
        let table = table_with(&[(0, 2, 1.5), (1, 0, -0.5)]);
        let emb = compose_s1(&table, &[2, 0]).unwrap();
        assert_eq!(emb.flat_dim(), 6);
        assert_eq!(emb.blocks()[0], Array1::from_elem(3, 1.5));
        assert_eq!(emb.blocks()[1], Array1::from_elem(3, -0.5));
    }

    #[test]
    fn combos_sharing_a_label_share_that_block() {
        let table = table_with(&[(0, 1, 0.7), (1, 0, -0.1), (1, 3, 2.0)]);
        let a = compose_s1(&table, &[1, 0]).unwrap();
        let b = compose_s1(&table, &[1, 3]).unwrap();
        assert_eq!(a.blocks()[0], b.blocks()[0]);
        assert_ne!(a.blocks()[1], b.blocks()[1]);
    }

    #[test]
    fn missing_label_directs_to_s2() {
        let table = table_with(&[(0, 0, 0.0)]);
        match compose_s1(&table, &[0, 5]) {
            Err(Error::MissingLabel { dov: 1, label: 5 }) => {}
            other => panic!("expected MissingLabel, got {other:?}"),
        }
    }

    #[test]
    fn compose_s2_uses_inferred_block_for_unseen_dov() {
        let table = table_with(&[(0, 1, 0.7)]);
        let inferred =
            DiagGaussian::new(array![9.0, 9.0, 9.0], array![1.0, 1.0, 1.0]).unwrap();
        let emb = compose_s2(&table, &inferred, &[1, 4], 1).unwrap();
        assert_eq!(emb.blocks()[0], Array1::from_elem(3, 0.7));
        assert_eq!(emb.blocks()[1], array![9.0, 9.0, 9.0]);
    }

    #[test]
    fn two_unseen_dovs_is_unsupported() {
        let table = TargetTable::new(0.99).unwrap();
        let inferred = DiagGaussian::standard(3);
        match compose_s2(&table, &inferred, &[1, 4], 1) {
            Err(Error::Unsupported(_)) => {}
            other => panic!("expected Unsupported, got {other:?}"),
        }
    }

    #[test]
    fn mean_compose_averages_training_blocks() {
        let rows = vec![
            TrainPosteriorRow {
                task_id: 0,
                combo: vec![0, 0],
                block_means: vec![vec![1.0, 2.0], vec![0.0, 0.0]],
                block_vars: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            },
            TrainPosteriorRow {
                task_id: 1,
                combo: vec![0, 1],
                block_means: vec![vec![3.0, 4.0], vec![5.0, 5.0]],
                block_vars: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
            },
        ];
        let emb = mean_compose(&rows, &[0, 1]).unwrap();
        assert_eq!(emb.blocks()[0], array![2.0, 3.0]);
        assert_eq!(emb.blocks()[1], array![5.0, 5.0]);

        assert!(matches!(
            mean_compose(&rows, &[1, 0]),
            Err(Error::MissingLabel { dov: 0, label: 1 })
        ));
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::all() {
            assert_eq!(Method::from_str(m.tag()).unwrap(), *m);
        }
        assert!(Method::from_str("bogus").is_err());
    }

    #[test]
    fn report_aggregates_are_mean_of_task_means() {
        let rows = vec![
            EvalRow {
                method: "prior".into(),
                task_id: 0,
                combo: vec![0, 0],
                mean_return: -1.0,
                episodes: 2,
            },
            EvalRow {
                method: "prior".into(),
                task_id: 1,
                combo: vec![0, 1],
                mean_return: -3.0,
                episodes: 2,
            },
        ];
        let report = EvalReport::from_rows(Method::Prior, rows);
        assert_eq!(report.aggregate_mean, -2.0);
        assert!(report.aggregate_stderr > 0.0);
    }
}
