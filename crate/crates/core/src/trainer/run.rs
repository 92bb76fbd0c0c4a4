//! The outer training loop: collect rollouts, take gradient steps, evaluate,
//! append metrics rows, and write the final checkpoint.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array1;
use rand::Rng as _;
use rayon::prelude::*;

use super::{
    collect_rollouts, train_step, train_step_sac, Model, Optimizers, ReplayBuffer, StepStats,
};
use crate::checkpoint::{Checkpoint, TrainPosteriorRow, FORMAT_VERSION};
use crate::config::ExperimentConfig;
use crate::encoder::mean_embedding;
use crate::envs::{build_task_grid, split_tasks, DovSpec, TaskInstance};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, seed_rng};
use crate::rollout::run_episode;
use crate::sac::ActMode;
use crate::zeroshot::{self, InteractionLog, Method};

const TAG_SPLIT: u64 = 0x517;
const TAG_INIT: u64 = 0x1417;
const TAG_COLLECT: u64 = 0xC0117;
const TAG_TRAIN: u64 = 0x7121;
const TAG_EVAL: u64 = 0xE7A1;
const TAG_POSTERIOR: u64 = 0x9057;

pub const METRICS_HEADER: &str = "iteration,wall_seconds,mean_train_return,\
mean_test_return_metatest,mean_test_return_zeroshot,loss_actor,loss_critic,\
loss_prior_kl,loss_dis";

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub iteration: usize,
    pub wall_seconds: f64,
    pub mean_train_return: f64,
    pub mean_test_return_metatest: f64,
    pub mean_test_return_zeroshot: f64,
    pub loss_actor: f64,
    pub loss_critic: f64,
    pub loss_prior_kl: f64,
    pub loss_dis: f64,
}

impl MetricsRow {
    fn csv_line(&self) -> String {
        format!(
            "{},{:.3},{},{},{},{},{},{},{}",
            self.iteration,
            self.wall_seconds,
            self.mean_train_return,
            self.mean_test_return_metatest,
            self.mean_test_return_zeroshot,
            self.loss_actor,
            self.loss_critic,
            self.loss_prior_kl,
            self.loss_dis
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// 1 = fully serial (bit-reproducible); >1 enables parallel rollout
    /// collection and evaluation. Per-task seeding keeps results identical
    /// across both modes.
    pub jobs: usize,
}

impl RunOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            jobs: 1,
        }
    }
}

#[derive(Debug)]
pub struct RunSummary {
    pub rows: Vec<MetricsRow>,
    pub train_task_ids: Vec<usize>,
    pub test_task_ids: Vec<usize>,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub config_path: PathBuf,
}

enum Buffers {
    PerTask(BTreeMap<usize, ReplayBuffer>),
    Shared(ReplayBuffer),
}

fn collect_phase(
    model: &Model,
    train_tasks: &[TaskInstance],
    buffers: &mut Buffers,
    episodes_per_task: usize,
    cfg: &ExperimentConfig,
    iter_tag: u64,
    jobs: usize,
) -> Result<f64> {
    match buffers {
        Buffers::PerTask(map) => {
            let by_id: BTreeMap<usize, &TaskInstance> =
                train_tasks.iter().map(|t| (t.id, t)).collect();
            let mut pairs: Vec<(&TaskInstance, &mut ReplayBuffer)> = Vec::new();
            for (id, buf) in map.iter_mut() {
                pairs.push((by_id[id], buf));
            }
            let job = |(task, buf): &mut (&TaskInstance, &mut ReplayBuffer)| -> Result<f64> {
                let mut rng = seed_rng(derive_seed(
                    cfg.seed,
                    &[TAG_COLLECT, iter_tag, task.id as u64],
                ));
                collect_rollouts(model, task, buf, episodes_per_task, cfg.context_size, &mut rng)
            };
            let returns: Vec<f64> = if jobs > 1 {
                pairs.par_iter_mut().map(job).collect::<Result<Vec<_>>>()?
            } else {
                pairs.iter_mut().map(job).collect::<Result<Vec<_>>>()?
            };
            Ok(returns.iter().sum::<f64>() / returns.len().max(1) as f64)
        }
        Buffers::Shared(buf) => {
            // Embedding-free baseline: a uniformly random training task per
            // episode, all transitions pooled.
            let mut rng = seed_rng(derive_seed(cfg.seed, &[TAG_COLLECT, iter_tag]));
            let episodes = episodes_per_task * train_tasks.len();
            let z = Array1::zeros(0);
            let mut total = 0.0;
            for _ in 0..episodes {
                let task = &train_tasks[rng.random_range(0..train_tasks.len())];
                total +=
                    run_episode(task, &model.actor, &z, ActMode::Stochastic, &mut rng, |t| {
                        buf.push(t)
                    })?;
            }
            Ok(total / episodes as f64)
        }
    }
}

/// Deterministic evaluation of the current policy on the training tasks,
/// conditioning on posterior-mean embeddings inferred from each task's
/// buffer (or the empty embedding for the baseline).
fn train_return_metric(
    model: &Model,
    train_tasks: &[TaskInstance],
    buffers: &Buffers,
    cfg: &ExperimentConfig,
    iter_tag: u64,
) -> Result<f64> {
    let mut total = 0.0;
    for task in train_tasks {
        let mut rng = seed_rng(derive_seed(
            cfg.seed,
            &[TAG_EVAL, iter_tag, task.id as u64],
        ));
        let embedding = match buffers {
            Buffers::PerTask(map) => {
                let buf = &map[&task.id];
                let ctx = buf.sample_recent(cfg.context_size, task.horizon(), &mut rng)?;
                let posteriors = model.encoders.posteriors(&ctx)?;
                mean_embedding(&posteriors).flat()
            }
            Buffers::Shared(_) => Array1::zeros(0),
        };
        let mut task_total = 0.0;
        for _ in 0..cfg.progress_eval_episodes {
            task_total += run_episode(
                task,
                &model.actor,
                &embedding,
                ActMode::Deterministic,
                &mut rng,
                |_| {},
            )?;
        }
        total += task_total / cfg.progress_eval_episodes as f64;
    }
    Ok(total / train_tasks.len().max(1) as f64)
}

fn zeroshot_metric(
    model: &Model,
    spec: &DovSpec,
    test_tasks: &[TaskInstance],
    cfg: &ExperimentConfig,
    iter_tag: u64,
    jobs: usize,
) -> Result<f64> {
    if test_tasks.is_empty() {
        return Ok(f64::NAN);
    }
    let mut log = InteractionLog::default();
    let seed = derive_seed(cfg.seed, &[TAG_EVAL, iter_tag, 0xE51]);
    if model.encoders.num_dovs() == 0 {
        // The embedding-free policy applies to test tasks directly.
        let report = zeroshot::evaluate(
            &model.actor,
            test_tasks,
            |_| Ok(Array1::zeros(0)),
            Method::Sac,
            cfg.progress_eval_episodes,
            seed,
            jobs,
            &mut log,
        )?;
        return Ok(report.aggregate_mean);
    }
    if !model.blocks_match_env(spec) {
        return Ok(f64::NAN);
    }
    let composable: Vec<TaskInstance> = test_tasks
        .iter()
        .filter(|t| {
            t.combo
                .iter()
                .enumerate()
                .all(|(j, &y)| model.table.contains(j, y))
        })
        .cloned()
        .collect();
    if composable.is_empty() {
        return Ok(f64::NAN);
    }
    let table = &model.table;
    let report = zeroshot::evaluate(
        &model.actor,
        &composable,
        |task| Ok(zeroshot::compose_s1(table, &task.combo)?.flat()),
        Method::ZeroshotS1,
        cfg.progress_eval_episodes,
        seed,
        jobs,
        &mut log,
    )?;
    Ok(report.aggregate_mean)
}

fn metatest_metric(
    model: &Model,
    test_tasks: &[TaskInstance],
    cfg: &ExperimentConfig,
    iter_tag: u64,
    jobs: usize,
) -> Result<f64> {
    if test_tasks.is_empty() || model.encoders.num_dovs() == 0 {
        return Ok(f64::NAN);
    }
    let mut log = InteractionLog::default();
    let report = zeroshot::metatest(
        model,
        test_tasks,
        Method::MetatestOurs,
        cfg.progress_probe_episodes,
        cfg.progress_eval_episodes,
        derive_seed(cfg.seed, &[TAG_EVAL, iter_tag, 0x3E7]),
        jobs,
        &mut log,
    )?;
    Ok(report.aggregate_mean)
}

/// Posterior summaries of every training task from its final buffer.
fn train_posterior_rows(
    model: &Model,
    train_tasks: &[TaskInstance],
    buffers: &Buffers,
    cfg: &ExperimentConfig,
) -> Result<Vec<TrainPosteriorRow>> {
    let Buffers::PerTask(map) = buffers else {
        return Ok(Vec::new());
    };
    if model.encoders.num_dovs() == 0 {
        return Ok(Vec::new());
    }
    let mut rows = Vec::with_capacity(train_tasks.len());
    for task in train_tasks {
        let mut rng = seed_rng(derive_seed(cfg.seed, &[TAG_POSTERIOR, task.id as u64]));
        let ctx = map[&task.id].sample_recent(cfg.context_size, task.horizon(), &mut rng)?;
        let posteriors = model.encoders.posteriors(&ctx)?;
        rows.push(TrainPosteriorRow {
            task_id: task.id,
            combo: task.combo.clone(),
            block_means: posteriors.iter().map(|p| p.mean().to_vec()).collect(),
            block_vars: posteriors.iter().map(|p| p.var().to_vec()).collect(),
        });
    }
    Ok(rows)
}

/// Runs the full experiment described by `cfg`: α-split, initial collection,
/// `iterations` rounds of collect + optimize + evaluate, metrics CSV, and a
/// final checkpoint. Deterministic for a fixed (config, seed) in any `jobs`
/// setting; the wall_seconds column is the only nondeterministic output.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(&opts.out_dir)?;
    let config_path = opts.out_dir.join("config.json");
    cfg.save(&config_path)?;
    let metrics_path = opts.out_dir.join("metrics.csv");
    let checkpoint_path = opts.out_dir.join("checkpoint.json");

    let spec = cfg.env.dov_spec();
    let grid = build_task_grid(&spec)?;
    let holdout = cfg
        .env
        .holdout_physics
        .map(|label| (spec.dov_index("physics").expect("physics DoV"), label));
    let mut split_rng = seed_rng(derive_seed(cfg.seed, &[TAG_SPLIT]));
    let (train_tasks, test_tasks) = split_tasks(&grid, cfg.alpha, holdout, &mut split_rng)?;

    let mut init_rng = seed_rng(derive_seed(cfg.seed, &[TAG_INIT]));
    let mut model = Model::new(cfg, &spec, &mut init_rng)?;
    let mut opt = Optimizers::new(&model, &cfg.sac_hyper());
    let maintain_table = model.blocks_match_env(&spec);

    let mut buffers = if cfg.sac_baseline {
        Buffers::Shared(ReplayBuffer::new(cfg.buffer_capacity * train_tasks.len().max(1))?)
    } else {
        let mut map = BTreeMap::new();
        for t in &train_tasks {
            map.insert(t.id, ReplayBuffer::new(cfg.buffer_capacity)?);
        }
        Buffers::PerTask(map)
    };

    let start = Instant::now();
    let mut metrics_file = std::io::BufWriter::new(std::fs::File::create(&metrics_path)?);
    writeln!(metrics_file, "{METRICS_HEADER}")?;
    let mut rows = Vec::with_capacity(cfg.iterations + 1);

    // Initial fill, then an iteration-0 row recording the untrained policy.
    collect_phase(
        &model,
        &train_tasks,
        &mut buffers,
        cfg.init_rollouts_per_task,
        cfg,
        0,
        opts.jobs,
    )?;
    let mut emit = |row: MetricsRow, file: &mut std::io::BufWriter<std::fs::File>| -> Result<()> {
        writeln!(file, "{}", row.csv_line())?;
        file.flush()?;
        rows.push(row);
        Ok(())
    };
    let row0 = MetricsRow {
        iteration: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
        mean_train_return: train_return_metric(&model, &train_tasks, &buffers, cfg, 0)?,
        mean_test_return_metatest: metatest_metric(&model, &test_tasks, cfg, 0, opts.jobs)?,
        mean_test_return_zeroshot: zeroshot_metric(&model, &spec, &test_tasks, cfg, 0, opts.jobs)?,
        loss_actor: f64::NAN,
        loss_critic: f64::NAN,
        loss_prior_kl: f64::NAN,
        loss_dis: f64::NAN,
    };
    emit(row0, &mut metrics_file)?;

    let mut train_rng = seed_rng(derive_seed(cfg.seed, &[TAG_TRAIN]));
    for iter in 1..=cfg.iterations {
        collect_phase(
            &model,
            &train_tasks,
            &mut buffers,
            cfg.rollouts_per_task,
            cfg,
            iter as u64,
            opts.jobs,
        )?;

        let mut acc = StepStats::default();
        let mut steps_counted = 0usize;
        for _ in 0..cfg.steps_per_iteration {
            let stats = match &mut buffers {
                Buffers::PerTask(map) => train_step(
                    &mut model,
                    &mut opt,
                    map,
                    &train_tasks,
                    cfg,
                    maintain_table,
                    &mut train_rng,
                )?,
                Buffers::Shared(buf) => {
                    train_step_sac(&mut model, &mut opt, buf, cfg, &mut train_rng)?
                }
            };
            if stats.tasks_used > 0 {
                acc.actor_loss += stats.actor_loss;
                acc.critic_loss += stats.critic_loss;
                acc.prior_kl_loss += stats.prior_kl_loss;
                acc.dis_loss += stats.dis_loss;
                steps_counted += 1;
            }
        }
        let inv = 1.0 / steps_counted.max(1) as f64;

        let row = MetricsRow {
            iteration: iter,
            wall_seconds: start.elapsed().as_secs_f64(),
            mean_train_return: train_return_metric(&model, &train_tasks, &buffers, cfg, iter as u64)?,
            mean_test_return_metatest: metatest_metric(
                &model,
                &test_tasks,
                cfg,
                iter as u64,
                opts.jobs,
            )?,
            mean_test_return_zeroshot: zeroshot_metric(
                &model,
                &spec,
                &test_tasks,
                cfg,
                iter as u64,
                opts.jobs,
            )?,
            loss_actor: if steps_counted > 0 { acc.actor_loss * inv } else { f64::NAN },
            loss_critic: if steps_counted > 0 { acc.critic_loss * inv } else { f64::NAN },
            loss_prior_kl: if steps_counted > 0 { acc.prior_kl_loss * inv } else { f64::NAN },
            loss_dis: if steps_counted > 0 { acc.dis_loss * inv } else { f64::NAN },
        };
        emit(row, &mut metrics_file)?;
    }

    let train_posteriors = train_posterior_rows(&model, &train_tasks, &buffers, cfg)?;
    let checkpoint = Checkpoint {
        format_version: FORMAT_VERSION.to_string(),
        config: cfg.clone(),
        train_task_ids: train_tasks.iter().map(|t| t.id).collect(),
        test_task_ids: test_tasks.iter().map(|t| t.id).collect(),
        model,
        train_posteriors,
    };
    checkpoint.save(&checkpoint_path)?;

    Ok(RunSummary {
        rows,
        train_task_ids: checkpoint.train_task_ids,
        test_task_ids: checkpoint.test_task_ids,
        metrics_path,
        checkpoint_path,
        config_path,
    })
}

/// Rebuilds the task grid and split exactly as [`run`] derived them from the
/// checkpointed config. Errors if the stored ids disagree (corrupt or
/// hand-edited checkpoint).
pub fn rebuild_split(
    cfg: &ExperimentConfig,
    expect_train: &[usize],
    expect_test: &[usize],
) -> Result<(Vec<TaskInstance>, Vec<TaskInstance>)> {
    let spec = cfg.env.dov_spec();
    let grid = build_task_grid(&spec)?;
    let holdout = cfg
        .env
        .holdout_physics
        .map(|label| (spec.dov_index("physics").expect("physics DoV"), label));
    let mut split_rng = seed_rng(derive_seed(cfg.seed, &[TAG_SPLIT]));
    let (train, test) = split_tasks(&grid, cfg.alpha, holdout, &mut split_rng)?;
    let train_ids: Vec<usize> = train.iter().map(|t| t.id).collect();
    let test_ids: Vec<usize> = test.iter().map(|t| t.id).collect();
    if train_ids != expect_train || test_ids != expect_test {
        return Err(Error::Config(
            "checkpoint task split does not match its config".into(),
        ));
    }
    Ok((train, test))
}
