//! Command-line entry point: train, evaluate, dump embeddings, analyze.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use ndarray::Array1;

use compmeta::analysis::{cluster_purity, dump_embeddings, pca2d, write_svg_scatter, EmbeddingDump};
use compmeta::checkpoint::Checkpoint;
use compmeta::config::ExperimentConfig;
use compmeta::envs::TaskInstance;
use compmeta::error::{Error, Result};
use compmeta::numerics::{derive_seed, seed_rng, standard_normal_vec};
use compmeta::trainer::{rebuild_split, run, RunOptions};
use compmeta::zeroshot::{self, InteractionLog, Method};

#[derive(Parser)]
#[command(
    name = "compmeta",
    version,
    about = "Compositional meta-RL laboratory: disentangled task embeddings and zero-shot policy composition"
)]
struct Cli {
    /// Worker threads for rollout collection and per-task evaluation.
    /// 1 keeps everything on one thread; results are identical either way.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run meta-training from a config file.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint with one of the composition methods or
    /// baselines.
    Eval(EvalArgs),
    /// Dump per-task embedding posteriors to JSON lines.
    Dump(DumpArgs),
    /// PCA projection and per-DoV cluster purity of an embedding dump.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the run writes into <out>/seed<SEED>/.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Dotted-path config overrides, e.g. --set lambda=0 --set env.n_goals=4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// zeroshot_s1 | zeroshot_s2 | prior | metatest_pearl | metatest_ours |
    /// sac | mean_compose
    #[arg(long)]
    method: String,
    /// Episodes per task (default: config eval_episodes).
    #[arg(long)]
    episodes: Option<usize>,
    /// Evaluation seed (default: config seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory (default: <checkpoint dir>/eval_<method>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// DoV name holding the unseen label (zeroshot_s2).
    #[arg(long)]
    unseen_dov: Option<String>,
    /// Test task probed for the unseen label (zeroshot_s2).
    #[arg(long)]
    probe_task: Option<usize>,
    /// Probe episodes (default: config s2_rollout_budget for zeroshot_s2,
    /// config metatest_probe_episodes for the meta-test methods).
    #[arg(long)]
    probe_episodes: Option<usize>,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output JSONL file.
    #[arg(long)]
    out: PathBuf,
    /// Which tasks to dump: all | train | test.
    #[arg(long, default_value = "all")]
    tasks: String,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Embedding dump (JSONL) produced by `dump`.
    #[arg(long)]
    dump: PathBuf,
    /// Output directory for pca.csv and purity.csv.
    #[arg(long)]
    out: PathBuf,
    /// Also write one PCA scatter SVG per DoV.
    #[arg(long)]
    svg: bool,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.jobs == 0 {
        eprintln!("error: --jobs must be at least 1");
        return ExitCode::from(1);
    }
    if cli.jobs > 1 {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs)
            .build_global()
        {
            eprintln!("error: failed to build thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let outcome = match cli.cmd {
        Cmd::Train(args) => cmd_train(args, cli.jobs),
        Cmd::Eval(args) => cmd_eval(args, cli.jobs),
        Cmd::Dump(args) => cmd_dump(args),
        Cmd::Analyze(args) => cmd_analyze(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_usage() { 1 } else { 2 })
        }
    }
}

/// Applies one `key=value` override to the raw config value via a dotted
/// path. Values parse as JSON when possible, falling back to a string.
fn apply_set(root: &mut serde_json::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{spec}'")))?;
    let value: serde_json::Value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("--set path '{path}' crosses a non-object at '{part}'"))
        })?;
        if i == parts.len() - 1 {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj
            .entry((*part).to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    unreachable!("split never yields zero parts")
}

fn load_config_with_overrides(
    path: &Path,
    sets: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    for s in sets {
        apply_set(&mut value, s)?;
    }
    let mut cfg: ExperimentConfig = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs, jobs: usize) -> Result<()> {
    let cfg = load_config_with_overrides(&args.config, &args.set, args.seed)?;
    let out_dir = args.out.join(format!("seed{}", cfg.seed));
    let opts = RunOptions { out_dir, jobs };
    let summary = run(&cfg, &opts)?;
    let last = summary.rows.last().expect("at least the iteration-0 row");
    println!(
        "trained {} iterations: train return {:.3}, zero-shot test return {:.3}",
        last.iteration, last.mean_train_return, last.mean_test_return_zeroshot
    );
    println!("metrics:    {}", summary.metrics_path.display());
    println!("checkpoint: {}", summary.checkpoint_path.display());
    Ok(())
}

fn load_checkpoint_and_split(
    path: &Path,
) -> Result<(Checkpoint, Vec<TaskInstance>, Vec<TaskInstance>)> {
    let ck = Checkpoint::load(path)?;
    let (train, test) = rebuild_split(&ck.config, &ck.train_task_ids, &ck.test_task_ids)?;
    Ok((ck, train, test))
}

fn cmd_eval(args: EvalArgs, jobs: usize) -> Result<()> {
    let method = Method::from_str(&args.method)?;
    let (ck, train_tasks, test_tasks) = load_checkpoint_and_split(&args.checkpoint)?;
    let cfg = &ck.config;
    let model = &ck.model;
    let episodes = args.episodes.unwrap_or(cfg.eval_episodes);
    let seed = args.seed.unwrap_or(cfg.seed);
    let spec = cfg.env.dov_spec();
    let mut log = InteractionLog::default();

    let report = match method {
        Method::ZeroshotS1 => {
            if !model.blocks_match_env(&spec) {
                return Err(Error::Unsupported(
                    "zeroshot_s1 needs one encoder per environment DoV".into(),
                ));
            }
            let table = &model.table;
            if cfg.sample_composed_embeddings {
                zeroshot::evaluate(
                    &model.actor,
                    &test_tasks,
                    |t| {
                        let mut rng =
                            seed_rng(derive_seed(seed, &[0x51, t.id as u64]));
                        Ok(zeroshot::compose_s1_sampled(table, &t.combo, &mut rng)?.flat())
                    },
                    method,
                    episodes,
                    seed,
                    jobs,
                    &mut log,
                )?
            } else {
                zeroshot::evaluate(
                    &model.actor,
                    &test_tasks,
                    |t| Ok(zeroshot::compose_s1(table, &t.combo)?.flat()),
                    method,
                    episodes,
                    seed,
                    jobs,
                    &mut log,
                )?
            }
        }
        Method::ZeroshotS2 => {
            if !model.blocks_match_env(&spec) {
                return Err(Error::Unsupported(
                    "zeroshot_s2 needs one encoder per environment DoV".into(),
                ));
            }
            let dov_name = args.unseen_dov.as_deref().ok_or_else(|| {
                Error::Config("zeroshot_s2 requires --unseen-dov".into())
            })?;
            let j = spec
                .dov_index(dov_name)
                .ok_or_else(|| Error::Config(format!("unknown DoV '{dov_name}'")))?;
            let probe_task = args.probe_task.ok_or_else(|| {
                Error::Config("zeroshot_s2 requires --probe-task".into())
            })?;
            let budget = args.probe_episodes.unwrap_or(cfg.s2_rollout_budget);
            let outcome = zeroshot::run_s2(
                model,
                &test_tasks,
                j,
                probe_task,
                budget,
                episodes,
                seed,
                jobs,
            )?;
            println!(
                "probed task {} for {budget} episodes to infer DoV '{dov_name}'",
                outcome.probe_task_id
            );
            outcome.report
        }
        Method::Prior => {
            let dim = model.embed_dim();
            let sample_prior = cfg.sample_prior_embedding;
            zeroshot::evaluate(
                &model.actor,
                &test_tasks,
                |t| {
                    if sample_prior {
                        let mut rng = seed_rng(derive_seed(seed, &[0x9A, t.id as u64]));
                        Ok(standard_normal_vec(&mut rng, dim))
                    } else {
                        Ok(Array1::zeros(dim))
                    }
                },
                method,
                episodes,
                seed,
                jobs,
                &mut log,
            )?
        }
        Method::MetatestPearl | Method::MetatestOurs => {
            if model.encoders.num_dovs() == 0 {
                return Err(Error::Unsupported(
                    "meta-test needs a model with task inference".into(),
                ));
            }
            let probes = args.probe_episodes.unwrap_or(cfg.metatest_probe_episodes);
            zeroshot::metatest(
                model, &test_tasks, method, probes, episodes, seed, jobs, &mut log,
            )?
        }
        Method::Sac => {
            if model.embed_dim() != 0 {
                return Err(Error::Unsupported(
                    "the sac method evaluates embedding-free models; this checkpoint has task inference".into(),
                ));
            }
            zeroshot::evaluate(
                &model.actor,
                &test_tasks,
                |_| Ok(Array1::zeros(0)),
                method,
                episodes,
                seed,
                jobs,
                &mut log,
            )?
        }
        Method::MeanCompose => {
            if !model.blocks_match_env(&spec) || ck.train_posteriors.is_empty() {
                return Err(Error::Unsupported(
                    "mean_compose needs per-DoV encoders and stored training posteriors".into(),
                ));
            }
            let rows = &ck.train_posteriors;
            zeroshot::evaluate(
                &model.actor,
                &test_tasks,
                |t| Ok(zeroshot::mean_compose(rows, &t.combo)?.flat()),
                method,
                episodes,
                seed,
                jobs,
                &mut log,
            )?
        }
    };
    drop(train_tasks);

    let out_dir = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}", method.tag()))
    });
    std::fs::create_dir_all(&out_dir)?;
    report.write_csv(&out_dir.join("report.csv"))?;
    report.write_jsonl(&out_dir.join("report.jsonl"))?;
    println!(
        "{}: mean test return {:.4} +- {:.4} over {} tasks x {episodes} episodes",
        method.tag(),
        report.aggregate_mean,
        report.aggregate_stderr,
        report.rows.len()
    );
    println!("report: {}", out_dir.join("report.csv").display());
    Ok(())
}

fn cmd_dump(args: DumpArgs) -> Result<()> {
    let (ck, train_tasks, test_tasks) = load_checkpoint_and_split(&args.checkpoint)?;
    let tasks: Vec<TaskInstance> = match args.tasks.as_str() {
        "all" => {
            let mut all = train_tasks;
            all.extend(test_tasks);
            all.sort_by_key(|t| t.id);
            all
        }
        "train" => train_tasks,
        "test" => test_tasks,
        other => {
            return Err(Error::Config(format!(
                "--tasks must be all|train|test, got '{other}'"
            )))
        }
    };
    let seed = args.seed.unwrap_or(ck.config.seed);
    let spec = ck.config.env.dov_spec();
    let dump = dump_embeddings(
        &ck.model,
        &tasks,
        spec.num_dovs(),
        ck.config.progress_probe_episodes,
        seed,
    )?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    dump.write_jsonl(&args.out)?;
    println!("dumped {} embedding rows to {}", dump.rows.len(), args.out.display());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let dump = EmbeddingDump::read_jsonl(&args.dump)?;
    if dump.rows.is_empty() {
        return Err(Error::Config("dump holds no rows".into()));
    }
    std::fs::create_dir_all(&args.out)?;

    let points: Vec<Array1<f64>> = dump
        .rows
        .iter()
        .map(|r| Array1::from_vec(r.flat_mean.clone()))
        .collect();
    let pca = pca2d(&points)?;
    let mut pca_csv = String::from("task_id,combo,x,y\n");
    for (row, c) in dump.rows.iter().zip(&pca.coords) {
        let combo = row
            .combo
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("|");
        pca_csv.push_str(&format!("{},{},{},{}\n", row.task_id, combo, c[0], c[1]));
    }
    std::fs::write(args.out.join("pca.csv"), pca_csv)?;

    let num_dovs = dump.rows[0].combo.len();
    let mut purity_csv = String::from("dov,purity\n");
    for j in 0..num_dovs {
        let purity = cluster_purity(&dump, j)?;
        purity_csv.push_str(&format!("{j},{purity}\n"));
    }
    std::fs::write(args.out.join("purity.csv"), purity_csv)?;
    println!(
        "explained variance: {:.4} + {:.4}",
        pca.explained[0], pca.explained[1]
    );
    println!("wrote {} and {}", args.out.join("pca.csv").display(), args.out.join("purity.csv").display());

    if args.svg {
        for j in 0..num_dovs {
            let labels: Vec<usize> = dump.rows.iter().map(|r| r.combo[j]).collect();
            let path = args.out.join(format!("pca_dov{j}.svg"));
            write_svg_scatter(&pca.coords, &labels, &format!("embeddings by DoV {j}"), &path)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_apply_with_dotted_paths() {
        let mut v: serde_json::Value = serde_json::from_str(r#"{"alpha": 0.5}"#).unwrap();
        apply_set(&mut v, "lambda=0").unwrap();
        apply_set(&mut v, "env.n_goals=4").unwrap();
        apply_set(&mut v, "alpha=0.25").unwrap();
        assert_eq!(v["lambda"], 0);
        assert_eq!(v["env"]["n_goals"], 4);
        assert_eq!(v["alpha"], 0.25);
        assert!(apply_set(&mut v, "no_equals_sign").is_err());
        assert!(apply_set(&mut v, "alpha.sub=1").is_err());
    }
}
