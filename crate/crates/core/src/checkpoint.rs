//! Checkpoint persistence: every network parameter, the EMA target table,
//! the config echo, the task split, and per-training-task posterior
//! summaries, in one versioned JSON container. JSON round-trips f64 exactly,
//! so a reloaded checkpoint is bit-identical to the saved state.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::trainer::Model;

pub const FORMAT_VERSION: &str = "compmeta-checkpoint-v1";

/// Final posterior summary of one training task, inferred from its replay
/// buffer at the end of training. Feeds the mean-composition ablation and
/// embedding analyses without re-rolling the environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainPosteriorRow {
    pub task_id: usize,
    pub combo: Vec<usize>,
    pub block_means: Vec<Vec<f64>>,
    pub block_vars: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: String,
    pub config: ExperimentConfig,
    pub train_task_ids: Vec<usize>,
    pub test_task_ids: Vec<usize>,
    pub model: Model,
    pub train_posteriors: Vec<TrainPosteriorRow>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut writer = std::io::BufWriter::new(file);
        serde_json::to_writer(&mut writer, self)?;
        use std::io::Write as _;
        writer.write_all(b"\n")?;
        writer.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "checkpoint format '{}' not supported (expected '{FORMAT_VERSION}')",
                ck.format_version
            )));
        }
        Ok(ck)
    }
}
