//! `train-target`, `train-draft` and `train-confu`.

use std::io::Write;
use std::path::Path;

use confu_core::model::ConfuModel;
use confu_core::train::{run_stage, Checkpoint, Stage, TrainConfig, TrainSummary};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};

/// First line of the configuration text stored in draft checkpoints.
const MODE_PREFIX: &str = "# mode = ";

/// What a training command produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Job {
    Target,
    Draft(Mode),
}

impl Job {
    fn stage(self) -> Stage {
        match self {
            Job::Target => Stage::TargetPretrain,
            Job::Draft(m) => m.stage(),
        }
    }

    fn train_config(self, cfg: &ExperimentConfig) -> TrainConfig {
        match self {
            Job::Target => cfg.train_target.clone(),
            Job::Draft(Mode::Baseline) => cfg.train_draft.clone(),
            Job::Draft(m) => m.train_config(&cfg.train_confu),
        }
    }
}

/// Trains one stage on the configured corpus, writes the checkpoint to
/// `out` and one JSON line per step to `log`.
pub fn train(
    cfg: &ExperimentConfig,
    job: Job,
    input: Option<&Path>,
    out: &Path,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    let input = input.map(Checkpoint::load).transpose()?;
    if let (Job::Draft(mode), Some(ck)) = (job, &input) {
        if let Some(prev) = checkpoint_mode(ck) {
            if prev.stage() == mode.stage() && prev != mode {
                return Err(CliError::Config(format!("cannot continue a {prev} checkpoint as {mode}")));
            }
        }
    }
    let corpus = cfg.corpus_with(0)?;
    let model_cfg = match job {
        Job::Target => cfg.model_config(),
        Job::Draft(m) => m.model_config(&cfg.model_config()),
    };
    let text = match job {
        Job::Target => cfg.render(),
        Job::Draft(m) => format!("{MODE_PREFIX}{m}\n{}", cfg.render()),
    };
    let mut failed = None;
    let mut on_log = |r: &confu_core::train::LogRecord| {
        if failed.is_none() {
            if let Err(e) = serde_json::to_writer(&mut *log, r).map_err(CliError::from).and_then(|_| Ok(writeln!(log)?)) {
                failed = Some(e);
            }
        }
    };
    let (_, ck, summary) = run_stage::<f64>(
        job.stage(),
        &model_cfg,
        &corpus.sequences,
        &job.train_config(cfg),
        input.as_ref(),
        &text,
        &mut on_log,
    )?;
    if let Some(e) = failed {
        return Err(e);
    }
    ck.save(out)?;
    Ok(summary)
}

/// Mode recorded by `train-draft` / `train-confu`, if any.
pub fn checkpoint_mode(ck: &Checkpoint) -> Option<Mode> {
    ck.meta.config.lines().next()?.strip_prefix(MODE_PREFIX)?.parse().ok()
}

/// Loads a trained draft checkpoint for `mode`.
pub fn load_model(cfg: &ExperimentConfig, mode: Mode, path: &Path) -> Result<ConfuModel<f64>> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Config(format!("checkpoint {}: {e}", path.display())))?;
    model_from_checkpoint(cfg, mode, &ck)
}

pub fn model_from_checkpoint(cfg: &ExperimentConfig, mode: Mode, ck: &Checkpoint) -> Result<ConfuModel<f64>> {
    if let Some(m) = checkpoint_mode(ck) {
        if m != mode {
            return Err(CliError::Config(format!("checkpoint was trained as {m}, not {mode}")));
        }
    } else if ck.meta.stage != mode.stage().name() {
        return Err(CliError::Config(format!("{} checkpoint cannot serve mode {mode}", ck.meta.stage)));
    }
    let mut model = ConfuModel::init(mode.model_config(&cfg.model_config()), 0)?;
    model.load_named(&ck.named::<f64>())?;
    Ok(model)
}
