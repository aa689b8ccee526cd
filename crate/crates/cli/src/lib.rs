//! Command-line front end: training stages, decoding, benchmarks,
//! losslessness checks and report tables.

pub mod bench;
pub mod config;
pub mod decode;
pub mod error;
pub mod report;
pub mod train;
pub mod verify;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use confu_core::engine::DecodeMode;
use confu_core::model::ConfuModel;

use crate::config::{ExperimentConfig, Mode};
pub use crate::error::{CliError, Result};
use crate::train::Job;

#[derive(Debug, Parser)]
#[command(name = "confu", version, about = "Future-aware speculative decoding on a tiny transformer")]
pub struct Cli {
    /// Experiment configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Replaces every run seed; overrides CONFU_SEED.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the target model.
    TrainTarget {
        #[arg(long)]
        out: PathBuf,
        /// JSON-lines training log; stdout when absent.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the baseline draft head on a target (or draft) checkpoint.
    TrainDraft {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the future-aware draft on a baseline checkpoint.
    TrainConfu {
        #[arg(long)]
        from: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "confu")]
        mode: Mode,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate from a prompt and print tokens and metrics as JSON.
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "confu")]
        mode: Mode,
        /// Comma-separated token ids.
        #[arg(long)]
        prompt: Option<String>,
        /// Text prompt for byte-level corpora.
        #[arg(long)]
        text: Option<String>,
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 30)]
        nodes: usize,
        #[arg(long, default_value_t = 64)]
        max_tokens: usize,
    },
    /// Run the bench grid and write CSV plus JSON (same stem).
    Bench {
        #[arg(long)]
        out: PathBuf,
        /// Restrict to these modes.
        #[arg(long = "mode")]
        modes: Vec<Mode>,
        #[arg(long = "temperature")]
        temperatures: Vec<f64>,
        #[arg(long = "nodes")]
        nodes: Vec<usize>,
        /// MODE=PATH, added to the [checkpoints] section.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<String>,
    },
    /// Compare speculative and autoregressive output distributions.
    VerifyLossless {
        /// Draft checkpoint; a seeded random model when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "confu")]
        mode: Mode,
        /// Enumerate all randomness instead of sampling.
        #[arg(long)]
        exhaustive: bool,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
        #[arg(long)]
        nodes: Option<usize>,
        /// lossless or greedy-match.
        #[arg(long, default_value = "lossless")]
        rule: String,
    },
    /// Join bench CSVs into one table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn open_log(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn model_for(cfg: &ExperimentConfig, mode: Mode, checkpoint: Option<&PathBuf>) -> Result<ConfuModel<f64>> {
    match checkpoint {
        Some(p) => train::load_model(cfg, mode, p),
        None => Ok(ConfuModel::init(mode.model_config(&cfg.model_config()), cfg.verify.seed)?),
    }
}

/// Runs one command; returns the process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_seed_overrides(cli.seed)?;
    match cli.command {
        Command::TrainTarget { out, log } => {
            let s = train::train(&cfg, Job::Target, None, &out, &mut open_log(log.as_ref())?)?;
            eprintln!("target: {} steps, final loss {:.4}", s.losses.len(), s.losses.last().unwrap_or(&0.0));
        }
        Command::TrainDraft { from, out, log } => {
            let s = train::train(&cfg, Job::Draft(Mode::Baseline), Some(&from), &out, &mut open_log(log.as_ref())?)?;
            eprintln!("baseline: {} steps, final loss {:.4}", s.losses.len(), s.losses.last().unwrap_or(&0.0));
        }
        Command::TrainConfu { from, out, mode, log } => {
            if mode == Mode::Baseline {
                return Err(CliError::Config("train-confu trains confu modes; use train-draft for the baseline".into()));
            }
            let s = train::train(&cfg, Job::Draft(mode), Some(&from), &out, &mut open_log(log.as_ref())?)?;
            eprintln!(
                "{mode}: {} steps, final loss {:.4}, {} floored probabilities",
                s.losses.len(),
                s.losses.last().unwrap_or(&0.0),
                s.floored
            );
        }
        Command::Decode { checkpoint, mode, prompt, text, temperature, nodes, max_tokens } => {
            let model = train::load_model(&cfg, mode, &checkpoint)?;
            let prompt = decode::parse_prompt(&cfg, prompt.as_deref(), text.as_deref())?;
            let dm = DecodeMode::new(mode.variant(), temperature, nodes, cfg.bench.branch);
            let out = decode::decode(&cfg, &model, mode, dm, &prompt, max_tokens, cfg.bench.seed)?;
            serde_json::to_writer(&mut *stdout, &out)?;
            writeln!(stdout)?;
        }
        Command::Bench { out, modes, temperatures, nodes, checkpoints } => {
            if !modes.is_empty() {
                cfg.bench.modes = modes;
            }
            if !temperatures.is_empty() {
                cfg.bench.temperatures = temperatures;
            }
            if !nodes.is_empty() {
                cfg.bench.nodes = nodes;
            }
            for c in checkpoints {
                let (m, p) = c
                    .split_once('=')
                    .ok_or_else(|| CliError::Config(format!("--checkpoint {c:?} is not MODE=PATH")))?;
                cfg.bench.checkpoints.insert(m.parse()?, PathBuf::from(p));
            }
            let report = bench::bench(&cfg)?;
            report.save(&out)?;
            stdout.write_all(&report.to_csv()?)?;
        }
        Command::VerifyLossless { checkpoint, mode, exhaustive, trials, temperature, nodes, rule } => {
            if let Some(t) = trials {
                cfg.verify.trials = t;
            }
            if let Some(t) = temperature {
                cfg.verify.temperature = t;
            }
            if let Some(n) = nodes {
                cfg.verify.nodes = n;
            }
            let model = model_for(&cfg, mode, checkpoint.as_ref())?;
            let req = verify::VerifyRequest { mode, rule: verify::parse_rule(&rule)?, exhaustive };
            let r = verify::verify(&cfg, &model, &req)?;
            serde_json::to_writer(&mut *stdout, &r)?;
            writeln!(stdout)?;
            return Ok(if r.pass { 0 } else { 1 });
        }
        Command::Report { reports, out } => {
            let table = report::report(&reports)?;
            if let Some(p) = out {
                std::fs::write(p, table.to_csv()?)?;
            }
            stdout.write_all(table.to_text().as_bytes())?;
        }
    }
    Ok(0)
}
