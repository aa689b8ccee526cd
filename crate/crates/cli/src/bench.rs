//! `bench`: τ and row accounting over modes × temperatures × node budgets.

use std::path::Path;

use confu_core::engine::{DecodeMode, Generation, KeyedRng, SpecEngine};
use confu_core::model::ConfuModel;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};
use crate::train::load_model;

/// One grid cell, summed over all prompts. Wall time is kept out of the CSV
/// so reruns are byte-identical.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: Mode,
    pub temperature: f64,
    pub nodes: usize,
    pub prompts: usize,
    pub rounds: usize,
    pub tokens: usize,
    /// Mean tokens committed per round, bonus or correction included.
    pub tau: f64,
    /// Emitted tokens per round after truncation to `max_tokens`.
    pub tokens_per_round: f64,
    /// Tokens per target forward; autoregression scores 1.
    pub sr_proxy: f64,
    pub draft_rows: usize,
    pub contemplate_rows: usize,
    pub fallback_rows: usize,
    pub target_forwards: usize,
}

impl BenchRow {
    pub const HEADER: [&'static str; 13] = [
        "mode",
        "temperature",
        "nodes",
        "prompts",
        "rounds",
        "tokens",
        "tau",
        "tokens_per_round",
        "sr_proxy",
        "draft_rows",
        "contemplate_rows",
        "fallback_rows",
        "target_forwards",
    ];

    /// Contemplate rows pair up with draft rows in future-aware modes and
    /// are absent from the baseline.
    pub fn rows_consistent(&self) -> bool {
        match self.mode {
            Mode::Baseline => self.contemplate_rows == 0 && self.fallback_rows == 0,
            _ => self.contemplate_rows == self.draft_rows,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(flatten)]
    pub row: BenchRow,
    /// Wall-clock nanoseconds; tiny-model timings do not transfer to large
    /// targets on accelerators.
    pub wall_ns: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub records: Vec<BenchRecord>,
}

impl BenchReport {
    pub fn rows(&self) -> impl Iterator<Item = &BenchRow> {
        self.records.iter().map(|r| &r.row)
    }

    pub fn get(&self, mode: Mode, temperature: f64, nodes: usize) -> Option<&BenchRow> {
        self.rows().find(|r| r.mode == mode && r.temperature == temperature && r.nodes == nodes)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }

    /// Writes `path` as CSV and the same path with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        std::fs::write(path.with_extension("json"), serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Held-out prompts: prefixes of the sequences after the training set.
pub fn bench_prompts(cfg: &ExperimentConfig) -> Result<Vec<Vec<u32>>> {
    let b = &cfg.bench;
    if b.prompt_len > cfg.corpus.seq_len {
        return Err(CliError::Config(format!("prompt_len {} exceeds seq_len {}", b.prompt_len, cfg.corpus.seq_len)));
    }
    let corpus = cfg.corpus_with(b.prompts)?;
    Ok(corpus.sequences[cfg.corpus.sequences..].iter().map(|s| s[..b.prompt_len].to_vec()).collect())
}

/// Seed of the keyed generator for prompt `i`.
pub fn prompt_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Runs every temperature × budget cell for one loaded model.
pub fn bench_model(cfg: &ExperimentConfig, mode: Mode, model: &ConfuModel<f64>, prompts: &[Vec<u32>]) -> Result<Vec<BenchRecord>> {
    let b = &cfg.bench;
    let mut out = Vec::new();
    for &temperature in &b.temperatures {
        for &nodes in &b.nodes {
            let dm = DecodeMode::new(mode.variant(), temperature, nodes, b.branch);
            let engine = SpecEngine::new(model, dm)?.with_eos(Some(cfg.eos()));
            let gens = prompts
                .iter()
                .enumerate()
                .map(|(i, p)| engine.generate(p, b.max_tokens, &mut KeyedRng::new(prompt_seed(b.seed, i))))
                .collect::<confu_core::Result<Vec<Generation>>>()?;
            out.push(summarize(mode, temperature, nodes, &gens));
        }
    }
    Ok(out)
}

fn summarize(mode: Mode, temperature: f64, nodes: usize, gens: &[Generation]) -> BenchRecord {
    let rounds: usize = gens.iter().map(|g| g.metrics.rounds).sum();
    let committed: usize = gens.iter().flat_map(|g| &g.accepted_per_round).map(|a| a + 1).sum();
    let tokens: usize = gens.iter().map(|g| g.tokens.len()).sum();
    let forwards: usize = gens.iter().map(|g| g.target_forwards).sum();
    let per_round = |x: usize| if rounds == 0 { 1.0 } else { x as f64 / rounds as f64 };
    // Every generation samples its first token from the prefill pass.
    let from_rounds = tokens - gens.iter().filter(|g| !g.tokens.is_empty()).count();
    BenchRecord {
        row: BenchRow {
            mode,
            temperature,
            nodes,
            prompts: gens.len(),
            rounds,
            tokens,
            tau: per_round(committed),
            tokens_per_round: per_round(from_rounds),
            sr_proxy: if forwards == 0 { 0.0 } else { tokens as f64 / forwards as f64 },
            draft_rows: gens.iter().map(|g| g.metrics.draft_rows).sum(),
            contemplate_rows: gens.iter().map(|g| g.metrics.contemplate_rows).sum(),
            fallback_rows: gens.iter().map(|g| g.fallback_rows).sum(),
            target_forwards: forwards,
        },
        wall_ns: gens.iter().map(|g| g.metrics.wall_ns).sum(),
    }
}

/// The full grid, loading each mode's checkpoint from the config.
pub fn bench(cfg: &ExperimentConfig) -> Result<BenchReport> {
    cfg.bench.validate()?;
    let prompts = bench_prompts(cfg)?;
    let mut report = BenchReport::default();
    for &mode in &cfg.bench.modes {
        let path = cfg
            .bench
            .checkpoints
            .get(&mode)
            .ok_or_else(|| CliError::Config(format!("no checkpoint for mode {mode}")))?;
        if !path.exists() {
            return Err(CliError::Config(format!("checkpoint {} for mode {mode} does not exist", path.display())));
        }
        let model = load_model(cfg, mode, path)?;
        report.records.extend(bench_model(cfg, mode, &model, &prompts)?);
    }
    Ok(report)
}
