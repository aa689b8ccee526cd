//! `decode`: one generation with metrics.

use confu_core::engine::{DecodeMode, KeyedRng, Metrics, SpecEngine};
use confu_core::model::ConfuModel;
use confu_core::train::{ByteTokenizer, CorpusSource};
use serde::Serialize;

use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DecodeOutput {
    pub mode: Mode,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    /// Generated bytes for byte-level corpora, invalid UTF-8 replaced.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    pub metrics: Metrics,
    pub accepted_per_round: Vec<usize>,
    pub sr_proxy: f64,
}

/// Comma-separated ids, or text for byte-level corpora.
pub fn parse_prompt(cfg: &ExperimentConfig, ids: Option<&str>, text: Option<&str>) -> Result<Vec<u32>> {
    match (ids, text) {
        (Some(ids), None) => ids
            .split(',')
            .map(|s| s.trim().parse::<u32>().map_err(|e| CliError::Config(format!("prompt id {s:?}: {e}"))))
            .collect(),
        (None, Some(text)) => match cfg.corpus.source {
            // Without the EOS the tokenizer appends.
            CorpusSource::File(_) => {
                let mut ids = ByteTokenizer.encode(text);
                ids.pop();
                Ok(ids)
            }
            CorpusSource::Synthetic(_) => Err(CliError::Config("text prompts need a byte-level (file) corpus".into())),
        },
        _ => Err(CliError::Config("give exactly one of --prompt or --text".into())),
    }
}

pub fn decode(
    cfg: &ExperimentConfig,
    model: &ConfuModel<f64>,
    mode: Mode,
    dm: DecodeMode,
    prompt: &[u32],
    max_tokens: usize,
    seed: u64,
) -> Result<DecodeOutput> {
    let vocab = model.cfg.target.vocab_size;
    if let Some(&bad) = prompt.iter().find(|&&t| t as usize >= vocab) {
        return Err(CliError::Config(format!("prompt token {bad} outside the vocabulary of {vocab}")));
    }
    let engine = SpecEngine::new(model, dm)?.with_eos(Some(cfg.eos()));
    let g = engine.generate(prompt, max_tokens, &mut KeyedRng::new(seed))?;
    let text = match cfg.corpus.source {
        CorpusSource::File(_) => {
            let bytes: Vec<u8> = g.tokens.iter().filter_map(|&t| u8::try_from(t).ok()).collect();
            Some(String::from_utf8_lossy(&bytes).into_owned())
        }
        CorpusSource::Synthetic(_) => None,
    };
    Ok(DecodeOutput {
        mode,
        prompt: prompt.to_vec(),
        sr_proxy: g.sr_proxy(),
        tokens: g.tokens,
        text,
        metrics: g.metrics,
        accepted_per_round: g.accepted_per_round,
    })
}
