//! Exact output distributions by enumerating every randomness outcome.
//!
//! Speculative decoding is enumerated round by round: the draft, accept and
//! prefill phases are replayed under every scripted choice while the target
//! pass of a round runs once per distinct state. States reaching the same
//! tokens and future prediction are merged.

use std::collections::BTreeMap;

use crate::draft::probs_f64;
use crate::engine::decode::{DecodeState, SpecEngine};
use crate::engine::rng::enumerate_outcomes;
use crate::error::{ConfuError, Result};
use crate::model::ConfuModel;
use crate::scalar::Scalar;

/// Largest vocabulary and output length accepted for exhaustive checks.
pub const EXHAUSTIVE_MAX_VOCAB: usize = 8;
pub const EXHAUSTIVE_MAX_TOKENS: usize = 4;

pub type SequenceDistribution = BTreeMap<Vec<u32>, f64>;

fn check_size(vocab: usize, max_tokens: usize) -> Result<()> {
    if vocab > EXHAUSTIVE_MAX_VOCAB || max_tokens > EXHAUSTIVE_MAX_TOKENS {
        return Err(ConfuError::Config(format!(
            "exhaustive enumeration needs vocab <= {EXHAUSTIVE_MAX_VOCAB} and length <= {EXHAUSTIVE_MAX_TOKENS} \
             (got {vocab}, {max_tokens})"
        )));
    }
    Ok(())
}

type StateKey = (Vec<u32>, Vec<u64>);

fn state_key<S: Scalar>(st: &DecodeState<S>) -> StateKey {
    let f = st.future.as_ref().map_or_else(Vec::new, |f| f.f.iter().map(|x| x.as_f64().to_bits()).collect());
    (st.output.clone(), f)
}

/// Exact distribution of speculative-decoding outputs.
pub fn speculative_distribution<S: Scalar>(
    engine: &SpecEngine<'_, S>,
    vocab: usize,
    prompt: &[u32],
    max_tokens: usize,
) -> Result<SequenceDistribution> {
    check_size(vocab, max_tokens)?;
    let mut result = SequenceDistribution::new();
    let mut frontier: BTreeMap<StateKey, (f64, DecodeState<S>)> = BTreeMap::new();
    for (p, mut st) in enumerate_outcomes(|rng| engine.start(prompt, rng))? {
        if st.output.len() >= max_tokens {
            st.done = true;
        }
        frontier.entry(state_key(&st)).and_modify(|e| e.0 += p).or_insert((p, st));
    }
    while !frontier.is_empty() {
        let mut next: BTreeMap<StateKey, (f64, DecodeState<S>)> = BTreeMap::new();
        for (_, (p, st)) in frontier {
            if st.done {
                *result.entry(st.output.clone()).or_insert(0.0) += p;
                continue;
            }
            for (p_tree, tree) in enumerate_outcomes(|rng| engine.draft_phase(&st, rng))? {
                let verify = engine.verify_phase(&st, &tree)?;
                for (p_acc, acc) in enumerate_outcomes(|rng| engine.accept_phase(&st, &tree, &verify, rng))? {
                    let mut s2 = st.clone();
                    engine.commit_phase(&mut s2, &tree, &verify, &acc, max_tokens)?;
                    let mass = p * p_tree * p_acc;
                    next.entry(state_key(&s2)).and_modify(|e| e.0 += mass).or_insert((mass, s2));
                }
            }
        }
        frontier = next;
    }
    Ok(result)
}

/// Exact distribution of plain autoregressive sampling from the target.
pub fn autoregressive_distribution<S: Scalar>(
    model: &ConfuModel<S>,
    prompt: &[u32],
    max_tokens: usize,
    temperature: f64,
    eos: Option<u32>,
) -> Result<SequenceDistribution> {
    check_size(model.cfg.target.vocab_size, max_tokens)?;
    let pre = model.target.prefill(&model.store, prompt, None, None)?;
    let mut out = SequenceDistribution::new();
    let mut stack = vec![(1.0, Vec::new(), pre.cache, pre.logits)];
    while let Some((mass, seq, cache, logits)) = stack.pop() {
        let p = probs_f64(&logits, temperature);
        for (tok, &pt) in p.iter().enumerate() {
            if pt == 0.0 {
                continue;
            }
            let mut s = seq.clone();
            s.push(tok as u32);
            if s.len() == max_tokens || Some(tok as u32) == eos {
                *out.entry(s).or_insert(0.0) += mass * pt;
            } else {
                let mut c = cache.clone();
                let (l, _) = model.target.decode_step(&model.store, &mut c, tok as u32)?;
                stack.push((mass * pt, s, c, l));
            }
        }
    }
    Ok(out)
}

/// Total variation distance between two sequence distributions.
pub fn total_variation(a: &SequenceDistribution, b: &SequenceDistribution) -> f64 {
    let mut keys: Vec<&Vec<u32>> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    0.5 * keys.iter().map(|k| (a.get(*k).unwrap_or(&0.0) - b.get(*k).unwrap_or(&0.0)).abs()).sum::<f64>()
}
