//! Drafting, verification, acceptance and commit, one round at a time.
//!
//! A round starts from committed cache rows plus one pending root token (the
//! previous correction or bonus token, not yet in the cache). The tree is
//! verified together with the root in one target pass; the root and the
//! accepted nodes are then committed and the new correction or bonus token
//! becomes the next root.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::draft::{probs_f64, DraftContext, DraftHead, DraftInputSlot, DraftTree, FutureMode};
use crate::engine::accept::{accept_tree, AcceptRule, TreeAcceptance};
use crate::engine::rng::{DrawKey, Purpose, Randomness};
use crate::error::{ConfuError, Result};
use crate::future::{select_future, FuturePrediction, FutureSource};
use crate::model::ConfuModel;
use crate::scalar::Scalar;
use crate::target::{verification_mask, KvCache, VerifyOutput, VerifyRows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Confu,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeMode {
    pub temperature: f64,
    pub rule: AcceptRule,
    pub variant: Variant,
    /// Draft node budget `T`; zero disables drafting.
    pub nodes: usize,
    pub branch: usize,
    /// Sample a chain from the draft instead of building a ranked tree.
    /// Needs `branch == 1` and a positive temperature.
    pub sample_drafts: bool,
}

impl DecodeMode {
    pub fn new(variant: Variant, temperature: f64, nodes: usize, branch: usize) -> Self {
        Self { temperature, rule: AcceptRule::Lossless, variant, nodes, branch, sample_drafts: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(ConfuError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.branch == 0 {
            return Err(ConfuError::Config("branch factor must be at least 1".into()));
        }
        if self.sample_drafts && self.branch != 1 {
            return Err(ConfuError::Config("sampled drafts are chains: branch must be 1".into()));
        }
        Ok(())
    }

    fn samples_chain(&self) -> bool {
        self.sample_drafts && self.temperature > 0.0
    }
}

/// Per-generation counters, serialized as the metrics JSON.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean tokens committed per round, including the correction or bonus.
    pub tau: f64,
    pub tokens: usize,
    pub rounds: usize,
    pub draft_rows: usize,
    pub contemplate_rows: usize,
    pub wall_ns: u64,
}

#[derive(Clone, Debug)]
pub struct DecodeState<S> {
    pub cache: KvCache<S>,
    draft_ctx: DraftContext<S>,
    /// Pending token: sampled, not yet in the cache.
    pub root: u32,
    pub future: Option<FuturePrediction<S>>,
    /// Generated tokens, ending with the pending root.
    pub output: Vec<u32>,
    pub round: u64,
    pub done: bool,
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundResult<S> {
    pub accepted: Vec<u32>,
    pub a: usize,
    pub next_token: u32,
    pub bonus: bool,
    pub future: Option<FuturePrediction<S>>,
    pub rows: VerifyRows,
    /// Rows of the one-row contemplate pass after a fully rejected round.
    pub fallback_rows: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    pub metrics: Metrics,
    pub accepted_per_round: Vec<usize>,
    /// Prefill, verification and fallback passes of the target.
    pub target_forwards: usize,
    pub fallback_rows: usize,
    pub truncated: bool,
    /// Times each `[con]` / `[f]` expert was selected.
    pub con_expert_usage: Vec<u64>,
    pub f_expert_usage: Vec<u64>,
}

impl Generation {
    /// Tokens per target forward pass.
    pub fn sr_proxy(&self) -> f64 {
        if self.target_forwards == 0 {
            return 0.0;
        }
        self.tokens.len() as f64 / self.target_forwards as f64
    }
}

pub struct SpecEngine<'m, S> {
    model: &'m ConfuModel<S>,
    mode: DecodeMode,
    draft: DraftHead,
    eos: Option<u32>,
    usage: std::cell::RefCell<(Vec<u64>, Vec<u64>)>,
}

impl<'m, S: Scalar> SpecEngine<'m, S> {
    pub fn new(model: &'m ConfuModel<S>, mode: DecodeMode) -> Result<Self> {
        mode.validate()?;
        let fm = match mode.variant {
            Variant::Baseline => FutureMode::Ablated,
            Variant::Confu => FutureMode::Required,
        };
        let usage = (vec![0; model.moe_con.n_expert()], vec![0; model.moe_f.n_expert()]);
        Ok(Self { model, draft: model.draft.with_mode(fm), mode, eos: None, usage: usage.into() })
    }

    pub fn with_eos(mut self, eos: Option<u32>) -> Self {
        self.eos = eos;
        self
    }

    pub fn mode(&self) -> &DecodeMode {
        &self.mode
    }

    fn confu(&self) -> bool {
        self.mode.variant == Variant::Confu
    }

    fn con_embed(&self, tap: &[S]) -> Result<Vec<S>> {
        let (e, rep) = self.model.con_embed(tap)?;
        let mut u = self.usage.borrow_mut();
        rep.selected.iter().for_each(|&i| u.0[i] += 1);
        Ok(e)
    }

    fn ctx_slot(&self, cache: &KvCache<S>, k: usize) -> Result<DraftInputSlot<S>> {
        let store = &self.model.store;
        let feat = self.draft.down_project(store, cache.tap(k))?;
        self.draft.slot(store, cache.tokens()[k + 1], feat)
    }

    /// Prefill and the first target sample.
    pub fn start(&self, prompt: &[u32], rng: &mut dyn Randomness) -> Result<DecodeState<S>> {
        let m = self.model;
        let con_fn = |tap: &[S]| self.con_embed(tap);
        let con: Option<&dyn Fn(&[S]) -> Result<Vec<S>>> = if self.confu() { Some(&con_fn) } else { None };
        let soft = self.confu().then_some(&m.soft);
        let pre = m.target.prefill(&m.store, prompt, soft, con)?;
        let p = probs_f64(&pre.logits, self.mode.temperature);
        let root = rng.categorical(DrawKey::new(0, 0, Purpose::Prefill), &p)? as u32;
        let mut draft_ctx = self.draft.new_context();
        let slots = (0..prompt.len() - 1).map(|k| self.ctx_slot(&pre.cache, k)).collect::<Result<Vec<_>>>()?;
        self.draft.extend_context(&m.store, &mut draft_ctx, &slots)?;
        let mut st = DecodeState {
            cache: pre.cache,
            draft_ctx,
            root,
            future: pre.future,
            output: vec![root],
            round: 0,
            done: false,
            truncated: false,
        };
        self.check_eos(&mut st);
        Ok(st)
    }

    fn check_eos(&self, st: &mut DecodeState<S>) {
        if let Some(e) = self.eos {
            if let Some(i) = st.output.iter().position(|&t| t == e) {
                st.output.truncate(i + 1);
                st.done = true;
            }
        }
    }

    /// Node budget that still fits the position range.
    fn budget(&self, st: &DecodeState<S>) -> Option<usize> {
        let room = self.model.cfg.target.max_seq_len.checked_sub(st.cache.content_len() + 2)?;
        Some(self.mode.nodes.min(room))
    }

    fn root_and_future(&self, st: &DecodeState<S>) -> Result<(DraftInputSlot<S>, Option<DraftInputSlot<S>>)> {
        let store = &self.model.store;
        let tap = st.cache.last_tap().ok_or_else(|| ConfuError::State("empty cache".into()))?;
        let feat = self.draft.down_project(store, tap)?;
        let root = self.draft.slot(store, st.root, feat)?;
        let future = match (&st.future, self.confu()) {
            (Some(f), true) => {
                let (slot, rep) = self.model.future_slot(tap, &f.f)?;
                let mut u = self.usage.borrow_mut();
                rep.selected.iter().for_each(|&i| u.1[i] += 1);
                Some(slot)
            }
            (None, true) => return Err(ConfuError::Contract("confu round without a future prediction".into())),
            _ => None,
        };
        Ok((root, future))
    }

    /// Builds this round's draft tree.
    pub fn draft_phase(&self, st: &DecodeState<S>, rng: &mut dyn Randomness) -> Result<DraftTree> {
        let budget = self.budget(st).ok_or_else(|| ConfuError::Capacity("no room for another round".into()))?;
        if budget == 0 {
            return Ok(DraftTree::default());
        }
        let (root, future) = self.root_and_future(st)?;
        let store = &self.model.store;
        let round = st.round + 1;
        if self.mode.samples_chain() {
            let mut sample = |depth: usize, q: &[f64]| rng.categorical(DrawKey::new(round, depth as u64, Purpose::Draft), q);
            self.draft.build_sampled_chain(
                store,
                &st.draft_ctx,
                &root,
                future.as_ref(),
                budget,
                self.mode.temperature,
                &mut sample,
            )
        } else {
            self.draft.build_draft_tree(store, &st.draft_ctx, &root, future.as_ref(), budget, self.mode.branch)
        }
    }

    /// One target pass over the root, the tree and (confu) contemplate rows.
    pub fn verify_phase(&self, st: &DecodeState<S>, tree: &DraftTree) -> Result<VerifyOutput<S>> {
        let m = self.model;
        let mask = verification_mask(&st.cache, tree, self.confu());
        let cons = if self.confu() {
            let tap = st.cache.last_tap().ok_or_else(|| ConfuError::State("empty cache".into()))?;
            let con = self.con_embed(tap)?;
            Some(vec![con; tree.len()])
        } else {
            None
        };
        m.target.verify_tree(&m.store, &st.cache, st.root, tree, &mask, cons.as_deref())
    }

    pub fn accept_phase(
        &self,
        st: &DecodeState<S>,
        tree: &DraftTree,
        verify: &VerifyOutput<S>,
        rng: &mut dyn Randomness,
    ) -> Result<TreeAcceptance> {
        let t = self.mode.temperature;
        let root_p = probs_f64(&verify.root_logits, t);
        let node_p: Vec<Vec<f64>> = verify.node_logits.iter().map(|l| probs_f64(l, t)).collect();
        accept_tree(tree, &root_p, &node_p, self.mode.rule, rng, st.round + 1)
    }

    /// Commits the root and accepted rows, hands over the future and makes
    /// the correction or bonus token the new root.
    pub fn commit_phase(
        &self,
        st: &mut DecodeState<S>,
        tree: &DraftTree,
        verify: &VerifyOutput<S>,
        acc: &TreeAcceptance,
        max_tokens: usize,
    ) -> Result<RoundResult<S>> {
        let m = self.model;
        let before = st.cache.content_len();
        m.target.commit(&mut st.cache, verify, st.root, tree, &acc.accepted)?;
        let after = st.cache.content_len();
        let slots = (before.saturating_sub(1)..after - 1).map(|k| self.ctx_slot(&st.cache, k)).collect::<Result<Vec<_>>>()?;
        self.draft.extend_context(&m.store, &mut st.draft_ctx, &slots)?;
        let mut fallback_rows = 0;
        let future = if self.confu() {
            if acc.accepted.is_empty() {
                fallback_rows = 1;
                let tap = st.cache.last_tap().expect("root was committed");
                let con = self.con_embed(tap)?;
                Some(m.target.contemplate(&m.store, &st.cache, &con, FutureSource::Fallback)?)
            } else {
                Some(select_future(&verify.futures, &acc.accepted)?)
            }
        } else {
            None
        };
        let accepted: Vec<u32> = acc.accepted.iter().map(|&i| tree.nodes()[i].token).collect();
        st.output.extend_from_slice(&accepted);
        st.output.push(acc.next_token);
        st.root = acc.next_token;
        st.future = future.clone();
        st.round += 1;
        self.check_eos(st);
        if st.output.len() >= max_tokens {
            st.output.truncate(max_tokens);
            st.done = true;
        }
        Ok(RoundResult {
            a: accepted.len(),
            accepted,
            next_token: acc.next_token,
            bonus: acc.bonus,
            future,
            rows: verify.rows,
            fallback_rows,
        })
    }

    /// A whole round: draft, verify, accept, commit.
    pub fn round(&self, st: &mut DecodeState<S>, rng: &mut dyn Randomness, max_tokens: usize) -> Result<RoundResult<S>> {
        let tree = self.draft_phase(st, rng)?;
        let verify = self.verify_phase(st, &tree)?;
        let acc = self.accept_phase(st, &tree, &verify, rng)?;
        self.commit_phase(st, &tree, &verify, &acc, max_tokens)
    }

    /// Generates up to `max_tokens` tokens after `prompt`.
    pub fn generate(&self, prompt: &[u32], max_tokens: usize, rng: &mut dyn Randomness) -> Result<Generation> {
        if prompt.is_empty() {
            return Err(ConfuError::Contract("prompt must be non-empty".into()));
        }
        if max_tokens == 0 {
            return Ok(Generation { metrics: Metrics { tau: 1.0, ..Metrics::default() }, ..Generation::default() });
        }
        *self.usage.borrow_mut() = (vec![0; self.model.moe_con.n_expert()], vec![0; self.model.moe_f.n_expert()]);
        let clock = Instant::now();
        let mut st = self.start(prompt, rng)?;
        let mut g = Generation { target_forwards: 1, ..Generation::default() };
        if st.output.len() >= max_tokens {
            st.done = true;
        }
        while !st.done {
            if self.budget(&st).is_none() {
                st.truncated = true;
                break;
            }
            let r = self.round(&mut st, rng, max_tokens)?;
            g.accepted_per_round.push(r.a);
            g.metrics.draft_rows += r.rows.draft;
            g.metrics.contemplate_rows += r.rows.contemplate;
            g.fallback_rows += r.fallback_rows;
            g.target_forwards += 1 + usize::from(r.fallback_rows > 0);
        }
        g.metrics.rounds = g.accepted_per_round.len();
        g.metrics.tau = if g.metrics.rounds == 0 {
            1.0
        } else {
            g.accepted_per_round.iter().map(|a| (a + 1) as f64).sum::<f64>() / g.metrics.rounds as f64
        };
        g.metrics.tokens = st.output.len();
        g.metrics.wall_ns = clock.elapsed().as_nanos() as u64;
        g.tokens = st.output;
        g.truncated = st.truncated;
        let (c, f) = self.usage.borrow().clone();
        g.con_expert_usage = c;
        g.f_expert_usage = f;
        Ok(g)
    }
}

/// Plain autoregressive sampling from the target with the same keyed draws
/// the engine uses for its prefill sample and bonus tokens.
pub fn autoregressive<S: Scalar>(
    model: &ConfuModel<S>,
    prompt: &[u32],
    max_tokens: usize,
    temperature: f64,
    eos: Option<u32>,
    rng: &mut dyn Randomness,
) -> Result<Vec<u32>> {
    let pre = model.target.prefill(&model.store, prompt, None, None)?;
    let mut cache = pre.cache;
    let mut logits = pre.logits;
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let p = probs_f64(&logits, temperature);
        let key = if out.is_empty() { DrawKey::new(0, 0, Purpose::Prefill) } else { DrawKey::new(out.len() as u64, 0, Purpose::Bonus) };
        let tok = rng.categorical(key, &p)? as u32;
        out.push(tok);
        if Some(tok) == eos || out.len() == max_tokens {
            break;
        }
        logits = model.target.decode_step(&model.store, &mut cache, tok)?.0;
    }
    Ok(out)
}
