//! Single-layer draft head over fused (token embedding, feature) slots, with
//! an optional fixed future slot, and the best-first draft-tree builder.
//!
//! Slot `k` of a drafting context pairs the embedding of token `k+1` with the
//! down-projected target tap at position `k`, so its output predicts token
//! `k+2`. Self-generated slots pair a drafted token with the draft hidden
//! state that proposed it. The future slot is one extra key visible to every
//! query; key order is always future, context, then pending slots.

use std::collections::BinaryHeap;

use rand::Rng;

use crate::error::{ConfuError, Result};
use crate::future::MoEEmbedder;
use crate::nn::{normal_tensor, ones_row, AttentionMask, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::target::TargetModel;
use crate::tensor::Tensor;

pub const DRAFT_GROUP: &str = "draft";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DraftConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    /// Chain depth `K`.
    pub chain_depth: usize,
    /// Tree node budget `T`.
    pub tree_budget: usize,
    pub branch_k: usize,
    pub mlp_mult: usize,
}

impl DraftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chain_depth == 0 || self.tree_budget < self.chain_depth || self.branch_k == 0 {
            return Err(ConfuError::Config(format!(
                "draft budgets need T >= K >= 1 and k >= 1 (T={}, K={}, k={})",
                self.tree_budget, self.chain_depth, self.branch_k
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ConfuError::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        Ok(())
    }
}

/// Whether a head consumes the future slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FutureMode {
    Required,
    Ablated,
}

/// One draft input position before fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftInputSlot<S> {
    pub token_embedding: Vec<S>,
    pub feature: Vec<S>,
}

/// Keys and values of committed context slots.
#[derive(Clone, Debug)]
pub struct DraftContext<S> {
    keys: Tensor<S>,
    values: Tensor<S>,
}

impl<S: Scalar> DraftContext<S> {
    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of one drafting step.
#[derive(Clone, Debug, PartialEq)]
pub struct DraftStep<S> {
    pub logits: Vec<S>,
    /// Draft distribution at temperature 1.
    pub probs: Vec<f64>,
    /// Draft hidden state `h̃` of the queried slot.
    pub hidden: Vec<S>,
}

#[derive(Clone, Debug)]
pub struct DraftHead {
    cfg: DraftConfig,
    tok_emb: ParamId,
    w_proj: ParamId,
    fuse: ParamId,
    f_proj: ParamId,
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w1: ParamId,
    w2: ParamId,
    final_norm: ParamId,
    lm_head: ParamId,
    mode: FutureMode,
}

/// Pre-fusion tape inputs.
struct FusedKv {
    x: Var,
    k: Var,
    v: Var,
}

impl DraftHead {
    /// Builds the head next to `target`, sharing its (frozen) token table and
    /// copying its final norm and output head as the starting point.
    pub fn init<S: Scalar>(
        cfg: DraftConfig,
        target: &TargetModel,
        store: &mut ParamStore<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let tc = target.config();
        if cfg.d_model != tc.d_model || cfg.vocab_size != tc.vocab_size {
            return Err(ConfuError::Config("draft width and vocab must match the target".into()));
        }
        let d = cfg.d_model;
        let h = cfg.mlp_mult * d;
        let g = DRAFT_GROUP;
        let lin = 1.0 / (d as f64).sqrt();
        let final_norm = store.get(target.final_norm()).clone();
        let lm_head = store.get(target.lm_head()).clone();
        Ok(Self {
            tok_emb: target.tok_emb(),
            w_proj: store.add(g, "draft.w_proj", normal_tensor(rng, d, 3 * d, 1.0 / (3.0 * d as f64).sqrt()))?,
            fuse: store.add(g, "draft.fuse", normal_tensor(rng, d, 2 * d, 1.0 / (2.0 * d as f64).sqrt()))?,
            f_proj: store.add(g, "draft.f_proj", Tensor::identity(d))?,
            attn_norm: store.add(g, "draft.attn_norm", ones_row(d))?,
            wq: store.add(g, "draft.wq", normal_tensor(rng, d, d, lin))?,
            wk: store.add(g, "draft.wk", normal_tensor(rng, d, d, lin))?,
            wv: store.add(g, "draft.wv", normal_tensor(rng, d, d, lin))?,
            wo: store.add(g, "draft.wo", normal_tensor(rng, d, d, lin * 0.5))?,
            mlp_norm: store.add(g, "draft.mlp_norm", ones_row(d))?,
            w1: store.add(g, "draft.w1", normal_tensor(rng, h, d, lin))?,
            w2: store.add(g, "draft.w2", normal_tensor(rng, d, h, 0.5 / (h as f64).sqrt()))?,
            final_norm: store.add(g, "draft.final_norm", final_norm)?,
            lm_head: store.add(g, "draft.lm_head", lm_head)?,
            cfg,
            mode: FutureMode::Required,
        })
    }

    pub fn config(&self) -> &DraftConfig {
        &self.cfg
    }

    pub fn mode(&self) -> FutureMode {
        self.mode
    }

    /// The same weights under another future mode.
    pub fn with_mode(&self, mode: FutureMode) -> Self {
        Self { mode, ..self.clone() }
    }

    pub fn w_proj(&self) -> ParamId {
        self.w_proj
    }

    pub fn f_proj(&self) -> ParamId {
        self.f_proj
    }

    pub fn fuse_weight(&self) -> ParamId {
        self.fuse
    }

    // ---- tape-level building blocks -------------------------------------

    /// `W_proj · h_cat` for each row of `taps [n, 3d]`.
    pub fn project<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, taps: Var) -> Result<Var> {
        let w = tape.param(store, self.w_proj);
        tape.matmul_t(taps, w)
    }

    /// Token embeddings of `tokens` from the shared table.
    pub fn embed<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, tokens: &[u32]) -> Result<Var> {
        let te = tape.param(store, self.tok_emb);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        tape.gather_rows(te, &idx)
    }

    /// Fuses `[tok | feat]` rows down to the model width.
    pub fn fuse<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        tok: Var,
        feat: Var,
    ) -> Result<Var> {
        let cat = tape.concat_cols(&[tok, feat])?;
        let w = tape.param(store, self.fuse);
        tape.matmul_t(cat, w)
    }

    /// Future-slot feature part: `f_proj · f`.
    pub fn project_future<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        f: Var,
    ) -> Result<Var> {
        let w = tape.param(store, self.f_proj);
        tape.matmul_t(f, w)
    }

    fn normed<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.attn_norm);
        tape.rms_norm(x, g, S::lit(1e-6))
    }

    /// Key and value rows of fused slot inputs.
    pub fn slot_kv<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<(Var, Var)> {
        let xn = self.normed(tape, store, x)?;
        let wk = tape.param(store, self.wk);
        let wv = tape.param(store, self.wv);
        Ok((tape.matmul_t(xn, wk)?, tape.matmul_t(xn, wv)?))
    }

    fn fused_kv<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, x: Var) -> Result<FusedKv> {
        let (k, v) = self.slot_kv(tape, store, x)?;
        Ok(FusedKv { x, k, v })
    }

    /// The transformer layer for query slot inputs `xq` over `keys`/`values`.
    /// Returns the draft hidden states `h̃`.
    pub fn layer<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        xq: Var,
        keys: Var,
        values: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let xn = self.normed(tape, store, xq)?;
        let wq = tape.param(store, self.wq);
        let q = tape.matmul_t(xn, wq)?;
        let att = tape.attention(q, keys, values, mask, self.cfg.n_heads)?;
        let wo = tape.param(store, self.wo);
        let proj = tape.matmul_t(att, wo)?;
        let a = tape.add(xq, proj)?;
        let gm = tape.param(store, self.mlp_norm);
        let an = tape.rms_norm(a, gm, S::lit(1e-6))?;
        let w1 = tape.param(store, self.w1);
        let w2 = tape.param(store, self.w2);
        let up = tape.matmul_t(an, w1)?;
        let act = tape.silu(up);
        let down = tape.matmul_t(act, w2)?;
        tape.add(a, down)
    }

    pub fn head<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, h: Var) -> Result<Var> {
        let g = tape.param(store, self.final_norm);
        let hn = tape.rms_norm(h, g, S::lit(1e-6))?;
        let w = tape.param(store, self.lm_head);
        tape.matmul_t(hn, w)
    }

    // ---- inference ------------------------------------------------------

    /// `W_proj · h_cat` for one tap.
    pub fn down_project<S: Scalar>(&self, store: &ParamStore<S>, h_cat: &[S]) -> Result<Vec<S>> {
        if h_cat.len() != 3 * self.cfg.d_model {
            return Err(ConfuError::Dimension(format!("tap of {} for width {}", h_cat.len(), 3 * self.cfg.d_model)));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::row_vector(h_cat.to_vec()));
        let y = self.project(&mut tape, store, x)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Slot for a known token and feature.
    pub fn slot<S: Scalar>(&self, store: &ParamStore<S>, token: u32, feature: Vec<S>) -> Result<DraftInputSlot<S>> {
        let table = store.get(self.tok_emb);
        if token as usize >= table.rows() {
            return Err(ConfuError::Dimension(format!("token {token} outside vocab {}", table.rows())));
        }
        if feature.len() != self.cfg.d_model {
            return Err(ConfuError::Dimension(format!("feature of {} for width {}", feature.len(), self.cfg.d_model)));
        }
        Ok(DraftInputSlot { token_embedding: table.row(token as usize).to_vec(), feature })
    }

    /// The future slot `([f], f_proj · f)` with `[f] = moe_f(h_md)`.
    pub fn future_slot<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        moe_f: &MoEEmbedder,
        h_md: &[S],
        f: &[S],
    ) -> Result<DraftInputSlot<S>> {
        let (emb, _) = moe_f.embed(store, h_md)?;
        let mut tape = Tape::inference();
        let fv = tape.constant(Tensor::row_vector(f.to_vec()));
        let feat = self.project_future(&mut tape, store, fv)?;
        Ok(DraftInputSlot { token_embedding: emb, feature: tape.value(feat).data().to_vec() })
    }

    fn slot_rows<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, slots: &[&DraftInputSlot<S>]) -> Result<Var> {
        let d = self.cfg.d_model;
        let mut tok = Vec::with_capacity(slots.len() * d);
        let mut feat = Vec::with_capacity(slots.len() * d);
        for s in slots {
            if s.token_embedding.len() != d || s.feature.len() != d {
                return Err(ConfuError::Dimension(format!("draft slot parts must have width {d}")));
            }
            tok.extend_from_slice(&s.token_embedding);
            feat.extend_from_slice(&s.feature);
        }
        let t = tape.constant(Tensor::matrix(slots.len(), d, tok)?);
        let f = tape.constant(Tensor::matrix(slots.len(), d, feat)?);
        self.fuse(tape, store, t, f)
    }

    pub fn new_context<S: Scalar>(&self) -> DraftContext<S> {
        let d = self.cfg.d_model;
        DraftContext { keys: Tensor::zeros(&[0, d]), values: Tensor::zeros(&[0, d]) }
    }

    /// Appends committed slots to a drafting context.
    pub fn extend_context<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &mut DraftContext<S>,
        slots: &[DraftInputSlot<S>],
    ) -> Result<()> {
        if slots.is_empty() {
            return Ok(());
        }
        let mut tape = Tape::inference();
        let refs: Vec<&DraftInputSlot<S>> = slots.iter().collect();
        let x = self.slot_rows(&mut tape, store, &refs)?;
        let (k, v) = self.slot_kv(&mut tape, store, x)?;
        ctx.keys.push_rows(tape.value(k).data())?;
        ctx.values.push_rows(tape.value(v).data())?;
        Ok(())
    }

    fn check_future<'f, S>(&self, future: Option<&'f DraftInputSlot<S>>) -> Result<Option<&'f DraftInputSlot<S>>> {
        match (self.mode, future) {
            (FutureMode::Required, None) => Err(ConfuError::Contract("future slot missing in confu mode".into())),
            (FutureMode::Required, f) => Ok(f),
            (FutureMode::Ablated, _) => Ok(None),
        }
    }

    /// Drafts from cached context plus `pending` slots; the last pending slot
    /// is the query and sees everything.
    pub fn draft_next_cached<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &DraftContext<S>,
        pending: &[DraftInputSlot<S>],
        future: Option<&DraftInputSlot<S>>,
    ) -> Result<DraftStep<S>> {
        let future = self.check_future(future)?;
        if pending.is_empty() {
            return Err(ConfuError::Contract("draft step needs a query slot".into()));
        }
        let mut tape = Tape::inference();
        let mut key_parts = Vec::new();
        let mut value_parts = Vec::new();
        if let Some(f) = future {
            let fx = self.slot_rows(&mut tape, store, &[f])?;
            let kv = self.fused_kv(&mut tape, store, fx)?;
            key_parts.push(kv.k);
            value_parts.push(kv.v);
        }
        if !ctx.is_empty() {
            key_parts.push(tape.constant_ref(&ctx.keys));
            value_parts.push(tape.constant_ref(&ctx.values));
        }
        let refs: Vec<&DraftInputSlot<S>> = pending.iter().collect();
        let px = self.slot_rows(&mut tape, store, &refs)?;
        let kv = self.fused_kv(&mut tape, store, px)?;
        key_parts.push(kv.k);
        value_parts.push(kv.v);
        let keys = tape.concat_rows(&key_parts)?;
        let values = tape.concat_rows(&value_parts)?;
        let xq = tape.gather_rows(kv.x, &[pending.len() - 1])?;
        let n_keys = tape.shape(keys).0;
        let h = self.layer(&mut tape, store, xq, keys, values, &AttentionMask::full(1, n_keys))?;
        let logits = self.head(&mut tape, store, h)?;
        let logits = tape.value(logits).data().to_vec();
        let probs = probs_f64(&logits, 1.0);
        Ok(DraftStep { logits, probs, hidden: tape.value(h).data().to_vec() })
    }

    /// Stateless drafting over `context_slots`; the last slot is the query.
    pub fn draft_next<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        context_slots: &[DraftInputSlot<S>],
        future: Option<&DraftInputSlot<S>>,
    ) -> Result<DraftStep<S>> {
        self.draft_next_cached(store, &self.new_context(), context_slots, future)
    }

    /// Best-first tree of at most `budget` nodes below `root_slot`: the
    /// candidate with the highest cumulative draft log-probability is added
    /// next, and each added node offers its top-`branch` children.
    pub fn build_draft_tree<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &DraftContext<S>,
        root_slot: &DraftInputSlot<S>,
        future: Option<&DraftInputSlot<S>>,
        budget: usize,
        branch: usize,
    ) -> Result<DraftTree> {
        if branch == 0 {
            return Err(ConfuError::Config("branch factor must be at least 1".into()));
        }
        if budget == 0 {
            return Ok(DraftTree::default());
        }
        let root = self.draft_next_cached(store, ctx, std::slice::from_ref(root_slot), future)?;
        // Expanded nodes in pop order: (token, parent pop index, logp, depth, hidden).
        let mut popped: Vec<(u32, Option<usize>, f64, usize, Vec<S>)> = Vec::new();
        let mut heap = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push_children = |heap: &mut BinaryHeap<Candidate>, step: &DraftStep<S>, parent: Option<usize>, base: f64, depth: usize| {
            for tok in top_tokens(&step.probs, branch) {
                heap.push(Candidate { logp: base + step.probs[tok].ln(), seq, token: tok as u32, parent, depth });
                seq += 1;
            }
        };
        push_children(&mut heap, &root, None, 0.0, 1);
        let mut slots_of: Vec<DraftInputSlot<S>> = Vec::new();
        while popped.len() < budget {
            let Some(c) = heap.pop() else { break };
            let feature = match c.parent {
                Some(p) => popped[p].4.clone(),
                None => root.hidden.clone(),
            };
            let slot = self.slot(store, c.token, feature)?;
            let idx = popped.len();
            popped.push((c.token, c.parent, c.logp, c.depth, Vec::new()));
            slots_of.push(slot);
            if popped.len() == budget {
                break;
            }
            let mut pending = vec![root_slot.clone()];
            let mut chain = Vec::new();
            let mut cur = Some(idx);
            while let Some(i) = cur {
                chain.push(i);
                cur = popped[i].1;
            }
            pending.extend(chain.iter().rev().map(|&i| slots_of[i].clone()));
            let step = self.draft_next_cached(store, ctx, &pending, future)?;
            popped[idx].4 = step.hidden.clone();
            push_children(&mut heap, &step, Some(idx), c.logp, c.depth + 1);
        }
        let nodes = popped
            .iter()
            .map(|(tok, parent, logp, depth, _)| DraftNode::new(*tok, *parent, *logp, *depth))
            .collect();
        DraftTree::from_pop_order(nodes)
    }

    /// A chain of `depth` tokens sampled from the draft distribution at
    /// `temperature`; each node keeps the proposal it was drawn from.
    /// `sample(depth, probs)` draws one token index.
    pub fn build_sampled_chain<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        ctx: &DraftContext<S>,
        root_slot: &DraftInputSlot<S>,
        future: Option<&DraftInputSlot<S>>,
        depth: usize,
        temperature: f64,
        sample: &mut dyn FnMut(usize, &[f64]) -> Result<usize>,
    ) -> Result<DraftTree> {
        let mut pending = vec![root_slot.clone()];
        let mut nodes = Vec::with_capacity(depth);
        let mut logp = 0.0;
        for dpt in 1..=depth {
            let step = self.draft_next_cached(store, ctx, &pending, future)?;
            let q = probs_f64(&step.logits, temperature);
            let tok = sample(dpt, &q)?;
            logp += q[tok].ln();
            let parent = (dpt > 1).then(|| dpt - 2);
            nodes.push(DraftNode { proposal: Some(q), ..DraftNode::new(tok as u32, parent, logp, dpt) });
            if dpt < depth {
                pending.push(self.slot(store, tok as u32, step.hidden)?);
            }
        }
        DraftTree::from_nodes(nodes)
    }
}

/// Softmax of `logits / temperature` in `f64`; temperature 0 is one-hot
/// argmax.
pub fn probs_f64<S: Scalar>(logits: &[S], temperature: f64) -> Vec<f64> {
    let l: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    if temperature <= 0.0 {
        let best = crate::tensor::argmax(&l);
        return (0..l.len()).map(|i| if i == best { 1.0 } else { 0.0 }).collect();
    }
    let scaled: Vec<f64> = l.iter().map(|x| x / temperature).collect();
    crate::tensor::softmax(&scaled)
}

/// Top-`k` token ids by probability; ties go to the lower id.
pub fn top_tokens(probs: &[f64], k: usize) -> Vec<usize> {
    crate::future::top_k_indices(probs, k)
}

#[derive(Debug)]
struct Candidate {
    logp: f64,
    seq: u64,
    token: u32,
    parent: Option<usize>,
    depth: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.logp.total_cmp(&other.logp).then(other.seq.cmp(&self.seq))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DraftNode {
    pub token: u32,
    /// Parent node index; `None` for children of the root.
    pub parent: Option<usize>,
    /// Cumulative draft log-probability from the root.
    pub log_prob: f64,
    /// Distance from the root, starting at 1.
    pub depth: usize,
    /// Distribution the token was sampled from, for sampled drafts.
    pub proposal: Option<Vec<f64>>,
}

impl DraftNode {
    pub fn new(token: u32, parent: Option<usize>, log_prob: f64, depth: usize) -> Self {
        Self { token, parent, log_prob, depth, proposal: None }
    }
}

/// Candidate tokens below the pending root, stored breadth-first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DraftTree {
    nodes: Vec<DraftNode>,
}

impl DraftTree {
    /// Validates parent links, depths and breadth-first order.
    pub fn from_nodes(nodes: Vec<DraftNode>) -> Result<Self> {
        for (i, n) in nodes.iter().enumerate() {
            let ok = match n.parent {
                None => n.depth == 1,
                Some(p) => p < i && nodes[p].depth + 1 == n.depth,
            };
            if !ok {
                return Err(ConfuError::Contract(format!("node {i} has an invalid parent link")));
            }
            if i > 0 && nodes[i - 1].depth > n.depth {
                return Err(ConfuError::Contract("tree nodes must be stored breadth-first".into()));
            }
        }
        Ok(Self { nodes })
    }

    /// Reorders nodes given in expansion order into breadth-first order.
    fn from_pop_order(nodes: Vec<DraftNode>) -> Result<Self> {
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by_key(|&i| (nodes[i].depth, i));
        let mut new_index = vec![0; nodes.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let reordered = order
            .iter()
            .map(|&old| {
                let n = &nodes[old];
                DraftNode { parent: n.parent.map(|p| new_index[p]), ..n.clone() }
            })
            .collect();
        Self::from_nodes(reordered)
    }

    /// A chain of `tokens` with unknown draft probabilities.
    pub fn chain(tokens: &[u32]) -> Self {
        let nodes = tokens
            .iter()
            .enumerate()
            .map(|(i, &t)| DraftNode::new(t, i.checked_sub(1), 0.0, i + 1))
            .collect();
        Self { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[DraftNode] {
        &self.nodes
    }

    pub fn max_depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }

    /// Children of `parent` (`None` = root) in rank order.
    pub fn children(&self, parent: Option<usize>) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].parent == parent).collect()
    }

    /// Node indices from the first depth down to `node`, inclusive.
    pub fn path(&self, node: usize) -> Vec<usize> {
        let mut p = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(i) = cur {
            p.push(i);
            cur = self.nodes[i].parent;
        }
        p.reverse();
        p
    }

    pub fn tokens_on_path(&self, node: usize) -> Vec<u32> {
        self.path(node).into_iter().map(|i| self.nodes[i].token).collect()
    }
}
