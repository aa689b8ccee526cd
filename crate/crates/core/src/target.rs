//! The frozen target LM: a pre-norm decoder with learned absolute positions,
//! a KV cache with a reserved soft-prompt region, a three-layer hidden tap,
//! and contemplate-aware prefill and tree verification.
//!
//! Masking rules enforced here:
//! * ordinary and draft rows never see soft-prompt rows or contemplate rows;
//! * a contemplate row sees the soft prompts, exactly what the row it follows
//!   sees, that row itself, and its own position;
//! * a contemplate row following position `p` sits at position `p + 1`.

use rand::Rng;

use crate::draft::DraftTree;
use crate::error::{ConfuError, Result};
use crate::future::{FuturePrediction, FutureSource, SoftPromptSet};
use crate::nn::{normal_tensor, ones_row, AttentionMask, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const TARGET_GROUP: &str = "target";

/// Concatenated hidden states of the tap layers, `3·d_model` wide.
pub type HiddenTap<S> = Vec<S>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TargetConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Initial, middle and final layer whose post-block outputs are tapped.
    pub tap_layers: [usize; 3],
    pub mlp_mult: usize,
}

impl TargetConfig {
    pub fn new(n_layers: usize, d_model: usize, n_heads: usize, vocab_size: usize, max_seq_len: usize) -> Self {
        Self {
            n_layers,
            d_model,
            n_heads,
            vocab_size,
            max_seq_len,
            tap_layers: [0, n_layers / 2, n_layers.saturating_sub(1)],
            mlp_mult: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ConfuError::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 || self.max_seq_len < 2 {
            return bad(format!("degenerate target config {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads.max(1)) || self.n_heads == 0 {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        let [a, b, c] = self.tap_layers;
        if c != self.n_layers - 1 || a > b || b > c {
            return bad(format!("tap layers {:?} for {} layers", self.tap_layers, self.n_layers));
        }
        // Three distinct taps need three layers; shallower models repeat one.
        if self.n_layers >= 3 && !(a < b && b < c) {
            return bad(format!("tap layers {:?} must be strictly increasing", self.tap_layers));
        }
        Ok(())
    }

    pub fn tap_width(&self) -> usize {
        3 * self.d_model
    }
}

#[derive(Clone, Debug)]
struct LayerIds {
    attn_norm: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: ParamId,
    w1: ParamId,
    w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct TargetModel {
    cfg: TargetConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    layers: Vec<LayerIds>,
    final_norm: ParamId,
    lm_head: ParamId,
}

/// Per-layer key/value history. The first `soft_prompt_len` rows of every
/// layer are soft-prompt rows and are never evicted; the rest are
/// append-only content rows.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    soft_len: usize,
    keys: Vec<Tensor<S>>,
    values: Vec<Tensor<S>>,
    tokens: Vec<u32>,
    taps: Vec<HiddenTap<S>>,
}

impl<S: Scalar> KvCache<S> {
    pub fn soft_prompt_len(&self) -> usize {
        self.soft_len
    }

    pub fn content_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn total_rows(&self) -> usize {
        self.soft_len + self.tokens.len()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn tap(&self, pos: usize) -> &[S] {
        &self.taps[pos]
    }

    pub fn last_tap(&self) -> Option<&[S]> {
        self.taps.last().map(Vec::as_slice)
    }

    pub fn layer_keys(&self, layer: usize) -> &Tensor<S> {
        &self.keys[layer]
    }

    pub fn layer_values(&self, layer: usize) -> &Tensor<S> {
        &self.values[layer]
    }

    /// Drops content rows beyond `len`; soft-prompt rows stay.
    pub fn truncate(&mut self, len: usize) {
        if len >= self.tokens.len() {
            return;
        }
        for t in self.keys.iter_mut().chain(self.values.iter_mut()) {
            t.truncate_rows(self.soft_len + len);
        }
        self.tokens.truncate(len);
        self.taps.truncate(len);
    }

    fn append(&mut self, k: &[Vec<S>], v: &[Vec<S>], token: u32, tap: HiddenTap<S>) -> Result<()> {
        for (l, (kr, vr)) in k.iter().zip(v).enumerate() {
            self.keys[l].push_rows(kr)?;
            self.values[l].push_rows(vr)?;
        }
        self.tokens.push(token);
        self.taps.push(tap);
        Ok(())
    }
}

/// Input of one transient row.
#[derive(Clone, Copy, Debug)]
pub enum RowInput<'v, S> {
    Token(u32),
    Vector(&'v [S]),
}

#[derive(Clone, Debug)]
pub struct RowSpec<'v, S> {
    pub input: RowInput<'v, S>,
    pub position: usize,
}

/// Results of a forward pass over transient rows on top of a cache.
#[derive(Clone, Debug)]
pub struct RowsOutput<S> {
    /// New key / value rows, `[layer][row]`.
    pub keys: Vec<Vec<Vec<S>>>,
    pub values: Vec<Vec<Vec<S>>>,
    pub taps: Vec<HiddenTap<S>>,
    /// Final-layer post-block hidden state per row.
    pub last_hidden: Vec<Vec<S>>,
    pub logits: Vec<Vec<S>>,
}

#[derive(Clone, Debug)]
pub struct PrefillOutput<S> {
    /// Target logits at the last ordinary token.
    pub logits: Vec<S>,
    pub future: Option<FuturePrediction<S>>,
    /// Context rows the pass covered: soft prompts + tokens + contemplate.
    pub rows_processed: usize,
    pub cache: KvCache<S>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct VerifyRows {
    pub root: usize,
    pub draft: usize,
    pub contemplate: usize,
}

impl VerifyRows {
    pub fn transient(&self) -> usize {
        self.root + self.draft + self.contemplate
    }
}

#[derive(Clone, Debug)]
pub struct VerifyOutput<S> {
    /// Target logits after the root token (distribution of depth-1 drafts).
    pub root_logits: Vec<S>,
    /// Target logits after each draft node (distribution of its children).
    pub node_logits: Vec<Vec<S>>,
    /// Future prediction from each node's paired contemplate row.
    pub futures: Vec<Option<FuturePrediction<S>>>,
    pub rows: VerifyRows,
    /// Root and draft rows retained for committing accepted tokens.
    retained: RowsOutput<S>,
}

/// Column layout of a verification mask.
struct VerifyLayout {
    soft: usize,
    content: usize,
    nodes: usize,
    contemplate: bool,
}

impl VerifyLayout {
    fn root_col(&self) -> usize {
        self.soft + self.content
    }
    fn node_col(&self, i: usize) -> usize {
        self.root_col() + 1 + i
    }
    fn con_col(&self, i: usize) -> usize {
        self.node_col(self.nodes) + i
    }
    fn rows(&self) -> usize {
        1 + self.nodes * if self.contemplate { 2 } else { 1 }
    }
    fn cols(&self) -> usize {
        self.soft + self.content + self.rows()
    }
}

/// Tree-attention mask for verifying `tree` on top of `cache`.
///
/// Rows: root, then the draft nodes, then (with contemplate) one contemplate
/// row per node. Columns: soft prompts, content, then the same transient rows.
pub fn verification_mask<S: Scalar>(cache: &KvCache<S>, tree: &DraftTree, with_contemplate: bool) -> AttentionMask {
    let lay = VerifyLayout {
        soft: cache.soft_prompt_len(),
        content: cache.content_len(),
        nodes: tree.len(),
        contemplate: with_contemplate,
    };
    let mut mask = AttentionMask::none(lay.rows(), lay.cols());
    let see_prefix = |mask: &mut AttentionMask, row: usize| {
        for c in lay.soft..lay.root_col() + 1 {
            mask.set(row, c, true);
        }
    };
    see_prefix(&mut mask, 0);
    for i in 0..tree.len() {
        let row = 1 + i;
        see_prefix(&mut mask, row);
        for a in tree.path(i) {
            mask.set(row, lay.node_col(a), true);
        }
        if with_contemplate {
            let crow = 1 + tree.len() + i;
            for c in 0..lay.soft {
                mask.set(crow, c, true);
            }
            see_prefix(&mut mask, crow);
            for a in tree.path(i) {
                mask.set(crow, lay.node_col(a), true);
            }
            mask.set(crow, lay.con_col(i), true);
        }
    }
    mask
}

impl TargetModel {
    pub fn init<S: Scalar>(cfg: TargetConfig, store: &mut ParamStore<S>, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let h = cfg.mlp_mult * d;
        let g = TARGET_GROUP;
        let lin = 1.0 / (d as f64).sqrt();
        let resid = lin / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = store.add(g, "target.tok_emb", normal_tensor(rng, cfg.vocab_size, d, 0.5))?;
        let pos_emb = store.add(g, "target.pos_emb", normal_tensor(rng, cfg.max_seq_len, d, 0.1))?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let name = |p: &str| format!("target.l{l}.{p}");
            layers.push(LayerIds {
                attn_norm: store.add(g, &name("attn_norm"), ones_row(d))?,
                wq: store.add(g, &name("wq"), normal_tensor(rng, d, d, lin))?,
                wk: store.add(g, &name("wk"), normal_tensor(rng, d, d, lin))?,
                wv: store.add(g, &name("wv"), normal_tensor(rng, d, d, lin))?,
                wo: store.add(g, &name("wo"), normal_tensor(rng, d, d, resid))?,
                mlp_norm: store.add(g, &name("mlp_norm"), ones_row(d))?,
                w1: store.add(g, &name("w1"), normal_tensor(rng, h, d, lin))?,
                w2: store.add(g, &name("w2"), normal_tensor(rng, d, h, resid / (cfg.mlp_mult as f64).sqrt()))?,
            });
        }
        let final_norm = store.add(g, "target.final_norm", ones_row(d))?;
        let lm_head = store.add(g, "target.lm_head", normal_tensor(rng, cfg.vocab_size, d, lin))?;
        Ok(Self { cfg, tok_emb, pos_emb, layers, final_norm, lm_head })
    }

    pub fn config(&self) -> &TargetConfig {
        &self.cfg
    }

    pub fn tok_emb(&self) -> ParamId {
        self.tok_emb
    }

    pub fn lm_head(&self) -> ParamId {
        self.lm_head
    }

    pub fn final_norm(&self) -> ParamId {
        self.final_norm
    }

    pub fn new_cache<S: Scalar>(&self, store: &ParamStore<S>, soft: Option<&SoftPromptSet>) -> Result<KvCache<S>> {
        let d = self.cfg.d_model;
        let mut keys = Vec::with_capacity(self.cfg.n_layers);
        let mut values = Vec::with_capacity(self.cfg.n_layers);
        let soft_len = soft.map_or(0, SoftPromptSet::len);
        for l in 0..self.cfg.n_layers {
            match soft.filter(|s| !s.is_empty()) {
                Some(sp) => {
                    let (k, v) = sp.layer_kv(store, l);
                    if k.cols() != d || k.rows() != soft_len {
                        return Err(ConfuError::Dimension(format!("soft prompt rows {:?} for width {d}", k.shape())));
                    }
                    keys.push(Tensor::matrix(soft_len, d, k.data().to_vec())?);
                    values.push(Tensor::matrix(soft_len, d, v.data().to_vec())?);
                }
                None => {
                    keys.push(Tensor::zeros(&[0, d]));
                    values.push(Tensor::zeros(&[0, d]));
                }
            }
        }
        Ok(KvCache { soft_len, keys, values, tokens: Vec::new(), taps: Vec::new() })
    }

    fn check_position(&self, pos: usize) -> Result<()> {
        if pos >= self.cfg.max_seq_len {
            return Err(ConfuError::Capacity(format!("position {pos} beyond max_seq_len {}", self.cfg.max_seq_len)));
        }
        Ok(())
    }

    /// Token plus position embeddings for `tokens`.
    pub fn embed_tokens<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        tokens: &[u32],
        positions: &[usize],
    ) -> Result<Var> {
        let te = tape.param(store, self.tok_emb);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let x = tape.gather_rows(te, &idx)?;
        self.add_positions(tape, store, x, positions)
    }

    /// Adds position embeddings to already-embedded rows.
    pub fn add_positions<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        positions: &[usize],
    ) -> Result<Var> {
        for &p in positions {
            self.check_position(p)?;
        }
        let pe = tape.param(store, self.pos_emb);
        let pos = tape.gather_rows(pe, positions)?;
        tape.add(x, pos)
    }

    /// Runs every block over `x [n, d]`. `prefix[l]`, when present, holds key
    /// and value rows that precede the new rows in layer `l`; `mask` covers
    /// `prefix rows + n` columns. Returns per-layer new keys, values and
    /// post-block outputs.
    pub fn run_layers<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        x: Var,
        prefix: &[Option<(Var, Var)>],
        mask: &AttentionMask,
    ) -> Result<LayerVars> {
        let eps = S::lit(1e-6);
        let mut h = x;
        let mut out = LayerVars::default();
        for (l, ids) in self.layers.iter().enumerate() {
            let gn = tape.param(store, ids.attn_norm);
            let xn = tape.rms_norm(h, gn, eps)?;
            let wq = tape.param(store, ids.wq);
            let wk = tape.param(store, ids.wk);
            let wv = tape.param(store, ids.wv);
            let q = tape.matmul_t(xn, wq)?;
            let k = tape.matmul_t(xn, wk)?;
            let v = tape.matmul_t(xn, wv)?;
            let (ka, va) = match prefix.get(l).copied().flatten() {
                Some((pk, pv)) => (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?),
                None => (k, v),
            };
            let att = tape.attention(q, ka, va, mask, self.cfg.n_heads)?;
            let wo = tape.param(store, ids.wo);
            let proj = tape.matmul_t(att, wo)?;
            let a = tape.add(h, proj)?;
            let gm = tape.param(store, ids.mlp_norm);
            let an = tape.rms_norm(a, gm, eps)?;
            let w1 = tape.param(store, ids.w1);
            let w2 = tape.param(store, ids.w2);
            let up = tape.matmul_t(an, w1)?;
            let act = tape.silu(up);
            let down = tape.matmul_t(act, w2)?;
            h = tape.add(a, down)?;
            out.keys.push(k);
            out.values.push(v);
            out.outputs.push(h);
        }
        Ok(out)
    }

    pub fn head<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, h: Var) -> Result<Var> {
        let g = tape.param(store, self.final_norm);
        let hn = tape.rms_norm(h, g, S::lit(1e-6))?;
        let w = tape.param(store, self.lm_head);
        tape.matmul_t(hn, w)
    }

    pub fn taps<S: Scalar>(&self, tape: &mut Tape<'_, S>, layers: &LayerVars) -> Result<Var> {
        let [a, b, c] = self.cfg.tap_layers;
        tape.concat_cols(&[layers.outputs[a], layers.outputs[b], layers.outputs[c]])
    }

    /// Full-sequence forward without any cache: logits per position.
    pub fn forward_full<S: Scalar>(&self, store: &ParamStore<S>, tokens: &[u32]) -> Result<Tensor<S>> {
        let mut tape = Tape::inference();
        let pos: Vec<usize> = (0..tokens.len()).collect();
        let x = self.embed_tokens(&mut tape, store, tokens, &pos)?;
        let layers = self.run_layers(&mut tape, store, x, &[], &AttentionMask::causal(tokens.len()))?;
        let logits = self.head(&mut tape, store, *layers.outputs.last().expect("n_layers >= 1"))?;
        Ok(tape.value(logits).clone())
    }

    /// Forward pass over transient `rows` on top of `cache`. `mask` has one
    /// row per transient row and `cache.total_rows() + rows.len()` columns.
    pub fn forward_rows<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &KvCache<S>,
        rows: &[RowSpec<'_, S>],
        mask: &AttentionMask,
    ) -> Result<RowsOutput<S>> {
        let n = rows.len();
        let d = self.cfg.d_model;
        if mask.rows() != n || mask.cols() != cache.total_rows() + n {
            return Err(ConfuError::Dimension(format!(
                "mask {}x{} for {n} rows over {} cached",
                mask.rows(),
                mask.cols(),
                cache.total_rows()
            )));
        }
        let mut tape = Tape::inference();
        let emb = store.get(self.tok_emb);
        let mut base = Vec::with_capacity(n * d);
        for r in rows {
            match r.input {
                RowInput::Token(t) => {
                    if t as usize >= self.cfg.vocab_size {
                        return Err(ConfuError::Dimension(format!("token {t} outside vocab {}", self.cfg.vocab_size)));
                    }
                    base.extend_from_slice(emb.row(t as usize));
                }
                RowInput::Vector(v) => {
                    if v.len() != d {
                        return Err(ConfuError::Dimension(format!("row vector of {} for width {d}", v.len())));
                    }
                    base.extend_from_slice(v);
                }
            }
        }
        let x = tape.constant(Tensor::matrix(n, d, base)?);
        let positions: Vec<usize> = rows.iter().map(|r| r.position).collect();
        let x = self.add_positions(&mut tape, store, x, &positions)?;
        let prefix: Vec<Option<(Var, Var)>> = if cache.total_rows() == 0 {
            Vec::new()
        } else {
            (0..self.cfg.n_layers)
                .map(|l| Some((tape.constant_ref(&cache.keys[l]), tape.constant_ref(&cache.values[l]))))
                .collect()
        };
        let layers = self.run_layers(&mut tape, store, x, &prefix, mask)?;
        let taps = self.taps(&mut tape, &layers)?;
        let last = *layers.outputs.last().expect("n_layers >= 1");
        let logits = self.head(&mut tape, store, last)?;
        let rows_of = |t: &Tensor<S>| (0..t.rows()).map(|i| t.row(i).to_vec()).collect::<Vec<_>>();
        Ok(RowsOutput {
            keys: layers.keys.iter().map(|&k| rows_of(tape.value(k))).collect(),
            values: layers.values.iter().map(|&v| rows_of(tape.value(v))).collect(),
            taps: rows_of(tape.value(taps)),
            last_hidden: rows_of(tape.value(last)),
            logits: rows_of(tape.value(logits)),
        })
    }

    /// Runs the prompt through the model in one logical pass: soft-prompt
    /// rows, the `t` ordinary tokens, and, when `con` is given, one
    /// contemplate row whose input embedding is `con(tap of the last token)`.
    /// Ordinary rows are computed exactly as without soft prompts or
    /// contemplate; only ordinary rows enter the cache.
    pub fn prefill<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        tokens: &[u32],
        soft: Option<&SoftPromptSet>,
        con: Option<&dyn Fn(&[S]) -> Result<Vec<S>>>,
    ) -> Result<PrefillOutput<S>> {
        if tokens.is_empty() {
            return Err(ConfuError::Contract("prefill needs at least one token".into()));
        }
        if tokens.len() > self.cfg.max_seq_len - 1 {
            return Err(ConfuError::Capacity(format!(
                "{} prompt tokens leave no room for a contemplate row within {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        let mut cache = self.new_cache(store, soft)?;
        let s = cache.soft_prompt_len();
        let t = tokens.len();
        let rows: Vec<RowSpec<S>> =
            tokens.iter().enumerate().map(|(i, &tok)| RowSpec { input: RowInput::Token(tok), position: i }).collect();
        let mask = AttentionMask::from_fn(t, s + t, |i, j| j >= s && j - s <= i);
        let out = self.forward_rows(store, &cache, &rows, &mask)?;
        for i in 0..t {
            let k: Vec<Vec<S>> = out.keys.iter().map(|l| l[i].clone()).collect();
            let v: Vec<Vec<S>> = out.values.iter().map(|l| l[i].clone()).collect();
            cache.append(&k, &v, tokens[i], out.taps[i].clone())?;
        }
        let logits = out.logits[t - 1].clone();
        let future = match con {
            Some(con) => {
                let embed = con(cache.last_tap().expect("non-empty"))?;
                Some(self.contemplate(store, &cache, &embed, FutureSource::Prefill)?)
            }
            None => None,
        };
        let rows_processed = s + t + usize::from(future.is_some());
        Ok(PrefillOutput { logits, future, rows_processed, cache })
    }

    /// One contemplate row after the last cached token, attending to the soft
    /// prompts, every content row and itself.
    pub fn contemplate<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &KvCache<S>,
        con_embed: &[S],
        source: FutureSource,
    ) -> Result<FuturePrediction<S>> {
        let pos = cache.content_len();
        let rows = [RowSpec { input: RowInput::Vector(con_embed), position: pos }];
        let mask = AttentionMask::full(1, cache.total_rows() + 1);
        let out = self.forward_rows(store, cache, &rows, &mask)?;
        Ok(FuturePrediction { f: out.last_hidden[0].clone(), source })
    }

    /// Appends one token to the cache; returns its logits and tap.
    pub fn decode_step<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &mut KvCache<S>,
        token: u32,
    ) -> Result<(Vec<S>, HiddenTap<S>)> {
        let s = cache.soft_prompt_len();
        let rows = [RowSpec { input: RowInput::Token(token), position: cache.content_len() }];
        let mask = AttentionMask::from_fn(1, cache.total_rows() + 1, |_, j| j >= s);
        let out = self.forward_rows(store, cache, &rows, &mask)?;
        let k: Vec<Vec<S>> = out.keys.iter().map(|l| l[0].clone()).collect();
        let v: Vec<Vec<S>> = out.values.iter().map(|l| l[0].clone()).collect();
        cache.append(&k, &v, token, out.taps[0].clone())?;
        Ok((out.logits[0].clone(), out.taps[0].clone()))
    }

    /// Verifies `tree` rooted at the pending `root` token in one pass. With
    /// `con_embeds` (one per node) a contemplate row follows every node.
    pub fn verify_tree<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        cache: &KvCache<S>,
        root: u32,
        tree: &DraftTree,
        mask: &AttentionMask,
        con_embeds: Option<&[Vec<S>]>,
    ) -> Result<VerifyOutput<S>> {
        let t_nodes = tree.len();
        if let Some(c) = con_embeds {
            if c.len() != t_nodes {
                return Err(ConfuError::Dimension(format!("{} contemplate embeddings for {t_nodes} nodes", c.len())));
            }
        }
        let lay = VerifyLayout {
            soft: cache.soft_prompt_len(),
            content: cache.content_len(),
            nodes: t_nodes,
            contemplate: con_embeds.is_some(),
        };
        if mask.rows() != lay.rows() || mask.cols() != lay.cols() {
            return Err(ConfuError::Dimension(format!(
                "verification mask {}x{} for tree of {t_nodes} (expected {}x{})",
                mask.rows(),
                mask.cols(),
                lay.rows(),
                lay.cols()
            )));
        }
        let p = cache.content_len();
        let max_depth = tree.nodes().iter().map(|n| n.depth).max().unwrap_or(0);
        self.check_position(p + max_depth + usize::from(con_embeds.is_some()))?;
        let mut rows = Vec::with_capacity(lay.rows());
        rows.push(RowSpec { input: RowInput::Token(root), position: p });
        for node in tree.nodes() {
            rows.push(RowSpec { input: RowInput::Token(node.token), position: p + node.depth });
        }
        if let Some(cons) = con_embeds {
            for (node, c) in tree.nodes().iter().zip(cons) {
                rows.push(RowSpec { input: RowInput::Vector(c), position: p + node.depth + 1 });
            }
        }
        let out = self.forward_rows(store, cache, &rows, mask)?;
        let futures = (0..t_nodes)
            .map(|i| {
                con_embeds.map(|_| FuturePrediction {
                    f: out.last_hidden[1 + t_nodes + i].clone(),
                    source: FutureSource::Node(i),
                })
            })
            .collect();
        let keep = 1 + t_nodes;
        let retained = RowsOutput {
            keys: out.keys.iter().map(|l| l[..keep].to_vec()).collect(),
            values: out.values.iter().map(|l| l[..keep].to_vec()).collect(),
            taps: out.taps[..keep].to_vec(),
            last_hidden: out.last_hidden[..keep].to_vec(),
            logits: out.logits[..keep].to_vec(),
        };
        Ok(VerifyOutput {
            root_logits: out.logits[0].clone(),
            node_logits: out.logits[1..keep].to_vec(),
            futures,
            rows: VerifyRows { root: 1, draft: t_nodes, contemplate: if con_embeds.is_some() { t_nodes } else { 0 } },
            retained,
        })
    }

    /// Moves the root row and the accepted draft rows (`accepted`, a root
    /// path of node indices) into the cache, reusing their computed KVs.
    /// Returns the taps of the committed rows.
    pub fn commit<S: Scalar>(
        &self,
        cache: &mut KvCache<S>,
        out: &VerifyOutput<S>,
        root: u32,
        tree: &DraftTree,
        accepted: &[usize],
    ) -> Result<()> {
        let mut push = |row: usize, token: u32| -> Result<()> {
            let k: Vec<Vec<S>> = out.retained.keys.iter().map(|l| l[row].clone()).collect();
            let v: Vec<Vec<S>> = out.retained.values.iter().map(|l| l[row].clone()).collect();
            cache.append(&k, &v, token, out.retained.taps[row].clone())
        };
        push(0, root)?;
        for &i in accepted {
            push(1 + i, tree.nodes()[i].token)?;
        }
        Ok(())
    }
}

/// Everything the draft losses need from one frozen target pass.
#[derive(Clone, Debug)]
pub struct TargetTrace<S> {
    pub tokens: Vec<u32>,
    /// `[N, 3d]` taps.
    pub taps: Tensor<S>,
    /// `[N, V]` next-token distributions at temperature 1.
    pub probs: Tensor<S>,
    /// Per-layer `[N, d]` keys and values of the ordinary rows.
    pub keys: Vec<Tensor<S>>,
    pub values: Vec<Tensor<S>>,
}

impl TargetModel {
    /// Causal pass over `tokens` with no soft prompts or contemplate rows.
    pub fn trace<S: Scalar>(&self, store: &ParamStore<S>, tokens: &[u32]) -> Result<TargetTrace<S>> {
        let cache = self.new_cache(store, None)?;
        let rows: Vec<RowSpec<S>> =
            tokens.iter().enumerate().map(|(i, &t)| RowSpec { input: RowInput::Token(t), position: i }).collect();
        let out = self.forward_rows(store, &cache, &rows, &AttentionMask::causal(tokens.len()))?;
        let n = tokens.len();
        let stack = |rows: &[Vec<S>]| -> Result<Tensor<S>> {
            let w = rows.first().map_or(0, Vec::len);
            Tensor::matrix(n, w, rows.concat())
        };
        let probs: Vec<Vec<S>> = out.logits.iter().map(|l| crate::tensor::softmax(l)).collect();
        Ok(TargetTrace {
            tokens: tokens.to_vec(),
            taps: stack(&out.taps)?,
            probs: stack(&probs)?,
            keys: out.keys.iter().map(|k| stack(k)).collect::<Result<_>>()?,
            values: out.values.iter().map(|v| stack(v)).collect::<Result<_>>()?,
        })
    }
}

/// Per-layer tape handles from [`TargetModel::run_layers`].
#[derive(Clone, Debug, Default)]
pub struct LayerVars {
    pub keys: Vec<Var>,
    pub values: Vec<Var>,
    pub outputs: Vec<Var>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::DraftNode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(layers: usize) -> (TargetModel, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = TargetModel::init(TargetConfig::new(layers, 16, 2, 11, 24), &mut store, &mut rng).unwrap();
        (m, store)
    }

    #[test]
    fn config_validation() {
        assert!(TargetConfig::new(4, 16, 2, 10, 8).validate().is_ok());
        assert!(TargetConfig::new(2, 16, 2, 10, 8).validate().is_ok());
        assert!(TargetConfig::new(4, 15, 2, 10, 8).validate().is_err());
        let mut c = TargetConfig::new(4, 16, 2, 10, 8);
        c.tap_layers = [0, 0, 3];
        assert!(c.validate().is_err());
        c.tap_layers = [0, 2, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_taps_are_first_middle_last() {
        assert_eq!(TargetConfig::new(4, 8, 1, 4, 4).tap_layers, [0, 2, 3]);
        assert_eq!(TargetConfig::new(3, 8, 1, 4, 4).tap_layers, [0, 1, 2]);
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let (m, store) = model(3);
        let toks = [1u32, 4, 2, 9, 0, 3];
        let full = m.forward_full(&store, &toks).unwrap();
        let pre = m.prefill(&store, &toks[..2], None, None).unwrap();
        let mut cache = pre.cache;
        assert!(pre.logits.iter().zip(full.row(1)).all(|(a, b)| (a - b).abs() < 1e-9));
        for (i, &t) in toks.iter().enumerate().skip(2) {
            let (logits, tap) = m.decode_step(&store, &mut cache, t).unwrap();
            assert_eq!(tap.len(), 48);
            let err = logits.iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "position {i}: {err}");
        }
    }

    #[test]
    fn decode_from_empty_cache_matches_single_token_forward() {
        let (m, store) = model(3);
        let mut cache = m.new_cache(&store, None).unwrap();
        let (logits, _) = m.decode_step(&store, &mut cache, 5).unwrap();
        assert_eq!(logits, m.forward_full(&store, &[5]).unwrap().row(0).to_vec());
    }

    #[test]
    fn prefill_capacity_is_checked() {
        let (m, store) = model(3);
        let toks = vec![1u32; 24];
        assert!(matches!(m.prefill(&store, &toks, None, None), Err(ConfuError::Capacity(_))));
    }

    #[test]
    fn verification_mask_structure() {
        let (m, store) = model(3);
        let cache = m.prefill(&store, &[1, 2], None, None).unwrap().cache;
        // root -> a(0) -> c(2); root -> b(1)
        let tree = DraftTree::from_nodes(vec![
            DraftNode::new(3, None, -0.1, 1),
            DraftNode::new(4, None, -0.2, 1),
            DraftNode::new(5, Some(0), -0.3, 2),
        ])
        .unwrap();
        let mask = verification_mask(&cache, &tree, true);
        assert_eq!((mask.rows(), mask.cols()), (7, 9));
        // node c sees content, root, a, itself; not b; no contemplate rows.
        let row_c = mask.row(3);
        assert_eq!(row_c, &[true, true, true, true, false, true, false, false, false]);
        // contemplate of c additionally sees its own column only.
        let crow_c = mask.row(6);
        assert_eq!(crow_c, &[true, true, true, true, false, true, false, false, true]);
        for r in 0..4 {
            assert!(mask.row(r)[6..].iter().all(|&a| !a), "draft rows never see contemplate rows");
        }
    }
}
