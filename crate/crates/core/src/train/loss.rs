//! Training objectives on the tape.
//!
//! Both draft losses share one multi-step unroll. A row with base `k` starts
//! from context slot `k` (token `x_{k+1}`, feature of position `k`) and at
//! step `i` predicts `x_{k+1+i}` against the target distribution at row
//! `k+i`. From step 2 on, the query slot is built from the ground-truth token
//! and the draft's own previous hidden state. Keys are laid out as
//! `[future slots | context slots | chain slots]`, the same order used at
//! inference, so each row's distribution matches a stateless draft call.

use crate::draft::FutureMode;
use crate::error::{ConfuError, Result};
use crate::model::ConfuModel;
use crate::nn::{AttentionMask, Tape, Var};
use crate::scalar::Scalar;
use crate::target::TargetTrace;
use crate::tensor::Tensor;
use crate::train::anchors::AnchorSet;

/// Floor applied to target probabilities inside the logarithm.
pub const KL_FLOOR: f64 = 1e-12;

/// A loss on the tape with its term bookkeeping.
#[derive(Clone, Debug)]
pub struct LossTerms {
    /// Sum of all terms, `[1, 1]`.
    pub total: Var,
    pub terms: usize,
    /// Per unroll step, `[rows, 1]` KL values (empty for the target loss).
    pub steps: Vec<Var>,
    /// Target probabilities that fell in `(0, KL_FLOOR)`.
    pub floored: usize,
}

/// Future slot inputs for the unroll: `x [A, d]` and, per unroll row, the
/// future row it attends to.
#[derive(Clone, Copy, Debug)]
pub struct FutureRows<'r> {
    pub x: Var,
    pub row_of: &'r [usize],
}

fn count_floored<S: Scalar>(p: &Tensor<S>) -> usize {
    let floor = S::lit(KL_FLOOR);
    p.data().iter().filter(|&&x| x > S::zero() && x < floor).count()
}

/// Largest valid base for an unroll of `depth` steps over `n` tokens.
pub fn last_base(n: usize, depth: usize) -> Option<usize> {
    n.checked_sub(2 + depth)
}

/// Multi-step draft unroll; returns one `[R, 1]` KL column per step.
pub fn draft_unroll<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    trace: &'a TargetTrace<S>,
    bases: &[usize],
    future: Option<FutureRows<'_>>,
    depth: usize,
) -> Result<(Vec<Var>, usize)> {
    let (head, store) = (&model.draft, &model.store);
    let n = trace.tokens.len();
    if depth == 0 {
        return Err(ConfuError::Config("unroll depth must be at least 1".into()));
    }
    let Some(&max_base) = bases.iter().max() else {
        return Err(ConfuError::Config("draft unroll over zero rows".into()));
    };
    if last_base(n, depth).is_none_or(|l| max_base > l) {
        return Err(ConfuError::Config(format!("base {max_base} leaves fewer than {depth} targets in {n} tokens")));
    }
    let r = bases.len();
    let n_ctx = max_base + 1;
    let taps = tape.constant_ref(&trace.taps);
    let ctx_idx: Vec<usize> = (0..n_ctx).collect();
    let ctx_taps = tape.gather_rows(taps, &ctx_idx)?;
    let feat = head.project(tape, store, ctx_taps)?;
    let tok = head.embed(tape, store, &trace.tokens[1..=n_ctx])?;
    let x_ctx = head.fuse(tape, store, tok, feat)?;
    let (k_ctx, v_ctx) = head.slot_kv(tape, store, x_ctx)?;

    let mut keys = Vec::new();
    let mut values = Vec::new();
    let n_fut = match future {
        Some(f) => {
            if f.row_of.len() != r {
                return Err(ConfuError::Dimension(format!("{} future assignments for {r} rows", f.row_of.len())));
            }
            let (kf, vf) = head.slot_kv(tape, store, f.x)?;
            keys.push(kf);
            values.push(vf);
            tape.shape(f.x).0
        }
        None => 0,
    };
    keys.push(k_ctx);
    values.push(v_ctx);

    let mut xq = tape.gather_rows(x_ctx, bases)?;
    let mut out = Vec::with_capacity(depth);
    let mut floored = 0;
    let mut h_prev = None;
    for i in 1..=depth {
        if let Some(h) = h_prev {
            let toks: Vec<u32> = bases.iter().map(|&k| trace.tokens[k + i]).collect();
            let e = head.embed(tape, store, &toks)?;
            xq = head.fuse(tape, store, e, h)?;
            let (kc, vc) = head.slot_kv(tape, store, xq)?;
            keys.push(kc);
            values.push(vc);
        }
        let kk = tape.concat_rows(&keys)?;
        let vv = tape.concat_rows(&values)?;
        let cols = n_fut + n_ctx + (i - 1) * r;
        let mask = AttentionMask::from_fn(r, cols, |row, c| {
            if c < n_fut {
                future.is_some_and(|f| f.row_of[row] == c)
            } else if c < n_fut + n_ctx {
                c - n_fut <= bases[row]
            } else {
                (c - n_fut - n_ctx) % r == row
            }
        });
        let h = head.layer(tape, store, xq, kk, vv, &mask)?;
        let logits = head.head(tape, store, h)?;
        let logq = tape.log_softmax(logits);
        let v = trace.probs.cols();
        let mut p = Vec::with_capacity(r * v);
        for &k in bases {
            p.extend_from_slice(trace.probs.row(k + i));
        }
        let p = Tensor::matrix(r, v, p)?;
        floored += count_floored(&p);
        out.push(tape.kl_rows(&p, logq, S::lit(KL_FLOOR))?);
        h_prev = Some(h);
    }
    Ok((out, floored))
}

fn total<S: Scalar>(tape: &mut Tape<'_, S>, steps: Vec<Var>, floored: usize) -> Result<LossTerms> {
    let terms = steps.iter().map(|&s| tape.shape(s).0).sum();
    let all = tape.concat_rows(&steps)?;
    let total = tape.sum(all);
    Ok(LossTerms { total, terms, steps, floored })
}

/// Baseline objective: every base `k ≤ N−2−L`, no future slot.
pub fn loss_eagle3<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    trace: &'a TargetTrace<S>,
    depth: usize,
) -> Result<LossTerms> {
    let n = trace.tokens.len();
    let last = last_base(n, depth)
        .ok_or_else(|| ConfuError::Config(format!("sequence of {n} is too short for depth {depth}")))?;
    let bases: Vec<usize> = (0..=last).collect();
    loss_eagle3_on(tape, model, trace, &bases, depth)
}

/// Baseline objective restricted to `bases`.
pub fn loss_eagle3_on<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    trace: &'a TargetTrace<S>,
    bases: &[usize],
    depth: usize,
) -> Result<LossTerms> {
    let (steps, floored) = draft_unroll(tape, model, trace, bases, None, depth)?;
    total(tape, steps, floored)
}

/// Last-layer states of contemplate rows placed after each anchor.
///
/// Row `a` sits at position `t_a + 1` with input `moe_con(tap_{t_a})` and
/// attends to the soft prompts, content rows `0..=t_a` and itself. Content
/// keys and values come from the frozen trace.
pub fn contemplate_states<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    trace: &'a TargetTrace<S>,
    anchors: &[usize],
) -> Result<Var> {
    let store = &model.store;
    let n = trace.tokens.len();
    let s = model.soft.len();
    let a = anchors.len();
    let taps = tape.constant_ref(&trace.taps);
    let h = tape.gather_rows(taps, anchors)?;
    let con = model.moe_con.forward(tape, store, h)?;
    let pos: Vec<usize> = anchors.iter().map(|t| t + 1).collect();
    let x = model.target.add_positions(tape, store, con, &pos)?;
    let mut prefix = Vec::with_capacity(trace.keys.len());
    for l in 0..trace.keys.len() {
        let kc = tape.constant_ref(&trace.keys[l]);
        let vc = tape.constant_ref(&trace.values[l]);
        if s == 0 {
            prefix.push(Some((kc, vc)));
        } else {
            let (kid, vid) = model.soft.layer_ids(l);
            let ks = tape.param(store, kid);
            let vs = tape.param(store, vid);
            prefix.push(Some((tape.concat_rows(&[ks, kc])?, tape.concat_rows(&[vs, vc])?)));
        }
    }
    let mask = AttentionMask::from_fn(a, s + n + a, |row, c| {
        c < s || (c < s + n && c - s <= anchors[row]) || c == s + n + row
    });
    let layers = model.target.run_layers(tape, store, x, &prefix, &mask)?;
    Ok(*layers.outputs.last().expect("n_layers >= 1"))
}

/// Future slot inputs `fuse(moe_f(W_proj·tap_t), f_proj·f_t)` per anchor.
pub fn future_slots<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    trace: &'a TargetTrace<S>,
    anchors: &[usize],
    f: Var,
) -> Result<Var> {
    let store = &model.store;
    let taps = tape.constant_ref(&trace.taps);
    let h = tape.gather_rows(taps, anchors)?;
    let h_md = model.draft.project(tape, store, h)?;
    let emb = model.moe_f.forward(tape, store, h_md)?;
    let feat = model.draft.project_future(tape, store, f)?;
    model.draft.fuse(tape, store, emb, feat)
}

/// Window bases `t + j`, `j = 0..=l`, anchor-major, with their anchor index.
pub fn window_bases(anchors: &[usize], window: usize) -> (Vec<usize>, Vec<usize>) {
    anchors.iter().enumerate().flat_map(|(a, &t)| (0..=window).map(move |j| (t + j, a))).unzip()
}

/// ConFu objective: per anchor, `(l+1)·L` KL terms sharing the anchor's
/// future prediction. With no anchors the loss is a constant zero. A draft
/// head in [`FutureMode::Ablated`] drops the future slot, which leaves the
/// baseline objective on the window bases.
pub fn loss_confu<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    trace: &'a TargetTrace<S>,
    anchors: &AnchorSet,
    window: usize,
    depth: usize,
) -> Result<LossTerms> {
    if anchors.is_empty() {
        let total = tape.constant(Tensor::matrix(1, 1, vec![S::zero()])?);
        return Ok(LossTerms { total, terms: 0, steps: Vec::new(), floored: 0 });
    }
    let t = anchors.positions();
    let (bases, row_of) = window_bases(t, window);
    let future = match model.draft.mode() {
        FutureMode::Required => {
            let f = contemplate_states(tape, model, trace, t)?;
            Some(FutureRows { x: future_slots(tape, model, trace, t, f)?, row_of: &row_of })
        }
        FutureMode::Ablated => None,
    };
    let (steps, floored) = draft_unroll(tape, model, trace, &bases, future, depth)?;
    total(tape, steps, floored)
}

/// Next-token cross-entropy of the target over one sequence (summed).
pub fn loss_target<'a, S: Scalar>(
    tape: &mut Tape<'a, S>,
    model: &'a ConfuModel<S>,
    tokens: &[u32],
) -> Result<LossTerms> {
    let n = tokens.len();
    if n < 2 {
        return Err(ConfuError::Config("target loss needs two tokens".into()));
    }
    let store = &model.store;
    let inputs = &tokens[..n - 1];
    let pos: Vec<usize> = (0..n - 1).collect();
    let x = model.target.embed_tokens(tape, store, inputs, &pos)?;
    let layers = model.target.run_layers(tape, store, x, &[], &AttentionMask::causal(n - 1))?;
    let logits = model.target.head(tape, store, *layers.outputs.last().expect("n_layers >= 1"))?;
    let logp = tape.log_softmax(logits);
    let idx: Vec<usize> = tokens[1..].iter().map(|&t| t as usize).collect();
    let picked = tape.pick_cols(logp, &idx)?;
    let s = tape.sum(picked);
    let total = tape.scale(s, -S::one());
    Ok(LossTerms { total, terms: n - 1, steps: Vec::new(), floored: 0 })
}
