//! Soft prompts, the MoE embedding modules and future-prediction selection.

use rand::Rng;

use crate::error::{ConfuError, Result};
use crate::nn::{normal_tensor, ParamId, ParamStore, Tape, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const SOFT_PROMPT_GROUP: &str = "soft_prompt";
pub const MOE_CON_GROUP: &str = "moe_con";
pub const MOE_F_GROUP: &str = "moe_f";

/// Learnable per-layer key/value rows placed at the front of the target cache.
#[derive(Clone, Debug)]
pub struct SoftPromptSet {
    s: usize,
    keys: Vec<ParamId>,
    values: Vec<ParamId>,
}

impl SoftPromptSet {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        s: usize,
        n_layers: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut keys = Vec::with_capacity(n_layers);
        let mut values = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            keys.push(store.add(SOFT_PROMPT_GROUP, &format!("soft.l{l}.k"), normal_tensor(rng, s, d_model, 1.0))?);
            values.push(store.add(SOFT_PROMPT_GROUP, &format!("soft.l{l}.v"), normal_tensor(rng, s, d_model, 1.0))?);
        }
        Ok(Self { s, keys, values })
    }

    pub fn len(&self) -> usize {
        self.s
    }

    pub fn is_empty(&self) -> bool {
        self.s == 0
    }

    pub fn layer_kv<'a, S: Scalar>(&self, store: &'a ParamStore<S>, layer: usize) -> (&'a Tensor<S>, &'a Tensor<S>) {
        (store.get(self.keys[layer]), store.get(self.values[layer]))
    }

    pub fn layer_ids(&self, layer: usize) -> (ParamId, ParamId) {
        (self.keys[layer], self.values[layer])
    }
}

/// Router plus expert embedding bank with top-`k` gating.
#[derive(Clone, Debug)]
pub struct MoEEmbedder {
    router: ParamId,
    experts: ParamId,
    n_expert: usize,
    k_expert: usize,
    in_dim: usize,
    out_dim: usize,
}

/// Gating decision of one [`MoEEmbedder`] call.
#[derive(Clone, Debug, PartialEq)]
pub struct GateReport {
    /// Full softmax over all experts.
    pub probs: Vec<f64>,
    /// Selected experts, highest probability first.
    pub selected: Vec<usize>,
    /// Renormalized weight per expert; zero for unselected experts.
    pub gates: Vec<f64>,
}

/// Top-`k` indices of `probs` by value; ties go to the lower index.
pub fn top_k_indices<S: Scalar>(probs: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

impl MoEEmbedder {
    /// Experts start as small perturbations of `center`; the router starts
    /// at zero so every expert is equally likely at step 0.
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        group: &str,
        in_dim: usize,
        center: &[S],
        n_expert: usize,
        k_expert: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if k_expert == 0 || k_expert > n_expert {
            return Err(ConfuError::Config(format!("K_expert {k_expert} must lie in 1..={n_expert}")));
        }
        let out_dim = center.len();
        let router = store.add(group, &format!("{group}.router"), Tensor::zeros(&[n_expert, in_dim]))?;
        let mut experts = normal_tensor::<S>(rng, n_expert, out_dim, 0.02);
        for e in 0..n_expert {
            for (x, &c) in experts.row_mut(e).iter_mut().zip(center) {
                *x += c;
            }
        }
        let experts = store.add(group, &format!("{group}.experts"), experts)?;
        Ok(Self { router, experts, n_expert, k_expert, in_dim, out_dim })
    }

    pub fn n_expert(&self) -> usize {
        self.n_expert
    }

    pub fn k_expert(&self) -> usize {
        self.k_expert
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn router(&self) -> ParamId {
        self.router
    }

    pub fn experts(&self) -> ParamId {
        self.experts
    }

    /// Embeds each row of `h [m, in_dim]`; returns `[m, out_dim]`.
    pub fn forward<'a, S: Scalar>(&self, tape: &mut Tape<'a, S>, store: &'a ParamStore<S>, h: Var) -> Result<Var> {
        self.route(tape, store, h).map(|(out, _, _)| out)
    }

    fn route<'a, S: Scalar>(
        &self,
        tape: &mut Tape<'a, S>,
        store: &'a ParamStore<S>,
        h: Var,
    ) -> Result<(Var, Var, Vec<Vec<usize>>)> {
        let (m, n) = tape.shape(h);
        if n != self.in_dim {
            return Err(ConfuError::Dimension(format!("router input of {n} for width {}", self.in_dim)));
        }
        let r = tape.param(store, self.router);
        let logits = tape.matmul_t(h, r)?;
        let probs = tape.softmax(logits);
        let idx: Vec<Vec<usize>> = (0..m).map(|i| top_k_indices(tape.value(probs).row(i), self.k_expert)).collect();
        let sel = tape.select_cols(probs, &idx)?;
        let w = tape.normalize_rows(sel);
        let e = tape.param(store, self.experts);
        let out = tape.mix_rows(w, e, &idx)?;
        Ok((out, probs, idx))
    }

    /// Single-vector embedding with its gate report.
    pub fn embed<S: Scalar>(&self, store: &ParamStore<S>, h: &[S]) -> Result<(Vec<S>, GateReport)> {
        if h.len() != self.in_dim {
            return Err(ConfuError::Dimension(format!("router input of {} for width {}", h.len(), self.in_dim)));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::row_vector(h.to_vec()));
        let (out, probs, mut idx) = self.route(&mut tape, store, x)?;
        let probs = tape.value(probs).data();
        let selected = idx.remove(0);
        let total: S = selected.iter().map(|&i| probs[i]).sum();
        let mut gates = vec![0.0; self.n_expert];
        for &i in &selected {
            gates[i] = (probs[i] / total).as_f64();
        }
        let report = GateReport { probs: probs.iter().map(|p| p.as_f64()).collect(), selected, gates };
        Ok((tape.value(out).data().to_vec(), report))
    }
}

/// Where a future prediction came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FutureSource {
    Prefill,
    /// Contemplate row paired with this draft node.
    Node(usize),
    /// One-row contemplate pass after a fully rejected round.
    Fallback,
}

/// Last-layer hidden state of a contemplate row.
#[derive(Clone, Debug, PartialEq)]
pub struct FuturePrediction<S> {
    pub f: Vec<S>,
    pub source: FutureSource,
}

/// The future of the last node on `accepted_path`.
pub fn select_future<S: Clone>(
    per_node: &[Option<FuturePrediction<S>>],
    accepted_path: &[usize],
) -> Result<FuturePrediction<S>> {
    let &last = accepted_path
        .last()
        .ok_or_else(|| ConfuError::Contract("empty accepted path has no future; use the fallback pass".into()))?;
    per_node
        .get(last)
        .and_then(Clone::clone)
        .ok_or_else(|| ConfuError::Contract(format!("node {last} carries no future prediction")))
}
