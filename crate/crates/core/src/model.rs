//! The full parameter bundle: frozen target, draft head, soft prompts and the
//! two MoE embedders, all in one [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::draft::{DraftConfig, DraftHead, DraftInputSlot};
use crate::error::{ConfuError, Result};
use crate::future::{GateReport, MoEEmbedder, SoftPromptSet, MOE_CON_GROUP, MOE_F_GROUP};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::target::{TargetConfig, TargetModel, TARGET_GROUP};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FutureConfig {
    /// Soft-prompt rows `s`.
    pub soft_prompts: usize,
    pub n_expert: usize,
    pub k_expert: usize,
}

impl Default for FutureConfig {
    fn default() -> Self {
        Self { soft_prompts: 16, n_expert: 8, k_expert: 2 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub target: TargetConfig,
    pub draft: DraftConfig,
    pub future: FutureConfig,
}

impl ModelConfig {
    /// Draft settings derived from the target: same width, heads and vocab.
    pub fn new(target: TargetConfig, chain_depth: usize, tree_budget: usize, branch_k: usize, future: FutureConfig) -> Self {
        let draft = DraftConfig {
            d_model: target.d_model,
            n_heads: target.n_heads,
            vocab_size: target.vocab_size,
            chain_depth,
            tree_budget,
            branch_k,
            mlp_mult: 2,
        };
        Self { target, draft, future }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        self.draft.validate()?;
        if self.future.k_expert == 0 || self.future.k_expert > self.future.n_expert {
            return Err(ConfuError::Config(format!(
                "K_expert {} must lie in 1..={}",
                self.future.k_expert, self.future.n_expert
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConfuModel<S> {
    pub cfg: ModelConfig,
    pub store: ParamStore<S>,
    pub target: TargetModel,
    pub draft: DraftHead,
    pub soft: SoftPromptSet,
    pub moe_con: MoEEmbedder,
    pub moe_f: MoEEmbedder,
}

impl<S: Scalar> ConfuModel<S> {
    /// Deterministic initialization from `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::init_with_target(cfg, seed, None)
    }

    /// Like [`ConfuModel::init`], but the target tensors are replaced by
    /// `target` (all `target.*` entries of a checkpoint) before the draft
    /// head and future modules are derived from them.
    pub fn init_with_target(cfg: ModelConfig, seed: u64, target: Option<&[(String, Tensor<S>)]>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let target_model = TargetModel::init(cfg.target.clone(), &mut store, &mut rng)?;
        if let Some(named) = target {
            load_into(&mut store, named, &[TARGET_GROUP])?;
        }
        let target = target_model;
        let draft = DraftHead::init(cfg.draft.clone(), &target, &mut store, &mut rng)?;
        let d = cfg.target.d_model;
        let soft = SoftPromptSet::init(&mut store, cfg.future.soft_prompts, cfg.target.n_layers, d, &mut rng)?;
        let table = store.get(target.tok_emb());
        let rows = table.rows();
        let center: Vec<S> =
            (0..d).map(|c| (0..rows).map(|r| table.at(r, c)).sum::<S>() / S::lit(rows as f64)).collect();
        let (n, k) = (cfg.future.n_expert, cfg.future.k_expert);
        let moe_con = MoEEmbedder::init(&mut store, MOE_CON_GROUP, cfg.target.tap_width(), &center, n, k, &mut rng)?;
        let moe_f = MoEEmbedder::init(&mut store, MOE_F_GROUP, d, &center, n, k, &mut rng)?;
        Ok(Self { cfg, store, target, draft, soft, moe_con, moe_f })
    }

    /// Overwrites parameters by name. Every parameter must be provided with
    /// a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor<S>)]) -> Result<()> {
        let groups: Vec<String> = self.store.groups().map(|(g, _)| g.to_string()).collect();
        let groups: Vec<&str> = groups.iter().map(String::as_str).collect();
        load_into(&mut self.store, named, &groups)
    }

    /// Overwrites every parameter of `groups`; other entries are ignored.
    pub fn load_groups(&mut self, named: &[(String, Tensor<S>)], groups: &[&str]) -> Result<()> {
        load_into(&mut self.store, named, groups)
    }

    pub fn named(&self) -> Vec<(String, Tensor<S>)> {
        self.store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect()
    }

    /// `[con]` embedding from a target tap.
    pub fn con_embed(&self, tap: &[S]) -> Result<(Vec<S>, GateReport)> {
        self.moe_con.embed(&self.store, tap)
    }

    /// Future slot for the draft: `([f] = moe_f(W_proj·tap), f_proj·f)`.
    pub fn future_slot(&self, tap: &[S], f: &[S]) -> Result<(DraftInputSlot<S>, GateReport)> {
        let h_md = self.draft.down_project(&self.store, tap)?;
        let (_, report) = self.moe_f.embed(&self.store, &h_md)?;
        let slot = self.draft.future_slot(&self.store, &self.moe_f, &h_md, f)?;
        Ok((slot, report))
    }
}

fn load_into<S: Scalar>(store: &mut ParamStore<S>, named: &[(String, Tensor<S>)], groups: &[&str]) -> Result<()> {
    let wanted = |store: &ParamStore<S>, id: ParamId| groups.contains(&store.param(id).group.as_str());
    let mut seen = vec![false; store.len()];
    for (name, t) in named {
        let id = store.id(name).ok_or_else(|| ConfuError::Format(format!("checkpoint tensor {name} has no parameter")))?;
        if !wanted(store, id) {
            continue;
        }
        if store.get(id).shape() != t.shape() {
            return Err(ConfuError::Format(format!(
                "{name}: checkpoint shape {:?} vs model {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t.clone();
        seen[id.index()] = true;
    }
    if let Some(missing) = store.ids().find(|&id| wanted(store, id) && !seen[id.index()]) {
        return Err(ConfuError::Format(format!("checkpoint lacks {}", store.param(missing).name)));
    }
    Ok(())
}
