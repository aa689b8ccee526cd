//! Target pretraining, baseline draft training and future-aware training.

pub mod anchors;
pub mod checkpoint;
pub mod corpus;
pub mod loss;
pub mod trainer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ConfuError, Result};

pub use anchors::{count_anchor_sets, last_feasible, sample_anchors, AnchorSet};
pub use checkpoint::{Checkpoint, CheckpointMeta};
pub use corpus::{ingest_corpus, ByteTokenizer, Corpus, CorpusSource, SyntheticGrammar, SyntheticSpec};
pub use loss::{draft_unroll, loss_confu, loss_eagle3, loss_eagle3_on, loss_target, LossTerms, KL_FLOOR};
pub use trainer::{run_stage, train, LogRecord, TrainSummary};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Unroll depth `L`.
    pub unroll: usize,
    /// Anchors per sequence `K_train`.
    pub anchors: usize,
    /// Replication window `l`.
    pub window: usize,
    pub min_gap: usize,
    pub lr: f64,
    pub steps: usize,
    /// Sequences per optimizer step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { unroll: 3, anchors: 8, window: 1, min_gap: 5, lr: 3e-3, steps: 200, batch: 4, seed: 0 }
    }
}

impl TrainConfig {
    /// Checks the settings against sequences of `seq_len` tokens.
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        self.validate_optimizer()?;
        let cap = seq_len / (self.window + self.unroll + 1);
        if self.anchors > cap {
            return Err(ConfuError::Config(format!(
                "{} anchors exceed N/(l+L+1) = {cap} for N = {seq_len}",
                self.anchors
            )));
        }
        Ok(())
    }

    /// Checks everything that does not depend on the sequence length.
    pub fn validate_optimizer(&self) -> Result<()> {
        if self.unroll == 0 {
            return Err(ConfuError::Config("unroll depth L must be at least 1".into()));
        }
        if self.min_gap <= self.window {
            return Err(ConfuError::Config(format!(
                "min gap {} must exceed the window {} so windows never hit another anchor",
                self.min_gap, self.window
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ConfuError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch == 0 {
            return Err(ConfuError::Config("batch must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    TargetPretrain,
    DraftBaseline,
    Confu,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::TargetPretrain => "target-pretrain",
            Stage::DraftBaseline => "draft-baseline",
            Stage::Confu => "confu",
        }
    }

    /// Parameter groups updated by the stage.
    pub fn trainable_groups(self) -> &'static [&'static str] {
        match self {
            Stage::TargetPretrain => &["target"],
            Stage::DraftBaseline => &["draft"],
            Stage::Confu => &["draft", "soft_prompt", "moe_con", "moe_f"],
        }
    }

    /// Stages whose checkpoints may seed this one; `None` means no input is
    /// needed.
    pub fn accepts_input_from(self) -> Option<&'static [Stage]> {
        match self {
            Stage::TargetPretrain => None,
            Stage::DraftBaseline => Some(&[Stage::TargetPretrain, Stage::DraftBaseline]),
            Stage::Confu => Some(&[Stage::DraftBaseline, Stage::Confu]),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = ConfuError;

    fn from_str(s: &str) -> Result<Self> {
        [Stage::TargetPretrain, Stage::DraftBaseline, Stage::Confu]
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| ConfuError::Config(format!("unknown stage {s}")))
    }
}
