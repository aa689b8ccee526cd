//! The speculative decoding loop.

pub mod accept;
pub mod decode;
pub mod exhaustive;
pub mod rng;

pub use accept::{accept_reject_path, accept_tree, residual, AcceptRule, TreeAcceptance};
pub use decode::{autoregressive, DecodeMode, DecodeState, Generation, Metrics, RoundResult, SpecEngine, Variant};
pub use exhaustive::{autoregressive_distribution, speculative_distribution, total_variation, SequenceDistribution};
pub use rng::{enumerate_outcomes, DrawKey, KeyedRng, Purpose, Randomness, ScriptedRandomness};
