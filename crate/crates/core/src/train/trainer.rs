//! Optimization loops for the three training stages.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{ConfuError, Result};
use crate::model::{ConfuModel, ModelConfig};
use crate::nn::{Optimizer, OptimizerKind, Tape};
use crate::scalar::Scalar;
use crate::target::TargetTrace;
use crate::train::anchors::sample_anchors;
use crate::train::checkpoint::{Checkpoint, CheckpointMeta};
use crate::train::loss::{loss_confu, loss_eagle3, loss_target};
use crate::train::{Stage, TrainConfig};

/// One line of the JSON training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    /// Mean per-term loss of each step.
    pub losses: Vec<f64>,
    /// Target probabilities floored inside the KL logarithm.
    pub floored: usize,
    /// Steps without any loss term (no anchors), where nothing was updated.
    pub skipped: usize,
}

/// Trains the stage's parameter groups of `model` in place. Every step draws
/// `batch` sequences (and, for the future-aware stage, anchors) from a
/// generator seeded by `cfg.seed`; gradients are averaged over terms and
/// sequences before one Adam update.
pub fn train<S: Scalar>(
    model: &mut ConfuModel<S>,
    stage: Stage,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<TrainSummary> {
    if data.is_empty() {
        return Err(ConfuError::Config("no training sequences".into()));
    }
    if stage == Stage::Confu {
        for seq in data {
            cfg.validate(seq.len())?;
        }
    } else {
        cfg.validate_optimizer()?;
    }
    model.store.train_only(stage.trainable_groups());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut traces: Vec<Option<TargetTrace<S>>> = vec![None; data.len()];
    let mut summary = TrainSummary::default();
    for step in 1..=cfg.steps {
        model.store.zero_grad();
        let batch: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(0..data.len())).collect();
        let mut loss_sum = 0.0;
        let mut counted = 0usize;
        for &i in &batch {
            let seq = &data[i];
            if stage != Stage::TargetPretrain && traces[i].is_none() {
                traces[i] = Some(model.target.trace(&model.store, seq)?);
            }
            let anchors = match stage {
                Stage::Confu => Some(sample_anchors(seq.len(), cfg, &mut rng)?),
                _ => None,
            };
            let grads = {
                let m: &ConfuModel<S> = model;
                let mut tape = Tape::new();
                let lt = match stage {
                    Stage::TargetPretrain => loss_target(&mut tape, m, seq)?,
                    Stage::DraftBaseline => loss_eagle3(&mut tape, m, traces[i].as_ref().expect("traced"), cfg.unroll)?,
                    Stage::Confu => loss_confu(
                        &mut tape,
                        m,
                        traces[i].as_ref().expect("traced"),
                        anchors.as_ref().expect("sampled"),
                        cfg.window,
                        cfg.unroll,
                    )?,
                };
                if lt.terms == 0 {
                    continue;
                }
                summary.floored += lt.floored;
                let per_term = tape.value(lt.total).item()?.as_f64() / lt.terms as f64;
                if !per_term.is_finite() {
                    return Err(ConfuError::Numeric(format!("{stage} loss is {per_term} at step {step}")));
                }
                loss_sum += per_term;
                counted += 1;
                let scaled = tape.scale(lt.total, S::lit(1.0 / (lt.terms * cfg.batch) as f64));
                tape.backward(scaled)?.param_grads()
            };
            model.store.accumulate(&grads)?;
        }
        if counted == 0 {
            summary.skipped += 1;
            summary.losses.push(0.0);
            log(&LogRecord { step, stage, loss: 0.0 });
            continue;
        }
        opt.step(&mut model.store, cfg.lr)?;
        let loss = loss_sum / counted as f64;
        summary.losses.push(loss);
        log(&LogRecord { step, stage, loss });
    }
    model.store.zero_grad();
    Ok(summary)
}

/// Builds the stage's starting model from `input`, trains it and packs the
/// result into a checkpoint.
///
/// The baseline stage starts from a pretrained target: the draft head and
/// future modules are freshly derived from that target. The future-aware
/// stage starts from a baseline checkpoint: target and draft are loaded and
/// the future modules are derived from the target.
pub fn run_stage<S: Scalar>(
    stage: Stage,
    model_cfg: &ModelConfig,
    data: &[Vec<u32>],
    cfg: &TrainConfig,
    input: Option<&Checkpoint>,
    config_text: &str,
    log: &mut dyn FnMut(&LogRecord),
) -> Result<(ConfuModel<S>, Checkpoint, TrainSummary)> {
    let from = match input {
        Some(ck) => Some((ck.meta.stage.parse::<Stage>()?, ck.named::<S>())),
        None => None,
    };
    let mut model = match (stage.accepts_input_from(), from) {
        (None, None) => ConfuModel::init(model_cfg.clone(), cfg.seed)?,
        (Some(ok), None) => {
            return Err(ConfuError::Config(format!(
                "stage {stage} needs a checkpoint from {}",
                ok.iter().map(|s| s.name()).collect::<Vec<_>>().join(" or ")
            )));
        }
        (ok, Some((prev, named))) => {
            if ok.is_some_and(|ok| !ok.contains(&prev)) || (ok.is_none() && prev != stage) {
                return Err(ConfuError::Config(format!("stage {stage} cannot start from a {prev} checkpoint")));
            }
            if prev == stage {
                let mut m = ConfuModel::init(model_cfg.clone(), cfg.seed)?;
                m.load_named(&named)?;
                m
            } else {
                let target: Vec<_> = named.iter().filter(|(n, _)| n.starts_with("target.")).cloned().collect();
                let mut m = ConfuModel::init_with_target(model_cfg.clone(), cfg.seed, Some(&target))?;
                if stage == Stage::Confu {
                    m.load_groups(&named, &[crate::draft::DRAFT_GROUP])?;
                }
                m
            }
        }
    };
    let summary = train(&mut model, stage, data, cfg, log)?;
    let meta = CheckpointMeta { step: cfg.steps as u64, stage: stage.name().into(), config: config_text.into() };
    let ck = Checkpoint::new(meta, &model.named());
    Ok((model, ck, summary))
}
