//! Acceptance criteria 1 to 9. Each test prints one `PASS`/`FAIL` line.
//!
//! Run with `cargo test -p confu-cli --test acceptance -- --nocapture`.

use std::path::Path;
use std::process::Command;

use confu_cli::bench::{bench_model, bench_prompts};
use confu_cli::config::{ExperimentConfig, Mode};
use confu_cli::train::{load_model, train, Job};
use confu_core::draft::{DraftNode, DraftTree};
use confu_core::engine::{
    autoregressive_distribution, speculative_distribution, total_variation, DecodeMode, KeyedRng, SpecEngine, Variant,
};
use confu_core::model::{ConfuModel, FutureConfig, ModelConfig};
use confu_core::nn::{max_relative_error, ParamId, Tape};
use confu_core::target::{verification_mask, KvCache, TargetConfig, TargetTrace};
use confu_core::tensor::{argmax, Tensor};
use confu_core::train::loss::KL_FLOOR;
use confu_core::train::{loss_confu, loss_eagle3, AnchorSet, Stage, TrainConfig};

fn verdict(n: usize, name: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("criterion {n} ({name}): {} {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn model(target: TargetConfig, nodes: usize, branch: usize, future: FutureConfig, seed: u64) -> ConfuModel<f64> {
    ConfuModel::init(ModelConfig::new(target, 3, nodes, branch, future), seed).unwrap()
}

fn prompt(seed: u64, len: usize, vocab: u64) -> Vec<u32> {
    (0..len as u64).map(|i| ((seed * 7 + i * 3 + i * i + seed * seed) % vocab) as u32).collect()
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c1_exhaustive_losslessness() {
    let fut = FutureConfig { soft_prompts: 4, n_expert: 4, k_expert: 2 };
    let m = model(TargetConfig::new(2, 16, 2, 8, 16), 4, 2, fut, 1);
    let mut worst: f64 = 0.0;
    for p in [vec![1u32, 5], vec![6]] {
        for temp in [1.0, 0.6] {
            let ar = autoregressive_distribution(&m, &p, 4, temp, None).unwrap();
            for variant in [Variant::Baseline, Variant::Confu] {
                // Chain K = 2, tree T = 4.
                for (nodes, branch) in [(2, 1), (4, 2)] {
                    let e = SpecEngine::new(&m, DecodeMode::new(variant, temp, nodes, branch)).unwrap();
                    let sd = speculative_distribution(&e, 8, &p, 4).unwrap();
                    worst = worst.max(total_variation(&ar, &sd));
                }
            }
        }
    }
    verdict(1, "exhaustive losslessness", worst < 1e-9, format!("max TV {worst:.2e}"));
}

#[test]
fn c2_verification_neutrality() {
    let fut = FutureConfig { soft_prompts: 8, n_expert: 4, k_expert: 2 };
    let m = model(TargetConfig::new(3, 16, 2, 12, 64), 6, 2, fut, 2);
    let e = SpecEngine::new(&m, DecodeMode::new(Variant::Confu, 1.0, 6, 2)).unwrap();
    let (mut worst, mut streams_match, mut accepted) = (0.0f64, true, 0);
    for seed in 0..50u64 {
        let rng = KeyedRng::new(seed);
        let mut st = e.start(&prompt(seed, 3 + seed as usize % 5, 12), &mut KeyedRng::new(seed)).unwrap();
        for _ in 0..4 {
            let tree = e.draft_phase(&st, &mut KeyedRng::new(seed)).unwrap();
            let with = e.verify_phase(&st, &tree).unwrap();
            let bare = m
                .target
                .verify_tree(&m.store, &st.cache, st.root, &tree, &verification_mask(&st.cache, &tree, false), None)
                .unwrap();
            worst = worst.max(max_abs(&with.root_logits, &bare.root_logits));
            for (a, b) in with.node_logits.iter().zip(&bare.node_logits) {
                worst = worst.max(max_abs(a, b));
            }
            let a1 = e.accept_phase(&st, &tree, &with, &mut rng.clone()).unwrap();
            let a2 = e.accept_phase(&st, &tree, &bare, &mut rng.clone()).unwrap();
            streams_match &= a1 == a2;
            accepted += a1.accepted.len();
            e.commit_phase(&mut st, &tree, &with, &a1, 40).unwrap();
        }
    }
    verdict(
        2,
        "verification neutrality",
        worst < 1e-9 && streams_match,
        format!("max logit diff {worst:.2e}, streams identical: {streams_match}, {accepted} draft tokens accepted"),
    );
}

/// Taps, keys and values of every content row, soft-prompt rows skipped.
fn content_state(c: &KvCache<f64>, layers: usize) -> Vec<Vec<u64>> {
    let s = c.soft_prompt_len();
    let mut out: Vec<Vec<u64>> = (0..c.content_len()).map(|i| c.tap(i).iter().map(|x| x.to_bits()).collect()).collect();
    for l in 0..layers {
        for t in [c.layer_keys(l), c.layer_values(l)] {
            out.push((s..t.rows()).flat_map(|r| t.row(r).iter().map(|x| x.to_bits())).collect());
        }
    }
    out
}

#[test]
fn c3_prefix_isolation() {
    let tc = TargetConfig::new(3, 16, 2, 10, 48);
    let fut = |s| FutureConfig { soft_prompts: s, n_expert: 4, k_expert: 2 };
    // Same seed: the target weights do not depend on the soft-prompt count.
    let m0 = model(tc.clone(), 6, 2, fut(0), 3);
    let m16 = model(tc, 6, 2, fut(16), 3);
    let tree = DraftTree::from_nodes(vec![
        DraftNode::new(2, None, -0.1, 1),
        DraftNode::new(5, None, -0.2, 1),
        DraftNode::new(9, Some(0), -0.3, 2),
    ])
    .unwrap();
    let mut identical = true;
    for seed in 0..10u64 {
        let toks = prompt(seed, 3 + seed as usize, 10);
        let con = |tap: &[f64]| Ok(m16.con_embed(tap)?.0);
        let bare = m0.target.prefill(&m0.store, &toks, None, None).unwrap();
        let full = m16.target.prefill(&m16.store, &toks, Some(&m16.soft), Some(&con)).unwrap();
        identical &= bare.logits == full.logits && full.future.is_some();
        identical &= content_state(&bare.cache, 3) == content_state(&full.cache, 3);

        // Verification rows, then the committed state, with and without contemplate rows.
        let cons = vec![vec![0.3; 16]; tree.len()];
        let v0 = m0.target.verify_tree(&m0.store, &bare.cache, 4, &tree, &verification_mask(&bare.cache, &tree, false), None).unwrap();
        let v16 = m16
            .target
            .verify_tree(&m16.store, &full.cache, 4, &tree, &verification_mask(&full.cache, &tree, true), Some(&cons))
            .unwrap();
        identical &= v0.root_logits == v16.root_logits && v0.node_logits == v16.node_logits;
        let (mut c0, mut c16) = (bare.cache.clone(), full.cache.clone());
        m0.target.commit(&mut c0, &v0, 4, &tree, &[0, 2]).unwrap();
        m16.target.commit(&mut c16, &v16, 4, &tree, &[0, 2]).unwrap();
        identical &= content_state(&c0, 3) == content_state(&c16, 3);
    }
    verdict(3, "prefix isolation", identical, "logits, taps and KV rows bit-identical for s in {0, 16}");
}

/// A breadth-first binary tree with `n` nodes.
fn binary_tree(n: usize, vocab: u32) -> DraftTree {
    let mut nodes: Vec<DraftNode> = Vec::with_capacity(n);
    for i in 0..n {
        let parent = if i < 2 { None } else { Some(i / 2 - 1) };
        let depth = parent.map_or(1, |p| nodes[p].depth + 1);
        nodes.push(DraftNode::new(i as u32 % vocab, parent, -(i as f64), depth));
    }
    DraftTree::from_nodes(nodes).unwrap()
}

#[test]
fn c4_row_accounting() {
    let mut failures = Vec::new();
    let mut cells = 0;
    for s in [0, 4, 16] {
        let fut = FutureConfig { soft_prompts: s, n_expert: 4, k_expert: 2 };
        let m = model(TargetConfig::new(3, 16, 2, 10, 64), 30, 4, fut, 4);
        let con = |tap: &[f64]| Ok(m.con_embed(tap)?.0);
        for t in [1, 5, 12] {
            let pre = m.target.prefill(&m.store, &prompt(t as u64, t, 10), Some(&m.soft), Some(&con)).unwrap();
            if pre.rows_processed != t + s + 1 {
                failures.push(format!("prefill (t={t}, s={s}): {} rows", pre.rows_processed));
            }
            for n in [1, 4, 30] {
                let tree = binary_tree(n, 10);
                let cons = vec![vec![0.2; 16]; n];
                let mask = verification_mask(&pre.cache, &tree, true);
                let v = m.target.verify_tree(&m.store, &pre.cache, 3, &tree, &mask, Some(&cons)).unwrap();
                if v.rows.draft + v.rows.contemplate != 2 * n || v.rows.root != 1 {
                    failures.push(format!("verify (t={t}, s={s}, T={n}): {:?}", v.rows));
                }
                cells += 1;
            }
        }
        // Trees built by the engine's draft head.
        if s == 16 {
            let e = SpecEngine::new(&m, DecodeMode::new(Variant::Confu, 0.0, 30, 4)).unwrap();
            let st = e.start(&prompt(5, 5, 10), &mut KeyedRng::new(0)).unwrap();
            let tree = e.draft_phase(&st, &mut KeyedRng::new(0)).unwrap();
            let v = e.verify_phase(&st, &tree).unwrap();
            if tree.len() != 30 || v.rows.draft + v.rows.contemplate != 60 {
                failures.push(format!("engine tree of {}: {:?}", tree.len(), v.rows));
            }
        }
    }
    verdict(4, "row accounting", failures.is_empty(), format!("{cells} grid cells, including (5, 16, 30) {}", failures.join("; ")));
}

/// Fourth-order central difference `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`
/// over every coordinate of `id`; returns the relative error.
fn grad_error(m: &mut ConfuModel<f64>, id: ParamId, loss: &dyn Fn(&ConfuModel<f64>) -> f64, analytic: &[f64]) -> f64 {
    let h = 1e-4;
    let orig = m.store.get(id).data().to_vec();
    let mut num = Vec::with_capacity(orig.len());
    for i in 0..orig.len() {
        let mut at = |dx: f64| {
            m.store.get_mut(id).data_mut()[i] = orig[i] + dx;
            loss(m)
        };
        num.push((-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h));
        m.store.get_mut(id).data_mut()[i] = orig[i];
    }
    max_relative_error(analytic, &num, 1e-6)
}

fn check_stage(m: &mut ConfuModel<f64>, stage: Stage, loss: &dyn Fn(&ConfuModel<f64>) -> f64, grads: Vec<(ParamId, Vec<f64>)>) -> (f64, usize) {
    m.store.train_only(stage.trainable_groups());
    let ids: Vec<ParamId> = m.store.ids().filter(|&id| m.store.is_trainable(id)).collect();
    let mut worst: f64 = 0.0;
    for &id in &ids {
        let zeros = vec![0.0; m.store.get(id).len()];
        let g = grads.iter().find(|(p, _)| *p == id).map_or(&zeros, |(_, g)| g).clone();
        worst = worst.max(grad_error(m, id, loss, &g));
    }
    (worst, ids.len())
}

fn grad_tokens(n: usize) -> Vec<u32> {
    (0..n as u64).map(|i| ((i * 7 + 3 + i * i) % 6) as u32).collect()
}

#[test]
fn c5_gradient_fidelity() {
    let fut = FutureConfig { soft_prompts: 2, n_expert: 3, k_expert: 2 };
    let mut m = model(TargetConfig::new(2, 8, 2, 6, 24), 4, 2, fut, 5);
    // Routers start at zero, where top-K ties; move them off the tie.
    for id in [m.moe_con.router(), m.moe_f.router()] {
        for (i, x) in m.store.get_mut(id).data_mut().iter_mut().enumerate() {
            *x = 0.8 * (i as f64 * 1.7 + 0.3).sin();
        }
    }
    let seq = grad_tokens(20);
    let trace = m.target.trace(&m.store, &seq).unwrap();
    let cfg = TrainConfig { unroll: 2, anchors: 2, window: 1, min_gap: 4, ..TrainConfig::default() };
    let anchors = AnchorSet::new(vec![3, 11], seq.len(), &cfg).unwrap();

    let confu = |m: &ConfuModel<f64>| {
        let mut tape = Tape::new();
        let lt = loss_confu(&mut tape, m, &trace, &anchors, 1, 2).unwrap();
        tape.value(lt.total).data()[0]
    };
    let grads = {
        let mut tape = Tape::new();
        let lt = loss_confu(&mut tape, &m, &trace, &anchors, 1, 2).unwrap();
        tape.backward(lt.total).unwrap().param_grads()
    };
    let (e_confu, n_confu) = check_stage(&mut m, Stage::Confu, &confu, grads);

    let baseline = |m: &ConfuModel<f64>| {
        let mut tape = Tape::new();
        let lt = loss_eagle3(&mut tape, m, &trace, 3).unwrap();
        tape.value(lt.total).data()[0]
    };
    let grads = {
        let mut tape = Tape::new();
        let lt = loss_eagle3(&mut tape, &m, &trace, 3).unwrap();
        tape.backward(lt.total).unwrap().param_grads()
    };
    let (e_base, n_base) = check_stage(&mut m, Stage::DraftBaseline, &baseline, grads);
    let worst = e_confu.max(e_base);
    verdict(
        5,
        "gradient fidelity",
        worst < 1e-4,
        format!("max relative error {worst:.2e} over {n_confu} future-aware and {n_base} baseline parameters"),
    );
}

/// Anchor-only terms through the inference path: prefill with soft prompts
/// and a contemplate row, then stateless drafting along the data.
fn anchor_terms(m: &ConfuModel<f64>, trace: &TargetTrace<f64>, t: usize, depth: usize) -> Vec<f64> {
    let seq = &trace.tokens;
    let con = |tap: &[f64]| m.con_embed(tap).map(|(e, _)| e);
    let pre = m.target.prefill(&m.store, &seq[..=t], Some(&m.soft), Some(&con)).unwrap();
    let (future, _) = m.future_slot(trace.taps.row(t), &pre.future.unwrap().f).unwrap();
    let mut slots: Vec<_> = (0..=t)
        .map(|j| m.draft.slot(&m.store, seq[j + 1], m.draft.down_project(&m.store, trace.taps.row(j)).unwrap()).unwrap())
        .collect();
    let mut out = Vec::new();
    for i in 1..=depth {
        let step = m.draft.draft_next(&m.store, &slots, Some(&future)).unwrap();
        let mut tape = Tape::<f64>::new();
        let lq = tape.constant(Tensor::row_vector(step.logits.clone()));
        let lq = tape.log_softmax(lq);
        let kl = tape.kl_rows(&Tensor::row_vector(trace.probs.row(t + i).to_vec()), lq, KL_FLOOR).unwrap();
        out.push(tape.value(kl).data()[0]);
        slots.push(m.draft.slot(&m.store, seq[t + i + 1], step.hidden).unwrap());
    }
    out
}

#[test]
fn c6_loss_hierarchy() {
    let fut = FutureConfig { soft_prompts: 2, n_expert: 3, k_expert: 2 };
    let m = model(TargetConfig::new(2, 8, 2, 6, 40), 4, 2, fut, 6);
    let seq = grad_tokens(32);
    let trace = m.target.trace(&m.store, &seq).unwrap();
    let depth = 3;

    let cfg0 = TrainConfig { unroll: depth, anchors: 3, window: 0, min_gap: 4, ..TrainConfig::default() };
    let anchors = AnchorSet::new(vec![2, 9, 20], seq.len(), &cfg0).unwrap();
    let mut tape = Tape::new();
    let lt = loss_confu(&mut tape, &m, &trace, &anchors, 0, depth).unwrap();
    let mut exact = lt.terms == 3 * depth;
    for (a, &t) in anchors.positions().iter().enumerate() {
        let want = anchor_terms(&m, &trace, t, depth);
        for (i, w) in want.iter().enumerate() {
            exact &= tape.value(lt.steps[i]).data()[a].to_bits() == w.to_bits();
        }
    }

    let cfg1 = TrainConfig { unroll: 3, anchors: 4, window: 1, min_gap: 5, ..TrainConfig::default() };
    let anchors = AnchorSet::new(vec![1, 8, 15, 24], seq.len(), &cfg1).unwrap();
    let mut tape = Tape::new();
    let lt = loss_confu(&mut tape, &m, &trace, &anchors, 1, 3).unwrap();
    let per_anchor = lt.terms / anchors.len();
    let augmented = anchors.augmented_len();
    let pass = exact && lt.terms == 6 * anchors.len() && augmented == seq.len() + anchors.len();
    verdict(
        6,
        "loss hierarchy",
        pass,
        format!("l=0 bit-exact: {exact}; {per_anchor} terms per anchor at l=1, L=3; augmented length {augmented} for N=32, K=4"),
    );
}

#[test]
fn c7_moe_properties() {
    let mut fails = Vec::new();
    let tc = TargetConfig::new(3, 16, 2, 10, 32);
    let mut m = model(tc.clone(), 4, 2, FutureConfig { soft_prompts: 2, n_expert: 8, k_expert: 3 }, 7);
    let moe = m.moe_con.clone();
    let tap_w = moe.in_dim();

    // Uniform router logits: every expert equally likely, ties go to the
    // lowest indices and the output is the plain mean of those experts.
    let h: Vec<f64> = (0..tap_w).map(|i| (i as f64 * 0.61).cos()).collect();
    let (out, g) = moe.embed(&m.store, &h).unwrap();
    let experts = m.store.get(moe.experts()).clone();
    let mean: Vec<f64> = (0..moe.out_dim()).map(|j| (0..3).map(|e| experts.at(e, j)).sum::<f64>() / 3.0).collect();
    if g.selected != [0, 1, 2] || g.probs.iter().any(|&p| (p - 0.125).abs() > 1e-15) || max_abs(&out, &mean) > 1e-12 {
        fails.push(format!("uniform case: selected {:?}", g.selected));
    }

    for (i, x) in m.store.get_mut(moe.router()).data_mut().iter_mut().enumerate() {
        *x = (i as f64 * 0.37).sin();
    }
    for seed in 0..20u64 {
        let h: Vec<f64> = (0..tap_w).map(|i| ((i as u64 * 13 + seed * 5) as f64 * 0.29).sin()).collect();
        let (out, g) = moe.embed(&m.store, &h).unwrap();
        let nonzero = g.gates.iter().filter(|&&w| w != 0.0).count();
        let sum: f64 = g.gates.iter().sum();
        let mix: Vec<f64> =
            (0..moe.out_dim()).map(|j| g.selected.iter().map(|&e| g.gates[e] * experts.at(e, j)).sum()).collect();
        if nonzero != 3 || (sum - 1.0).abs() > 1e-12 || max_abs(&out, &mix) > 1e-12 {
            fails.push(format!("seed {seed}: {nonzero} nonzero gates, sum {sum}"));
        }
    }

    let mut m1 = model(tc, 4, 2, FutureConfig { soft_prompts: 2, n_expert: 5, k_expert: 1 }, 8);
    let moe1 = m1.moe_f.clone();
    for (i, x) in m1.store.get_mut(moe1.router()).data_mut().iter_mut().enumerate() {
        *x = (i as f64 * 0.53).cos();
    }
    let experts1 = m1.store.get(moe1.experts()).clone();
    for seed in 0..20u64 {
        let h: Vec<f64> = (0..moe1.in_dim()).map(|i| ((i as u64 * 3 + seed * 11) as f64 * 0.41).cos()).collect();
        let (out, g) = moe1.embed(&m1.store, &h).unwrap();
        let best = argmax(&g.probs);
        if g.selected != [best] || out != experts1.row(best) {
            fails.push(format!("K=1 seed {seed}: selected {:?}, argmax {best}", g.selected));
        }
    }
    verdict(7, "MoE properties", fails.is_empty(), format!("gates, K=1 argmax and uniform ties checked {}", fails.join("; ")));
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Draft-stage training seeds the τ means average over.
const DRAFT_SEEDS: [u64; 3] = [0, 1, 2];

#[test]
fn c8_directional_experiment() {
    let base = ExperimentConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.ini")).unwrap();
    assert_eq!((base.train_target.steps, base.train_draft.steps, base.train_confu.steps), (2000, 1000, 1000));
    let dir = tempfile::tempdir().unwrap();
    let ck = |name: &str| dir.path().join(format!("{name}.ckpt"));
    let sink = &mut std::io::sink();

    train(&base, Job::Target, None, &ck("target"), sink).unwrap();
    let mut cfg = base.clone();
    cfg.bench.temperatures = vec![0.0];
    cfg.bench.nodes = vec![30];
    let prompts = bench_prompts(&cfg).unwrap();

    let mut tau: std::collections::BTreeMap<Mode, Vec<f64>> = Default::default();
    let mut min_rounds = usize::MAX;
    for seed in DRAFT_SEEDS {
        let mut c = cfg.clone();
        c.train_draft.seed = seed;
        c.train_confu.seed = seed;
        let baseline = ck(&format!("baseline-{seed}"));
        train(&c, Job::Draft(Mode::Baseline), Some(&ck("target")), &baseline, sink).unwrap();
        for mode in Mode::ALL {
            let path = if mode == Mode::Baseline {
                baseline.clone()
            } else {
                let p = ck(&format!("{mode}-{seed}"));
                train(&c, Job::Draft(mode), Some(&baseline), &p, sink).unwrap();
                p
            };
            let model = load_model(&c, mode, &path).unwrap();
            let row = bench_model(&c, mode, &model, &prompts).unwrap().remove(0).row;
            println!("seed {seed} {mode}: tau {:.3} over {} rounds", row.tau, row.rounds);
            min_rounds = min_rounds.min(row.rounds);
            tau.entry(mode).or_default().push(row.tau);
        }
    }
    let m = |mode| mean(&tau[&mode]);
    let (b, c, nm, nr) = (m(Mode::Baseline), m(Mode::Confu), m(Mode::ConfuNoMoe), m(Mode::ConfuNoMoeNoRepl));
    let wins = tau[&Mode::Confu].iter().zip(&tau[&Mode::Baseline]).filter(|(c, b)| c >= b).count();
    let pass = min_rounds >= 200 && c >= b && c >= nm && nm >= nr;
    verdict(
        8,
        "directional experiment",
        pass,
        format!(
            "mean tau over draft seeds {DRAFT_SEEDS:?}: baseline {b:.3}, confu {c:.3}, no-moe {nm:.3}, no-moe-no-repl {nr:.3}; \
             confu >= baseline on {wins} of {} seeds; at least {min_rounds} rounds per cell",
            DRAFT_SEEDS.len()
        ),
    );
}

const TINY: &str = "\
[corpus]
seq_len = 24
sequences = 6

[model]
n_layers = 2
d_model = 8
n_heads = 2
max_seq_len = 48
tree_budget = 6
branch = 2
soft_prompts = 2
n_expert = 3
k_expert = 2

[train-target]
steps = 3
batch = 2

[train-draft]
steps = 2
batch = 2

[train-confu]
steps = 2
batch = 2
anchors = 2

[bench]
modes = baseline,confu
temperatures = 0,1
nodes = 2,6
prompts = 3
max_tokens = 12
";

/// Every artifact of a tiny end-to-end run through the binary.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let config = dir.join("tiny.ini");
    std::fs::write(&config, TINY).unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_confu"))
            .env_remove("CONFU_SEED")
            .current_dir(dir)
            .args(["--config", "tiny.ini", "--seed", "5"])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    run(&["train-target", "--out", "target.ckpt", "--log", "target.jsonl"]);
    run(&["train-draft", "--from", "target.ckpt", "--out", "baseline.ckpt", "--log", "baseline.jsonl"]);
    run(&["train-confu", "--from", "baseline.ckpt", "--out", "confu.ckpt", "--log", "confu.jsonl"]);
    run(&["bench", "--out", "bench.csv", "--checkpoint", "baseline=baseline.ckpt", "--checkpoint", "confu=confu.ckpt"]);
    run(&["report", "bench.csv", "--out", "table.csv"]);
    let decode = run(&["decode", "--checkpoint", "confu.ckpt", "--prompt", "1,2,3", "--temperature", "1"]);
    let mut files: Vec<(String, Vec<u8>)> =
        ["target.ckpt", "baseline.ckpt", "confu.ckpt", "target.jsonl", "baseline.jsonl", "confu.jsonl", "bench.csv", "table.csv"]
            .iter()
            .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
            .collect();
    // Decode metrics carry wall time.
    let mut v: serde_json::Value = serde_json::from_slice(&decode).unwrap();
    v["metrics"]["wall_ns"] = 0.into();
    files.push(("decode".into(), v.to_string().into_bytes()));
    files
}

#[test]
fn c9_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (pipeline(a.path()), pipeline(b.path()));
    let differing: Vec<&str> = ra.iter().zip(&rb).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();
    let csv_rows = String::from_utf8_lossy(&ra.iter().find(|f| f.0 == "bench.csv").unwrap().1).lines().count() - 1;
    verdict(
        9,
        "determinism",
        differing.is_empty() && csv_rows == 8,
        format!("{} artifacts compared, differing: {differing:?}; bench grid of {csv_rows} rows", ra.len()),
    );
}
