use confu_core::draft::DraftTree;
use confu_core::engine::{
    accept_reject_path, autoregressive, autoregressive_distribution, speculative_distribution, total_variation,
    AcceptRule, DecodeMode, KeyedRng, SpecEngine, Variant,
};
use confu_core::model::{ConfuModel, FutureConfig, ModelConfig};
use confu_core::target::{verification_mask, TargetConfig};
use confu_core::draft::probs_f64;

fn tiny_model(seed: u64) -> ConfuModel<f64> {
    let cfg = ModelConfig::new(
        TargetConfig::new(2, 16, 2, 8, 16),
        2,
        4,
        2,
        FutureConfig { soft_prompts: 3, n_expert: 4, k_expert: 2 },
    );
    ConfuModel::init(cfg, seed).unwrap()
}

fn mode(variant: Variant, temperature: f64, nodes: usize, branch: usize) -> DecodeMode {
    DecodeMode::new(variant, temperature, nodes, branch)
}

#[test]
fn lossless_rule_matches_autoregressive_distribution_exactly() {
    let m = tiny_model(1);
    let prompt = [1, 5];
    for temp in [1.0, 0.7] {
        let ar = autoregressive_distribution(&m, &prompt, 4, temp, None).unwrap();
        for variant in [Variant::Baseline, Variant::Confu] {
            for (nodes, branch) in [(2, 1), (4, 2)] {
                let e = SpecEngine::new(&m, mode(variant, temp, nodes, branch)).unwrap();
                let sd = speculative_distribution(&e, 8, &prompt, 4).unwrap();
                let tv = total_variation(&ar, &sd);
                assert!(tv < 1e-9, "{variant:?} T={nodes} k={branch} temp={temp}: TV {tv}");
            }
        }
    }
}

#[test]
fn sampled_chain_drafts_are_lossless() {
    let m = tiny_model(2);
    let prompt = [3];
    let ar = autoregressive_distribution(&m, &prompt, 3, 1.0, None).unwrap();
    let mut md = mode(Variant::Confu, 1.0, 2, 1);
    md.sample_drafts = true;
    let e = SpecEngine::new(&m, md).unwrap();
    let sd = speculative_distribution(&e, 8, &prompt, 3).unwrap();
    assert!(total_variation(&ar, &sd) < 1e-9);
}

#[test]
fn greedy_match_is_not_lossless_when_sampling() {
    let m = tiny_model(3);
    let prompt = [2, 2];
    let ar = autoregressive_distribution(&m, &prompt, 3, 1.0, None).unwrap();
    let mut md = mode(Variant::Baseline, 1.0, 2, 1);
    md.rule = AcceptRule::GreedyMatch;
    let e = SpecEngine::new(&m, md).unwrap();
    let sd = speculative_distribution(&e, 8, &prompt, 3).unwrap();
    assert!(total_variation(&ar, &sd) > 1e-3);
}

#[test]
fn eos_stops_both_distributions_identically() {
    let m = tiny_model(4);
    let ar = autoregressive_distribution(&m, &[1], 4, 1.0, Some(7)).unwrap();
    let e = SpecEngine::new(&m, mode(Variant::Confu, 1.0, 4, 2)).unwrap().with_eos(Some(7));
    let sd = speculative_distribution(&e, 8, &[1], 4).unwrap();
    assert!(total_variation(&ar, &sd) < 1e-9);
}

#[test]
fn exhaustive_mode_refuses_large_configs() {
    let m = tiny_model(1);
    let e = SpecEngine::new(&m, mode(Variant::Baseline, 1.0, 2, 1)).unwrap();
    assert!(speculative_distribution(&e, 8, &[1], 5).is_err());
}

#[test]
fn one_token_is_prefill_only() {
    let m = tiny_model(5);
    let e = SpecEngine::new(&m, mode(Variant::Confu, 0.0, 4, 2)).unwrap();
    let g = e.generate(&[1, 2], 1, &mut KeyedRng::new(0)).unwrap();
    assert_eq!(g.tokens.len(), 1);
    assert_eq!(g.metrics.rounds, 0);
    assert_eq!(g.metrics.tau, 1.0);
}

#[test]
fn zero_budget_is_autoregressive() {
    let m = tiny_model(6);
    for temp in [0.0, 1.0] {
        let e = SpecEngine::new(&m, mode(Variant::Baseline, temp, 0, 1)).unwrap();
        let g = e.generate(&[4], 10, &mut KeyedRng::new(9)).unwrap();
        assert_eq!(g.metrics.tau, 1.0);
        assert_eq!(g.metrics.draft_rows, 0);
        let ar = autoregressive(&m, &[4], 10, temp, None, &mut KeyedRng::new(9)).unwrap();
        assert_eq!(g.tokens, ar);
    }
}

#[test]
fn tau_is_bounded_by_chain_depth() {
    let m = tiny_model(7);
    for seed in 0..5 {
        let e = SpecEngine::new(&m, mode(Variant::Confu, 1.0, 3, 1)).unwrap();
        let g = e.generate(&[1, 2, 3], 12, &mut KeyedRng::new(seed)).unwrap();
        assert!(g.metrics.tau >= 1.0 && g.metrics.tau <= 4.0);
        assert_eq!(g.metrics.contemplate_rows, g.metrics.draft_rows);
        assert_eq!(g.tokens.len(), 12);
    }
}

/// Independent linear speculative decoding: draft a greedy chain with the
/// baseline head, verify each prefix with sequential decode steps, then
/// accept with the path rule.
#[test]
fn chain_tree_matches_linear_speculative_loop() {
    let m = tiny_model(8);
    let prompt = [2u32, 6, 1];
    let depth = 3;
    let (temp, max_tokens, seed) = (0.8, 10, 4);
    let e = SpecEngine::new(&m, mode(Variant::Baseline, temp, depth, 1)).unwrap();
    let got = e.generate(&prompt, max_tokens, &mut KeyedRng::new(seed)).unwrap().tokens;

    let mut rng = KeyedRng::new(seed);
    let draft = m.draft.with_mode(confu_core::draft::FutureMode::Ablated);
    let first = autoregressive(&m, &prompt, 1, temp, None, &mut rng).unwrap()[0];
    let seq: Vec<u32> = prompt.to_vec();
    let mut out = vec![first];
    let mut round = 0;
    while out.len() < max_tokens {
        round += 1;
        let root = *out.last().unwrap();
        let committed: Vec<u32> = seq.iter().chain(&out[..out.len() - 1]).copied().collect();
        let pre = m.target.prefill(&m.store, &committed, None, None).unwrap();
        let cache = pre.cache;
        // Draft chain from scratch with stateless calls.
        let mut slots = Vec::new();
        for k in 0..committed.len() {
            let next = if k + 1 < committed.len() { committed[k + 1] } else { root };
            let feat = draft.down_project(&m.store, cache.tap(k)).unwrap();
            slots.push(draft.slot(&m.store, next, feat).unwrap());
        }
        let room = m.cfg.target.max_seq_len - committed.len() - 2;
        let mut toks = Vec::new();
        for _ in 0..depth.min(room) {
            let s = draft.draft_next(&m.store, &slots, None).unwrap();
            let t = confu_core::tensor::argmax(&s.probs) as u32;
            toks.push(t);
            slots.push(draft.slot(&m.store, t, s.hidden).unwrap());
        }
        // Target distributions by sequential decoding.
        let mut c = cache.clone();
        let mut p = Vec::new();
        let (l, _) = m.target.decode_step(&m.store, &mut c, root).unwrap();
        p.push(probs_f64(&l, temp));
        for &t in &toks {
            let (l, _) = m.target.decode_step(&m.store, &mut c, t).unwrap();
            p.push(probs_f64(&l, temp));
        }
        let q: Vec<Vec<f64>> = toks
            .iter()
            .map(|&t| (0..8).map(|i| if i == t as usize { 1.0 } else { 0.0 }).collect())
            .collect();
        let (a, next) = accept_reject_path(&toks, &q, &p, AcceptRule::Lossless, &mut rng, round).unwrap();
        out.extend_from_slice(&toks[..a]);
        out.push(next);
        if committed.len() + a + 3 > m.cfg.target.max_seq_len {
            break;
        }
    }
    out.truncate(max_tokens);
    assert_eq!(got, out);
}

#[test]
fn contemplate_rows_do_not_change_verification() {
    let m = tiny_model(9);
    for seed in 0..10u64 {
        let prompt: Vec<u32> = (0..3).map(|i| ((seed * 3 + i * 5) % 8) as u32).collect();
        let e = SpecEngine::new(&m, mode(Variant::Confu, 1.0, 4, 2)).unwrap();
        let st = e.start(&prompt, &mut KeyedRng::new(seed)).unwrap();
        let tree = e.draft_phase(&st, &mut KeyedRng::new(seed)).unwrap();
        let with = e.verify_phase(&st, &tree).unwrap();
        let bare = m
            .target
            .verify_tree(&m.store, &st.cache, st.root, &tree, &verification_mask(&st.cache, &tree, false), None)
            .unwrap();
        assert_eq!(with.root_logits, bare.root_logits);
        assert_eq!(with.node_logits, bare.node_logits);
        assert_eq!(with.rows.contemplate, 4);
        assert_eq!(bare.rows.contemplate, 0);
    }
}

#[test]
fn greedy_budget_is_monotone_for_nested_trees() {
    let m = tiny_model(10);
    for seed in 0..6u64 {
        let prompt = [seed as u32 % 8, 3];
        let mut accepted = Vec::new();
        for nodes in [1, 3, 6] {
            let mut md = mode(Variant::Baseline, 0.0, nodes, 2);
            md.rule = AcceptRule::GreedyMatch;
            let e = SpecEngine::new(&m, md).unwrap();
            let mut st = e.start(&prompt, &mut KeyedRng::new(seed)).unwrap();
            let r = e.round(&mut st, &mut KeyedRng::new(seed), 100).unwrap();
            accepted.push(r.a);
        }
        assert!(accepted.windows(2).all(|w| w[0] <= w[1]), "{accepted:?}");
    }
}

#[test]
fn greedy_tree_without_match_corrects_to_root_argmax() {
    let m = tiny_model(11);
    let e = SpecEngine::new(&m, mode(Variant::Baseline, 0.0, 2, 2)).unwrap();
    let st = e.start(&[1, 2], &mut KeyedRng::new(0)).unwrap();
    let v = m
        .target
        .verify_tree(&m.store, &st.cache, st.root, &DraftTree::default(), &verification_mask(&st.cache, &DraftTree::default(), false), None)
        .unwrap();
    let best = confu_core::tensor::argmax(&v.root_logits) as u32;
    let wrong: Vec<u32> = (0..8).filter(|&t| t != best).take(2).collect();
    let tree = DraftTree::from_nodes(vec![
        confu_core::draft::DraftNode::new(wrong[0], None, -0.1, 1),
        confu_core::draft::DraftNode::new(wrong[1], None, -0.2, 1),
    ])
    .unwrap();
    let verify = e.verify_phase(&st, &tree).unwrap();
    let acc = e.accept_phase(&st, &tree, &verify, &mut KeyedRng::new(0)).unwrap();
    assert!(acc.accepted.is_empty());
    assert_eq!(acc.next_token, best);
}
