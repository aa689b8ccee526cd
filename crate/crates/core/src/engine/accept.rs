//! Accept/reject along a draft path or tree.
//!
//! Target distributions passed in here are already temperature-adjusted.
//! Deterministically chosen draft tokens are treated as one-hot proposals, so
//! the lossless test for sibling `x` accepts with the current residual mass
//! `p(x)` and a rejection zeroes `x` out of the residual. Sampled drafts use
//! their recorded proposal `q` and the usual `min(1, p/q)` test.

use crate::draft::DraftTree;
use crate::engine::rng::{DrawKey, Purpose, Randomness};
use crate::error::{ConfuError, Result};
use crate::tensor::argmax;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AcceptRule {
    /// Distribution-preserving rejection sampling.
    Lossless,
    /// Accept a draft only if it equals the target argmax.
    GreedyMatch,
}

/// Outcome of accepting against one tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeAcceptance {
    /// Accepted node indices, root-first.
    pub accepted: Vec<usize>,
    /// Correction token, or the bonus token after a fully accepted path.
    pub next_token: u32,
    pub bonus: bool,
}

/// `normalize(max(0, p - q))`; `None` when no mass is left.
pub fn residual(p: &[f64], q: &[f64]) -> Option<Vec<f64>> {
    let r: Vec<f64> = p.iter().zip(q).map(|(a, b)| (a - b).max(0.0)).collect();
    let z: f64 = r.iter().sum();
    (z > 0.0).then(|| r.into_iter().map(|x| x / z).collect())
}

fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Tests one candidate against the current residual; on rejection the
/// residual is updated in place.
fn lossless_test(
    rng: &mut dyn Randomness,
    key: DrawKey,
    resid: &mut Vec<f64>,
    token: u32,
    proposal: Option<&[f64]>,
) -> Result<bool> {
    let x = token as usize;
    if x >= resid.len() {
        return Err(ConfuError::Dimension(format!("token {token} outside vocab {}", resid.len())));
    }
    let q = proposal.map_or_else(|| one_hot(resid.len(), x), <[f64]>::to_vec);
    if q.len() != resid.len() {
        return Err(ConfuError::Dimension("proposal and target vocab differ".into()));
    }
    if q[x] <= 0.0 {
        return Err(ConfuError::Proposal { token });
    }
    let ratio = (resid[x] / q[x]).min(1.0);
    if rng.bernoulli(key, ratio)? {
        return Ok(true);
    }
    if let Some(r) = residual(resid, &q) {
        *resid = r;
    }
    Ok(false)
}

/// Accepts along a single path: `tokens[i]` was proposed from `q[i]` and is
/// checked against `p[i]`; `p` has one extra entry for the bonus token.
/// Returns the accepted count and the correction or bonus token.
pub fn accept_reject_path(
    tokens: &[u32],
    q: &[Vec<f64>],
    p: &[Vec<f64>],
    rule: AcceptRule,
    rng: &mut dyn Randomness,
    round: u64,
) -> Result<(usize, u32)> {
    if q.len() != tokens.len() || p.len() != tokens.len() + 1 {
        return Err(ConfuError::Dimension(format!(
            "path of {} tokens needs as many proposals and one more target distribution",
            tokens.len()
        )));
    }
    for (i, &tok) in tokens.iter().enumerate() {
        let key = DrawKey::new(round, i as u64 + 1, Purpose::Accept);
        let mut resid = p[i].clone();
        let ok = match rule {
            AcceptRule::Lossless => lossless_test(rng, key, &mut resid, tok, Some(&q[i]))?,
            AcceptRule::GreedyMatch => tok as usize == argmax(&p[i]),
        };
        if !ok {
            let key = DrawKey::new(round, i as u64, Purpose::Residual);
            return Ok((i, rng.categorical(key, &resid)? as u32));
        }
    }
    let n = tokens.len();
    let key = DrawKey::new(round, n as u64, Purpose::Bonus);
    Ok((n, rng.categorical(key, &p[n])? as u32))
}

/// Walks `tree` from the root: at each level the children are tried in rank
/// order; the first accepted child is descended into and its subtree is the
/// only one considered further. `root_p` is the target distribution after
/// the root; `node_p[i]` the one after node `i`.
pub fn accept_tree(
    tree: &DraftTree,
    root_p: &[f64],
    node_p: &[Vec<f64>],
    rule: AcceptRule,
    rng: &mut dyn Randomness,
    round: u64,
) -> Result<TreeAcceptance> {
    if node_p.len() != tree.len() {
        return Err(ConfuError::Dimension(format!("{} target rows for {} nodes", node_p.len(), tree.len())));
    }
    let mut accepted = Vec::new();
    let mut parent: Option<usize> = None;
    let mut p = root_p.to_vec();
    loop {
        let children = tree.children(parent);
        let mut resid = p.clone();
        let mut chosen = None;
        for &c in &children {
            let node = &tree.nodes()[c];
            let key = DrawKey::new(round, c as u64 + 1, Purpose::Accept);
            let ok = match rule {
                AcceptRule::Lossless => lossless_test(rng, key, &mut resid, node.token, node.proposal.as_deref())?,
                AcceptRule::GreedyMatch => node.token as usize == argmax(&p),
            };
            if ok {
                chosen = Some(c);
                break;
            }
        }
        match chosen {
            Some(c) => {
                accepted.push(c);
                parent = Some(c);
                p = node_p[c].clone();
            }
            None => {
                let bonus = children.is_empty();
                let at = parent.map_or(0, |i| i as u64 + 1);
                let key = DrawKey::new(round, at, if bonus { Purpose::Bonus } else { Purpose::Residual });
                let next_token = rng.categorical(key, &resid)? as u32;
                return Ok(TreeAcceptance { accepted, next_token, bonus });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::draft::DraftNode;
    use crate::engine::rng::{enumerate_outcomes, KeyedRng};

    #[test]
    fn equal_p_and_q_accepts_everything() {
        let q = vec![vec![0.2, 0.8], vec![0.6, 0.4]];
        let p = vec![q[0].clone(), q[1].clone(), vec![0.5, 0.5]];
        let outs = enumerate_outcomes(|rng| accept_reject_path(&[1, 0], &q, &p, AcceptRule::Lossless, rng, 1)).unwrap();
        let all_accepted: f64 = outs.iter().filter(|(_, r)| r.0 == 2).map(|(p, _)| p).sum();
        assert!((all_accepted - 1.0).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_residual_case() {
        // vocab {a, b}; q = (1, 0) proposes a; p = (0.5, 0.5).
        let q = vec![vec![1.0, 0.0]];
        let p = vec![vec![0.5, 0.5], vec![1.0, 0.0]];
        let outs = enumerate_outcomes(|rng| accept_reject_path(&[0], &q, &p, AcceptRule::Lossless, rng, 1)).unwrap();
        let accept: f64 = outs.iter().filter(|(_, r)| r.0 == 1).map(|(p, _)| p).sum();
        assert_eq!(accept, 0.5);
        let rejected_to_b: f64 = outs.iter().filter(|(_, r)| *r == (0, 1)).map(|(p, _)| p).sum();
        assert_eq!(rejected_to_b, 0.5);
        assert_eq!(residual(&p[0], &q[0]), Some(vec![0.0, 1.0]));
    }

    #[test]
    fn zero_proposal_probability_is_an_error() {
        let q = vec![vec![0.0, 1.0]];
        let p = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let r = accept_reject_path(&[0], &q, &p, AcceptRule::Lossless, &mut KeyedRng::new(0), 0);
        assert!(matches!(r, Err(ConfuError::Proposal { token: 0 })));
    }

    #[test]
    fn greedy_prefix_stops_at_first_mismatch() {
        let oh = |i: usize| one_hot(4, i);
        let q = vec![oh(1), oh(2), oh(3)];
        let p = vec![oh(1), oh(2), oh(0), oh(0)];
        let (a, next) = accept_reject_path(&[1, 2, 3], &q, &p, AcceptRule::GreedyMatch, &mut KeyedRng::new(0), 0).unwrap();
        assert_eq!((a, next), (2, 0));
    }

    /// Marginal of the first committed token equals the target for any tree.
    #[test]
    fn tree_acceptance_preserves_the_first_token_distribution() {
        let tree = DraftTree::from_nodes(vec![
            DraftNode::new(2, None, -0.1, 1),
            DraftNode::new(0, None, -0.5, 1),
            DraftNode::new(1, Some(0), -0.7, 2),
        ])
        .unwrap();
        let root_p = vec![0.1, 0.2, 0.3, 0.4];
        let node_p = vec![vec![0.25; 4], vec![0.4, 0.3, 0.2, 0.1], vec![0.7, 0.1, 0.1, 0.1]];
        let outs = enumerate_outcomes(|rng| accept_tree(&tree, &root_p, &node_p, AcceptRule::Lossless, rng, 1)).unwrap();
        let mut first = [0.0; 4];
        for (pr, acc) in &outs {
            let tok = acc.accepted.first().map_or(acc.next_token, |&n| tree.nodes()[n].token);
            first[tok as usize] += pr;
        }
        for (a, b) in first.iter().zip(&root_p) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn greedy_tree_with_no_match_corrects_to_argmax() {
        let tree = DraftTree::from_nodes(vec![DraftNode::new(0, None, 0.0, 1), DraftNode::new(1, None, 0.0, 1)]).unwrap();
        let p = one_hot(3, 2);
        let acc = accept_tree(&tree, &p, &[p.clone(), p.clone()], AcceptRule::GreedyMatch, &mut KeyedRng::new(1), 1).unwrap();
        assert_eq!(acc, TreeAcceptance { accepted: vec![], next_token: 2, bonus: false });
    }
}
