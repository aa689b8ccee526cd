//! Anchor positions for contemplate rows during training.

use rand::Rng;

use crate::error::{ConfuError, Result};
use crate::train::TrainConfig;

/// Sorted anchor positions within one training sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    positions: Vec<usize>,
    seq_len: usize,
}

impl AnchorSet {
    pub fn new(positions: Vec<usize>, seq_len: usize, cfg: &TrainConfig) -> Result<Self> {
        let last = last_feasible(seq_len, cfg);
        if positions.windows(2).any(|w| w[1] < w[0] + cfg.min_gap) {
            return Err(ConfuError::Config(format!("anchors {positions:?} closer than gap {}", cfg.min_gap)));
        }
        if positions.iter().any(|&t| last.is_none_or(|l| t > l)) {
            return Err(ConfuError::Config(format!("anchors {positions:?} leave no room in {seq_len} tokens")));
        }
        Ok(Self { positions, seq_len })
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Training length once one contemplate row per anchor is inserted.
    pub fn augmented_len(&self) -> usize {
        self.seq_len + self.positions.len()
    }
}

/// Largest anchor `t` whose window `t..=t+l` still has `L` targets left.
pub fn last_feasible(seq_len: usize, cfg: &TrainConfig) -> Option<usize> {
    seq_len.checked_sub(2 + cfg.window + cfg.unroll)
}

/// `ways[i][k]`: number of `k`-subsets of `i..m` with gaps of at least `gap`.
fn count_table(m: usize, k: usize, gap: usize) -> Result<Vec<Vec<u128>>> {
    let mut ways = vec![vec![0u128; k + 1]; m + gap + 1];
    for row in ways.iter_mut() {
        row[0] = 1;
    }
    for i in (0..m).rev() {
        for j in 1..=k {
            ways[i][j] = ways[i + 1][j]
                .checked_add(ways[i + gap][j - 1])
                .ok_or_else(|| ConfuError::Config("anchor set count overflows".into()))?;
        }
    }
    Ok(ways)
}

/// Number of valid anchor sets for a sequence of `seq_len` tokens.
pub fn count_anchor_sets(seq_len: usize, cfg: &TrainConfig) -> Result<u128> {
    let Some(last) = last_feasible(seq_len, cfg) else {
        return Ok(u128::from(cfg.anchors == 0));
    };
    Ok(count_table(last + 1, cfg.anchors, cfg.min_gap)?[0][cfg.anchors])
}

/// Draws `K_train` anchors uniformly among all valid sets.
pub fn sample_anchors(seq_len: usize, cfg: &TrainConfig, rng: &mut impl Rng) -> Result<AnchorSet> {
    cfg.validate(seq_len)?;
    let k = cfg.anchors;
    if k == 0 {
        return Ok(AnchorSet { positions: Vec::new(), seq_len });
    }
    let m = last_feasible(seq_len, cfg).map_or(0, |l| l + 1);
    let ways = count_table(m, k, cfg.min_gap)?;
    if ways[0][k] == 0 {
        return Err(ConfuError::Config(format!(
            "no {k} anchors with gap {} fit in {seq_len} tokens (L={}, l={})",
            cfg.min_gap, cfg.unroll, cfg.window
        )));
    }
    let mut positions = Vec::with_capacity(k);
    let mut i = 0;
    while positions.len() < k {
        let left = k - positions.len();
        let take = ways[i + cfg.min_gap][left - 1];
        if rng.random_range(0..ways[i][left]) < take {
            positions.push(i);
            i += cfg.min_gap;
        } else {
            i += 1;
        }
    }
    Ok(AnchorSet { positions, seq_len })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(anchors: usize, unroll: usize, window: usize, min_gap: usize) -> TrainConfig {
        TrainConfig { anchors, unroll, window, min_gap, ..TrainConfig::default() }
    }

    #[test]
    fn small_case_hits_only_the_three_valid_sets() {
        // N=10, L=2, l=1: t ≤ 5; pairs with gap ≥ 4 are (0,4), (0,5), (1,5).
        let c = cfg(2, 2, 1, 4);
        assert_eq!(count_anchor_sets(10, &c).unwrap(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let a = sample_anchors(10, &c, &mut rng).unwrap();
            assert_eq!(a.augmented_len(), 12);
            seen.insert(a.positions().to_vec());
        }
        let want: std::collections::BTreeSet<Vec<usize>> = [vec![0, 4], vec![0, 5], vec![1, 5]].into();
        assert_eq!(seen, want);
    }

    #[test]
    fn zero_anchors_is_empty() {
        let a = sample_anchors(10, &cfg(0, 2, 1, 4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.augmented_len(), 10);
    }

    #[test]
    fn infeasible_requests_are_config_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // Too many anchors for N/(l+L+1).
        assert!(matches!(sample_anchors(10, &cfg(3, 2, 1, 4), &mut rng), Err(ConfuError::Config(_))));
        // Allowed count but the gap does not fit.
        assert!(matches!(sample_anchors(10, &cfg(2, 2, 1, 7), &mut rng), Err(ConfuError::Config(_))));
        // Sequence shorter than one window.
        assert!(matches!(sample_anchors(4, &cfg(1, 2, 1, 4), &mut rng), Err(ConfuError::Config(_))));
    }

    #[test]
    fn explicit_sets_are_checked() {
        let c = cfg(2, 2, 1, 4);
        assert!(AnchorSet::new(vec![1, 5], 10, &c).is_ok());
        assert!(AnchorSet::new(vec![1, 4], 10, &c).is_err());
        assert!(AnchorSet::new(vec![2, 6], 10, &c).is_err());
    }
}
