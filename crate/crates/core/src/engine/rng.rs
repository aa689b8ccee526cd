//! Keyed randomness. Every draw is addressed by a [`DrawKey`], so two decoding
//! runs that make the same decision at the same place see the same number no
//! matter what else they drew before.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfuError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Purpose {
    /// First token sampled after prefill.
    Prefill = 1,
    /// Sampling a draft token.
    Draft = 2,
    /// Accept/reject test of a draft node.
    Accept = 3,
    /// Correction token after rejection.
    Residual = 4,
    /// Bonus token after a fully accepted path.
    Bonus = 5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DrawKey {
    pub round: u64,
    /// `0` is the pending root; node `i` of a tree is `i + 1`.
    pub node: u64,
    pub purpose: Purpose,
}

impl DrawKey {
    pub fn new(round: u64, node: u64, purpose: Purpose) -> Self {
        Self { round, node, purpose }
    }
}

pub trait Randomness {
    fn bernoulli(&mut self, key: DrawKey, p: f64) -> Result<bool>;
    fn categorical(&mut self, key: DrawKey, probs: &[f64]) -> Result<usize>;
}

fn check_probs(probs: &[f64]) -> Result<f64> {
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !p.is_finite() || *p < 0.0) || total <= 0.0 {
        return Err(ConfuError::Numeric(format!("invalid categorical weights (sum {total})")));
    }
    Ok(total)
}

/// Counter-based stream: one ChaCha8 generator per (seed, key).
#[derive(Clone, Debug)]
pub struct KeyedRng {
    seed: u64,
}

impl KeyedRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform draw in `[0, 1)` for `key`.
    pub fn uniform(&self, key: DrawKey) -> f64 {
        let mut bytes = [0u8; 32];
        bytes[..8].copy_from_slice(&self.seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&key.round.to_le_bytes());
        bytes[16..24].copy_from_slice(&key.node.to_le_bytes());
        bytes[24] = key.purpose as u8;
        ChaCha8Rng::from_seed(bytes).random::<f64>()
    }
}

impl Randomness for KeyedRng {
    fn bernoulli(&mut self, key: DrawKey, p: f64) -> Result<bool> {
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfuError::Numeric(format!("bernoulli probability {p}")));
        }
        Ok(self.uniform(key) < p)
    }

    fn categorical(&mut self, key: DrawKey, probs: &[f64]) -> Result<usize> {
        let total = check_probs(probs)?;
        let u = self.uniform(key) * total;
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                acc += p;
                last = i;
                if u < acc {
                    return Ok(i);
                }
            }
        }
        Ok(last)
    }
}

/// Replays a fixed script of choices and records new choice points, so a
/// driver can walk every randomness outcome exactly once.
#[derive(Clone, Debug, Default)]
pub struct ScriptedRandomness {
    script: Vec<usize>,
    taken: Vec<usize>,
    /// Alternative choice indices at each newly discovered choice point.
    discovered: Vec<(usize, Vec<usize>)>,
    prob: f64,
}

impl ScriptedRandomness {
    fn new(script: Vec<usize>) -> Self {
        Self { script, taken: Vec::new(), discovered: Vec::new(), prob: 1.0 }
    }

    /// `outcomes` lists (choice value, probability) with nonzero mass.
    fn choose(&mut self, outcomes: &[(usize, f64)]) -> Result<usize> {
        let depth = self.taken.len();
        let pick = if depth < self.script.len() {
            self.script[depth]
        } else {
            let alts = outcomes[1..].iter().map(|o| o.0).collect();
            self.discovered.push((depth, alts));
            outcomes[0].0
        };
        let p = outcomes
            .iter()
            .find(|o| o.0 == pick)
            .map(|o| o.1)
            .ok_or_else(|| ConfuError::State("scripted choice no longer available".into()))?;
        self.prob *= p;
        self.taken.push(pick);
        Ok(pick)
    }
}

impl Randomness for ScriptedRandomness {
    fn bernoulli(&mut self, _key: DrawKey, p: f64) -> Result<bool> {
        let mut outcomes = Vec::with_capacity(2);
        if p > 0.0 {
            outcomes.push((1, p.min(1.0)));
        }
        if p < 1.0 {
            outcomes.push((0, 1.0 - p.max(0.0)));
        }
        Ok(self.choose(&outcomes)? == 1)
    }

    fn categorical(&mut self, _key: DrawKey, probs: &[f64]) -> Result<usize> {
        let total = check_probs(probs)?;
        let outcomes: Vec<(usize, f64)> =
            probs.iter().enumerate().filter(|(_, &p)| p > 0.0).map(|(i, &p)| (i, p / total)).collect();
        self.choose(&outcomes)
    }
}

/// Runs `f` once per distinct randomness outcome and returns each result
/// with its exact probability.
pub fn enumerate_outcomes<R>(mut f: impl FnMut(&mut dyn Randomness) -> Result<R>) -> Result<Vec<(f64, R)>> {
    let mut out = Vec::new();
    let mut stack = vec![Vec::new()];
    while let Some(script) = stack.pop() {
        let mut rng = ScriptedRandomness::new(script);
        let r = f(&mut rng)?;
        for (depth, alts) in rng.discovered.iter().rev() {
            for &a in alts.iter().rev() {
                let mut s = rng.taken[..*depth].to_vec();
                s.push(a);
                stack.push(s);
            }
        }
        out.push((rng.prob, r));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_draws_are_reproducible_and_key_dependent() {
        let r = KeyedRng::new(3);
        let k = DrawKey::new(1, 2, Purpose::Accept);
        assert_eq!(r.uniform(k), KeyedRng::new(3).uniform(k));
        assert_ne!(r.uniform(k), r.uniform(DrawKey::new(1, 2, Purpose::Bonus)));
        assert_ne!(r.uniform(k), KeyedRng::new(4).uniform(k));
    }

    #[test]
    fn categorical_never_returns_zero_mass() {
        let mut r = KeyedRng::new(0);
        for n in 0..200 {
            let i = r.categorical(DrawKey::new(n, 0, Purpose::Residual), &[0.0, 0.3, 0.0, 0.7]).unwrap();
            assert!(i == 1 || i == 3);
        }
        assert!(r.categorical(DrawKey::new(0, 0, Purpose::Bonus), &[0.0, 0.0]).is_err());
    }

    #[test]
    fn enumeration_covers_all_outcomes_with_exact_mass() {
        let out = enumerate_outcomes(|rng| {
            let a = rng.bernoulli(DrawKey::new(0, 0, Purpose::Accept), 0.25)?;
            let b = if a { 9 } else { rng.categorical(DrawKey::new(0, 1, Purpose::Residual), &[0.5, 0.0, 1.5])? };
            Ok(b)
        })
        .unwrap();
        let mut got: Vec<(usize, f64)> = out.into_iter().map(|(p, r)| (r, p)).collect();
        got.sort_by_key(|x| x.0);
        assert_eq!(got.len(), 3);
        assert_eq!(got[0], (0, 0.75 * 0.25));
        assert_eq!(got[1], (2, 0.75 * 0.75));
        assert_eq!(got[2], (9, 0.25));
    }
}
