//! `verify-lossless`: speculative output distribution against plain sampling.

use std::collections::BTreeMap;

use confu_core::engine::{
    autoregressive, autoregressive_distribution, speculative_distribution, total_variation, AcceptRule, DecodeMode,
    KeyedRng, SpecEngine,
};
use confu_core::model::ConfuModel;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::bench::prompt_seed;
use crate::config::{ExperimentConfig, Mode};
use crate::error::{CliError, Result};

/// Exhaustive checks pass below this total variation.
pub const TV_TOLERANCE: f64 = 1e-9;
/// Monte-Carlo checks pass above this p-value.
pub const P_THRESHOLD: f64 = 1e-3;
/// Bins with a smaller expected count are pooled.
const MIN_EXPECTED: f64 = 5.0;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub mode: Mode,
    pub rule: &'static str,
    pub method: &'static str,
    pub temperature: f64,
    pub nodes: usize,
    pub branch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tv: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chi2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub df: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_value: Option<f64>,
    pub pass: bool,
}

pub fn parse_rule(s: &str) -> Result<AcceptRule> {
    match s {
        "lossless" => Ok(AcceptRule::Lossless),
        "greedy-match" => Ok(AcceptRule::GreedyMatch),
        _ => Err(CliError::Config(format!("unknown accept rule {s:?} (lossless or greedy-match)"))),
    }
}

fn rule_name(rule: AcceptRule) -> &'static str {
    match rule {
        AcceptRule::Lossless => "lossless",
        AcceptRule::GreedyMatch => "greedy-match",
    }
}

#[derive(Clone, Debug)]
pub struct VerifyRequest {
    pub mode: Mode,
    pub rule: AcceptRule,
    pub exhaustive: bool,
}

pub fn verify(cfg: &ExperimentConfig, model: &ConfuModel<f64>, req: &VerifyRequest) -> Result<VerifyReport> {
    let v = &cfg.verify;
    let mut dm = DecodeMode::new(req.mode.variant(), v.temperature, v.nodes, v.branch);
    dm.rule = req.rule;
    let engine = SpecEngine::new(model, dm)?;
    let mut report = VerifyReport {
        mode: req.mode,
        rule: rule_name(req.rule),
        method: if req.exhaustive { "exhaustive" } else { "monte-carlo" },
        temperature: v.temperature,
        nodes: v.nodes,
        branch: v.branch,
        tv: None,
        chi2: None,
        df: None,
        p_value: None,
        pass: false,
    };
    if req.exhaustive {
        let vocab = model.cfg.target.vocab_size;
        let ar = autoregressive_distribution(model, &v.prompt, v.length, v.temperature, None)?;
        let sd = speculative_distribution(&engine, vocab, &v.prompt, v.length)?;
        let tv = total_variation(&ar, &sd);
        report.tv = Some(tv);
        report.pass = tv < TV_TOLERANCE;
    } else {
        if v.trials == 0 {
            return Err(CliError::Config("Monte-Carlo verification needs trials >= 1".into()));
        }
        let mut spec = BTreeMap::new();
        let mut plain = BTreeMap::new();
        for i in 0..v.trials {
            let g = engine.generate(&v.prompt, v.length, &mut KeyedRng::new(prompt_seed(v.seed, i)))?;
            *spec.entry(g.tokens).or_insert(0u64) += 1;
            let mut rng = KeyedRng::new(prompt_seed(v.seed, v.trials + i));
            let a = autoregressive(model, &v.prompt, v.length, v.temperature, None, &mut rng)?;
            *plain.entry(a).or_insert(0u64) += 1;
        }
        let (chi2, df, p) = chi_squared_homogeneity(&spec, &plain);
        report.chi2 = Some(chi2);
        report.df = Some(df);
        report.p_value = Some(p);
        report.pass = p > P_THRESHOLD;
    }
    Ok(report)
}

/// Two-sample χ² test of homogeneity over sequence counts. Categories whose
/// expected count is below five in either sample are pooled into one bin.
/// Returns the statistic, degrees of freedom and p-value.
pub fn chi_squared_homogeneity<K: Ord + Clone>(a: &BTreeMap<K, u64>, b: &BTreeMap<K, u64>) -> (f64, usize, f64) {
    let na: u64 = a.values().sum();
    let nb: u64 = b.values().sum();
    let n = (na + nb) as f64;
    let mut keys: Vec<&K> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut pooled = (0.0, 0.0);
    for k in keys {
        let (x, y) = (*a.get(k).unwrap_or(&0) as f64, *b.get(k).unwrap_or(&0) as f64);
        let total = x + y;
        if total * na.min(nb) as f64 / n < MIN_EXPECTED {
            pooled.0 += x;
            pooled.1 += y;
        } else {
            bins.push((x, y));
        }
    }
    if pooled.0 + pooled.1 > 0.0 {
        bins.push(pooled);
    }
    if bins.len() < 2 {
        return (0.0, 0, 1.0);
    }
    let stat: f64 = bins
        .iter()
        .map(|&(x, y)| {
            let total = x + y;
            let ea = total * na as f64 / n;
            let eb = total * nb as f64 / n;
            (x - ea).powi(2) / ea + (y - eb).powi(2) / eb
        })
        .sum();
    let df = bins.len() - 1;
    let p = ChiSquared::new(df as f64).map(|d| d.sf(stat)).unwrap_or(0.0);
    (stat, df, p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_p_one() {
        let a: BTreeMap<u32, u64> = [(0, 50), (1, 30), (2, 20)].into();
        let (stat, df, p) = chi_squared_homogeneity(&a, &a);
        assert_eq!((stat, df), (0.0, 2));
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn statistic_matches_hand_computation() {
        // 2x2 table [[30, 10], [20, 20]]: row totals 40/40, column 50/30.
        let a: BTreeMap<u32, u64> = [(0, 30), (1, 10)].into();
        let b: BTreeMap<u32, u64> = [(0, 20), (1, 20)].into();
        let (stat, df, p) = chi_squared_homogeneity(&a, &b);
        let want = 2.0 * (5.0f64.powi(2) / 25.0) + 2.0 * (5.0f64.powi(2) / 15.0);
        assert!((stat - want).abs() < 1e-12);
        assert_eq!(df, 1);
        // One degree of freedom: sf(x) = erfc(sqrt(x / 2)).
        let erfc = statrs::function::erf::erfc((want / 2.0).sqrt());
        assert!((p - erfc).abs() < 1e-12);
    }

    #[test]
    fn rare_categories_are_pooled() {
        let a: BTreeMap<u32, u64> = [(0, 100), (1, 1), (2, 2)].into();
        let b: BTreeMap<u32, u64> = [(0, 100), (3, 2)].into();
        let (_, df, _) = chi_squared_homogeneity(&a, &b);
        assert_eq!(df, 1);
    }

    #[test]
    fn rules_parse() {
        assert_eq!(parse_rule("lossless").unwrap(), AcceptRule::Lossless);
        assert_eq!(parse_rule("greedy-match").unwrap(), AcceptRule::GreedyMatch);
        assert!(parse_rule("typical").is_err());
    }
}
