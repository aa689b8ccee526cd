//! Experiment configuration: flat `key = value` lines grouped in sections.
//!
//! ```ini
//! [corpus]
//! source = synthetic        ; or file:PATH
//! [target]
//! d_model = 32
//! ```
//!
//! Every key is optional and falls back to [`ExperimentConfig::default`].
//! Unknown sections or keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use confu_core::engine::Variant;
use confu_core::model::{FutureConfig, ModelConfig};
use confu_core::target::TargetConfig;
use confu_core::train::{ingest_corpus, Corpus, CorpusSource, Stage, SyntheticSpec, TrainConfig};
use ini::{EscapePolicy, Ini, Properties};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that replaces every run seed.
pub const SEED_ENV: &str = "CONFU_SEED";

/// Draft variants compared by the benchmark.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Baseline,
    Confu,
    /// One fixed `[con]` and `[f]` embedding instead of the MoE embedders.
    ConfuNoMoe,
    /// As above, trained without future replication (`l = 0`).
    ConfuNoMoeNoRepl,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::Confu, Mode::ConfuNoMoe, Mode::ConfuNoMoeNoRepl];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Confu => "confu",
            Mode::ConfuNoMoe => "confu-no-moe",
            Mode::ConfuNoMoeNoRepl => "confu-no-moe-no-repl",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Mode::Baseline => Variant::Baseline,
            _ => Variant::Confu,
        }
    }

    pub fn stage(self) -> Stage {
        match self {
            Mode::Baseline => Stage::DraftBaseline,
            _ => Stage::Confu,
        }
    }

    /// A single expert with `K_expert = 1` is a plain learned embedding.
    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        if matches!(self, Mode::ConfuNoMoe | Mode::ConfuNoMoeNoRepl) {
            cfg.future = FutureConfig { n_expert: 1, k_expert: 1, ..cfg.future };
        }
        cfg
    }

    pub fn train_config(self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if self == Mode::ConfuNoMoeNoRepl {
            cfg.window = 0;
        }
        cfg
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CliError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub source: CorpusSource,
    pub seq_len: usize,
    /// Training sequences.
    pub sequences: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub chain_depth: usize,
    pub tree_budget: usize,
    pub branch: usize,
    pub soft_prompts: usize,
    pub n_expert: usize,
    pub k_expert: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchSpec {
    pub modes: Vec<Mode>,
    pub temperatures: Vec<f64>,
    pub nodes: Vec<usize>,
    pub branch: usize,
    /// Held-out prompts taken after the training sequences.
    pub prompts: usize,
    pub prompt_len: usize,
    pub max_tokens: usize,
    pub seed: u64,
    pub checkpoints: BTreeMap<Mode, PathBuf>,
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modes.is_empty() {
            return Err(CliError::Config("bench needs at least one mode".into()));
        }
        if self.nodes.contains(&0) {
            return Err(CliError::Config("node budgets must be at least 1".into()));
        }
        if self.temperatures.is_empty() || self.nodes.is_empty() {
            return Err(CliError::Config("bench needs temperatures and node budgets".into()));
        }
        if self.temperatures.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(CliError::Config(format!("temperatures {:?} must be >= 0", self.temperatures)));
        }
        if self.prompts == 0 || self.prompt_len == 0 || self.max_tokens == 0 || self.branch == 0 {
            return Err(CliError::Config("prompts, prompt_len, max_tokens and branch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifySpec {
    pub prompt: Vec<u32>,
    pub length: usize,
    pub temperature: f64,
    pub nodes: usize,
    pub branch: usize,
    /// Monte-Carlo trials per sampler.
    pub trials: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelSection,
    pub train_target: TrainConfig,
    pub train_draft: TrainConfig,
    pub train_confu: TrainConfig,
    pub bench: BenchSpec,
    pub verify: VerifySpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            corpus: CorpusConfig { source: CorpusSource::Synthetic(SyntheticSpec::default()), seq_len: 96, sequences: 64 },
            model: ModelSection {
                n_layers: 4,
                d_model: 32,
                n_heads: 4,
                max_seq_len: 128,
                chain_depth: 4,
                tree_budget: 30,
                branch: 4,
                soft_prompts: 16,
                n_expert: 8,
                k_expert: 2,
            },
            train_target: TrainConfig { steps: 2000, batch: 8, ..train.clone() },
            train_draft: TrainConfig { steps: 1000, batch: 8, ..train.clone() },
            train_confu: TrainConfig { steps: 1000, batch: 8, ..train },
            bench: BenchSpec {
                modes: vec![Mode::Baseline, Mode::Confu],
                temperatures: vec![0.0],
                nodes: vec![30],
                branch: 4,
                prompts: 16,
                prompt_len: 8,
                max_tokens: 64,
                seed: 0,
                checkpoints: BTreeMap::new(),
            },
            verify: VerifySpec { prompt: vec![1], length: 4, temperature: 1.0, nodes: 4, branch: 2, trials: 2000, seed: 0 },
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str_noescape(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::Config(format!("key {k:?} outside a section")));
                }
                continue;
            };
            let mut r = Reader { section, props, used: Vec::new() };
            match section {
                "corpus" => cfg.corpus = r.corpus(&cfg.corpus)?,
                "model" => cfg.model = r.model(&cfg.model)?,
                "train-target" => cfg.train_target = r.train(&cfg.train_target)?,
                "train-draft" => cfg.train_draft = r.train(&cfg.train_draft)?,
                "train-confu" => cfg.train_confu = r.train(&cfg.train_confu)?,
                "bench" => cfg.bench = r.bench(&cfg.bench)?,
                "checkpoints" => {
                    for (k, v) in props.iter() {
                        cfg.bench.checkpoints.insert(k.parse()?, PathBuf::from(v));
                        r.used.push(k.to_string());
                    }
                }
                "verify" => cfg.verify = r.verify(&cfg.verify)?,
                other => return Err(CliError::Config(format!("unknown section [{other}]"))),
            }
            r.finish()?;
        }
        Ok(cfg)
    }

    pub fn render(&self) -> String {
        let mut ini = Ini::new();
        let c = &self.corpus;
        {
            let mut s = ini.with_section(Some("corpus"));
            match &c.source {
                CorpusSource::File(p) => {
                    s.set("source", format!("file:{}", p.display()));
                }
                CorpusSource::Synthetic(sp) => {
                    s.set("source", "synthetic")
                        .set("topics", sp.topics.to_string())
                        .set("symbols", sp.symbols.to_string())
                        .set("phrases", sp.phrases.to_string())
                        .set("phrase_len_min", sp.phrase_len.0.to_string())
                        .set("phrase_len_max", sp.phrase_len.1.to_string())
                        .set("stickiness", sp.stickiness.to_string())
                        .set("seed", sp.seed.to_string());
                }
            }
            s.set("seq_len", c.seq_len.to_string()).set("sequences", c.sequences.to_string());
        }
        let m = &self.model;
        ini.with_section(Some("model"))
            .set("n_layers", m.n_layers.to_string())
            .set("d_model", m.d_model.to_string())
            .set("n_heads", m.n_heads.to_string())
            .set("max_seq_len", m.max_seq_len.to_string())
            .set("chain_depth", m.chain_depth.to_string())
            .set("tree_budget", m.tree_budget.to_string())
            .set("branch", m.branch.to_string())
            .set("soft_prompts", m.soft_prompts.to_string())
            .set("n_expert", m.n_expert.to_string())
            .set("k_expert", m.k_expert.to_string());
        for (name, t) in [("train-target", &self.train_target), ("train-draft", &self.train_draft), ("train-confu", &self.train_confu)] {
            ini.with_section(Some(name))
                .set("steps", t.steps.to_string())
                .set("lr", t.lr.to_string())
                .set("batch", t.batch.to_string())
                .set("unroll", t.unroll.to_string())
                .set("anchors", t.anchors.to_string())
                .set("window", t.window.to_string())
                .set("min_gap", t.min_gap.to_string())
                .set("seed", t.seed.to_string());
        }
        let b = &self.bench;
        ini.with_section(Some("bench"))
            .set("modes", join(b.modes.iter()))
            .set("temperatures", join(b.temperatures.iter()))
            .set("nodes", join(b.nodes.iter()))
            .set("branch", b.branch.to_string())
            .set("prompts", b.prompts.to_string())
            .set("prompt_len", b.prompt_len.to_string())
            .set("max_tokens", b.max_tokens.to_string())
            .set("seed", b.seed.to_string());
        if !b.checkpoints.is_empty() {
            let mut s = ini.with_section(Some("checkpoints"));
            for (mode, path) in &b.checkpoints {
                s.set(mode.name(), path.display().to_string());
            }
        }
        let v = &self.verify;
        ini.with_section(Some("verify"))
            .set("prompt", join(v.prompt.iter()))
            .set("length", v.length.to_string())
            .set("temperature", v.temperature.to_string())
            .set("nodes", v.nodes.to_string())
            .set("branch", v.branch.to_string())
            .set("trials", v.trials.to_string())
            .set("seed", v.seed.to_string());
        let mut out = Vec::new();
        ini.write_to_policy(&mut out, EscapePolicy::Nothing).expect("writing to a Vec");
        String::from_utf8(out).expect("config text is UTF-8")
    }

    /// Replaces every run seed (training stages, bench, verify). The corpus
    /// seed is part of the data and stays.
    pub fn override_seed(&mut self, seed: u64) {
        for t in [&mut self.train_target, &mut self.train_draft, &mut self.train_confu] {
            t.seed = seed;
        }
        self.bench.seed = seed;
        self.verify.seed = seed;
    }

    /// `--seed` wins over `CONFU_SEED`, which wins over the file.
    pub fn apply_seed_overrides(&mut self, flag: Option<u64>) -> Result<()> {
        let env = match std::env::var(SEED_ENV) {
            Ok(v) => Some(v.trim().parse::<u64>().map_err(|e| CliError::Config(format!("{SEED_ENV}={v:?}: {e}")))?),
            Err(_) => None,
        };
        if let Some(seed) = flag.or(env) {
            self.override_seed(seed);
        }
        Ok(())
    }

    /// Training sequences followed by `extra` held-out sequences.
    pub fn corpus_with(&self, extra: usize) -> Result<Corpus> {
        let c = &self.corpus;
        let corpus = ingest_corpus(&c.source, c.seq_len, c.sequences + extra)?;
        if corpus.len() < c.sequences + extra {
            return Err(CliError::Config(format!(
                "corpus holds {} sequences of {}, need {}",
                corpus.len(),
                c.seq_len,
                c.sequences + extra
            )));
        }
        Ok(corpus)
    }

    pub fn vocab_size(&self) -> usize {
        match &self.corpus.source {
            CorpusSource::Synthetic(s) => s.vocab_size(),
            CorpusSource::File(_) => confu_core::train::corpus::BYTE_VOCAB,
        }
    }

    /// End-of-sequence token of the corpus.
    pub fn eos(&self) -> u32 {
        match &self.corpus.source {
            CorpusSource::Synthetic(s) => s.eos(),
            CorpusSource::File(_) => confu_core::train::corpus::BYTE_EOS,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig::new(
            TargetConfig::new(m.n_layers, m.d_model, m.n_heads, self.vocab_size(), m.max_seq_len),
            m.chain_depth,
            m.tree_budget,
            m.branch,
            FutureConfig { soft_prompts: m.soft_prompts, n_expert: m.n_expert, k_expert: m.k_expert },
        )
    }
}

fn join<T: ToString>(items: impl Iterator<Item = T>) -> String {
    items.map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Typed access to one section that remembers which keys were read.
struct Reader<'a> {
    section: &'a str,
    props: &'a Properties,
    used: Vec<String>,
}

impl Reader<'_> {
    fn raw(&mut self, key: &str) -> Option<&str> {
        let v = self.props.get(key)?;
        self.used.push(key.to_string());
        Some(v.trim())
    }

    fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        let section = self.section.to_string();
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| CliError::Config(format!("[{section}] {key} = {v:?}: {e}"))),
        }
    }

    fn list<T: FromStr>(&mut self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
        T::Err: fmt::Display,
    {
        let section = self.section.to_string();
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse().map_err(|e| CliError::Config(format!("[{section}] {key}: {s:?}: {e}"))))
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        for (k, _) in self.props.iter() {
            if !self.used.iter().any(|u| u == k) {
                return Err(CliError::Config(format!("unknown key {k:?} in [{}]", self.section)));
            }
        }
        Ok(())
    }

    fn corpus(&mut self, d: &CorpusConfig) -> Result<CorpusConfig> {
        let default_spec = match &d.source {
            CorpusSource::Synthetic(s) => s.clone(),
            CorpusSource::File(_) => SyntheticSpec::default(),
        };
        let source = match self.raw("source").map(str::to_string) {
            Some(s) if s.starts_with("file:") => CorpusSource::File(PathBuf::from(&s["file:".len()..])),
            Some(s) if s != "synthetic" => {
                return Err(CliError::Config(format!("corpus source {s:?} is neither synthetic nor file:PATH")));
            }
            None if matches!(d.source, CorpusSource::File(_)) => d.source.clone(),
            _ => CorpusSource::Synthetic(SyntheticSpec {
                topics: self.get("topics", default_spec.topics)?,
                symbols: self.get("symbols", default_spec.symbols)?,
                phrases: self.get("phrases", default_spec.phrases)?,
                phrase_len: (
                    self.get("phrase_len_min", default_spec.phrase_len.0)?,
                    self.get("phrase_len_max", default_spec.phrase_len.1)?,
                ),
                stickiness: self.get("stickiness", default_spec.stickiness)?,
                seed: self.get("seed", default_spec.seed)?,
            }),
        };
        Ok(CorpusConfig { source, seq_len: self.get("seq_len", d.seq_len)?, sequences: self.get("sequences", d.sequences)? })
    }

    fn model(&mut self, d: &ModelSection) -> Result<ModelSection> {
        Ok(ModelSection {
            n_layers: self.get("n_layers", d.n_layers)?,
            d_model: self.get("d_model", d.d_model)?,
            n_heads: self.get("n_heads", d.n_heads)?,
            max_seq_len: self.get("max_seq_len", d.max_seq_len)?,
            chain_depth: self.get("chain_depth", d.chain_depth)?,
            tree_budget: self.get("tree_budget", d.tree_budget)?,
            branch: self.get("branch", d.branch)?,
            soft_prompts: self.get("soft_prompts", d.soft_prompts)?,
            n_expert: self.get("n_expert", d.n_expert)?,
            k_expert: self.get("k_expert", d.k_expert)?,
        })
    }

    fn train(&mut self, d: &TrainConfig) -> Result<TrainConfig> {
        Ok(TrainConfig {
            steps: self.get("steps", d.steps)?,
            lr: self.get("lr", d.lr)?,
            batch: self.get("batch", d.batch)?,
            unroll: self.get("unroll", d.unroll)?,
            anchors: self.get("anchors", d.anchors)?,
            window: self.get("window", d.window)?,
            min_gap: self.get("min_gap", d.min_gap)?,
            seed: self.get("seed", d.seed)?,
        })
    }

    fn bench(&mut self, d: &BenchSpec) -> Result<BenchSpec> {
        Ok(BenchSpec {
            modes: self.list("modes", &d.modes)?,
            temperatures: self.list("temperatures", &d.temperatures)?,
            nodes: self.list("nodes", &d.nodes)?,
            branch: self.get("branch", d.branch)?,
            prompts: self.get("prompts", d.prompts)?,
            prompt_len: self.get("prompt_len", d.prompt_len)?,
            max_tokens: self.get("max_tokens", d.max_tokens)?,
            seed: self.get("seed", d.seed)?,
            checkpoints: d.checkpoints.clone(),
        })
    }

    fn verify(&mut self, d: &VerifySpec) -> Result<VerifySpec> {
        Ok(VerifySpec {
            prompt: self.list("prompt", &d.prompt)?,
            length: self.get("length", d.length)?,
            temperature: self.get("temperature", d.temperature)?,
            nodes: self.get("nodes", d.nodes)?,
            branch: self.get("branch", d.branch)?,
            trials: self.get("trials", d.trials)?,
            seed: self.get("seed", d.seed)?,
        })
    }
}
