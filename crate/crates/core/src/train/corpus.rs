//! Training data: a byte-level tokenizer for text files and a seeded
//! synthetic source with latent topics.

use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ConfuError, Result};

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;
pub const BYTE_VOCAB: usize = 258;

/// Bytes map to ids `0..256`; BOS and EOS follow.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(text.len() + 2);
        ids.push(BYTE_BOS);
        ids.extend(text.bytes().map(u32::from));
        ids.push(BYTE_EOS);
        ids
    }

    /// Drops specials and decodes the remaining bytes as UTF-8.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                0..=255 => bytes.push(id as u8),
                BYTE_BOS | BYTE_EOS => {}
                _ => return Err(ConfuError::Format(format!("id {id} is not a byte token"))),
            }
        }
        String::from_utf8(bytes).map_err(|e| ConfuError::Format(e.to_string()))
    }
}

/// Parameters of the synthetic topic grammar.
///
/// Each topic owns `phrases` fixed phrases over `symbols` plain symbols.
/// Phrase `i` starts with the same symbol in every topic, so the topic only
/// shows in the continuation. Within a topic, phrase `i` is usually followed
/// by phrase `i + 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub topics: usize,
    pub symbols: usize,
    pub phrases: usize,
    pub phrase_len: (usize, usize),
    /// Probability of moving to the next phrase in order; otherwise uniform.
    pub stickiness: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { topics: 2, symbols: 16, phrases: 4, phrase_len: (3, 5), stickiness: 0.8, seed: 0 }
    }
}

impl SyntheticSpec {
    pub fn vocab_size(&self) -> usize {
        self.symbols + 2
    }

    pub fn bos(&self) -> u32 {
        self.symbols as u32
    }

    pub fn eos(&self) -> u32 {
        self.symbols as u32 + 1
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.phrase_len;
        if self.topics == 0 || self.phrases == 0 || self.symbols < 2 || lo < 2 || lo > hi {
            return Err(ConfuError::Config(format!("degenerate synthetic spec {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.stickiness) {
            return Err(ConfuError::Config(format!("stickiness {} outside [0, 1]", self.stickiness)));
        }
        Ok(())
    }

    /// Builds the phrase tables from `seed`.
    pub fn grammar(&self) -> Result<SyntheticGrammar> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let heads: Vec<u32> = (0..self.phrases).map(|_| rng.random_range(0..self.symbols as u32)).collect();
        let tables = (0..self.topics)
            .map(|_| {
                heads
                    .iter()
                    .map(|&h| {
                        let len = rng.random_range(self.phrase_len.0..=self.phrase_len.1);
                        let mut p = vec![h];
                        p.extend((1..len).map(|_| rng.random_range(0..self.symbols as u32)));
                        p
                    })
                    .collect()
            })
            .collect();
        Ok(SyntheticGrammar { spec: self.clone(), tables })
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticGrammar {
    spec: SyntheticSpec,
    /// `tables[topic][phrase]`.
    tables: Vec<Vec<Vec<u32>>>,
}

impl SyntheticGrammar {
    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn phrases(&self, topic: usize) -> &[Vec<u32>] {
        &self.tables[topic]
    }

    /// BOS followed by phrases of `topic` until `len` tokens.
    pub fn sample(&self, topic: usize, len: usize, rng: &mut impl Rng) -> Vec<u32> {
        let table = &self.tables[topic];
        let mut seq = vec![self.spec.bos()];
        let mut phrase = rng.random_range(0..table.len());
        while seq.len() < len {
            seq.extend_from_slice(&table[phrase]);
            phrase = if rng.random_bool(self.spec.stickiness) {
                (phrase + 1) % table.len()
            } else {
                rng.random_range(0..table.len())
            };
        }
        seq.truncate(len);
        seq
    }
}

/// Where training text comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum CorpusSource {
    File(PathBuf),
    Synthetic(SyntheticSpec),
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub sequences: Vec<Vec<u32>>,
    /// Latent topic per sequence for synthetic data.
    pub topics: Option<Vec<usize>>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }
}

/// Tokenizes a source into fixed-length sequences of `seq_len` tokens.
/// Synthetic sources yield `count` sequences; files are cut into as many
/// full windows as they hold, at most `count`.
pub fn ingest_corpus(source: &CorpusSource, seq_len: usize, count: usize) -> Result<Corpus> {
    if seq_len < 2 {
        return Err(ConfuError::Config(format!("sequence length {seq_len} is too short")));
    }
    match source {
        CorpusSource::File(path) => ingest_file(path, seq_len, count),
        CorpusSource::Synthetic(spec) => {
            let grammar = spec.grammar()?;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed);
            let topic_ids: Vec<usize> = (0..spec.topics).collect();
            let mut sequences = Vec::with_capacity(count);
            let mut topics = Vec::with_capacity(count);
            for _ in 0..count {
                let topic = *topic_ids.choose(&mut rng).expect("topics > 0");
                sequences.push(grammar.sample(topic, seq_len, &mut rng));
                topics.push(topic);
            }
            if sequences.is_empty() {
                return Err(ConfuError::Config("synthetic corpus of zero sequences".into()));
            }
            Ok(Corpus { sequences, topics: Some(topics), vocab_size: spec.vocab_size() })
        }
    }
}

fn ingest_file(path: &Path, seq_len: usize, count: usize) -> Result<Corpus> {
    let text = std::fs::read_to_string(path)?;
    if text.is_empty() {
        return Err(ConfuError::Config(format!("{} is empty", path.display())));
    }
    let ids = ByteTokenizer.encode(&text);
    let sequences: Vec<Vec<u32>> = ids.chunks_exact(seq_len).take(count).map(<[u32]>::to_vec).collect();
    if sequences.is_empty() {
        return Err(ConfuError::Config(format!(
            "{} holds {} tokens, fewer than one sequence of {seq_len}",
            path.display(),
            ids.len()
        )));
    }
    Ok(Corpus { sequences, topics: None, vocab_size: BYTE_VOCAB })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ab_encodes_to_bytes_with_specials() {
        assert_eq!(ByteTokenizer.encode("ab"), vec![BYTE_BOS, 97, 98, BYTE_EOS]);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(s in "\\PC*") {
            prop_assert_eq!(ByteTokenizer.decode(&ByteTokenizer.encode(&s)).unwrap(), s);
        }
    }

    /// Some split of `rest` into whole phrases plus a truncated last one.
    fn parses(rest: &[u32], phrases: &[Vec<u32>]) -> bool {
        rest.is_empty()
            || phrases.iter().any(|p| {
                if rest.len() >= p.len() {
                    rest.starts_with(p) && parses(&rest[p.len()..], phrases)
                } else {
                    p.starts_with(rest)
                }
            })
    }

    #[test]
    fn synthetic_sequences_stay_on_one_topic() {
        let spec = SyntheticSpec { seed: 3, ..SyntheticSpec::default() };
        let corpus = ingest_corpus(&CorpusSource::Synthetic(spec.clone()), 40, 20).unwrap();
        let grammar = spec.grammar().unwrap();
        let topics = corpus.topics.as_ref().unwrap();
        for (seq, &topic) in corpus.sequences.iter().zip(topics) {
            assert_eq!(seq.len(), 40);
            assert_eq!(seq[0], spec.bos());
            assert!(parses(&seq[1..], grammar.phrases(topic)), "{seq:?}");
        }
        assert!(topics.contains(&0) && topics.contains(&1));
    }

    #[test]
    fn empty_file_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        let r = ingest_corpus(&CorpusSource::File(path), 8, 4);
        assert!(matches!(r, Err(ConfuError::Config(_))));
    }

    #[test]
    fn file_is_cut_into_full_windows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.txt");
        std::fs::write(&path, "hello world").unwrap();
        let c = ingest_corpus(&CorpusSource::File(path), 4, 100).unwrap();
        // 13 ids → 3 windows of 4.
        assert_eq!(c.sequences.len(), 3);
        assert_eq!(c.sequences[0], vec![BYTE_BOS, 104, 101, 108]);
    }
}
