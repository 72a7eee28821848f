//! Synthetic corpus with graded similarity pairs. Sentences are sampled
//! from latent topic mixtures; tokens come from topic-conditioned
//! distributions over a partitioned vocabulary, so surface statistics carry
//! the latent structure. Pair gold scores are scaled latent cosines with
//! bounded noise on a graded 0-5 similarity scale.

use std::collections::HashSet;
use std::io::{BufRead, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LeapError, Result};
use crate::metrics::spearman;
use crate::tensor::kernels;

/// Fraction of a topic's token draws that stay inside its own vocabulary
/// block; the rest spread uniformly over the whole vocabulary.
const TOPIC_CONCENTRATION: f64 = 0.9;
/// Additive per-coordinate jitter on latent mixtures, keeping pair cosines
/// distinct without disturbing the topic structure.
const LATENT_JITTER: f64 = 0.08;
/// Half-width of the uniform noise on the 0-5 gold scale.
const GOLD_NOISE: f64 = 0.25;
/// Minimum tokens per topic block for the conditional distributions to be
/// meaningfully distinct.
const MIN_TOKENS_PER_TOPIC: usize = 4;

/// Construction floor: gold scores must track latent cosines at least this
/// strongly on the generated set.
pub const CONSTRUCTION_SPEARMAN_MIN: f64 = 0.95;
/// Learnability floor: a bag-of-words probe must reach this rank
/// correlation on held-out pairs for the corpus to be usable.
pub const PROBE_SPEARMAN_MIN: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_sentences: usize,
    pub n_pairs: usize,
    pub vocab_size: usize,
    pub topics: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl CorpusConfig {
    /// Desk-scale defaults sized for the experiment harness.
    pub fn default_desk(seed: u64) -> Self {
        CorpusConfig {
            seed,
            n_sentences: 4000,
            n_pairs: 2000,
            vocab_size: 256,
            topics: 8,
            min_len: 8,
            max_len: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.topics < 2 {
            return Err(LeapError::config(format!(
                "need at least 2 topics, got {}",
                self.topics
            )));
        }
        if self.vocab_size < self.topics * MIN_TOKENS_PER_TOPIC {
            return Err(LeapError::config(format!(
                "vocabulary of {} is too small for {} topics (need at least {} tokens per topic)",
                self.vocab_size,
                self.topics,
                MIN_TOKENS_PER_TOPIC
            )));
        }
        if self.n_sentences < 2 {
            return Err(LeapError::config("need at least 2 sentences".to_string()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(LeapError::config(format!(
                "invalid length range {}..={}",
                self.min_len, self.max_len
            )));
        }
        let max_pairs = self.n_sentences * (self.n_sentences - 1) / 2;
        if self.n_pairs == 0 || self.n_pairs > max_pairs {
            return Err(LeapError::config(format!(
                "n_pairs {} outside 1..={max_pairs} for {} sentences",
                self.n_pairs, self.n_sentences
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sentence {
    pub text_id: String,
    pub tokens: Vec<u32>,
    /// Topic mixture weights the sentence was sampled from.
    pub latent: Vec<f64>,
}

/// A graded similarity pair over sentence indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredPair {
    pub a: usize,
    pub b: usize,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub vocab_size: usize,
    pub sentences: Vec<Sentence>,
    pub pairs: Vec<ScoredPair>,
}

/// Pair subsets for training, validation, and testing. Pairs are atomic:
/// each lands in exactly one split.
#[derive(Debug, Clone)]
pub struct CorpusSplit {
    pub train: Vec<ScoredPair>,
    pub val: Vec<ScoredPair>,
    pub test: Vec<ScoredPair>,
}

/// Construction and learnability statistics of a generated corpus.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusAudit {
    /// Spearman of gold scores against latent cosines over all pairs.
    pub construction_spearman: f64,
    /// Spearman of bag-of-words cosines against gold on held-out pairs.
    pub probe_spearman: f64,
    pub holdout_pairs: usize,
}

impl CorpusAudit {
    /// Reject generator parameters that produced an unusable corpus.
    pub fn check(&self) -> Result<()> {
        if self.construction_spearman < CONSTRUCTION_SPEARMAN_MIN {
            return Err(LeapError::config(format!(
                "construction correlation {:.4} below {CONSTRUCTION_SPEARMAN_MIN}",
                self.construction_spearman
            )));
        }
        if self.probe_spearman < PROBE_SPEARMAN_MIN {
            return Err(LeapError::config(format!(
                "bag-of-words probe correlation {:.4} below {PROBE_SPEARMAN_MIN}",
                self.probe_spearman
            )));
        }
        Ok(())
    }
}

/// Scaled latent cosine with bounded uniform noise, clipped to the 0-5
/// scale.
pub fn gold_score(latent_a: &[f64], latent_b: &[f64], rng: &mut impl Rng) -> Result<f64> {
    let cos = kernels::cosine(latent_a, latent_b)
        .ok_or_else(|| LeapError::degenerate("zero-norm latent vector"))?;
    let noisy = 5.0 * cos + rng.gen_range(-GOLD_NOISE..=GOLD_NOISE);
    Ok(noisy.clamp(0.0, 5.0))
}

fn sample_latent(topics: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut w = vec![0.0; topics];
    let primary = rng.gen_range(0..topics);
    if rng.gen_bool(0.5) {
        w[primary] = 1.0;
    } else {
        let mut secondary = rng.gen_range(0..topics - 1);
        if secondary >= primary {
            secondary += 1;
        }
        let alpha = rng.gen_range(0.55..0.9);
        w[primary] = alpha;
        w[secondary] = 1.0 - alpha;
    }
    for v in w.iter_mut() {
        *v += rng.gen_range(0.0..LATENT_JITTER);
    }
    w
}

fn sample_tokens(
    latent: &[f64],
    vocab_size: usize,
    len: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<u32> {
    let topics = latent.len();
    let block = vocab_size / topics;
    let total: f64 = latent.iter().sum();
    let mut tokens = Vec::with_capacity(len);
    for _ in 0..len {
        let mut pick = rng.gen_range(0.0..total);
        let mut topic = topics - 1;
        for (t, &w) in latent.iter().enumerate() {
            if pick < w {
                topic = t;
                break;
            }
            pick -= w;
        }
        let token = if rng.gen_bool(TOPIC_CONCENTRATION) {
            let start = topic * block;
            rng.gen_range(start..start + block) as u32
        } else {
            rng.gen_range(0..vocab_size) as u32
        };
        tokens.push(token);
    }
    tokens
}

/// Generate a corpus: topic-mixture sentences plus graded pairs. Identical
/// configurations produce identical corpora.
pub fn generate(config: &CorpusConfig) -> Result<SyntheticCorpus> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let width = config.n_sentences.to_string().len().max(5);
    let sentences: Vec<Sentence> = (0..config.n_sentences)
        .map(|i| {
            let latent = sample_latent(config.topics, &mut rng);
            let len = rng.gen_range(config.min_len..=config.max_len);
            let tokens = sample_tokens(&latent, config.vocab_size, len, &mut rng);
            Sentence { text_id: format!("s{i:0width$}"), tokens, latent }
        })
        .collect();

    let primary_of = |s: &Sentence| -> usize {
        s.latent
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(t, _)| t)
            .unwrap_or(0)
    };
    let mut by_topic: Vec<Vec<usize>> = vec![Vec::new(); config.topics];
    for (i, s) in sentences.iter().enumerate() {
        by_topic[primary_of(s)].push(i);
    }

    let mut seen: HashSet<(usize, usize)> = HashSet::new();
    let mut pairs = Vec::with_capacity(config.n_pairs);
    let mut attempts = 0usize;
    let attempt_cap = config.n_pairs * 200;
    while pairs.len() < config.n_pairs {
        attempts += 1;
        if attempts > attempt_cap {
            return Err(LeapError::config(format!(
                "could not draw {} distinct pairs from {} sentences",
                config.n_pairs, config.n_sentences
            )));
        }
        // A share of same-topic pairs keeps the upper end of the score
        // scale populated.
        let (a, b) = if rng.gen_bool(0.35) {
            let t = rng.gen_range(0..config.topics);
            let bucket = &by_topic[t];
            if bucket.len() < 2 {
                continue;
            }
            let a = bucket[rng.gen_range(0..bucket.len())];
            let b = bucket[rng.gen_range(0..bucket.len())];
            (a, b)
        } else {
            (
                rng.gen_range(0..config.n_sentences),
                rng.gen_range(0..config.n_sentences),
            )
        };
        if a == b {
            continue;
        }
        let key = (a.min(b), a.max(b));
        if !seen.insert(key) {
            continue;
        }
        let gold = gold_score(&sentences[a].latent, &sentences[b].latent, &mut rng)?;
        pairs.push(ScoredPair { a, b, gold });
    }

    Ok(SyntheticCorpus { vocab_size: config.vocab_size, sentences, pairs })
}

/// Partition `n` items into three counts: floors of the fractions, with the
/// remainder given to the earliest splits.
fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (f0, f1, f2) = fractions;
    for f in [f0, f1, f2] {
        if !(0.0..=1.0).contains(&f) {
            return Err(LeapError::config(format!("split fraction {f} outside [0, 1]")));
        }
    }
    if ((f0 + f1 + f2) - 1.0).abs() > 1e-9 {
        return Err(LeapError::config(format!(
            "split fractions sum to {}, expected 1",
            f0 + f1 + f2
        )));
    }
    let mut sizes = [
        (f0 * n as f64).floor() as usize,
        (f1 * n as f64).floor() as usize,
        (f2 * n as f64).floor() as usize,
    ];
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut i = 0;
    while rest > 0 {
        sizes[i % 3] += 1;
        rest -= 1;
        i += 1;
    }
    Ok((sizes[0], sizes[1], sizes[2]))
}

/// Shuffle the pairs deterministically and cut them into train, validation,
/// and test subsets.
pub fn split(
    corpus: &SyntheticCorpus,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<CorpusSplit> {
    let (n_train, n_val, _) = split_sizes(corpus.pairs.len(), fractions)?;
    let mut order: Vec<usize> = (0..corpus.pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let pick = |range: &[usize]| -> Vec<ScoredPair> {
        range.iter().map(|&i| corpus.pairs[i]).collect()
    };
    Ok(CorpusSplit {
        train: pick(&order[..n_train]),
        val: pick(&order[n_train..n_train + n_val]),
        test: pick(&order[n_train + n_val..]),
    })
}

impl SyntheticCorpus {
    /// Spearman of gold scores against the latent cosines they were built
    /// from.
    pub fn construction_spearman(&self) -> Result<f64> {
        let cosines: Vec<f64> = self
            .pairs
            .iter()
            .map(|p| {
                kernels::cosine(&self.sentences[p.a].latent, &self.sentences[p.b].latent)
                    .ok_or_else(|| LeapError::degenerate("zero-norm latent vector"))
            })
            .collect::<Result<_>>()?;
        let gold: Vec<f64> = self.pairs.iter().map(|p| p.gold).collect();
        spearman(&cosines, &gold)
    }

    /// Normalized token-count vector of one sentence.
    fn bow(&self, idx: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.vocab_size];
        for &t in &self.sentences[idx].tokens {
            v[t as usize] += 1.0;
        }
        v
    }

    /// Construction check plus a surface-statistics probe: bag-of-words
    /// cosine against gold on the held-out test pairs of a fixed split.
    pub fn audit(&self, split_seed: u64) -> Result<CorpusAudit> {
        let construction = self.construction_spearman()?;
        let parts = split(self, (0.8, 0.1, 0.1), split_seed)?;
        let holdout = &parts.test;
        if holdout.len() < 3 {
            return Err(LeapError::contract(format!(
                "held-out split of {} pairs is too small for the probe",
                holdout.len()
            )));
        }
        let pred: Vec<f64> = holdout
            .iter()
            .map(|p| {
                kernels::cosine(&self.bow(p.a), &self.bow(p.b))
                    .ok_or_else(|| LeapError::degenerate("empty sentence in probe"))
            })
            .collect::<Result<_>>()?;
        let gold: Vec<f64> = holdout.iter().map(|p| p.gold).collect();
        Ok(CorpusAudit {
            construction_spearman: construction,
            probe_spearman: spearman(&pred, &gold)?,
            holdout_pairs: holdout.len(),
        })
    }

    /// One JSON object per sentence.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        for s in &self.sentences {
            serde_json::to_writer(&mut out, s)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// `id_a,id_b,score` rows; scores keep full round-trip precision.
    pub fn write_pairs_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id_a,id_b,score\n");
        for p in &self.pairs {
            out.push_str(&format!(
                "{},{},{}\n",
                self.sentences[p.a].text_id, self.sentences[p.b].text_id, p.gold
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(jsonl_path: &Path, pairs_path: &Path, vocab_size: usize) -> Result<Self> {
        let file = std::fs::File::open(jsonl_path)?;
        let mut sentences = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s: Sentence = serde_json::from_str(&line)?;
            if let Some(&bad) = s.tokens.iter().find(|&&t| t as usize >= vocab_size) {
                return Err(LeapError::config(format!(
                    "token {bad} in {} outside vocabulary of {vocab_size}",
                    s.text_id
                )));
            }
            sentences.push(s);
        }
        let index: std::collections::HashMap<&str, usize> = sentences
            .iter()
            .enumerate()
            .map(|(i, s)| (s.text_id.as_str(), i))
            .collect();
        if index.len() != sentences.len() {
            return Err(LeapError::config("duplicate text ids in corpus".to_string()));
        }

        let text = std::fs::read_to_string(pairs_path)?;
        let mut pairs = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 {
                if line.trim() != "id_a,id_b,score" {
                    return Err(LeapError::config(format!(
                        "unexpected pairs header: {line}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.split(',');
            let (ia, ib, score) = match (cols.next(), cols.next(), cols.next(), cols.next()) {
                (Some(a), Some(b), Some(s), None) => (a, b, s),
                _ => {
                    return Err(LeapError::config(format!(
                        "malformed pairs row {}: {line}",
                        ln + 1
                    )))
                }
            };
            let a = *index.get(ia).ok_or_else(|| {
                LeapError::config(format!("pairs row {} references unknown id {ia}", ln + 1))
            })?;
            let b = *index.get(ib).ok_or_else(|| {
                LeapError::config(format!("pairs row {} references unknown id {ib}", ln + 1))
            })?;
            let gold: f64 = score.parse().map_err(|_| {
                LeapError::config(format!("pairs row {} has bad score {score}", ln + 1))
            })?;
            pairs.push(ScoredPair { a, b, gold });
        }
        Ok(SyntheticCorpus { vocab_size, sentences, pairs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(seed: u64) -> CorpusConfig {
        CorpusConfig {
            seed,
            n_sentences: 400,
            n_pairs: 300,
            vocab_size: 64,
            topics: 4,
            min_len: 8,
            max_len: 32,
        }
    }

    #[test]
    fn config_validation() {
        assert!(small_config(1).validate().is_ok());
        let mut bad = small_config(1);
        bad.topics = 1;
        assert!(bad.validate().is_err());
        let mut bad = small_config(1);
        bad.vocab_size = 7;
        assert!(bad.validate().is_err());
        let mut bad = small_config(1);
        bad.min_len = 40;
        assert!(bad.validate().is_err());
        let mut bad = small_config(1);
        bad.n_pairs = 0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn gold_score_construction_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let e0 = vec![1.0, 0.0, 0.0];
        let e1 = vec![0.0, 1.0, 0.0];
        for _ in 0..50 {
            let same = gold_score(&e0, &e0, &mut rng).unwrap();
            assert!(same >= 5.0 - GOLD_NOISE && same <= 5.0, "same-topic gold {same}");
            let diff = gold_score(&e0, &e1, &mut rng).unwrap();
            assert!((0.0..=GOLD_NOISE).contains(&diff), "orthogonal gold {diff}");
        }
        assert!(gold_score(&[0.0, 0.0], &e0[..2], &mut rng).is_err());
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let c1 = generate(&small_config(7)).unwrap();
        let c2 = generate(&small_config(7)).unwrap();
        assert_eq!(c1, c2);
        let c3 = generate(&small_config(8)).unwrap();
        assert_ne!(c1, c3);
    }

    #[test]
    fn sentences_respect_lengths_and_vocabulary() {
        let cfg = small_config(9);
        let c = generate(&cfg).unwrap();
        assert_eq!(c.sentences.len(), cfg.n_sentences);
        assert_eq!(c.pairs.len(), cfg.n_pairs);
        for s in &c.sentences {
            assert!(s.tokens.len() >= cfg.min_len && s.tokens.len() <= cfg.max_len);
            assert!(s.tokens.iter().all(|&t| (t as usize) < cfg.vocab_size));
            assert_eq!(s.latent.len(), cfg.topics);
        }
        let ids: HashSet<&str> = c.sentences.iter().map(|s| s.text_id.as_str()).collect();
        assert_eq!(ids.len(), c.sentences.len());
    }

    #[test]
    fn pairs_are_distinct_and_graded() {
        let c = generate(&small_config(10)).unwrap();
        let mut seen = HashSet::new();
        for p in &c.pairs {
            assert_ne!(p.a, p.b);
            assert!((0.0..=5.0).contains(&p.gold));
            assert!(seen.insert((p.a.min(p.b), p.a.max(p.b))));
        }
        let max_gold = c.pairs.iter().map(|p| p.gold).fold(f64::MIN, f64::max);
        let min_gold = c.pairs.iter().map(|p| p.gold).fold(f64::MAX, f64::min);
        assert!(max_gold > 4.0, "same-topic pairs should reach near 5, max {max_gold}");
        assert!(min_gold < 1.0, "cross-topic pairs should reach near 0, min {min_gold}");
    }

    #[test]
    fn construction_correlation_clears_the_floor() {
        let c = generate(&small_config(11)).unwrap();
        let rho = c.construction_spearman().unwrap();
        assert!(rho >= CONSTRUCTION_SPEARMAN_MIN, "construction Spearman {rho}");
    }

    #[test]
    fn bag_of_words_probe_clears_the_floor() {
        let c = generate(&small_config(12)).unwrap();
        let audit = c.audit(99).unwrap();
        assert!(audit.probe_spearman >= PROBE_SPEARMAN_MIN, "probe {}", audit.probe_spearman);
        assert!(audit.check().is_ok());
        assert_eq!(audit.holdout_pairs, 30);
    }

    #[test]
    fn desk_scale_corpus_passes_both_gates() {
        let c = generate(&CorpusConfig::default_desk(13)).unwrap();
        let audit = c.audit(99).unwrap();
        assert!(audit.check().is_ok(), "audit failed: {audit:?}");
    }

    #[test]
    fn split_sizes_floor_with_remainder() {
        assert_eq!(split_sizes(100, (0.8, 0.1, 0.1)).unwrap(), (80, 10, 10));
        assert_eq!(split_sizes(101, (0.8, 0.1, 0.1)).unwrap(), (81, 10, 10));
        assert_eq!(split_sizes(7, (0.5, 0.25, 0.25)).unwrap(), (4, 2, 1));
        assert!(split_sizes(10, (0.8, 0.1, 0.2)).is_err());
        assert!(split_sizes(10, (0.8, 0.3, -0.1)).is_err());
    }

    #[test]
    fn split_partitions_pairs_exactly() {
        let mut cfg = small_config(14);
        cfg.n_pairs = 100;
        let c = generate(&cfg).unwrap();
        let parts = split(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(parts.train.len(), 80);
        assert_eq!(parts.val.len(), 10);
        assert_eq!(parts.test.len(), 10);

        let key = |p: &ScoredPair| (p.a.min(p.b), p.a.max(p.b));
        let mut all: Vec<_> = parts
            .train
            .iter()
            .chain(&parts.val)
            .chain(&parts.test)
            .map(key)
            .collect();
        all.sort_unstable();
        let mut expected: Vec<_> = c.pairs.iter().map(key).collect();
        expected.sort_unstable();
        assert_eq!(all, expected, "splits must partition the pair set");

        let train_set: HashSet<_> = parts.train.iter().map(key).collect();
        let val_set: HashSet<_> = parts.val.iter().map(key).collect();
        let test_set: HashSet<_> = parts.test.iter().map(key).collect();
        assert!(train_set.is_disjoint(&val_set));
        assert!(train_set.is_disjoint(&test_set));
        assert!(val_set.is_disjoint(&test_set));

        let again = split(&c, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!(parts.train, again.train);
        assert_eq!(parts.test, again.test);
    }

    #[test]
    fn jsonl_and_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(15);
        let c = generate(&cfg).unwrap();
        let jsonl = dir.path().join("corpus.jsonl");
        let csv = dir.path().join("pairs.csv");
        c.write_jsonl(&jsonl).unwrap();
        c.write_pairs_csv(&csv).unwrap();

        let loaded = SyntheticCorpus::load(&jsonl, &csv, cfg.vocab_size).unwrap();
        assert_eq!(loaded, c);

        let text = std::fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("id_a,id_b,score\n"));
    }

    #[test]
    fn load_rejects_corrupt_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(16);
        let c = generate(&cfg).unwrap();
        let jsonl = dir.path().join("corpus.jsonl");
        let csv = dir.path().join("pairs.csv");
        c.write_jsonl(&jsonl).unwrap();
        c.write_pairs_csv(&csv).unwrap();

        let bad_csv = dir.path().join("bad.csv");
        std::fs::write(&bad_csv, "id_a,id_b,score\ns00001,missing,3.0\n").unwrap();
        assert!(SyntheticCorpus::load(&jsonl, &bad_csv, cfg.vocab_size).is_err());

        std::fs::write(&bad_csv, "wrong,header\n").unwrap();
        assert!(SyntheticCorpus::load(&jsonl, &bad_csv, cfg.vocab_size).is_err());

        std::fs::write(&bad_csv, "id_a,id_b,score\ns00001,s00002,not_a_number\n").unwrap();
        assert!(SyntheticCorpus::load(&jsonl, &bad_csv, cfg.vocab_size).is_err());

        assert!(SyntheticCorpus::load(&jsonl, &csv, 4).is_err());
    }

    #[test]
    fn regenerated_files_are_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(17);
        let a_path = dir.path().join("a.jsonl");
        let b_path = dir.path().join("b.jsonl");
        generate(&cfg).unwrap().write_jsonl(&a_path).unwrap();
        generate(&cfg).unwrap().write_jsonl(&b_path).unwrap();
        assert_eq!(std::fs::read(&a_path).unwrap(), std::fs::read(&b_path).unwrap());
    }
}
