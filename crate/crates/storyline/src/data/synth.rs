//! Synthetic storytelling benchmark.
//!
//! Stories follow a topic chain: a story starts at a uniformly drawn topic
//! and each later slot advances to the successor topic (mod `k_topics`), so
//! a hidden or inserted slot is predictable from its neighbours. Every topic
//! `k` owns four words and one template sentence
//!
//! ```text
//! the {noun_k} at the {place_k} was {adj1_k} and {adj2_k}
//! ```
//!
//! and a feature direction: column `k` of a fixed Gaussian projection. A
//! slot's feature vector is its topic's column plus `sigma`-scaled Gaussian
//! noise, so features are recoverable by nearest-column lookup — the oracle
//! the imagining stage is measured against. All draws come from the
//! dedicated synthesis stream of one seed, making the corpus reproducible
//! bit for bit.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::corpus::{write_corpus, Corpus, StoryRecord};
use crate::data::features::write_features;
use crate::data::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::model::StoryExample;
use crate::rng::{stream, STREAM_SYNTH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fixed file names inside a generated dataset directory.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const META_FILE: &str = "meta.json";
pub const SAMPLE_FILE: &str = "sample.inft";

const SHARED_WORDS: [&str; 4] = ["the", "at", "was", "and"];
const NOUNS: [&str; 8] = [
    "lighthouse",
    "market",
    "orchard",
    "glacier",
    "carousel",
    "library",
    "volcano",
    "windmill",
];
const PLACES: [&str; 8] = [
    "harbor",
    "plaza",
    "valley",
    "summit",
    "boardwalk",
    "courtyard",
    "island",
    "meadow",
];
const ADJ1: [&str; 8] = [
    "bright", "crowded", "fragrant", "frozen", "painted", "quiet", "smoky", "tall",
];
const ADJ2: [&str; 8] = [
    "calm", "lively", "sweet", "vast", "spinning", "dusty", "fierce", "gentle",
];

fn default_k_topics() -> usize {
    8
}
fn default_feature_dim() -> usize {
    16
}
fn default_slots() -> usize {
    5
}
fn default_sigma() -> f64 {
    0.05
}
fn default_n_train() -> usize {
    500
}
fn default_n_eval() -> usize {
    100
}

/// Benchmark shape and noise level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    #[serde(default = "default_k_topics")]
    pub k_topics: usize,
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_slots")]
    pub slots: usize,
    /// Standard deviation of the additive feature noise.
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_eval")]
    pub n_eval: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_topics: default_k_topics(),
            feature_dim: default_feature_dim(),
            slots: default_slots(),
            sigma: default_sigma(),
            n_train: default_n_train(),
            n_eval: default_n_eval(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=NOUNS.len()).contains(&self.k_topics) {
            return Err(Error::Config(format!(
                "k_topics must lie in 2..={}, got {} (that is how far the word tables go)",
                NOUNS.len(),
                self.k_topics
            )));
        }
        if self.feature_dim < self.k_topics {
            return Err(Error::Config(format!(
                "feature_dim {} cannot separate {} topics",
                self.feature_dim, self.k_topics
            )));
        }
        if self.slots < 3 {
            return Err(Error::Config(
                "slots must be at least 3 so the full masking curriculum can run".into(),
            ));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "sigma must be finite and non-negative, got {}",
                self.sigma
            )));
        }
        if self.n_train == 0 || self.n_eval == 0 {
            return Err(Error::Config(
                "n_train and n_eval must both be positive".into(),
            ));
        }
        Ok(())
    }
}

/// The four words owned by one topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicWords {
    pub noun: String,
    pub place: String,
    pub adj1: String,
    pub adj2: String,
}

impl TopicWords {
    fn contains(&self, word: &str) -> bool {
        word == self.noun || word == self.place || word == self.adj1 || word == self.adj2
    }
}

/// Everything needed to interpret a generated dataset, stored alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticMeta {
    #[serde(flatten)]
    pub config: SynthConfig,
    pub shared_words: Vec<String>,
    pub topic_words: Vec<TopicWords>,
    /// `feature_dim x k_topics` Gaussian projection; column `k` is the clean
    /// feature vector of topic `k`.
    pub projection: Vec<Vec<f64>>,
}

impl SyntheticMeta {
    /// The template sentence of a topic.
    pub fn sentence(&self, topic: usize) -> String {
        let w = &self.topic_words[topic];
        format!(
            "the {} at the {} was {} and {}",
            w.noun, w.place, w.adj1, w.adj2
        )
    }

    /// Vocabulary ids of the template words every sentence shares. Metrics
    /// that score informative content exclude these.
    pub fn shared_ids(&self, vocab: &Vocabulary) -> std::collections::HashSet<u32> {
        self.shared_words.iter().map(|w| vocab.id(w)).collect()
    }

    /// Topic a token sequence talks about: the topic whose words occur most
    /// often, or `None` when there is no hit or no unique winner.
    pub fn topic_of(&self, vocab: &Vocabulary, tokens: &[u32]) -> Option<usize> {
        let mut scores = vec![0usize; self.config.k_topics];
        for &t in tokens {
            if let Some(word) = vocab.word(t) {
                for (k, tw) in self.topic_words.iter().enumerate() {
                    if tw.contains(word) {
                        scores[k] += 1;
                    }
                }
            }
        }
        let best = *scores.iter().max()?;
        if best == 0 {
            return None;
        }
        let mut winners = scores.iter().enumerate().filter(|(_, &s)| s == best);
        let (topic, _) = winners.next()?;
        winners.next().is_none().then_some(topic)
    }

    /// Topic of slot `i` in a story that starts at `start`.
    pub fn chain_topic(&self, start: usize, slot: usize) -> usize {
        (start + slot) % self.config.k_topics
    }

    /// Nearest-column classification of one feature row — the generative
    /// oracle the imagining stage is compared against.
    pub fn nearest_topic(&self, row: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.config.k_topics {
            let d2: f64 = row
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let diff = v - self.projection[j][k];
                    diff * diff
                })
                .sum();
            if d2 < best.1 {
                best = (k, d2);
            }
        }
        best.0
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// A generated benchmark, both as raw records (for writing) and as encoded
/// corpora (for direct use).
#[derive(Debug, Clone)]
pub struct SyntheticData<R: Scalar> {
    pub meta: SyntheticMeta,
    pub vocab: Vocabulary,
    pub train_records: Vec<StoryRecord>,
    pub eval_records: Vec<StoryRecord>,
    pub train: Corpus<R>,
    pub eval: Corpus<R>,
}

/// Generate the benchmark. Draw order from the synthesis stream: the
/// projection matrix row by row, then per story (training split first) the
/// start topic followed by `slots * feature_dim` noise values.
pub fn generate<R: Scalar>(cfg: &SynthConfig) -> Result<SyntheticData<R>> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, STREAM_SYNTH);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    let projection: Vec<Vec<f64>> = (0..cfg.feature_dim)
        .map(|_| (0..cfg.k_topics).map(|_| normal.sample(&mut rng)).collect())
        .collect();
    let topic_words: Vec<TopicWords> = (0..cfg.k_topics)
        .map(|k| TopicWords {
            noun: NOUNS[k].into(),
            place: PLACES[k].into(),
            adj1: ADJ1[k].into(),
            adj2: ADJ2[k].into(),
        })
        .collect();
    let meta = SyntheticMeta {
        config: cfg.clone(),
        shared_words: SHARED_WORDS.iter().map(|&w| w.into()).collect(),
        topic_words,
        projection,
    };
    let vocab = Vocabulary::build(
        (0..cfg.k_topics)
            .map(|k| meta.sentence(k))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str),
    )?;

    let mut make_split = |prefix: &str, count: usize| -> (Vec<StoryRecord>, Corpus<R>) {
        let mut records = Vec::with_capacity(count);
        let mut ids = Vec::with_capacity(count);
        let mut stories = Vec::with_capacity(count);
        for i in 0..count {
            let start = rng.gen_range(0..cfg.k_topics);
            let mut rows = Vec::with_capacity(cfg.slots);
            let mut sentences = Vec::with_capacity(cfg.slots);
            for slot in 0..cfg.slots {
                let topic = meta.chain_topic(start, slot);
                let row: Vec<f64> = (0..cfg.feature_dim)
                    .map(|j| meta.projection[j][topic] + cfg.sigma * normal.sample(&mut rng))
                    .collect();
                rows.push(row);
                sentences.push(meta.sentence(topic));
            }
            let id = format!("{prefix}_{i:04}");
            let features_r: Vec<Vec<R>> = rows
                .iter()
                .map(|r| r.iter().map(|&v| R::from_f64(v)).collect())
                .collect();
            stories.push(StoryExample {
                features: Tensor::from_rows(&features_r).expect("aligned rows"),
                sentences: sentences.iter().map(|s| vocab.encode(s)).collect(),
            });
            ids.push(id.clone());
            records.push(StoryRecord {
                story_id: id,
                features: Some(rows),
                features_path: None,
                sentences,
            });
        }
        (records, Corpus { ids, stories })
    };

    let (train_records, train) = make_split("train", cfg.n_train);
    let (eval_records, eval) = make_split("eval", cfg.n_eval);
    Ok(SyntheticData {
        meta,
        vocab,
        train_records,
        eval_records,
        train,
        eval,
    })
}

/// Write a generated dataset into `dir`: both corpus splits, the vocabulary,
/// the metadata, and the first evaluation story's features as a standalone
/// feature file for the generation and interpolation commands.
pub fn write_dataset<R: Scalar>(dir: &Path, data: &SyntheticData<R>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_corpus(&dir.join(TRAIN_FILE), &data.train_records)?;
    write_corpus(&dir.join(EVAL_FILE), &data.eval_records)?;
    data.vocab.save(&dir.join(VOCAB_FILE))?;
    let mut meta_json = serde_json::to_string_pretty(&data.meta)?;
    meta_json.push('\n');
    std::fs::write(dir.join(META_FILE), meta_json)?;
    write_features(&dir.join(SAMPLE_FILE), &data.eval.stories[0].features)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::corpus::load_corpus;

    fn tiny_config() -> SynthConfig {
        SynthConfig {
            k_topics: 4,
            feature_dim: 4,
            slots: 3,
            sigma: 0.01,
            n_train: 5,
            n_eval: 3,
            seed: 7,
        }
    }

    #[test]
    fn default_vocabulary_has_forty_ids() {
        let cfg = SynthConfig {
            n_train: 2,
            n_eval: 1,
            ..SynthConfig::default()
        };
        let data = generate::<f64>(&cfg).unwrap();
        assert_eq!(data.vocab.size(), 40); // 4 reserved + 4 shared + 8*4 topic
        assert_eq!(data.meta.projection.len(), 16);
        assert_eq!(data.meta.projection[0].len(), 8);
    }

    #[test]
    fn stories_follow_the_successor_chain() {
        let data = generate::<f64>(&tiny_config()).unwrap();
        assert_eq!(data.train.len(), 5);
        assert_eq!(data.eval.len(), 3);
        for story in data.train.stories.iter().chain(&data.eval.stories) {
            assert_eq!(story.sentences.len(), 3);
            let t0 = data
                .meta
                .topic_of(&data.vocab, &story.sentences[0])
                .expect("clean sentence names its topic");
            for (slot, sent) in story.sentences.iter().enumerate() {
                let t = data.meta.topic_of(&data.vocab, sent).unwrap();
                assert_eq!(t, data.meta.chain_topic(t0, slot));
            }
        }
    }

    #[test]
    fn features_recover_topics_by_nearest_column() {
        let data = generate::<f64>(&tiny_config()).unwrap();
        for story in data.train.stories.iter().chain(&data.eval.stories) {
            for slot in 0..3 {
                let expected = data
                    .meta
                    .topic_of(&data.vocab, &story.sentences[slot])
                    .unwrap();
                let row: Vec<f64> = story.features.row_slice(slot).to_vec();
                assert_eq!(data.meta.nearest_topic(&row), expected);
            }
        }
    }

    #[test]
    fn generation_is_deterministic_in_the_seed() {
        let a = generate::<f64>(&tiny_config()).unwrap();
        let b = generate::<f64>(&tiny_config()).unwrap();
        assert_eq!(a.meta, b.meta);
        for (x, y) in a.train.stories.iter().zip(&b.train.stories) {
            let xb: Vec<u64> = x.features.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u64> = y.features.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
        let other = generate::<f64>(&SynthConfig {
            seed: 8,
            ..tiny_config()
        })
        .unwrap();
        assert_ne!(a.meta.projection, other.meta.projection);
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate::<f64>(&tiny_config()).unwrap();
        write_dataset(dir.path(), &data).unwrap();

        let vocab = Vocabulary::load(&dir.path().join(VOCAB_FILE)).unwrap();
        assert_eq!(vocab.size(), data.vocab.size());
        let train = load_corpus::<f64>(&dir.path().join(TRAIN_FILE), &vocab).unwrap();
        assert_eq!(train.ids, data.train.ids);
        for (a, b) in train.stories.iter().zip(&data.train.stories) {
            assert_eq!(a.features.data(), b.features.data());
            assert_eq!(a.sentences, b.sentences);
        }
        let meta = SyntheticMeta::load(&dir.path().join(META_FILE)).unwrap();
        assert_eq!(meta, data.meta);

        let sample =
            crate::data::features::read_features::<f64>(&dir.path().join(SAMPLE_FILE)).unwrap();
        let expected: Vec<f64> = data.eval.stories[0]
            .features
            .data()
            .iter()
            .map(|&v| v as f32 as f64)
            .collect();
        assert_eq!(sample.data(), expected.as_slice());
    }

    #[test]
    fn bad_configurations_are_rejected() {
        let ok = tiny_config();
        for bad in [
            SynthConfig {
                k_topics: 1,
                ..ok.clone()
            },
            SynthConfig {
                k_topics: 9,
                ..ok.clone()
            },
            SynthConfig {
                k_topics: 4,
                feature_dim: 3,
                ..ok.clone()
            },
            SynthConfig {
                slots: 2,
                ..ok.clone()
            },
            SynthConfig {
                sigma: -0.5,
                ..ok.clone()
            },
            SynthConfig {
                n_train: 0,
                ..ok.clone()
            },
            SynthConfig {
                n_eval: 0,
                ..ok.clone()
            },
        ] {
            assert!(generate::<f64>(&bad).is_err(), "{bad:?}");
        }
    }
}
