//! Raw interaction ingestion, preprocessing, augmentation, synthetic corpora
//! and batching.

mod batch;
mod corpus_io;
mod load;
mod preprocess;
mod synth;

use std::collections::HashMap;

pub use batch::{batch_iter, epoch_order, Batch};
pub use corpus_io::CORPUS_VERSION;
pub use load::{load_interactions, ColumnSchema, LoadedInteractions, TimeFormat};
pub use preprocess::{augment, sessionize_and_filter, temporal_split, SplitRule};
pub use synth::{synth_generate, MarkovGenerator, SynthConfig, SynthCorpus};

/// Index reserved for padding; real items are `1..=N`.
pub const PAD: u32 = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub session_id: String,
    pub item_id: String,
    pub timestamp: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub id: String,
    pub items: Vec<u32>,
    /// Latest interaction timestamp; the split key.
    pub time: i64,
    pub split: SplitTag,
}

/// Bijection between raw item ids and dense indices `1..=N`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Vocabulary {
    raw: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index of `raw`, assigning the next one if it is new.
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&i) = self.index.get(raw) {
            return i;
        }
        self.raw.push(raw.to_string());
        let i = self.raw.len() as u32;
        self.index.insert(raw.to_string(), i);
        i
    }

    pub fn encode(&self, raw: &str) -> Option<u32> {
        self.index.get(raw).copied()
    }

    pub fn decode(&self, index: u32) -> Option<&str> {
        if index == PAD {
            return None;
        }
        self.raw.get(index as usize - 1).map(String::as_str)
    }

    /// `N`, the number of real items.
    pub fn item_count(&self) -> usize {
        self.raw.len()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &str)> {
        self.raw
            .iter()
            .enumerate()
            .map(|(i, r)| (i as u32 + 1, r.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TrainingExample {
    pub prefix: Vec<u32>,
    pub label: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub sessions: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_examples: usize,
    pub test_examples: usize,
    pub items: usize,
    /// Mean item count over all retained sessions.
    pub avg_len: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    /// Train sessions in time order.
    pub train_sessions: Vec<Session>,
    pub test_sessions: Vec<Session>,
    pub train: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
    pub stats: CorpusStats,
}

impl Corpus {
    pub fn from_sessions(
        vocab: Vocabulary,
        train_sessions: Vec<Session>,
        test_sessions: Vec<Session>,
    ) -> Self {
        let train = augment(&train_sessions);
        let test = augment(&test_sessions);
        let total_items: usize = train_sessions
            .iter()
            .chain(&test_sessions)
            .map(|s| s.items.len())
            .sum();
        let sessions = train_sessions.len() + test_sessions.len();
        let stats = CorpusStats {
            sessions,
            train_sessions: train_sessions.len(),
            test_sessions: test_sessions.len(),
            train_examples: train.len(),
            test_examples: test.len(),
            items: vocab.item_count(),
            avg_len: if sessions == 0 {
                0.0
            } else {
                total_items as f64 / sessions as f64
            },
        };
        Corpus {
            vocab,
            train_sessions,
            test_sessions,
            train,
            test,
            stats,
        }
    }

    pub fn item_count(&self) -> usize {
        self.vocab.item_count()
    }

    /// Splits the train sessions into (fit, validation), the validation part
    /// being the most recent `fraction` of sessions.
    pub fn validation_split(&self, fraction: f64) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
        let n = self.train_sessions.len();
        let n_val = ((n as f64) * fraction).round() as usize;
        let n_val = n_val.min(n.saturating_sub(1));
        let (fit, val) = self.train_sessions.split_at(n - n_val);
        (augment(fit), augment(val))
    }
}
