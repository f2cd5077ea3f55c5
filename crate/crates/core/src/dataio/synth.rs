//! Synthetic corpora drawn from a known first-order Markov chain.
//!
//! Each item gets one dominant successor carrying mass `c / (1 + c)` for
//! concentration `c`, and a handful of alternates sharing the rest. Sessions
//! are random walks of uniform length in `[2, 10]` from a uniform start item.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use super::{
    sessionize_and_filter, temporal_split, Corpus, Interaction, SplitRule,
};
use crate::error::{MgcotError, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_items: usize,
    pub n_sessions: usize,
    pub markov_order: usize,
    /// `f64::INFINITY` gives a deterministic chain.
    pub concentration: f64,
    pub seed: u64,
    /// Alternate successors per item besides the dominant one.
    pub branching: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub test_fraction: f64,
    pub min_item_freq: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_items: 500,
            n_sessions: 20_000,
            markov_order: 1,
            concentration: 4.0,
            seed: 7,
            branching: 5,
            min_len: 2,
            max_len: 10,
            test_fraction: 0.1,
            min_item_freq: 5,
        }
    }
}

impl SynthConfig {
    pub fn top_mass(&self) -> f64 {
        if self.concentration.is_infinite() {
            1.0
        } else {
            self.concentration / (1.0 + self.concentration)
        }
    }
}

/// Transition table over raw generator items `0..n_items`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovGenerator {
    /// Per item: `(successor, probability)`, the dominant successor first.
    pub successors: Vec<Vec<(usize, f64)>>,
}

impl MarkovGenerator {
    pub fn raw_id(item: usize) -> String {
        format!("i{item}")
    }

    pub fn parse_raw_id(raw: &str) -> Option<usize> {
        raw.strip_prefix('i')?.parse().ok()
    }

    /// The most likely successor of `item`.
    pub fn argmax(&self, item: usize) -> usize {
        self.successors[item][0].0
    }

    pub fn probability(&self, from: usize, to: usize) -> f64 {
        self.successors[from]
            .iter()
            .filter(|&&(s, _)| s == to)
            .map(|&(_, p)| p)
            .sum()
    }

    fn sample_next(&self, item: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for &(s, p) in &self.successors[item] {
            acc += p;
            if u < acc {
                return s;
            }
        }
        self.successors[item].last().expect("non-empty").0
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub generator: MarkovGenerator,
    pub interactions: Vec<Interaction>,
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    if cfg.n_items < 10 || cfg.n_sessions < 100 {
        return Err(MgcotError::Config(format!(
            "synthetic corpus needs n_items >= 10 and n_sessions >= 100, got {} and {}",
            cfg.n_items, cfg.n_sessions
        )));
    }
    if cfg.markov_order != 1 {
        return Err(MgcotError::Config(format!(
            "only first-order chains are supported, got order {}",
            cfg.markov_order
        )));
    }
    if !(cfg.concentration > 0.0) || cfg.min_len < 2 || cfg.max_len < cfg.min_len {
        return Err(MgcotError::Config(
            "invalid concentration or session length range".into(),
        ));
    }

    let mut rng = seeding::stream(cfg.seed, "synth-chain", 0, 0);
    let top = cfg.top_mass();
    let branching = cfg.branching.min(cfg.n_items - 2);
    let successors = (0..cfg.n_items)
        .map(|item| {
            // Draw distinct successors other than the item itself.
            let picks = sample(&mut rng, cfg.n_items - 1, branching + 1);
            let others: Vec<usize> = picks
                .iter()
                .map(|p| if p >= item { p + 1 } else { p })
                .collect();
            let mut row = vec![(others[0], top)];
            if top < 1.0 && branching > 0 {
                let raw: Vec<f64> = (0..branching).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = raw.iter().sum();
                row.extend(
                    others[1..]
                        .iter()
                        .zip(&raw)
                        .map(|(&s, &w)| (s, (1.0 - top) * w / total)),
                );
            }
            row
        })
        .collect();
    let generator = MarkovGenerator { successors };

    let mut rng = seeding::stream(cfg.seed, "synth-walks", 0, 0);
    let mut interactions = Vec::new();
    for s in 0..cfg.n_sessions {
        let len = rng.random_range(cfg.min_len..=cfg.max_len);
        let mut item = rng.random_range(0..cfg.n_items);
        for pos in 0..len {
            interactions.push(Interaction {
                session_id: format!("s{s}"),
                item_id: MarkovGenerator::raw_id(item),
                timestamp: (s * 16 + pos) as i64,
            });
            item = generator.sample_next(item, &mut rng);
        }
    }

    let (sessions, vocab) = sessionize_and_filter(&interactions, 2, cfg.min_item_freq)?;
    let corpus = temporal_split(sessions, &vocab, SplitRule::TestFraction(cfg.test_fraction))?;
    Ok(SynthCorpus {
        corpus,
        generator,
        interactions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, concentration: f64) -> SynthConfig {
        SynthConfig {
            n_items: 50,
            n_sessions: 400,
            concentration,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = synth_generate(&small(3, 4.0)).unwrap();
        let b = synth_generate(&small(3, 4.0)).unwrap();
        assert_eq!(a.corpus.to_text_files(), b.corpus.to_text_files());
        let c = synth_generate(&small(4, 4.0)).unwrap();
        assert_ne!(a.corpus.to_text_files(), c.corpus.to_text_files());
    }

    #[test]
    fn rows_are_stochastic() {
        let s = synth_generate(&small(1, 4.0)).unwrap();
        for (item, row) in s.generator.successors.iter().enumerate() {
            let total: f64 = row.iter().map(|r| r.1).sum();
            assert!((total - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&(succ, _)| succ != item));
            assert!((row[0].1 - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn infinite_concentration_is_deterministic_chain() {
        let s = synth_generate(&small(2, f64::INFINITY)).unwrap();
        let vocab = &s.corpus.vocab;
        for ex in s.corpus.train.iter().chain(&s.corpus.test) {
            let last = MarkovGenerator::parse_raw_id(vocab.decode(*ex.prefix.last().unwrap()).unwrap()).unwrap();
            let next = MarkovGenerator::parse_raw_id(vocab.decode(ex.label).unwrap()).unwrap();
            assert_eq!(s.generator.argmax(last), next);
        }
    }

    #[test]
    fn invalid_sizes_rejected() {
        let cfg = SynthConfig { n_items: 5, ..small(1, 1.0) };
        assert!(matches!(synth_generate(&cfg), Err(MgcotError::Config(_))));
        let cfg = SynthConfig { n_sessions: 10, ..small(1, 1.0) };
        assert!(matches!(synth_generate(&cfg), Err(MgcotError::Config(_))));
    }
}
