use std::collections::HashMap;

/// Scores items by training frequency (every position of every session).
#[derive(Debug, Clone)]
pub struct PopularityBaseline {
    counts: Vec<f64>,
}

impl PopularityBaseline {
    pub fn fit<'a>(sessions: impl IntoIterator<Item = &'a [u32]>, items: usize) -> Self {
        let mut counts = vec![0.0; items];
        for s in sessions {
            for &i in s {
                if i >= 1 && (i as usize) <= items {
                    counts[i as usize - 1] += 1.0;
                }
            }
        }
        PopularityBaseline { counts }
    }

    pub fn scores(&self) -> &[f64] {
        &self.counts
    }
}

/// First-order transition counts from the last prefix item, backing off to
/// popularity for unseen or tied successors.
#[derive(Debug, Clone)]
pub struct MarkovBaseline {
    transitions: HashMap<u32, HashMap<u32, f64>>,
    popularity: PopularityBaseline,
    total: f64,
}

impl MarkovBaseline {
    pub fn fit<'a>(sessions: impl IntoIterator<Item = &'a [u32]> + Clone, items: usize) -> Self {
        let popularity = PopularityBaseline::fit(sessions.clone(), items);
        let mut transitions: HashMap<u32, HashMap<u32, f64>> = HashMap::new();
        for s in sessions {
            for w in s.windows(2) {
                *transitions.entry(w[0]).or_default().entry(w[1]).or_insert(0.0) += 1.0;
            }
        }
        let total = popularity.counts.iter().sum();
        MarkovBaseline {
            transitions,
            popularity,
            total,
        }
    }

    /// `count(last → j) + pop(j) / (total + 1)`: bigram counts dominate and
    /// popularity only orders items with equal counts.
    pub fn scores(&self, prefix: &[u32]) -> Vec<f64> {
        let mut s: Vec<f64> = self
            .popularity
            .counts
            .iter()
            .map(|c| c / (self.total + 1.0))
            .collect();
        if let Some(next) = prefix.last().and_then(|l| self.transitions.get(l)) {
            for (&j, &c) in next {
                if j >= 1 && (j as usize) <= s.len() {
                    s[j as usize - 1] += c;
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::metrics::{precision_at_k, rank_items, rank_of};

    #[test]
    fn popularity_prefers_frequent_items() {
        let sessions: Vec<&[u32]> = vec![&[5, 1, 5], &[5, 2]];
        let pop = PopularityBaseline::fit(sessions, 6);
        assert_eq!(rank_items(pop.scores())[0], 5);
        let flat = PopularityBaseline::fit(vec![&[1u32, 2, 3][..]], 3);
        assert_eq!(rank_items(flat.scores()), vec![1, 2, 3]);
    }

    #[test]
    fn markov_follows_transitions_and_backs_off() {
        let sessions: Vec<&[u32]> = vec![&[1, 2, 3], &[1, 2], &[4, 3, 3], &[3, 3]];
        let m = MarkovBaseline::fit(sessions.clone(), 5);
        assert_eq!(rank_items(&m.scores(&[1]))[0], 2);
        let pop = PopularityBaseline::fit(sessions, 5);
        assert_eq!(rank_items(&m.scores(&[5])), rank_items(pop.scores()));
    }

    #[test]
    fn deterministic_chain_is_predicted_perfectly() {
        let chain: Vec<u32> = (1..=6).collect();
        let sessions: Vec<&[u32]> = vec![&chain[..], &chain[1..5], &chain[2..]];
        let m = MarkovBaseline::fit(sessions, 6);
        let ranks: Vec<usize> = (1..6u32).map(|i| rank_of(&m.scores(&[i]), i as usize)).collect();
        assert_eq!(precision_at_k(&ranks, 1), 100.0);
    }
}
