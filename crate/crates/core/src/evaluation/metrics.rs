use serde::{Deserialize, Serialize};

/// 1-based rank of `label` (a column of `scores`): items scoring higher come
/// first and ties go to the lower index.
pub fn rank_of(scores: &[f64], label: usize) -> usize {
    let s = scores[label];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < label))
        .count()
}

/// Items `1..=N` ordered by descending score, ties by ascending index.
/// `scores[j]` belongs to item `j + 1`.
pub fn rank_items(scores: &[f64]) -> Vec<u32> {
    let mut items: Vec<u32> = (1..=scores.len() as u32).collect();
    items.sort_by(|&a, &b| {
        scores[b as usize - 1]
            .total_cmp(&scores[a as usize - 1])
            .then(a.cmp(&b))
    });
    items
}

/// Percentage of ranks within the top `k`.
pub fn precision_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Mean reciprocal rank cut at `k`, as a percentage.
pub fn mrr_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0
        * ranks
            .iter()
            .map(|&r| if r <= k { 1.0 / r as f64 } else { 0.0 })
            .sum::<f64>()
        / ranks.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub p10: f64,
    pub p20: f64,
    pub m10: f64,
    pub m20: f64,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Self {
        Metrics {
            count: ranks.len(),
            p10: precision_at_k(ranks, 10),
            p20: precision_at_k(ranks, 20),
            m10: mrr_at_k(ranks, 10),
            m20: mrr_at_k(ranks, 20),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_items(&[0.1, 0.9, 0.5]), vec![2, 3, 1]);
        let mut s = vec![0.0; 8];
        s[2] = 1.0;
        s[6] = 1.0;
        let r = rank_items(&s);
        assert_eq!(&r[..2], &[3, 7]);
        assert_eq!(rank_of(&s, 2), 1);
        assert_eq!(rank_of(&s, 6), 2);
    }

    #[test]
    fn top_twenty_matches_full_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..1000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle: Vec<(f64, u32)> = scores.iter().enumerate().map(|(i, &s)| (s, i as u32 + 1)).collect();
        oracle.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let top: Vec<u32> = oracle.iter().take(20).map(|p| p.1).collect();
        assert_eq!(&rank_items(&scores)[..20], &top[..]);
        for (pos, &item) in top.iter().enumerate() {
            assert_eq!(rank_of(&scores, item as usize - 1), pos + 1);
        }
    }

    #[test]
    fn metric_examples() {
        assert_eq!(precision_at_k(&[1], 20), 100.0);
        assert_eq!(precision_at_k(&[21], 20), 0.0);
        assert_eq!(precision_at_k(&[1, 5, 21, 100], 20), 50.0);
        assert_eq!(mrr_at_k(&[1], 20), 100.0);
        assert!((mrr_at_k(&[3], 20) - 100.0 / 3.0).abs() < 1e-12);
        assert!((mrr_at_k(&[1, 2, 25], 20) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn metric_orderings() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let ranks: Vec<usize> = (0..30).map(|_| rng.random_range(1..60)).collect();
            let m = Metrics::from_ranks(&ranks);
            assert!(m.m10 <= m.p10 && m.m20 <= m.p20);
            assert!(m.p10 <= m.p20 && m.m10 <= m.m20);
        }
    }
}
