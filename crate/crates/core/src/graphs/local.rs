//! Batch-level session graph: each session links to its top-k most similar
//! sessions in the batch by Jaccard similarity of their item sets.

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub jaccard: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LocalSessionGraph {
    /// Per session: neighbors sorted by weight descending, then lower index.
    pub neighbors: Vec<Vec<Neighbor>>,
}

impl LocalSessionGraph {
    /// Builds the graph from per-session item sequences (duplicates ignored).
    pub fn build(sessions: &[&[u32]], k: usize) -> Self {
        let sets: Vec<Vec<u32>> = sessions.iter().map(|s| unique_sorted(s)).collect();
        let neighbors = (0..sets.len())
            .map(|i| {
                let mut cands: Vec<Neighbor> = (0..sets.len())
                    .filter(|&j| j != i)
                    .filter_map(|j| {
                        let jac = jaccard_sorted(&sets[i], &sets[j]);
                        (jac > 0.0).then_some(Neighbor { index: j, jaccard: jac })
                    })
                    .collect();
                cands.sort_by(|a, b| {
                    b.jaccard
                        .partial_cmp(&a.jaccard)
                        .expect("finite jaccard")
                        .then(a.index.cmp(&b.index))
                });
                cands.truncate(k);
                cands
            })
            .collect();
        LocalSessionGraph { neighbors }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn num_edges(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }
}

pub fn unique_sorted(items: &[u32]) -> Vec<u32> {
    let mut v = items.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// `|A ∩ B| / |A ∪ B|` for sorted, deduplicated sets.
pub fn jaccard_sorted(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    inter as f64 / (a.len() + b.len() - inter) as f64
}
