//! Per-session frequency item graph.
//!
//! The edge entering an item on its m-th arrival carries weight m; repeated
//! identical transitions keep the largest weight. `[v2, v4, v5, v8, v4]`
//! therefore gives `v2→v4 = 1` and `v8→v4 = 2`, and sessions built from the
//! same items in a different order get different weighted graphs.

use std::collections::BTreeMap;
use std::collections::HashMap;

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct CurrentSessionGraph {
    /// Unique items in order of first appearance.
    pub nodes: Vec<u32>,
    /// Node slot of every session position.
    pub alias: Vec<usize>,
    /// Raw arrival-count weights keyed by `(from_slot, to_slot)`.
    pub edges: BTreeMap<(usize, usize), u32>,
    /// `a_in[i][j]`: weight of `j → i` over the total incoming weight of `i`.
    pub a_in: Array2<f64>,
    /// `a_out[i][j]`: weight of `i → j` over the total outgoing weight of `i`.
    pub a_out: Array2<f64>,
}

impl CurrentSessionGraph {
    pub fn build(session: &[u32]) -> Self {
        let mut nodes = Vec::new();
        let mut slot_of: HashMap<u32, usize> = HashMap::new();
        let alias: Vec<usize> = session
            .iter()
            .map(|&item| {
                *slot_of.entry(item).or_insert_with(|| {
                    nodes.push(item);
                    nodes.len() - 1
                })
            })
            .collect();

        let n = nodes.len();
        let mut arrivals = vec![0u32; n];
        let mut edges: BTreeMap<(usize, usize), u32> = BTreeMap::new();
        for w in alias.windows(2) {
            let (from, to) = (w[0], w[1]);
            arrivals[to] += 1;
            let weight = edges.entry((from, to)).or_insert(0);
            *weight = (*weight).max(arrivals[to]);
        }

        let mut a_in = Array2::zeros((n, n));
        let mut a_out = Array2::zeros((n, n));
        for (&(from, to), &w) in &edges {
            a_out[[from, to]] = w as f64;
            a_in[[to, from]] = w as f64;
        }
        normalize_rows(&mut a_in);
        normalize_rows(&mut a_out);

        CurrentSessionGraph {
            nodes,
            alias,
            edges,
            a_in,
            a_out,
        }
    }

    /// Edges as `(from_item, to_item, weight)`.
    pub fn item_edges(&self) -> Vec<(u32, u32, u32)> {
        self.edges
            .iter()
            .map(|(&(f, t), &w)| (self.nodes[f], self.nodes[t], w))
            .collect()
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let total = row.sum();
        if total > 0.0 {
            row.mapv_inplace(|v| v / total);
        }
    }
}
