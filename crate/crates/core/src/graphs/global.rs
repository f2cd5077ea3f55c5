//! Corpus-wide item graph: co-occurrence counts, reweighted by shortest paths.
//!
//! Co-occurrence weights `w` become costs `c = max(w) - w`. Dijkstra from every source keeps
//! the `K_sp` cheapest reachable targets, and the retained minimum costs `ĉ`
//! are mapped back to weights `ŵ = (max ĉ + 1) - ĉ`. Every final weight is
//! at least 1 and the mapping strictly reverses the cost order.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::error::{MgcotError, Result};
use crate::sparse::Csr;

pub const GLOBAL_GRAPH_VERSION: u32 = 1;

/// Symmetric (or directed) co-occurrence counts over item indices `0..num_nodes`.
#[derive(Debug, Clone, PartialEq)]
pub struct CooccurrenceGraph {
    num_nodes: usize,
    directed: bool,
    window: usize,
    adj: Vec<BTreeMap<u32, u64>>,
}

impl CooccurrenceGraph {
    /// Counts pairs `(v_t, v_{t+δ})` for `1 ≤ δ ≤ window`. Self pairs are skipped.
    pub fn build<'a>(
        sessions: impl IntoIterator<Item = &'a [u32]>,
        num_nodes: usize,
        window: usize,
        directed: bool,
    ) -> Self {
        let mut g = CooccurrenceGraph {
            num_nodes,
            directed,
            window,
            adj: vec![BTreeMap::new(); num_nodes],
        };
        for session in sessions {
            for t in 0..session.len() {
                for d in 1..=window {
                    if let Some(&next) = session.get(t + d) {
                        g.add_pair(session[t], next, 1);
                    }
                }
            }
        }
        g
    }

    /// Builds directly from weighted edges.
    pub fn from_edges(num_nodes: usize, directed: bool, edges: &[(u32, u32, u64)]) -> Self {
        let mut g = CooccurrenceGraph {
            num_nodes,
            directed,
            window: 1,
            adj: vec![BTreeMap::new(); num_nodes],
        };
        for &(a, b, w) in edges {
            g.add_pair(a, b, w);
        }
        g
    }

    fn add_pair(&mut self, a: u32, b: u32, w: u64) {
        if a == b {
            return;
        }
        *self.adj[a as usize].entry(b).or_insert(0) += w;
        if !self.directed {
            *self.adj[b as usize].entry(a).or_insert(0) += w;
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn weight(&self, a: u32, b: u32) -> u64 {
        self.adj[a as usize].get(&b).copied().unwrap_or(0)
    }

    pub fn neighbors(&self, a: u32) -> impl Iterator<Item = (u32, u64)> + '_ {
        self.adj[a as usize].iter().map(|(&b, &w)| (b, w))
    }

    pub fn num_edges(&self) -> usize {
        self.adj.iter().map(|m| m.len()).sum()
    }

    pub fn max_weight(&self) -> Option<u64> {
        self.adj.iter().flat_map(|m| m.values().copied()).max()
    }
}

/// Cheapest reachable targets from `source` (source excluded), sorted by
/// `(cost, node)`. With `cap = Some(k)` only the first `k` are kept.
pub fn shortest_path_costs(
    graph: &CooccurrenceGraph,
    source: u32,
    max_weight: u64,
    cap: Option<usize>,
) -> Vec<(u32, u64)> {
    let n = graph.num_nodes();
    let mut dist = vec![u64::MAX; n];
    let mut done = vec![false; n];
    let mut heap = BinaryHeap::new();
    dist[source as usize] = 0;
    heap.push(Reverse((0u64, source)));
    let mut settled: Vec<(u32, u64)> = Vec::new();
    let mut bound: Option<u64> = None;

    while let Some(Reverse((d, u))) = heap.pop() {
        if done[u as usize] {
            continue;
        }
        if bound.is_some_and(|b| d > b) {
            break;
        }
        done[u as usize] = true;
        if u != source {
            settled.push((u, d));
            if cap.is_some_and(|k| settled.len() == k) {
                // Keep popping ties at this cost so truncation is by (cost, node).
                bound = Some(d);
            }
        }
        for (v, w) in graph.neighbors(u) {
            let nd = d + (max_weight - w);
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                heap.push(Reverse((nd, v)));
            }
        }
    }
    settled.sort_by_key(|&(node, cost)| (cost, node));
    if let Some(k) = cap {
        settled.truncate(k);
    }
    settled
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GlobalGraphMeta {
    pub num_nodes: usize,
    pub k_sp: Option<usize>,
    pub window: usize,
    pub directed: bool,
    pub max_raw_weight: u64,
    pub max_cost: u64,
}

/// Shortest-path item graph; each source row holds at most `K_sp` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalItemGraph {
    pub meta: GlobalGraphMeta,
    /// Per source: `(target, minimum cost ĉ)` sorted by `(cost, target)`.
    costs: Vec<Vec<(u32, u64)>>,
}

impl GlobalItemGraph {
    pub fn from_cooccurrence(graph: &CooccurrenceGraph, k_sp: Option<usize>) -> Self {
        let n = graph.num_nodes();
        let Some(max_raw_weight) = graph.max_weight() else {
            return GlobalItemGraph {
                meta: GlobalGraphMeta {
                    num_nodes: n,
                    k_sp,
                    window: graph.window(),
                    directed: graph.is_directed(),
                    max_raw_weight: 0,
                    max_cost: 0,
                },
                costs: vec![Vec::new(); n],
            };
        };
        let costs: Vec<Vec<(u32, u64)>> = (0..n as u32)
            .into_par_iter()
            .map(|src| shortest_path_costs(graph, src, max_raw_weight, k_sp))
            .collect();
        let max_cost = costs
            .iter()
            .flat_map(|row| row.iter().map(|&(_, c)| c))
            .max()
            .unwrap_or(0);
        GlobalItemGraph {
            meta: GlobalGraphMeta {
                num_nodes: n,
                k_sp,
                window: graph.window(),
                directed: graph.is_directed(),
                max_raw_weight,
                max_cost,
            },
            costs,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.meta.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.costs.iter().map(Vec::len).sum()
    }

    pub fn final_weight(&self, cost: u64) -> u64 {
        self.meta.max_cost + 1 - cost
    }

    /// Minimum path costs from `source`.
    pub fn costs_from(&self, source: u32) -> &[(u32, u64)] {
        &self.costs[source as usize]
    }

    pub fn cost(&self, source: u32, target: u32) -> Option<u64> {
        self.costs[source as usize]
            .iter()
            .find(|&&(t, _)| t == target)
            .map(|&(_, c)| c)
    }

    pub fn weight(&self, source: u32, target: u32) -> Option<u64> {
        self.cost(source, target).map(|c| self.final_weight(c))
    }

    /// All stored edges as `(source, target, ŵ)`.
    pub fn edges(&self) -> impl Iterator<Item = (u32, u32, u64)> + '_ {
        self.costs.iter().enumerate().flat_map(move |(s, row)| {
            row.iter()
                .map(move |&(t, c)| (s as u32, t, self.final_weight(c)))
        })
    }

    /// GCN propagation matrix `D^{-1/2}(A + I)D^{-1/2}`. `A` is the
    /// symmetrised weight matrix (`max(ŵ_ij, ŵ_ji)`), so the result is symmetric.
    pub fn gcn_adjacency(&self) -> Csr {
        let n = self.num_nodes();
        let mut sym: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (s, t, w) in self.edges() {
            let (s, t, w) = (s as usize, t as usize, w as f64);
            for key in [(s, t), (t, s)] {
                let e = sym.entry(key).or_insert(0.0);
                *e = e.max(w);
            }
        }
        let mut degree = vec![1.0; n];
        for (&(r, _), &w) in &sym {
            degree[r] += w;
        }
        let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut triplets: Vec<(usize, usize, f64)> = sym
            .into_iter()
            .map(|((r, c), w)| (r, c, w * inv_sqrt[r] * inv_sqrt[c]))
            .collect();
        triplets.extend((0..n).map(|i| (i, i, inv_sqrt[i] * inv_sqrt[i])));
        Csr::from_triplets(n, n, &triplets)
    }

    pub fn to_text(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "# mgcot global item graph");
        let _ = writeln!(out, "version {GLOBAL_GRAPH_VERSION}");
        let _ = writeln!(out, "nodes {}", m.num_nodes);
        match m.k_sp {
            Some(k) => {
                let _ = writeln!(out, "k_sp {k}");
            }
            None => {
                let _ = writeln!(out, "k_sp none");
            }
        }
        let _ = writeln!(out, "window {}", m.window);
        let _ = writeln!(out, "directed {}", m.directed);
        let _ = writeln!(out, "max_raw_weight {}", m.max_raw_weight);
        let _ = writeln!(out, "max_cost {}", m.max_cost);
        let _ = writeln!(out, "edges {}", self.num_edges());
        for (s, t, w) in self.edges() {
            let _ = writeln!(out, "{s} {t} {w}");
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| MgcotError::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| MgcotError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| MgcotError::io(path, e))?;
        let lines: Vec<String> = BufReader::new(f)
            .lines()
            .collect::<std::io::Result<_>>()
            .map_err(|e| MgcotError::io(path, e))?;
        Self::from_text(&lines.join("\n"))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let ctx = "global graph";
        let mut header: BTreeMap<&str, &str> = BTreeMap::new();
        let mut body = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.as_slice() {
                [key, value] if key.chars().all(|c| c.is_ascii_alphabetic() || c == '_') => {
                    header.insert(key, value);
                }
                [s, t, w] => body.push((*s, *t, *w)),
                _ => return Err(MgcotError::parse(ctx, format!("bad line {line:?}"))),
            }
        }
        let field = |k: &str| -> Result<&str> {
            header
                .get(k)
                .copied()
                .ok_or_else(|| MgcotError::parse(ctx, format!("missing {k}")))
        };
        let num = |k: &str| -> Result<u64> {
            field(k)?
                .parse::<u64>()
                .map_err(|e| MgcotError::parse(ctx, format!("{k}: {e}")))
        };
        let version = num("version")? as u32;
        if version != GLOBAL_GRAPH_VERSION {
            return Err(MgcotError::parse(ctx, format!("unsupported version {version}")));
        }
        let k_sp = match field("k_sp")? {
            "none" => None,
            v => Some(
                v.parse::<usize>()
                    .map_err(|e| MgcotError::parse(ctx, format!("k_sp: {e}")))?,
            ),
        };
        let directed = field("directed")?
            .parse::<bool>()
            .map_err(|e| MgcotError::parse(ctx, format!("directed: {e}")))?;
        let meta = GlobalGraphMeta {
            num_nodes: num("nodes")? as usize,
            k_sp,
            window: num("window")? as usize,
            directed,
            max_raw_weight: num("max_raw_weight")?,
            max_cost: num("max_cost")?,
        };
        let expected_edges = num("edges")? as usize;
        if body.len() != expected_edges {
            return Err(MgcotError::parse(
                ctx,
                format!("header says {expected_edges} edges, found {}", body.len()),
            ));
        }
        let mut costs = vec![Vec::new(); meta.num_nodes];
        for (s, t, w) in body {
            let parse = |v: &str| {
                v.parse::<u64>()
                    .map_err(|e| MgcotError::parse(ctx, format!("{v}: {e}")))
            };
            let (s, t, w) = (parse(s)? as usize, parse(t)? as u32, parse(w)?);
            if s >= meta.num_nodes || t as usize >= meta.num_nodes || w == 0 || w > meta.max_cost + 1 {
                return Err(MgcotError::parse(ctx, format!("edge {s} {t} {w} out of range")));
            }
            costs[s].push((t, meta.max_cost + 1 - w));
        }
        for row in &mut costs {
            row.sort_by_key(|&(t, c)| (c, t));
        }
        Ok(GlobalItemGraph { meta, costs })
    }
}
