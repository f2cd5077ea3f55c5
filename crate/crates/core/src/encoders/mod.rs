//! Item embeddings, the gated graph encoder for the current view and the
//! single-layer GCN for the global view.

mod gcn;
mod ggnn;

use std::rc::Rc;

use rand::Rng;

use crate::attention::SequenceState;
use crate::autodiff::{Graph, SegmentLayout, Var};
use crate::error::{MgcotError, Result};
use crate::params::{ParamId, ParamStore};

pub use gcn::Gcn;
pub use ggnn::{ggnn_propagate, Ggnn};

/// `(N + 1) x d` item table; row 0 is the frozen zero padding vector.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingTable {
    pub id: ParamId,
    pub items: usize,
    pub d: usize,
}

impl EmbeddingTable {
    pub fn new(store: &mut ParamStore, name: &str, items: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let id = store.add_uniform(name, (items + 1, d), bound, rng);
        store.freeze_row(id, 0);
        EmbeddingTable { id, items, d }
    }
}

/// Reverse-position embeddings: position 0 is the target token, position
/// `k >= 1` the k-th item from the end. Positions past `max_pos` share the
/// last row.
#[derive(Debug, Clone, Copy)]
pub struct PositionTable {
    pub id: ParamId,
    pub max_pos: usize,
}

impl PositionTable {
    pub fn new(store: &mut ParamStore, name: &str, max_pos: usize, d: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        PositionTable {
            id: store.add_uniform(name, (max_pos + 1, d), bound, rng),
            max_pos,
        }
    }

    pub fn row(&self, reverse_pos: usize) -> usize {
        reverse_pos.min(self.max_pos)
    }
}

/// Row indices into a padded layout for a batch of prefixes. `extra` adds
/// trailing positions per segment (1 for the target token).
pub fn padded_layout(lengths: &[usize], extra: usize) -> Result<SegmentLayout> {
    let width = lengths.iter().max().copied().unwrap_or(0) + extra;
    SegmentLayout::new(width, lengths.iter().map(|l| l + extra).collect())
}

/// Builds the global-view sequence `[G(item) ; pos(reverse)]` for each prefix.
///
/// `item_rows` holds one `d`-wide row per distinct item and `row_of` maps an
/// item index to its row. Padding rows are zero.
pub fn assemble_global_sequence(
    g: &mut Graph,
    store: &ParamStore,
    item_rows: Var,
    row_of: impl Fn(u32) -> Option<usize>,
    prefixes: &[&[u32]],
    positions: &PositionTable,
) -> Result<SequenceState> {
    let lengths: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
    let layout = padded_layout(&lengths, 0)?;
    let n_rows = g.shape(item_rows).0;
    let mut item_idx = vec![0; layout.rows()];
    let mut pos_idx = vec![0; layout.rows()];
    for (b, prefix) in prefixes.iter().enumerate() {
        for (j, &item) in prefix.iter().enumerate() {
            let r = row_of(item)
                .filter(|&r| r < n_rows)
                .ok_or_else(|| MgcotError::Shape(format!("item {item} has no global row")))?;
            item_idx[layout.start(b) + j] = r;
            pos_idx[layout.start(b) + j] = positions.row(prefix.len() - j);
        }
    }
    let items = g.gather_rows(item_rows, &item_idx)?;
    let table = g.param(store, positions.id);
    let pos = g.gather_rows(table, &pos_idx)?;
    let rows = g.concat_cols(&[items, pos])?;
    let mask = g.constant(layout.row_mask());
    let rows = g.mul_col(rows, mask)?;
    SequenceState::new(g, rows, Rc::new(layout))
}
