//! α-entmax and the three attention mechanisms: multi-head sparse
//! self-attention (current view), target attention (global view) and
//! neighbor-session fusion (local view).

pub mod entmax;
mod fusion;
mod multihead;
mod target;

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SegmentLayout, Var};
use crate::error::{MgcotError, Result};

pub use entmax::{entmax_bisect, softmax, DEFAULT_BISECT_ITERS};
pub use fusion::NeighborFusion;
pub use multihead::{AttentionOutput, MultiHeadAttention};
pub use target::{TargetAttention, TargetAttentionOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Model width `d`; attention runs on `2d`-wide rows.
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    pub entmax_iters: usize,
    pub layer_norm: bool,
}

impl AttentionConfig {
    pub fn new(d: usize, heads: usize) -> Self {
        AttentionConfig {
            d,
            heads,
            dropout: 0.2,
            entmax_iters: DEFAULT_BISECT_ITERS,
            layer_norm: true,
        }
    }

    pub fn width(&self) -> usize {
        2 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(MgcotError::Config("model width must be positive".into()));
        }
        if ![1, 2, 4].contains(&self.heads) {
            return Err(MgcotError::Config(format!(
                "head count must be 1, 2 or 4, got {}",
                self.heads
            )));
        }
        if !self.width().is_multiple_of(self.heads) {
            return Err(MgcotError::Config(format!(
                "width {} is not divisible by {} heads",
                self.width(),
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(MgcotError::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.entmax_iters == 0 {
            return Err(MgcotError::Config("entmax iterations must be positive".into()));
        }
        Ok(())
    }
}

/// Padded per-position rows (`segments * width` rows) with their layout.
#[derive(Debug, Clone)]
pub struct SequenceState {
    pub rows: Var,
    pub layout: Rc<SegmentLayout>,
}

impl SequenceState {
    pub fn new(g: &Graph, rows: Var, layout: Rc<SegmentLayout>) -> Result<Self> {
        if g.shape(rows).0 != layout.rows() {
            return Err(MgcotError::Shape(format!(
                "{} rows for a layout of {}",
                g.shape(rows).0,
                layout.rows()
            )));
        }
        Ok(SequenceState { rows, layout })
    }

    /// Row index of the last valid position of every segment.
    pub fn last_rows(&self) -> Vec<usize> {
        (0..self.layout.segments())
            .map(|b| self.layout.start(b) + self.layout.lengths[b].saturating_sub(1))
            .collect()
    }

    /// Segment index of every row.
    pub fn segment_of_rows(&self) -> Vec<usize> {
        (0..self.layout.rows()).map(|r| r / self.layout.width).collect()
    }
}

/// `σ(h w + b) + 1`, one α in `(1, 2)` per row of `h`.
pub fn learned_alpha(g: &mut Graph, h: Var, w: Var, b: Var) -> Result<Var> {
    let a = g.affine(h, w, b)?;
    let s = g.sigmoid(a);
    Ok(g.add_scalar(s, 1.0))
}
