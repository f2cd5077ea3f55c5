use std::rc::Rc;

use rand::Rng;

use super::{learned_alpha, AttentionConfig, SequenceState};
use crate::autodiff::{Graph, Var};
use crate::error::{MgcotError, Result};
use crate::params::{ParamId, ParamStore};

/// Attention of a per-session query vector over a sequence of global-view
/// item rows, with a query-dependent entmax α.
#[derive(Debug, Clone)]
pub struct TargetAttention {
    pub config: AttentionConfig,
    alpha_w: ParamId,
    alpha_b: ParamId,
    w0: ParamId,
    w1: ParamId,
    w2: ParamId,
    b0: ParamId,
}

#[derive(Debug, Clone)]
pub struct TargetAttentionOutput {
    /// Pooled vectors, `segments x 2d`.
    pub pooled: Var,
    /// Weights per row, `rows x 1`, zero on padding.
    pub weights: Var,
    pub alpha: Var,
}

impl TargetAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let w = config.width();
        let bound = 1.0 / (config.d as f64).sqrt();
        let mut u = |name: &str, shape| store.add_uniform(format!("{prefix}.{name}"), shape, bound, rng);
        Ok(TargetAttention {
            alpha_w: u("alpha_w", (w, 1)),
            alpha_b: u("alpha_b", (1, 1)),
            w0: u("w0", (w, 1)),
            w1: u("w1", (w, w)),
            w2: u("w2", (w, w)),
            b0: u("b0", (1, w)),
            config,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.alpha_w, self.alpha_b, self.w0, self.w1, self.w2, self.b0]
    }

    /// `query` is `segments x 2d`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        seq: &SequenceState,
        query: Var,
    ) -> Result<TargetAttentionOutput> {
        let w = self.config.width();
        let segments = seq.layout.segments();
        if g.shape(seq.rows).1 != w || g.shape(query) != (segments, w) {
            return Err(MgcotError::Shape(format!(
                "target attention over {:?} rows with query {:?}, width {w}",
                g.shape(seq.rows),
                g.shape(query)
            )));
        }
        if seq.layout.lengths.contains(&0) {
            return Err(MgcotError::EmptyAttention);
        }
        let p = |g: &mut Graph, id| g.param(store, id);
        let (aw, ab) = (p(g, self.alpha_w), p(g, self.alpha_b));
        let alpha = learned_alpha(g, query, aw, ab)?;

        let w1 = p(g, self.w1);
        let keys = g.matmul(seq.rows, w1)?;
        let (w2, b0) = (p(g, self.w2), p(g, self.b0));
        let q = g.affine(query, w2, b0)?;
        let q = g.gather_rows(q, &seq.segment_of_rows())?;
        let hidden = g.add(keys, q)?;
        let hidden = g.relu(hidden);
        let w0 = p(g, self.w0);
        let scores = g.matmul(hidden, w0)?;
        let weights = g.segment_entmax(scores, alpha, seq.layout.clone(), self.config.entmax_iters)?;
        let weighted = g.mul_col(seq.rows, weights)?;
        let pooled = g.spmm(Rc::new(seq.layout.pooling()), weighted)?;
        Ok(TargetAttentionOutput {
            pooled,
            weights,
            alpha,
        })
    }
}
