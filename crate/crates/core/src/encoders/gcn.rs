use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MgcotError, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::Csr;

/// One GCN layer `Â E W_g` over the normalised global adjacency `Â`.
#[derive(Debug, Clone)]
pub struct Gcn {
    pub w: ParamId,
    pub relu: bool,
}

impl Gcn {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, relu: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        Gcn {
            w: store.add_uniform(format!("{prefix}.w"), (d, d), bound, rng),
            relu,
        }
    }

    /// Output rows for the listed items only, in that order. With `dropout`
    /// set, entries of `Â` are dropped at the given rate and rescaled.
    pub fn encode_rows(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        adjacency: &Csr,
        embeddings: Var,
        rows: &[usize],
        dropout: Option<(f64, &mut impl Rng)>,
    ) -> Result<Var> {
        if adjacency.shape().1 != g.shape(embeddings).0 {
            return Err(MgcotError::Shape(format!(
                "adjacency {:?} against {} embedding rows",
                adjacency.shape(),
                g.shape(embeddings).0
            )));
        }
        let mut a = adjacency.select_rows(rows);
        if let Some((rate, rng)) = dropout {
            if rate > 0.0 {
                let keep = 1.0 - rate;
                a = a.map_values(|v| if rng.random::<f64>() < keep { v / keep } else { 0.0 });
            }
        }
        let ae = g.spmm(Rc::new(a), embeddings)?;
        let w = g.param(store, self.w);
        let out = g.matmul(ae, w)?;
        Ok(if self.relu { g.relu(out) } else { out })
    }
}
