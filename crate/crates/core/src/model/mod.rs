//! The assembled recommender: current view (GGNN + sparse multi-head
//! attention), local view (neighbor fusion) for scoring, and the global view
//! (GCN + target attention) for the contrastive objective.

mod loss;

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    AttentionConfig, AttentionOutput, MultiHeadAttention, NeighborFusion, SequenceState, TargetAttention,
    TargetAttentionOutput, DEFAULT_BISECT_ITERS,
};
use crate::autodiff::{Graph, Var};
use crate::encoders::{assemble_global_sequence, padded_layout, EmbeddingTable, Gcn, Ggnn, PositionTable};
use crate::error::{MgcotError, Result};
use crate::graphs::{CurrentSessionGraph, LocalSessionGraph};
use crate::params::{ParamId, ParamStore};
use crate::sparse::Csr;

pub use loss::{contrastive_loss, contrastive_loss_with, derangement, main_loss, total_loss};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ablation {
    pub no_neighbor_sessions: bool,
    pub no_multi_attention: bool,
    pub no_contrastive: bool,
}

impl Ablation {
    pub const NAMES: [&'static str; 3] = ["no-neighbor-sessions", "no-multi-attention", "no-contrastive"];

    pub fn parse(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" | "none" => {}
            "no-neighbor-sessions" => a.no_neighbor_sessions = true,
            "no-multi-attention" => a.no_multi_attention = true,
            "no-contrastive" => a.no_contrastive = true,
            other => {
                return Err(MgcotError::Config(format!(
                    "unknown ablation {other:?}; expected one of {}",
                    Self::NAMES.join(", ")
                )))
            }
        }
        Ok(a)
    }

    pub fn tag(&self) -> String {
        let parts: Vec<&str> = [
            (self.no_neighbor_sessions, Self::NAMES[0]),
            (self.no_multi_attention, Self::NAMES[1]),
            (self.no_contrastive, Self::NAMES[2]),
        ]
        .iter()
        .filter(|p| p.0)
        .map(|p| p.1)
        .collect();
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Dropout on global adjacency entries during training.
    pub adj_dropout: f64,
    pub entmax_iters: usize,
    pub layer_norm: bool,
    pub ggnn_steps: usize,
    pub top_k: usize,
    pub beta: f64,
    pub tau: f64,
    pub gcn_relu: bool,
    pub split_embeddings: bool,
    pub max_position: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 100,
            heads: 2,
            dropout: 0.2,
            adj_dropout: 0.2,
            entmax_iters: DEFAULT_BISECT_ITERS,
            layer_norm: true,
            ggnn_steps: 1,
            top_k: 3,
            beta: 5.0,
            tau: 1.0,
            gcn_relu: false,
            split_embeddings: false,
            max_position: 200,
            ablation: Ablation::default(),
        }
    }
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d,
            heads: self.heads,
            dropout: self.dropout,
            entmax_iters: self.entmax_iters,
            layer_norm: self.layer_norm,
        }
    }

    /// β after applying the contrastive ablation.
    pub fn effective_beta(&self) -> f64 {
        if self.ablation.no_contrastive {
            0.0
        } else {
            self.beta
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention().validate()?;
        if self.ggnn_steps == 0 {
            return Err(MgcotError::Config("GGNN steps must be at least 1".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(MgcotError::Config(format!("β must be finite and non-negative, got {}", self.beta)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MgcotError::Config(format!("τ must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.adj_dropout) {
            return Err(MgcotError::Config(format!("adjacency dropout {} outside [0, 1)", self.adj_dropout)));
        }
        if self.max_position == 0 {
            return Err(MgcotError::Config("max_position must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of the full model.
#[derive(Debug, Clone)]
pub struct Mgcot {
    pub config: ModelConfig,
    pub items: usize,
    pub embeddings: EmbeddingTable,
    /// Equal to `embeddings` unless the tables are split.
    pub global_embeddings: EmbeddingTable,
    pub positions: PositionTable,
    pub global_positions: PositionTable,
    pub target_token: ParamId,
    pub ggnn: Ggnn,
    pub attention: MultiHeadAttention,
    pub fusion: NeighborFusion,
    pub target_attention: TargetAttention,
    pub gcn: Gcn,
    pub projection: ParamId,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B x N`; column `j` scores item `j + 1`.
    pub scores: Var,
    /// Fused current+local session vectors, `B x 2d`.
    pub session: Var,
    /// Target-token outputs h_t′, `B x 2d`.
    pub target: Var,
    pub current: SequenceState,
    pub attention: Option<AttentionOutput>,
    pub global: Option<TargetAttentionOutput>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossBundle {
    pub main: Var,
    pub contrastive: Option<Var>,
    pub total: Var,
}

impl Mgcot {
    pub fn new(config: ModelConfig, items: usize, rng: &mut impl Rng) -> Result<(ParamStore, Mgcot)> {
        config.validate()?;
        if items == 0 {
            return Err(MgcotError::EmptyCorpus("model needs at least one item".into()));
        }
        let d = config.d;
        let mut store = ParamStore::new();
        let embeddings = EmbeddingTable::new(&mut store, "embedding", items, d, rng);
        let global_embeddings = if config.split_embeddings {
            EmbeddingTable::new(&mut store, "global.embedding", items, d, rng)
        } else {
            embeddings
        };
        let positions = PositionTable::new(&mut store, "position", config.max_position, d, rng);
        let bound = 1.0 / (d as f64).sqrt();
        let target_token = store.add_uniform("target_token", (1, d), bound, rng);
        let ggnn = Ggnn::new(&mut store, "ggnn", d, config.ggnn_steps, rng);
        let attention = MultiHeadAttention::new(&mut store, "attention", config.attention(), rng)?;
        let fusion = NeighborFusion::new(&mut store, "fusion", d, rng);
        let projection = store.add_uniform("projection", (2 * d, d), bound, rng);
        let global_positions = PositionTable::new(&mut store, "global.position", config.max_position, d, rng);
        let target_attention = TargetAttention::new(&mut store, "global.target_attention", config.attention(), rng)?;
        let gcn = Gcn::new(&mut store, "global.gcn", d, config.gcn_relu, rng);
        Ok((
            store,
            Mgcot {
                config,
                items,
                embeddings,
                global_embeddings,
                positions,
                global_positions,
                target_token,
                ggnn,
                attention,
                fusion,
                target_attention,
                gcn,
                projection,
            },
        ))
    }

    /// Parameters used only by the global view.
    pub fn global_only_params(&self) -> Vec<ParamId> {
        let mut out = self.target_attention.params();
        out.push(self.gcn.w);
        out.push(self.global_positions.id);
        if self.config.split_embeddings {
            out.push(self.global_embeddings.id);
        }
        out
    }

    fn check_prefixes(&self, prefixes: &[&[u32]]) -> Result<()> {
        if prefixes.is_empty() {
            return Err(MgcotError::Shape("empty batch".into()));
        }
        for p in prefixes {
            if p.is_empty() {
                return Err(MgcotError::Shape("empty prefix".into()));
            }
            if let Some(&bad) = p.iter().find(|&&i| i == 0 || i as usize > self.items) {
                return Err(MgcotError::Shape(format!("item {bad} outside 1..={}", self.items)));
            }
        }
        Ok(())
    }

    /// Current view: `[GGNN state ; pos]` rows plus a trailing target token.
    fn current_sequence(&self, g: &mut Graph, store: &ParamStore, prefixes: &[&[u32]]) -> Result<SequenceState> {
        let graphs: Vec<CurrentSessionGraph> = prefixes.iter().map(|p| CurrentSessionGraph::build(p)).collect();
        let refs: Vec<&CurrentSessionGraph> = graphs.iter().collect();
        let emb = g.param(store, self.embeddings.id);
        let (states, offsets) = self.ggnn.encode(g, store, emb, &refs)?;
        let n_states = g.shape(states).0;
        let token = g.param(store, self.target_token);
        let zero = g.constant(Array2::zeros((1, self.config.d)));
        let source = g.concat_rows(&[states, token, zero])?;

        let lengths: Vec<usize> = prefixes.iter().map(|p| p.len()).collect();
        let layout = padded_layout(&lengths, 1)?;
        let mut src_idx = vec![n_states + 1; layout.rows()];
        let mut pos_idx = vec![0; layout.rows()];
        for (b, &len) in lengths.iter().enumerate() {
            let start = layout.start(b);
            for j in 0..len {
                src_idx[start + j] = offsets[b] + j;
                pos_idx[start + j] = self.positions.row(len - j);
            }
            src_idx[start + len] = n_states;
        }
        let items = g.gather_rows(source, &src_idx)?;
        let table = g.param(store, self.positions.id);
        let pos = g.gather_rows(table, &pos_idx)?;
        let rows = g.concat_cols(&[items, pos])?;
        let mask = g.constant(layout.row_mask());
        let rows = g.mul_col(rows, mask)?;
        SequenceState::new(g, rows, std::rc::Rc::new(layout))
    }

    /// Runs the model on a batch of prefixes. The global view is computed
    /// only when `adjacency` is given; `rng` enables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefixes: &[&[u32]],
        adjacency: Option<&Csr>,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOutput> {
        self.check_prefixes(prefixes)?;
        let ablation = self.config.ablation;
        let current = self.current_sequence(g, store, prefixes)?;

        let (target, attention) = if ablation.no_multi_attention {
            // The H_t row of the last real item.
            let rows: Vec<usize> = current.last_rows().iter().map(|r| r - 1).collect();
            (g.gather_rows(current.rows, &rows)?, None)
        } else {
            let out = self.attention.forward(g, store, &current, rng.as_deref_mut())?;
            (out.target, Some(out))
        };

        let session = if ablation.no_neighbor_sessions || self.config.top_k == 0 {
            target
        } else {
            let local = LocalSessionGraph::build(prefixes, self.config.top_k);
            self.fusion.forward(g, store, target, &local)?
        };

        let proj = g.param(store, self.projection);
        let reduced = g.matmul(session, proj)?;
        let emb = g.param(store, self.embeddings.id);
        let items = g.slice_rows(emb, 1, self.items + 1);
        let scores = g.matmul_t(reduced, items)?;

        let global = match adjacency {
            Some(adj) => Some(self.global_view(g, store, prefixes, adj, target, rng)?),
            None => None,
        };
        Ok(ForwardOutput {
            scores,
            session,
            target,
            current,
            attention,
            global,
        })
    }

    fn global_view(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefixes: &[&[u32]],
        adjacency: &Csr,
        query: Var,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<TargetAttentionOutput> {
        if adjacency.shape() != (self.items + 1, self.items + 1) {
            return Err(MgcotError::Shape(format!(
                "global adjacency {:?} for {} items",
                adjacency.shape(),
                self.items
            )));
        }
        let mut rows = Vec::new();
        let mut row_of = HashMap::new();
        for &item in prefixes.iter().flat_map(|p| p.iter()) {
            row_of.entry(item).or_insert_with(|| {
                rows.push(item as usize);
                rows.len() - 1
            });
        }
        let emb = g.param(store, self.global_embeddings.id);
        let dropout = rng.map(|r| (self.config.adj_dropout, r));
        let encoded = self.gcn.encode_rows(g, store, adjacency, emb, &rows, dropout)?;
        let seq = assemble_global_sequence(
            g,
            store,
            encoded,
            |i| row_of.get(&i).copied(),
            prefixes,
            &self.global_positions,
        )?;
        self.target_attention.forward(g, store, &seq, query)
    }

    /// Forward pass plus losses. `rngs` are the dropout and derangement
    /// streams; without them the pass is deterministic and dropout-free.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prefixes: &[&[u32]],
        labels: &[u32],
        adjacency: Option<&Csr>,
        dropout: Option<&mut ChaCha8Rng>,
        shuffle: &mut ChaCha8Rng,
    ) -> Result<(ForwardOutput, LossBundle)> {
        let beta = self.config.effective_beta();
        let contrast = beta > 0.0 && prefixes.len() >= 2;
        let adjacency = if contrast { adjacency } else { None };
        if contrast && adjacency.is_none() {
            return Err(MgcotError::Config("contrastive training needs the global graph".into()));
        }
        let out = self.forward(g, store, prefixes, adjacency, dropout)?;
        let main = main_loss(g, out.scores, labels)?;
        let contrastive = match &out.global {
            Some(glob) => Some(contrastive_loss(g, out.session, glob.pooled, self.config.tau, shuffle)?.0),
            None => None,
        };
        let total = total_loss(g, main, contrastive, beta)?;
        Ok((out, LossBundle { main, contrastive, total }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// Position of the example in the evaluated set.
    pub example: usize,
    pub prefix: Vec<u32>,
    pub head: usize,
    pub alpha: f64,
    /// Row-major `(L + 1) x (L + 1)` weights; the last row/column is the
    /// target token.
    pub weights: Vec<Vec<f64>>,
}

/// Per-head attention weights of a forward pass, one record per example.
pub fn attention_records(
    g: &Graph,
    out: &ForwardOutput,
    prefixes: &[&[u32]],
    first_example: usize,
) -> Vec<AttentionRecord> {
    let Some(att) = &out.attention else {
        return Vec::new();
    };
    let mut records = Vec::new();
    for (b, prefix) in prefixes.iter().enumerate() {
        for (h, (&head, &alpha)) in att.heads.iter().zip(&att.alphas).enumerate() {
            let probs = &g.attention_probs(head).expect("attention node")[b];
            records.push(AttentionRecord {
                example: first_example + b,
                prefix: prefix.to_vec(),
                head: h,
                alpha: g.value(alpha)[[b, 0]],
                weights: probs.rows().into_iter().map(|r| r.to_vec()).collect(),
            });
        }
    }
    records
}

#[cfg(test)]
mod tests;
