use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MgcotError, Result};
use crate::graphs::LocalSessionGraph;
use crate::params::{ParamId, ParamStore};
use ndarray::Array2;

/// Gated fusion of each session vector with an attention summary of its
/// Jaccard neighbors in the batch:
///
/// ```text
/// a_ij = s_i·s_j / sqrt(2d) + ln J_ij,  p = softmax_j(a_ij),  n_i = Σ p_ij s_j
/// out_i = s_i + σ([s_i ; n_i] W + b) ⊙ n_i
/// ```
#[derive(Debug, Clone)]
pub struct NeighborFusion {
    width: usize,
    gate_w: ParamId,
    gate_b: ParamId,
}

impl NeighborFusion {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) -> Self {
        let width = 2 * d;
        let bound = 1.0 / (d as f64).sqrt();
        NeighborFusion {
            width,
            gate_w: store.add_uniform(format!("{prefix}.gate_w"), (2 * width, width), bound, rng),
            gate_b: store.add_uniform(format!("{prefix}.gate_b"), (1, width), bound, rng),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gate_w, self.gate_b]
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sessions: Var,
        local: &LocalSessionGraph,
    ) -> Result<Var> {
        let (b, w) = g.shape(sessions);
        if w != self.width || local.neighbors.len() != b {
            return Err(MgcotError::Shape(format!(
                "fusion over {b}x{w} sessions with {} neighbor lists, width {}",
                local.neighbors.len(),
                self.width
            )));
        }
        let mut mask = Array2::from_elem((b, b), false);
        let mut prior = Array2::zeros((b, b));
        for (i, list) in local.neighbors.iter().enumerate() {
            for n in list {
                if n.index >= b {
                    return Err(MgcotError::Shape(format!("neighbor {} outside batch", n.index)));
                }
                mask[[i, n.index]] = true;
                prior[[i, n.index]] = n.jaccard.ln();
            }
        }
        if !mask.iter().any(|&m| m) {
            return Ok(sessions);
        }
        let sim = g.matmul_t(sessions, sessions)?;
        let sim = g.scale(sim, 1.0 / (self.width as f64).sqrt());
        let prior = g.constant(prior);
        let logits = g.add(sim, prior)?;
        let p = g.masked_softmax_rows(logits, &mask)?;
        let context = g.matmul(p, sessions)?;
        let joined = g.concat_cols(&[sessions, context])?;
        let (gw, gb) = (g.param(store, self.gate_w), g.param(store, self.gate_b));
        let gate = g.affine(joined, gw, gb)?;
        let gate = g.sigmoid(gate);
        let gated = g.mul(gate, context)?;
        g.add(sessions, gated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_param_gradients;
    use crate::graphs::Neighbor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn setup(d: usize) -> (ParamStore, NeighborFusion) {
        let mut store = ParamStore::new();
        let f = NeighborFusion::new(&mut store, "fuse", d, &mut ChaCha8Rng::seed_from_u64(3));
        (store, f)
    }

    fn graph(lists: &[&[(usize, f64)]]) -> LocalSessionGraph {
        LocalSessionGraph {
            neighbors: lists
                .iter()
                .map(|l| l.iter().map(|&(index, jaccard)| Neighbor { index, jaccard }).collect())
                .collect(),
        }
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Step-by-step scalar recomputation of the fusion rule.
    fn oracle(s: &Array2<f64>, local: &LocalSessionGraph, w: &Array2<f64>, bias: &Array2<f64>) -> Array2<f64> {
        let width = s.ncols();
        let mut out = s.clone();
        for (i, list) in local.neighbors.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let logits: Vec<f64> = list
                .iter()
                .map(|n| {
                    let mut dot = 0.0;
                    for c in 0..width {
                        dot += s[[i, c]] * s[[n.index, c]];
                    }
                    dot / (width as f64).sqrt() + n.jaccard.ln()
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; width];
            for (n, e) in list.iter().zip(&exps) {
                for c in 0..width {
                    ctx[c] += e / total * s[[n.index, c]];
                }
            }
            for c in 0..width {
                let mut z = bias[[0, c]];
                for k in 0..width {
                    z += s[[i, k]] * w[[k, c]] + ctx[k] * w[[width + k, c]];
                }
                out[[i, c]] = s[[i, c]] + sigmoid(z) * ctx[c];
            }
        }
        out
    }

    fn run(store: &ParamStore, f: &NeighborFusion, s: &Array2<f64>, local: &LocalSessionGraph) -> Array2<f64> {
        let mut g = Graph::new();
        let v = g.constant(s.clone());
        let out = f.forward(&mut g, store, v, local).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn sessions_without_neighbors_pass_through() {
        let (store, f) = setup(2);
        let s = random((3, 4), 1);
        let out = run(&store, &f, &s, &graph(&[&[(1, 0.5)], &[], &[(0, 0.2), (1, 0.4)]]));
        assert_eq!(out.row(1), s.row(1));
        let none = run(&store, &f, &s, &graph(&[&[], &[], &[]]));
        assert_eq!(none, s);
    }

    #[test]
    fn single_neighbor_context_is_that_session() {
        let (store, f) = setup(2);
        let s = random((2, 4), 2);
        let local = graph(&[&[(1, 0.3)], &[]]);
        let out = run(&store, &f, &s, &local);
        let expected = oracle(&s, &local, store.value(f.gate_w), store.value(f.gate_b));
        assert!((&out - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn batch_of_four_matches_scalar_oracle() {
        let (store, f) = setup(3);
        let s = random((4, 6), 4);
        let local = graph(&[&[(2, 0.5), (1, 0.25)], &[(0, 0.25)], &[(0, 0.5), (3, 1.0 / 3.0)], &[]]);
        let out = run(&store, &f, &s, &local);
        let expected = oracle(&s, &local, store.value(f.gate_w), store.value(f.gate_b));
        assert!((&out - &expected).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, f) = setup(2);
        let sid = store.add("sessions", random((4, 4), 5));
        let local = graph(&[&[(2, 0.5), (1, 0.25)], &[(0, 0.25)], &[(0, 0.5), (3, 0.2)], &[]]);
        let w = random((4, 4), 6);
        let report = check_param_gradients(&store, &[], 1e-5, |g, store| {
            let s = g.param(store, sid);
            let out = f.forward(g, store, s, &local)?;
            let c = g.constant(w.clone());
            let y = g.mul(out, c)?;
            Ok(g.mean(y))
        })
        .unwrap();
        assert!(report.worst_relative_error < 1e-4, "{report:?}");
    }
}
