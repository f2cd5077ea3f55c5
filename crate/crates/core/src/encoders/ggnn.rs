use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{MgcotError, Result};
use crate::graphs::CurrentSessionGraph;
use crate::params::{ParamId, ParamStore};
use crate::sparse::Csr;

/// Gated graph network over session graphs:
///
/// ```text
/// a = [A_in (H W_in + b_in) ; A_out (H W_out + b_out)]
/// z = σ(a W_z + H U_z + b_z)      r = σ(a W_r + H U_r + b_r)
/// h̃ = tanh(a W_h + (r ⊙ H) U_h + b_h)
/// H' = H + z ⊙ (h̃ − H)
/// ```
#[derive(Debug, Clone)]
pub struct Ggnn {
    pub steps: usize,
    d: usize,
    w_in: ParamId,
    b_in: ParamId,
    w_out: ParamId,
    b_out: ParamId,
    w_z: ParamId,
    u_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    u_r: ParamId,
    b_r: ParamId,
    w_h: ParamId,
    u_h: ParamId,
    b_h: ParamId,
}

impl Ggnn {
    pub fn new(store: &mut ParamStore, prefix: &str, d: usize, steps: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut u = |name: &str, shape| store.add_uniform(format!("{prefix}.{name}"), shape, bound, rng);
        Ggnn {
            steps,
            d,
            w_in: u("w_in", (d, d)),
            b_in: u("b_in", (1, d)),
            w_out: u("w_out", (d, d)),
            b_out: u("b_out", (1, d)),
            w_z: u("w_z", (2 * d, d)),
            u_z: u("u_z", (d, d)),
            b_z: u("b_z", (1, d)),
            w_r: u("w_r", (2 * d, d)),
            u_r: u("u_r", (d, d)),
            b_r: u("b_r", (1, d)),
            w_h: u("w_h", (2 * d, d)),
            u_h: u("u_h", (d, d)),
            b_h: u("b_h", (1, d)),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![
            self.w_in, self.b_in, self.w_out, self.b_out, self.w_z, self.u_z, self.b_z, self.w_r,
            self.u_r, self.b_r, self.w_h, self.u_h, self.b_h,
        ]
    }

    /// Encodes a batch of session graphs. Returns the per-position states,
    /// sessions stacked in order (`Σ L_i x d`), and the start offset of each
    /// session in that stack.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        embeddings: Var,
        graphs: &[&CurrentSessionGraph],
    ) -> Result<(Var, Vec<usize>)> {
        let mut items = Vec::new();
        let mut node_offset = Vec::with_capacity(graphs.len());
        for cg in graphs {
            node_offset.push(items.len());
            items.extend(cg.nodes.iter().map(|&i| i as usize));
        }
        let a_in: Vec<_> = graphs.iter().map(|cg| &cg.a_in).collect();
        let a_out: Vec<_> = graphs.iter().map(|cg| &cg.a_out).collect();
        let a_in = Rc::new(Csr::block_diagonal(&a_in));
        let a_out = Rc::new(Csr::block_diagonal(&a_out));
        let h0 = g.gather_rows(embeddings, &items)?;
        let nodes = ggnn_propagate(g, store, self, h0, a_in, a_out)?;

        let mut positions = Vec::new();
        let mut pos_offset = Vec::with_capacity(graphs.len());
        for (cg, &off) in graphs.iter().zip(&node_offset) {
            pos_offset.push(positions.len());
            positions.extend(cg.alias.iter().map(|&a| off + a));
        }
        Ok((g.gather_rows(nodes, &positions)?, pos_offset))
    }
}

/// Runs `ggnn.steps` propagation steps from node states `h` under the given
/// (block-diagonal) adjacency.
pub fn ggnn_propagate(
    g: &mut Graph,
    store: &ParamStore,
    ggnn: &Ggnn,
    mut h: Var,
    a_in: Rc<Csr>,
    a_out: Rc<Csr>,
) -> Result<Var> {
    let n = g.shape(h).0;
    if g.shape(h).1 != ggnn.d || a_in.shape() != (n, n) || a_out.shape() != (n, n) {
        return Err(MgcotError::Shape(format!(
            "ggnn states {:?} with adjacency {:?}",
            g.shape(h),
            a_in.shape()
        )));
    }
    let p = |g: &mut Graph, id| g.param(store, id);
    for _ in 0..ggnn.steps {
        let (w_in, b_in) = (p(g, ggnn.w_in), p(g, ggnn.b_in));
        let m_in = g.affine(h, w_in, b_in)?;
        let m_in = g.spmm(a_in.clone(), m_in)?;
        let (w_out, b_out) = (p(g, ggnn.w_out), p(g, ggnn.b_out));
        let m_out = g.affine(h, w_out, b_out)?;
        let m_out = g.spmm(a_out.clone(), m_out)?;
        let a = g.concat_cols(&[m_in, m_out])?;

        let gate = |g: &mut Graph, w, u, b, hh: Var| -> Result<Var> {
            let (w, u, b) = (p(g, w), p(g, u), p(g, b));
            let x = g.affine(a, w, b)?;
            let y = g.matmul(hh, u)?;
            g.add(x, y)
        };
        let z = gate(g, ggnn.w_z, ggnn.u_z, ggnn.b_z, h)?;
        let z = g.sigmoid(z);
        let r = gate(g, ggnn.w_r, ggnn.u_r, ggnn.b_r, h)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cand = gate(g, ggnn.w_h, ggnn.u_h, ggnn.b_h, rh)?;
        let cand = g.tanh(cand);
        let delta = g.sub(cand, h)?;
        let step = g.mul(z, delta)?;
        h = g.add(h, step)?;
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EmbeddingTable;
    use crate::gradcheck::check_param_gradients;
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(steps: usize) -> (ParamStore, EmbeddingTable, Ggnn) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e = EmbeddingTable::new(&mut store, "emb", 8, 3, &mut rng);
        let ggnn = Ggnn::new(&mut store, "ggnn", 3, steps, &mut rng);
        (store, e, ggnn)
    }

    fn encode(store: &ParamStore, e: &EmbeddingTable, ggnn: &Ggnn, sessions: &[&[u32]]) -> (Array2<f64>, Vec<usize>) {
        let graphs: Vec<_> = sessions.iter().map(|s| CurrentSessionGraph::build(s)).collect();
        let refs: Vec<_> = graphs.iter().collect();
        let mut g = Graph::new();
        let emb = g.param(store, e.id);
        let (out, off) = ggnn.encode(&mut g, store, emb, &refs).unwrap();
        (g.value(out).clone(), off)
    }

    #[test]
    fn zero_steps_is_identity() {
        let (store, e, ggnn) = setup(0);
        let (out, _) = encode(&store, &e, &ggnn, &[&[4]]);
        assert_eq!(out.row(0), store.value(e.id).row(4));
    }

    #[test]
    fn isolated_node_output_is_finite() {
        let (store, e, ggnn) = setup(2);
        let (out, _) = encode(&store, &e, &ggnn, &[&[4]]);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_ne!(out.row(0), store.value(e.id).row(4));
    }

    #[test]
    fn repeated_items_share_state() {
        let (store, e, ggnn) = setup(1);
        let (out, off) = encode(&store, &e, &ggnn, &[&[2, 5], &[1, 3, 1]]);
        assert_eq!(off, vec![0, 2]);
        assert_eq!(out.nrows(), 5);
        assert_eq!(out.row(2), out.row(4));
        assert_ne!(out.row(2), out.row(3));
    }

    #[test]
    fn batching_does_not_mix_sessions() {
        let (store, e, ggnn) = setup(2);
        let (alone, _) = encode(&store, &e, &ggnn, &[&[1, 3, 1, 6]]);
        let (batched, off) = encode(&store, &e, &ggnn, &[&[2, 5, 7], &[1, 3, 1, 6]]);
        let part = batched.slice(ndarray::s![off[1].., ..]);
        assert!((&part - &alone).iter().all(|d| d.abs() < 1e-14));
    }

    #[test]
    fn relabeling_nodes_permutes_outputs() {
        let (store, e, ggnn) = setup(2);
        let cg = CurrentSessionGraph::build(&[1, 2, 3, 2, 4, 1]);
        let n = cg.num_nodes();
        let perm = [2, 0, 3, 1];
        let permute = |m: &Array2<f64>| Array2::from_shape_fn((n, n), |(i, j)| m[[perm[i], perm[j]]]);
        let emb = store.value(e.id);
        let h0 = Array2::from_shape_fn((n, 3), |(i, c)| emb[[cg.nodes[i] as usize, c]]);
        let h0p = Array2::from_shape_fn((n, 3), |(i, c)| h0[[perm[i], c]]);

        let run = |h: Array2<f64>, a_in: Array2<f64>, a_out: Array2<f64>| {
            let mut g = Graph::new();
            let h = g.constant(h);
            let out = ggnn_propagate(
                &mut g,
                &store,
                &ggnn,
                h,
                Rc::new(Csr::from_dense(a_in.view())),
                Rc::new(Csr::from_dense(a_out.view())),
            )
            .unwrap();
            g.value(out).clone()
        };
        let base = run(h0, cg.a_in.clone(), cg.a_out.clone());
        let moved = run(h0p, permute(&cg.a_in), permute(&cg.a_out));
        for i in 0..n {
            assert_eq!(moved.row(i), base.row(perm[i]));
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (store, e, ggnn) = setup(2);
        let graphs = [CurrentSessionGraph::build(&[1, 2, 3, 2]), CurrentSessionGraph::build(&[5, 6])];
        let refs: Vec<_> = graphs.iter().collect();
        let w = Array2::from_shape_fn((6, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
        let report = check_param_gradients(&store, &[], 1e-5, |g, store| {
            let emb = g.param(store, e.id);
            let (out, _) = ggnn.encode(g, store, emb, &refs)?;
            let c = g.constant(w.clone());
            let y = g.mul(out, c)?;
            Ok(g.mean(y))
        })
        .unwrap();
        assert!(report.worst_relative_error < 1e-4, "{report:?}");
    }
}
