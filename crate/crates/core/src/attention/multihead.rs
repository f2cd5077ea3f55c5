use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{learned_alpha, AttentionConfig, SequenceState};
use crate::autodiff::{Graph, Var};
use crate::error::{MgcotError, Result};
use crate::params::{ParamId, ParamStore};

/// Multi-head α-entmax self-attention with a position-wise feed-forward
/// block. The last valid position of every segment is the target token.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub config: AttentionConfig,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    alpha_w: Vec<ParamId>,
    alpha_b: Vec<ParamId>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln_gain: ParamId,
    ln_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Per-position outputs, padding rows zero.
    pub sequence: SequenceState,
    /// Output at the target-token position, `segments x 2d`.
    pub target: Var,
    /// One attention node per head; see [`Graph::attention_probs`].
    pub heads: Vec<Var>,
    /// Per-head α, each `segments x 1`.
    pub alphas: Vec<Var>,
}

impl MultiHeadAttention {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: AttentionConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (w, dk) = (config.width(), config.head_dim());
        let bound = 1.0 / (config.d as f64).sqrt();
        let mut u = |name: &str, shape| store.add_uniform(format!("{prefix}.{name}"), shape, bound, rng);
        let wq = u("wq", (w, w));
        let bq = u("bq", (1, w));
        let wk = u("wk", (w, w));
        let bk = u("bk", (1, w));
        let wv = u("wv", (w, w));
        let bv = u("bv", (1, w));
        let mut alpha_w = Vec::new();
        let mut alpha_b = Vec::new();
        for h in 0..config.heads {
            alpha_w.push(u(&format!("alpha_w{h}"), (dk, 1)));
            alpha_b.push(u(&format!("alpha_b{h}"), (1, 1)));
        }
        let w1 = u("ffn_w1", (w, w));
        let b1 = u("ffn_b1", (1, w));
        let w2 = u("ffn_w2", (w, w));
        let b2 = u("ffn_b2", (1, w));
        let ln_gain = store.add(format!("{prefix}.ln_gain"), ndarray::Array2::ones((1, w)));
        let ln_bias = store.add(format!("{prefix}.ln_bias"), ndarray::Array2::zeros((1, w)));
        Ok(MultiHeadAttention {
            config,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            alpha_w,
            alpha_b,
            w1,
            b1,
            w2,
            b2,
            ln_gain,
            ln_bias,
        })
    }

    /// All parameter ids, in registration order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv];
        for (w, b) in self.alpha_w.iter().zip(&self.alpha_b) {
            out.extend([*w, *b]);
        }
        out.extend([self.w1, self.b1, self.w2, self.b2, self.ln_gain, self.ln_bias]);
        out
    }

    /// `dropout` is active only when an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: &SequenceState,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<AttentionOutput> {
        let cfg = &self.config;
        let (rows, width) = g.shape(input.rows);
        if width != cfg.width() {
            return Err(MgcotError::Shape(format!(
                "attention input width {width}, expected {}",
                cfg.width()
            )));
        }
        if input.layout.lengths.contains(&0) {
            return Err(MgcotError::EmptyAttention);
        }
        debug_assert_eq!(rows, input.layout.rows());
        let p = |g: &mut Graph, id| g.param(store, id);
        let x = input.rows;

        let (wq, bq) = (p(g, self.wq), p(g, self.bq));
        let q = g.affine(x, wq, bq)?;
        let q = g.relu(q);
        let (wk, bk) = (p(g, self.wk), p(g, self.bk));
        let k = g.affine(x, wk, bk)?;
        let (wv, bv) = (p(g, self.wv), p(g, self.bv));
        let v = g.affine(x, wv, bv)?;

        let targets_in = g.gather_rows(x, &input.last_rows())?;
        let dk = cfg.head_dim();
        let scale = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut alphas = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = (h * dk, (h + 1) * dk);
            let t = g.slice_cols(targets_in, cols.0, cols.1);
            let (aw, ab) = (p(g, self.alpha_w[h]), p(g, self.alpha_b[h]));
            let alpha = learned_alpha(g, t, aw, ab)?;
            let qh = g.slice_cols(q, cols.0, cols.1);
            let kh = g.slice_cols(k, cols.0, cols.1);
            let vh = g.slice_cols(v, cols.0, cols.1);
            let o = g.segment_attention(
                qh,
                kh,
                vh,
                alpha,
                input.layout.clone(),
                scale,
                cfg.entmax_iters,
            )?;
            heads.push(o);
            alphas.push(alpha);
        }
        let attended = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };

        let (w1, b1, w2, b2) = (p(g, self.w1), p(g, self.b1), p(g, self.w2), p(g, self.b2));
        let f = g.affine(attended, w1, b1)?;
        let f = g.relu(f);
        let f = g.affine(f, w2, b2)?;
        let f = match dropout {
            Some(rng) => g.dropout(f, cfg.dropout, rng)?,
            None => f,
        };
        let mut out = g.add(attended, f)?;
        if cfg.layer_norm {
            out = g.layer_norm_rows(out, 1e-5);
            let (gain, bias) = (p(g, self.ln_gain), p(g, self.ln_bias));
            out = g.mul_row(out, gain)?;
            out = g.add_row(out, bias)?;
        }
        let mask = g.constant(input.layout.row_mask());
        let out = g.mul_col(out, mask)?;
        let sequence = SequenceState::new(g, out, input.layout.clone())?;
        let target = g.gather_rows(out, &sequence.last_rows())?;
        Ok(AttentionOutput {
            sequence,
            target,
            heads,
            alphas,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::SegmentLayout;
    use crate::gradcheck::check_param_gradients;
    use ndarray::Array2;
    use rand::SeedableRng;
    use std::rc::Rc;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut r = rng(seed);
        Array2::from_shape_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    /// Packs per-session rows into a padded layout of the given width.
    fn padded(sessions: &[Array2<f64>], width: usize, fill: f64) -> (Array2<f64>, SegmentLayout) {
        let cols = sessions[0].ncols();
        let mut out = Array2::from_elem((sessions.len() * width, cols), fill);
        for (b, s) in sessions.iter().enumerate() {
            out.slice_mut(ndarray::s![b * width..b * width + s.nrows(), ..]).assign(s);
        }
        let layout = SegmentLayout::new(width, sessions.iter().map(|s| s.nrows()).collect()).unwrap();
        (out, layout)
    }

    fn setup(d: usize, heads: usize, layer_norm: bool) -> (ParamStore, MultiHeadAttention) {
        let mut store = ParamStore::new();
        let mut cfg = AttentionConfig::new(d, heads);
        cfg.layer_norm = layer_norm;
        let mha = MultiHeadAttention::new(&mut store, "mha", cfg, &mut rng(1)).unwrap();
        (store, mha)
    }

    fn run(
        store: &ParamStore,
        mha: &MultiHeadAttention,
        x: Array2<f64>,
        layout: SegmentLayout,
    ) -> (Graph, AttentionOutput) {
        let mut g = Graph::new();
        let rows = g.constant(x);
        let state = SequenceState::new(&g, rows, Rc::new(layout)).unwrap();
        let out = mha.forward(&mut g, store, &state, None).unwrap();
        (g, out)
    }

    #[test]
    fn two_position_rows_are_distributions() {
        let (store, mha) = setup(3, 2, true);
        let (x, layout) = padded(&[random((2, 6), 2)], 2, 0.0);
        let (g, out) = run(&store, &mha, x, layout);
        for &h in &out.heads {
            let probs = &g.attention_probs(h).unwrap()[0];
            assert_eq!(probs.dim(), (2, 2));
            for row in probs.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_weights_give_uniform_attention_and_identity_ffn() {
        let (mut store, mha) = setup(2, 2, false);
        for id in mha.params() {
            store.value_mut(id).fill(0.0);
        }
        let sessions = [random((3, 4), 3), random((2, 4), 4)];
        let (x, layout) = padded(&sessions, 4, 0.0);
        let (g, out) = run(&store, &mha, x, layout);
        for &h in &out.heads {
            for (b, probs) in g.attention_probs(h).unwrap().iter().enumerate() {
                let n = sessions[b].nrows() as f64;
                assert!(probs.iter().all(|&p| (p - 1.0 / n).abs() < 1e-9));
            }
        }
        // With V = 0 the attention output is zero, and so is the FFN residual sum.
        assert!(g.value(out.sequence.rows).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ffn_output_equals_residual_when_ffn_weights_vanish() {
        let (mut store, mha) = setup(2, 1, false);
        for name in ["ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"] {
            store.value_mut(store.find(&format!("mha.{name}")).unwrap()).fill(0.0);
        }
        let (x, layout) = padded(&[random((3, 4), 5)], 3, 0.0);
        let mut g = Graph::new();
        let rows = g.constant(x);
        let state = SequenceState::new(&g, rows, Rc::new(layout)).unwrap();
        let out = mha.forward(&mut g, &store, &state, None).unwrap();
        assert_eq!(g.value(out.sequence.rows), g.value(out.heads[0]));
    }

    #[test]
    fn padding_amount_does_not_change_outputs() {
        let (store, mha) = setup(3, 2, true);
        let sessions = [random((4, 6), 6), random((2, 6), 7), random((1, 6), 8)];
        let (x0, l0) = padded(&sessions, 4, 0.0);
        let (x5, l5) = padded(&sessions, 9, 3.7);
        let (g0, o0) = run(&store, &mha, x0, l0);
        let (g5, o5) = run(&store, &mha, x5, l5);
        let t0 = g0.value(o0.target);
        let t5 = g5.value(o5.target);
        assert!((t0 - t5).iter().all(|d| d.abs() < 1e-12));
        for (b, s) in sessions.iter().enumerate() {
            for j in 0..s.nrows() {
                let a = g0.value(o0.sequence.rows).row(b * 4 + j).to_owned();
                let c = g5.value(o5.sequence.rows).row(b * 9 + j).to_owned();
                assert!((&a - &c).iter().all(|d| d.abs() < 1e-12));
            }
            for j in s.nrows()..9 {
                assert!(g5.value(o5.sequence.rows).row(b * 9 + j).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn alphas_lie_in_open_interval() {
        let (store, mha) = setup(4, 4, true);
        let (x, layout) = padded(&[random((5, 8), 9), random((3, 8), 10)], 5, 0.0);
        let (g, out) = run(&store, &mha, x, layout);
        for &a in &out.alphas {
            assert!(g.value(a).iter().all(|&v| v > 1.0 && v < 2.0));
        }
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let (store, mha) = setup(3, 1, true);
        let mut g = Graph::new();
        let rows = g.constant(Array2::zeros((2, 5)));
        let state = SequenceState::new(&g, rows, Rc::new(SegmentLayout::new(2, vec![2]).unwrap())).unwrap();
        assert!(matches!(
            mha.forward(&mut g, &store, &state, None),
            Err(MgcotError::Shape(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, mha) = setup(2, 2, true);
        let sessions = [random((3, 4), 11), random((2, 4), 12)];
        let (x, layout) = padded(&sessions, 4, 0.0);
        let layout = Rc::new(layout);
        let xid = store.add("input", x);
        let w = random((8, 4), 13);
        let report = check_param_gradients(&store, &[], 1e-5, |g, store| {
            let rows = g.param(store, xid);
            let state = SequenceState::new(g, rows, layout.clone())?;
            let out = mha.forward(g, store, &state, None)?;
            let c = g.constant(w.clone());
            let y = g.mul(out.sequence.rows, c)?;
            let t = g.mean(out.target);
            let m = g.mean(y);
            g.add(m, t)
        })
        .unwrap();
        assert!(report.worst_relative_error < 1e-4, "{report:?}");
    }
}
