//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation eagerly (values are computed when the
//! node is created) and [`Graph::backward`] walks the tape in reverse. All
//! values are 2-D; vectors are `1 x n` rows and scalars are `1 x 1`.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::attention::entmax::{entmax_backward, entmax_bisect};
use crate::error::{MgcotError, Result};
use crate::params::{ParamId, ParamStore};
use crate::sparse::Csr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Ln(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    SpMM(Rc<Csr>, Var),
    RowSum(Var),
    Mean(Var),
    MulCol(Var, Var),
    SoftmaxRows(Var),
    SegmentEntmax { scores: Var, alpha: Var, layout: Rc<SegmentLayout> },
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        alpha: Var,
        layout: Rc<SegmentLayout>,
        scale: f64,
        scores: Vec<Array2<f64>>,
        probs: Vec<Array2<f64>>,
    },
    EntmaxRows { scores: Var, alpha: Var },
    LayerNormRows { x: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Array2<f64> },
}

/// Padded sequence layout: segment `b` owns rows `b * width .. (b + 1) * width`
/// of which the first `lengths[b]` are valid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    pub width: usize,
    pub lengths: Vec<usize>,
}

impl SegmentLayout {
    pub fn new(width: usize, lengths: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > width) {
            return Err(MgcotError::Shape(format!(
                "segment length {bad} exceeds width {width}"
            )));
        }
        Ok(SegmentLayout { width, lengths })
    }

    pub fn segments(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.width * self.lengths.len()
    }

    pub fn start(&self, b: usize) -> usize {
        b * self.width
    }

    /// Row indices of all valid positions, segment by segment.
    pub fn valid_rows(&self) -> Vec<usize> {
        (0..self.segments())
            .flat_map(|b| self.start(b)..self.start(b) + self.lengths[b])
            .collect()
    }

    /// `rows x 1` indicator of valid positions.
    pub fn row_mask(&self) -> Array2<f64> {
        let mut m = Array2::zeros((self.rows(), 1));
        for r in self.valid_rows() {
            m[[r, 0]] = 1.0;
        }
        m
    }

    /// `segments x rows` matrix summing the valid rows of each segment.
    pub fn pooling(&self) -> Csr {
        let trip: Vec<_> = (0..self.segments())
            .flat_map(|b| (self.start(b)..self.start(b) + self.lengths[b]).map(move |r| (b, r, 1.0)))
            .collect();
        Csr::from_triplets(self.segments(), self.rows(), &trip)
    }
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id).and_then(|v| self.grads[v.0].as_ref())
    }

    /// Moves out the gradient of every parameter that took part in the graph.
    pub fn into_param_grads(mut self) -> HashMap<ParamId, Array2<f64>> {
        let mut out = HashMap::new();
        for (id, v) in self.params {
            if let Some(g) = self.grads[v.0].take() {
                out.insert(id, g);
            }
        }
        out
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> MgcotError {
    MgcotError::Shape(format!("{what}: {a:?} vs {b:?}"))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = if p.trainable {
            self.input(p.value.clone())
        } else {
            self.constant(p.value.clone())
        };
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let value = self.value(a).dot(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(shape_err("matmul_t", sa, sb));
        }
        let value = self.value(a).dot(&self.value(b).t());
        Ok(self.push(value, Op::MatMulT(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.push(value, Op::Transpose(a), &[a])
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(what, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `1 x c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("add_row", sa, sr));
        }
        let value = self.value(a) + self.value(row);
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// Multiplies every row of `a` elementwise by a `1 x c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (sa, sr) = (self.shape(a), self.shape(row));
        if sr != (1, sa.1) {
            return Err(shape_err("mul_row", sa, sr));
        }
        let value = self.value(a) * self.value(row);
        Ok(self.push(value, Op::MulRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `affine(x) = x W + b` with `b` a `1 x c` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add_row(xw, b)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        self.push(value, Op::Tanh(a), &[a])
    }

    /// `ln(1 + e^x)`, so `-ln σ(x) = softplus(-x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(softplus);
        self.push(value, Op::Softplus(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Ln(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("checked shapes");
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("checked shapes");
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(value, Op::SliceRows(a, start, end), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(value, Op::SliceCols(a, start, end), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let src = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.nrows()) {
            return Err(MgcotError::Shape(format!(
                "gather row {bad} out of {} rows",
                src.nrows()
            )));
        }
        let value = src.select(Axis(0), index);
        Ok(self.push(value, Op::GatherRows(a, index.to_vec()), &[a]))
    }

    /// Sparse constant times dense node.
    pub fn spmm(&mut self, m: Rc<Csr>, a: Var) -> Result<Var> {
        let sa = self.shape(a);
        if m.shape().1 != sa.0 {
            return Err(shape_err("spmm", m.shape(), sa));
        }
        let value = m.matmul(self.value(a).view());
        Ok(self.push(value, Op::SpMM(m, a), &[a]))
    }

    /// Sum over columns: `r x c -> r x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(value, Op::RowSum(a), &[a])
    }

    /// Mean of all entries as a `1 x 1` node.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a).mean().unwrap_or(0.0);
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a), &[a])
    }

    /// Multiplies every row of `a` by the matching entry of an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (sa, sc) = (self.shape(a), self.shape(col));
        if sc != (sa.0, 1) {
            return Err(shape_err("mul_col", sa, sc));
        }
        let value = self.value(a) * self.value(col);
        Ok(self.push(value, Op::MulCol(a, col), &[a, col]))
    }

    /// Row-wise softmax over the entries where `mask` is true; the rest are 0.
    /// A fully masked row comes out all zero.
    pub fn masked_softmax_rows(&mut self, a: Var, mask: &Array2<bool>) -> Result<Var> {
        let sa = self.shape(a);
        if mask.dim() != sa {
            return Err(shape_err("masked_softmax mask", sa, mask.dim()));
        }
        let mut value = Array2::zeros(sa);
        for (i, src) in self.value(a).rows().into_iter().enumerate() {
            let max = src
                .iter()
                .zip(mask.row(i))
                .filter(|p| *p.1)
                .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for j in 0..sa.1 {
                if mask[[i, j]] {
                    let e = (src[j] - max).exp();
                    value[[i, j]] = e;
                    total += e;
                }
            }
            value.row_mut(i).mapv_inplace(|x| x / total);
        }
        Ok(self.push(value, Op::SoftmaxRows(a), &[a]))
    }

    /// α-entmax of an `rows x 1` score column within each segment of
    /// `layout`, with one α per segment (`segments x 1`). Padding rows are 0.
    pub fn segment_entmax(
        &mut self,
        scores: Var,
        alpha: Var,
        layout: Rc<SegmentLayout>,
        iters: usize,
    ) -> Result<Var> {
        let (ss, sa) = (self.shape(scores), self.shape(alpha));
        if ss != (layout.rows(), 1) || sa != (layout.segments(), 1) {
            return Err(shape_err("segment_entmax", ss, sa));
        }
        let mut value = Array2::zeros(ss);
        for b in 0..layout.segments() {
            let (start, len) = (layout.start(b), layout.lengths[b]);
            let z: Vec<f64> = (start..start + len).map(|r| self.value(scores)[[r, 0]]).collect();
            let p = entmax_bisect(&z, None, self.value(alpha)[[b, 0]], iters)?;
            for (k, pk) in p.into_iter().enumerate() {
                value[[start + k, 0]] = pk;
            }
        }
        Ok(self.push(
            value,
            Op::SegmentEntmax {
                scores,
                alpha,
                layout,
            },
            &[scores, alpha],
        ))
    }

    /// Scaled dot-product α-entmax attention inside each segment:
    /// `entmax(scale · Q Kᵀ, α_b) V` over the valid rows, zero on padding.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        alpha: Var,
        layout: Rc<SegmentLayout>,
        scale: f64,
        iters: usize,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq != sk || sq.0 != layout.rows() || sv.0 != layout.rows() {
            return Err(shape_err("segment_attention", sq, sv));
        }
        if self.shape(alpha) != (layout.segments(), 1) {
            return Err(shape_err("segment_attention alpha", (layout.segments(), 1), self.shape(alpha)));
        }
        let mut value = Array2::zeros((sq.0, sv.1));
        let mut all_scores = Vec::with_capacity(layout.segments());
        let mut all_probs = Vec::with_capacity(layout.segments());
        for b in 0..layout.segments() {
            let (start, len) = (layout.start(b), layout.lengths[b]);
            let rows = s![start..start + len, ..];
            let qb = self.value(q).slice(rows);
            let kb = self.value(k).slice(rows);
            let scores = qb.dot(&kb.t()) * scale;
            let a = self.value(alpha)[[b, 0]];
            let mut probs = Array2::zeros((len, len));
            for i in 0..len {
                let p = entmax_bisect(&scores.row(i).to_vec(), None, a, iters)?;
                probs.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
            }
            value
                .slice_mut(rows)
                .assign(&probs.dot(&self.value(v).slice(rows)));
            all_scores.push(scores);
            all_probs.push(probs);
        }
        Ok(self.push(
            value,
            Op::SegmentAttention {
                q,
                k,
                v,
                alpha,
                layout,
                scale,
                scores: all_scores,
                probs: all_probs,
            },
            &[q, k, v, alpha],
        ))
    }

    /// Attention distributions of a [`Graph::segment_attention`] node, one
    /// `len x len` matrix per segment.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::SegmentAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(value, Op::SoftmaxRows(a), &[a])
    }

    /// Row-wise α-entmax. `alpha` is `1 x 1` (shared) or `r x 1` (per row).
    /// Entries where `mask` is false are excluded and come out exactly 0.
    pub fn entmax_rows(
        &mut self,
        scores: Var,
        alpha: Var,
        mask: Option<&Array2<bool>>,
        iters: usize,
    ) -> Result<Var> {
        let (r, c) = self.shape(scores);
        let sa = self.shape(alpha);
        if sa != (1, 1) && sa != (r, 1) {
            return Err(shape_err("entmax alpha", (r, 1), sa));
        }
        if let Some(m) = mask {
            if m.dim() != (r, c) {
                return Err(shape_err("entmax mask", (r, c), m.dim()));
            }
        }
        let mut value = Array2::zeros((r, c));
        for i in 0..r {
            let a = self.value(alpha)[[if sa.0 == 1 { 0 } else { i }, 0]];
            let row = self.value(scores).row(i).to_vec();
            let mrow = mask.map(|m| m.row(i).to_vec());
            let p = entmax_bisect(&row, mrow.as_deref(), a, iters)?;
            value.row_mut(i).assign(&ndarray::ArrayView1::from(&p));
        }
        Ok(self.push(value, Op::EntmaxRows { scores, alpha }, &[scores, alpha]))
    }

    /// Row-wise standardisation `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Var {
        let src = self.value(x);
        let c = src.ncols() as f64;
        let mut xhat = src.clone();
        let mut inv_std = Vec::with_capacity(src.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / c;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let istd = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * istd);
            inv_std.push(istd);
        }
        let value = xhat.clone();
        self.push(value, Op::LayerNormRows { x, xhat, inv_std }, &[x])
    }

    /// Mean softmax cross-entropy of each row of `logits` against `labels`
    /// (column indices).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(MgcotError::Shape(format!(
                "cross_entropy: {} labels for {r} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(MgcotError::Shape(format!("label column {bad} out of {c}")));
        }
        let mut probs = self.value(logits).clone();
        let mut total = 0.0;
        for (mut row, &label) in probs.rows_mut().into_iter().zip(labels) {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
            row.mapv_inplace(|x| (x - lse).exp());
        }
        let value = Array2::from_elem((1, 1), total / r as f64);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Inverted dropout with a freshly sampled constant mask.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(a);
        }
        let keep = 1.0 - rate;
        let mask = self
            .value(a)
            .mapv(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(a, m)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Array2<f64>>],
        target: Var,
        f: impl FnOnce(&mut Array2<f64>),
    ) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        let buf = grads[target.0].get_or_insert_with(|| Array2::zeros(node.value.dim()));
        f(buf);
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |buf| {
                    ndarray::linalg::general_mat_mul(1.0, g, &vb.t(), 1.0, buf)
                });
                self.accumulate(grads, *b, |buf| {
                    ndarray::linalg::general_mat_mul(1.0, &va.t(), g, 1.0, buf)
                });
            }
            Op::MatMulT(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |buf| {
                    ndarray::linalg::general_mat_mul(1.0, g, vb, 1.0, buf)
                });
                self.accumulate(grads, *b, |buf| {
                    ndarray::linalg::general_mat_mul(1.0, &g.t(), va, 1.0, buf)
                });
            }
            Op::Transpose(a) => self.accumulate(grads, *a, |buf| *buf += &g.t()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |buf| *buf += g);
                self.accumulate(grads, *b, |buf| *buf += g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |buf| *buf += g);
                self.accumulate(grads, *b, |buf| *buf -= g);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |buf| {
                    Zip::from(buf).and(g).and(vb).for_each(|o, &g, &y| *o += g * y)
                });
                self.accumulate(grads, *b, |buf| {
                    Zip::from(buf).and(g).and(va).for_each(|o, &g, &x| *o += g * x)
                });
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, |buf| *buf += g);
                self.accumulate(grads, *row, |buf| *buf += &g.sum_axis(Axis(0)));
            }
            Op::MulRow(a, row) => {
                let (va, vr) = (self.value(*a), self.value(*row));
                self.accumulate(grads, *a, |buf| *buf += &(g * vr));
                self.accumulate(grads, *row, |buf| *buf += &(g * va).sum_axis(Axis(0)));
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |buf| buf.scaled_add(*c, g)),
            Op::AddScalar(a) => self.accumulate(grads, *a, |buf| *buf += g),
            Op::Relu(a) => {
                let out = &node.value;
                self.accumulate(grads, *a, |buf| {
                    Zip::from(buf).and(g).and(out).for_each(|o, &g, &y| {
                        if y > 0.0 {
                            *o += g
                        }
                    })
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                self.accumulate(grads, *a, |buf| {
                    Zip::from(buf)
                        .and(g)
                        .and(out)
                        .for_each(|o, &g, &y| *o += g * y * (1.0 - y))
                });
            }
            Op::Tanh(a) => {
                let out = &node.value;
                self.accumulate(grads, *a, |buf| {
                    Zip::from(buf)
                        .and(g)
                        .and(out)
                        .for_each(|o, &g, &y| *o += g * (1.0 - y * y))
                });
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |buf| {
                    Zip::from(buf)
                        .and(g)
                        .and(x)
                        .for_each(|o, &g, &x| *o += g * sigmoid(x))
                });
            }
            Op::Ln(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, |buf| {
                    Zip::from(buf).and(g).and(x).for_each(|o, &g, &x| *o += g / x)
                });
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    let block = g.slice(s![.., offset..offset + w]);
                    self.accumulate(grads, *p, |buf| *buf += &block);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    let block = g.slice(s![offset..offset + h, ..]);
                    self.accumulate(grads, *p, |buf| *buf += &block);
                    offset += h;
                }
            }
            Op::SliceRows(a, start, end) => self.accumulate(grads, *a, |buf| {
                let mut view = buf.slice_mut(s![*start..*end, ..]);
                view += g;
            }),
            Op::SliceCols(a, start, end) => self.accumulate(grads, *a, |buf| {
                let mut view = buf.slice_mut(s![.., *start..*end]);
                view += g;
            }),
            Op::GatherRows(a, index) => self.accumulate(grads, *a, |buf| {
                for (k, &r) in index.iter().enumerate() {
                    let mut dst = buf.row_mut(r);
                    dst += &g.row(k);
                }
            }),
            Op::SpMM(m, a) => {
                let mt = m.transpose();
                self.accumulate(grads, *a, |buf| *buf += &mt.matmul(g.view()));
            }
            Op::RowSum(a) => self.accumulate(grads, *a, |buf| *buf += g),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let gv = g[[0, 0]] / n;
                self.accumulate(grads, *a, |buf| *buf += gv);
            }
            Op::SoftmaxRows(a) => {
                let p = &node.value;
                self.accumulate(grads, *a, |buf| {
                    for ((mut out, pr), gr) in buf.rows_mut().into_iter().zip(p.rows()).zip(g.rows())
                    {
                        let dot = pr.dot(&gr);
                        Zip::from(&mut out)
                            .and(&pr)
                            .and(&gr)
                            .for_each(|o, &p, &g| *o += p * (g - dot));
                    }
                });
            }
            Op::MulCol(a, col) => {
                let (va, vc) = (self.value(*a), self.value(*col));
                self.accumulate(grads, *a, |buf| *buf += &(g * vc));
                self.accumulate(grads, *col, |buf| {
                    *buf += &(g * va).sum_axis(Axis(1)).insert_axis(Axis(1))
                });
            }
            Op::SegmentEntmax {
                scores,
                alpha,
                layout,
            } => {
                let p = &node.value;
                let z = self.value(*scores);
                let a_vals = self.value(*alpha);
                let mut dz = Array2::zeros(p.dim());
                let mut da = Array2::zeros(a_vals.dim());
                for b in 0..layout.segments() {
                    let (start, len) = (layout.start(b), layout.lengths[b]);
                    let col = |m: &Array2<f64>| (start..start + len).map(|r| m[[r, 0]]).collect::<Vec<_>>();
                    let (gz, ga) = entmax_backward(&col(p), &col(z), a_vals[[b, 0]], &col(g));
                    for (k, v) in gz.into_iter().enumerate() {
                        dz[[start + k, 0]] = v;
                    }
                    da[[b, 0]] = ga;
                }
                self.accumulate(grads, *scores, |buf| *buf += &dz);
                self.accumulate(grads, *alpha, |buf| *buf += &da);
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                alpha,
                layout,
                scale,
                scores,
                probs,
            } => {
                let (vq, vk, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let a_vals = self.value(*alpha);
                let mut dq = Array2::zeros(vq.dim());
                let mut dk = Array2::zeros(vk.dim());
                let mut dv = Array2::zeros(vv.dim());
                let mut da = Array2::zeros(a_vals.dim());
                for b in 0..layout.segments() {
                    let (start, len) = (layout.start(b), layout.lengths[b]);
                    let rows = s![start..start + len, ..];
                    let go = g.slice(rows);
                    let p = &probs[b];
                    dv.slice_mut(rows).assign(&p.t().dot(&go));
                    let dp = go.dot(&vv.slice(rows).t());
                    let mut ds = Array2::zeros((len, len));
                    for i in 0..len {
                        let (gz, ga) = entmax_backward(
                            &p.row(i).to_vec(),
                            &scores[b].row(i).to_vec(),
                            a_vals[[b, 0]],
                            &dp.row(i).to_vec(),
                        );
                        ds.row_mut(i).assign(&ndarray::ArrayView1::from(&gz));
                        da[[b, 0]] += ga;
                    }
                    dq.slice_mut(rows).assign(&(ds.dot(&vk.slice(rows)) * *scale));
                    dk.slice_mut(rows).assign(&(ds.t().dot(&vq.slice(rows)) * *scale));
                }
                self.accumulate(grads, *q, |buf| *buf += &dq);
                self.accumulate(grads, *k, |buf| *buf += &dk);
                self.accumulate(grads, *v, |buf| *buf += &dv);
                self.accumulate(grads, *alpha, |buf| *buf += &da);
            }
            Op::EntmaxRows { scores, alpha } => {
                let p = &node.value;
                let z = self.value(*scores);
                let a_vals = self.value(*alpha);
                let shared = a_vals.nrows() == 1;
                let mut dz = Array2::zeros(p.dim());
                let mut da = Array2::zeros(a_vals.dim());
                for i in 0..p.nrows() {
                    let ai = if shared { 0 } else { i };
                    let (gz, ga) = entmax_backward(
                        p.row(i).as_slice().expect("contiguous"),
                        &z.row(i).to_vec(),
                        a_vals[[ai, 0]],
                        &g.row(i).to_vec(),
                    );
                    dz.row_mut(i).assign(&ndarray::ArrayView1::from(&gz));
                    da[[ai, 0]] += ga;
                }
                self.accumulate(grads, *scores, |buf| *buf += &dz);
                self.accumulate(grads, *alpha, |buf| *buf += &da);
            }
            Op::LayerNormRows { x, xhat, inv_std } => {
                self.accumulate(grads, *x, |buf| {
                    let c = g.ncols() as f64;
                    for (i, mut out) in buf.rows_mut().into_iter().enumerate() {
                        let gr = g.row(i);
                        let hr = xhat.row(i);
                        let mean_g = gr.sum() / c;
                        let mean_gh = gr.dot(&hr) / c;
                        Zip::from(&mut out).and(&gr).and(&hr).for_each(|o, &g, &h| {
                            *o += inv_std[i] * (g - mean_g - h * mean_gh)
                        });
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                self.accumulate(grads, *logits, |buf| {
                    buf.scaled_add(scale, probs);
                    for (r, &l) in labels.iter().enumerate() {
                        buf[[r, l]] -= scale;
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_input_gradients;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn elementary_ops_pass_gradient_check() {
        let inputs = vec![random((3, 4), 1), random((4, 2), 2), random((1, 2), 3)];
        let worst = check_input_gradients(&inputs, 1e-5, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add_row(h, v[2])?;
            let t = g.tanh(h);
            let s = g.sigmoid(t);
            let r = g.relu(h);
            let m = g.mul(s, r)?;
            let c = g.concat_cols(&[m, t])?;
            let ln = g.layer_norm_rows(c, 1e-5);
            let sm = g.softmax_rows(ln);
            let sp = g.softplus(sm);
            let rs = g.row_sum(sp);
            Ok(g.mean(rs))
        })
        .unwrap();
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn structural_ops_pass_gradient_check() {
        let inputs = vec![random((5, 3), 4), random((3, 3), 5)];
        let csr = Rc::new(Csr::from_dense(random((4, 5), 6).view()));
        let worst = check_input_gradients(&inputs, 1e-5, |g, v| {
            let a = g.gather_rows(v[0], &[4, 0, 0, 2])?;
            let b = g.spmm(csr.clone(), v[0])?;
            let c = g.sub(a, b)?;
            let d = g.matmul_t(c, v[1])?;
            let e = g.transpose(d);
            let f = g.slice_rows(e, 1, 3);
            let h = g.slice_cols(f, 0, 2);
            let k = g.concat_rows(&[h, h])?;
            let l = g.scale(k, 0.5);
            let first = g.slice_rows(v[1], 0, 1);
            let m = g.mul_row(v[1], first)?;
            let ml = g.mean(m);
            let logits = g.concat_cols(&[l, l])?;
            let ce = g.cross_entropy(logits, &[0, 3, 1, 2])?;
            g.add(ce, ml)
        })
        .unwrap();
        assert!(worst < 1e-6, "relative error {worst}");
    }

    #[test]
    fn entmax_op_gradients_include_alpha() {
        let inputs = vec![random((3, 4), 7), array![[0.2], [-0.4], [1.1]]];
        let mask = Array2::from_shape_fn((3, 4), |(r, c)| !(r == 1 && c == 2));
        let weights = random((3, 4), 8);
        let worst = check_input_gradients(&inputs, 1e-5, |g, v| {
            let a = g.sigmoid(v[1]);
            let a = g.add_scalar(a, 1.0);
            let p = g.entmax_rows(v[0], a, Some(&mask), 30)?;
            let w = g.constant(weights.clone());
            let pw = g.mul(p, w)?;
            let rs = g.row_sum(pw);
            Ok(g.mean(rs))
        })
        .unwrap();
        assert!(worst < 1e-5, "relative error {worst}");
    }

    #[test]
    fn segment_ops_pass_gradient_check() {
        let layout = Rc::new(SegmentLayout::new(4, vec![3, 1, 4]).unwrap());
        let inputs = vec![
            random((12, 3), 9),
            random((12, 3), 10),
            random((12, 2), 11),
            array![[0.3], [-0.2], [0.9]],
            random((12, 1), 12),
        ];
        let weights = random((12, 2), 13);
        let worst = check_input_gradients(&inputs, 1e-5, |g, v| {
            let a = g.sigmoid(v[3]);
            let a = g.add_scalar(a, 1.0);
            let o = g.segment_attention(v[0], v[1], v[2], a, layout.clone(), 0.7, 30)?;
            let w = g.segment_entmax(v[4], a, layout.clone(), 30)?;
            let o = g.mul_col(o, w)?;
            let c = g.constant(weights.clone());
            let o = g.mul(o, c)?;
            Ok(g.mean(o))
        })
        .unwrap();
        assert!(worst < 1e-5, "relative error {worst}");
    }

    #[test]
    fn segment_attention_ignores_padding_rows() {
        let layout = Rc::new(SegmentLayout::new(3, vec![2, 3]).unwrap());
        let run = |pad: f64| {
            let mut g = Graph::new();
            let mut x = random((6, 2), 14);
            x[[2, 0]] = pad;
            x[[2, 1]] = pad;
            let x = g.input(x);
            let a = g.constant(array![[1.5], [1.5]]);
            let o = g.segment_attention(x, x, x, a, layout.clone(), 1.0, 30).unwrap();
            g.value(o).clone()
        };
        let (a, b) = (run(0.0), run(100.0));
        assert_eq!(a, b);
        assert_eq!(a.row(2).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn masked_softmax_gradient_and_empty_rows() {
        let mask = Array2::from_shape_fn((3, 4), |(r, c)| r != 2 && c != r);
        let inputs = vec![random((3, 4), 15), random((3, 4), 16)];
        let worst = check_input_gradients(&inputs, 1e-5, |g, v| {
            let p = g.masked_softmax_rows(v[0], &mask)?;
            let p = g.mul(p, v[1])?;
            Ok(g.mean(p))
        })
        .unwrap();
        assert!(worst < 1e-6, "relative error {worst}");
        let mut g = Graph::new();
        let x = g.input(random((3, 4), 17));
        let p = g.masked_softmax_rows(x, &mask).unwrap();
        assert!(g.value(p).row(2).iter().all(|&v| v == 0.0));
        assert!((g.value(p).row(0).sum() - 1.0).abs() < 1e-12);
        assert_eq!(g.value(p)[[1, 1]], 0.0);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0, 2.0]]);
        let x = g.input(array![[3.0, 4.0]]);
        let y = g.mul(c, x).unwrap();
        let loss = g.mean(y);
        let grads = g.backward(loss);
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(x).unwrap(), &array![[0.5, 1.0]]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::new();
        let a = g.input(Array2::zeros((2, 3)));
        let b = g.input(Array2::zeros((2, 3)));
        assert!(matches!(g.matmul(a, b), Err(MgcotError::Shape(_))));
    }
}
