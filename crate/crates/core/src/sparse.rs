//! Compressed sparse row matrices used for block-diagonal session adjacency
//! and the normalized global item adjacency.

use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds a matrix from `(row, col, value)` triplets. Duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut sorted: Vec<(usize, usize, f64)> = triplets.to_vec();
        sorted.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(sorted.len());
        let mut values: Vec<f64> = Vec::with_capacity(sorted.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in sorted {
            assert!(r < rows && c < cols, "triplet ({r}, {c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Csr {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn from_dense(dense: ArrayView2<f64>) -> Self {
        let mut triplets = Vec::new();
        for ((r, c), &v) in dense.indexed_iter() {
            if v != 0.0 {
                triplets.push((r, c, v));
            }
        }
        Self::from_triplets(dense.nrows(), dense.ncols(), &triplets)
    }

    pub fn identity(n: usize) -> Self {
        Csr {
            rows: n,
            cols: n,
            indptr: (0..=n).collect(),
            indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r).find(|&(col, _)| col == c).map_or(0.0, |(_, v)| v)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Csr {
        let mut triplets = Vec::with_capacity(self.nnz());
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                triplets.push((c, r, v));
            }
        }
        Csr::from_triplets(self.cols, self.rows, &triplets)
    }

    /// Sub-matrix holding only the listed rows, in the listed order.
    pub fn select_rows(&self, rows: &[usize]) -> Csr {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        indptr.push(0);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        for &r in rows {
            let span = self.indptr[r]..self.indptr[r + 1];
            indices.extend_from_slice(&self.indices[span.clone()]);
            values.extend_from_slice(&self.values[span]);
            indptr.push(indices.len());
        }
        Csr {
            rows: rows.len(),
            cols: self.cols,
            indptr,
            indices,
            values,
        }
    }

    /// Same sparsity pattern with every stored value passed through `f`.
    pub fn map_values(&self, mut f: impl FnMut(f64) -> f64) -> Csr {
        Csr {
            values: self.values.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }

    /// Block-diagonal stack of square blocks.
    pub fn block_diagonal(blocks: &[&Array2<f64>]) -> Csr {
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut triplets = Vec::new();
        let mut offset = 0;
        for block in blocks {
            for ((r, c), &v) in block.indexed_iter() {
                if v != 0.0 {
                    triplets.push((offset + r, offset + c, v));
                }
            }
            offset += block.nrows();
        }
        Csr::from_triplets(n, n, &triplets)
    }

    pub fn matmul(&self, dense: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(self.cols, dense.nrows(), "sparse matmul shape mismatch");
        let mut out = Array2::zeros((self.rows, dense.ncols()));
        for r in 0..self.rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &dense.row(c));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn triplets_sum_duplicates_and_match_dense() {
        let m = Csr::from_triplets(2, 3, &[(0, 1, 1.0), (1, 2, 2.0), (0, 1, 0.5)]);
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.to_dense(), array![[0.0, 1.5, 0.0], [0.0, 0.0, 2.0]]);
    }

    #[test]
    fn matmul_and_transpose_agree_with_dense() {
        let d = array![[1.0, 0.0, 2.0], [0.0, 3.0, 0.0]];
        let m = Csr::from_dense(d.view());
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(m.matmul(x.view()), d.dot(&x));
        assert_eq!(m.transpose().to_dense(), d.t().to_owned());
        assert_eq!(m.select_rows(&[1]).to_dense(), array![[0.0, 3.0, 0.0]]);
    }

    #[test]
    fn block_diagonal_offsets_blocks() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let b = array![[2.0]];
        let m = Csr::block_diagonal(&[&a, &b]);
        assert_eq!(m.shape(), (3, 3));
        assert_eq!(m.get(2, 2), 2.0);
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(0, 2), 0.0);
    }
}
