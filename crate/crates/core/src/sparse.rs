//! Compressed sparse rows and a differentiable sparse × dense product.

use std::sync::Arc;

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Entries must be unique; order is irrelevant.
    pub fn from_triplets(rows: usize, cols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; rows + 1];
        for &(r, _, _) in triplets {
            counts[r + 1] += 1;
        }
        for i in 0..rows {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut fill = counts;
        let mut col_idx = vec![0; triplets.len()];
        let mut values = vec![0.0; triplets.len()];
        for &(r, c, v) in triplets {
            let at = fill[r];
            col_idx[at] = c;
            values[at] = v;
            fill[r] += 1;
        }
        // sort columns within each row so iteration order is canonical
        for r in 0..rows {
            let (s, e) = (row_ptr[r], row_ptr[r + 1]);
            let mut pairs: Vec<(usize, f64)> = col_idx[s..e]
                .iter()
                .copied()
                .zip(values[s..e].iter().copied())
                .collect();
            pairs.sort_by_key(|p| p.0);
            for (k, (c, v)) in pairs.into_iter().enumerate() {
                col_idx[s + k] = c;
                values[s + k] = v;
            }
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[r], self.row_ptr[r + 1]);
        self.col_idx[s..e]
            .iter()
            .copied()
            .zip(self.values[s..e].iter().copied())
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

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.cols]; self.rows];
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in self.row(r) {
                row[c] = v;
            }
        }
        out
    }

    /// `self · dense` for a row-major `cols × width` block.
    pub fn matmul_slice(&self, dense: &[f64], width: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            let dst = &mut out[r * width..(r + 1) * width];
            for (c, v) in self.row(r) {
                let src = &dense[c * width..(c + 1) * width];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += v * s;
                }
            }
        }
        out
    }
}

/// `A · X` with gradient `Aᵀ · G` flowing back to `X`.
#[derive(Debug, Clone)]
pub struct SpMatMul {
    matrix: Arc<Csr>,
    transpose: Arc<Csr>,
}

impl SpMatMul {
    pub fn new(matrix: Arc<Csr>, transpose: Arc<Csr>) -> Self {
        Self { matrix, transpose }
    }

    pub fn apply(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        x.apply_op1(self.clone())
    }
}

impl CustomOp1 for SpMatMul {
    fn name(&self) -> &'static str {
        "sparse-matmul"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, width) = layout.shape().dims2()?;
        if rows != self.matrix.cols {
            candle_core::bail!(
                "sparse-matmul: dense operand has {rows} rows, matrix has {} columns",
                self.matrix.cols
            );
        }
        let data = match storage {
            CpuStorage::F64(v) => v,
            _ => candle_core::bail!("sparse-matmul: only f64 tensors are supported"),
        };
        let dense = match layout.contiguous_offsets() {
            Some((start, end)) => &data[start..end],
            None => candle_core::bail!("sparse-matmul: dense operand must be contiguous"),
        };
        let out = self.matrix.matmul_slice(dense, width);
        Ok((CpuStorage::F64(out), Shape::from((self.matrix.rows, width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let back = SpMatMul::new(self.transpose.clone(), self.matrix.clone());
        Ok(Some(back.apply(&grad_res.contiguous()?)?))
    }
}
