//! Column-oriented matrix access used by the coordinate-descent solver.
//!
//! HAL design matrices are wide and mostly zero, so they are kept as
//! compressed columns. Score matrices are small and dense and use the
//! column-major storage of `nalgebra::DMatrix` directly.

use nalgebra::DMatrix;

/// Borrowed view of one column.
#[derive(Debug, Clone, Copy)]
pub enum ColumnView<'a> {
    Dense(&'a [f64]),
    Sparse { idx: &'a [u32], val: &'a [f64] },
}

impl<'a> ColumnView<'a> {
    /// Plain inner product with a full-length vector.
    #[inline]
    pub fn dot(&self, v: &[f64]) -> f64 {
        match *self {
            ColumnView::Dense(x) => x.iter().zip(v).map(|(a, b)| a * b).sum(),
            ColumnView::Sparse { idx, val } => idx
                .iter()
                .zip(val)
                .map(|(&i, &x)| x * v[i as usize])
                .sum(),
        }
    }

    /// Σ_i w_i x_i v_i
    #[inline]
    pub fn wdot(&self, w: &[f64], v: &[f64]) -> f64 {
        match *self {
            ColumnView::Dense(x) => {
                let mut acc = 0.0;
                for i in 0..x.len() {
                    acc += w[i] * x[i] * v[i];
                }
                acc
            }
            ColumnView::Sparse { idx, val } => {
                let mut acc = 0.0;
                for (&i, &x) in idx.iter().zip(val) {
                    let i = i as usize;
                    acc += w[i] * x * v[i];
                }
                acc
            }
        }
    }

    /// out += a * x
    #[inline]
    pub fn axpy(&self, a: f64, out: &mut [f64]) {
        match *self {
            ColumnView::Dense(x) => {
                for (o, &xi) in out.iter_mut().zip(x) {
                    *o += a * xi;
                }
            }
            ColumnView::Sparse { idx, val } => {
                for (&i, &x) in idx.iter().zip(val) {
                    out[i as usize] += a * x;
                }
            }
        }
    }

    /// (Σ w x, Σ w x²)
    #[inline]
    pub fn weighted_moments(&self, w: &[f64]) -> (f64, f64) {
        let (mut s1, mut s2) = (0.0, 0.0);
        match *self {
            ColumnView::Dense(x) => {
                for (&wi, &xi) in w.iter().zip(x) {
                    s1 += wi * xi;
                    s2 += wi * xi * xi;
                }
            }
            ColumnView::Sparse { idx, val } => {
                for (&i, &x) in idx.iter().zip(val) {
                    let wi = w[i as usize];
                    s1 += wi * x;
                    s2 += wi * x * x;
                }
            }
        }
        (s1, s2)
    }

    /// Σ w (x - m)², exact for sparse storage by accounting for the implicit zeros.
    pub fn weighted_centered_ss(&self, w: &[f64], m: f64, w_total: f64) -> f64 {
        match *self {
            ColumnView::Dense(x) => w
                .iter()
                .zip(x)
                .map(|(&wi, &xi)| wi * (xi - m) * (xi - m))
                .sum(),
            ColumnView::Sparse { idx, val } => {
                let mut acc = 0.0;
                let mut w_nz = 0.0;
                for (&i, &x) in idx.iter().zip(val) {
                    let wi = w[i as usize];
                    acc += wi * (x - m) * (x - m);
                    w_nz += wi;
                }
                acc + (w_total - w_nz).max(0.0) * m * m
            }
        }
    }

    pub fn get(&self, i: usize) -> f64 {
        match *self {
            ColumnView::Dense(x) => x[i],
            ColumnView::Sparse { idx, val } => match idx.binary_search(&(i as u32)) {
                Ok(k) => val[k],
                Err(_) => 0.0,
            },
        }
    }

    pub fn nnz(&self) -> usize {
        match *self {
            ColumnView::Dense(x) => x.len(),
            ColumnView::Sparse { idx, .. } => idx.len(),
        }
    }
}

/// Anything the lasso solver can read column by column.
pub trait ColumnStore: Sync {
    fn n_rows(&self) -> usize;
    fn n_cols(&self) -> usize;
    fn column(&self, j: usize) -> ColumnView<'_>;
}

impl ColumnStore for DMatrix<f64> {
    fn n_rows(&self) -> usize {
        self.nrows()
    }

    fn n_cols(&self) -> usize {
        self.ncols()
    }

    fn column(&self, j: usize) -> ColumnView<'_> {
        let n = self.nrows();
        ColumnView::Dense(&self.as_slice()[j * n..(j + 1) * n])
    }
}

/// One compressed column: sorted row indices and the matching nonzero values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseColumn {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseColumn {
    pub fn from_dense(values: &[f64]) -> Self {
        let mut col = SparseColumn::default();
        for (i, &v) in values.iter().enumerate() {
            if v != 0.0 {
                col.idx.push(i as u32);
                col.val.push(v);
            }
        }
        col
    }

    pub fn view(&self) -> ColumnView<'_> {
        ColumnView::Sparse {
            idx: &self.idx,
            val: &self.val,
        }
    }
}
