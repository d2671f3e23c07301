//! HAL basis construction: percentile knots, tensor-product indicator and
//! ReLU-spline terms, and sparse design evaluation.

use std::cmp::Ordering;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::columns::{ColumnStore, ColumnView, SparseColumn};
use crate::error::{invalid, Result};

/// One HAL term: a product over `vars` of `1{x_v > knot_v}` (order 0) or
/// `max(x_v - knot_v, 0)` (order 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisFunction {
    vars: Vec<usize>,
    knots: Vec<f64>,
    order: u8,
}

/// Hashable identity of a basis function: (vars, knot bit patterns, order).
pub type BasisKey = (Vec<usize>, Vec<u64>, u8);

impl BasisFunction {
    pub fn new(vars: Vec<usize>, knots: Vec<f64>, order: u8) -> Result<Self> {
        if vars.is_empty() {
            return invalid("basis function needs at least one variable");
        }
        if vars.len() != knots.len() {
            return invalid("basis function needs one knot per variable");
        }
        if order > 1 {
            return invalid(format!("unsupported spline order {order}"));
        }
        if knots.iter().any(|k| !k.is_finite()) {
            return invalid("knots must be finite");
        }
        let mut pairs: Vec<(usize, f64)> = vars.into_iter().zip(knots).collect();
        pairs.sort_by_key(|p| p.0);
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return invalid("duplicate variable in basis function");
        }
        let (vars, knots) = pairs.into_iter().unzip();
        Ok(Self { vars, knots, order })
    }

    pub fn vars(&self) -> &[usize] {
        &self.vars
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn key(&self) -> BasisKey {
        (
            self.vars.clone(),
            self.knots.iter().map(|k| k.to_bits()).collect(),
            self.order,
        )
    }

    /// Evaluate at one observation given a coordinate accessor.
    #[inline]
    pub fn eval_with(&self, coord: impl Fn(usize) -> f64) -> f64 {
        let mut value = 1.0;
        for (&v, &k) in self.vars.iter().zip(&self.knots) {
            let x = coord(v);
            let factor = match self.order {
                0 => {
                    if x > k {
                        1.0
                    } else {
                        0.0
                    }
                }
                _ => (x - k).max(0.0),
            };
            if factor == 0.0 {
                return 0.0;
            }
            value *= factor;
        }
        value
    }

    pub fn eval(&self, row: &[f64]) -> f64 {
        self.eval_with(|v| row[v])
    }

    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.vars
            .cmp(&other.vars)
            .then_with(|| {
                for (a, b) in self.knots.iter().zip(&other.knots) {
                    match a.total_cmp(b) {
                        Ordering::Equal => continue,
                        ord => return ord,
                    }
                }
                self.knots.len().cmp(&other.knots.len())
            })
            .then_with(|| self.order.cmp(&other.order))
    }
}

/// Per-variable sorted, deduplicated knot lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    pub knots: Vec<Vec<f64>>,
}

impl KnotGrid {
    pub fn new(knots: Vec<Vec<f64>>) -> Result<Self> {
        for list in &knots {
            if list.windows(2).any(|w| w[0] >= w[1]) {
                return invalid("knot lists must be strictly increasing");
            }
        }
        Ok(Self { knots })
    }

    /// Knots for every column of `x`. Columns holding only 0/1 values get the
    /// single knot 0, so the main effect is the indicator itself.
    pub fn from_data(x: &DMatrix<f64>, max_knots: usize) -> Result<Self> {
        let mut knots = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let col: Vec<f64> = x.column(j).iter().copied().collect();
            if is_binary(&col) {
                knots.push(vec![0.0]);
            } else {
                knots.push(select_knots(&col, max_knots)?);
            }
        }
        Ok(Self { knots })
    }

    pub fn n_vars(&self) -> usize {
        self.knots.len()
    }
}

pub(crate) fn is_binary(col: &[f64]) -> bool {
    !col.is_empty() && col.iter().all(|&v| v == 0.0 || v == 1.0)
}

/// Empirical quantiles at levels k/max_knots (k = 1..=max_knots), lower
/// nearest-rank convention, deduplicated.
pub fn select_knots(column: &[f64], max_knots: usize) -> Result<Vec<f64>> {
    if column.is_empty() {
        return invalid("cannot select knots from an empty column");
    }
    if max_knots == 0 {
        return invalid("max_knots must be at least 1");
    }
    if column.iter().any(|v| !v.is_finite()) {
        return invalid("column contains non-finite values");
    }
    let mut sorted = column.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    let mut knots: Vec<f64> = Vec::with_capacity(max_knots);
    for k in 1..=max_knots {
        // rank = ceil(k n / max_knots), 1-based
        let rank = (k * n).div_ceil(max_knots).max(1);
        let value = sorted[rank - 1];
        if knots.last() != Some(&value) {
            knots.push(value);
        }
    }
    Ok(knots)
}

/// All main-effect terms plus, for `max_interaction == 2`, the products of
/// main-effect terms on distinct variables. Output is sorted by (vars, knots).
pub fn enumerate_basis(
    n_vars: usize,
    grid: &KnotGrid,
    max_interaction: usize,
    order: u8,
) -> Result<Vec<BasisFunction>> {
    if !(1..=2).contains(&max_interaction) {
        return invalid("max_interaction must be 1 or 2");
    }
    if grid.n_vars() != n_vars {
        return invalid(format!(
            "knot grid covers {} variables, expected {n_vars}",
            grid.n_vars()
        ));
    }
    let mut basis = Vec::new();
    for v in 0..n_vars {
        for &k in &grid.knots[v] {
            basis.push(BasisFunction::new(vec![v], vec![k], order)?);
        }
    }
    if max_interaction == 2 {
        for v1 in 0..n_vars {
            for v2 in (v1 + 1)..n_vars {
                for &k1 in &grid.knots[v1] {
                    for &k2 in &grid.knots[v2] {
                        basis.push(BasisFunction::new(vec![v1, v2], vec![k1, k2], order)?);
                    }
                }
            }
        }
    }
    basis.sort_by(|a, b| a.canonical_cmp(b));
    Ok(basis)
}

/// Evaluated basis: compressed columns plus the basis list that produced them.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    n_rows: usize,
    columns: Vec<SparseColumn>,
    basis: Vec<BasisFunction>,
}

impl DesignMatrix {
    pub fn basis(&self) -> &[BasisFunction] {
        &self.basis
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.columns[j].view().get(i)
    }

    pub fn sparse_column(&self, j: usize) -> &SparseColumn {
        &self.columns[j]
    }

    pub fn nnz(&self) -> usize {
        self.columns.iter().map(|c| c.idx.len()).sum()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n_rows, self.columns.len());
        for (j, col) in self.columns.iter().enumerate() {
            for (&i, &v) in col.idx.iter().zip(&col.val) {
                m[(i as usize, j)] = v;
            }
        }
        m
    }
}

impl ColumnStore for DesignMatrix {
    fn n_rows(&self) -> usize {
        self.n_rows
    }

    fn n_cols(&self) -> usize {
        self.columns.len()
    }

    fn column(&self, j: usize) -> ColumnView<'_> {
        self.columns[j].view()
    }
}

/// Evaluate every basis function at every row of `x`.
pub fn evaluate_design(basis: &[BasisFunction], x: &DMatrix<f64>) -> Result<DesignMatrix> {
    let d = x.ncols();
    if let Some(bad) = basis.iter().find(|b| b.vars.iter().any(|&v| v >= d)) {
        return invalid(format!(
            "basis references variable {:?} but data has {d} columns",
            bad.vars
        ));
    }
    let n = x.nrows();
    let columns = basis
        .iter()
        .map(|b| {
            let mut col = SparseColumn::default();
            for i in 0..n {
                let v = b.eval_with(|c| x[(i, c)]);
                if v != 0.0 {
                    col.idx.push(i as u32);
                    col.val.push(v);
                }
            }
            col
        })
        .collect();
    Ok(DesignMatrix {
        n_rows: n,
        columns,
        basis: basis.to_vec(),
    })
}

/// Dense n×p evaluation for small (working-model) bases.
pub fn evaluate_dense(basis: &[BasisFunction], x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = x.ncols();
    if basis.iter().any(|b| b.vars.iter().any(|&v| v >= d)) {
        return invalid("basis references a variable outside the data");
    }
    Ok(DMatrix::from_fn(x.nrows(), basis.len(), |i, j| {
        basis[j].eval_with(|c| x[(i, c)])
    }))
}
