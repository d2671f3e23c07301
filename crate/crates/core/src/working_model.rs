//! Finite-dimensional working models cut out of a lasso path.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::glm_lasso::{FamilyKind, LassoPath};
use crate::hal_basis::{evaluate_dense, BasisFunction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub lambda: Option<f64>,
    pub path_index: Option<usize>,
    pub rule: String,
}

/// Intercept plus coefficients over a fixed, deduplicated basis list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkingModel {
    pub basis: Vec<BasisFunction>,
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub family: FamilyKind,
    pub meta: ModelMeta,
}

impl WorkingModel {
    pub fn new(
        basis: Vec<BasisFunction>,
        intercept: f64,
        beta: Vec<f64>,
        family: FamilyKind,
        meta: ModelMeta,
    ) -> Result<Self> {
        if basis.len() != beta.len() {
            return invalid("coefficient count does not match the basis");
        }
        let mut seen = std::collections::HashSet::new();
        if !basis.iter().all(|b| seen.insert(b.key())) {
            return invalid("duplicate basis function in working model");
        }
        Ok(Self {
            basis,
            intercept,
            beta,
            family,
            meta,
        })
    }

    pub fn n_terms(&self) -> usize {
        self.basis.len()
    }

    pub fn with_coefficients(&self, intercept: f64, beta: Vec<f64>) -> Result<Self> {
        Self::new(self.basis.clone(), intercept, beta, self.family, self.meta.clone())
    }

    pub fn linear_predictor_row(&self, row: &[f64]) -> f64 {
        self.intercept
            + self
                .basis
                .iter()
                .zip(&self.beta)
                .map(|(b, c)| c * b.eval(row))
                .sum::<f64>()
    }

    /// Mean-scale prediction for one row (link inverse applied).
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.family.inverse_link(self.linear_predictor_row(row))
    }

    pub fn design(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        evaluate_dense(&self.basis, x)
    }

    pub fn linear_predictor(&self, x: &DMatrix<f64>) -> Result<Vec<f64>> {
        let phi = self.design(x)?;
        Ok(linear_predictor_from_design(&phi, self.intercept, &self.beta))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        Self::new(m.basis, m.intercept, m.beta, m.family, m.meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// intercept + φ β for a dense design.
pub fn linear_predictor_from_design(phi: &DMatrix<f64>, intercept: f64, beta: &[f64]) -> Vec<f64> {
    let mut out = vec![intercept; phi.nrows()];
    for (j, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            for (o, &x) in out.iter_mut().zip(phi.column(j).iter()) {
                *o += b * x;
            }
        }
    }
    out
}

/// Model made of the nonzero coefficients at `lambda_index`.
pub fn extract_working_model(
    path: &LassoPath,
    basis: &[BasisFunction],
    lambda_index: usize,
) -> Result<WorkingModel> {
    if lambda_index >= path.len() {
        return invalid(format!(
            "lambda index {lambda_index} outside a path of length {}",
            path.len()
        ));
    }
    let coefs = &path.coefs[lambda_index];
    if coefs.len() != basis.len() {
        return invalid("path coefficients do not match the basis list");
    }
    let active: Vec<usize> = (0..coefs.len()).filter(|&j| coefs[j] != 0.0).collect();
    WorkingModel::new(
        active.iter().map(|&j| basis[j].clone()).collect(),
        path.intercepts[lambda_index],
        active.iter().map(|&j| coefs[j]).collect(),
        path.family,
        ModelMeta {
            lambda: Some(path.lambdas[lambda_index]),
            path_index: Some(lambda_index),
            rule: if path.cv_index == Some(lambda_index) {
                "cv".into()
            } else {
                "path".into()
            },
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UndersmoothRule {
    /// The cross-validated index itself.
    Cv,
    /// Move this many steps below the CV penalty, clamped to the path end.
    Offset(usize),
    /// Index whose L1 norm is closest to the multiplier times the CV L1 norm.
    L1Multiplier(f64),
}

impl UndersmoothRule {
    pub const ATE_DEFAULT: UndersmoothRule = UndersmoothRule::Offset(10);
    pub const SURVIVAL_DEFAULT: UndersmoothRule = UndersmoothRule::L1Multiplier(1.61);

    pub fn label(&self) -> String {
        match self {
            UndersmoothRule::Cv => "cv".into(),
            UndersmoothRule::Offset(k) => format!("offset-{k}"),
            UndersmoothRule::L1Multiplier(m) => format!("l1-multiplier-{m}"),
        }
    }
}

pub fn undersmooth_select(path: &LassoPath, rule: UndersmoothRule) -> Result<usize> {
    let cv = match path.cv_index {
        Some(k) if k < path.len() => k,
        _ => return invalid("path has no cross-validated index"),
    };
    Ok(match rule {
        UndersmoothRule::Cv => cv,
        UndersmoothRule::Offset(k) => (cv + k).min(path.len() - 1),
        UndersmoothRule::L1Multiplier(m) => {
            let target = m * path.l1_norm(cv);
            let mut best = cv;
            let mut best_gap = f64::INFINITY;
            for k in cv..path.len() {
                let gap = (path.l1_norm(k) - target).abs();
                if gap < best_gap {
                    best_gap = gap;
                    best = k;
                }
            }
            best
        }
    })
}

/// Nested models: the first is the CV model, the j-th adds the active set
/// found j-1 steps below the CV penalty. Coefficients are the CV fit, zero-padded.
pub fn build_nested_sequence(
    path: &LassoPath,
    basis: &[BasisFunction],
    max_models: usize,
) -> Result<Vec<WorkingModel>> {
    if max_models == 0 {
        return invalid("max_models must be at least 1");
    }
    let cv = undersmooth_select(path, UndersmoothRule::Cv)?;
    let cv_coefs = &path.coefs[cv];
    let mut cols: BTreeSet<usize> = BTreeSet::new();
    let mut models = Vec::new();
    for j in 0..max_models {
        let k = cv + j;
        if k >= path.len() {
            break;
        }
        cols.extend(path.active_sets[k].iter().copied());
        let idx: Vec<usize> = cols.iter().copied().collect();
        models.push(WorkingModel::new(
            idx.iter().map(|&c| basis[c].clone()).collect(),
            path.intercepts[cv],
            idx.iter().map(|&c| cv_coefs[c]).collect(),
            path.family,
            ModelMeta {
                lambda: Some(path.lambdas[k]),
                path_index: Some(k),
                rule: format!("nested-{}", j + 1),
            },
        )?);
    }
    Ok(models)
}

/// Carry coefficients from a smaller model into a larger nested one.
pub fn zero_pad(beta_small: &[f64], small: &WorkingModel, large: &WorkingModel) -> Result<Vec<f64>> {
    if beta_small.len() != small.n_terms() {
        return invalid("coefficients do not match the smaller model");
    }
    let pos: HashMap<_, usize> = large
        .basis
        .iter()
        .enumerate()
        .map(|(i, b)| (b.key(), i))
        .collect();
    let mut out = vec![0.0; large.n_terms()];
    for (b, &v) in small.basis.iter().zip(beta_small) {
        match pos.get(&b.key()) {
            Some(&i) => out[i] = v,
            None => return invalid("models are not nested"),
        }
    }
    Ok(out)
}
