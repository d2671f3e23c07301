//! Average treatment effect pipelines inside HAL working models.

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::eic::{
    center, delta_eic, gaussian_scores, nonparametric_eic_ate, projection_eic, wald_ci, EicApprox,
    Interval, ProjectionMode, ScoreMatrix, DEFAULT_PROJECTION_PENALTY, DEFAULT_RIDGE,
};
use crate::error::{estimation, invalid, HalError, Result};
use crate::glm_lasso::{
    cv_select_with_folds, make_lambda_path_weighted, Family, LassoOptions, LassoPath, PROB_CLIP,
};
use crate::hal_basis::{enumerate_basis, evaluate_design, BasisFunction, KnotGrid};
use crate::rng::splitmix;
use crate::stats::mean;
use crate::targeting::{
    relaxed_fit, target_1d, target_direct_ate, EicProvider, TargetingResult, TargetingSettings,
};
use crate::working_model::{
    extract_working_model, linear_predictor_from_design, undersmooth_select, UndersmoothRule,
    WorkingModel,
};

/// Covariates `W` (n×d), binary treatment `A` and outcome `Y`.
#[derive(Debug, Clone, PartialEq)]
pub struct AteData {
    pub w: DMatrix<f64>,
    pub a: Vec<f64>,
    pub y: Vec<f64>,
}

impl AteData {
    pub fn new(w: DMatrix<f64>, a: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = w.nrows();
        if a.len() != n || y.len() != n {
            return invalid("W, A and Y must have the same number of rows");
        }
        if n == 0 {
            return invalid("empty data set");
        }
        if a.iter().any(|&v| v != 0.0 && v != 1.0) {
            return invalid("treatment must be coded 0/1");
        }
        if w.iter().chain(&y).any(|v| !v.is_finite()) {
            return invalid("non-finite covariate or outcome");
        }
        Ok(Self { w, a, y })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Design input with treatment in column 0 (observed, or set to `a`).
    pub fn x_with_treatment(&self, a: Option<f64>) -> DMatrix<f64> {
        let n = self.n();
        let d = self.w.ncols();
        DMatrix::from_fn(n, d + 1, |i, j| {
            if j == 0 {
                a.unwrap_or(self.a[i])
            } else {
                self.w[(i, j - 1)]
            }
        })
    }

    /// Reads a CSV with header `W1..Wd, A, Y` (column order free).
    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let a_col = find("A").ok_or_else(|| HalError::InvalidInput("missing column A".into()))?;
        let y_col = find("Y").ok_or_else(|| HalError::InvalidInput("missing column Y".into()))?;
        let mut w_cols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(i, h)| {
                h.trim()
                    .strip_prefix('W')
                    .and_then(|k| k.parse::<usize>().ok())
                    .map(|k| (k, i))
            })
            .collect();
        w_cols.sort();
        if w_cols.is_empty() {
            return invalid("no covariate columns W1..Wd");
        }
        let mut wv = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| HalError::InvalidInput(format!("unparsable value in column {}", headers.get(i).unwrap_or("?"))))
            };
            for &(_, i) in &w_cols {
                wv.push(num(i)?);
            }
            a.push(num(a_col)?);
            y.push(num(y_col)?);
        }
        let w = DMatrix::from_row_slice(y.len(), w_cols.len(), &wv);
        Self::new(w, a, y)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let d = self.w.ncols();
        let mut header: Vec<String> = (1..=d).map(|k| format!("W{k}")).collect();
        header.push("A".into());
        header.push("Y".into());
        w.write_record(&header)?;
        for i in 0..self.n() {
            let mut row: Vec<String> = (0..d).map(|j| self.w[(i, j)].to_string()).collect();
            row.push(self.a[i].to_string());
            row.push(self.y[i].to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AteTargeting {
    Relaxed,
    Projection,
    Delta,
    Direct,
    Standard,
}

impl AteTargeting {
    pub const ALL: [AteTargeting; 5] = [
        AteTargeting::Relaxed,
        AteTargeting::Projection,
        AteTargeting::Delta,
        AteTargeting::Direct,
        AteTargeting::Standard,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AteTargeting::Relaxed => "relaxed",
            AteTargeting::Projection => "projection",
            AteTargeting::Delta => "delta",
            AteTargeting::Direct => "direct",
            AteTargeting::Standard => "standard",
        }
    }
}

impl fmt::Display for AteTargeting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AteTargeting {
    type Err = HalError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| HalError::InvalidInput(format!("unknown targeting '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRule {
    Cv,
    Undersmoothed,
}

impl ModelRule {
    pub fn label(&self) -> &'static str {
        match self {
            ModelRule::Cv => "cv",
            ModelRule::Undersmoothed => "undersmoothed",
        }
    }
}

impl FromStr for ModelRule {
    type Err = HalError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cv" => Ok(ModelRule::Cv),
            "undersmoothed" | "undersmooth" => Ok(ModelRule::Undersmoothed),
            _ => invalid(format!("unknown working-model rule '{s}'")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AteConfig {
    pub targeting: AteTargeting,
    pub rule: ModelRule,
    pub seed: u64,
    pub projection_penalty: f64,
    pub direct_penalty: f64,
    pub ridge: f64,
    pub step: f64,
    pub max_iter: usize,
    pub cv_folds: usize,
    pub level: f64,
    pub truncation: (f64, f64),
    /// Knots per continuous covariate; `None` means max(n/20, 1).
    pub max_knots: Option<usize>,
    pub order: u8,
    pub max_interaction: usize,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
    /// Penalize standardized HAL coefficients; off penalizes λ·Σ|β_j| directly.
    pub standardize: bool,
    /// Projection, projection-CV and delta intervals besides the nonparametric one.
    pub all_intervals: bool,
}

impl Default for AteConfig {
    fn default() -> Self {
        Self {
            targeting: AteTargeting::Projection,
            rule: ModelRule::Cv,
            seed: 1,
            projection_penalty: DEFAULT_PROJECTION_PENALTY,
            direct_penalty: DEFAULT_PROJECTION_PENALTY,
            ridge: DEFAULT_RIDGE,
            step: TargetingSettings::ATE.step,
            max_iter: TargetingSettings::ATE.max_iter,
            cv_folds: 10,
            level: 0.95,
            truncation: (0.01, 0.99),
            max_knots: None,
            order: 1,
            max_interaction: 2,
            n_lambda: 100,
            lambda_ratio: 1e-4,
            standardize: false,
            all_intervals: true,
        }
    }
}

impl AteConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.ridge > 0.0) || !(self.projection_penalty >= 0.0) {
            return invalid("step and ridge must be positive, penalties nonnegative");
        }
        if self.cv_folds < 2 {
            return invalid("at least two CV folds are required");
        }
        let (lo, hi) = self.truncation;
        if !(0.0 < lo && lo < hi && hi < 1.0) {
            return invalid("truncation bounds must satisfy 0 < lo < hi < 1");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return invalid("level must lie in (0, 1)");
        }
        Ok(())
    }

    fn settings(&self) -> TargetingSettings {
        TargetingSettings {
            step: self.step,
            max_iter: self.max_iter,
        }
    }

    fn knots_for(&self, n: usize) -> usize {
        self.max_knots.unwrap_or((n / 20).max(1))
    }
}

/// Per-interval results for one fit; intervals absent when not applicable.
#[derive(Debug, Clone, PartialEq)]
pub struct AteResult {
    pub psi: f64,
    pub ci_np: Option<Interval>,
    pub ci_proj: Option<Interval>,
    pub ci_proj_cv: Option<Interval>,
    pub ci_delta: Option<Interval>,
    pub targeting: AteTargeting,
    pub rule: String,
    pub iterations: usize,
    pub converged: bool,
    pub n_basis: usize,
    pub intercept: f64,
    pub beta: Vec<f64>,
}

/// Which intervals to compute after targeting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntervalSet {
    All,
    NonparametricOnly,
}

/// Outcome and propensity fits shared by every targeting variant.
#[derive(Debug, Clone)]
pub struct AteFits {
    pub q_basis: Vec<BasisFunction>,
    pub q_path: LassoPath,
    pub g_hat: Vec<f64>,
    pub x_obs: DMatrix<f64>,
    pub x1: DMatrix<f64>,
    pub x0: DMatrix<f64>,
}

/// Fold labels from a seeded hash of each row's contents, so that relabelling
/// rows does not change the split.
pub fn content_folds(data: &AteData, folds: usize, seed: u64) -> Vec<usize> {
    let n = data.n();
    let mut keyed: Vec<(u64, usize)> = (0..n)
        .map(|i| {
            let mut h = splitmix(seed);
            for j in 0..data.w.ncols() {
                h = splitmix(h ^ data.w[(i, j)].to_bits());
            }
            h = splitmix(h ^ data.a[i].to_bits());
            h = splitmix(h ^ data.y[i].to_bits());
            (h, i)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| {
        data.y[a.1].total_cmp(&data.y[b.1])
    }));
    let mut out = vec![0; n];
    for (pos, &(_, i)) in keyed.iter().enumerate() {
        out[i] = pos % folds;
    }
    out
}

/// Penalties without CV improvement before the fold paths stop.
const CV_PATIENCE: usize = 10;
/// Outcome-path penalties kept below the CV choice, enough for undersmoothing and model ladders.
pub const Q_PATH_DEPTH: usize = 20;

fn hal_cv(
    x: &DMatrix<f64>,
    y: &[f64],
    family: &Family,
    folds: &[usize],
    cfg: &AteConfig,
    depth: usize,
) -> Result<(Vec<BasisFunction>, LassoPath)> {
    let grid = KnotGrid::from_data(x, cfg.knots_for(x.nrows()))?;
    let basis = enumerate_basis(x.ncols(), &grid, cfg.max_interaction, cfg.order)?;
    let design = evaluate_design(&basis, x)?;
    let opts = LassoOptions {
        cv_patience: Some(CV_PATIENCE),
        cv_extend: depth,
        standardize: cfg.standardize,
        ..LassoOptions::default()
    };
    let lambdas = make_lambda_path_weighted(&design, y, family, None, cfg.n_lambda, cfg.lambda_ratio, opts)?;
    let (path, _) = cv_select_with_folds(&design, y, family, None, &lambdas, folds, opts)?;
    Ok((basis, path))
}

/// Cross-validated HAL fits of the outcome regression on (A, W) and of the
/// propensity score on W.
pub fn fit_nuisance(data: &AteData, cfg: &AteConfig) -> Result<AteFits> {
    cfg.validate()?;
    let n = data.n();
    let treated: f64 = data.a.iter().sum();
    if treated == 0.0 || treated == n as f64 {
        return estimation("all observations are in one treatment arm");
    }
    let folds = content_folds(data, cfg.cv_folds.min(n), cfg.seed);
    let x_obs = data.x_with_treatment(None);
    let (q_basis, q_path) = hal_cv(&x_obs, &data.y, &Family::Gaussian, &folds, cfg, Q_PATH_DEPTH)?;
    let (g_basis, g_path) = hal_cv(&data.w, &data.a, &Family::Binomial, &folds, cfg, 0)?;
    let k = g_path.cv_index.unwrap_or(0);
    let g_design = evaluate_design(&g_basis, &data.w)?;
    let g_hat: Vec<f64> = g_path
        .linear_predictor(&g_design, k)
        .iter()
        .map(|&e| (1.0 / (1.0 + (-e).exp())).clamp(PROB_CLIP, 1.0 - PROB_CLIP))
        .collect();
    Ok(AteFits {
        q_basis,
        q_path,
        g_hat,
        x_obs,
        x1: data.x_with_treatment(Some(1.0)),
        x0: data.x_with_treatment(Some(0.0)),
    })
}

pub fn working_model(fits: &AteFits, rule: ModelRule) -> Result<WorkingModel> {
    let r = match rule {
        ModelRule::Cv => UndersmoothRule::Cv,
        ModelRule::Undersmoothed => UndersmoothRule::ATE_DEFAULT,
    };
    let k = undersmooth_select(&fits.q_path, r)?;
    let mut m = extract_working_model(&fits.q_path, &fits.q_basis, k)?;
    m.meta.rule = r.label();
    Ok(m)
}

/// Mean over rows of Q(1, W) − Q(0, W).
pub fn psi_plugin(model: &WorkingModel, w: &DMatrix<f64>) -> Result<f64> {
    let data = AteData {
        w: w.clone(),
        a: vec![0.0; w.nrows()],
        y: vec![0.0; w.nrows()],
    };
    let q1 = model.linear_predictor(&data.x_with_treatment(Some(1.0)))?;
    let q0 = model.linear_predictor(&data.x_with_treatment(Some(0.0)))?;
    Ok(mean(&q1.iter().zip(&q0).map(|(a, b)| a - b).collect::<Vec<_>>()))
}

/// Mean over rows of φ_j(1, W) − φ_j(0, W) for every basis function.
pub fn ate_partials(model: &WorkingModel, w: &DMatrix<f64>) -> Result<Vec<f64>> {
    let data = AteData {
        w: w.clone(),
        a: vec![0.0; w.nrows()],
        y: vec![0.0; w.nrows()],
    };
    let p1 = model.design(&data.x_with_treatment(Some(1.0)))?;
    let p0 = model.design(&data.x_with_treatment(Some(0.0)))?;
    Ok(partials_from_designs(&p1, &p0))
}

fn partials_from_designs(p1: &DMatrix<f64>, p0: &DMatrix<f64>) -> Vec<f64> {
    let n = p1.nrows() as f64;
    (0..p1.ncols())
        .map(|j| (p1.column(j) - p0.column(j)).sum() / n)
        .collect()
}

/// H = A/g − (1−A)/(1−g).
pub fn clever_covariate(g: &[f64], a: &[f64]) -> Result<Vec<f64>> {
    if g.len() != a.len() {
        return invalid("propensity and treatment lengths differ");
    }
    if g.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return invalid("propensity scores must lie strictly inside (0, 1)");
    }
    Ok(g.iter()
        .zip(a)
        .map(|(g, a)| a / g - (1.0 - a) / (1.0 - g))
        .collect())
}

struct ProjectionProvider<'a> {
    phi: &'a DMatrix<f64>,
    y: &'a [f64],
    intercept: f64,
    d_bar: &'a [f64],
    penalty: f64,
    warm: Option<Vec<f64>>,
}

impl EicProvider for ProjectionProvider<'_> {
    fn scores(&mut self, beta: &[f64]) -> Result<ScoreMatrix> {
        gaussian_scores(self.phi, self.y, self.intercept, beta)
    }

    fn approximate(&mut self, _beta: &[f64], scores: &ScoreMatrix) -> Result<Vec<EicApprox>> {
        let e = projection_eic(scores, self.d_bar, self.penalty, ProjectionMode::Fixed, self.warm.as_deref())?;
        self.warm = Some(e.alpha.clone());
        Ok(vec![e])
    }
}

struct DeltaProvider<'a> {
    phi: &'a DMatrix<f64>,
    y: &'a [f64],
    intercept: f64,
    dpsi: &'a [f64],
    ridge: f64,
}

impl EicProvider for DeltaProvider<'_> {
    fn scores(&mut self, beta: &[f64]) -> Result<ScoreMatrix> {
        gaussian_scores(self.phi, self.y, self.intercept, beta)
    }

    fn approximate(&mut self, _beta: &[f64], scores: &ScoreMatrix) -> Result<Vec<EicApprox>> {
        Ok(vec![delta_eic(scores, self.dpsi, self.ridge)?])
    }
}

/// Targeting and inference inside a given working model, starting at `init`.
pub fn target_in_model(
    data: &AteData,
    fits: &AteFits,
    model: &WorkingModel,
    init: (f64, &[f64]),
    cfg: &AteConfig,
    intervals: IntervalSet,
) -> Result<AteResult> {
    let phi = model.design(&fits.x_obs)?;
    let phi1 = model.design(&fits.x1)?;
    let phi0 = model.design(&fits.x0)?;
    let dpsi = partials_from_designs(&phi1, &phi0);
    let h = clever_covariate(&fits.g_hat, &data.a)?;
    let d_bar: Vec<f64> = h.iter().zip(&data.y).map(|(h, y)| h * y).collect();
    let (c0, b0) = init;
    if b0.len() != model.n_terms() {
        return invalid("initial coefficients do not match the working model");
    }

    let result: TargetingResult = match cfg.targeting {
        AteTargeting::Relaxed => relaxed_fit(&phi, &data.y, &Family::Gaussian, None, (c0, b0))?,
        AteTargeting::Projection => {
            let mut p = ProjectionProvider {
                phi: &phi,
                y: &data.y,
                intercept: c0,
                d_bar: &d_bar,
                penalty: cfg.projection_penalty,
                warm: None,
            };
            target_1d(c0, b0, &mut p, cfg.settings())?
        }
        AteTargeting::Delta => {
            let mut p = DeltaProvider {
                phi: &phi,
                y: &data.y,
                intercept: c0,
                dpsi: &dpsi,
                ridge: cfg.ridge,
            };
            target_1d(c0, b0, &mut p, cfg.settings())?
        }
        AteTargeting::Direct => target_direct_ate(&phi, &data.y, c0, b0, &h, cfg.direct_penalty)?,
        AteTargeting::Standard => return standard_tmle(data, fits, model, cfg),
    };

    let c = result.intercept;
    let beta = &result.beta_final;
    let q_obs = linear_predictor_from_design(&phi, c, beta);
    let q1 = linear_predictor_from_design(&phi1, c, beta);
    let q0 = linear_predictor_from_design(&phi0, c, beta);
    let psi = mean(&q1.iter().zip(&q0).map(|(a, b)| a - b).collect::<Vec<_>>());

    let np = nonparametric_eic_ate(&q_obs, &q1, &q0, &fits.g_hat, &data.a, &data.y, psi)?;
    let ci_np = Some(wald_ci(psi, &np, cfg.level)?);
    let (mut ci_proj, mut ci_proj_cv, mut ci_delta) = (None, None, None);
    if intervals == IntervalSet::All {
        let scores = gaussian_scores(&phi, &data.y, c, beta)?;
        let proj = projection_eic(&scores, &d_bar, cfg.projection_penalty, ProjectionMode::Fixed, None)?;
        ci_proj = Some(wald_ci(psi, &center(&proj.values), cfg.level)?);
        let proj_cv = projection_eic(
            &scores,
            &d_bar,
            cfg.projection_penalty,
            ProjectionMode::Cv {
                folds: cfg.cv_folds,
                seed: cfg.seed,
            },
            None,
        )?;
        ci_proj_cv = Some(wald_ci(psi, &center(&proj_cv.values), cfg.level)?);
        let delta = delta_eic(&scores, &dpsi, cfg.ridge)?;
        ci_delta = Some(wald_ci(psi, &center(&delta.values), cfg.level)?);
    }
    Ok(AteResult {
        psi,
        ci_np,
        ci_proj,
        ci_proj_cv,
        ci_delta,
        targeting: cfg.targeting,
        rule: model.meta.rule.clone(),
        iterations: result.iterations,
        converged: result.converged,
        n_basis: model.n_terms(),
        intercept: c,
        beta: result.beta_final,
    })
}

/// One linear fluctuation of the initial fit along the truncated clever
/// covariate, with the nonparametric interval.
pub fn standard_tmle(data: &AteData, fits: &AteFits, model: &WorkingModel, cfg: &AteConfig) -> Result<AteResult> {
    let (lo, hi) = cfg.truncation;
    if !(0.0 < lo && lo < hi && hi < 1.0) {
        return invalid("truncation bounds must satisfy 0 < lo < hi < 1");
    }
    let g: Vec<f64> = fits.g_hat.iter().map(|p| p.clamp(lo, hi)).collect();
    let q_obs = model.linear_predictor(&fits.x_obs)?;
    let q1 = model.linear_predictor(&fits.x1)?;
    let q0 = model.linear_predictor(&fits.x0)?;
    let h = clever_covariate(&g, &data.a)?;
    let num: f64 = h.iter().zip(data.y.iter().zip(&q_obs)).map(|(h, (y, q))| h * (y - q)).sum();
    let den: f64 = h.iter().map(|v| v * v).sum();
    let eps = if den > 0.0 { num / den } else { 0.0 };
    let qs_obs: Vec<f64> = q_obs.iter().zip(&h).map(|(q, h)| q + eps * h).collect();
    let qs1: Vec<f64> = q1.iter().zip(&g).map(|(q, g)| q + eps / g).collect();
    let qs0: Vec<f64> = q0.iter().zip(&g).map(|(q, g)| q - eps / (1.0 - g)).collect();
    let psi = mean(&qs1.iter().zip(&qs0).map(|(a, b)| a - b).collect::<Vec<_>>());
    let np = nonparametric_eic_ate(&qs_obs, &qs1, &qs0, &g, &data.a, &data.y, psi)?;
    Ok(AteResult {
        psi,
        ci_np: Some(wald_ci(psi, &np, cfg.level)?),
        ci_proj: None,
        ci_proj_cv: None,
        ci_delta: None,
        targeting: AteTargeting::Standard,
        rule: model.meta.rule.clone(),
        iterations: 1,
        converged: true,
        n_basis: model.n_terms(),
        intercept: model.intercept,
        beta: model.beta.clone(),
    })
}

/// Run one targeting variant given shared nuisance fits.
pub fn estimate_from_fits(data: &AteData, fits: &AteFits, cfg: &AteConfig) -> Result<AteResult> {
    cfg.validate()?;
    let model = working_model(fits, cfg.rule)?;
    let intervals = if cfg.all_intervals {
        IntervalSet::All
    } else {
        IntervalSet::NonparametricOnly
    };
    target_in_model(data, fits, &model, (model.intercept, &model.beta), cfg, intervals)
}

pub fn estimate_ate(data: &AteData, cfg: &AteConfig) -> Result<AteResult> {
    let fits = fit_nuisance(data, cfg)?;
    estimate_from_fits(data, &fits, cfg)
}
