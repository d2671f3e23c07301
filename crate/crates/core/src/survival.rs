//! Marginal survival curves from piecewise-constant intensity HAL fits.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eic::{
    center, delta_eic, hazard_scores, projection_eic, wald_ci, EicApprox, Interval, ProjectionMode,
    ScoreMatrix, DEFAULT_PROJECTION_PENALTY, DEFAULT_RIDGE,
};
use crate::error::{estimation, invalid, HalError, Result};
use crate::glm_lasso::{
    fit_path, fold_assignment, make_lambda_path_weighted, Family, FamilyKind,
    LassoOptions, LassoPath,
};
use crate::hal_basis::{select_knots, BasisFunction};
use crate::rng::Stream;
use crate::targeting::{relaxed_fit, target_multi, EicProvider, TargetingSettings};
use crate::working_model::{
    extract_working_model, undersmooth_select, ModelMeta, UndersmoothRule, WorkingModel,
};

/// Right-censored observations: follow-up time and event indicator.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvData {
    pub time: Vec<f64>,
    pub event: Vec<f64>,
}

impl SurvData {
    pub fn new(time: Vec<f64>, event: Vec<f64>) -> Result<Self> {
        if time.len() != event.len() {
            return invalid("time and event columns differ in length");
        }
        if time.is_empty() {
            return invalid("empty data set");
        }
        if time.iter().any(|&t| !(t > 0.0 && t.is_finite())) {
            return invalid("times must be finite and positive");
        }
        if event.iter().any(|&d| d != 0.0 && d != 1.0) {
            return invalid("event indicators must be 0/1");
        }
        Ok(Self { time, event })
    }

    pub fn n(&self) -> usize {
        self.time.len()
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let find = |name: &str| {
            headers
                .iter()
                .position(|h| h.trim() == name)
                .ok_or_else(|| HalError::InvalidInput(format!("missing column {name}")))
        };
        let (tc, ec) = (find("time")?, find("event")?);
        let mut time = Vec::new();
        let mut event = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let num = |i: usize| -> Result<f64> {
                rec.get(i)
                    .and_then(|s| s.trim().parse::<f64>().ok())
                    .ok_or_else(|| HalError::InvalidInput("unparsable time or event value".into()))
            };
            time.push(num(tc)?);
            event.push(num(ec)?);
        }
        Self::new(time, event)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["time", "event"])?;
        for (t, d) in self.time.iter().zip(&self.event) {
            w.write_record([t.to_string(), d.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Step log-hazard `θ0 + Σ_j θ_j 1{t > q_j}` stored as a working model on time.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardModel {
    pub model: WorkingModel,
}

impl HazardModel {
    pub fn new(knots: &[f64], intercept: f64, beta: Vec<f64>, meta: ModelMeta) -> Result<Self> {
        if knots.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("hazard knots must be strictly increasing");
        }
        let basis = knots
            .iter()
            .map(|&q| BasisFunction::new(vec![0], vec![q], 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model: WorkingModel::new(basis, intercept, beta, FamilyKind::Poisson, meta)?,
        })
    }

    pub fn constant(rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return invalid("rate must be positive");
        }
        Self::new(&[], rate.ln(), Vec::new(), ModelMeta { lambda: None, path_index: None, rule: "constant".into() })
    }

    pub fn knots(&self) -> Vec<f64> {
        self.model.basis.iter().map(|b| b.knots()[0]).collect()
    }

    /// Intercept followed by the knot coefficients.
    pub fn theta(&self) -> Vec<f64> {
        let mut t = vec![self.model.intercept];
        t.extend_from_slice(&self.model.beta);
        t
    }

    pub fn with_theta(&self, theta: &[f64]) -> Result<Self> {
        if theta.len() != self.model.n_terms() + 1 {
            return invalid("coefficient length does not match the hazard model");
        }
        Ok(Self {
            model: self.model.with_coefficients(theta[0], theta[1..].to_vec())?,
        })
    }

    /// Hazard on each segment (0, q_1], (q_1, q_2], ..., (q_m, ∞).
    pub fn segment_rates(&self) -> Vec<f64> {
        step_rates(self.model.intercept, &self.model.beta)
    }

    pub fn hazard(&self, t: f64) -> f64 {
        let knots = self.knots();
        let k = knots.iter().take_while(|&&q| t > q).count();
        self.segment_rates()[k]
    }

    /// ∫_0^t rate_k · 1{u in segment k} du for each segment.
    fn segment_integrals(&self, t: f64) -> Vec<f64> {
        let knots = self.knots();
        let rates = self.segment_rates();
        let m = knots.len();
        (0..=m)
            .map(|k| {
                let lo = if k == 0 { 0.0 } else { knots[k - 1] };
                let hi = if k < m { knots[k].min(t) } else { t };
                rates[k] * (hi - lo).max(0.0)
            })
            .collect()
    }

    pub fn cumulative_hazard(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        self.segment_integrals(t).iter().sum()
    }

    /// Gradient of S(t) in θ: `−S(t) ∫_0^t exp(X(u)'θ) X(u) du`.
    pub fn survival_gradient(&self, t: f64) -> Vec<f64> {
        let seg = self.segment_integrals(t.max(0.0));
        let s = (-seg.iter().sum::<f64>()).exp();
        let mut out = vec![0.0; seg.len()];
        let mut suffix = 0.0;
        for k in (0..seg.len()).rev() {
            suffix += seg[k];
            out[k] = -s * suffix;
        }
        // column 0 is the intercept, which integrates over every segment
        out
    }
}

/// Exact survival `exp(−∫_0^t λ)` of a step hazard.
pub fn survival_from_hazard(model: &HazardModel, t: f64) -> f64 {
    (-model.cumulative_hazard(t)).exp()
}

/// Aggregated Poisson rows: one per (fold, segment) with summed exposure and
/// event counts. Row `r` lies in segment `segment[r]`.
#[derive(Debug, Clone)]
pub struct RepeatedData {
    pub knots: Vec<f64>,
    pub segment: Vec<usize>,
    pub fold: Vec<usize>,
    pub exposure: Vec<f64>,
    pub events: Vec<f64>,
}

impl RepeatedData {
    /// Step design with one column per knot: entry (r, j) is 1{segment[r] > j}.
    pub fn design(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.segment.len(), self.knots.len(), |r, j| {
            if self.segment[r] > j {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Design restricted to the knots at `cols`.
    pub fn design_cols(&self, cols: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(self.segment.len(), cols.len(), |r, j| {
            if self.segment[r] > cols[j] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Split each subject's follow-up at the knots and sum exposures and event
/// counts within (fold, segment). The Poisson log likelihood is additive, so
/// aggregation leaves it unchanged up to a constant.
pub fn repeated_data(times: &[f64], events: &[f64], knots: &[f64], folds: &[usize]) -> Result<RepeatedData> {
    if times.len() != events.len() || times.len() != folds.len() {
        return invalid("times, events and folds differ in length");
    }
    if knots.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("knots must be strictly increasing");
    }
    let m = knots.len();
    let n_folds = folds.iter().max().map_or(1, |f| f + 1);
    let mut expo = vec![vec![0.0; m + 1]; n_folds];
    let mut ev = vec![vec![0.0; m + 1]; n_folds];
    for i in 0..times.len() {
        let t = times[i];
        let f = folds[i];
        for k in 0..=m {
            let lo = if k == 0 { 0.0 } else { knots[k - 1] };
            if t <= lo {
                break;
            }
            let hi = if k < m { knots[k].min(t) } else { t };
            expo[f][k] += hi - lo;
            if events[i] != 0.0 && (k == m || t <= knots[k]) {
                ev[f][k] += events[i];
            }
        }
    }
    let mut out = RepeatedData {
        knots: knots.to_vec(),
        segment: Vec::new(),
        fold: Vec::new(),
        exposure: Vec::new(),
        events: Vec::new(),
    };
    for f in 0..n_folds {
        for k in 0..=m {
            if expo[f][k] > 0.0 {
                out.segment.push(k);
                out.fold.push(f);
                out.exposure.push(expo[f][k]);
                out.events.push(ev[f][k]);
            }
        }
    }
    Ok(out)
}

/// Which process an intensity fit models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HazardKind {
    Failure,
    Censoring,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HazardFitConfig {
    pub n_knots: usize,
    pub folds: usize,
    pub seed: u64,
    pub rule: UndersmoothRule,
    pub n_lambda: usize,
    pub lambda_ratio: f64,
}

impl HazardFitConfig {
    pub fn failure(seed: u64) -> Self {
        Self {
            n_knots: 100,
            folds: 10,
            seed,
            rule: UndersmoothRule::Cv,
            n_lambda: 100,
            lambda_ratio: 1e-4,
        }
    }

    pub fn censoring(seed: u64) -> Self {
        Self {
            n_knots: 50,
            ..Self::failure(seed)
        }
    }
}

/// Knots at empirical percentiles of the observed times of the modelled
/// process; a knot at the largest such time is dropped since no event can
/// follow it.
pub fn intensity_knots(times: &[f64], indicator: &[f64], n_knots: usize) -> Result<Vec<f64>> {
    let obs: Vec<f64> = times
        .iter()
        .zip(indicator)
        .filter(|(_, &d)| d != 0.0)
        .map(|(&t, _)| t)
        .collect();
    if obs.is_empty() {
        return estimation("no events to place hazard knots");
    }
    let last = obs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut knots = select_knots(&obs, n_knots.max(1))?;
    knots.retain(|&q| q < last);
    Ok(knots)
}

impl RepeatedData {
    /// Sum rows over the folds selected by `keep`, one row per segment.
    fn collapse(&self, keep: impl Fn(usize) -> bool) -> RepeatedData {
        let m = self.knots.len();
        let mut expo = vec![0.0; m + 1];
        let mut ev = vec![0.0; m + 1];
        for r in 0..self.segment.len() {
            if keep(self.fold[r]) {
                expo[self.segment[r]] += self.exposure[r];
                ev[self.segment[r]] += self.events[r];
            }
        }
        let mut out = RepeatedData {
            knots: self.knots.clone(),
            segment: Vec::new(),
            fold: Vec::new(),
            exposure: Vec::new(),
            events: Vec::new(),
        };
        for k in 0..=m {
            if expo[k] > 0.0 {
                out.segment.push(k);
                out.fold.push(0);
                out.exposure.push(expo[k]);
                out.events.push(ev[k]);
            }
        }
        out
    }

    fn family(&self) -> Family {
        Family::Poisson {
            exposure: Some(self.exposure.clone()),
        }
    }
}

/// Intensity HAL: Poisson lasso on repeated data with subject-level CV folds.
/// Each fit sees its training subjects collapsed to one row per segment; the
/// held-out loss is the Poisson deviance of the held-out fold's segment rows.
/// Returns the selected hazard model, the full-data path and the full-data
/// collapsed rows.
pub fn fit_intensity_hal(
    data: &SurvData,
    kind: HazardKind,
    cfg: &HazardFitConfig,
) -> Result<(HazardModel, LassoPath, RepeatedData)> {
    let indicator: Vec<f64> = match kind {
        HazardKind::Failure => data.event.clone(),
        HazardKind::Censoring => data.event.iter().map(|d| 1.0 - d).collect(),
    };
    let knots = intensity_knots(&data.time, &indicator, cfg.n_knots)?;
    let n_folds = cfg.folds.min(data.n()).max(2);
    let folds = fold_assignment(data.n(), n_folds, cfg.seed);
    let by_fold = repeated_data(&data.time, &indicator, &knots, &folds)?;
    let full = by_fold.collapse(|_| true);
    let x = full.design();
    let opts = LassoOptions::default();
    let lambdas = make_lambda_path_weighted(&x, &full.events, &full.family(), None, cfg.n_lambda, cfg.lambda_ratio, opts)?;
    let mut path = fit_path(&x, &full.events, &full.family(), None, &lambdas, opts)?;
    let lambdas = path.lambdas.clone();
    let per_fold: Vec<Vec<f64>> = (0..n_folds)
        .into_par_iter()
        .map(|k| -> Result<Vec<f64>> {
            let train = by_fold.collapse(|f| f != k);
            let fp = fit_path(&train.design(), &train.events, &train.family(), None, &lambdas, opts)?;
            let rows: Vec<usize> = (0..by_fold.segment.len()).filter(|&r| by_fold.fold[r] == k).collect();
            Ok((0..lambdas.len())
                .map(|l| {
                    let li = l.min(fp.len() - 1);
                    let rates = step_rates(fp.intercepts[li], &fp.coefs[li]);
                    rows.iter()
                        .map(|&r| {
                            let mu = by_fold.exposure[r] * rates[by_fold.segment[r]];
                            FamilyKind::Poisson.unit_deviance(by_fold.events[r], mu)
                        })
                        .sum()
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let cv: Vec<f64> = (0..lambdas.len()).map(|l| per_fold.iter().map(|f| f[l]).sum()).collect();
    let best = cv
        .iter()
        .enumerate()
        .fold(0, |b, (l, &e)| if e < cv[b] { l } else { b });
    path.cv_error = Some(cv);
    path.cv_index = Some(best);
    let k = undersmooth_select(&path, cfg.rule)?;
    let basis: Vec<BasisFunction> = knots
        .iter()
        .map(|&q| BasisFunction::new(vec![0], vec![q], 0))
        .collect::<Result<_>>()?;
    let mut wm = extract_working_model(&path, &basis, k)?;
    wm.meta.rule = cfg.rule.label();
    Ok((HazardModel { model: wm }, path, full))
}

fn step_rates(intercept: f64, beta: &[f64]) -> Vec<f64> {
    let mut acc = intercept;
    let mut out = vec![acc.exp()];
    for b in beta {
        acc += b;
        out.push(acc.exp());
    }
    out
}

/// `g_i(s) = 1{δ_i = 1, t̃_i > s} / P(C > t̃_i)`, one column per grid point.
pub fn initial_gradient(data: &SurvData, censor: &HazardModel, grid: &[f64]) -> Result<DMatrix<f64>> {
    let g: Vec<f64> = data.time.iter().map(|&t| survival_from_hazard(censor, t)).collect();
    initial_gradient_with(data, &g, grid)
}

fn initial_gradient_with(data: &SurvData, censor_surv: &[f64], grid: &[f64]) -> Result<DMatrix<f64>> {
    let n = data.n();
    let mut out = DMatrix::zeros(n, grid.len());
    for i in 0..n {
        if data.event[i] == 0.0 {
            continue;
        }
        let g = censor_surv[i];
        if !(g >= 1e-12) {
            return estimation(format!(
                "censoring survival {g:e} at time {} is below 1e-12",
                data.time[i]
            ));
        }
        for (j, &s) in grid.iter().enumerate() {
            if data.time[i] > s {
                out[(i, j)] = 1.0 / g;
            }
        }
    }
    Ok(out)
}

/// Delta-method direction for S(s): ridge-regularized inverse Fisher times dS/dθ.
pub fn delta_gamma_survival(model: &HazardModel, scores: &ScoreMatrix, s: f64, eta: f64) -> Result<EicApprox> {
    if !(s > 0.0) {
        return invalid("grid point must be positive");
    }
    let mut e = delta_eic(scores, &model.survival_gradient(s), eta)?;
    e.target_id = s;
    Ok(e)
}

/// Level quantile of `max_j |Z_j|` with Z Gaussian under the empirical
/// correlation of the EIC columns. Zero-variance columns are left out.
pub fn simultaneous_quantile(eic: &DMatrix<f64>, level: f64, draws: usize, seed: u64) -> Result<f64> {
    if eic.ncols() == 0 {
        return invalid("need at least one EIC column");
    }
    if draws < 1000 {
        return invalid("at least 1000 Monte Carlo draws are required");
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid("level must lie in (0, 1)");
    }
    let n = eic.nrows() as f64;
    let mut cols = Vec::new();
    for j in 0..eic.ncols() {
        let c = eic.column(j);
        let m = c.mean();
        let v = c.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
        if v > 0.0 && v.is_finite() {
            cols.push((j, m, v.sqrt()));
        } else {
            log::warn!("EIC column {j} has zero variance and is left out of the band");
        }
    }
    if cols.is_empty() {
        return estimation("every EIC column has zero variance");
    }
    let m = cols.len();
    let mut corr = DMatrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let (ja, ma, sa) = cols[a];
            let (jb, mb, sb) = cols[b];
            let cov = eic
                .column(ja)
                .iter()
                .zip(eic.column(jb).iter())
                .map(|(x, y)| (x - ma) * (y - mb))
                .sum::<f64>()
                / n;
            corr[(a, b)] = cov / (sa * sb);
            corr[(b, a)] = corr[(a, b)];
        }
    }
    let eig = SymmetricEigen::new(corr);
    let root = DMatrix::from_fn(m, m, |i, k| eig.eigenvectors[(i, k)] * eig.eigenvalues[k].max(0.0).sqrt());
    let mut rng = Stream::new(seed);
    let mut maxima: Vec<f64> = (0..draws)
        .map(|_| {
            let e = DVector::from_fn(m, |_, _| rng.normal());
            (&root * e).amax()
        })
        .collect();
    maxima.sort_by(|a, b| a.total_cmp(b));
    let rank = ((level * draws as f64).ceil() as usize).clamp(1, draws);
    Ok(maxima[rank - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurvTargeting {
    Relaxed,
    Projection,
    Delta,
}

impl SurvTargeting {
    pub const ALL: [SurvTargeting; 3] = [SurvTargeting::Relaxed, SurvTargeting::Projection, SurvTargeting::Delta];

    pub fn label(&self) -> &'static str {
        match self {
            SurvTargeting::Relaxed => "relaxed",
            SurvTargeting::Projection => "projection",
            SurvTargeting::Delta => "delta",
        }
    }
}

impl fmt::Display for SurvTargeting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SurvTargeting {
    type Err = HalError;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|t| t.label() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| HalError::InvalidInput(format!("unknown survival targeting '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvConfig {
    pub targeting: SurvTargeting,
    pub undersmooth: bool,
    pub seed: u64,
    /// Explicit grid; otherwise `grid_size` quantiles of the event times.
    pub grid: Option<Vec<f64>>,
    pub grid_size: usize,
    pub failure_knots: usize,
    pub censoring_knots: usize,
    pub cv_folds: usize,
    pub projection_penalty: f64,
    pub ridge: f64,
    pub step: f64,
    pub max_iter: usize,
    pub level: f64,
    pub band_draws: usize,
    /// Also compute projection intervals under every targeting and the
    /// cross-validated projection intervals.
    pub all_intervals: bool,
}

impl Default for SurvConfig {
    fn default() -> Self {
        Self {
            targeting: SurvTargeting::Projection,
            undersmooth: false,
            seed: 1,
            grid: None,
            grid_size: 20,
            failure_knots: 100,
            censoring_knots: 50,
            cv_folds: 10,
            projection_penalty: DEFAULT_PROJECTION_PENALTY,
            ridge: DEFAULT_RIDGE,
            step: TargetingSettings::SURVIVAL.step,
            max_iter: TargetingSettings::SURVIVAL.max_iter,
            level: 0.95,
            band_draws: 10_000,
            all_intervals: true,
        }
    }
}

impl SurvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.failure_knots == 0 || self.censoring_knots == 0 {
            return invalid("grid size and knot counts must be positive");
        }
        if !(self.step > 0.0) || !(self.ridge > 0.0) || !(self.projection_penalty >= 0.0) {
            return invalid("step and ridge must be positive, penalty nonnegative");
        }
        if self.cv_folds < 2 {
            return invalid("at least two CV folds are required");
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return invalid("level must lie in (0, 1)");
        }
        if let Some(g) = &self.grid {
            if g.is_empty() || g.windows(2).any(|w| w[0] >= w[1]) || g.iter().any(|&s| !(s > 0.0)) {
                return invalid("grid must be positive and strictly increasing");
            }
        }
        Ok(())
    }
}

/// `size` quantiles of the event times at levels k/(size+1), strictly inside
/// the observed range, deduplicated.
pub fn default_grid(data: &SurvData, size: usize) -> Result<Vec<f64>> {
    let mut ev: Vec<f64> = data
        .time
        .iter()
        .zip(&data.event)
        .filter(|(_, &d)| d != 0.0)
        .map(|(&t, _)| t)
        .collect();
    if ev.is_empty() {
        return estimation("no events observed");
    }
    ev.sort_by(|a, b| a.total_cmp(b));
    let lo = ev[0];
    let hi = ev[ev.len() - 1];
    let mut grid: Vec<f64> = Vec::with_capacity(size);
    for k in 1..=size {
        let rank = (k * ev.len()).div_ceil(size + 1).max(1);
        let q = ev[rank - 1];
        if q > lo && q < hi && grid.last().map_or(true, |&l| q > l) {
            grid.push(q);
        }
    }
    if grid.is_empty() {
        return estimation("too few distinct event times for a grid");
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurvCurveResult {
    pub grid: Vec<f64>,
    pub estimates: Vec<f64>,
    pub ci_proj: Option<Vec<Interval>>,
    pub ci_proj_cv: Option<Vec<Interval>>,
    pub ci_delta: Option<Vec<Interval>>,
    pub band: Vec<(f64, f64)>,
    pub z_band: f64,
    pub targeting: SurvTargeting,
    pub rule: String,
    pub iterations: usize,
    pub converged: bool,
    pub n_basis: usize,
    /// Targeted log-hazard coefficients, intercept first.
    pub theta: Vec<f64>,
}

impl SurvCurveResult {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "s", "S_hat", "proj_lo", "proj_hi", "proj_cv_lo", "proj_cv_hi", "delta_lo", "delta_hi", "band_lo", "band_hi",
        ])?;
        let fmt_ci = |c: &Option<Vec<Interval>>, j: usize| -> [String; 2] {
            match c {
                Some(v) => [v[j].lower.to_string(), v[j].upper.to_string()],
                None => [String::new(), String::new()],
            }
        };
        for j in 0..self.grid.len() {
            let [a, b] = fmt_ci(&self.ci_proj, j);
            let [c, d] = fmt_ci(&self.ci_proj_cv, j);
            let [e, f] = fmt_ci(&self.ci_delta, j);
            w.write_record([
                self.grid[j].to_string(),
                self.estimates[j].to_string(),
                a,
                b,
                c,
                d,
                e,
                f,
                self.band[j].0.to_string(),
                self.band[j].1.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct HazardProvider<'a> {
    data: &'a SurvData,
    base: &'a HazardModel,
    knots: Vec<f64>,
    grid: &'a [f64],
    gradient: &'a DMatrix<f64>,
    kind: SurvTargeting,
    penalty: f64,
    ridge: f64,
    warm: Vec<Option<Vec<f64>>>,
}

impl EicProvider for HazardProvider<'_> {
    fn scores(&mut self, theta: &[f64]) -> Result<ScoreMatrix> {
        hazard_scores(&self.knots, theta, &self.data.time, &self.data.event)
    }

    fn approximate(&mut self, theta: &[f64], scores: &ScoreMatrix) -> Result<Vec<EicApprox>> {
        match self.kind {
            SurvTargeting::Delta => {
                let model = self.base.with_theta(theta)?;
                self.grid
                    .iter()
                    .map(|&s| delta_gamma_survival(&model, scores, s, self.ridge))
                    .collect()
            }
            _ => {
                let out: Vec<EicApprox> = self
                    .grid
                    .par_iter()
                    .enumerate()
                    .map(|(j, &s)| {
                        let d_bar: Vec<f64> = self.gradient.column(j).iter().copied().collect();
                        let mut e = projection_eic(scores, &d_bar, self.penalty, ProjectionMode::Fixed, self.warm[j].as_deref())?;
                        e.target_id = s;
                        Ok(e)
                    })
                    .collect::<Result<_>>()?;
                for (w, e) in self.warm.iter_mut().zip(&out) {
                    *w = Some(e.alpha.clone());
                }
                Ok(out)
            }
        }
    }
}

fn eic_columns(eics: &[EicApprox]) -> DMatrix<f64> {
    let n = eics.first().map_or(0, |e| e.values.len());
    DMatrix::from_fn(n, eics.len(), |i, j| eics[j].values[i])
}

/// Hazard fits, grid and initial gradient shared by every targeting variant.
#[derive(Debug, Clone)]
pub struct SurvFits {
    pub grid: Vec<f64>,
    pub hazard: HazardModel,
    pub rows: RepeatedData,
    pub gradient: DMatrix<f64>,
    pub rule: String,
}

pub fn fit_survival_nuisance(data: &SurvData, cfg: &SurvConfig) -> Result<SurvFits> {
    cfg.validate()?;
    if data.event.iter().all(|&d| d == 0.0) {
        return estimation("no events observed");
    }
    let grid = match &cfg.grid {
        Some(g) => g.clone(),
        None => default_grid(data, cfg.grid_size)?,
    };
    let rule = if cfg.undersmooth {
        UndersmoothRule::SURVIVAL_DEFAULT
    } else {
        UndersmoothRule::Cv
    };
    let fail_cfg = HazardFitConfig {
        n_knots: cfg.failure_knots,
        folds: cfg.cv_folds,
        rule,
        ..HazardFitConfig::failure(cfg.seed)
    };
    let (hazard, _, rows) = fit_intensity_hal(data, HazardKind::Failure, &fail_cfg)?;
    let censor_surv: Vec<f64> = if data.event.iter().all(|&d| d == 1.0) {
        vec![1.0; data.n()]
    } else {
        let cens_cfg = HazardFitConfig {
            n_knots: cfg.censoring_knots,
            folds: cfg.cv_folds,
            ..HazardFitConfig::censoring(cfg.seed)
        };
        let (cm, _, _) = fit_intensity_hal(data, HazardKind::Censoring, &cens_cfg)?;
        data.time.iter().map(|&t| survival_from_hazard(&cm, t)).collect()
    };
    let gradient = initial_gradient_with(data, &censor_surv, &grid)?;
    Ok(SurvFits {
        grid,
        hazard,
        rows,
        gradient,
        rule: rule.label(),
    })
}

/// Full survival-curve pipeline: intensity fits, targeting over the grid and
/// pointwise and simultaneous intervals.
pub fn estimate_survival_curve(data: &SurvData, cfg: &SurvConfig) -> Result<SurvCurveResult> {
    let fits = fit_survival_nuisance(data, cfg)?;
    estimate_survival_from_fits(data, &fits, cfg)
}

/// Targeting and intervals given shared fits; `cfg.grid` is ignored in favour of `fits.grid`.
pub fn estimate_survival_from_fits(data: &SurvData, fits: &SurvFits, cfg: &SurvConfig) -> Result<SurvCurveResult> {
    cfg.validate()?;
    let grid = fits.grid.clone();
    let hazard = &fits.hazard;
    let rep = &fits.rows;
    let gradient = &fits.gradient;
    let knots = hazard.knots();
    let settings = TargetingSettings {
        step: cfg.step,
        max_iter: cfg.max_iter,
    };
    let theta0 = hazard.theta();
    let mut provider = HazardProvider {
        data,
        base: hazard,
        knots: knots.clone(),
        grid: &grid,
        gradient,
        kind: cfg.targeting,
        penalty: cfg.projection_penalty,
        ridge: cfg.ridge,
        warm: vec![None; grid.len()],
    };

    let (theta, iterations, converged) = match cfg.targeting {
        SurvTargeting::Relaxed => {
            let cols: Vec<usize> = {
                // column positions of the working-model knots in the repeated design
                knots
                    .iter()
                    .map(|q| rep.knots.iter().position(|r| r == q).expect("working knot in grid"))
                    .collect()
            };
            let phi = rep.design_cols(&cols);
            let fam = Family::Poisson {
                exposure: Some(rep.exposure.clone()),
            };
            let r = relaxed_fit(&phi, &rep.events, &fam, None, (theta0[0], &theta0[1..]))?;
            let mut t = vec![r.intercept];
            t.extend(r.beta_final);
            (t, r.iterations, r.converged)
        }
        _ => {
            let r = target_multi(0.0, &theta0, &mut provider, settings)?;
            (r.beta_final, r.iterations, r.converged)
        }
    };
    let fitted = hazard.with_theta(&theta)?;
    let estimates: Vec<f64> = grid.iter().map(|&s| survival_from_hazard(&fitted, s)).collect();
    if estimates.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || estimates.windows(2).any(|w| w[1] > w[0]) {
        return estimation("survival estimates left (0, 1] or increased over the grid");
    }

    let scores = hazard_scores(&knots, &theta, &data.time, &data.event)?;
    let intervals = |eics: &[EicApprox]| -> Result<Vec<Interval>> {
        eics.iter()
            .zip(&estimates)
            .map(|(e, &psi)| wald_ci(psi, &center(&e.values), cfg.level))
            .collect()
    };

    let mut ci_proj = None;
    let mut ci_proj_cv = None;
    let mut band_eic: Option<Vec<EicApprox>> = None;
    if cfg.all_intervals || cfg.targeting == SurvTargeting::Projection {
        provider.kind = SurvTargeting::Projection;
        let proj = provider.approximate(&theta, &scores)?;
        ci_proj = Some(intervals(&proj)?);
        if cfg.targeting == SurvTargeting::Projection {
            band_eic = Some(proj);
        }
        if cfg.all_intervals {
            let cv: Vec<EicApprox> = (0..grid.len())
                .into_par_iter()
                .map(|j| {
                    let d_bar: Vec<f64> = gradient.column(j).iter().copied().collect();
                    projection_eic(
                        &scores,
                        &d_bar,
                        cfg.projection_penalty,
                        ProjectionMode::Cv {
                            folds: cfg.cv_folds,
                            seed: cfg.seed,
                        },
                        None,
                    )
                })
                .collect::<Result<_>>()?;
            ci_proj_cv = Some(intervals(&cv)?);
        }
    }
    let delta: Vec<EicApprox> = grid
        .iter()
        .map(|&s| delta_gamma_survival(&fitted, &scores, s, cfg.ridge))
        .collect::<Result<_>>()?;
    let ci_delta = Some(intervals(&delta)?);
    if band_eic.is_none() {
        band_eic = Some(delta);
    }
    let band_eic = band_eic.expect("band EIC computed");
    let cols = eic_columns(&band_eic);
    let centered = DMatrix::from_fn(cols.nrows(), cols.ncols(), |i, j| cols[(i, j)] - cols.column(j).mean());
    let z = simultaneous_quantile(&centered, cfg.level, cfg.band_draws, crate::rng::derive_seed(cfg.seed, 0, "band"))?;
    let nf = data.n() as f64;
    let band = (0..grid.len())
        .map(|j| {
            let sd = (centered.column(j).iter().map(|v| v * v).sum::<f64>() / (nf - 1.0)).sqrt();
            let se = sd / nf.sqrt();
            (estimates[j] - z * se, estimates[j] + z * se)
        })
        .collect();

    Ok(SurvCurveResult {
        grid,
        estimates,
        ci_proj,
        ci_proj_cv,
        ci_delta,
        band,
        z_band: z,
        targeting: cfg.targeting,
        rule: fits.rule.clone(),
        iterations,
        converged,
        n_basis: knots.len() + 1,
        theta,
    })
}
