//! L1-penalized generalized linear models fit by coordinate descent.
//!
//! Columns are standardized internally (weighted mean, population SD) and the
//! intercept is unpenalized. The objective is
//! `(1/N) Σ v_i nll_i + λ Σ_j |b̃_j|` on the standardized scale, where `v` are
//! observation weights and `N = Σ v`. Binomial and Poisson fits use
//! proximal-Newton outer iterations around the weighted least-squares solver.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::columns::ColumnStore;
use crate::error::{invalid, Result};

const BINOMIAL_VAR_FLOOR: f64 = 1e-5;
/// Residual-update sweeps before switching to Gram updates.
const NAIVE_SWEEPS: usize = 30;
/// Sweeps between attempts at an exact active-set solve.
const POLISH_EVERY: usize = 25;
pub const PROB_CLIP: f64 = 1e-10;
const ETA_CAP: f64 = 500.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Binomial,
    Poisson,
}

impl FamilyKind {
    /// Mean from the full linear predictor (offset included).
    #[inline]
    pub fn inverse_link(self, eta: f64) -> f64 {
        match self {
            FamilyKind::Gaussian => eta,
            FamilyKind::Binomial => 1.0 / (1.0 + (-eta).exp()),
            FamilyKind::Poisson => eta.min(ETA_CAP).exp(),
        }
    }

    /// Per-observation negative log-likelihood (up to constants).
    #[inline]
    pub fn nll(self, y: f64, eta: f64) -> f64 {
        match self {
            FamilyKind::Gaussian => 0.5 * (y - eta) * (y - eta),
            FamilyKind::Binomial => softplus(eta) - y * eta,
            FamilyKind::Poisson => eta.min(ETA_CAP).exp() - y * eta,
        }
    }

    /// Unit deviance; binomial probabilities are clipped to [1e-10, 1-1e-10].
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            FamilyKind::Gaussian => (y - mu) * (y - mu),
            FamilyKind::Binomial => {
                let p = mu.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                2.0 * (xlogy(y, y / p) + xlogy(1.0 - y, (1.0 - y) / (1.0 - p)))
            }
            FamilyKind::Poisson => {
                let m = mu.max(1e-300);
                2.0 * (xlogy(y, y / m) - (y - m))
            }
        }
    }
}

#[inline]
fn xlogy(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * y.ln()
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn soft_threshold(u: f64, lambda: f64) -> f64 {
    if u > lambda {
        u - lambda
    } else if u < -lambda {
        u + lambda
    } else {
        0.0
    }
}

/// Response family. Poisson may carry per-row exposures (log offset).
#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Gaussian,
    Binomial,
    Poisson { exposure: Option<Vec<f64>> },
}

impl Family {
    pub fn kind(&self) -> FamilyKind {
        match self {
            Family::Gaussian => FamilyKind::Gaussian,
            Family::Binomial => FamilyKind::Binomial,
            Family::Poisson { .. } => FamilyKind::Poisson,
        }
    }

    fn offset(&self, n: usize) -> Result<Option<Vec<f64>>> {
        match self {
            Family::Poisson {
                exposure: Some(e), ..
            } => {
                if e.len() != n {
                    return invalid("exposure length does not match the response");
                }
                if e.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
                    return invalid("exposures must be positive and finite");
                }
                Ok(Some(e.iter().map(|v| v.ln()).collect()))
            }
            _ => Ok(None),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoOptions {
    /// Coordinate-descent tolerance on the scaled coefficient change.
    pub tol: f64,
    pub max_sweeps: usize,
    pub newton_tol: f64,
    pub max_newton: usize,
    /// Stop a path once the deviance ratio saturates.
    pub early_stop: bool,
    /// Cross-validation stops walking the fold paths once the pooled
    /// validation loss has not improved for this many penalties.
    pub cv_patience: Option<usize>,
    /// With `cv_patience`, penalties past the CV minimum kept in the full-data path.
    pub cv_extend: usize,
    /// Penalize standardized coefficients; otherwise the penalty is λ·Σ|β_j|.
    pub standardize: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 10_000,
            newton_tol: 1e-7,
            max_newton: 100,
            early_stop: true,
            cv_patience: None,
            cv_extend: 0,
            standardize: true,
        }
    }
}

/// One fitted point: original-scale intercept and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoFit {
    pub lambda: f64,
    pub intercept: f64,
    pub beta: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LassoPath {
    pub family: FamilyKind,
    pub lambdas: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub coefs: Vec<Vec<f64>>,
    pub active_sets: Vec<Vec<usize>>,
    pub converged: Vec<bool>,
    pub dev_ratio: Vec<f64>,
    pub cv_error: Option<Vec<f64>>,
    pub cv_index: Option<usize>,
}

impl LassoPath {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn l1_norm(&self, k: usize) -> f64 {
        self.coefs[k].iter().map(|b| b.abs()).sum()
    }

    /// Linear predictor (no offset) at path index `k`.
    pub fn linear_predictor<X: ColumnStore + ?Sized>(&self, x: &X, k: usize) -> Vec<f64> {
        let mut eta = vec![self.intercepts[k]; x.n_rows()];
        for &j in &self.active_sets[k] {
            x.column(j).axpy(self.coefs[k][j], &mut eta);
        }
        eta
    }

    pub fn fit(&self, k: usize) -> LassoFit {
        LassoFit {
            lambda: self.lambdas[k],
            intercept: self.intercepts[k],
            beta: self.coefs[k].clone(),
            converged: self.converged[k],
            sweeps: 0,
        }
    }
}

/// Cholesky solve, retried with a small growing ridge when the Gram block is
/// numerically singular.
fn jittered_solve(a: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let base = (a.trace() / a.nrows().max(1) as f64).max(f64::MIN_POSITIVE);
    let mut jitter = 0.0;
    for _ in 0..8 {
        let mut m = a.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(ch) = m.cholesky() {
            return Some(ch.solve(b));
        }
        jitter = if jitter == 0.0 { 1e-13 * base } else { jitter * 10.0 };
    }
    None
}

/// Weighted centered cross-products among a growing set of strong columns.
#[derive(Default)]
struct Gram {
    members: Vec<usize>,
    pos: std::collections::HashMap<usize, usize>,
    cols: Vec<Vec<f64>>,
}

impl Gram {
    fn track<X: ColumnStore + ?Sized>(&mut self, a: usize, s: &Solver<'_, X>, strong: &[usize], s1: &[f64]) {
        if self.pos.contains_key(&a) {
            return;
        }
        let mut dense = vec![0.0; s.rs.len()];
        s.x.column(strong[a]).axpy(1.0, &mut dense);
        let cross = |k: usize| (s.x.column(strong[k]).wdot(&s.w, &dense) - s1[k] * s1[a] / s.sw) / s.n_w;
        let col: Vec<f64> = self.members.iter().map(|&k| cross(k)).chain(std::iter::once(cross(a))).collect();
        for (t, c) in self.cols.iter_mut().enumerate() {
            c.push(col[t]);
        }
        self.pos.insert(a, self.members.len());
        self.members.push(a);
        self.cols.push(col);
    }
}

struct Solver<'a, X: ColumnStore + ?Sized> {
    x: &'a X,
    y: &'a [f64],
    kind: FamilyKind,
    v: Vec<f64>,
    off: Option<Vec<f64>>,
    n_w: f64,
    mean: Vec<f64>,
    sd: Vec<f64>,
    /// Penalty weight of each standardized coordinate.
    pf: Vec<f64>,
    c: f64,
    b: Vec<f64>,
    eta: Vec<f64>,
    w: Vec<f64>,
    rs: Vec<f64>,
    sw: f64,
    swr: f64,
    swx: Vec<f64>,
    xv: Vec<f64>,
    stamp: Vec<u64>,
    version: u64,
    approx_fresh: bool,
    grad: Vec<f64>,
    null_dev: f64,
    scale: f64,
    opts: LassoOptions,
    sweeps: usize,
}

impl<'a, X: ColumnStore + ?Sized> Solver<'a, X> {
    fn new(
        x: &'a X,
        y: &'a [f64],
        family: &Family,
        weights: Option<&[f64]>,
        opts: LassoOptions,
    ) -> Result<Self> {
        let n = x.n_rows();
        let p = x.n_cols();
        if y.len() != n {
            return invalid(format!("response has {} rows, design has {n}", y.len()));
        }
        if n == 0 {
            return invalid("empty design");
        }
        if y.iter().any(|v| !v.is_finite()) {
            return invalid("response contains non-finite values");
        }
        let kind = family.kind();
        match kind {
            FamilyKind::Binomial if y.iter().any(|&v| !(0.0..=1.0).contains(&v)) => {
                return invalid("binomial response must lie in [0, 1]");
            }
            FamilyKind::Poisson if y.iter().any(|&v| v < 0.0) => {
                return invalid("poisson response must be nonnegative");
            }
            _ => {}
        }
        let v = match weights {
            Some(w) => {
                if w.len() != n {
                    return invalid("weight length does not match the response");
                }
                if w.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
                    return invalid("weights must be nonnegative and finite");
                }
                w.to_vec()
            }
            None => vec![1.0; n],
        };
        let n_w: f64 = v.iter().sum();
        if !(n_w > 0.0) {
            return invalid("total observation weight is zero");
        }
        let off = family.offset(n)?;

        let mut mean = vec![0.0; p];
        let mut sd = vec![0.0; p];
        for j in 0..p {
            let col = x.column(j);
            let (s1, _) = col.weighted_moments(&v);
            let m = s1 / n_w;
            let var = col.weighted_centered_ss(&v, m, n_w) / n_w;
            mean[j] = m;
            if var > 1e-20 * m.abs().max(1.0).powi(2) {
                sd[j] = var.sqrt();
            }
        }

        let pf = sd
            .iter()
            .map(|&s| if opts.standardize || s == 0.0 { 1.0 } else { 1.0 / s })
            .collect();
        let mut s = Self {
            x,
            y,
            kind,
            w: if kind == FamilyKind::Gaussian {
                v.clone()
            } else {
                vec![0.0; n]
            },
            v,
            off,
            n_w,
            mean,
            sd,
            pf,
            c: 0.0,
            b: vec![0.0; p],
            eta: vec![0.0; n],
            rs: vec![0.0; n],
            sw: 0.0,
            swr: 0.0,
            swx: vec![0.0; p],
            xv: vec![0.0; p],
            stamp: vec![u64::MAX; p],
            version: 0,
            approx_fresh: false,
            grad: vec![0.0; p],
            null_dev: 0.0,
            scale: 1.0,
            opts,
            sweeps: 0,
        };
        s.c = s.null_intercept();
        s.recompute_eta();
        s.null_dev = s.deviance();
        s.scale = (s.null_dev / s.n_w).sqrt().max(1e-12);
        s.refresh_approx();
        Ok(s)
    }

    fn null_intercept(&self) -> f64 {
        let sy: f64 = self.v.iter().zip(self.y).map(|(v, y)| v * y).sum();
        match self.kind {
            FamilyKind::Gaussian => sy / self.n_w,
            FamilyKind::Binomial => {
                let p = (sy / self.n_w).clamp(PROB_CLIP, 1.0 - PROB_CLIP);
                (p / (1.0 - p)).ln()
            }
            FamilyKind::Poisson => {
                let exposure: f64 = match &self.off {
                    Some(o) => self.v.iter().zip(o).map(|(v, o)| v * o.exp()).sum(),
                    None => self.n_w,
                };
                (sy / exposure).max(PROB_CLIP).ln()
            }
        }
    }

    fn set_state(&mut self, intercept: f64, beta: &[f64]) {
        self.c = intercept;
        for (j, (b, &nb)) in self.b.iter_mut().zip(beta).enumerate() {
            *b = if self.sd[j] > 0.0 { nb } else { 0.0 };
        }
        self.recompute_eta();
        self.refresh_approx();
    }

    fn recompute_eta(&mut self) {
        match &self.off {
            Some(o) => self.eta.copy_from_slice(o),
            None => self.eta.iter_mut().for_each(|e| *e = 0.0),
        }
        for (j, &b) in self.b.iter().enumerate() {
            if b != 0.0 {
                self.x.column(j).axpy(b, &mut self.eta);
            }
        }
        let c = self.c;
        self.eta.iter_mut().for_each(|e| *e += c);
    }

    /// Quadratic approximation (weights and partial residuals) at the current state.
    fn refresh_approx(&mut self) {
        match self.kind {
            FamilyKind::Gaussian => {
                // eta holds c + Xb, rs = y - Xb
                for i in 0..self.rs.len() {
                    self.rs[i] = self.y[i] - self.eta[i] + self.c;
                }
                if self.version == 0 {
                    self.version = 1;
                }
            }
            _ => {
                for i in 0..self.rs.len() {
                    let mu = self.kind.inverse_link(self.eta[i]);
                    let var = match self.kind {
                        FamilyKind::Binomial => (mu * (1.0 - mu)).max(BINOMIAL_VAR_FLOOR),
                        _ => mu.max(1e-300),
                    };
                    self.w[i] = self.v[i] * var;
                    self.rs[i] = self.c + (self.y[i] - mu) / var;
                }
                self.version += 1;
            }
        }
        self.sw = self.w.iter().sum();
        self.swr = self.w.iter().zip(&self.rs).map(|(w, r)| w * r).sum();
        self.approx_fresh = true;
    }

    #[inline]
    fn ensure(&mut self, j: usize) {
        if self.stamp[j] == self.version {
            return;
        }
        let (s1, s2) = self.x.column(j).weighted_moments(&self.w);
        let m = self.mean[j];
        let s = self.sd[j];
        let css = (s2 - 2.0 * m * s1 + m * m * self.sw).max(0.0);
        self.swx[j] = s1;
        self.xv[j] = css / (self.n_w * s * s);
        self.stamp[j] = self.version;
    }

    /// Standardized gradient of the quadratic model at coordinate j.
    #[inline]
    fn coord_grad(&self, j: usize) -> f64 {
        let sxr = self.x.column(j).wdot(&self.w, &self.rs);
        let c = self.c;
        ((sxr - c * self.swx[j]) - self.mean[j] * (self.swr - c * self.sw)) / (self.sd[j] * self.n_w)
    }

    fn full_gradient(&mut self) {
        let p = self.b.len();
        for j in 0..p {
            if self.sd[j] > 0.0 {
                self.ensure(j);
                self.grad[j] = self.coord_grad(j);
            } else {
                self.grad[j] = 0.0;
            }
        }
    }

    fn intercept_gradient(&self) -> f64 {
        (self.swr - self.c * self.sw) / self.n_w
    }

    /// One pass over `coords` plus the intercept; returns the largest scaled squared change.
    fn sweep(&mut self, coords: &[usize], lambda: f64) -> f64 {
        let mut max_d = 0.0f64;
        for &j in coords {
            self.ensure(j);
            let xv = self.xv[j];
            if xv <= 0.0 {
                continue;
            }
            let s = self.sd[j];
            let bt = self.b[j] * s;
            let g = self.coord_grad(j);
            let new = soft_threshold(g + xv * bt, lambda * self.pf[j]) / xv;
            let d = new - bt;
            if d != 0.0 {
                let db = d / s;
                self.x.column(j).axpy(-db, &mut self.rs);
                self.swr -= db * self.swx[j];
                self.c -= db * self.mean[j];
                self.b[j] = new / s;
                max_d = max_d.max(xv * d * d);
            }
        }
        if self.sw > 0.0 {
            let delta = (self.swr - self.c * self.sw) / self.sw;
            self.c += delta;
            max_d = max_d.max(self.sw / self.n_w * delta * delta);
        }
        max_d
    }

    fn cd_quadratic(&mut self, strong: &[usize], lambda: f64) -> bool {
        let tol2 = (self.opts.tol * self.scale).powi(2);
        let start = self.sweeps;
        loop {
            self.swr = self.w.iter().zip(&self.rs).map(|(w, r)| w * r).sum();
            let d = self.sweep(strong, lambda);
            self.sweeps += 1;
            if d < tol2 {
                return true;
            }
            if self.sweeps >= self.opts.max_sweeps {
                return false;
            }
            let active: Vec<usize> = strong.iter().copied().filter(|&j| self.b[j] != 0.0).collect();
            loop {
                if self.sweeps - start >= NAIVE_SWEEPS {
                    return self.cd_covariance(strong, lambda);
                }
                let d = self.sweep(&active, lambda);
                self.sweeps += 1;
                if d < tol2 {
                    break;
                }
                if self.sweeps >= self.opts.max_sweeps {
                    return false;
                }
            }
        }
    }

    /// Hybrid coordinate descent with the intercept profiled out: full passes
    /// over the strong set update the residual directly, passes over the
    /// active set use weighted Gram entries among active columns. Periodic
    /// active-set solves finish ill-conditioned problems exactly.
    fn cd_covariance(&mut self, strong: &[usize], lambda: f64) -> bool {
        let tol2 = (self.opts.tol * self.scale).powi(2);
        let m = strong.len();
        let sw = self.sw;
        let nw = self.n_w;
        if m == 0 || !(sw > 0.0) {
            if sw > 0.0 {
                self.swr = self.w.iter().zip(&self.rs).map(|(w, r)| w * r).sum();
                self.c = self.swr / sw;
            }
            return true;
        }
        let mut s1 = vec![0.0; m];
        let mut h = vec![0.0; m];
        for (a, &j) in strong.iter().enumerate() {
            let (m1, m2) = self.x.column(j).weighted_moments(&self.w);
            s1[a] = m1;
            h[a] = ((m2 - m1 * m1 / sw) / nw).max(0.0);
        }
        let pen: Vec<f64> = strong.iter().map(|&j| lambda * self.sd[j] * self.pf[j]).collect();
        let mut gram = Gram::default();
        let mut g = vec![0.0; m];
        let mut converged = false;
        self.swr = self.w.iter().zip(&self.rs).map(|(w, r)| w * r).sum();
        let mut polished = false;
        let mut floor = f64::INFINITY;

        'outer: while self.sweeps < self.opts.max_sweeps {
            // full pass on the residual
            let mut max_d = 0.0f64;
            for (a, &j) in strong.iter().enumerate() {
                if h[a] <= 0.0 {
                    continue;
                }
                let col = self.x.column(j);
                let ga = (col.wdot(&self.w, &self.rs) - s1[a] / sw * self.swr) / nw;
                let bj = self.b[j];
                let new = soft_threshold(ga + h[a] * bj, pen[a]) / h[a];
                let d = new - bj;
                if d != 0.0 {
                    col.axpy(-d, &mut self.rs);
                    self.swr -= d * s1[a];
                    self.b[j] = new;
                    max_d = max_d.max(h[a] * d * d);
                }
            }
            self.sweeps += 1;
            if max_d < tol2 {
                converged = true;
                break;
            }
            // an exact solve that the residual pass cannot improve on is at
            // the rounding floor of near-constant columns
            if polished {
                if max_d >= 0.5 * floor {
                    converged = true;
                    break;
                }
                floor = max_d;
                polished = false;
            }
            // active passes on the Gram block
            let act: Vec<usize> = (0..m).filter(|&a| self.b[strong[a]] != 0.0).collect();
            for &a in &act {
                gram.track(a, self, strong, &s1);
            }
            for &a in &gram.members {
                g[a] = (self.x.column(strong[a]).wdot(&self.w, &self.rs) - s1[a] / sw * self.swr) / nw;
            }
            let mut moved = vec![0.0; gram.members.len()];
            let mut since_polish = 0;
            loop {
                let mut max_d = 0.0f64;
                for &a in &act {
                    if h[a] <= 0.0 {
                        continue;
                    }
                    let j = strong[a];
                    let bj = self.b[j];
                    let new = soft_threshold(g[a] + h[a] * bj, pen[a]) / h[a];
                    let d = new - bj;
                    if d == 0.0 {
                        continue;
                    }
                    let t = gram.pos[&a];
                    for (u, &k) in gram.members.iter().enumerate() {
                        g[k] -= gram.cols[t][u] * d;
                    }
                    self.b[j] = new;
                    moved[t] += d;
                    max_d = max_d.max(h[a] * d * d);
                }
                self.sweeps += 1;
                since_polish += 1;
                if max_d < tol2 {
                    break;
                }
                if self.sweeps >= self.opts.max_sweeps {
                    self.apply_moved(strong, &gram, &moved, &s1);
                    break 'outer;
                }
                if since_polish >= POLISH_EVERY {
                    since_polish = 0;
                    if self.polish(strong, &pen, &mut g, &gram, &mut moved) {
                        polished = true;
                        break;
                    }
                }
            }
            self.apply_moved(strong, &gram, &moved, &s1);
        }
        self.swr = self.w.iter().zip(&self.rs).map(|(w, r)| w * r).sum();
        self.c = self.swr / sw;
        converged
    }

    fn apply_moved(&mut self, strong: &[usize], gram: &Gram, moved: &[f64], s1: &[f64]) {
        for (t, &d) in moved.iter().enumerate() {
            if d != 0.0 {
                let a = gram.members[t];
                self.x.column(strong[a]).axpy(-d, &mut self.rs);
                self.swr -= d * s1[a];
            }
        }
    }

    /// Active-set refinement over the tracked columns: solve the stationarity
    /// equations for the current signs, step back to the first sign change
    /// when one occurs, otherwise admit the worst violator of the subgradient
    /// bounds. Committed only when every tracked column is optimal.
    fn polish(&mut self, strong: &[usize], pen: &[f64], g: &mut [f64], gram: &Gram, moved: &mut [f64]) -> bool {
        let mem = &gram.members;
        let nt = mem.len();
        let mut bl: Vec<f64> = mem.iter().map(|&a| self.b[strong[a]]).collect();
        let mut gl: Vec<f64> = mem.iter().map(|&a| g[a]).collect();
        let mut act: Vec<usize> = (0..nt).filter(|&t| bl[t] != 0.0).collect();
        let mut sign: Vec<f64> = bl.iter().map(|v| if *v == 0.0 { 0.0 } else { v.signum() }).collect();
        let slack = |t: usize, gl: &[f64]| gl[t].abs() - pen[mem[t]] * (1.0 + 1e-9) - 1e-14 * self.scale;
        let mut fresh: Option<usize> = None;
        for _ in 0..(4 * act.len() + 20) {
            if !act.is_empty() {
                let k = act.len();
                let haa = DMatrix::from_fn(k, k, |r, c| gram.cols[act[c]][act[r]]);
                let rhs = DVector::from_fn(k, |r, _| {
                    let t = act[r];
                    let gb: f64 = act.iter().map(|&c| gram.cols[c][t] * bl[c]).sum();
                    gl[t] + gb - pen[mem[t]] * sign[t]
                });
                let Some(sol) = jittered_solve(haa, &rhs) else {
                    return false;
                };
                if sol.iter().any(|v| !v.is_finite()) {
                    return false;
                }
                let mut step = 1.0;
                let mut hit = None;
                for (r, &t) in act.iter().enumerate() {
                    if sol[r] * sign[t] <= 0.0 {
                        if fresh == Some(t) && bl[t] == 0.0 {
                            return false;
                        }
                        let tr = bl[t] / (bl[t] - sol[r]);
                        if tr < step {
                            step = tr;
                            hit = Some(t);
                        }
                    }
                }
                for (r, &t) in act.iter().enumerate() {
                    let nb = if Some(t) == hit { 0.0 } else { bl[t] + step * (sol[r] - bl[t]) };
                    let d = nb - bl[t];
                    if d != 0.0 {
                        for (u, gu) in gl.iter_mut().enumerate() {
                            *gu -= gram.cols[t][u] * d;
                        }
                    }
                    bl[t] = nb;
                }
                if let Some(hh) = hit {
                    act.retain(|&t| t != hh);
                    sign[hh] = 0.0;
                    fresh = None;
                    continue;
                }
            }
            let worst = (0..nt)
                .filter(|&t| bl[t] == 0.0)
                .map(|t| (t, slack(t, &gl)))
                .filter(|&(_, v)| v > 0.0)
                .max_by(|x, y| x.1.total_cmp(&y.1));
            match worst {
                None => {
                    for t in 0..nt {
                        let j = strong[mem[t]];
                        let d = bl[t] - self.b[j];
                        if d != 0.0 {
                            self.b[j] = bl[t];
                            moved[t] += d;
                        }
                        g[mem[t]] = gl[t];
                    }
                    return true;
                }
                Some((t, _)) => {
                    act.push(t);
                    sign[t] = gl[t].signum();
                    fresh = Some(t);
                }
            }
        }
        false
    }

    fn penalty(&self, lambda: f64) -> f64 {
        lambda
            * self
                .b
                .iter()
                .zip(self.sd.iter().zip(&self.pf))
                .map(|(b, (s, f))| (b * s * f).abs())
                .sum::<f64>()
    }

    fn objective(&self, lambda: f64) -> f64 {
        let loss: f64 = match self.kind {
            FamilyKind::Gaussian => self
                .v
                .iter()
                .zip(&self.rs)
                .map(|(v, r)| 0.5 * v * (r - self.c) * (r - self.c))
                .sum(),
            k => self
                .v
                .iter()
                .zip(self.y)
                .zip(&self.eta)
                .map(|((v, &y), &e)| if *v > 0.0 { v * k.nll(y, e) } else { 0.0 })
                .sum(),
        };
        loss / self.n_w + self.penalty(lambda)
    }

    fn deviance(&self) -> f64 {
        let k = self.kind;
        self.v
            .iter()
            .zip(self.y)
            .zip(&self.eta)
            .map(|((v, &y), &e)| if *v > 0.0 { v * k.unit_deviance(y, k.inverse_link(e)) } else { 0.0 })
            .sum()
    }

    fn newton(&mut self, strong: &[usize], lambda: f64) -> bool {
        if self.kind == FamilyKind::Gaussian {
            let ok = self.cd_quadratic(strong, lambda);
            // keep eta in sync for deviance bookkeeping
            for i in 0..self.eta.len() {
                self.eta[i] = self.y[i] - self.rs[i] + self.c;
            }
            return ok;
        }
        let mut ok = true;
        let mut prev = self.objective(lambda);
        let mut converged_outer = false;
        for _ in 0..self.opts.max_newton {
            if !self.approx_fresh {
                self.refresh_approx();
            }
            self.approx_fresh = false;
            let old_c = self.c;
            let old: Vec<(usize, f64)> = strong.iter().map(|&j| (j, self.b[j])).collect();
            ok &= self.cd_quadratic(strong, lambda);
            self.recompute_eta();
            let mut obj = self.objective(lambda);
            let mut halvings = 0;
            while obj > prev + 1e-13 * prev.abs().max(1.0) && halvings < 30 {
                self.c = 0.5 * (self.c + old_c);
                for &(j, ob) in &old {
                    self.b[j] = 0.5 * (self.b[j] + ob);
                }
                self.recompute_eta();
                obj = self.objective(lambda);
                halvings += 1;
            }
            let mut change = 0.0f64;
            let mut dc = self.c - old_c;
            for &(j, ob) in &old {
                let db = self.b[j] - ob;
                dc += self.mean[j] * db;
                change = change.max(self.xv[j].sqrt() * (db * self.sd[j]).abs());
            }
            change = change.max((self.sw / self.n_w).sqrt() * dc.abs());
            prev = obj;
            if change < self.opts.newton_tol * self.scale.max(1.0) {
                converged_outer = true;
                break;
            }
        }
        self.refresh_approx();
        ok && converged_outer
    }

    /// Solve at `lambda`, screening with the gradient left by the previous solve.
    fn solve_at(&mut self, lambda: f64, lambda_prev: f64) -> bool {
        // rounding noise in the gradient must not activate columns at lambda = 0
        let lambda = lambda.max(1e-13 * self.scale.max(1.0));
        let p = self.b.len();
        let cut = 2.0 * lambda - lambda_prev;
        let mut in_strong = vec![false; p];
        let mut strong = Vec::new();
        for j in 0..p {
            if self.sd[j] > 0.0 && (self.b[j] != 0.0 || self.grad[j].abs() >= cut * self.pf[j]) {
                in_strong[j] = true;
                strong.push(j);
            }
        }
        let mut ok = true;
        loop {
            ok &= self.newton(&strong, lambda);
            self.full_gradient();
            let mut added = false;
            for j in 0..p {
                if !in_strong[j] && self.sd[j] > 0.0 && self.grad[j].abs() > lambda * self.pf[j] {
                    in_strong[j] = true;
                    strong.push(j);
                    added = true;
                }
            }
            if !added || self.sweeps >= self.opts.max_sweeps {
                break;
            }
        }
        ok && self.sweeps < self.opts.max_sweeps
    }

    fn lambda_max(&mut self) -> f64 {
        self.full_gradient();
        // slack for rounding in the null intercept and in (|g| / f) * f
        let lm = self.grad.iter().zip(&self.pf).fold(0.0f64, |a, (g, f)| a.max(g.abs() / f)) * (1.0 + 1e-10);
        if lm < 1e-12 * self.scale.max(1.0) {
            0.0
        } else {
            lm
        }
    }

    /// Solve at `lambda` after `prev_lambda`; returns convergence, the
    /// deviance ratio and whether the saturation rule ends the path here.
    fn advance(&mut self, k: usize, lambda: f64, prev_lambda: f64, prev_ratio: f64) -> (bool, f64, bool) {
        self.sweeps = 0;
        let ok = self.solve_at(lambda, prev_lambda.max(lambda));
        let ratio = if self.null_dev > 0.0 {
            1.0 - self.deviance() / self.null_dev
        } else {
            0.0
        };
        let stop = self.opts.early_stop && k + 1 >= 5 && (ratio > 0.999 || (ratio - prev_ratio) < 1e-5 * ratio);
        (ok, ratio, stop)
    }

    /// Walk the path; `visit(k, solver, converged)` sees each solution.
    fn run_path(
        &mut self,
        lambdas: &[f64],
        mut visit: impl FnMut(usize, &Self, bool, f64),
    ) -> usize {
        self.full_gradient();
        let mut prev_lambda = lambdas.first().copied().unwrap_or(0.0);
        let mut prev_ratio = 0.0;
        for (k, &lambda) in lambdas.iter().enumerate() {
            let (ok, ratio, stop) = self.advance(k, lambda, prev_lambda, prev_ratio);
            visit(k, self, ok, ratio);
            if stop {
                return k + 1;
            }
            prev_lambda = lambda;
            prev_ratio = ratio;
        }
        lambdas.len()
    }

    fn held_out_deviance(&self, held: &[usize], base_w: &[f64], offset: Option<&[f64]>) -> f64 {
        let mut eta = vec![self.c; self.y.len()];
        for (j, &b) in self.b.iter().enumerate() {
            if b != 0.0 {
                self.x.column(j).axpy(b, &mut eta);
            }
        }
        let mut acc = 0.0;
        for &i in held {
            let e = eta[i] + offset.map_or(0.0, |o| o[i]);
            acc += base_w[i] * self.kind.unit_deviance(self.y[i], self.kind.inverse_link(e));
        }
        acc
    }

    fn active(&self) -> Vec<usize> {
        (0..self.b.len()).filter(|&j| self.b[j] != 0.0).collect()
    }
}

/// Fit at a single penalty value.
pub fn solve_lasso<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    lambda: f64,
    warm_start: Option<(f64, &[f64])>,
) -> Result<LassoFit> {
    solve_lasso_weighted(x, y, family, None, lambda, warm_start, LassoOptions::default())
}

pub fn solve_lasso_weighted<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    lambda: f64,
    warm_start: Option<(f64, &[f64])>,
    opts: LassoOptions,
) -> Result<LassoFit> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid("lambda must be nonnegative and finite");
    }
    let mut s = Solver::new(x, y, family, weights, opts)?;
    if let Some((c, b)) = warm_start {
        if b.len() != x.n_cols() {
            return invalid("warm start has the wrong length");
        }
        s.set_state(c, b);
    }
    s.full_gradient();
    let ok = s.solve_at(lambda, lambda);
    if !ok {
        log::warn!("lasso did not converge at lambda={lambda:e} after {} sweeps", s.sweeps);
    }
    Ok(LassoFit {
        lambda,
        intercept: s.c,
        beta: s.b.clone(),
        converged: ok,
        sweeps: s.sweeps,
    })
}

/// Smallest penalty at which every coefficient is zero.
pub fn lambda_max<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
) -> Result<f64> {
    lambda_max_with(x, y, family, weights, LassoOptions::default())
}

/// `lambda_max` under the penalty convention of `opts`.
pub fn lambda_max_with<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    opts: LassoOptions,
) -> Result<f64> {
    let mut s = Solver::new(x, y, family, weights, opts)?;
    Ok(s.lambda_max())
}

/// `n_lambda` values from `lambda_max` down to `ratio * lambda_max`, evenly spaced in log scale.
pub fn geometric_path(lambda_max: f64, n_lambda: usize, ratio: f64) -> Result<Vec<f64>> {
    if n_lambda < 2 {
        return invalid("n_lambda must be at least 2");
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return invalid("ratio must lie in (0, 1)");
    }
    if !(lambda_max >= 0.0 && lambda_max.is_finite()) {
        return invalid("lambda_max must be nonnegative and finite");
    }
    if lambda_max == 0.0 {
        return Ok(vec![0.0]);
    }
    let last = (n_lambda - 1) as f64;
    Ok((0..n_lambda)
        .map(|k| {
            if k == 0 {
                lambda_max
            } else {
                lambda_max * ratio.powf(k as f64 / last)
            }
        })
        .collect())
}

pub fn make_lambda_path<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    n_lambda: usize,
    ratio: f64,
) -> Result<Vec<f64>> {
    make_lambda_path_weighted(x, y, family, None, n_lambda, ratio, LassoOptions::default())
}

pub fn make_lambda_path_weighted<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    n_lambda: usize,
    ratio: f64,
    opts: LassoOptions,
) -> Result<Vec<f64>> {
    let lm = lambda_max_with(x, y, family, weights, opts)?;
    geometric_path(lm, n_lambda, ratio)
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return invalid("empty lambda sequence");
    }
    if lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
        return invalid("lambdas must be nonnegative and finite");
    }
    if lambdas.windows(2).any(|w| w[1] >= w[0]) {
        return invalid("lambdas must be strictly decreasing");
    }
    Ok(())
}

/// Fit the whole sequence with warm starts; may stop early once the fit saturates.
pub fn fit_path<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    lambdas: &[f64],
    opts: LassoOptions,
) -> Result<LassoPath> {
    check_lambdas(lambdas)?;
    let mut s = Solver::new(x, y, family, weights, opts)?;
    let mut path = LassoPath {
        family: family.kind(),
        lambdas: Vec::new(),
        intercepts: Vec::new(),
        coefs: Vec::new(),
        active_sets: Vec::new(),
        converged: Vec::new(),
        dev_ratio: Vec::new(),
        cv_error: None,
        cv_index: None,
    };
    s.run_path(lambdas, |k, s, ok, ratio| {
        if !ok {
            log::warn!("lasso path did not converge at index {k}");
        }
        path.lambdas.push(lambdas[k]);
        path.intercepts.push(s.c);
        path.coefs.push(s.b.clone());
        path.active_sets.push(s.active());
        path.converged.push(ok);
        path.dev_ratio.push(ratio);
    });
    Ok(path)
}

/// Seeded random fold labels in `0..folds`, balanced to within one row.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![0; n];
    for (pos, &i) in perm.iter().enumerate() {
        out[i] = pos % folds.max(1);
    }
    out
}

/// K-fold cross-validation over `lambdas` with a seeded permutation fold split.
pub fn cv_select<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    lambdas: &[f64],
    folds: usize,
    seed: u64,
) -> Result<(LassoPath, usize)> {
    if folds < 2 {
        return invalid("at least two folds are required");
    }
    let ids = fold_assignment(y.len(), folds, seed);
    cv_select_with_folds(x, y, family, None, lambdas, &ids, LassoOptions::default())
}

/// Cross-validation with caller-supplied fold labels. Validation loss is the
/// pooled weighted deviance of held-out rows; the first minimizer is chosen.
pub fn cv_select_with_folds<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    lambdas: &[f64],
    fold_ids: &[usize],
    opts: LassoOptions,
) -> Result<(LassoPath, usize)> {
    if fold_ids.len() != y.len() {
        return invalid("fold labels do not match the response length");
    }
    let k = fold_ids.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return invalid("at least two folds are required");
    }
    let base_w: Vec<f64> = match weights {
        Some(w) => w.to_vec(),
        None => vec![1.0; y.len()],
    };
    let offset = family.offset(y.len())?;
    let held_w: Vec<f64> = (0..k)
        .map(|f| base_w.iter().zip(fold_ids).filter(|(_, &id)| id == f).map(|(w, _)| *w).sum())
        .collect();
    let mut total_w = 0.0;

    struct FoldRun<'a, X: ColumnStore + ?Sized> {
        s: Option<Solver<'a, X>>,
        held: Vec<usize>,
        loss: Vec<f64>,
        prev_lambda: f64,
        prev_ratio: f64,
    }
    let mut runs: Vec<FoldRun<'_, X>> = Vec::with_capacity(k);
    for f in 0..k {
        let train: Vec<f64> = base_w
            .iter()
            .zip(fold_ids)
            .map(|(&w, &id)| if id == f { 0.0 } else { w })
            .collect();
        let usable = held_w[f] > 0.0 && train.iter().any(|&w| w > 0.0);
        if usable {
            total_w += held_w[f];
        }
        let s = if usable {
            let mut s = Solver::new(x, y, family, Some(&train), opts)?;
            s.full_gradient();
            Some(s)
        } else {
            None
        };
        runs.push(FoldRun {
            s,
            held: (0..y.len()).filter(|&i| fold_ids[i] == f).collect(),
            loss: Vec::with_capacity(lambdas.len()),
            prev_lambda: lambdas.first().copied().unwrap_or(0.0),
            prev_ratio: 0.0,
        });
    }

    // fold paths advance in lockstep so the pooled loss can end the walk
    let chunk = opts.cv_patience.map_or(lambdas.len(), |p| p.clamp(1, 5));
    let mut cv_error: Vec<f64> = Vec::with_capacity(lambdas.len());
    let mut best = 0;
    let mut done = 0;
    while done < lambdas.len() {
        let hi = (done + chunk).min(lambdas.len());
        runs.par_iter_mut().for_each(|r| {
            for idx in done..hi {
                let step = match r.s.as_mut() {
                    Some(s) => {
                        let (_, ratio, stop) = s.advance(idx, lambdas[idx], r.prev_lambda, r.prev_ratio);
                        r.prev_lambda = lambdas[idx];
                        r.prev_ratio = ratio;
                        Some((s.held_out_deviance(&r.held, &base_w, offset.as_deref()), stop))
                    }
                    None => None,
                };
                match step {
                    Some((l, stop)) => {
                        r.loss.push(l);
                        if stop {
                            // a fold path that stopped early keeps its last fit
                            r.s = None;
                        }
                    }
                    None => {
                        let last = r.loss.last().copied().unwrap_or(0.0);
                        r.loss.push(last);
                    }
                }
            }
        });
        for idx in done..hi {
            let t: f64 = runs.iter().map(|r| r.loss[idx]).sum();
            cv_error.push(t / total_w);
            if cv_error[idx] < cv_error[best] {
                best = idx;
            }
        }
        done = hi;
        if let Some(p) = opts.cv_patience {
            if done > best + p {
                break;
            }
        }
        if runs.iter().all(|r| r.s.is_none()) {
            break;
        }
    }
    drop(runs);
    let keep = match opts.cv_patience {
        Some(_) => (best + 1 + opts.cv_extend).min(lambdas.len()),
        None => lambdas.len(),
    };
    let mut path = fit_path(x, y, family, weights, &lambdas[..keep], opts)?;
    let len = path.len();
    // penalties the folds never reached carry their last pooled loss
    let last = cv_error.last().copied().unwrap_or(0.0);
    cv_error.resize(len.max(cv_error.len()), last);
    cv_error.truncate(len);
    best = 0;
    for (idx, &e) in cv_error.iter().enumerate() {
        if e < cv_error[best] {
            best = idx;
        }
    }
    path.cv_error = Some(cv_error);
    path.cv_index = Some(best);
    Ok((path, best))
}

/// Penalized objective at a given original-scale fit.
pub fn objective<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    lambda: f64,
    intercept: f64,
    beta: &[f64],
) -> Result<f64> {
    let mut s = Solver::new(x, y, family, weights, LassoOptions::default())?;
    s.set_state(intercept, beta);
    Ok(s.objective(lambda))
}

/// Largest violation of the lasso optimality conditions on the standardized
/// scale, including the intercept score.
pub fn kkt_violation<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    lambda: f64,
    intercept: f64,
    beta: &[f64],
) -> Result<f64> {
    kkt_violation_with(x, y, family, weights, lambda, intercept, beta, LassoOptions::default())
}

/// `kkt_violation` under the penalty convention of `opts`.
#[allow(clippy::too_many_arguments)]
pub fn kkt_violation_with<X: ColumnStore + ?Sized>(
    x: &X,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    lambda: f64,
    intercept: f64,
    beta: &[f64],
    opts: LassoOptions,
) -> Result<f64> {
    if beta.len() != x.n_cols() {
        return invalid("coefficient length does not match the design");
    }
    let mut s = Solver::new(x, y, family, weights, opts)?;
    s.set_state(intercept, beta);
    s.full_gradient();
    let mut worst = s.intercept_gradient().abs();
    for j in 0..beta.len() {
        if s.sd[j] == 0.0 {
            continue;
        }
        let g = s.grad[j];
        let l = lambda * s.pf[j];
        let v = if s.b[j] == 0.0 {
            (g.abs() - l).max(0.0)
        } else {
            (g - l * s.b[j].signum()).abs()
        };
        worst = worst.max(v);
    }
    Ok(worst)
}
