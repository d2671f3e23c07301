//! Targeting loops over working-model coefficients.

use std::io::Write;

use nalgebra::{DMatrix, DVector};

use crate::eic::{contract, EicApprox, ScoreMatrix};
use crate::error::{invalid, Result};
use crate::glm_lasso::{solve_lasso_weighted, Family, FamilyKind, LassoOptions};
use crate::linalg::min_norm_lstsq;
use crate::stats::{mean, median, sample_sd};
use crate::working_model::linear_predictor_from_design;

/// Supplies scores and EIC approximations at the current coefficients.
pub trait EicProvider {
    fn scores(&mut self, beta: &[f64]) -> Result<ScoreMatrix>;
    /// One approximation per target coordinate.
    fn approximate(&mut self, beta: &[f64], scores: &ScoreMatrix) -> Result<Vec<EicApprox>>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetingSettings {
    pub step: f64,
    pub max_iter: usize,
}

impl TargetingSettings {
    pub const ATE: TargetingSettings = TargetingSettings {
        step: 1e-4,
        max_iter: 5000,
    };
    pub const SURVIVAL: TargetingSettings = TargetingSettings {
        step: 1e-3,
        max_iter: 5000,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    /// |P_n D*| in one dimension, ‖d‖₂/√|S| otherwise.
    pub criterion: f64,
    pub threshold: f64,
    /// Scores were evaluated at exactly the current coefficients.
    pub scores_current: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetingResult {
    pub intercept: f64,
    pub beta_final: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub final_eic_mean: Vec<f64>,
    /// Final approximations, evaluated at `beta_final`.
    pub final_eic: Vec<EicApprox>,
    pub trace: Vec<TraceRow>,
}

impl TargetingResult {
    pub fn write_trace_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["iteration", "criterion", "threshold"])?;
        for r in &self.trace {
            w.write_record([
                r.iteration.to_string(),
                format!("{:e}", r.criterion),
                format!("{:e}", r.threshold),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `se / (√n log n)` with se the sample SD of the EIC values.
pub fn stop_threshold(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    sample_sd(values) / (n.sqrt() * n.ln())
}

fn check_settings(s: &TargetingSettings) -> Result<()> {
    if !(s.step > 0.0 && s.step.is_finite()) {
        return invalid("step must be positive");
    }
    Ok(())
}

fn evaluate(
    provider: &mut dyn EicProvider,
    beta: &[f64],
) -> Result<(Vec<EicApprox>, bool)> {
    let scores = provider.scores(beta)?;
    let current = scores.beta_at.len() == beta.len()
        && scores.beta_at.iter().zip(beta).all(|(a, b)| a.to_bits() == b.to_bits());
    let eics = provider.approximate(beta, &scores)?;
    if eics.is_empty() {
        return invalid("provider returned no approximations");
    }
    if eics.iter().any(|e| e.alpha.len() != beta.len()) {
        return invalid("direction length does not match the coefficients");
    }
    Ok((eics, current))
}

/// Move along `sign(P_n D*) α` in steps of `step` until
/// `|P_n D*| < se/(√n log n)`.
pub fn target_1d(
    intercept: f64,
    beta0: &[f64],
    provider: &mut dyn EicProvider,
    settings: TargetingSettings,
) -> Result<TargetingResult> {
    check_settings(&settings)?;
    let mut beta = beta0.to_vec();
    let mut trace = Vec::new();
    for iter in 0..=settings.max_iter {
        let (eics, current) = evaluate(provider, &beta)?;
        let eic = &eics[0];
        let d = mean(&eic.values);
        let thr = stop_threshold(&eic.values);
        trace.push(TraceRow {
            iteration: iter,
            criterion: d.abs(),
            threshold: thr,
            scores_current: current,
        });
        if d.abs() < thr || d == 0.0 || iter == settings.max_iter {
            let converged = d.abs() < thr || d == 0.0;
            if !converged {
                log::warn!("targeting stopped at the iteration cap with |Pn D*| = {:e}", d.abs());
            }
            return Ok(TargetingResult {
                intercept,
                beta_final: beta,
                iterations: iter,
                converged,
                final_eic_mean: vec![d],
                final_eic: eics,
                trace,
            });
        }
        let sign = d.signum();
        for (b, &a) in beta.iter_mut().zip(&eic.alpha) {
            *b += settings.step * (sign * a);
        }
    }
    unreachable!()
}

/// Multi-target universal path: step along `Σ_s (d_s/‖d‖) α_s` until
/// `‖d‖/√|S| < median_s se_s/(√n log n)`.
pub fn target_multi(
    intercept: f64,
    beta0: &[f64],
    provider: &mut dyn EicProvider,
    settings: TargetingSettings,
) -> Result<TargetingResult> {
    check_settings(&settings)?;
    let mut beta = beta0.to_vec();
    let mut trace = Vec::new();
    for iter in 0..=settings.max_iter {
        let (eics, current) = evaluate(provider, &beta)?;
        let d: Vec<f64> = eics.iter().map(|e| mean(&e.values)).collect();
        let norm = if d.len() == 1 {
            d[0].abs()
        } else {
            d.iter().map(|v| v * v).sum::<f64>().sqrt()
        };
        let ses: Vec<f64> = eics.iter().map(|e| stop_threshold(&e.values)).collect();
        let thr = median(&ses);
        let crit = norm / (d.len() as f64).sqrt();
        trace.push(TraceRow {
            iteration: iter,
            criterion: crit,
            threshold: thr,
            scores_current: current,
        });
        let converged = crit < thr || norm == 0.0;
        if converged || iter == settings.max_iter {
            if !converged {
                log::warn!("multi-target loop stopped at the iteration cap with criterion {crit:e}");
            }
            return Ok(TargetingResult {
                intercept,
                beta_final: beta,
                iterations: iter,
                converged,
                final_eic_mean: d,
                final_eic: eics,
                trace,
            });
        }
        let mut update = vec![0.0; beta.len()];
        for (e, &ds) in eics.iter().zip(&d) {
            let wgt = ds / norm;
            for (u, &a) in update.iter_mut().zip(&e.alpha) {
                *u += wgt * a;
            }
        }
        for (b, u) in beta.iter_mut().zip(&update) {
            *b += settings.step * u;
        }
    }
    unreachable!()
}

/// Unpenalized refit of intercept and coefficients on a fixed design. Gaussian
/// uses the minimum-norm least-squares solution; binomial and Poisson use
/// IRLS with minimum-norm steps, flagged after 100 iterations.
pub fn relaxed_fit(
    phi: &DMatrix<f64>,
    y: &[f64],
    family: &Family,
    weights: Option<&[f64]>,
    init: (f64, &[f64]),
) -> Result<TargetingResult> {
    let n = phi.nrows();
    let p = phi.ncols();
    if y.len() != n || init.1.len() != p {
        return invalid("dimension mismatch in relaxed fit");
    }
    let v: Vec<f64> = weights.map_or_else(|| vec![1.0; n], |w| w.to_vec());
    if v.len() != n {
        return invalid("weight length mismatch in relaxed fit");
    }
    let offset: Vec<f64> = match family {
        Family::Poisson {
            exposure: Some(e),
        } => {
            if e.len() != n || e.iter().any(|&x| !(x > 0.0)) {
                return invalid("exposures must be positive and match the rows");
            }
            e.iter().map(|x| x.ln()).collect()
        }
        _ => vec![0.0; n],
    };
    let kind = family.kind();
    let weighted_solve = |w: &[f64], z: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut a = DMatrix::zeros(n, p + 1);
        let mut rhs = DVector::zeros(n);
        for i in 0..n {
            let s = w[i].sqrt();
            a[(i, 0)] = s;
            for j in 0..p {
                a[(i, j + 1)] = s * phi[(i, j)];
            }
            rhs[i] = s * z[i];
        }
        let sol = min_norm_lstsq(&a, &rhs)?;
        Ok((sol[0], sol.iter().skip(1).copied().collect()))
    };
    let deviance = |c: f64, b: &[f64]| -> f64 {
        let eta = linear_predictor_from_design(phi, c, b);
        (0..n)
            .map(|i| v[i] * kind.unit_deviance(y[i], kind.inverse_link(eta[i] + offset[i])))
            .sum()
    };

    if kind == FamilyKind::Gaussian {
        let (c, b) = weighted_solve(&v, y)?;
        return Ok(TargetingResult {
            intercept: c,
            beta_final: b,
            iterations: 1,
            converged: true,
            final_eic_mean: Vec::new(),
            final_eic: Vec::new(),
            trace: Vec::new(),
        });
    }

    let (mut c, mut b) = (init.0, init.1.to_vec());
    let mut dev = deviance(c, &b);
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=100 {
        iterations = it;
        let eta = linear_predictor_from_design(phi, c, &b);
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let e = eta[i] + offset[i];
            let mu = kind.inverse_link(e);
            let var = match kind {
                FamilyKind::Binomial => (mu * (1.0 - mu)).max(1e-10),
                _ => mu.max(1e-300),
            };
            w[i] = v[i] * var;
            z[i] = eta[i] + (y[i] - mu) / var;
        }
        let (mut nc, mut nb) = weighted_solve(&w, &z)?;
        let mut new_dev = deviance(nc, &nb);
        let mut halvings = 0;
        while !(new_dev <= dev + 1e-12 * dev.abs()) && halvings < 30 {
            nc = 0.5 * (nc + c);
            for (x, o) in nb.iter_mut().zip(&b) {
                *x = 0.5 * (*x + o);
            }
            new_dev = deviance(nc, &nb);
            halvings += 1;
        }
        let change = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        c = nc;
        b = nb;
        dev = new_dev;
        if change < 1e-10 {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("relaxed refit did not converge in 100 iterations");
    }
    Ok(TargetingResult {
        intercept: c,
        beta_final: b,
        iterations,
        converged,
        final_eic_mean: Vec::new(),
        final_eic: Vec::new(),
        trace: Vec::new(),
    })
}

/// Single fluctuation along a penalized regression of the clever covariate on
/// the working basis: `β̂ = β + ε̂ α̂`.
pub fn target_direct_ate(
    phi: &DMatrix<f64>,
    y: &[f64],
    intercept: f64,
    beta: &[f64],
    clever: &[f64],
    penalty: f64,
) -> Result<TargetingResult> {
    let n = phi.nrows();
    if y.len() != n || clever.len() != n || beta.len() != phi.ncols() {
        return invalid("dimension mismatch in direct targeting");
    }
    let alpha = if phi.ncols() == 0 {
        Vec::new()
    } else {
        // same half-squared-error convention as the projection
        solve_lasso_weighted(
            phi,
            clever,
            &Family::Gaussian,
            None,
            penalty / 2.0,
            None,
            LassoOptions::default(),
        )?
        .beta
    };
    let scores = ScoreMatrix {
        values: phi.clone(),
        beta_at: beta.to_vec(),
    };
    let cov = contract(&scores, &alpha);
    let q = linear_predictor_from_design(phi, intercept, beta);
    let num: f64 = cov.iter().zip(y.iter().zip(&q)).map(|(c, (y, q))| c * (y - q)).sum();
    let den: f64 = cov.iter().map(|c| c * c).sum();
    let eps = if den > 0.0 { num / den } else { 0.0 };
    let beta_final: Vec<f64> = beta.iter().zip(&alpha).map(|(b, a)| b + eps * a).collect();
    Ok(TargetingResult {
        intercept,
        beta_final,
        iterations: 1,
        converged: true,
        final_eic_mean: vec![eps],
        final_eic: Vec::new(),
        trace: Vec::new(),
    })
}
