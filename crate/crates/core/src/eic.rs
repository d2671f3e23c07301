//! Score matrices and working-model influence-curve approximations.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::glm_lasso::{
    cv_select_with_folds, fold_assignment, lambda_max, geometric_path, solve_lasso_weighted, Family,
    LassoOptions,
};
use crate::linalg::spd_solve;
use crate::stats::z_two_sided;

/// Per-observation score rows evaluated at `beta_at`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub values: DMatrix<f64>,
    pub beta_at: Vec<f64>,
}

impl ScoreMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn p(&self) -> usize {
        self.values.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EicLabel {
    ProjectionWeak,
    ProjectionCv,
    Delta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EicApprox {
    pub alpha: Vec<f64>,
    pub values: Vec<f64>,
    pub label: EicLabel,
    pub target_id: f64,
}

/// α'S_i for every row, summed in coefficient order.
pub fn contract(scores: &ScoreMatrix, alpha: &[f64]) -> Vec<f64> {
    let s = &scores.values;
    let mut out = vec![0.0; s.nrows()];
    for (j, &a) in alpha.iter().enumerate() {
        for (o, &x) in out.iter_mut().zip(s.column(j).iter()) {
            *o += a * x;
        }
    }
    out
}

/// S_ij = 2 (Y_i − Q_i) φ_ij with Q = intercept + φβ.
pub fn gaussian_scores(phi: &DMatrix<f64>, y: &[f64], intercept: f64, beta: &[f64]) -> Result<ScoreMatrix> {
    if phi.nrows() != y.len() || phi.ncols() != beta.len() {
        return invalid("dimension mismatch in gaussian scores");
    }
    let q = crate::working_model::linear_predictor_from_design(phi, intercept, beta);
    let resid: Vec<f64> = y.iter().zip(&q).map(|(y, q)| 2.0 * (y - q)).collect();
    let mut values = phi.clone();
    for j in 0..values.ncols() {
        for (v, r) in values.column_mut(j).iter_mut().zip(&resid) {
            *v *= r;
        }
    }
    Ok(ScoreMatrix {
        values,
        beta_at: beta.to_vec(),
    })
}

pub fn score_matrix_gaussian(
    model: &crate::working_model::WorkingModel,
    x: &DMatrix<f64>,
    y: &[f64],
) -> Result<ScoreMatrix> {
    let phi = model.design(x)?;
    gaussian_scores(&phi, y, model.intercept, &model.beta)
}

/// Piecewise-constant log hazard `θ0 + Σ_{q_j < t} θ_j`: per-subject scores
/// `δ X(t̃) − ∫_0^t̃ exp(X(u)'θ) X(u) du` with the intercept as column 0.
/// Knots must be sorted ascending.
pub fn hazard_scores(knots: &[f64], theta: &[f64], times: &[f64], events: &[f64]) -> Result<ScoreMatrix> {
    let m = knots.len();
    if theta.len() != m + 1 {
        return invalid("hazard coefficients need one intercept plus one per knot");
    }
    if times.len() != events.len() {
        return invalid("times and events differ in length");
    }
    if times.iter().any(|&t| !(t >= 0.0) || !t.is_finite()) {
        return invalid("times must be finite and nonnegative");
    }
    if knots.windows(2).any(|w| w[0] > w[1]) {
        return invalid("hazard knots must be sorted");
    }
    // log hazard on segment k: (q_k, q_{k+1}], segment 0 starts at 0
    let mut rate = Vec::with_capacity(m + 1);
    let mut acc = theta[0];
    rate.push(acc.exp());
    for &t in &theta[1..] {
        acc += t;
        rate.push(acc.exp());
    }
    let n = times.len();
    let mut values = DMatrix::zeros(n, m + 1);
    let mut seg = vec![0.0; m + 1];
    for i in 0..n {
        let t = times[i];
        let mut last = 0;
        for k in 0..=m {
            let lo = if k == 0 { 0.0 } else { knots[k - 1] };
            if t <= lo && k > 0 {
                break;
            }
            let hi = if k < m { knots[k].min(t) } else { t };
            seg[k] = rate[k] * (hi - lo).max(0.0);
            last = k;
        }
        let mut suffix = 0.0;
        for k in (0..=last).rev() {
            suffix += seg[k];
            values[(i, k)] = -suffix;
        }
        if events[i] != 0.0 {
            // X(t̃) has ones for the intercept and every knot strictly below t̃
            values[(i, 0)] += events[i];
            for j in 0..m {
                if t > knots[j] {
                    values[(i, j + 1)] += events[i];
                } else {
                    break;
                }
            }
        }
    }
    Ok(ScoreMatrix {
        values,
        beta_at: theta.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProjectionMode {
    Fixed,
    Cv { folds: usize, seed: u64 },
}

pub const DEFAULT_PROJECTION_PENALTY: f64 = 1e-5;
pub const DEFAULT_RIDGE: f64 = 1e-6;

/// L1-penalized least-squares projection of `d_bar` onto the score columns,
/// objective `(1/n) Σ (D̄_i − a0 − α'S_i)² + penalty ‖α̃‖₁` with standardized
/// columns and a free intercept.
pub fn projection_eic(
    scores: &ScoreMatrix,
    d_bar: &[f64],
    penalty: f64,
    mode: ProjectionMode,
    warm_start: Option<&[f64]>,
) -> Result<EicApprox> {
    if scores.n() != d_bar.len() {
        return invalid("gradient length does not match the score rows");
    }
    if !(penalty >= 0.0) {
        return invalid("penalty must be nonnegative");
    }
    if d_bar.iter().any(|v| !v.is_finite()) || scores.values.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite values in projection");
    }
    let p = scores.p();
    let x = &scores.values;
    // the solver minimizes half the squared error, so the penalty halves too
    let (lambda, label) = match mode {
        ProjectionMode::Fixed => (penalty / 2.0, EicLabel::ProjectionWeak),
        ProjectionMode::Cv { folds, seed } => {
            let lm = lambda_max(x, d_bar, &Family::Gaussian, None)?;
            let lambdas = geometric_path(lm, 100, 1e-4)?;
            let ids = fold_assignment(d_bar.len(), folds.max(2), seed);
            let (path, k) = cv_select_with_folds(
                x,
                d_bar,
                &Family::Gaussian,
                None,
                &lambdas,
                &ids,
                LassoOptions::default(),
            )?;
            (path.lambdas[k], EicLabel::ProjectionCv)
        }
    };
    let alpha = if p == 0 {
        Vec::new()
    } else {
        let warm = warm_start.filter(|w| w.len() == p).map(|w| {
            let mean_d = d_bar.iter().sum::<f64>() / d_bar.len() as f64;
            (mean_d, w)
        });
        let fit = solve_lasso_weighted(x, d_bar, &Family::Gaussian, None, lambda, warm, LassoOptions::default())?;
        fit.beta
    };
    let values = contract(scores, &alpha);
    Ok(EicApprox {
        alpha,
        values,
        label,
        target_id: 0.0,
    })
}

/// α = (S'S/n + ηI)⁻¹ dψ/dβ by a symmetric positive-definite solve.
pub fn delta_eic(scores: &ScoreMatrix, dpsi_dbeta: &[f64], eta: f64) -> Result<EicApprox> {
    let p = scores.p();
    if dpsi_dbeta.len() != p {
        return invalid("parameter gradient does not match the score columns");
    }
    if !(eta > 0.0) {
        return invalid("ridge parameter must be positive");
    }
    if dpsi_dbeta.iter().any(|v| !v.is_finite()) || scores.values.iter().any(|v| !v.is_finite()) {
        return invalid("non-finite values in delta-method solve");
    }
    let n = scores.n() as f64;
    let alpha = if p == 0 {
        Vec::new()
    } else {
        let mut info = scores.values.tr_mul(&scores.values) / n;
        for i in 0..p {
            info[(i, i)] += eta;
        }
        spd_solve(&info, &DVector::from_column_slice(dpsi_dbeta))?
            .iter()
            .copied()
            .collect()
    };
    let values = contract(scores, &alpha);
    Ok(EicApprox {
        alpha,
        values,
        label: EicLabel::Delta,
        target_id: 0.0,
    })
}

/// Classical ATE influence curve
/// `H (Y − Q(A,W)) + Q(1,W) − Q(0,W) − ψ` with `H = A/g − (1−A)/(1−g)`.
pub fn nonparametric_eic_ate(
    q_obs: &[f64],
    q1: &[f64],
    q0: &[f64],
    g: &[f64],
    a: &[f64],
    y: &[f64],
    psi: f64,
) -> Result<Vec<f64>> {
    let n = y.len();
    if [q_obs.len(), q1.len(), q0.len(), g.len(), a.len()].iter().any(|&l| l != n) {
        return invalid("input lengths differ");
    }
    if g.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
        return invalid("propensity scores must lie strictly inside (0, 1)");
    }
    Ok((0..n)
        .map(|i| {
            let h = a[i] / g[i] - (1.0 - a[i]) / (1.0 - g[i]);
            h * (y[i] - q_obs[i]) + q1[i] - q0[i] - psi
        })
        .collect())
}

pub fn center(values: &[f64]) -> Vec<f64> {
    let m = crate::stats::mean(values);
    values.iter().map(|v| v - m).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
    pub se: f64,
}

impl Interval {
    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

/// ψ ± z·se with se = sqrt(mean(eic²)/n).
pub fn wald_ci(psi: f64, eic: &[f64], level: f64) -> Result<Interval> {
    if eic.is_empty() {
        return invalid("no influence-curve values");
    }
    if !(level > 0.0 && level < 1.0) {
        return invalid("level must lie in (0, 1)");
    }
    let n = eic.len() as f64;
    let se = (eic.iter().map(|v| v * v).sum::<f64>() / n / n).sqrt();
    let z = z_two_sided(level);
    Ok(Interval {
        lower: psi - z * se,
        upper: psi + z * se,
        se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_scores(n: usize, p: usize, seed: u64) -> ScoreMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScoreMatrix {
            values: DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0)),
            beta_at: vec![0.0; p],
        }
    }

    #[test]
    fn gaussian_score_examples() {
        let phi = DMatrix::from_row_slice(1, 1, &[1.0]);
        let s = gaussian_scores(&phi, &[1.0], 0.5, &[0.0]).unwrap();
        assert_eq!(s.values[(0, 0)], 1.0);
        let s = gaussian_scores(&phi, &[1.5], 0.5, &[1.0]).unwrap();
        assert_eq!(s.values[(0, 0)], 0.0);
    }

    #[test]
    fn gaussian_scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (n, p) = (7, 4);
        let phi = DMatrix::from_fn(n, p, |_, _| if rng.gen::<f64>() < 0.5 { 0.0 } else { rng.gen_range(0.0..2.0) });
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..2.0)).collect();
        let beta: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let s = gaussian_scores(&phi, &y, 0.2, &beta).unwrap();
        let loss = |b: &[f64], i: usize| {
            let q = 0.2 + (0..p).map(|j| phi[(i, j)] * b[j]).sum::<f64>();
            -(y[i] - q).powi(2)
        };
        let h = 1e-6;
        for i in 0..n {
            for j in 0..p {
                let mut up = beta.clone();
                let mut dn = beta.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (loss(&up, i) - loss(&dn, i)) / (2.0 * h);
                assert!((fd - s.values[(i, j)]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn hazard_score_closed_forms() {
        let b0 = 0.3f64;
        let s = hazard_scores(&[], &[b0], &[1.0, 2.0], &[1.0, 0.0]).unwrap();
        assert!((s.values[(0, 0)] - (1.0 - b0.exp())).abs() < 1e-14);
        assert!((s.values[(1, 0)] + b0.exp() * 2.0).abs() < 1e-14);
        assert!(hazard_scores(&[], &[b0], &[-1.0], &[1.0]).is_err());
    }

    fn loglik(knots: &[f64], theta: &[f64], t: f64, d: f64) -> f64 {
        // exact piecewise log-likelihood, written independently of the score code
        let log_h = |u: f64| theta[0] + knots.iter().zip(&theta[1..]).filter(|(q, _)| u > **q).map(|(_, b)| b).sum::<f64>();
        let mut pts = vec![0.0];
        pts.extend(knots.iter().copied().filter(|&q| q < t));
        pts.push(t);
        let mut cum = 0.0;
        for w in pts.windows(2) {
            cum += log_h(0.5 * (w[0] + w[1])).exp() * (w[1] - w[0]);
        }
        d * log_h(t) - cum
    }

    #[test]
    fn hazard_scores_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let knots = vec![0.2, 0.35, 0.6, 0.8];
        let theta: Vec<f64> = (0..5).map(|_| rng.gen_range(-0.7..0.7)).collect();
        let times: Vec<f64> = (0..12).map(|_| rng.gen_range(0.01..1.0)).collect();
        let events: Vec<f64> = (0..12).map(|i| (i % 2) as f64).collect();
        let s = hazard_scores(&knots, &theta, &times, &events).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            for j in 0..5 {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let fd = (loglik(&knots, &up, times[i], events[i]) - loglik(&knots, &dn, times[i], events[i])) / (2.0 * h);
                assert!((fd - s.values[(i, j)]).abs() < 1e-5, "i={i} j={j}");
            }
        }
    }

    #[test]
    fn hazard_integral_matches_quadrature() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..5 {
            let mut knots: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
            knots.sort_by(|a, b| a.total_cmp(b));
            let theta: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let t = rng.gen_range(0.05..1.2);
            let s = hazard_scores(&knots, &theta, &[t], &[0.0]).unwrap();
            // adaptive Simpson on each smooth piece of ∫ exp(X'θ) du
            let f = |u: f64| {
                (theta[0] + knots.iter().zip(&theta[1..]).filter(|(q, _)| u > **q).map(|(_, b)| b).sum::<f64>()).exp()
            };
            let mut pts = vec![0.0];
            pts.extend(knots.iter().copied().filter(|&q| q < t));
            pts.push(t);
            let quad: f64 = pts
                .windows(2)
                .map(|w| {
                    let (a, b) = (w[0], w[1]);
                    let eps = 1e-12 * (b - a);
                    let (a, b) = (a + eps, b - eps);
                    (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
                })
                .sum();
            assert!((-s.values[(0, 0)] - quad).abs() < 1e-8);
        }
    }

    #[test]
    fn projection_without_penalty_is_least_squares() {
        let s = random_scores(40, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d: Vec<f64> = (0..40).map(|i| 0.3 + 2.0 * s.values[(i, 0)] - s.values[(i, 2)] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        let e = projection_eic(&s, &d, 0.0, ProjectionMode::Fixed, None).unwrap();
        let mut design = DMatrix::from_element(40, 4, 1.0);
        design.columns_mut(1, 3).copy_from(&s.values);
        let ols = (design.transpose() * &design).cholesky().unwrap().solve(&(design.transpose() * DVector::from_column_slice(&d)));
        for j in 0..3 {
            assert!((e.alpha[j] - ols[j + 1]).abs() < 1e-6);
        }
        assert_eq!(e.values, contract(&s, &e.alpha));
        // exact span: zero residual
        let d2: Vec<f64> = (0..40).map(|i| 1.0 + s.values[(i, 1)]).collect();
        let e2 = projection_eic(&s, &d2, 0.0, ProjectionMode::Fixed, None).unwrap();
        let rss: f64 = (0..40).map(|i| (d2[i] - 1.0 - e2.values[i]).powi(2)).sum();
        assert!(rss < 1e-10);
    }

    #[test]
    fn projection_matches_grid_search() {
        let s = random_scores(30, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d: Vec<f64> = (0..30).map(|i| s.values[(i, 0)] - 0.5 * s.values[(i, 1)] + 0.3 * rng.gen_range(-1.0..1.0)).collect();
        let pen = 0.05;
        let e = projection_eic(&s, &d, pen, ProjectionMode::Fixed, None).unwrap();
        let n = 30.0;
        let sd: Vec<f64> = (0..3)
            .map(|j| {
                let c: Vec<f64> = s.values.column(j).iter().copied().collect();
                let m = c.iter().sum::<f64>() / n;
                (c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()
            })
            .collect();
        let obj = |a: &[f64]| {
            let fitted: Vec<f64> = (0..30).map(|i| d[i] - (0..3).map(|j| a[j] * s.values[(i, j)]).sum::<f64>()).collect();
            let a0 = fitted.iter().sum::<f64>() / n;
            fitted.iter().map(|r| (r - a0).powi(2)).sum::<f64>() / n + pen * (0..3).map(|j| sd[j] * a[j].abs()).sum::<f64>()
        };
        let mut center = [0.0; 3];
        let mut half = 2.0;
        for _ in 0..9 {
            let mut best = (f64::INFINITY, center);
            for i in 0..=40 {
                for j in 0..=40 {
                    for k in 0..=40 {
                        let a = [
                            center[0] - half + 2.0 * half * i as f64 / 40.0,
                            center[1] - half + 2.0 * half * j as f64 / 40.0,
                            center[2] - half + 2.0 * half * k as f64 / 40.0,
                        ];
                        let v = obj(&a);
                        if v < best.0 {
                            best = (v, a);
                        }
                    }
                }
            }
            center = best.1;
            half /= 5.0;
        }
        for j in 0..3 {
            assert!((e.alpha[j] - center[j]).abs() < 1e-4, "{j}: {} vs {}", e.alpha[j], center[j]);
        }
    }

    #[test]
    fn zero_scores_give_zero_direction() {
        let s = ScoreMatrix { values: DMatrix::zeros(10, 3), beta_at: vec![0.0; 3] };
        let d: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let e = projection_eic(&s, &d, 1e-5, ProjectionMode::Fixed, None).unwrap();
        assert!(e.alpha.iter().all(|&a| a == 0.0));
    }

    fn identity_scores() -> ScoreMatrix {
        // S'S/n = I for n = 2 p
        let p = 3;
        let mut values = DMatrix::zeros(2 * p, p);
        for j in 0..p {
            values[(2 * j, j)] = 3f64.sqrt();
            values[(2 * j + 1, j)] = -(3f64.sqrt());
        }
        ScoreMatrix { values, beta_at: vec![0.0; p] }
    }

    #[test]
    fn delta_examples() {
        let s = identity_scores();
        let info = s.values.tr_mul(&s.values) / 6.0;
        assert!((info - DMatrix::identity(3, 3)).amax() < 1e-14);
        let e1 = [1.0, 0.0, 0.0];
        let a = delta_eic(&s, &e1, 1e-12).unwrap();
        assert!((a.alpha[0] - 1.0).abs() < 1e-8 && a.alpha[1].abs() < 1e-8);
        let a = delta_eic(&s, &e1, 1.0).unwrap();
        assert!((a.alpha[0] - 0.5).abs() < 1e-14);
        assert!(delta_eic(&s, &[f64::NAN, 0.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn delta_matches_explicit_inverse() {
        let s = random_scores(25, 3, 17);
        let dpsi = [0.4, -1.0, 0.25];
        let eta = 1e-6;
        let a = delta_eic(&s, &dpsi, eta).unwrap();
        let m = s.values.tr_mul(&s.values) / 25.0 + DMatrix::identity(3, 3) * eta;
        let oracle = m.try_inverse().unwrap() * DVector::from_column_slice(&dpsi);
        for j in 0..3 {
            assert!((a.alpha[j] - oracle[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn delta_and_projection_agree_in_the_limit() {
        let s = random_scores(50, 3, 23);
        let dpsi = [0.7, 0.1, -0.4];
        let info = s.values.tr_mul(&s.values) / 50.0;
        let alpha = info.clone().try_inverse().unwrap() * DVector::from_column_slice(&dpsi);
        let d: Vec<f64> = contract(&s, alpha.as_slice());
        let mean_col: Vec<f64> = (0..3).map(|j| s.values.column(j).mean()).collect();
        // remove column means so the free intercept does not absorb signal
        let mut centered = s.clone();
        for j in 0..3 {
            for v in centered.values.column_mut(j).iter_mut() {
                *v -= mean_col[j];
            }
        }
        let info_c = centered.values.tr_mul(&centered.values) / 50.0;
        let alpha_c = info_c.try_inverse().unwrap() * DVector::from_column_slice(&dpsi);
        let d_c = contract(&centered, alpha_c.as_slice());
        let proj = projection_eic(&centered, &d_c, 0.0, ProjectionMode::Fixed, None).unwrap();
        let delta = delta_eic(&centered, &dpsi, 1e-12).unwrap();
        for j in 0..3 {
            assert!((proj.alpha[j] - delta.alpha[j]).abs() < 1e-6);
        }
        assert_eq!(d.len(), 50);
    }

    #[test]
    fn np_eic_examples() {
        let v = nonparametric_eic_ate(&[1.0], &[1.0], &[0.5], &[0.5], &[1.0], &[1.0], 0.5).unwrap();
        assert_eq!(v[0], 0.0);
        let v = nonparametric_eic_ate(&[1.0], &[1.0], &[0.5], &[0.5], &[1.0], &[2.0], 0.5).unwrap();
        assert_eq!(v[0], 2.0);
        assert!(nonparametric_eic_ate(&[1.0], &[1.0], &[0.5], &[1.0], &[1.0], &[2.0], 0.5).is_err());
    }

    #[test]
    fn wald_examples() {
        let ci = wald_ci(1.0, &[0.0, 0.0], 0.95).unwrap();
        assert_eq!((ci.lower, ci.upper), (1.0, 1.0));
        let ci = wald_ci(0.0, &[1.0, -1.0], 0.95).unwrap();
        assert!((ci.upper - 1.959964 * 0.5f64.sqrt()).abs() < 1e-6);
        assert!(wald_ci(0.0, &[], 0.95).is_err());
    }

    #[test]
    fn wald_coverage_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut hits = 0;
        for _ in 0..1000 {
            let x: Vec<f64> = (0..100)
                .map(|_| crate::stats::normal_inverse_cdf(rng.gen_range(1e-12..1.0)))
                .collect();
            let m = crate::stats::mean(&x);
            let ci = wald_ci(m, &center(&x), 0.95).unwrap();
            if ci.contains(0.0) {
                hits += 1;
            }
        }
        assert!((930..=970).contains(&hits), "{hits}");
    }

    proptest! {
        #[test]
        fn approximations_are_exact_contractions(seed in 0u64..1000) {
            let s = random_scores(20, 4, seed);
            let dpsi = [0.3, -0.2, 0.0, 1.0];
            let e = delta_eic(&s, &dpsi, 1e-3).unwrap();
            for i in 0..20 {
                let mut acc = 0.0;
                for j in 0..4 {
                    acc += e.alpha[j] * s.values[(i, j)];
                }
                prop_assert_eq!(acc.to_bits(), e.values[i].to_bits());
            }
        }
    }
}
