//! End-to-end acceptance checks. Each test writes one `PASS`/`FAIL` line to
//! stderr. Monte Carlo criteria report without panicking; the property and
//! oracle suites also assert.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reghal::ate::{
    ate_partials, clever_covariate, estimate_from_fits, fit_nuisance, working_model, AteConfig, AteTargeting, ModelRule,
};
use reghal::atmle::{nested_models, plateau_select, AtmleConfig};
use reghal::eic::{delta_eic, gaussian_scores, hazard_scores, projection_eic, ProjectionMode, ScoreMatrix};
use reghal::glm_lasso::{
    fit_path, geometric_path, kkt_violation, kkt_violation_with, lambda_max, solve_lasso_weighted, Family, LassoOptions,
};
use reghal::hal_basis::evaluate_design;
use reghal::simstudy::dgp::{gen_ate, gen_surv, AteDgp};
use reghal::simstudy::{run_replications, summarize, RawRow, Study, StudyConfig, SummaryRow};
use reghal::stats::median;
use reghal::survival::{
    estimate_survival_from_fits, fit_survival_nuisance, simultaneous_quantile, survival_from_hazard, SurvConfig,
    SurvTargeting,
};
use reghal::targeting::stop_threshold;
use reghal::working_model::zero_pad;

const LEVEL: f64 = 0.95;

fn report(id: &str, pass: bool, detail: String, started: Instant) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {id}: {verdict} ({detail}; {:.0}s)\n", started.elapsed().as_secs_f64());
    // bypass the test harness capture so the verdict always shows
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn run(study: Study, n: usize, reps: usize, seed: u64) -> Vec<SummaryRow> {
    let cfg = StudyConfig {
        study,
        n,
        reps,
        base_seed: seed,
        threads: None,
        record_time: false,
    };
    let rows = run_replications(&cfg).expect("study runs");
    summarize(&rows, LEVEL).expect("summary")
}

fn row<'a>(rows: &'a [SummaryRow], targeting: &str) -> &'a SummaryRow {
    rows.iter().find(|r| r.targeting == targeting).expect("targeting present")
}

fn fast_ate() -> AteConfig {
    AteConfig {
        rule: ModelRule::Cv,
        all_intervals: false,
        ..AteConfig::default()
    }
}

fn dgp1_n500() -> &'static Vec<SummaryRow> {
    static CELL: OnceLock<Vec<SummaryRow>> = OnceLock::new();
    CELL.get_or_init(|| {
        let study = Study::Ate {
            dgp: AteDgp::One,
            targetings: vec![AteTargeting::Relaxed, AteTargeting::Projection],
            cfg: fast_ate(),
        };
        run(study, 500, 100, 1)
    })
}

#[test]
fn criterion_1_projection_bias_dgp1() {
    let t = Instant::now();
    let s = dgp1_n500();
    let (p, r) = (row(s, "projection"), row(s, "relaxed"));
    let pass = p.abs_bias <= 0.03 && p.abs_bias < r.abs_bias;
    report(
        "1",
        pass,
        format!("projection bias {:.4}, relaxed {:.4}, failed reps {} and {}", p.abs_bias, r.abs_bias, p.failed, r.failed),
        t,
    );
}

#[test]
fn criterion_2_projection_coverage_and_mse_dgp1() {
    let t = Instant::now();
    let s = dgp1_n500();
    let (p, r) = (row(s, "projection"), row(s, "relaxed"));
    let oracle = p.oracle_coverage.unwrap_or(f64::NAN);
    let pass = (88.0..=99.0).contains(&oracle) && p.mse < r.mse;
    report(
        "2",
        pass,
        format!("projection oracle coverage {oracle:.1}%, MSE {:.4} vs relaxed {:.4}", p.mse, r.mse),
        t,
    );
}

#[test]
fn criterion_3_projection_dgp2_n1000() {
    let t = Instant::now();
    let study = Study::Ate {
        dgp: AteDgp::Two,
        targetings: vec![AteTargeting::Relaxed, AteTargeting::Projection],
        cfg: fast_ate(),
    };
    let s = run(study, 1000, 100, 3);
    let (p, r) = (row(&s, "projection"), row(&s, "relaxed"));
    let cov = p.coverage("np").unwrap_or(f64::NAN);
    let pass = p.abs_bias < 0.5 * r.abs_bias && cov >= 88.0;
    report(
        "3",
        pass,
        format!("projection bias {:.4} vs relaxed {:.4}, Cov NP {cov:.1}%", p.abs_bias, r.abs_bias),
        t,
    );
}

#[test]
fn criterion_4_survival_curve() {
    let t = Instant::now();
    let study = Study::Survival {
        targetings: vec![SurvTargeting::Relaxed, SurvTargeting::Projection],
        cfg: SurvConfig {
            grid_size: 20,
            all_intervals: false,
            ..SurvConfig::default()
        },
    };
    let s = run(study, 500, 50, 4);
    let (p, r) = (row(&s, "projection"), row(&s, "relaxed"));
    let cov = p.coverage("delta").unwrap_or(f64::NAN);
    let pass = p.abs_bias <= 0.05 && p.abs_bias <= 0.2 * r.abs_bias && (80.0..=97.0).contains(&cov);
    report(
        "4",
        pass,
        format!("projection bias {:.4} vs relaxed {:.4}, delta coverage {cov:.1}%", p.abs_bias, r.abs_bias),
        t,
    );
}

#[test]
fn criterion_5_standard_tmle_dgp1_n1000() {
    let t = Instant::now();
    let study = Study::Ate {
        dgp: AteDgp::One,
        targetings: vec![AteTargeting::Standard],
        cfg: fast_ate(),
    };
    let s = run(study, 1000, 100, 5);
    let st = row(&s, "standard");
    let cov = st.coverage("np").unwrap_or(f64::NAN);
    let pass = st.abs_bias <= 0.02 && (88.0..=99.0).contains(&cov);
    report("5", pass, format!("bias {:.4}, Cov NP {cov:.1}%", st.abs_bias), t);
}

#[test]
fn criterion_6_atmle_dgp2() {
    let t = Instant::now();
    let study = Study::Atmle {
        dgp: AteDgp::Two,
        targetings: vec![AteTargeting::Relaxed, AteTargeting::Projection],
        cfg: AtmleConfig {
            ate: fast_ate(),
            ..AtmleConfig::default()
        },
        bridged: false,
    };
    let s = run(study, 500, 50, 6);
    let (p, r) = (row(&s, "projection"), row(&s, "relaxed"));
    let pass = p.modal_selected_j == Some(1) && p.abs_bias < r.abs_bias;
    report(
        "6",
        pass,
        format!(
            "modal j {} (mean {:.2}), projection bias {:.4} vs relaxed {:.4}",
            p.modal_selected_j.map_or("none".to_string(), |j| j.to_string()),
            p.mean_selected_j.unwrap_or(f64::NAN),
            p.abs_bias,
            r.abs_bias
        ),
        t,
    );
}

fn fd_gaussian(phi: &DMatrix<f64>, y: &[f64], c: f64, beta: &[f64], s: &ScoreMatrix) -> f64 {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..phi.nrows() {
        let loss = |b: &[f64]| {
            let q = c + (0..b.len()).map(|j| phi[(i, j)] * b[j]).sum::<f64>();
            -(y[i] - q).powi(2)
        };
        for j in 0..beta.len() {
            let (mut up, mut dn) = (beta.to_vec(), beta.to_vec());
            up[j] += h;
            dn[j] -= h;
            worst = worst.max(((loss(&up) - loss(&dn)) / (2.0 * h) - s.values[(i, j)]).abs());
        }
    }
    worst
}

fn property_score_fd() -> Result<(), String> {
    // outcome scores on a fitted HAL working model
    let data = gen_ate(AteDgp::One, 200, 11).unwrap();
    let fits = fit_nuisance(&data, &AteConfig::default()).unwrap();
    let model = working_model(&fits, ModelRule::Cv).unwrap();
    let phi = model.design(&fits.x_obs).unwrap();
    let s = gaussian_scores(&phi, &data.y, model.intercept, &model.beta).unwrap();
    let e = fd_gaussian(&phi, &data.y, model.intercept, &model.beta, &s);
    if e > 1e-5 {
        return Err(format!("gaussian scores off by {e:e}"));
    }
    // log-hazard scores and survival gradients on a fitted intensity model
    let surv = gen_surv(200, 12).unwrap();
    let fits = fit_survival_nuisance(&surv, &SurvConfig::default()).unwrap();
    let knots = fits.hazard.knots();
    let theta = fits.hazard.theta();
    let s = hazard_scores(&knots, &theta, &surv.time, &surv.event).unwrap();
    let h = 1e-6;
    let loglik = |th: &[f64], i: usize| {
        let m = fits.hazard.with_theta(th).unwrap();
        surv.event[i] * m.hazard(surv.time[i]).ln() - m.cumulative_hazard(surv.time[i])
    };
    let mut worst: f64 = 0.0;
    for i in 0..surv.n() {
        for j in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[j] += h;
            dn[j] -= h;
            worst = worst.max(((loglik(&up, i) - loglik(&dn, i)) / (2.0 * h) - s.values[(i, j)]).abs());
        }
    }
    for &t in &fits.grid {
        let g = fits.hazard.survival_gradient(t);
        for j in 0..theta.len() {
            let (mut up, mut dn) = (theta.clone(), theta.clone());
            up[j] += h;
            dn[j] -= h;
            let sv = |th: &[f64]| survival_from_hazard(&fits.hazard.with_theta(th).unwrap(), t);
            worst = worst.max(((sv(&up) - sv(&dn)) / (2.0 * h) - g[j]).abs());
        }
    }
    if worst > 1e-5 {
        return Err(format!("hazard scores or survival gradient off by {worst:e}"));
    }
    Ok(())
}

fn property_post_hoc_stopping() -> Result<usize, String> {
    let mut checked = 0;
    for seed in [21, 22] {
        let data = gen_ate(AteDgp::One, 300, seed).unwrap();
        let base = fast_ate();
        let fits = fit_nuisance(&data, &base).unwrap();
        let model = working_model(&fits, ModelRule::Cv).unwrap();
        let phi = model.design(&fits.x_obs).unwrap();
        let h = clever_covariate(&fits.g_hat, &data.a).unwrap();
        let d_bar: Vec<f64> = h.iter().zip(&data.y).map(|(h, y)| h * y).collect();
        let dpsi = ate_partials(&model, &data.w).unwrap();
        for targeting in [AteTargeting::Projection, AteTargeting::Delta] {
            let cfg = AteConfig { targeting, ..base.clone() };
            let r = estimate_from_fits(&data, &fits, &cfg).unwrap();
            if !r.converged {
                continue;
            }
            let s = gaussian_scores(&phi, &data.y, r.intercept, &r.beta).unwrap();
            let e = match targeting {
                AteTargeting::Projection => {
                    projection_eic(&s, &d_bar, cfg.projection_penalty, ProjectionMode::Fixed, None).unwrap()
                }
                _ => delta_eic(&s, &dpsi, cfg.ridge).unwrap(),
            };
            let d = reghal::stats::mean(&e.values);
            if !(d.abs() < stop_threshold(&e.values) || d == 0.0) {
                return Err(format!("{} seed {seed}: |Pn D*| = {:e}", targeting.label(), d.abs()));
            }
            checked += 1;
        }
    }
    let surv = gen_surv(300, 23).unwrap();
    let base = SurvConfig {
        all_intervals: false,
        band_draws: 1000,
        ..SurvConfig::default()
    };
    let fits = fit_survival_nuisance(&surv, &base).unwrap();
    let knots = fits.hazard.knots();
    for targeting in [SurvTargeting::Projection, SurvTargeting::Delta] {
        let cfg = SurvConfig { targeting, ..base.clone() };
        let r = estimate_survival_from_fits(&surv, &fits, &cfg).unwrap();
        if !r.converged {
            continue;
        }
        let s = hazard_scores(&knots, &r.theta, &surv.time, &surv.event).unwrap();
        let fitted = fits.hazard.with_theta(&r.theta).unwrap();
        let eics: Vec<Vec<f64>> = (0..fits.grid.len())
            .map(|j| match targeting {
                SurvTargeting::Projection => {
                    let d_bar: Vec<f64> = fits.gradient.column(j).iter().copied().collect();
                    projection_eic(&s, &d_bar, cfg.projection_penalty, ProjectionMode::Fixed, None).unwrap().values
                }
                _ => reghal::survival::delta_gamma_survival(&fitted, &s, fits.grid[j], cfg.ridge).unwrap().values,
            })
            .collect();
        let d: Vec<f64> = eics.iter().map(|v| reghal::stats::mean(v)).collect();
        let norm = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let thr = median(&eics.iter().map(|v| stop_threshold(v)).collect::<Vec<_>>());
        if !(norm / (d.len() as f64).sqrt() < thr || norm == 0.0) {
            return Err(format!("survival {}: criterion {:e} vs {thr:e}", targeting.label(), norm));
        }
        checked += 1;
    }
    if checked == 0 {
        return Err("no converged targeting run to check".into());
    }
    Ok(checked)
}

fn property_survival_monotone() -> Result<usize, String> {
    let study = StudyConfig {
        study: Study::Survival {
            targetings: vec![SurvTargeting::Relaxed, SurvTargeting::Projection, SurvTargeting::Delta],
            cfg: SurvConfig {
                all_intervals: false,
                band_draws: 1000,
                ..SurvConfig::default()
            },
        },
        n: 200,
        reps: 4,
        base_seed: 31,
        threads: None,
        record_time: false,
    };
    let rows = run_replications(&study).unwrap();
    let mut curves: std::collections::BTreeMap<(usize, String), Vec<&RawRow>> = Default::default();
    for r in &rows {
        curves.entry((r.rep, r.targeting.clone())).or_default().push(r);
    }
    for ((rep, tg), mut curve) in curves.clone() {
        curve.sort_by_key(|r| r.target_id);
        let est: Option<Vec<f64>> = curve.iter().map(|r| r.psi_hat).collect();
        let est = est.ok_or(format!("{tg} rep {rep}: missing estimates"))?;
        if est.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || est.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("{tg} rep {rep}: curve not monotone in (0, 1]"));
        }
    }
    Ok(curves.len())
}

fn property_kkt() -> Result<usize, String> {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    let data = gen_ate(AteDgp::One, 200, 41).unwrap();
    let fits = fit_nuisance(&data, &AteConfig::default()).unwrap();
    let design = evaluate_design(&fits.q_basis, &fits.x_obs).unwrap();
    let hal = LassoOptions {
        standardize: AteConfig::default().standardize,
        ..LassoOptions::default()
    };
    for k in 0..fits.q_path.len() {
        let f = fits.q_path.fit(k);
        let v = kkt_violation_with(&design, &data.y, &Family::Gaussian, None, f.lambda, f.intercept, &f.beta, hal)
            .unwrap();
        worst = worst.max(v);
        checked += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = DMatrix::from_fn(150, 12, |_, _| rng.gen_range(-1.0..1.0));
    let eta: Vec<f64> = (0..150).map(|i| 0.5 * x[(i, 0)] - x[(i, 3)] + 0.3 * x[(i, 7)]).collect();
    let families = [
        (Family::Gaussian, eta.iter().map(|e| e + rng.gen_range(-0.5..0.5)).collect::<Vec<_>>()),
        (Family::Binomial, eta.iter().map(|e| f64::from(rng.gen::<f64>() < 1.0 / (1.0 + (-e).exp()))).collect()),
        (Family::Poisson { exposure: None }, eta.iter().map(|e| (2.0 * rng.gen::<f64>() * e.exp()).floor()).collect()),
    ];
    for (fam, y) in &families {
        let lm = lambda_max(&x, y, fam, None).unwrap();
        let lambdas = geometric_path(lm, 30, 1e-3).unwrap();
        let path = fit_path(&x, y, fam, None, &lambdas, LassoOptions::default()).unwrap();
        for k in 0..path.len() {
            let f = path.fit(k);
            worst = worst.max(kkt_violation(&x, y, fam, None, f.lambda, f.intercept, &f.beta).unwrap());
            checked += 1;
        }
    }
    if worst > 1e-6 {
        return Err(format!("KKT violation {worst:e}"));
    }
    Ok(checked)
}

fn property_plateau() -> Result<(), String> {
    let cases = [
        (vec![1.0, 1.1, 1.2], vec![(0.5, 1.5), (0.6, 1.4), (0.7, 1.3)], 3),
        (vec![1.0, 1.1], vec![(0.5, 1.5), (0.4, 1.8)], 1),
        (vec![1.0, 0.9, 0.8], vec![(0.5, 1.5), (0.45, 1.4), (0.3, 1.6)], 2),
    ];
    for (psis, cis, want) in cases {
        let got = plateau_select(&psis, &cis).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("plateau case {psis:?}: got {got}, want {want}"));
        }
    }
    Ok(())
}

fn property_zero_pad() -> Result<usize, String> {
    let data = gen_ate(AteDgp::Two, 300, 51).unwrap();
    let fits = fit_nuisance(&data, &AteConfig::default()).unwrap();
    let models = nested_models(&fits, 20).unwrap();
    for pair in models.windows(2) {
        let (small, large) = (&pair[0], &pair[1]);
        let padded = zero_pad(&small.beta, small, large).map_err(|e| e.to_string())?;
        let lifted = large.with_coefficients(small.intercept, padded).unwrap();
        if small.linear_predictor(&fits.x_obs).unwrap() != lifted.linear_predictor(&fits.x_obs).unwrap() {
            return Err(format!("padding {} -> {} terms changed predictions", small.n_terms(), large.n_terms()));
        }
    }
    Ok(models.len())
}

fn property_threads() -> Result<(), String> {
    let ate = |threads| StudyConfig {
        study: Study::Ate {
            dgp: AteDgp::One,
            targetings: vec![AteTargeting::Projection, AteTargeting::Standard],
            cfg: AteConfig::default(),
        },
        n: 120,
        reps: 3,
        base_seed: 61,
        threads: Some(threads),
        record_time: false,
    };
    if run_replications(&ate(1)).unwrap() != run_replications(&ate(3)).unwrap() {
        return Err("ATE output depends on the thread count".into());
    }
    let surv = |threads| StudyConfig {
        study: Study::Survival {
            targetings: vec![SurvTargeting::Projection],
            cfg: SurvConfig {
                band_draws: 1000,
                ..SurvConfig::default()
            },
        },
        n: 150,
        reps: 2,
        base_seed: 62,
        threads: Some(threads),
        record_time: false,
    };
    if run_replications(&surv(1)).unwrap() != run_replications(&surv(2)).unwrap() {
        return Err("survival output depends on the thread count".into());
    }
    Ok(())
}

#[test]
fn criterion_7_property_suite() {
    let t = Instant::now();
    let mut notes = Vec::new();
    let mut failures = Vec::new();
    let mut check = |name: &str, r: Result<String, String>| match r {
        Ok(s) => notes.push(format!("{name} ok{s}")),
        Err(e) => failures.push(format!("{name}: {e}")),
    };
    check("a", property_score_fd().map(|_| String::new()));
    check("b", property_post_hoc_stopping().map(|k| format!(" [{k} runs]")));
    check("c", property_survival_monotone().map(|k| format!(" [{k} curves]")));
    check("d", property_kkt().map(|k| format!(" [{k} fits]")));
    check("e", property_plateau().map(|_| String::new()));
    check("f", property_zero_pad().map(|k| format!(" [{k} models]")));
    check("g", property_threads().map(|_| String::new()));
    let pass = failures.is_empty();
    let detail = if pass { notes.join(", ") } else { failures.join("; ") };
    report("7", pass, detail.clone(), t);
    assert!(pass, "{detail}");
}

fn grid_oracle(x: &DMatrix<f64>, y: &[f64], lambda: f64, standardize: bool) -> (f64, f64) {
    let n = y.len() as f64;
    let m: Vec<f64> = (0..2).map(|j| x.column(j).sum() / n).collect();
    let s: Vec<f64> = (0..2)
        .map(|j| (x.column(j).iter().map(|v| (v - m[j]).powi(2)).sum::<f64>() / n).sqrt())
        .map(|sd| if standardize { sd } else { 1.0 })
        .collect();
    let ybar = y.iter().sum::<f64>() / n;
    let obj = |b0: f64, b1: f64| {
        let c = ybar - m[0] * b0 - m[1] * b1;
        let rss: f64 = (0..y.len()).map(|i| (y[i] - c - b0 * x[(i, 0)] - b1 * x[(i, 1)]).powi(2)).sum();
        0.5 * rss / n + lambda * (s[0] * b0.abs() + s[1] * b1.abs())
    };
    let (mut c0, mut c1, mut half) = (0.0, 0.0, 4.0);
    for _ in 0..8 {
        let mut best = (f64::INFINITY, c0, c1);
        for a in 0..=200 {
            for b in 0..=200 {
                let b0 = c0 - half + 2.0 * half * a as f64 / 200.0;
                let b1 = c1 - half + 2.0 * half * b as f64 / 200.0;
                let v = obj(b0, b1);
                if v < best.0 {
                    best = (v, b0, b1);
                }
            }
        }
        (c0, c1) = (best.1, best.2);
        half /= 8.0;
    }
    (c0, c1)
}

fn oracle_lasso() -> f64 {
    let mut worst: f64 = 0.0;
    for (seed, lambda) in [(71u64, 0.1), (72, 0.02), (73, 0.3)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DMatrix::zeros(80, 2);
        for i in 0..80 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            x[(i, 0)] = a;
            x[(i, 1)] = 0.7 * a + 0.4 * rng.gen_range(-1.0..1.0);
        }
        let y: Vec<f64> = (0..80).map(|i| 1.0 + x[(i, 0)] - 0.5 * x[(i, 1)] + 0.3 * rng.gen_range(-1.0..1.0)).collect();
        for standardize in [true, false] {
            let opts = LassoOptions {
                standardize,
                ..LassoOptions::default()
            };
            let fit = solve_lasso_weighted(&x, &y, &Family::Gaussian, None, lambda, None, opts).unwrap();
            let (b0, b1) = grid_oracle(&x, &y, lambda, standardize);
            worst = worst.max((fit.beta[0] - b0).abs()).max((fit.beta[1] - b1).abs());
        }
    }
    worst
}

fn oracle_delta() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 81..84u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (30, 4);
        let s = ScoreMatrix {
            values: DMatrix::from_fn(n, p, |_, _| rng.gen_range(-1.0..1.0)),
            beta_at: vec![0.0; p],
        };
        let dpsi: Vec<f64> = (0..p).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eta = 1e-6;
        let a = delta_eic(&s, &dpsi, eta).unwrap();
        let m = s.values.tr_mul(&s.values) / n as f64 + DMatrix::identity(p, p) * eta;
        let oracle = m.try_inverse().unwrap() * DVector::from_column_slice(&dpsi);
        for j in 0..p {
            worst = worst.max((a.alpha[j] - oracle[j]).abs());
        }
    }
    worst
}

fn oracle_hazard_integral() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let mut knots: Vec<f64> = (0..6).map(|_| rng.gen_range(0.0..1.0)).collect();
        knots.sort_by(|a, b| a.total_cmp(b));
        let theta: Vec<f64> = (0..7).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let t = rng.gen_range(0.05..1.2);
        let s = hazard_scores(&knots, &theta, &[t], &[0.0]).unwrap();
        let rate = |u: f64| {
            (theta[0] + knots.iter().zip(&theta[1..]).filter(|(q, _)| u > **q).map(|(_, b)| b).sum::<f64>()).exp()
        };
        // composite Simpson on each piece between breakpoints
        let mut pts = vec![0.0];
        pts.extend(knots.iter().copied().filter(|&q| q < t));
        pts.push(t);
        let m = 1000;
        let quad: f64 = pts
            .windows(2)
            .map(|w| {
                let eps = 1e-12 * (w[1] - w[0]);
                let (a, b) = (w[0] + eps, w[1] - eps);
                let h = (b - a) / m as f64;
                let inner: f64 = (1..m).map(|k| if k % 2 == 1 { 4.0 } else { 2.0 } * rate(a + k as f64 * h)).sum();
                (rate(a) + rate(b) + inner) * h / 3.0
            })
            .sum();
        worst = worst.max((-s.values[(0, 0)] - quad).abs());
    }
    worst
}

fn oracle_band_quantile() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let n = 2000;
    let cols = DMatrix::from_fn(n, 2, |_, _| rng.gen_range(-1.0..1.0));
    simultaneous_quantile(&cols, LEVEL, 10_000, 102).unwrap()
}

#[test]
fn criterion_8_oracle_suite() {
    let t = Instant::now();
    let lasso = oracle_lasso();
    let delta = oracle_delta();
    let hazard = oracle_hazard_integral();
    let z = oracle_band_quantile();
    let pass = lasso < 1e-4 && delta < 1e-10 && hazard < 1e-6 && (z - 2.236).abs() <= 0.03;
    let detail = format!("lasso {lasso:.1e}, delta {delta:.1e}, hazard integral {hazard:.1e}, band quantile {z:.3}");
    report("8", pass, detail.clone(), t);
    assert!(pass, "{detail}");
}
