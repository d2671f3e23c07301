//! Replication engine and the raw results table.

use std::io::{Read, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ate::{estimate_from_fits, fit_nuisance, AteConfig, AteResult, AteTargeting};
use crate::atmle::{atmle_from_fits, bridged_from_fits, AtmleConfig, ModelLadderResult};
use crate::error::{invalid, HalError, Result};
use crate::rng::derive_seed;
use crate::simstudy::dgp::{beta22_quantile, gen_ate, gen_surv, true_ate, true_survival, AteDgp};
use crate::survival::{estimate_survival_from_fits, fit_survival_nuisance, SurvConfig, SurvTargeting};

/// One estimate of one target in one replication. `psi_hat` is empty when the
/// estimator failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub rep: usize,
    pub estimator: String,
    pub n: usize,
    pub targeting: String,
    pub target_id: usize,
    pub psi_hat: Option<f64>,
    pub truth: f64,
    pub se_np: Option<f64>,
    pub se_proj: Option<f64>,
    pub se_proj_cv: Option<f64>,
    pub se_delta: Option<f64>,
    pub iterations: Option<usize>,
    pub converged: Option<bool>,
    pub selected_j: Option<usize>,
    pub time_ms: Option<f64>,
}

impl RawRow {
    pub fn missing(rep: usize, estimator: &str, n: usize, targeting: &str, target_id: usize, truth: f64) -> Self {
        Self {
            rep,
            estimator: estimator.to_string(),
            n,
            targeting: targeting.to_string(),
            target_id,
            psi_hat: None,
            truth,
            se_np: None,
            se_proj: None,
            se_proj_cv: None,
            se_delta: None,
            iterations: None,
            converged: None,
            selected_j: None,
            time_ms: None,
        }
    }

    pub fn is_missing(&self) -> bool {
        self.psi_hat.is_none()
    }
}

pub fn write_raw_csv<W: Write>(rows: &[RawRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    if rows.is_empty() {
        w.write_record([
            "rep", "estimator", "n", "targeting", "target_id", "psi_hat", "truth", "se_np", "se_proj",
            "se_proj_cv", "se_delta", "iterations", "converged", "selected_j", "time_ms",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_csv<R: Read>(input: R) -> Result<Vec<RawRow>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(HalError::from)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Study {
    Ate {
        dgp: AteDgp,
        targetings: Vec<AteTargeting>,
        cfg: AteConfig,
    },
    Survival {
        targetings: Vec<SurvTargeting>,
        cfg: SurvConfig,
    },
    Atmle {
        dgp: AteDgp,
        targetings: Vec<AteTargeting>,
        cfg: AtmleConfig,
        bridged: bool,
    },
}

impl Study {
    pub fn estimator(&self) -> &'static str {
        match self {
            Study::Ate { .. } => "hal-tmle",
            Study::Survival { .. } => "survival-tmle",
            Study::Atmle { bridged: false, .. } => "atmle",
            Study::Atmle { bridged: true, .. } => "atmle-bridged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyConfig {
    pub study: Study,
    pub n: usize,
    pub reps: usize,
    pub base_seed: u64,
    /// Worker threads for replications; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Record wall-clock time per row; off keeps output reproducible byte for byte.
    pub record_time: bool,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.reps == 0 {
            return invalid("n and reps must be at least 1");
        }
        if self.threads == Some(0) {
            return invalid("threads must be at least 1");
        }
        match &self.study {
            Study::Ate { targetings, cfg, .. } => {
                cfg.validate()?;
                if targetings.is_empty() {
                    return invalid("no targetings configured");
                }
            }
            Study::Survival { targetings, cfg } => {
                cfg.validate()?;
                if targetings.is_empty() {
                    return invalid("no targetings configured");
                }
            }
            Study::Atmle { targetings, cfg, .. } => {
                cfg.ate.validate()?;
                if targetings.is_empty() || cfg.max_models == 0 {
                    return invalid("no targetings configured or empty ladder");
                }
            }
        }
        Ok(())
    }
}

/// Survival grid used in simulations: failure-time quantiles at k/(size+1).
pub fn simulation_grid(size: usize) -> Vec<f64> {
    (1..=size).map(|k| beta22_quantile(k as f64 / (size + 1) as f64)).collect()
}

/// Run `rep_fn` for every replication, in parallel, keeping replication order.
pub fn run_reps<F>(reps: usize, threads: Option<usize>, rep_fn: F) -> Result<Vec<RawRow>>
where
    F: Fn(usize) -> Vec<RawRow> + Sync,
{
    let go = || -> Vec<RawRow> { (0..reps).into_par_iter().map(&rep_fn).collect::<Vec<_>>().concat() };
    match threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| HalError::Estimation(format!("thread pool: {e}")))?;
            Ok(pool.install(go))
        }
        None => Ok(go()),
    }
}

pub fn run_replications(cfg: &StudyConfig) -> Result<Vec<RawRow>> {
    cfg.validate()?;
    run_reps(cfg.reps, cfg.threads, |rep| replicate(cfg, rep))
}

fn ate_row(rep: usize, est: &str, n: usize, truth: f64, r: &AteResult, time_ms: Option<f64>) -> RawRow {
    RawRow {
        psi_hat: Some(r.psi),
        se_np: r.ci_np.map(|c| c.se),
        se_proj: r.ci_proj.map(|c| c.se),
        se_proj_cv: r.ci_proj_cv.map(|c| c.se),
        se_delta: r.ci_delta.map(|c| c.se),
        iterations: Some(r.iterations),
        converged: Some(r.converged),
        time_ms,
        ..RawRow::missing(rep, est, n, r.targeting.label(), 0, truth)
    }
}

fn ladder_row(rep: usize, est: &str, n: usize, t: AteTargeting, truth: f64, r: &ModelLadderResult, time_ms: Option<f64>) -> RawRow {
    let s = r.selected();
    RawRow {
        psi_hat: Some(s.psi),
        se_np: Some(s.ci.se),
        iterations: Some(s.iterations),
        converged: Some(s.converged),
        selected_j: Some(r.j_star),
        time_ms,
        ..RawRow::missing(rep, est, n, t.label(), 0, truth)
    }
}

/// All rows of one replication; failures become missing rows.
pub fn replicate(cfg: &StudyConfig, rep: usize) -> Vec<RawRow> {
    let est = cfg.study.estimator();
    let n = cfg.n;
    let seed = |label: &str| derive_seed(cfg.base_seed, rep as u64, label);
    let timed = cfg.record_time;
    match &cfg.study {
        Study::Ate { dgp, targetings, cfg: base } => {
            let truth = true_ate(*dgp);
            let start = Instant::now();
            let mut c = base.clone();
            c.seed = seed("fit");
            let fits = gen_ate(*dgp, n, seed("data")).and_then(|d| fit_nuisance(&d, &c).map(|f| (d, f)));
            let Ok((data, fits)) = fits.inspect_err(|e| log::warn!("replication {rep} failed: {e}")) else {
                return targetings.iter().map(|t| RawRow::missing(rep, est, n, t.label(), 0, truth)).collect();
            };
            let shared = start.elapsed();
            targetings
                .iter()
                .map(|&t| {
                    let ts = Instant::now();
                    let c = AteConfig { targeting: t, ..c.clone() };
                    match estimate_from_fits(&data, &fits, &c) {
                        Ok(r) => ate_row(rep, est, n, truth, &r, timed.then(|| (shared + ts.elapsed()).as_secs_f64() * 1e3)),
                        Err(e) => {
                            log::warn!("replication {rep}, {t} failed: {e}");
                            RawRow::missing(rep, est, n, t.label(), 0, truth)
                        }
                    }
                })
                .collect()
        }
        Study::Atmle {
            dgp,
            targetings,
            cfg: base,
            bridged,
        } => {
            let truth = true_ate(*dgp);
            let start = Instant::now();
            let mut c = base.clone();
            c.ate.seed = seed("fit");
            let fits = gen_ate(*dgp, n, seed("data")).and_then(|d| fit_nuisance(&d, &c.ate).map(|f| (d, f)));
            let Ok((data, fits)) = fits.inspect_err(|e| log::warn!("replication {rep} failed: {e}")) else {
                return targetings.iter().map(|t| RawRow::missing(rep, est, n, t.label(), 0, truth)).collect();
            };
            let shared = start.elapsed();
            targetings
                .iter()
                .map(|&t| {
                    let ts = Instant::now();
                    let mut c = c.clone();
                    c.ate.targeting = t;
                    let r = if *bridged {
                        bridged_from_fits(&data, &fits, &c)
                    } else {
                        atmle_from_fits(&data, &fits, &c)
                    };
                    match r {
                        Ok(r) => ladder_row(rep, est, n, t, truth, &r, timed.then(|| (shared + ts.elapsed()).as_secs_f64() * 1e3)),
                        Err(e) => {
                            log::warn!("replication {rep}, {t} failed: {e}");
                            RawRow::missing(rep, est, n, t.label(), 0, truth)
                        }
                    }
                })
                .collect()
        }
        Study::Survival { targetings, cfg: base } => {
            let start = Instant::now();
            let mut c = base.clone();
            let grid = c.grid.clone().unwrap_or_else(|| simulation_grid(c.grid_size));
            c.grid = Some(grid.clone());
            c.seed = seed("fit");
            let truth: Vec<f64> = grid.iter().map(|&s| true_survival(s)).collect();
            let missing = |t: SurvTargeting| -> Vec<RawRow> {
                truth
                    .iter()
                    .enumerate()
                    .map(|(k, &s0)| RawRow::missing(rep, est, n, t.label(), k, s0))
                    .collect()
            };
            let fits = gen_surv(n, seed("data")).and_then(|d| fit_survival_nuisance(&d, &c).map(|f| (d, f)));
            let Ok((data, fits)) = fits.inspect_err(|e| log::warn!("replication {rep} failed: {e}")) else {
                return targetings.iter().flat_map(|&t| missing(t)).collect();
            };
            let shared = start.elapsed();
            let mut rows = Vec::new();
            for &t in targetings {
                let ts = Instant::now();
                let c = SurvConfig { targeting: t, ..c.clone() };
                match estimate_survival_from_fits(&data, &fits, &c) {
                    Ok(r) => {
                        let time_ms = timed.then(|| (shared + ts.elapsed()).as_secs_f64() * 1e3);
                        let se = |v: &Option<Vec<crate::eic::Interval>>, k: usize| v.as_ref().map(|c| c[k].se);
                        for (k, &s0) in truth.iter().enumerate() {
                            rows.push(RawRow {
                                psi_hat: Some(r.estimates[k]),
                                se_proj: se(&r.ci_proj, k),
                                se_proj_cv: se(&r.ci_proj_cv, k),
                                se_delta: se(&r.ci_delta, k),
                                iterations: Some(r.iterations),
                                converged: Some(r.converged),
                                time_ms,
                                ..RawRow::missing(rep, est, n, t.label(), k, s0)
                            });
                        }
                    }
                    Err(e) => {
                        log::warn!("replication {rep}, {t} failed: {e}");
                        rows.extend(missing(t));
                    }
                }
            }
            rows
        }
    }
}
