//! Adaptive working-model selection over a ladder of nested HAL models.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;

use crate::ate::{fit_nuisance, target_in_model, AteConfig, AteData, AteFits, AteResult, IntervalSet};
use crate::eic::Interval;
use crate::error::{invalid, Result};
use crate::working_model::{build_nested_sequence, zero_pad, WorkingModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionRule {
    Plateau,
    BridgedPlateau,
}

impl SelectionRule {
    pub fn label(&self) -> &'static str {
        match self {
            SelectionRule::Plateau => "plateau",
            SelectionRule::BridgedPlateau => "bridged-plateau",
        }
    }
}

impl fmt::Display for SelectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One rung of the ladder. `ci` is the nonparametric EIC interval.
#[derive(Debug, Clone, PartialEq)]
pub struct LadderStep {
    pub j: usize,
    pub psi: f64,
    pub ci: Interval,
    pub iterations: usize,
    pub converged: bool,
    pub basis_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelLadderResult {
    pub steps: Vec<LadderStep>,
    /// 1-based index of the selected model.
    pub j_star: usize,
    pub rule: SelectionRule,
}

impl ModelLadderResult {
    pub fn selected(&self) -> &LadderStep {
        &self.steps[self.j_star - 1]
    }

    pub fn psi(&self) -> f64 {
        self.selected().psi
    }

    pub fn ci(&self) -> Interval {
        self.selected().ci
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "psi", "L", "U", "iterations", "basis_count", "selected"])?;
        for s in &self.steps {
            w.write_record([
                s.j.to_string(),
                s.psi.to_string(),
                s.ci.lower.to_string(),
                s.ci.upper.to_string(),
                s.iterations.to_string(),
                s.basis_count.to_string(),
                (s.j == self.j_star).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn violates(prev: (f64, f64, f64), cur: (f64, f64, f64)) -> bool {
    let (p0, l0, u0) = prev;
    let (p1, l1, u1) = cur;
    (p1 > p0 && l1 < l0) || (p1 < p0 && u1 > u0)
}

/// First j whose estimate moves up while its lower bound drops, or down while
/// its upper bound rises, selects j − 1; otherwise the last model.
pub fn plateau_select(psis: &[f64], cis: &[(f64, f64)]) -> Result<usize> {
    if psis.is_empty() || psis.len() != cis.len() {
        return invalid("plateau selection needs equal, nonempty estimate and interval lists");
    }
    for j in 1..psis.len() {
        let prev = (psis[j - 1], cis[j - 1].0, cis[j - 1].1);
        let cur = (psis[j], cis[j].0, cis[j].1);
        if violates(prev, cur) {
            return Ok(j);
        }
    }
    Ok(psis.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtmleConfig {
    pub ate: AteConfig,
    pub max_models: usize,
}

impl Default for AtmleConfig {
    fn default() -> Self {
        Self {
            ate: AteConfig::default(),
            max_models: 20,
        }
    }
}

fn step_from(j: usize, r: &AteResult) -> Result<LadderStep> {
    let Some(ci) = r.ci_np else {
        return invalid("targeting returned no nonparametric interval");
    };
    Ok(LadderStep {
        j,
        psi: r.psi,
        ci,
        iterations: r.iterations,
        converged: r.converged,
        basis_count: r.n_basis,
    })
}

fn select(steps: Vec<LadderStep>, rule: SelectionRule) -> Result<ModelLadderResult> {
    let psis: Vec<f64> = steps.iter().map(|s| s.psi).collect();
    let cis: Vec<(f64, f64)> = steps.iter().map(|s| (s.ci.lower, s.ci.upper)).collect();
    let j_star = plateau_select(&psis, &cis)?;
    Ok(ModelLadderResult { steps, j_star, rule })
}

/// Target independently in every model from its own (zero-padded CV) coefficients.
pub fn run_ladder(data: &AteData, fits: &AteFits, models: &[WorkingModel], cfg: &AteConfig) -> Result<ModelLadderResult> {
    if models.is_empty() {
        return invalid("the model ladder is empty");
    }
    let results: Vec<Result<AteResult>> = models
        .par_iter()
        .map(|m| target_in_model(data, fits, m, (m.intercept, &m.beta), cfg, IntervalSet::NonparametricOnly))
        .collect();
    let mut steps = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r.and_then(|r| step_from(i + 1, &r)) {
            Ok(s) => steps.push(s),
            Err(e) if i > 0 => {
                log::warn!("ladder truncated at model {}: {e}", i + 1);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    select(steps, SelectionRule::Plateau)
}

/// Sequential ladder: each model starts from the previous targeted fit and the
/// walk stops at the first plateau violation.
pub fn run_bridged(data: &AteData, fits: &AteFits, models: &[WorkingModel], cfg: &AteConfig) -> Result<ModelLadderResult> {
    let Some(first) = models.first() else {
        return invalid("the model ladder is empty");
    };
    let r = target_in_model(data, fits, first, (first.intercept, &first.beta), cfg, IntervalSet::NonparametricOnly)?;
    let mut steps = vec![step_from(1, &r)?];
    let mut prev = r;
    for (i, m) in models.iter().enumerate().skip(1) {
        let init = match zero_pad(&prev.beta, &models[i - 1], m) {
            Ok(b) => b,
            Err(e) => {
                log::warn!("ladder truncated at model {}: {e}", i + 1);
                break;
            }
        };
        let r = match target_in_model(data, fits, m, (prev.intercept, &init), cfg, IntervalSet::NonparametricOnly)
            .and_then(|r| step_from(i + 1, &r).map(|s| (r, s)))
        {
            Ok(v) => v,
            Err(e) => {
                log::warn!("ladder truncated at model {}: {e}", i + 1);
                break;
            }
        };
        let last = steps.last().expect("nonempty ladder");
        let stop = violates((last.psi, last.ci.lower, last.ci.upper), (r.1.psi, r.1.ci.lower, r.1.ci.upper));
        steps.push(r.1);
        if stop {
            let j_star = steps.len() - 1;
            return Ok(ModelLadderResult {
                steps,
                j_star,
                rule: SelectionRule::BridgedPlateau,
            });
        }
        prev = r.0;
    }
    select(steps, SelectionRule::BridgedPlateau)
}

pub fn nested_models(fits: &AteFits, max_models: usize) -> Result<Vec<WorkingModel>> {
    build_nested_sequence(&fits.q_path, &fits.q_basis, max_models)
}

pub fn atmle_from_fits(data: &AteData, fits: &AteFits, cfg: &AtmleConfig) -> Result<ModelLadderResult> {
    cfg.ate.validate()?;
    run_ladder(data, fits, &nested_models(fits, cfg.max_models)?, &cfg.ate)
}

pub fn atmle_estimate(data: &AteData, cfg: &AtmleConfig) -> Result<ModelLadderResult> {
    let fits = fit_nuisance(data, &cfg.ate)?;
    atmle_from_fits(data, &fits, cfg)
}

pub fn bridged_from_fits(data: &AteData, fits: &AteFits, cfg: &AtmleConfig) -> Result<ModelLadderResult> {
    cfg.ate.validate()?;
    run_bridged(data, fits, &nested_models(fits, cfg.max_models)?, &cfg.ate)
}

pub fn bridged_atmle(data: &AteData, cfg: &AtmleConfig) -> Result<ModelLadderResult> {
    let fits = fit_nuisance(data, &cfg.ate)?;
    bridged_from_fits(data, &fits, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ate::AteTargeting;
    use crate::simstudy::dgp::{gen_ate, AteDgp};
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn small() -> &'static (AteData, AteFits) {
        static CELL: OnceLock<(AteData, AteFits)> = OnceLock::new();
        CELL.get_or_init(|| {
            let data = gen_ate(AteDgp::One, 200, 11).unwrap();
            let fits = fit_nuisance(&data, &AteConfig::default()).unwrap();
            (data, fits)
        })
    }

    fn cfg(t: AteTargeting) -> AteConfig {
        AteConfig {
            targeting: t,
            ..AteConfig::default()
        }
    }

    #[test]
    fn plateau_hand_cases() {
        let ok = plateau_select(&[1.0, 1.1, 1.2], &[(0.5, 1.5), (0.6, 1.4), (0.7, 1.3)]).unwrap();
        assert_eq!(ok, 3);
        let up = plateau_select(&[1.0, 1.1], &[(0.5, 1.5), (0.4, 1.8)]).unwrap();
        assert_eq!(up, 1);
        let down = plateau_select(&[1.0, 0.9, 0.8], &[(0.5, 1.5), (0.45, 1.4), (0.3, 1.6)]).unwrap();
        assert_eq!(down, 2);
    }

    #[test]
    fn plateau_ties_and_errors() {
        assert_eq!(plateau_select(&[1.0, 1.0], &[(0.5, 1.5), (0.1, 1.9)]).unwrap(), 2);
        assert_eq!(plateau_select(&[2.0], &[(1.0, 3.0)]).unwrap(), 1);
        assert!(plateau_select(&[], &[]).is_err());
        assert!(plateau_select(&[1.0], &[]).is_err());
    }

    proptest! {
        #[test]
        fn plateau_in_range_and_prefix_stable(
            v in proptest::collection::vec((-2.0f64..2.0, 0.0f64..1.0, 0.0f64..1.0), 1..12)
        ) {
            let psis: Vec<f64> = v.iter().map(|t| t.0).collect();
            let cis: Vec<(f64, f64)> = v.iter().map(|t| (t.0 - t.1, t.0 + t.2)).collect();
            let j = plateau_select(&psis, &cis).unwrap();
            prop_assert!(j >= 1 && j <= psis.len());
            prop_assert_eq!(j, plateau_select(&psis, &cis).unwrap());
            // the selection only looks at the prefix up to the first violation
            if j < psis.len() {
                prop_assert_eq!(plateau_select(&psis[..=j], &cis[..=j]).unwrap(), j);
            }
        }
    }

    #[test]
    fn identical_models_select_last() {
        let (data, fits) = small();
        let m = nested_models(fits, 1).unwrap().remove(0);
        let models = vec![m.clone(), m.clone(), m];
        let c = cfg(AteTargeting::Projection);
        let r = run_ladder(data, fits, &models, &c).unwrap();
        assert_eq!(r.steps.len(), 3);
        assert!(r.steps.iter().all(|s| s.psi == r.steps[0].psi));
        assert_eq!(r.j_star, 3);
        let b = run_bridged(data, fits, &models, &c).unwrap();
        assert_eq!(b.j_star, 3);
        assert!(b.steps[1..].iter().all(|s| s.iterations == 0));
    }

    #[test]
    fn bridged_matches_cold_start_at_first_model() {
        let (data, fits) = small();
        let c = AtmleConfig {
            ate: cfg(AteTargeting::Projection),
            max_models: 5,
        };
        let cold = atmle_from_fits(data, fits, &c).unwrap();
        let warm = bridged_from_fits(data, fits, &c).unwrap();
        assert_eq!(cold.steps[0], warm.steps[0]);
        assert_eq!(warm.rule, SelectionRule::BridgedPlateau);
        // with no violation before the end, early stopping agrees with the full scan
        let psis: Vec<f64> = warm.steps.iter().map(|s| s.psi).collect();
        let cis: Vec<(f64, f64)> = warm.steps.iter().map(|s| (s.ci.lower, s.ci.upper)).collect();
        assert_eq!(plateau_select(&psis, &cis).unwrap(), warm.j_star);
    }

    #[test]
    fn single_model_equals_direct_fit() {
        let (data, fits) = small();
        let c = cfg(AteTargeting::Delta);
        let models = nested_models(fits, 1).unwrap();
        let r = run_bridged(data, fits, &models, &c).unwrap();
        let m = &models[0];
        let d = target_in_model(data, fits, m, (m.intercept, &m.beta), &c, IntervalSet::NonparametricOnly).unwrap();
        assert_eq!(r.j_star, 1);
        assert_eq!(r.psi(), d.psi);
        assert_eq!(r.ci(), d.ci_np.unwrap());
    }

    #[test]
    fn relaxed_fit_improves_along_ladder() {
        let (data, fits) = small();
        let models = nested_models(fits, 8).unwrap();
        let c = cfg(AteTargeting::Relaxed);
        let mut prev = f64::INFINITY;
        for m in &models {
            let r = target_in_model(data, fits, m, (m.intercept, &m.beta), &c, IntervalSet::NonparametricOnly).unwrap();
            let q = crate::working_model::linear_predictor_from_design(&m.design(&fits.x_obs).unwrap(), r.intercept, &r.beta);
            let rss: f64 = q.iter().zip(&data.y).map(|(q, y)| (y - q).powi(2)).sum();
            assert!(rss <= prev * (1.0 + 1e-10));
            prev = rss;
        }
    }

    #[test]
    fn ladder_csv_marks_selection() {
        let (data, fits) = small();
        let c = AtmleConfig {
            ate: cfg(AteTargeting::Projection),
            max_models: 3,
        };
        let r = atmle_from_fits(data, fits, &c).unwrap();
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "j,psi,L,U,iterations,basis_count,selected");
        assert_eq!(lines.len(), r.steps.len() + 1);
        assert_eq!(lines.iter().filter(|l| l.ends_with(",true")).count(), 1);
    }
}
