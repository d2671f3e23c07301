//! Bias, variance and coverage summaries of a raw results table.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::simstudy::runner::RawRow;
use crate::stats::{mean, sample_sd, z_two_sided};

/// Interval variants carried in the raw table, by column.
pub const CI_VARIANTS: [&str; 4] = ["np", "proj", "proj_cv", "delta"];

fn se_of(r: &RawRow, variant: &str) -> Option<f64> {
    match variant {
        "np" => r.se_np,
        "proj" => r.se_proj,
        "proj_cv" => r.se_proj_cv,
        "delta" => r.se_delta,
        _ => None,
    }
}

/// Coverage in percent and mean width for one interval variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Coverage {
    pub coverage: f64,
    pub mean_width: f64,
}

/// Metrics for one (estimator, n, targeting) cell. Survival cells average each
/// metric over the grid points.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub estimator: String,
    pub n: usize,
    pub targeting: String,
    pub reps: usize,
    pub failed: usize,
    /// |mean(ψ̂) − ψ₀|
    pub abs_bias: f64,
    pub std_err: Option<f64>,
    pub mse: f64,
    pub ci: BTreeMap<&'static str, Coverage>,
    pub oracle_coverage: Option<f64>,
    pub mean_selected_j: Option<f64>,
    pub modal_selected_j: Option<usize>,
}

impl SummaryRow {
    pub fn coverage(&self, variant: &str) -> Option<f64> {
        self.ci.get(variant).map(|c| c.coverage)
    }
}

struct TargetStats {
    abs_bias: f64,
    std_err: Option<f64>,
    mse: f64,
    ci: BTreeMap<&'static str, Coverage>,
    oracle: Option<f64>,
}

fn target_stats(rows: &[&RawRow], z: f64) -> TargetStats {
    let truth = rows[0].truth;
    let psi: Vec<f64> = rows.iter().filter_map(|r| r.psi_hat).collect();
    let sd = (psi.len() >= 2).then(|| sample_sd(&psi));
    let mut ci = BTreeMap::new();
    for v in CI_VARIANTS {
        let pairs: Vec<(f64, f64)> = rows.iter().filter_map(|r| Some((r.psi_hat?, se_of(r, v)?))).collect();
        if pairs.is_empty() {
            continue;
        }
        let hit = pairs.iter().filter(|(p, se)| (p - truth).abs() <= z * se).count();
        ci.insert(
            v,
            Coverage {
                coverage: 100.0 * hit as f64 / pairs.len() as f64,
                mean_width: mean(&pairs.iter().map(|(_, se)| 2.0 * z * se).collect::<Vec<_>>()),
            },
        );
    }
    TargetStats {
        abs_bias: (mean(&psi) - truth).abs(),
        std_err: sd,
        mse: mean(&psi.iter().map(|p| (p - truth).powi(2)).collect::<Vec<_>>()),
        ci,
        oracle: sd.map(|sd| 100.0 * psi.iter().filter(|p| (*p - truth).abs() <= z * sd).count() as f64 / psi.len() as f64),
    }
}

/// Summarize every (estimator, n, targeting) cell of `rows`; intervals and
/// oracle coverage use the two-sided normal quantile at `level`.
pub fn summarize(rows: &[RawRow], level: f64) -> Result<Vec<SummaryRow>> {
    if !(level > 0.0 && level < 1.0) {
        return invalid("level must lie in (0, 1)");
    }
    let z = z_two_sided(level);
    let mut cells: BTreeMap<(String, usize, String), Vec<&RawRow>> = BTreeMap::new();
    for r in rows {
        cells
            .entry((r.estimator.clone(), r.n, r.targeting.clone()))
            .or_default()
            .push(r);
    }
    let mut out = Vec::new();
    for ((estimator, n, targeting), cell) in cells {
        let all_reps: BTreeSet<usize> = cell.iter().map(|r| r.rep).collect();
        let ok_reps: BTreeSet<usize> = cell.iter().filter(|r| !r.is_missing()).map(|r| r.rep).collect();
        let mut by_target: BTreeMap<usize, Vec<&RawRow>> = BTreeMap::new();
        for r in cell.iter().filter(|r| !r.is_missing()) {
            by_target.entry(r.target_id).or_default().push(r);
        }
        let stats: Vec<TargetStats> = by_target.values().map(|v| target_stats(v, z)).collect();
        let avg = |f: &dyn Fn(&TargetStats) -> Option<f64>| -> Option<f64> {
            let v: Vec<f64> = stats.iter().filter_map(f).collect();
            (!v.is_empty() && v.len() == stats.len()).then(|| mean(&v))
        };
        let mut ci = BTreeMap::new();
        for v in CI_VARIANTS {
            if let (Some(c), Some(w)) = (
                avg(&|s| s.ci.get(v).map(|c| c.coverage)),
                avg(&|s| s.ci.get(v).map(|c| c.mean_width)),
            ) {
                ci.insert(v, Coverage { coverage: c, mean_width: w });
            }
        }
        let js: Vec<usize> = cell
            .iter()
            .filter(|r| r.target_id == 0)
            .filter_map(|r| r.selected_j)
            .collect();
        let modal = {
            let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
            for &j in &js {
                *counts.entry(j).or_default() += 1;
            }
            // smallest j among ties
            counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(&j, _)| j)
        };
        out.push(SummaryRow {
            estimator,
            n,
            targeting,
            reps: ok_reps.len(),
            failed: all_reps.len() - ok_reps.len(),
            abs_bias: avg(&|s| Some(s.abs_bias)).unwrap_or(f64::NAN),
            std_err: avg(&|s| s.std_err),
            mse: avg(&|s| Some(s.mse)).unwrap_or(f64::NAN),
            ci,
            oracle_coverage: avg(&|s| s.oracle),
            mean_selected_j: (!js.is_empty()).then(|| mean(&js.iter().map(|&j| j as f64).collect::<Vec<_>>())),
            modal_selected_j: modal,
        });
    }
    Ok(out)
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["estimator", "n", "targeting", "reps", "failed", "abs_bias", "std_err", "mse"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for v in CI_VARIANTS {
        header.push(format!("cov_{v}"));
        header.push(format!("width_{v}"));
    }
    header.extend(["cov_oracle", "mean_selected_j", "modal_selected_j"].map(String::from));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.estimator.clone(),
            r.n.to_string(),
            r.targeting.clone(),
            r.reps.to_string(),
            r.failed.to_string(),
            r.abs_bias.to_string(),
            cell(r.std_err),
            r.mse.to_string(),
        ];
        for v in CI_VARIANTS {
            let c = r.ci.get(v);
            rec.push(cell(c.map(|c| c.coverage)));
            rec.push(cell(c.map(|c| c.mean_width)));
        }
        rec.push(cell(r.oracle_coverage));
        rec.push(cell(r.mean_selected_j));
        rec.push(r.modal_selected_j.map_or_else(String::new, |j| j.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table with the usual column names.
pub fn format_table(rows: &[SummaryRow]) -> String {
    let header = [
        "Estimator", "n", "Targeting", "Reps", "Abs_Bias", "Std_Err", "MSE", "Cov_NP", "Cov_Proj", "Cov_ProjCV",
        "Cov_Delta", "Cov_Oracle", "Selected_j",
    ];
    let fmt4 = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.1}"));
    let mut table: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
    for r in rows {
        table.push(vec![
            r.estimator.clone(),
            r.n.to_string(),
            r.targeting.clone(),
            if r.failed > 0 { format!("{} ({} failed)", r.reps, r.failed) } else { r.reps.to_string() },
            fmt4(Some(r.abs_bias)),
            fmt4(r.std_err),
            fmt4(Some(r.mse)),
            pct(r.coverage("np")),
            pct(r.coverage("proj")),
            pct(r.coverage("proj_cv")),
            pct(r.coverage("delta")),
            pct(r.oracle_coverage),
            r.modal_selected_j.map_or_else(|| "-".to_string(), |j| j.to_string()),
        ]);
    }
    let widths: Vec<usize> = (0..header.len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut s = String::new();
    for row in &table {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (v, w))| if c < 3 { format!("{v:<w$}") } else { format!("{v:>w$}") })
            .collect();
        let _ = writeln!(s, "{}", line.join("  ").trim_end());
    }
    s
}
