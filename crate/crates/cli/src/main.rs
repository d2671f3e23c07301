use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, CommandFactory, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use reghal::ate::{fit_nuisance, estimate_from_fits, AteConfig, AteData, AteResult, AteTargeting, ModelRule};
use reghal::atmle::{atmle_from_fits, bridged_from_fits, AtmleConfig};
use reghal::eic::Interval;
use reghal::simstudy::dgp::AteDgp;
use reghal::simstudy::{
    format_table, read_raw_csv, run_replications, summarize, write_raw_csv, write_summary_csv, RawRow, Study,
    StudyConfig,
};
use reghal::survival::{estimate_survival_curve, SurvConfig, SurvData, SurvTargeting};
use reghal::HalError;

const EXIT_USAGE: u8 = 2;
const EXIT_ESTIMATION: u8 = 3;

/// Regularized TMLE inside HAL working models: estimation and simulation studies.
#[derive(Parser, Debug)]
#[command(name = "reghal-tmle", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Replicated ATE estimation on a simulated design.
    SimulateAte(SimAteArgs),
    /// Replicated survival-curve estimation on the Beta(2,2) design.
    SimulateSurvival(SimSurvArgs),
    /// Replicated adaptive model selection (plateau ladder) for the ATE.
    SimulateAtmle(SimAtmleArgs),
    /// Estimate the ATE from a CSV with columns W1..Wd, A, Y.
    EstimateAte(EstAteArgs),
    /// Estimate a survival curve from a CSV with columns time, event.
    EstimateSurvival(EstSurvArgs),
    /// Summarize a raw results CSV written by a simulate command.
    Summarize(SummarizeArgs),
}

fn positive_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("'{s}' is not a positive number")),
    }
}

fn nonnegative_f64(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("'{s}' is not a nonnegative number")),
    }
}

fn probability(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        _ => Err(format!("'{s}' is not in (0, 1)")),
    }
}

fn positive_usize(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(format!("'{s}' is not a positive integer")),
    }
}

#[derive(Args, Debug, Serialize)]
struct Common {
    /// File of key=value lines overriding defaults; flags override the file.
    #[arg(long, value_name = "PATH")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Seed for every random step.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Confidence level of all intervals.
    #[arg(long, default_value_t = 0.95, value_parser = probability)]
    level: f64,
}

#[derive(Args, Debug, Serialize)]
struct SimCommon {
    /// Sample size per replication.
    #[arg(long, default_value_t = 500, value_parser = positive_usize)]
    n: usize,
    /// Number of replications.
    #[arg(long, default_value_t = 100, value_parser = positive_usize)]
    reps: usize,
    /// Worker threads for replications (default: all cores).
    #[arg(long, value_parser = positive_usize)]
    threads: Option<usize>,
    /// Raw results CSV.
    #[arg(long, default_value = "results.csv")]
    out: PathBuf,
    /// Also write the summary as CSV.
    #[arg(long)]
    summary_out: Option<PathBuf>,
    /// Record wall-clock time per row (output is then not reproducible byte for byte).
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug, Serialize)]
struct AteOpts {
    /// Comma-separated targetings: relaxed, projection, delta, direct, standard.
    #[arg(long, value_delimiter = ',', default_value = "relaxed,projection,delta,direct,standard")]
    targeting: Vec<String>,
    /// Working model: cv or undersmoothed.
    #[arg(long, default_value = "cv")]
    rule: String,
    /// Projection lasso penalty λ.
    #[arg(long, default_value_t = 1e-5, value_parser = nonnegative_f64)]
    lambda: f64,
    /// Penalty of the direct targeting lasso.
    #[arg(long, default_value_t = 1e-5, value_parser = nonnegative_f64)]
    direct_lambda: f64,
    /// Ridge η of the delta-method direction.
    #[arg(long, default_value_t = 1e-6, value_parser = positive_f64)]
    ridge: f64,
    /// Targeting step size.
    #[arg(long, default_value_t = 1e-4, value_parser = positive_f64)]
    step: f64,
    #[arg(long, default_value_t = 5000, value_parser = positive_usize)]
    max_iter: usize,
    #[arg(long, default_value_t = 10, value_parser = positive_usize)]
    cv_folds: usize,
    /// Propensity truncation of standard TMLE, lower bound.
    #[arg(long, default_value_t = 0.01, value_parser = probability)]
    trunc_lower: f64,
    /// Propensity truncation of standard TMLE, upper bound.
    #[arg(long, default_value_t = 0.99, value_parser = probability)]
    trunc_upper: f64,
    /// Knots per covariate (default max(n/20, 1)).
    #[arg(long, value_parser = positive_usize)]
    max_knots: Option<usize>,
    #[arg(long, default_value_t = 100, value_parser = positive_usize)]
    n_lambda: usize,
    #[arg(long, default_value_t = 1e-4, value_parser = probability)]
    lambda_ratio: f64,
    /// Penalize standardized basis coefficients in the HAL fits.
    #[arg(long)]
    standardize: bool,
    /// Report only the nonparametric interval.
    #[arg(long)]
    fewer_intervals: bool,
}

#[derive(Args, Debug, Serialize)]
struct SurvOpts {
    /// Comma-separated targetings: relaxed, projection, delta.
    #[arg(long, value_delimiter = ',', default_value = "relaxed,projection,delta")]
    targeting: Vec<String>,
    /// Undersmooth the failure hazard (L1 norm 1.61 times the CV fit).
    #[arg(long)]
    undersmooth: bool,
    #[arg(long, default_value_t = 20, value_parser = positive_usize)]
    grid_size: usize,
    #[arg(long, default_value_t = 100, value_parser = positive_usize)]
    failure_knots: usize,
    #[arg(long, default_value_t = 50, value_parser = positive_usize)]
    censoring_knots: usize,
    #[arg(long, default_value_t = 10, value_parser = positive_usize)]
    cv_folds: usize,
    #[arg(long, default_value_t = 1e-5, value_parser = nonnegative_f64)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-6, value_parser = positive_f64)]
    ridge: f64,
    #[arg(long, default_value_t = 1e-3, value_parser = positive_f64)]
    step: f64,
    #[arg(long, default_value_t = 5000, value_parser = positive_usize)]
    max_iter: usize,
    /// Gaussian draws for the simultaneous band.
    #[arg(long, default_value_t = 10_000, value_parser = positive_usize)]
    band_draws: usize,
    /// Skip the projection intervals not needed by the chosen targeting.
    #[arg(long)]
    fewer_intervals: bool,
}

#[derive(Args, Debug)]
struct SimAteArgs {
    /// Design: 1 or 2.
    #[arg(long, default_value = "1", value_parser = ["1", "2"])]
    dgp: String,
    #[command(flatten)]
    sim: SimCommon,
    #[command(flatten)]
    ate: AteOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SimSurvArgs {
    #[command(flatten)]
    sim: SimCommon,
    #[command(flatten)]
    surv: SurvOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SimAtmleArgs {
    #[arg(long, default_value = "2", value_parser = ["1", "2"])]
    dgp: String,
    /// Largest number of nested models.
    #[arg(long, default_value_t = 20, value_parser = positive_usize)]
    max_models: usize,
    /// Warm-start each model from the previous one and stop at the first violation.
    #[arg(long)]
    bridged: bool,
    #[command(flatten)]
    sim: SimCommon,
    #[command(flatten)]
    ate: AteOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EstAteArgs {
    input: PathBuf,
    /// Run the nested-model ladder and write it instead of per-targeting results.
    #[arg(long)]
    atmle: bool,
    #[arg(long, default_value_t = 20, value_parser = positive_usize)]
    max_models: usize,
    #[arg(long)]
    bridged: bool,
    /// Output CSV (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    ate: AteOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct EstSurvArgs {
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    surv: SurvOpts,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct SummarizeArgs {
    input: PathBuf,
    #[arg(long, default_value_t = 0.95, value_parser = probability)]
    level: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Estimation(String),
}

impl From<HalError> for Failure {
    fn from(e: HalError) -> Self {
        match e {
            HalError::InvalidInput(m) => Failure::Usage(m),
            other => Failure::Estimation(other.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Estimation(e.to_string())
    }
}

fn parse_list<T: std::str::FromStr<Err = HalError>>(items: &[String]) -> Result<Vec<T>, Failure> {
    items.iter().map(|s| s.parse::<T>().map_err(Failure::from)).collect()
}

fn ate_config(o: &AteOpts, c: &Common) -> Result<AteConfig, Failure> {
    let cfg = AteConfig {
        rule: o.rule.parse::<ModelRule>()?,
        seed: c.seed,
        projection_penalty: o.lambda,
        direct_penalty: o.direct_lambda,
        ridge: o.ridge,
        step: o.step,
        max_iter: o.max_iter,
        cv_folds: o.cv_folds,
        level: c.level,
        truncation: (o.trunc_lower, o.trunc_upper),
        max_knots: o.max_knots,
        n_lambda: o.n_lambda,
        lambda_ratio: o.lambda_ratio,
        standardize: o.standardize,
        all_intervals: !o.fewer_intervals,
        ..AteConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn surv_config(o: &SurvOpts, c: &Common) -> Result<SurvConfig, Failure> {
    let cfg = SurvConfig {
        undersmooth: o.undersmooth,
        seed: c.seed,
        grid_size: o.grid_size,
        failure_knots: o.failure_knots,
        censoring_knots: o.censoring_knots,
        cv_folds: o.cv_folds,
        projection_penalty: o.lambda,
        ridge: o.ridge,
        step: o.step,
        max_iter: o.max_iter,
        level: c.level,
        band_draws: o.band_draws,
        all_intervals: !o.fewer_intervals,
        ..SurvConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn dgp(s: &str) -> AteDgp {
    if s == "2" {
        AteDgp::Two
    } else {
        AteDgp::One
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Estimation(format!("cannot write {}: {e}", path.display())))
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, Failure> {
    Ok(match path {
        Some(p) => Box::new(create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn meta_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn run_study(study: StudyConfig, sim: &SimCommon, level: f64, settings: serde_json::Value) -> Result<(), Failure> {
    let rows = run_replications(&study)?;
    write_raw_csv(&rows, create(&sim.out)?)?;
    let summary = summarize(&rows, level)?;
    if let Some(p) = &sim.summary_out {
        write_summary_csv(&summary, create(p)?)?;
    }
    let meta = json!({
        "estimator": study.study.estimator(),
        "n": study.n,
        "reps": study.reps,
        "seed": study.base_seed,
        "settings": settings,
        "abs_bias": "|mean(psi_hat) - truth|, averaged over grid points for survival",
        "oracle_coverage": "psi_hat +/- z * sample SD of psi_hat across replications",
    });
    let mut m = create(&meta_path(&sim.out))?;
    serde_json::to_writer_pretty(&mut m, &meta).map_err(|e| Failure::Estimation(e.to_string()))?;
    writeln!(m)?;
    print!("{}", format_table(&summary));
    report_failures(&rows)
}

fn report_failures(rows: &[RawRow]) -> Result<(), Failure> {
    let mut failed: BTreeMap<(String, String), Vec<usize>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.is_missing()) {
        let reps = failed.entry((r.estimator.clone(), r.targeting.clone())).or_default();
        if reps.last() != Some(&r.rep) {
            reps.push(r.rep);
        }
    }
    if failed.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = failed
        .iter()
        .map(|((e, t), reps)| {
            let ids: Vec<String> = reps.iter().map(|r| r.to_string()).collect();
            format!("  {e}/{t}: replications {}", ids.join(", "))
        })
        .collect();
    Err(Failure::Estimation(format!("failed replications:\n{}", lines.join("\n"))))
}

fn ate_settings(o: &AteOpts, c: &Common) -> serde_json::Value {
    json!({ "ate": o, "common": c, "lasso_loss": "deviance", "selector_interval": "nonparametric EIC" })
}

fn simulate_ate(a: SimAteArgs) -> Result<(), Failure> {
    let targetings = parse_list::<AteTargeting>(&a.ate.targeting)?;
    let study = StudyConfig {
        study: Study::Ate {
            dgp: dgp(&a.dgp),
            targetings,
            cfg: ate_config(&a.ate, &a.common)?,
        },
        n: a.sim.n,
        reps: a.sim.reps,
        base_seed: a.common.seed,
        threads: a.sim.threads,
        record_time: a.sim.timing,
    };
    let mut settings = ate_settings(&a.ate, &a.common);
    settings["dgp"] = json!(a.dgp);
    run_study(study, &a.sim, a.common.level, settings)
}

fn simulate_atmle(a: SimAtmleArgs) -> Result<(), Failure> {
    let targetings = parse_list::<AteTargeting>(&a.ate.targeting)?;
    let study = StudyConfig {
        study: Study::Atmle {
            dgp: dgp(&a.dgp),
            targetings,
            cfg: AtmleConfig {
                ate: ate_config(&a.ate, &a.common)?,
                max_models: a.max_models,
            },
            bridged: a.bridged,
        },
        n: a.sim.n,
        reps: a.sim.reps,
        base_seed: a.common.seed,
        threads: a.sim.threads,
        record_time: a.sim.timing,
    };
    let mut settings = ate_settings(&a.ate, &a.common);
    settings["dgp"] = json!(a.dgp);
    settings["max_models"] = json!(a.max_models);
    settings["bridged"] = json!(a.bridged);
    run_study(study, &a.sim, a.common.level, settings)
}

fn simulate_survival(a: SimSurvArgs) -> Result<(), Failure> {
    let targetings = parse_list::<SurvTargeting>(&a.surv.targeting)?;
    let study = StudyConfig {
        study: Study::Survival {
            targetings,
            cfg: surv_config(&a.surv, &a.common)?,
        },
        n: a.sim.n,
        reps: a.sim.reps,
        base_seed: a.common.seed,
        threads: a.sim.threads,
        record_time: a.sim.timing,
    };
    let settings = json!({ "survival": a.surv, "common": a.common, "grid": "Beta(2,2) quantiles at k/(grid_size+1)" });
    run_study(study, &a.sim, a.common.level, settings)
}

fn ci_cells(ci: Option<Interval>) -> [String; 2] {
    match ci {
        Some(c) => [c.lower.to_string(), c.upper.to_string()],
        None => [String::new(), String::new()],
    }
}

fn estimate_ate_cmd(a: EstAteArgs) -> Result<(), Failure> {
    let data = AteData::read_csv(&a.input)?;
    let base = ate_config(&a.ate, &a.common)?;
    let targetings = parse_list::<AteTargeting>(&a.ate.targeting)?;
    let fits = fit_nuisance(&data, &base).map_err(|e| Failure::Estimation(e.to_string()))?;
    if a.atmle {
        let [t] = targetings[..] else {
            return Err(Failure::Usage("--atmle takes exactly one --targeting".into()));
        };
        let cfg = AtmleConfig {
            ate: AteConfig { targeting: t, ..base },
            max_models: a.max_models,
        };
        let ladder = if a.bridged {
            bridged_from_fits(&data, &fits, &cfg)
        } else {
            atmle_from_fits(&data, &fits, &cfg)
        }
        .map_err(|e| Failure::Estimation(e.to_string()))?;
        ladder.write_csv(output(a.out.as_ref())?)?;
        eprintln!("selected j = {} ({}), psi = {}", ladder.j_star, ladder.rule, ladder.psi());
        return Ok(());
    }
    let results: Vec<AteResult> = targetings
        .iter()
        .map(|&t| estimate_from_fits(&data, &fits, &AteConfig { targeting: t, ..base.clone() }))
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::Estimation(e.to_string()))?;
    let mut w = csv::Writer::from_writer(output(a.out.as_ref())?);
    let header = [
        "targeting", "psi", "np_lo", "np_hi", "proj_lo", "proj_hi", "proj_cv_lo", "proj_cv_hi", "delta_lo", "delta_hi",
        "iterations", "converged", "n_basis",
    ];
    w.write_record(header).map_err(HalError::from)?;
    for r in &results {
        let mut rec = vec![r.targeting.label().to_string(), r.psi.to_string()];
        for ci in [r.ci_np, r.ci_proj, r.ci_proj_cv, r.ci_delta] {
            rec.extend(ci_cells(ci));
        }
        rec.extend([r.iterations.to_string(), r.converged.to_string(), r.n_basis.to_string()]);
        w.write_record(&rec).map_err(HalError::from)?;
    }
    w.flush()?;
    Ok(())
}

fn estimate_survival_cmd(a: EstSurvArgs) -> Result<(), Failure> {
    let data = SurvData::read_csv(&a.input)?;
    let targetings = parse_list::<SurvTargeting>(&a.surv.targeting)?;
    let [t] = targetings[..] else {
        return Err(Failure::Usage("estimate-survival takes exactly one --targeting".into()));
    };
    let cfg = SurvConfig {
        targeting: t,
        ..surv_config(&a.surv, &a.common)?
    };
    let r = estimate_survival_curve(&data, &cfg).map_err(|e| Failure::Estimation(e.to_string()))?;
    r.write_csv(output(a.out.as_ref())?)?;
    Ok(())
}

fn summarize_cmd(a: SummarizeArgs) -> Result<(), Failure> {
    let file = File::open(&a.input).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", a.input.display())))?;
    let rows = read_raw_csv(file)?;
    let summary = summarize(&rows, a.level)?;
    if let Some(p) = &a.out {
        write_summary_csv(&summary, create(p)?)?;
    }
    print!("{}", format_table(&summary));
    Ok(())
}

/// Expand `--config <path>` into flags placed before the command-line flags,
/// so that explicit flags win.
fn expand_config(args: Vec<String>) -> Result<Vec<String>, String> {
    let mut path = None;
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            path = Some(it.next().ok_or("--config needs a path")?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = path else {
        return Ok(rest);
    };
    let Some(sub_name) = rest.get(1).cloned() else {
        return Err("--config needs a subcommand".into());
    };
    let cmd = Cli::command();
    let Some(sub) = cmd.find_subcommand(&sub_name) else {
        return Ok(rest);
    };
    let text = std::fs::read_to_string(&path).map_err(|e| format!("cannot read config {path}: {e}"))?;
    let mut injected = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .map(|(k, v)| (k.trim(), v.trim()))
            .ok_or_else(|| format!("config line {}: expected key=value", i + 1))?;
        let arg = sub
            .get_arguments()
            .find(|a| a.get_long() == Some(key) && key != "config")
            .ok_or_else(|| format!("unknown config key '{key}' for {sub_name}"))?;
        if matches!(arg.get_action(), ArgAction::SetTrue) {
            match value {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                _ => return Err(format!("config key '{key}' takes true or false")),
            }
        } else {
            injected.push(format!("--{key}={value}"));
        }
    }
    let mut out = rest[..2].to_vec();
    out.extend(injected);
    out.extend(rest[2..].iter().cloned());
    Ok(out)
}

fn usage_for(sub: Option<&str>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    match sub.and_then(|s| cmd.find_subcommand_mut(s)) {
        Some(c) => c.render_usage().to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn usage_error(msg: &str, sub: Option<&str>) -> ExitCode {
    eprintln!("error: {msg}\n");
    eprintln!("{}", usage_for(sub));
    ExitCode::from(EXIT_USAGE)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let raw: Vec<String> = std::env::args().collect();
    let sub = raw.get(1).cloned();
    let sub = sub.as_deref();
    let args = match expand_config(raw.clone()) {
        Ok(a) => a,
        Err(msg) => return usage_error(&msg, sub),
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let rendered = e.render().to_string();
            eprint!("{rendered}");
            if !rendered.contains("Usage:") {
                eprintln!("\n{}", usage_for(sub));
            }
            return ExitCode::from(EXIT_USAGE);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match cli.cmd {
        Cmd::SimulateAte(a) => simulate_ate(a),
        Cmd::SimulateSurvival(a) => simulate_survival(a),
        Cmd::SimulateAtmle(a) => simulate_atmle(a),
        Cmd::EstimateAte(a) => estimate_ate_cmd(a),
        Cmd::EstimateSurvival(a) => estimate_survival_cmd(a),
        Cmd::Summarize(a) => summarize_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => usage_error(&msg, sub),
        Err(Failure::Estimation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ESTIMATION)
        }
    }
}
