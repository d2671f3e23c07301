//! Data-generating processes and seeded samplers.

use std::sync::OnceLock;

use nalgebra::DMatrix;

use crate::ate::AteData;
use crate::error::{invalid, Result};
use crate::rng::Stream;
use crate::survival::SurvData;

fn expit(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AteDgp {
    /// Smooth propensity, continuous covariates.
    One,
    /// Near-positivity violation, covariates rounded to one decimal.
    Two,
}

impl AteDgp {
    pub fn label(&self) -> &'static str {
        match self {
            AteDgp::One => "dgp1",
            AteDgp::Two => "dgp2",
        }
    }

    pub fn propensity(&self, w1: f64, w2: f64) -> f64 {
        match self {
            AteDgp::One => expit(-0.25 * w1 + 0.7 * w2),
            AteDgp::Two => expit(-0.25 * w1 + 5.0 * w2),
        }
    }
}

/// Mean outcome given treatment and covariates, shared by both designs.
pub fn outcome_mean(a: f64, w1: f64, w2: f64, w3: f64) -> f64 {
    1.9 + 1.5 * a
        + (2.5 * w1 + 0.7 * w2) * a
        + 1.5 * (w1 + w2).sin()
        + 0.3 * w1.abs()
        + 0.9 * w1 * w1
        + 1.4 * w2
        + 2.1 * w3
}

fn draw_w(dgp: AteDgp, s: &mut Stream) -> [f64; 3] {
    let mut w = [s.uniform_range(-1.0, 1.0), s.uniform_range(-1.0, 1.0), s.uniform_range(-1.0, 1.0)];
    if dgp == AteDgp::Two {
        for v in &mut w {
            *v = (*v * 10.0).round() / 10.0;
        }
    }
    w
}

pub fn gen_ate(dgp: AteDgp, n: usize, seed: u64) -> Result<AteData> {
    if n == 0 {
        return invalid("sample size must be positive");
    }
    let mut s = Stream::new(seed);
    let mut wv = Vec::with_capacity(3 * n);
    let mut a = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let w = draw_w(dgp, &mut s);
        let ai = s.bernoulli(dgp.propensity(w[0], w[1]));
        let yi = outcome_mean(ai, w[0], w[1], w[2]) + s.normal();
        wv.extend_from_slice(&w);
        a.push(ai);
        y.push(yi);
    }
    AteData::new(DMatrix::from_row_slice(n, 3, &wv), a, y)
}

pub fn gen_dgp1(n: usize, seed: u64) -> Result<AteData> {
    gen_ate(AteDgp::One, n, seed)
}

pub fn gen_dgp2(n: usize, seed: u64) -> Result<AteData> {
    gen_ate(AteDgp::Two, n, seed)
}

/// Seed of the fixed Monte Carlo run behind the DGP 2 truth.
pub const TRUTH_SEED: u64 = 20_240_601;
pub const TRUTH_DRAWS: usize = 10_000_000;

/// DGP 1: exactly 1.5. DGP 2: cached Monte Carlo average over `TRUTH_DRAWS` draws.
pub fn true_ate(dgp: AteDgp) -> f64 {
    match dgp {
        AteDgp::One => 1.5,
        AteDgp::Two => {
            static CACHE: OnceLock<f64> = OnceLock::new();
            *CACHE.get_or_init(|| true_ate_mc(AteDgp::Two, TRUTH_DRAWS, TRUTH_SEED))
        }
    }
}

/// Monte Carlo approximation of the treatment effect by direct averaging.
pub fn true_ate_mc(dgp: AteDgp, draws: usize, seed: u64) -> f64 {
    let mut s = Stream::new(seed);
    let mut acc = 0.0;
    for _ in 0..draws {
        let w = draw_w(dgp, &mut s);
        acc += outcome_mean(1.0, w[0], w[1], w[2]) - outcome_mean(0.0, w[0], w[1], w[2]);
    }
    acc / draws as f64
}

/// Failure time ~ Beta(2, 2) by inverting `3t² − 2t³ = u`.
pub fn beta22_quantile(u: f64) -> f64 {
    0.5 + ((2.0 * u - 1.0).asin() / 3.0).sin()
}

pub fn true_survival(t: f64) -> f64 {
    if t <= 0.0 {
        1.0
    } else if t >= 1.0 {
        0.0
    } else {
        1.0 - 3.0 * t * t + 2.0 * t * t * t
    }
}

/// Censoring time upper bound; censoring is U(0, CENSOR_MAX).
pub const CENSOR_MAX: f64 = 1.2;

/// Expected censored fraction P(C < T) = E[T]/1.2.
pub const EXPECTED_CENSORED: f64 = 0.5 / CENSOR_MAX;

pub fn gen_surv(n: usize, seed: u64) -> Result<SurvData> {
    if n == 0 {
        return invalid("sample size must be positive");
    }
    let mut s = Stream::new(seed);
    let mut time = Vec::with_capacity(n);
    let mut event = Vec::with_capacity(n);
    for _ in 0..n {
        let t = beta22_quantile(s.uniform());
        let c = s.uniform_range(0.0, CENSOR_MAX);
        time.push(t.min(c));
        event.push(if t <= c { 1.0 } else { 0.0 });
    }
    SurvData::new(time, event)
}
