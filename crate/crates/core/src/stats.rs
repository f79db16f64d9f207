//! Non-Gaussian amplitude models and the fixed uniform phase model: densities,
//! distribution functions and estimators.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_lr, ln_gamma};
use thiserror::Error;

/// Magnitude samples are clamped to this before fitting so logarithms stay finite.
pub const MAGNITUDE_FLOOR: f64 = 1e-12;

const WEIBULL_MAX_ITER: usize = 50;
const WEIBULL_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("{kind:?} fit needs at least 2 samples, got {got}")]
    TooFewSamples { kind: DistributionKind, got: usize },
    #[error("{kind:?} fit: samples have zero variance")]
    Degenerate { kind: DistributionKind },
    #[error("{kind:?} fit: non-finite sample")]
    NonFinite { kind: DistributionKind },
    #[error("parameter out of domain: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionKind {
    Exponential,
    Rayleigh,
    Gamma,
    LogNormal,
    Weibull,
    Nakagami,
    UniformPhase,
}

impl DistributionKind {
    pub const MAGNITUDE_MODELS: [DistributionKind; 6] = [
        DistributionKind::Exponential,
        DistributionKind::Rayleigh,
        DistributionKind::Gamma,
        DistributionKind::LogNormal,
        DistributionKind::Weibull,
        DistributionKind::Nakagami,
    ];

    pub fn is_magnitude(self) -> bool {
        self != DistributionKind::UniformPhase
    }
}

/// A model with concrete parameters. Rates and scales follow the usual
/// parameterizations: `Gamma { shape, rate }` has mean `shape / rate`,
/// `Weibull { scale, shape }` has CDF `1 - exp(-(r/scale)^shape)`,
/// `Nakagami { shape, spread }` has `E r^2 = spread`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Distribution {
    Exponential { rate: f64 },
    Rayleigh { sigma: f64 },
    Gamma { shape: f64, rate: f64 },
    LogNormal { mu: f64, sigma: f64 },
    Weibull { scale: f64, shape: f64 },
    Nakagami { shape: f64, spread: f64 },
    UniformPhase,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fitted {
    pub dist: Distribution,
    pub samples: usize,
    /// False when an iterative estimator gave up and a moment estimate was used.
    pub converged: bool,
}

fn positive(name: &str, v: f64) -> Result<(), StatsError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(StatsError::Domain(format!("{name} = {v}")))
    }
}

impl Distribution {
    pub fn kind(&self) -> DistributionKind {
        match self {
            Distribution::Exponential { .. } => DistributionKind::Exponential,
            Distribution::Rayleigh { .. } => DistributionKind::Rayleigh,
            Distribution::Gamma { .. } => DistributionKind::Gamma,
            Distribution::LogNormal { .. } => DistributionKind::LogNormal,
            Distribution::Weibull { .. } => DistributionKind::Weibull,
            Distribution::Nakagami { .. } => DistributionKind::Nakagami,
            Distribution::UniformPhase => DistributionKind::UniformPhase,
        }
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        match *self {
            Distribution::Exponential { rate } => positive("rate", rate),
            Distribution::Rayleigh { sigma } => positive("sigma", sigma),
            Distribution::Gamma { shape, rate } => positive("shape", shape).and(positive("rate", rate)),
            Distribution::LogNormal { mu, sigma } => {
                if !mu.is_finite() {
                    return Err(StatsError::Domain(format!("mu = {mu}")));
                }
                positive("sigma", sigma)
            }
            Distribution::Weibull { scale, shape } => positive("scale", scale).and(positive("shape", shape)),
            Distribution::Nakagami { shape, spread } => {
                if !(shape >= 0.5 && shape.is_finite()) {
                    return Err(StatsError::Domain(format!("nakagami shape = {shape} < 0.5")));
                }
                positive("spread", spread)
            }
            Distribution::UniformPhase => Ok(()),
        }
    }

    pub fn pdf(&self, r: f64) -> f64 {
        if let Distribution::UniformPhase = self {
            return if (-PI..=PI).contains(&r) { 1.0 / (2.0 * PI) } else { 0.0 };
        }
        if r < 0.0 {
            return 0.0;
        }
        match *self {
            Distribution::Exponential { rate } => rate * (-rate * r).exp(),
            Distribution::Rayleigh { sigma } => {
                let s2 = sigma * sigma;
                r / s2 * (-r * r / (2.0 * s2)).exp()
            }
            Distribution::Gamma { shape, rate } => {
                if r == 0.0 {
                    return gamma_density_at_zero(shape, rate);
                }
                (shape * rate.ln() + (shape - 1.0) * r.ln() - rate * r - ln_gamma(shape)).exp()
            }
            Distribution::LogNormal { mu, sigma } => {
                if r == 0.0 {
                    return 0.0;
                }
                let z = (r.ln() - mu) / sigma;
                (-0.5 * z * z).exp() / (r * sigma * (2.0 * PI).sqrt())
            }
            Distribution::Weibull { scale, shape } => {
                if r == 0.0 {
                    return gamma_density_at_zero(shape, 1.0 / scale);
                }
                let x = r / scale;
                shape / scale * x.powf(shape - 1.0) * (-x.powf(shape)).exp()
            }
            Distribution::Nakagami { shape, spread } => {
                if r == 0.0 {
                    return if shape == 0.5 { (2.0 / (PI * spread)).sqrt() } else { 0.0 };
                }
                let ln = std::f64::consts::LN_2 + shape * (shape / spread).ln() - ln_gamma(shape) + (2.0 * shape - 1.0) * r.ln()
                    - shape / spread * r * r;
                ln.exp()
            }
            Distribution::UniformPhase => unreachable!(),
        }
    }

    pub fn cdf(&self, r: f64) -> f64 {
        if let Distribution::UniformPhase = self {
            return ((r + PI) / (2.0 * PI)).clamp(0.0, 1.0);
        }
        if r <= 0.0 {
            return 0.0;
        }
        match *self {
            Distribution::Exponential { rate } => -(-rate * r).exp_m1(),
            Distribution::Rayleigh { sigma } => -(-r * r / (2.0 * sigma * sigma)).exp_m1(),
            Distribution::Gamma { shape, rate } => regularized_lower_gamma(shape, rate * r),
            Distribution::LogNormal { mu, sigma } => normal_cdf((r.ln() - mu) / sigma),
            Distribution::Weibull { scale, shape } => -(-(r / scale).powf(shape)).exp_m1(),
            Distribution::Nakagami { shape, spread } => regularized_lower_gamma(shape, shape / spread * r * r),
            Distribution::UniformPhase => unreachable!(),
        }
    }
}

/// Limit of the shape/rate density at zero: infinite below shape 1.
fn gamma_density_at_zero(shape: f64, rate: f64) -> f64 {
    if shape < 1.0 {
        f64::INFINITY
    } else if shape == 1.0 {
        rate
    } else {
        0.0
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// `P(a, x) = gamma(a, x) / Gamma(a)`, clamped into `[0, 1]`.
pub fn regularized_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    gamma_lr(a, x).clamp(0.0, 1.0)
}

fn check_samples(kind: DistributionKind, samples: &[f64]) -> Result<(), StatsError> {
    if samples.len() < 2 {
        return Err(StatsError::TooFewSamples { kind, got: samples.len() });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite { kind });
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    s / n as f64
}

/// Population mean and variance in two passes.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let m = mean(xs.iter().copied());
    let v = mean(xs.iter().map(|x| (x - m) * (x - m)));
    (m, v)
}

/// Fits `kind` to `samples`. Magnitude samples are clamped to
/// [`MAGNITUDE_FLOOR`] first.
pub fn fit(kind: DistributionKind, samples: &[f64]) -> Result<Fitted, StatsError> {
    check_samples(kind, samples)?;
    let n = samples.len();
    let clamped: Vec<f64>;
    let r: &[f64] = if kind.is_magnitude() {
        clamped = samples.iter().map(|&v| v.max(MAGNITUDE_FLOOR)).collect();
        &clamped
    } else {
        samples
    };
    let mut converged = true;
    let dist = match kind {
        DistributionKind::Exponential => Distribution::Exponential { rate: 1.0 / mean(r.iter().copied()) },
        DistributionKind::Rayleigh => Distribution::Rayleigh { sigma: (mean(r.iter().map(|x| x * x)) / 2.0).sqrt() },
        DistributionKind::Gamma => {
            let (m, v) = mean_var(r);
            if v <= 0.0 {
                return Err(StatsError::Degenerate { kind });
            }
            Distribution::Gamma { shape: m * m / v, rate: m / v }
        }
        DistributionKind::LogNormal => {
            let logs: Vec<f64> = r.iter().map(|x| x.ln()).collect();
            lognormal_from_logs(&logs)
        }
        DistributionKind::Weibull => {
            let (dist, ok) = fit_weibull(r)?;
            converged = ok;
            dist
        }
        DistributionKind::Nakagami => {
            let sq: Vec<f64> = r.iter().map(|x| x * x).collect();
            let (m2, v2) = mean_var(&sq);
            if v2 <= 0.0 {
                return Err(StatsError::Degenerate { kind });
            }
            Distribution::Nakagami { shape: (m2 * m2 / v2).max(0.5), spread: m2 }
        }
        DistributionKind::UniformPhase => Distribution::UniformPhase,
    };
    dist.validate()?;
    Ok(Fitted { dist, samples: n, converged })
}

/// LogNormal maximum likelihood from precomputed `ln r`.
pub fn lognormal_from_logs(logs: &[f64]) -> Distribution {
    let (mu, v) = mean_var(logs);
    Distribution::LogNormal { mu, sigma: v.sqrt() }
}

/// Shape from the coefficient of variation, the usual closed-form
/// approximation used to seed the likelihood iteration.
fn weibull_moment_shape(cv: f64) -> f64 {
    cv.powf(-1.086)
}

/// Maximum likelihood by Newton iteration on the profile equation
/// `sum(x^k ln x) / sum(x^k) - 1/k - mean(ln x) = 0`. Samples are divided by
/// their geometric mean first so the powers stay representable.
fn fit_weibull(r: &[f64]) -> Result<(Distribution, bool), StatsError> {
    let kind = DistributionKind::Weibull;
    let logs: Vec<f64> = r.iter().map(|x| x.ln()).collect();
    let log_gm = mean(logs.iter().copied());
    let centered: Vec<f64> = logs.iter().map(|l| l - log_gm).collect();
    let (m, v) = mean_var(r);
    if v <= 0.0 {
        return Err(StatsError::Degenerate { kind });
    }
    let init = weibull_moment_shape(v.sqrt() / m).clamp(0.02, 50.0);
    let mut k = init;
    let mut converged = false;
    for _ in 0..WEIBULL_MAX_ITER {
        let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
        for &l in &centered {
            let p = (k * l).exp();
            s0 += p;
            s1 += p * l;
            s2 += p * l * l;
        }
        // mean of the centered logs is zero
        let g = s1 / s0 - 1.0 / k;
        let dg = (s2 * s0 - s1 * s1) / (s0 * s0) + 1.0 / (k * k);
        let mut next = k - g / dg;
        if !(next.is_finite() && next > 0.0) {
            next = k / 2.0;
        }
        let done = (next - k).abs() <= WEIBULL_TOL * k.max(1.0);
        k = next;
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("weibull likelihood iteration did not converge; using the moment estimate");
        let shape = init;
        let scale = m / gamma(1.0 + 1.0 / shape);
        return Ok((Distribution::Weibull { scale, shape }, false));
    }
    let s0 = mean(centered.iter().map(|l| (k * l).exp()));
    let scale = log_gm.exp() * s0.powf(1.0 / k);
    Ok((Distribution::Weibull { scale, shape: k }, true))
}
