//! Nonstationary joint statistical descriptor: each Gabor subband is mapped
//! through its own fitted CDF, the CDF-space observations are summarized by a
//! covariance matrix, and the log-mapped matrices are flattened.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gabor::{GaborBank, GaborBankSpec, GaborError, SubbandStack};
use crate::linalg::{self, LinalgError};
use crate::stats::{self, Distribution, DistributionKind, StatsError, MAGNITUDE_FLOOR};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NsjsmError {
    #[error("column {column}: {source}")]
    Fit { column: usize, source: StatsError },
    #[error(transparent)]
    Gabor(#[from] GaborError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("magnitude model must be a magnitude distribution, got {0:?}")]
    PhaseAsMagnitude(DistributionKind),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NsjsmSpec {
    pub bank: GaborBankSpec,
    pub magnitude_model: DistributionKind,
    /// Include the phase covariance; without it only the magnitude triangle is emitted.
    pub use_phase: bool,
}

impl Default for NsjsmSpec {
    fn default() -> Self {
        NsjsmSpec { bank: GaborBankSpec::default(), magnitude_model: DistributionKind::LogNormal, use_phase: true }
    }
}

impl NsjsmSpec {
    pub fn feature_len(&self) -> usize {
        let d = self.bank.subbands();
        let tri = d * (d + 1) / 2;
        if self.use_phase {
            2 * tri
        } else {
            tri
        }
    }
}

/// Maps each of the `d` columns (variable-major, `n` values each) through the
/// CDF of `kind` fitted to that column. Values land in `[0, 1]`.
pub fn cdf_space(columns: &[f64], n: usize, d: usize, kind: DistributionKind) -> Result<Vec<f64>, NsjsmError> {
    let mut out = vec![0.0; n * d];
    for (j, (col, dst)) in columns.chunks(n).zip(out.chunks_mut(n)).take(d).enumerate() {
        project_column(col, kind, dst).map_err(|source| NsjsmError::Fit { column: j, source })?;
    }
    Ok(out)
}

fn project_column(col: &[f64], kind: DistributionKind, dst: &mut [f64]) -> Result<(), StatsError> {
    match kind {
        DistributionKind::LogNormal => {
            // same estimator as `stats::fit`, reusing the logarithms for the CDF
            if col.len() < 2 {
                return Err(StatsError::TooFewSamples { kind, got: col.len() });
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(StatsError::NonFinite { kind });
            }
            for (o, &r) in dst.iter_mut().zip(col) {
                *o = r.max(MAGNITUDE_FLOOR).ln();
            }
            let dist = stats::lognormal_from_logs(dst);
            dist.validate()?;
            let Distribution::LogNormal { mu, sigma } = dist else { unreachable!() };
            for o in dst.iter_mut() {
                *o = stats::normal_cdf((*o - mu) / sigma);
            }
        }
        DistributionKind::UniformPhase => {
            for (o, &r) in dst.iter_mut().zip(col) {
                *o = Distribution::UniformPhase.cdf(r);
            }
        }
        _ => {
            let fitted = stats::fit(kind, col)?;
            for (o, &r) in dst.iter_mut().zip(col) {
                *o = fitted.dist.cdf(r.max(MAGNITUDE_FLOOR));
            }
        }
    }
    Ok(())
}

/// Covariance, regularization and matrix logarithm of one CDF matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdDescriptor {
    pub d: usize,
    pub covariance: Vec<f64>,
    pub lambda: f64,
    pub log: Vec<f64>,
}

pub fn spd_descriptor(cdf: &[f64], n: usize, d: usize) -> Result<SpdDescriptor, NsjsmError> {
    let covariance = linalg::covariance(cdf, n, d)?;
    let (reg, lambda) = linalg::regularize(&covariance, d);
    let log = linalg::matrix_log(&reg, d)?;
    Ok(SpdDescriptor { d, covariance, lambda, log })
}

/// Row-major upper triangle (with diagonal) of `mag`, followed by the
/// row-major lower triangle (with diagonal) of `pha` when present.
pub fn assemble(mag: &[f64], pha: Option<&[f64]>, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(d * (d + 1));
    for i in 0..d {
        out.extend_from_slice(&mag[i * d + i..(i + 1) * d]);
    }
    if let Some(p) = pha {
        for i in 0..d {
            out.extend_from_slice(&p[i * d..i * d + i + 1]);
        }
    }
    out
}

/// Inverse of [`assemble`] for symmetric inputs.
pub fn disassemble(feature: &[f64], d: usize) -> (Vec<f64>, Option<Vec<f64>>) {
    let tri = d * (d + 1) / 2;
    let mut mag = vec![0.0; d * d];
    let mut it = feature[..tri].iter();
    for i in 0..d {
        for j in i..d {
            let v = *it.next().unwrap();
            mag[i * d + j] = v;
            mag[j * d + i] = v;
        }
    }
    let pha = (feature.len() >= 2 * tri).then(|| {
        let mut p = vec![0.0; d * d];
        let mut it = feature[tri..2 * tri].iter();
        for i in 0..d {
            for j in 0..=i {
                let v = *it.next().unwrap();
                p[i * d + j] = v;
                p[j * d + i] = v;
            }
        }
        p
    });
    (mag, pha)
}

/// Descriptor extractor bound to one patch side.
#[derive(Debug)]
pub struct Extractor {
    spec: NsjsmSpec,
    bank: GaborBank,
}

impl Extractor {
    pub fn new(spec: NsjsmSpec, patch_side: usize) -> Result<Self, NsjsmError> {
        if !spec.magnitude_model.is_magnitude() {
            return Err(NsjsmError::PhaseAsMagnitude(spec.magnitude_model));
        }
        Ok(Extractor { spec, bank: GaborBank::new(spec.bank, patch_side)? })
    }

    pub fn spec(&self) -> &NsjsmSpec {
        &self.spec
    }

    pub fn feature_len(&self) -> usize {
        self.spec.feature_len()
    }

    pub fn decompose(&self, patch: &[f64]) -> Result<SubbandStack, NsjsmError> {
        Ok(self.bank.decompose(patch)?)
    }

    /// Full descriptor of one row-major patch.
    pub fn extract(&self, patch: &[f64]) -> Result<Vec<f64>, NsjsmError> {
        let s = self.bank.decompose(patch)?;
        let mag = spd_descriptor(&cdf_space(&s.magnitude, s.n, s.d, self.spec.magnitude_model)?, s.n, s.d)?;
        let pha = if self.spec.use_phase {
            Some(spd_descriptor(&cdf_space(&s.phase, s.n, s.d, DistributionKind::UniformPhase)?, s.n, s.d)?)
        } else {
            None
        };
        Ok(assemble(&mag.log, pha.as_ref().map(|p| p.log.as_slice()), s.d))
    }
}
