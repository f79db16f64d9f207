//! Complex Gabor wavelet bank and the magnitude/phase decomposition of a patch.

use std::f64::consts::{PI, SQRT_2};
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GaborError {
    #[error("kernel side must be odd, got {0}")]
    EvenKernel(usize),
    #[error("bank needs at least one scale and one direction")]
    EmptyBank,
    #[error("invalid bank parameter: {0}")]
    Parameter(String),
    #[error("expected a {want}x{want} patch with {len} values, got {got} values")]
    PatchSize { want: usize, len: usize, got: usize },
    #[error("patch side {patch} is too small for reflective padding of {pad}")]
    TooSmall { patch: usize, pad: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaborBankSpec {
    pub scales: usize,
    pub directions: usize,
    pub kernel_side: usize,
    pub k_max: f64,
    /// Ratio between the centre frequencies of neighbouring scales.
    pub spacing: f64,
    pub sigma: f64,
}

impl Default for GaborBankSpec {
    fn default() -> Self {
        GaborBankSpec {
            scales: 8,
            directions: 8,
            kernel_side: 15,
            k_max: PI / 2.0,
            spacing: SQRT_2,
            sigma: 2.0 * PI,
        }
    }
}

impl GaborBankSpec {
    pub fn validate(&self) -> Result<(), GaborError> {
        if self.kernel_side.is_multiple_of(2) {
            return Err(GaborError::EvenKernel(self.kernel_side));
        }
        if self.scales == 0 || self.directions == 0 {
            return Err(GaborError::EmptyBank);
        }
        for (name, v) in [("k_max", self.k_max), ("spacing", self.spacing), ("sigma", self.sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(GaborError::Parameter(format!("{name} = {v}")));
            }
        }
        Ok(())
    }

    /// Number of subbands, `U * V`.
    pub fn subbands(&self) -> usize {
        self.scales * self.directions
    }

    /// Column of subband (`direction`, `scale`), both zero-based.
    pub fn column(&self, direction: usize, scale: usize) -> usize {
        scale * self.directions + direction
    }

    /// Wave vector `(kx, ky)` of a subband, zero-based indices.
    pub fn wave_vector(&self, direction: usize, scale: usize) -> (f64, f64) {
        let norm = self.k_max / self.spacing.powi(scale as i32);
        let phi = PI * direction as f64 / self.directions as f64;
        (norm * phi.cos(), norm * phi.sin())
    }
}

/// A `side x side` complex kernel, row-major. Offsets run from `-side/2` to
/// `side/2`; `x` is the column offset and `y` the row offset.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub side: usize,
    pub values: Vec<Complex64>,
}

impl Kernel {
    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).sum()
    }

    pub fn sum(&self) -> Complex64 {
        self.values.iter().sum()
    }
}

/// `(|k|^2/sigma^2) exp(-|k|^2 |z|^2 / (2 sigma^2)) (exp(i k.z) - c)`. The
/// constant `c` is the envelope-weighted mean of the carrier over the sampled
/// grid, the discrete counterpart of `exp(-sigma^2/2)`, so every truncated
/// kernel sums to zero.
pub fn build_kernel(spec: &GaborBankSpec, direction: usize, scale: usize) -> Kernel {
    let side = spec.kernel_side;
    let h = (side / 2) as isize;
    let (kx, ky) = spec.wave_vector(direction, scale);
    let k2 = kx * kx + ky * ky;
    let s2 = spec.sigma * spec.sigma;
    let mut env = Vec::with_capacity(side * side);
    let mut carrier = Vec::with_capacity(side * side);
    for y in -h..=h {
        for x in -h..=h {
            let (xf, yf) = (x as f64, y as f64);
            env.push((k2 / s2) * (-k2 * (xf * xf + yf * yf) / (2.0 * s2)).exp());
            carrier.push(Complex64::from_polar(1.0, kx * xf + ky * yf));
        }
    }
    let wsum: f64 = env.iter().sum();
    let dc: Complex64 = env.iter().zip(&carrier).map(|(e, c)| c * e).sum::<Complex64>() / wsum;
    let values = env.iter().zip(&carrier).map(|(e, c)| (c - dc) * e).collect();
    Kernel { side, values }
}

pub fn build_bank(spec: &GaborBankSpec) -> Result<Vec<Kernel>, GaborError> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.subbands());
    for v in 0..spec.scales {
        for u in 0..spec.directions {
            out.push(build_kernel(spec, u, v));
        }
    }
    Ok(out)
}

/// Magnitudes and phases of every subband. Stored column-major: subband `j`
/// occupies `[j * n, (j + 1) * n)`, pixels in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SubbandStack {
    pub n: usize,
    pub d: usize,
    pub magnitude: Vec<f64>,
    pub phase: Vec<f64>,
}

impl SubbandStack {
    pub fn magnitude_column(&self, j: usize) -> &[f64] {
        &self.magnitude[j * self.n..(j + 1) * self.n]
    }

    pub fn phase_column(&self, j: usize) -> &[f64] {
        &self.phase[j * self.n..(j + 1) * self.n]
    }
}

/// Mirror index without repeating the edge sample (`-1 -> 1`).
pub fn reflect(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Responses whose imaginary part is below this fraction of the magnitude are
/// treated as real. Reflective padding makes some border responses real in
/// exact arithmetic, and rounding would otherwise scatter them across the
/// branch cut at +-pi.
pub const REAL_SNAP: f64 = 1e-12;

fn phase_of(re: f64, im: f64, magnitude: f64) -> f64 {
    if magnitude == 0.0 {
        0.0
    } else if im.abs() <= REAL_SNAP * magnitude {
        if re < 0.0 {
            PI
        } else {
            0.0
        }
    } else {
        im.atan2(re)
    }
}

/// A bank prepared for one patch side: kernel spectra on an FFT grid large
/// enough that the circular convolution of the reflect-padded patch is exact
/// on the interior.
pub struct GaborBank {
    spec: GaborBankSpec,
    patch: usize,
    grid: usize,
    kernels: Vec<Kernel>,
    /// Per kernel, the 2-D spectrum stored transposed (`[kx][ky]`).
    spectra: Vec<Vec<Complex64>>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GaborBank {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GaborBank").field("spec", &self.spec).field("patch", &self.patch).field("grid", &self.grid).finish()
    }
}

fn transpose(src: &[Complex64], rows: usize, cols: usize, dst: &mut [Complex64]) {
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
}

impl GaborBank {
    pub fn new(spec: GaborBankSpec, patch: usize) -> Result<Self, GaborError> {
        let kernels = build_bank(&spec)?;
        let pad = spec.kernel_side / 2;
        if patch <= pad {
            return Err(GaborError::TooSmall { patch, pad });
        }
        let grid = (patch + 2 * pad).div_ceil(8) * 8;
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid);
        let inverse = planner.plan_fft_inverse(grid);
        let mut bank = GaborBank { spec, patch, grid, kernels, spectra: Vec::new(), forward, inverse };
        let mut spectra = Vec::with_capacity(bank.kernels.len());
        for k in &bank.kernels {
            let mut buf = vec![Complex64::new(0.0, 0.0); grid * grid];
            let side = k.side as isize;
            let h = side / 2;
            for r in 0..side {
                for c in 0..side {
                    let y = (r - h).rem_euclid(grid as isize) as usize;
                    let x = (c - h).rem_euclid(grid as isize) as usize;
                    buf[y * grid + x] = k.values[(r * side + c) as usize];
                }
            }
            spectra.push(bank.spectrum_transposed(buf));
        }
        bank.spectra = spectra;
        Ok(bank)
    }

    pub fn spec(&self) -> &GaborBankSpec {
        &self.spec
    }

    pub fn kernels(&self) -> &[Kernel] {
        &self.kernels
    }

    pub fn patch_side(&self) -> usize {
        self.patch
    }

    /// Forward 2-D FFT of a `grid x grid` row-major buffer, returned as `[kx][ky]`.
    fn spectrum_transposed(&self, mut buf: Vec<Complex64>) -> Vec<Complex64> {
        let g = self.grid;
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.forward.get_inplace_scratch_len()];
        self.forward.process_with_scratch(&mut buf, &mut scratch);
        let mut t = vec![Complex64::new(0.0, 0.0); g * g];
        transpose(&buf, g, g, &mut t);
        self.forward.process_with_scratch(&mut t, &mut scratch);
        t
    }

    fn check_patch(&self, patch: &[f64]) -> Result<(), GaborError> {
        if patch.len() != self.patch * self.patch {
            return Err(GaborError::PatchSize { want: self.patch, len: self.patch * self.patch, got: patch.len() });
        }
        Ok(())
    }

    /// Same-size complex responses `I * G` (true convolution) with reflective
    /// padding, one row-major `patch x patch` plane per subband.
    pub fn responses(&self, patch: &[f64]) -> Result<Vec<Vec<Complex64>>, GaborError> {
        let mut out = Vec::with_capacity(self.kernels.len());
        self.for_each_response(patch, |_, plane| out.push(plane.to_vec()))?;
        Ok(out)
    }

    fn for_each_response(&self, patch: &[f64], mut sink: impl FnMut(usize, &[Complex64])) -> Result<(), GaborError> {
        self.check_patch(patch)?;
        let (p, g) = (self.patch, self.grid);
        let pad = self.spec.kernel_side / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); g * g];
        for y in 0..p + 2 * pad {
            let sy = reflect(y as isize - pad as isize, p);
            for x in 0..p + 2 * pad {
                let sx = reflect(x as isize - pad as isize, p);
                buf[y * g + x] = Complex64::new(patch[sy * p + sx], 0.0);
            }
        }
        let image = self.spectrum_transposed(buf);
        let scale = 1.0 / (g * g) as f64;
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.inverse.get_inplace_scratch_len()];
        let mut prod = vec![Complex64::new(0.0, 0.0); g * g];
        let mut rows = vec![Complex64::new(0.0, 0.0); p * g];
        let mut plane = vec![Complex64::new(0.0, 0.0); p * p];
        for (j, spec) in self.spectra.iter().enumerate() {
            for ((o, a), b) in prod.iter_mut().zip(&image).zip(spec) {
                *o = a * b;
            }
            // inverse along ky for every kx, giving [kx][y]
            self.inverse.process_with_scratch(&mut prod, &mut scratch);
            // only rows pad..pad+p of the output are needed
            for (r, row) in rows.chunks_mut(g).enumerate() {
                let y = r + pad;
                for (kx, v) in row.iter_mut().enumerate() {
                    *v = prod[kx * g + y];
                }
            }
            self.inverse.process_with_scratch(&mut rows, &mut scratch);
            for (r, row) in rows.chunks(g).enumerate() {
                for (c, v) in row[pad..pad + p].iter().enumerate() {
                    plane[r * p + c] = v * scale;
                }
            }
            sink(j, &plane);
        }
        Ok(())
    }

    /// Magnitude `|O|` and phase `atan2(Im O, Re O)` of every subband; the
    /// phase of a zero response is 0 and that of a real one is 0 or pi.
    pub fn decompose(&self, patch: &[f64]) -> Result<SubbandStack, GaborError> {
        let n = self.patch * self.patch;
        let d = self.kernels.len();
        let mut magnitude = vec![0.0; n * d];
        let mut phase = vec![0.0; n * d];
        self.for_each_response(patch, |j, plane| {
            let mag = &mut magnitude[j * n..(j + 1) * n];
            let pha = &mut phase[j * n..(j + 1) * n];
            for ((m, a), v) in mag.iter_mut().zip(pha.iter_mut()).zip(plane) {
                *m = (v.re * v.re + v.im * v.im).sqrt();
                *a = phase_of(v.re, v.im, *m);
            }
        })?;
        Ok(SubbandStack { n, d, magnitude, phase })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_mirrors_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn default_bank_has_sixty_four_zero_sum_kernels() {
        let bank = build_bank(&GaborBankSpec::default()).unwrap();
        assert_eq!(bank.len(), 64);
        for k in &bank {
            assert!(k.sum().norm() < 1e-6 * k.l1_norm());
        }
    }

    #[test]
    fn even_kernel_is_rejected() {
        let spec = GaborBankSpec { kernel_side: 14, ..Default::default() };
        assert_eq!(build_bank(&spec), Err(GaborError::EvenKernel(14)));
    }

    #[test]
    fn column_order_runs_directions_fastest() {
        let s = GaborBankSpec::default();
        assert_eq!(s.column(0, 0), 0);
        assert_eq!(s.column(7, 0), 7);
        assert_eq!(s.column(0, 1), 8);
        assert_eq!(s.column(2, 3), 26);
    }
}
