use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal, StandardNormal};
use sarfusion::linalg::{covariance, matrix_log, regularize, symmetric_eigen};
use sarfusion::nsjsm::{assemble, cdf_space, disassemble, Extractor, NsjsmSpec};
use sarfusion::stats::DistributionKind;
use std::time::Instant;

fn matmul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Matrix exponential by Taylor series with scaling and squaring.
fn expm(a: &[f64], d: usize) -> Vec<f64> {
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let s = (norm / 0.25).log2().ceil().max(0.0) as i32;
    let scaled: Vec<f64> = a.iter().map(|v| v / 2f64.powi(s)).collect();
    let mut result: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let mut term = result.clone();
    for k in 1..30 {
        term = matmul(&term, &scaled, d).iter().map(|v| v / k as f64).collect();
        result.iter_mut().zip(&term).for_each(|(r, t)| *r += t);
    }
    for _ in 0..s {
        result = matmul(&result, &result, d);
    }
    result
}

fn frob(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let a: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
    let mut c = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            c[i * d + j] = (0..d).map(|k| a[i * d + k] * a[j * d + k]).sum::<f64>() / d as f64;
        }
        c[i * d + i] += 0.1;
    }
    c
}

#[test]
fn log_then_exp_reconstructs_random_spd_matrices() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 64;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let c = random_spd(d, &mut rng);
        let back = expm(&matrix_log(&c, d).unwrap(), d);
        let diff: Vec<f64> = back.iter().zip(&c).map(|(a, b)| a - b).collect();
        worst = worst.max(frob(&diff) / frob(&c));
    }
    assert!(worst < 1e-10, "{worst:e}");
}

/// Two-pass covariance with explicit loops.
fn covariance_oracle(data: &[f64], n: usize, d: usize) -> Vec<f64> {
    let means: Vec<f64> = (0..d).map(|j| data[j * n..(j + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let mut c = vec![0.0; d * d];
    for a in 0..d {
        for b in 0..d {
            let mut s = 0.0;
            for l in 0..n {
                s += (data[a * n + l] - means[a]) * (data[b * n + l] - means[b]);
            }
            c[a * d + b] = s / (n - 1) as f64;
        }
    }
    c
}

#[test]
fn covariance_matches_two_pass_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (n, d) = (100, 8);
    let data: Vec<f64> = (0..n * d).map(|_| rng.random::<f64>()).collect();
    let fast = covariance(&data, n, d).unwrap();
    let slow = covariance_oracle(&data, n, d);
    for (a, b) in fast.iter().zip(&slow) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(covariance(&vec![0.3; n * d], n, d).unwrap().iter().all(|&v| v == 0.0));
    assert!(covariance(&data[..8], 1, 8).is_err());
}

#[test]
fn regularization_shifts_the_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 16;
    let c = random_spd(d, &mut rng);
    let (r, lambda) = regularize(&c, d);
    let diff: Vec<f64> = r.iter().zip(&c).map(|(a, b)| a - b).collect();
    assert!(frob(&diff) / frob(&c) <= 1e-6 * (d as f64).sqrt());
    let (before, _) = symmetric_eigen(&c, d).unwrap();
    let (after, _) = symmetric_eigen(&r, d).unwrap();
    for (a, b) in after.iter().zip(&before) {
        assert!((a - (b + lambda)).abs() < 1e-12);
    }
}

fn speckled_grating(seed: u64, angle: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (kx, ky) = (0.6 * angle.cos(), 0.6 * angle.sin());
    (0..4096)
        .map(|i| {
            let t = 1.0 + 0.5 * ((i % 64) as f64 * kx + (i / 64) as f64 * ky).cos();
            let speckle: f64 = -(1.0 - rng.random::<f64>()).ln();
            (t * speckle).sqrt()
        })
        .collect()
}

fn smooth_field(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..4096).map(|_| rng.random::<f64>()).collect();
    (0..4096)
        .map(|i| {
            let (y, x) = ((i / 64) as isize, (i % 64) as isize);
            let mut s = 0.0;
            for dy in -2..=2isize {
                for dx in -2..=2isize {
                    s += raw[(((y + dy).rem_euclid(64)) * 64 + (x + dx).rem_euclid(64)) as usize];
                }
            }
            s / 25.0
        })
        .collect()
}

#[test]
fn descriptor_contract() {
    let ex = Extractor::new(NsjsmSpec::default(), 64).unwrap();
    let patch = speckled_grating(1, 0.3);
    let start = Instant::now();
    let f = ex.extract(&patch).unwrap();
    let elapsed = start.elapsed();
    eprintln!("extract: {elapsed:?}");
    assert_eq!(f.len(), 4160);
    assert!(f.iter().all(|v| v.is_finite()));
    assert_eq!(f, ex.extract(&patch).unwrap());
    let m = Extractor::new(NsjsmSpec { use_phase: false, ..Default::default() }, 64).unwrap();
    assert_eq!(m.extract(&patch).unwrap().len(), 2080);
}

#[test]
fn descriptor_is_invariant_to_image_scaling() {
    let ex = Extractor::new(NsjsmSpec::default(), 64).unwrap();
    let patch = speckled_grating(2, 1.1);
    let base = ex.extract(&patch).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let scaled: Vec<f64> = patch.iter().map(|v| c * v).collect();
        let f = ex.extract(&scaled).unwrap();
        let gap = f.iter().zip(&base).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap < 1e-8, "c={c}: {gap:e}");
    }
}

#[test]
fn cdf_projection_of_lognormal_columns_is_near_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 4096;
    let ln = LogNormal::new(0.3, 0.9).unwrap();
    let data: Vec<f64> = (0..n * 3).map(|_| ln.sample(&mut rng)).collect();
    let u = cdf_space(&data, n, 3, DistributionKind::LogNormal).unwrap();
    assert!(u.iter().all(|v| (0.0..=1.0).contains(v)));
    for col in u.chunks(n) {
        let mean = col.iter().sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02);
    }
}

#[test]
fn covariance_of_real_cdf_matrices_is_positive_semidefinite() {
    let ex = Extractor::new(NsjsmSpec::default(), 64).unwrap();
    let s = ex.decompose(&smooth_field(3)).unwrap();
    for (data, kind) in [(&s.magnitude, DistributionKind::LogNormal), (&s.phase, DistributionKind::UniformPhase)] {
        let u = cdf_space(data, s.n, s.d, kind).unwrap();
        let c = covariance(&u, s.n, s.d).unwrap();
        let (vals, _) = symmetric_eigen(&c, s.d).unwrap();
        assert!(vals[0] > -1e-10, "{}", vals[0]);
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (frob(a) * frob(b))
}

#[test]
fn same_texture_pairs_are_more_similar_than_mixed_pairs() {
    let ex = Extractor::new(NsjsmSpec::default(), 64).unwrap();
    let (mut same, mut mixed) = (0.0, 0.0);
    let pairs = 50;
    for i in 0..pairs as u64 {
        let a1 = ex.extract(&speckled_grating(100 + i, 0.4)).unwrap();
        let a2 = ex.extract(&speckled_grating(200 + i, 0.4)).unwrap();
        let b1 = ex.extract(&smooth_field(300 + i)).unwrap();
        let b2 = ex.extract(&smooth_field(400 + i)).unwrap();
        same += cosine(&a1, &a2) + cosine(&b1, &b2);
        mixed += cosine(&a1, &b1) + cosine(&a2, &b2);
    }
    assert!(same / (2.0 * pairs as f64) > mixed / (2.0 * pairs as f64));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn assemble_is_lossless(d in 1usize..9, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sym = || {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                for j in 0..=i {
                    let v: f64 = rng.random::<f64>() - 0.5;
                    m[i * d + j] = v;
                    m[j * d + i] = v;
                }
            }
            m
        };
        let (a, b) = (sym(), sym());
        let f = assemble(&a, Some(&b), d);
        prop_assert_eq!(f.len(), d * (d + 1));
        let (ra, rb) = disassemble(&f, d);
        prop_assert_eq!(ra, a);
        prop_assert_eq!(rb.unwrap(), b);
    }
}
