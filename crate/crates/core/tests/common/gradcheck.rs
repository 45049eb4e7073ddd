//! Central finite-difference oracle along a random direction.
//!
//! A probe is admissible only if the 64-bit objective is smooth over the
//! probed interval: the central differences at `h` and `h / 10` agree. This
//! excludes probes that straddle a ReLU or max-pool switch, where a finite
//! difference says nothing about the derivative. Admission never consults the
//! analytic gradient.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Something with a flat vector of real variables, a scalar objective and an
/// analytic gradient. `vars` is the fixed base point; `gradient` is taken
/// there regardless of which point `objective` last visited.
pub trait Probe {
    fn vars(&self) -> Vec<f64>;
    fn objective(&mut self, vars: &[f64]) -> f64;
    fn gradient(&mut self) -> Vec<f64>;
    /// Rounds a value to the probe's working precision.
    fn quantize(&self, v: f64) -> f64 {
        v
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Precision {
    pub h: f64,
    pub tol: f64,
}

pub const F32: Precision = Precision { h: 1e-3, tol: 1e-3 };
pub const F64: Precision = Precision { h: 1e-5, tol: 1e-6 };

#[derive(Debug, Clone, Copy)]
pub struct Outcome {
    pub analytic: f64,
    pub numeric: f64,
}

impl Outcome {
    pub fn rel_err(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale < 1e-12 {
            (self.analytic - self.numeric).abs()
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }
}

pub fn direction(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d1e5);
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Central difference along `dir`, plus the direction actually realized once
/// the shifted points are rounded to the probe's precision.
pub fn central_difference_realized<P: Probe>(p: &mut P, base: &[f64], dir: &[f64], h: f64) -> (f64, Vec<f64>) {
    let shifted = |p: &P, s: f64| -> Vec<f64> { base.iter().zip(dir).map(|(b, d)| p.quantize(b + s * d)).collect() };
    let up_at = shifted(p, h);
    let down_at = shifted(p, -h);
    let realized = up_at.iter().zip(&down_at).map(|(u, d)| (u - d) / (2.0 * h)).collect();
    let up = p.objective(&up_at);
    let down = p.objective(&down_at);
    ((up - down) / (2.0 * h), realized)
}

pub fn central_difference<P: Probe>(p: &mut P, base: &[f64], dir: &[f64], h: f64) -> f64 {
    central_difference_realized(p, base, dir, h).0
}

/// Whether the 64-bit objective is smooth along `dir` around `base`: the
/// central differences at `h` and `h / 10` agree to `tol`.
pub fn admissible<P: Probe>(p64: &mut P, base: &[f64], dir: &[f64], h: f64, tol: f64) -> bool {
    let a = central_difference(p64, base, dir, h);
    let b = central_difference(p64, base, dir, h / 10.0);
    let scale = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / scale < tol
}

/// Random magnitudes with each sign matched to `grad`, so the directional
/// derivative cannot cancel down to the 32-bit rounding floor.
pub fn aligned_direction(dir: &[f64], grad: &[f64]) -> Vec<f64> {
    dir.iter()
        .zip(grad)
        .map(|(d, g)| if *g < 0.0 { -d.abs() } else { d.abs() })
        .collect()
}

pub fn check<P: Probe>(p: &mut P, dir: &[f64], prec: Precision) -> Outcome {
    let base = p.vars();
    let grad = p.gradient();
    assert_eq!(grad.len(), base.len(), "gradient length");
    let (numeric, realized) = central_difference_realized(p, &base, dir, prec.h);
    let analytic = grad.iter().zip(&realized).map(|(g, d)| g * d).sum();
    Outcome { analytic, numeric }
}

/// Checks `min_cases` admissible seeds, trying at most `4 * min_cases`.
/// `make32`/`make64` build the same case from a seed at each precision; when
/// `make32` is `None` only the 64-bit check runs. The 64-bit check uses a
/// plain random direction; the 32-bit one uses its sign-aligned variant.
pub fn sweep<P32: Probe, P64: Probe>(
    mut make32: Option<&mut dyn FnMut(u64) -> P32>,
    mut make64: impl FnMut(u64) -> P64,
    min_cases: usize,
) -> SweepReport {
    let mut report = SweepReport::default();
    for seed in 0..(4 * min_cases as u64) {
        if report.cases >= min_cases {
            break;
        }
        let mut p64 = make64(seed);
        let base = p64.vars();
        let dir = direction(base.len(), seed);
        if !admissible(&mut p64, &base, &dir, F64.h, 1e-7) {
            report.rejected += 1;
            continue;
        }
        let o64 = check(&mut p64, &dir, F64);
        let mut o32 = None;
        if let Some(make32) = make32.as_mut() {
            let d32 = aligned_direction(&dir, &p64.gradient());
            if !admissible(&mut p64, &base, &d32, F32.h, 1e-4) {
                report.rejected += 1;
                continue;
            }
            o32 = Some(check(&mut make32(seed), &d32, F32));
        }
        report.worst64 = report.worst64.max(o64.rel_err());
        if let Some(o) = o32 {
            report.worst32 = report.worst32.max(o.rel_err());
        }
        report.cases += 1;
    }
    report
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SweepReport {
    pub cases: usize,
    pub rejected: usize,
    pub worst32: f64,
    pub worst64: f64,
}

impl SweepReport {
    pub fn passes(&self, min_cases: usize) -> bool {
        self.cases >= min_cases && self.worst32 < F32.tol && self.worst64 < F64.tol
    }
}
