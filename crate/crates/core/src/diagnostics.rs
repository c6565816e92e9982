//! Statistical diagnostics over sample stores: rigidity, gap statistics,
//! the loop equation, linear statistics and the μ/ν overlap.

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::convexify::NuModel;
use crate::equilibrium::{ClassicalLocations, EquilibriumMeasure};
use crate::sampler::SampleStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: store has N = {store}, locations have {locs}")]
    LengthMismatch { store: usize, locs: usize },
    #[error("energy window around E = {energy} is empty (expected {expected:.3} points per sample)")]
    EmptyWindow { energy: f64, expected: f64 },
    #[error("E = {0} is not in the open bulk of the support")]
    NotInBulk(f64),
    #[error("grid point z = {0} rejected: too close to the real axis")]
    NearAxis(Complex64),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub const BATCHES: usize = 20;

/// Batch-means estimate of a mean and its standard error.
pub fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let b = batches.min(n);
    if b < 2 {
        return (mean, f64::NAN);
    }
    let size = n / b;
    let means: Vec<f64> = (0..b)
        .map(|k| xs[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let bm = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - bm) * (m - bm)).sum::<f64>() / (b - 1) as f64;
    (mean, (var / b as f64).sqrt())
}

/// Leave-one-batch-out jackknife standard error of a complex statistic.
fn jackknife<F>(samples: usize, batches: usize, stat: F) -> (Complex64, f64)
where
    F: Fn(&dyn Fn(usize) -> bool) -> Complex64 + Sync,
{
    let b = batches.min(samples).max(2);
    let size = samples / b;
    let full = stat(&|_| true);
    let leave: Vec<Complex64> = (0..b)
        .into_par_iter()
        .map(|k| stat(&|i| !(i >= k * size && i < (k + 1) * size)))
        .collect();
    let mean = leave.iter().sum::<Complex64>() / b as f64;
    let var: f64 = leave.iter().map(|v| (v - mean).norm_sqr()).sum::<f64>() * (b - 1) as f64 / b as f64;
    (full, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StieltjesEstimate {
    pub z: Complex64,
    /// `m̂_N = E (1/N) Σ (z - λ_i)^{-1}`
    pub m: Complex64,
    pub m_se: f64,
    /// `k̂_N = E X² - (E X)²`, `X = Σ (z - λ_i)^{-1}` (no complex conjugate)
    pub k: Complex64,
    pub k_se: f64,
}

struct Moments {
    x: Vec<Complex64>,
    dx: Vec<Complex64>,
}

fn resolvent_moments(store: &SampleStore, z: Complex64) -> Moments {
    let (x, dx): (Vec<Complex64>, Vec<Complex64>) = store
        .snapshots
        .par_iter()
        .map(|s| {
            let mut a = Complex64::new(0.0, 0.0);
            let mut b = Complex64::new(0.0, 0.0);
            for &l in &s.lambda {
                let inv = 1.0 / (z - l);
                a += inv;
                b += inv * inv;
            }
            (a, b)
        })
        .unzip();
    Moments { x, dx }
}

fn masked_mean(v: &[Complex64], keep: &dyn Fn(usize) -> bool) -> Complex64 {
    let (mut s, mut c) = (Complex64::new(0.0, 0.0), 0usize);
    for (i, x) in v.iter().enumerate() {
        if keep(i) {
            s += x;
            c += 1;
        }
    }
    s / c as f64
}

pub fn empirical_stieltjes(store: &SampleStore, z: Complex64) -> Result<StieltjesEstimate, DiagnosticsError> {
    if store.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if z.im == 0.0 {
        return Err(DiagnosticsError::NearAxis(z));
    }
    let nf = store.n() as f64;
    let mo = resolvent_moments(store, z);
    let (m, m_se) = jackknife(mo.x.len(), BATCHES, |keep| masked_mean(&mo.x, keep) / nf);
    let (k, k_se) = jackknife(mo.x.len(), BATCHES, |keep| {
        let ex = masked_mean(&mo.x, keep);
        let sq: Vec<Complex64> = mo.x.iter().map(|x| x * x).collect();
        masked_mean(&sq, keep) - ex * ex
    });
    Ok(StieltjesEstimate { z, m, m_se, k, k_se })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoopPoint {
    pub z: Complex64,
    pub m_hat: Complex64,
    pub m: Complex64,
    pub k_hat: Complex64,
    /// From a histogram of the one-point density (bin width `1/(2N)`).
    pub b_hat: Complex64,
    /// Direct unbiased estimate `(1/N) E Σ DD(z, λ_i) - ∫ DD ρ`.
    pub b_direct: Complex64,
    pub c_hat: Complex64,
    pub residual: Complex64,
    pub residual_se: f64,
    /// Same residual with `b_direct` in place of `b_hat`.
    pub residual_direct: Complex64,
    pub residual_direct_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopReport {
    pub n: usize,
    pub beta: f64,
    pub samples: usize,
    pub points: Vec<LoopPoint>,
}

/// Support of the sample histogram: bins of width `1/(2N)` aligned at 0.
struct Histogram {
    lo: f64,
    width: f64,
    counts: Vec<Vec<u32>>,
}

impl Histogram {
    fn build(store: &SampleStore) -> Self {
        let width = 0.5 / store.n() as f64;
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &store.snapshots {
            lo = lo.min(s.lambda[0]);
            hi = hi.max(s.lambda[s.lambda.len() - 1]);
        }
        let lo = (lo / width).floor() * width;
        let bins = ((hi - lo) / width).floor() as usize + 1;
        // per-batch counts so the jackknife can drop batches
        let b = BATCHES.min(store.len()).max(2);
        let size = store.len() / b;
        let mut counts = vec![vec![0u32; bins]; b];
        for (i, s) in store.snapshots.iter().enumerate().take(b * size) {
            let row = &mut counts[i / size];
            for &l in &s.lambda {
                let k = (((l - lo) / width).floor() as usize).min(bins - 1);
                row[k] += 1;
            }
        }
        Histogram { lo, width, counts }
    }
}

/// `∫_a^b q(t) dt` for complex polynomial coefficients `q` (ascending).
fn integrate_complex_poly(q: &[Complex64], a: f64, b: f64) -> Complex64 {
    let mut pa = Complex64::new(0.0, 0.0);
    let mut pb = Complex64::new(0.0, 0.0);
    for (k, c) in q.iter().enumerate().rev() {
        let div = (k + 1) as f64;
        pa = pa * a + c / div;
        pb = pb * b + c / div;
    }
    pb * b - pa * a
}

fn eval_complex_poly(q: &[Complex64], t: f64) -> Complex64 {
    q.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * t + c)
}

/// Residual of `(m_N - m)² + s (m_N - m) + b_N = -k_N/N² + (2/β - 1) m_N'/N`
/// on a grid of `z` values, with `s = -2 r f`.
pub fn loop_residual(store: &SampleStore, eq: &EquilibriumMeasure, zs: &[Complex64]) -> Result<LoopReport, DiagnosticsError> {
    if store.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let n = store.n();
    let nf = n as f64;
    let beta = store.beta();
    let hist = Histogram::build(store);
    let b_used = hist.counts.len();
    let size = store.len() / b_used;
    let used = b_used * size;
    let mut points = Vec::with_capacity(zs.len());
    for &z in zs {
        if z.im.abs() < 1.0 / nf {
            return Err(DiagnosticsError::NearAxis(z));
        }
        let m = eq.stieltjes(z).map_err(|_| DiagnosticsError::NearAxis(z))?;
        let f = (z - eq.lower()).sqrt() * (z - eq.upper()).sqrt();
        let s = -2.0 * eq.r_eval(z) * f;
        let dd = eq.potential().derivative_poly().divided_difference(z);
        let dd_rho = eq.integrate_complex_poly(&dd);
        let mo = resolvent_moments(store, z);
        let dd_per: Vec<Complex64> = store
            .snapshots
            .par_iter()
            .map(|snap| snap.lambda.iter().map(|&l| eval_complex_poly(&dd, l)).sum::<Complex64>() / nf)
            .collect();
        let bin_integrals: Vec<Complex64> = (0..hist.counts[0].len())
            .map(|k| {
                let a = hist.lo + k as f64 * hist.width;
                integrate_complex_poly(&dd, a, a + hist.width) / hist.width
            })
            .collect();
        let beta_term = 2.0 / beta - 1.0;
        let eval = |keep: &dyn Fn(usize) -> bool, direct: bool| -> (Complex64, [Complex64; 4]) {
            let keep_used = |i: usize| i < used && keep(i);
            let ex = masked_mean(&mo.x, &keep_used);
            let ex2 = {
                let sq: Vec<Complex64> = mo.x.iter().map(|x| x * x).collect();
                masked_mean(&sq, &keep_used)
            };
            let m_hat = ex / nf;
            let k_hat = ex2 - ex * ex;
            let dm = -masked_mean(&mo.dx, &keep_used) / nf;
            let b_hat = if direct {
                masked_mean(&dd_per, &keep_used) - dd_rho
            } else {
                let mut tot = Complex64::new(0.0, 0.0);
                let mut count = 0u64;
                for (bi, row) in hist.counts.iter().enumerate() {
                    if !keep(bi * size) {
                        continue;
                    }
                    for (k, &c) in row.iter().enumerate() {
                        if c > 0 {
                            tot += bin_integrals[k] * c as f64;
                        }
                    }
                    count += row.iter().map(|&c| c as u64).sum::<u64>();
                }
                tot / count as f64 - dd_rho
            };
            let delta = m_hat - m;
            let c_hat = -k_hat / (nf * nf) + beta_term * dm / nf;
            (delta * delta + s * delta + b_hat - c_hat, [m_hat, k_hat, b_hat, c_hat])
        };
        let (residual, residual_se) = jackknife(used, b_used, |keep| eval(keep, false).0);
        let (residual_direct, residual_direct_se) = jackknife(used, b_used, |keep| eval(keep, true).0);
        let [m_hat, k_hat, b_hat, c_hat] = eval(&|_| true, false).1;
        let b_direct = eval(&|_| true, true).1[2];
        points.push(LoopPoint {
            z,
            m_hat,
            m,
            k_hat,
            b_hat,
            b_direct,
            c_hat,
            residual,
            residual_se,
            residual_direct,
            residual_direct_se,
        });
    }
    Ok(LoopReport { n, beta, samples: used, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exceedance {
    pub threshold: f64,
    /// Threshold exponent `e` when the threshold is `N^{-1+e}`.
    pub exponent: Option<f64>,
    /// Fraction of (sample, bulk index) events with `|λ_k - γ_k| > t`.
    pub frequency: f64,
    /// Largest per-index frequency over the bulk.
    pub max_frequency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidityReport {
    pub n: usize,
    pub samples: usize,
    /// Bulk window, 1-based inclusive.
    pub bulk: (usize, usize),
    pub mean_deviation: Vec<f64>,
    pub mean_deviation_se: Vec<f64>,
    pub sd_deviation: Vec<f64>,
    pub bulk_median_abs: f64,
    pub max_bulk_mean_abs: f64,
    pub exceedance: Vec<Exceedance>,
}

pub fn rigidity_stats(
    store: &SampleStore,
    locs: &ClassicalLocations,
    alpha_bulk: f64,
    e_exps: &[f64],
    thresholds: &[f64],
) -> Result<RigidityReport, DiagnosticsError> {
    if store.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let n = store.n();
    if locs.gamma.len() != n {
        return Err(DiagnosticsError::LengthMismatch { store: n, locs: locs.gamma.len() });
    }
    if !(0.0..0.5).contains(&alpha_bulk) {
        return Err(DiagnosticsError::Invalid(format!("alpha_bulk must lie in [0, 1/2), got {alpha_bulk}")));
    }
    let lo = ((alpha_bulk * n as f64).ceil() as usize).max(1);
    let hi = (((1.0 - alpha_bulk) * n as f64).floor() as usize).min(n);
    let m = store.len();
    let per_k: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|k| store.snapshots.iter().map(|s| s.lambda[k] - locs.gamma[k]).collect())
        .collect();
    let mut mean_deviation = Vec::with_capacity(n);
    let mut mean_deviation_se = Vec::with_capacity(n);
    let mut sd_deviation = Vec::with_capacity(n);
    for devs in &per_k {
        let (mean, se) = batch_means(devs, BATCHES);
        let var = devs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (m.max(2) - 1) as f64;
        mean_deviation.push(mean);
        mean_deviation_se.push(se);
        sd_deviation.push(var.sqrt());
    }
    let mut abs_bulk: Vec<f64> = per_k[lo - 1..hi].iter().flatten().map(|d| d.abs()).collect();
    abs_bulk.sort_by(f64::total_cmp);
    let bulk_median_abs = median_sorted(&abs_bulk);
    let max_bulk_mean_abs = mean_deviation[lo - 1..hi].iter().fold(0.0_f64, |a, d| a.max(d.abs()));
    let all: Vec<(f64, Option<f64>)> = e_exps
        .iter()
        .map(|&e| ((n as f64).powf(-1.0 + e), Some(e)))
        .chain(thresholds.iter().map(|&t| (t, None)))
        .collect();
    let exceedance = all
        .into_iter()
        .map(|(t, e)| {
            let per: Vec<f64> = per_k[lo - 1..hi]
                .iter()
                .map(|d| d.iter().filter(|x| x.abs() > t).count() as f64 / m as f64)
                .collect();
            Exceedance {
                threshold: t,
                exponent: e,
                frequency: per.iter().sum::<f64>() / per.len() as f64,
                max_frequency: per.iter().fold(0.0_f64, |a, &b| a.max(b)),
            }
        })
        .collect();
    Ok(RigidityReport {
        n,
        samples: m,
        bulk: (lo, hi),
        mean_deviation,
        mean_deviation_se,
        sd_deviation,
        bulk_median_abs,
        max_bulk_mean_abs,
        exceedance,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Empirical CDF of a sample (sorted copy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ecdf {
    pub sorted: Vec<f64>,
}

impl Ecdf {
    pub fn new(mut xs: Vec<f64>) -> Self {
        xs.sort_by(f64::total_cmp);
        Ecdf { sorted: xs }
    }

    pub fn len(&self) -> usize {
        self.sorted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sorted.is_empty()
    }

    /// `#{x_i ≤ t}/n`, right-continuous.
    pub fn eval(&self, t: f64) -> f64 {
        self.sorted.partition_point(|&x| x <= t) as f64 / self.sorted.len() as f64
    }

    /// Dvoretzky–Kiefer–Wolfowitz half-width at level `1 - alpha`.
    pub fn dkw_half_width(&self, alpha: f64) -> f64 {
        ((2.0 / alpha).ln() / (2.0 * self.sorted.len() as f64)).sqrt()
    }

    pub fn sup_distance_to<F: Fn(f64) -> f64>(&self, cdf: F) -> f64 {
        let n = self.sorted.len() as f64;
        self.sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub energy: f64,
    pub half_width: f64,
    pub density: f64,
    pub expected_per_sample: f64,
    pub mean_gap: f64,
    pub dkw_half_width: f64,
    pub gaps: Ecdf,
}

/// Gaps `Nρ(E)(λ_{i+1} - λ_i)` with `λ_i ∈ [E - s, E + s]`, `s = N^{-1+k_exp}`.
pub fn gap_statistics(store: &SampleStore, eq: &EquilibriumMeasure, energy: f64, k_exp: f64) -> Result<GapReport, DiagnosticsError> {
    if store.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if !(k_exp > 0.0 && k_exp <= 0.5) {
        return Err(DiagnosticsError::Invalid(format!("k_exp must lie in (0, 1/2], got {k_exp}")));
    }
    let (a, b) = eq.support();
    if !(energy > a && energy < b) {
        return Err(DiagnosticsError::NotInBulk(energy));
    }
    let n = store.n();
    let nf = n as f64;
    let s = nf.powf(-1.0 + k_exp);
    let rho = eq.density(energy);
    let expected = nf * (eq.cdf(energy + s) - eq.cdf(energy - s));
    if expected < 1.0 {
        return Err(DiagnosticsError::EmptyWindow { energy, expected });
    }
    let scale = nf * rho;
    let gaps: Vec<f64> = store
        .snapshots
        .iter()
        .flat_map(|snap| {
            snap.lambda
                .windows(2)
                .filter(|w| (w[0] - energy).abs() <= s)
                .map(|w| scale * (w[1] - w[0]))
                .collect::<Vec<_>>()
        })
        .collect();
    if gaps.is_empty() {
        return Err(DiagnosticsError::EmptyWindow { energy, expected });
    }
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len() as f64;
    let ecdf = Ecdf::new(gaps);
    Ok(GapReport {
        energy,
        half_width: s,
        density: rho,
        expected_per_sample: expected,
        mean_gap,
        dkw_half_width: ecdf.dkw_half_width(0.05),
        gaps: ecdf,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub distance: f64,
    pub p_value: f64,
}

/// Asymptotic Kolmogorov tail `Q(x) = 2 Σ (-1)^{k-1} e^{-2k²x²}`.
fn kolmogorov_q(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * x * x).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, DiagnosticsError> {
    if a.is_empty() || b.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    let mut x = a.to_vec();
    let mut y = b.to_vec();
    x.sort_by(f64::total_cmp);
    y.sort_by(f64::total_cmp);
    let (n, m) = (x.len() as f64, y.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = 0.0_f64;
    while i < x.len() && j < y.len() {
        let t = x[i].min(y[j]);
        while i < x.len() && x[i] <= t {
            i += 1;
        }
        while j < y.len() && y[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / n - j as f64 / m).abs());
    }
    let ne = n * m / (n + m);
    let lam = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok(KsResult { distance: d, p_value: kolmogorov_q(lam) })
}

/// `height · S(clamp((|x - center| - plateau)/width))` with the quintic
/// smoothstep `S(u) = 1 - (10u³ - 15u⁴ + 6u⁵)`; C² with compact support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: f64,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub plateau: f64,
}

impl Bump {
    pub fn eval(&self, x: f64) -> f64 {
        let u = (((x - self.center).abs() - self.plateau) / self.width).clamp(0.0, 1.0);
        self.height * (1.0 - u * u * u * (10.0 - 15.0 * u + 6.0 * u * u))
    }

    /// `‖φ‖∞ + ‖φ'‖∞ + ‖φ''‖∞`.
    pub fn c2_norm(&self) -> f64 {
        let h = self.height.abs();
        // max |S'| = 15/8 at u = 1/2; max |S''| = 10/√3 at u = (3 ± √3)/6
        h + h * 1.875 / self.width + h * (10.0 / 3f64.sqrt()) / (self.width * self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinStatReport {
    pub bump: Bump,
    pub c2_norm: f64,
    pub samples: usize,
    pub mean: f64,
    pub expected: f64,
    pub variance: f64,
    /// `(s, fraction with |Σφ - N∫ρφ| > s)`
    pub exceedance: Vec<(f64, f64)>,
}

pub fn linear_stat_fluct(
    store: &SampleStore,
    eq: &EquilibriumMeasure,
    bump: &Bump,
    thresholds: &[f64],
) -> Result<LinStatReport, DiagnosticsError> {
    if store.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if !(bump.width > 0.0) || bump.plateau < 0.0 {
        return Err(DiagnosticsError::Invalid("bump needs width > 0 and plateau >= 0".into()));
    }
    let nf = store.n() as f64;
    let stats: Vec<f64> = store.snapshots.iter().map(|s| s.lambda.iter().map(|&x| bump.eval(x)).sum()).collect();
    let m = stats.len() as f64;
    let mean = stats.iter().sum::<f64>() / m;
    let variance = stats.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1.0).max(1.0);
    let expected = nf * eq.integrate(|x| bump.eval(x), 1e-13);
    let exceedance = thresholds
        .iter()
        .map(|&s| (s, stats.iter().filter(|x| (*x - expected).abs() > s).count() as f64 / m))
        .collect();
    Ok(LinStatReport { bump: *bump, c2_norm: bump.c2_norm(), samples: stats.len(), mean, expected, variance, exceedance })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub samples: usize,
    /// Fraction with `ψ^(s) = 0` and every `ψ_ij = 0`.
    pub fraction_psi_zero: f64,
    /// Fraction with weight exactly 1.
    pub fraction_weight_one: f64,
    /// Mean of `βN(W+1)ΣX_α²`.
    pub mean_beta_n_x_term: f64,
    pub min_weight: f64,
    /// `(Σw)² / (n Σw²)`
    pub ess_ratio: f64,
    pub mean_delta: f64,
    pub max_delta_delta: f64,
    /// Fraction with `Δ^(δ) ≤ 1/C(ℓ)`.
    pub fraction_delta_ok: f64,
}

/// Importance weights `w = e^{-βN(ψ^(s) + Σψ_ij + (W+1)ΣX_α²)}` of ν relative to μ.
pub fn measure_overlap(store: &SampleStore, model: &NuModel) -> Result<OverlapReport, DiagnosticsError> {
    if store.is_empty() {
        return Err(DiagnosticsError::Empty);
    }
    if store.n() != model.n() {
        return Err(DiagnosticsError::LengthMismatch { store: store.n(), locs: model.n() });
    }
    let bn = store.beta() * store.n() as f64;
    let rows: Vec<(f64, f64, bool, f64, f64)> = store
        .snapshots
        .par_iter()
        .map(|s| {
            let p = model.penalty_terms(&s.lambda);
            let (d, dd) = model.deltas(&s.lambda);
            (bn * p.total(), bn * p.x_term, p.psi_s == 0.0 && p.psi_pair == 0.0, d, dd)
        })
        .collect();
    let m = rows.len() as f64;
    let w: Vec<f64> = rows.iter().map(|r| (-r.0).exp()).collect();
    let sw: f64 = w.iter().sum();
    let sw2: f64 = w.iter().map(|x| x * x).sum();
    let c_ell = model.params.c_ell;
    Ok(OverlapReport {
        samples: rows.len(),
        fraction_psi_zero: rows.iter().filter(|r| r.2).count() as f64 / m,
        fraction_weight_one: w.iter().filter(|&&x| x == 1.0).count() as f64 / m,
        mean_beta_n_x_term: rows.iter().map(|r| r.1).sum::<f64>() / m,
        min_weight: w.iter().copied().fold(f64::INFINITY, f64::min),
        ess_ratio: if sw2 > 0.0 { sw * sw / (m * sw2) } else { 0.0 },
        mean_delta: rows.iter().map(|r| r.3).sum::<f64>() / m,
        max_delta_delta: rows.iter().map(|r| r.4).fold(0.0, f64::max),
        fraction_delta_ok: rows.iter().filter(|r| r.4 <= 1.0 / c_ell).count() as f64 / m,
    })
}
