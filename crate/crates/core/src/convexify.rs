//! Convexification of the log-gas Hamiltonian: the reflected circulant
//! kernel `R`, the quadratic form `Q`, slow modes `g_α`, the penalised
//! Hamiltonian `H_ν`, and finite-N checks of the operator inequality and
//! the pairwise bound.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::equilibrium::{EquilibriumError, EquilibriumMeasure};
use crate::potentials::{Potential, PotentialError};
use crate::sampler::{hamiltonian_and_grad, hamiltonian_hessian, Energy, SampleStore, SamplerError};

#[derive(Debug, Error)]
pub enum ConvexifyError {
    #[error("invalid convexification parameters: {0}")]
    Params(String),
    #[error("empty sample store")]
    EmptyStore,
    #[error("store has N = {store}, expected {expected}")]
    SizeMismatch { store: usize, expected: usize },
    #[error(transparent)]
    Equilibrium(#[from] EquilibriumError),
    #[error(transparent)]
    Potential(#[from] PotentialError),
    #[error("{0}")]
    Sampler(Box<SamplerError>),
}

impl From<SamplerError> for ConvexifyError {
    fn from(e: SamplerError) -> Self {
        ConvexifyError::Sampler(Box::new(e))
    }
}

fn default_true() -> bool {
    true
}

/// User-facing parameters; `None` fields take the defaults
/// `s = C(ℓ)`, `M = (W+1)/c₁`, `δ = 1/(2C(ℓ))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvexifyParams {
    pub epsilon: f64,
    pub ell: usize,
    pub c1: f64,
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default, rename = "M")]
    pub m: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_true")]
    pub include_zero_mode: bool,
}

impl ConvexifyParams {
    pub fn new(epsilon: f64, ell: usize, c1: f64) -> Self {
        ConvexifyParams { epsilon, ell, c1, s: None, m: None, delta: None, include_zero_mode: true }
    }

    pub fn validate(&self) -> Result<(), ConvexifyError> {
        let bad = |m: String| Err(ConvexifyError::Params(m));
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return bad(format!("epsilon must lie in (0,1), got {}", self.epsilon));
        }
        if self.ell == 0 {
            return bad("ell must be at least 1".into());
        }
        if !(self.c1 > 0.0 && self.c1.is_finite()) {
            return bad(format!("c1 must be positive, got {}", self.c1));
        }
        for (name, v) in [("s", self.s), ("M", self.m), ("delta", self.delta)] {
            if let Some(v) = v {
                if !(v > 0.0 && v.is_finite()) {
                    return bad(format!("{name} must be positive, got {v}"));
                }
            }
        }
        Ok(())
    }
}

/// Parameters with every default filled in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedParams {
    pub epsilon: f64,
    pub ell: usize,
    pub s: f64,
    pub c1: f64,
    #[serde(rename = "W")]
    pub w: f64,
    #[serde(rename = "M")]
    pub m: f64,
    pub delta: f64,
    pub c_ell: f64,
    pub include_zero_mode: bool,
}

/// `d(k, l) = |m(k - l)|` with `m(x) ∈ ⟦-N+1, N⟧`, `m(x) ≡ x mod 2N`.
pub fn distance(k: i64, l: i64, n: usize) -> usize {
    let two_n = 2 * n as i64;
    let mut m = (k - l).rem_euclid(two_n);
    if m > n as i64 {
        m -= two_n;
    }
    m.unsigned_abs() as usize
}

/// `R` as a function of the distance `d`.
#[inline]
pub fn kernel(d: usize, n: usize, epsilon: f64) -> f64 {
    let x = d as f64 / n as f64;
    epsilon.powf(2.0 / 3.0) / (x * x + epsilon * epsilon) / n as f64
}

/// Circulant generator `R_{0,j}`, `j = 0..2N`.
pub fn build_r(n: usize, epsilon: f64) -> Vec<f64> {
    (0..2 * n).map(|j| kernel(distance(0, j as i64, n), n, epsilon)).collect()
}

/// Full `2N × 2N` matrix on `Ĩ = ⟦-N+1, N⟧` (row/column `k` is site `k - N + 1`).
pub fn r_matrix(n: usize, epsilon: f64) -> DMatrix<f64> {
    let site = |k: usize| k as i64 - n as i64 + 1;
    DMatrix::from_fn(2 * n, 2 * n, |a, b| kernel(distance(site(a), site(b), n), n, epsilon))
}

/// `ν_k = Σ_j e^{i2πjk/2N} R_{0,j}` for `k = 0..2N`; `ν_0` (= `ν_{2N}`) is
/// the row sum and the top eigenvalue.
pub fn circulant_spectrum(n: usize, epsilon: f64) -> Vec<f64> {
    let row = build_r(n, epsilon);
    let mut buf: Vec<Complex64> = row.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    // The generator is symmetric, so forward and inverse transforms agree.
    FftPlanner::new().plan_fft_inverse(buf.len()).process(&mut buf);
    buf.into_iter().map(|c| c.re).collect()
}

/// Largest distance from `{0, 2N}` of an index with `|ν_k| > s`.
pub fn localization_radius(nu: &[f64], s: f64) -> usize {
    let two_n = nu.len();
    nu.iter()
        .enumerate()
        .filter(|(_, v)| v.abs() > s)
        .map(|(k, _)| k.min(two_n - k))
        .max()
        .unwrap_or(0)
}

/// Reflection extension `ṽ_j = v_{1-j}` for `j ≤ 0`, laid out on `Ĩ`.
pub fn reflect(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..2 * n)
        .map(|k| {
            let j = k as i64 - n as i64 + 1;
            if j >= 1 {
                v[j as usize - 1]
            } else {
                v[(1 - j) as usize - 1]
            }
        })
        .collect()
}

/// `Σ_{i,j ∈ Ĩ} R_{ij}(w_i - w_j)²`.
pub fn r_form(n: usize, epsilon: f64, w: &[f64]) -> f64 {
    let site = |k: usize| k as i64 - n as i64 + 1;
    let mut s = 0.0;
    for a in 0..2 * n {
        for b in 0..2 * n {
            let d = w[a] - w[b];
            s += kernel(distance(site(a), site(b), n), n, epsilon) * d * d;
        }
    }
    s
}

#[derive(Debug, Clone)]
pub struct QForm {
    pub n: usize,
    pub epsilon: f64,
    pub r_row: Vec<f64>,
    pub q: DMatrix<f64>,
}

impl QForm {
    pub fn new(n: usize, epsilon: f64) -> Self {
        assert!(n >= 2, "QForm needs N >= 2");
        let r = |d: usize| kernel(d, n, epsilon);
        // Q_ij = R_{i,j} + R_{1-i,j} + R_{i,1-j} + R_{1-i,1-j} = 2R(d(i,j)) + 2R(d(1-i,j))
        let q = DMatrix::from_fn(n, n, |a, b| {
            let (i, j) = (a as i64 + 1, b as i64 + 1);
            2.0 * r(distance(i, j, n)) + 2.0 * r(distance(1 - i, j, n))
        });
        QForm { n, epsilon, r_row: build_r(n, epsilon), q }
    }

    /// `Σ_{i,j} Q_ij (v_i - v_j)²`.
    pub fn form(&self, v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.n {
            for j in 0..self.n {
                let d = v[i] - v[j];
                s += self.q[(i, j)] * d * d;
            }
        }
        s
    }

    /// Operator of the form: `2 diag(row sums) - 2Q`.
    pub fn operator(&self) -> DMatrix<f64> {
        let mut op = -2.0 * &self.q;
        for i in 0..self.n {
            let row: f64 = self.q.row(i).iter().sum();
            op[(i, i)] += 2.0 * row;
        }
        op
    }
}

/// Orthonormal DCT-II vector `√(c/N) cos(πα(2j-1)/2N)`, `c = 1` for `α = 0`, else 2.
pub fn cosine_mode(n: usize, alpha: usize) -> Vec<f64> {
    let nf = n as f64;
    let amp = if alpha == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
    (1..=n)
        .map(|j| amp * (PI * alpha as f64 * (2 * j - 1) as f64 / (2.0 * nf)).cos())
        .collect()
}

/// Chebyshev series on an interval, used for the mode antiderivatives.
#[derive(Debug, Clone)]
struct ChebSeries {
    lo: f64,
    hi: f64,
    coeffs: Vec<f64>,
}

impl ChebSeries {
    fn fit<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64) -> Self {
        let mut n = 64;
        loop {
            let vals: Vec<f64> = (0..n)
                .map(|j| {
                    let u = (PI * (j as f64 + 0.5) / n as f64).cos();
                    f(0.5 * (lo + hi) + 0.5 * (hi - lo) * u)
                })
                .collect();
            let coeffs: Vec<f64> = (0..n)
                .map(|k| {
                    let s: f64 = vals
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * (PI * k as f64 * (j as f64 + 0.5) / n as f64).cos())
                        .sum();
                    if k == 0 {
                        s / n as f64
                    } else {
                        2.0 * s / n as f64
                    }
                })
                .collect();
            let scale = coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs())).max(1e-300);
            let tail = coeffs[n - 8..].iter().fold(0.0_f64, |m, c| m.max(c.abs()));
            if tail <= 1e-15 * scale || n >= 4096 {
                let mut coeffs = coeffs;
                while coeffs.len() > 1 && coeffs.last().unwrap().abs() <= 1e-17 * scale {
                    coeffs.pop();
                }
                return ChebSeries { lo, hi, coeffs };
            }
            n *= 2;
        }
    }

    fn u(&self, x: f64) -> f64 {
        (2.0 * x - self.lo - self.hi) / (self.hi - self.lo)
    }

    fn eval(&self, x: f64) -> f64 {
        crate::poly::chebyshev_eval(&self.coeffs, self.u(x))
    }

    /// Antiderivative in `x` vanishing at `lo`.
    fn integral(&self) -> ChebSeries {
        let c = &self.coeffs;
        let n = c.len();
        let get = |k: usize| if k < n { c[k] } else { 0.0 };
        let mut out = vec![0.0; n + 1];
        for (k, ok) in out.iter_mut().enumerate().skip(1) {
            *ok = if k == 1 {
                get(0) - 0.5 * get(2)
            } else {
                (get(k - 1) - get(k + 1)) / (2.0 * k as f64)
            };
        }
        let half = 0.5 * (self.hi - self.lo);
        for v in out.iter_mut() {
            *v *= half;
        }
        let mut s = ChebSeries { lo: self.lo, hi: self.hi, coeffs: out };
        s.coeffs[0] -= s.eval(self.lo);
        s
    }
}

/// `g_α` with `g'_α = √2 cos(πα F̃)`, where `F̃` is the equilibrium CDF
/// extended by 0 below `A` and 1 above `B`; `g_α(A) = 0`.
#[derive(Debug, Clone)]
pub struct ModeFunction {
    pub alpha: usize,
    a: f64,
    b: f64,
    /// `G(φ) = ∫_φ^π cos(παF(ψ)) sin ψ dψ`, so that `g = √2 h G(φ(x))` inside.
    inner: Option<ChebSeries>,
    g_at_b: f64,
    pub sup_d1: f64,
    pub sup_d2: f64,
}

impl ModeFunction {
    fn zero_mode() -> Self {
        ModeFunction { alpha: 0, a: 0.0, b: 0.0, inner: None, g_at_b: 0.0, sup_d1: 1.0, sup_d2: 0.0 }
    }

    fn new(eq: &EquilibriumMeasure, alpha: usize) -> Self {
        assert!(alpha >= 1);
        let (a, b) = eq.support();
        let h = eq.half_width();
        let af = alpha as f64;
        let integrand = ChebSeries::fit(|psi: f64| (PI * af * eq.cdf_angle(psi)).cos() * psi.sin(), 0.0, PI);
        // ∫_0^ψ from the series; G(φ) = I(π) - I(φ)
        let anti = integrand.integral();
        let total = anti.eval(PI);
        let inner = ChebSeries {
            lo: anti.lo,
            hi: anti.hi,
            coeffs: anti.coeffs.iter().enumerate().map(|(k, c)| if k == 0 { total - c } else { -c }).collect(),
        };
        let g_at_b = SQRT_2 * h * inner.eval(0.0);
        let mut sup_d2 = 0.0_f64;
        let grid = 4000;
        for k in 0..=grid {
            let psi = PI * k as f64 / grid as f64;
            let rho = eq.r_real(eq.center() + h * psi.cos()) * h * psi.sin() / PI;
            sup_d2 = sup_d2.max((SQRT_2 * PI * af * (PI * af * eq.cdf_angle(psi)).sin() * rho).abs());
        }
        ModeFunction { alpha, a, b, inner: Some(inner), g_at_b, sup_d1: SQRT_2, sup_d2 }
    }

    /// `(g, g', g'')` at `x`.
    pub fn eval(&self, eq: &EquilibriumMeasure, x: f64) -> (f64, f64, f64) {
        let Some(inner) = &self.inner else {
            return (x, 1.0, 0.0);
        };
        if x <= self.a {
            return (SQRT_2 * (x - self.a), SQRT_2, 0.0);
        }
        let sign = if self.alpha % 2 == 0 { 1.0 } else { -1.0 };
        if x >= self.b {
            return (self.g_at_b + SQRT_2 * sign * (x - self.b), SQRT_2 * sign, 0.0);
        }
        let phi = eq.angle_of(x);
        let arg = PI * self.alpha as f64 * eq.cdf_angle(phi);
        let g = SQRT_2 * eq.half_width() * inner.eval(phi);
        (g, SQRT_2 * arg.cos(), -SQRT_2 * PI * self.alpha as f64 * arg.sin() * eq.density(x))
    }
}

#[derive(Debug, Clone)]
pub struct SlowModes {
    pub funcs: Vec<ModeFunction>,
    /// Row `a` is `G` for `funcs[a]`.
    pub g: DMatrix<f64>,
    pub gamma_tilde: Vec<f64>,
    eq: EquilibriumMeasure,
}

impl SlowModes {
    pub fn new(eq: &EquilibriumMeasure, n: usize, ell: usize, include_zero_mode: bool) -> Result<Self, ConvexifyError> {
        eq.check_regularity(eq.half_width() * 1e-3)?;
        let gamma_tilde = eq.classical_locations(n).gamma_tilde;
        let mut funcs = Vec::with_capacity(ell + 1);
        if include_zero_mode {
            funcs.push(ModeFunction::zero_mode());
        }
        let built: Vec<ModeFunction> = (1..=ell).into_par_iter().map(|a| ModeFunction::new(eq, a)).collect();
        funcs.extend(built);
        let inv = 1.0 / (n as f64).sqrt();
        let g = DMatrix::from_fn(funcs.len(), n, |a, j| funcs[a].eval(eq, gamma_tilde[j]).1 * inv);
        Ok(SlowModes { funcs, g, gamma_tilde, eq: eq.clone() })
    }

    pub fn len(&self) -> usize {
        self.funcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.funcs.is_empty()
    }

    pub fn eval(&self, mode: usize, x: f64) -> (f64, f64, f64) {
        self.funcs[mode].eval(&self.eq, x)
    }

    /// `C(ℓ) = 2(W+1) Σ_α (‖g''‖² + ‖g'‖‖g''‖)`.
    pub fn c_ell(&self, w: f64) -> f64 {
        2.0 * (w + 1.0)
            * self
                .funcs
                .iter()
                .map(|f| f.sup_d2 * f.sup_d2 + f.sup_d1 * f.sup_d2)
                .sum::<f64>()
    }
}

/// `θ(x) = (x-1)² 1[x>1] + (x+1)² 1[x<-1]` with first and second derivative.
#[inline]
pub fn theta(x: f64) -> (f64, f64, f64) {
    if x > 1.0 {
        let d = x - 1.0;
        (d * d, 2.0 * d, 2.0)
    } else if x < -1.0 {
        let d = x + 1.0;
        (d * d, 2.0 * d, 2.0)
    } else {
        (0.0, 0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyTerms {
    pub x: Vec<f64>,
    pub psi_s: f64,
    pub psi_pair: f64,
    /// `(W+1) Σ X_α²`
    pub x_term: f64,
    pub grad_x: Vec<f64>,
    pub grad_s: Vec<f64>,
    pub grad_pair: Vec<f64>,
    /// Number of unordered pairs outside the dead zone of θ.
    pub active_pairs: usize,
}

impl PenaltyTerms {
    pub fn total(&self) -> f64 {
        self.psi_s + self.psi_pair + self.x_term
    }
}

/// Everything needed to evaluate `H_ν` at a fixed `N`.
#[derive(Debug, Clone)]
pub struct NuModel {
    pub potential: Potential,
    pub params: ResolvedParams,
    pub modes: SlowModes,
    pub qform: QForm,
    /// `√(c₁ N Q_ij)`
    pair_scale: DMatrix<f64>,
    g_at_gamma: Vec<f64>,
}

impl NuModel {
    pub fn new(
        potential: &Potential,
        eq: &EquilibriumMeasure,
        n: usize,
        params: &ConvexifyParams,
    ) -> Result<Self, ConvexifyError> {
        params.validate()?;
        if n < 2 {
            return Err(ConvexifyError::Params("N must be at least 2".into()));
        }
        let w = potential.convexity_lower_bound()?;
        let modes = SlowModes::new(eq, n, params.ell, params.include_zero_mode)?;
        let c_ell = modes.c_ell(w);
        let resolved = ResolvedParams {
            epsilon: params.epsilon,
            ell: params.ell,
            s: params.s.unwrap_or(c_ell),
            c1: params.c1,
            w,
            m: params.m.unwrap_or((w + 1.0) / params.c1),
            delta: params.delta.unwrap_or(0.5 / c_ell),
            c_ell,
            include_zero_mode: params.include_zero_mode,
        };
        let qform = QForm::new(n, params.epsilon);
        let pair_scale = qform.q.map(|q| (params.c1 * n as f64 * q).sqrt());
        let g_at_gamma = (0..modes.len())
            .map(|a| modes.gamma_tilde.iter().map(|&x| modes.eval(a, x).0).sum())
            .collect();
        Ok(NuModel { potential: potential.clone(), params: resolved, modes, qform, pair_scale, g_at_gamma })
    }

    pub fn n(&self) -> usize {
        self.modes.gamma_tilde.len()
    }

    pub fn gamma_tilde(&self) -> &[f64] {
        &self.modes.gamma_tilde
    }

    pub fn penalty_terms(&self, lambda: &[f64]) -> PenaltyTerms {
        let n = self.n();
        assert_eq!(lambda.len(), n);
        let nf = n as f64;
        let inv_sqrt = 1.0 / nf.sqrt();
        let w1 = self.params.w + 1.0;
        let gt = &self.modes.gamma_tilde;

        let mut x = vec![0.0; self.modes.len()];
        let mut grad_x = vec![0.0; n];
        let mut d1 = vec![0.0; n];
        for (a, xa) in x.iter_mut().enumerate() {
            let mut sum = 0.0;
            for (j, &l) in lambda.iter().enumerate() {
                let (g, gp, _) = self.modes.eval(a, l);
                sum += g;
                d1[j] = gp;
            }
            *xa = inv_sqrt * (sum - self.g_at_gamma[a]);
            let coef = 2.0 * w1 * *xa * inv_sqrt;
            for (gi, &gp) in grad_x.iter_mut().zip(&d1) {
                *gi += coef * gp;
            }
        }
        let x_term = w1 * x.iter().map(|v| v * v).sum::<f64>();

        let s = self.params.s;
        let dev: Vec<f64> = lambda.iter().zip(gt).map(|(l, g)| l - g).collect();
        let u = s / nf * dev.iter().map(|d| d * d).sum::<f64>();
        let (th, th1, _) = theta(u);
        let psi_s = nf * th;
        let grad_s = dev.iter().map(|d| 2.0 * s * th1 * d).collect();

        let mut psi_pair = 0.0;
        let mut grad_pair = vec![0.0; n];
        let mut active_pairs = 0;
        for i in 0..n {
            for j in i + 1..n {
                let a = self.pair_scale[(i, j)];
                let (t, t1, _) = theta(a * (lambda[i] - lambda[j]));
                if t1 != 0.0 {
                    active_pairs += 1;
                    psi_pair += 2.0 / nf * t;
                    let g = 2.0 / nf * t1 * a;
                    grad_pair[i] += g;
                    grad_pair[j] -= g;
                }
            }
        }
        PenaltyTerms { x, psi_s, psi_pair, x_term, grad_x, grad_s, grad_pair, active_pairs }
    }

    /// `H_ν = H + ψ^(s) + Σ_{i≠j} ψ_ij + (W+1) Σ X_α²` and its gradient.
    pub fn hamiltonian_nu(&self, lambda: &[f64]) -> Result<(f64, Vec<f64>), ConvexifyError> {
        let mut grad = vec![0.0; lambda.len()];
        let h = hamiltonian_and_grad(&self.potential, lambda, &mut grad)?;
        let p = self.penalty_terms(lambda);
        for i in 0..grad.len() {
            grad[i] += p.grad_x[i] + p.grad_s[i] + p.grad_pair[i];
        }
        Ok((h + p.total(), grad))
    }

    pub fn hessian_nu(&self, lambda: &[f64]) -> Result<DMatrix<f64>, ConvexifyError> {
        let n = self.n();
        let nf = n as f64;
        let inv_sqrt = 1.0 / nf.sqrt();
        let w1 = self.params.w + 1.0;
        let mut h = hamiltonian_hessian(&self.potential, lambda)?;

        let mut gp = vec![0.0; n];
        let mut gpp = vec![0.0; n];
        let gt = &self.modes.gamma_tilde;
        for a in 0..self.modes.len() {
            let mut sum = 0.0;
            for (j, &l) in lambda.iter().enumerate() {
                let (g, d1, d2) = self.modes.eval(a, l);
                sum += g;
                gp[j] = d1;
                gpp[j] = d2;
            }
            let xa = inv_sqrt * (sum - self.g_at_gamma[a]);
            for i in 0..n {
                for j in 0..n {
                    h[(i, j)] += 2.0 * w1 * gp[i] * gp[j] / nf;
                }
                h[(i, i)] += 2.0 * w1 * xa * inv_sqrt * gpp[i];
            }
        }

        let s = self.params.s;
        let dev: Vec<f64> = lambda.iter().zip(gt).map(|(l, g)| l - g).collect();
        let u = s / nf * dev.iter().map(|d| d * d).sum::<f64>();
        let (_, th1, th2) = theta(u);
        if th1 != 0.0 || th2 != 0.0 {
            for i in 0..n {
                h[(i, i)] += 2.0 * s * th1;
                for j in 0..n {
                    h[(i, j)] += 4.0 * s * s / nf * th2 * dev[i] * dev[j];
                }
            }
        }

        for i in 0..n {
            for j in i + 1..n {
                let a = self.pair_scale[(i, j)];
                let (_, _, t2) = theta(a * (lambda[i] - lambda[j]));
                if t2 != 0.0 {
                    // both ordered pairs: 2 c₁ Q_ij θ''
                    let c = 2.0 / nf * a * a * t2;
                    h[(i, i)] += c;
                    h[(j, j)] += c;
                    h[(i, j)] -= c;
                    h[(j, i)] -= c;
                }
            }
        }
        Ok(h)
    }

    /// `(Δ, Δ^(δ))` for one configuration.
    pub fn deltas(&self, lambda: &[f64]) -> (f64, f64) {
        let nf = self.n() as f64;
        let (mut l1, mut l2) = (0.0, 0.0);
        for (l, g) in lambda.iter().zip(self.gamma_tilde()) {
            let d = l - g;
            l1 += d.abs();
            l2 += d * d;
        }
        let delta = self.params.delta;
        ((l1 / nf).max(l2 / nf), delta + l2 / (nf * delta))
    }
}

impl Energy for NuModel {
    fn energy_grad(&self, sorted: &[f64], grad: &mut [f64]) -> Option<f64> {
        let h = hamiltonian_and_grad(&self.potential, sorted, grad).ok()?;
        let p = self.penalty_terms(sorted);
        for i in 0..grad.len() {
            grad[i] += p.grad_x[i] + p.grad_s[i] + p.grad_pair[i];
        }
        Some(h + p.total())
    }

    fn hessian(&self, sorted: &[f64]) -> Option<DMatrix<f64>> {
        self.hessian_nu(sorted).ok()
    }
}

/// Smallest eigenvalue minus `M`, on the full space and on the orthogonal
/// complement of the constant vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatorMargin {
    pub ell: usize,
    pub full: f64,
    pub complement: f64,
}

/// `𝒬 + M Σ_α |G_α⟩⟨G_α|` with `G_α` the cosine modes `α = 1..=ell` (plus
/// the constant mode if requested), checked by dense diagonalisation.
pub fn check_operator_inequality(n: usize, epsilon: f64, ell: usize, m: f64, include_zero_mode: bool) -> OperatorMargin {
    let q = QForm::new(n, epsilon);
    let modes: Vec<Vec<f64>> = (if include_zero_mode { 0 } else { 1 }..=ell.min(n - 1))
        .map(|a| cosine_mode(n, a))
        .collect();
    operator_margin(&q.operator(), &modes, m, ell)
}

/// Same check with explicit mode vectors (e.g. rows of `SlowModes::g`).
pub fn operator_margin(op: &DMatrix<f64>, modes: &[Vec<f64>], m: f64, ell: usize) -> OperatorMargin {
    let n = op.nrows();
    let mut a = op.clone();
    for g in modes {
        for i in 0..n {
            for j in 0..n {
                a[(i, j)] += m * g[i] * g[j];
            }
        }
    }
    let full = SymmetricEigen::new(a.clone()).eigenvalues.min() - m;
    let basis = DMatrix::from_fn(n, n - 1, |i, k| cosine_mode(n, k + 1)[i]);
    let restricted = basis.transpose() * &a * &basis;
    let complement = SymmetricEigen::new(restricted).eigenvalues.min() - m;
    OperatorMargin { ell, full, complement }
}

/// Margins for `ℓ = 0..=ell_max`, using the spectrum directly: the cosine
/// vectors diagonalise `𝒬` with eigenvalues `4(ν_0 - ν_α)`.
pub fn margin_sweep(n: usize, epsilon: f64, ell_max: usize, m: f64, include_zero_mode: bool) -> Vec<OperatorMargin> {
    (0..=ell_max.min(n - 1))
        .into_par_iter()
        .map(|ell| check_operator_inequality(n, epsilon, ell, m, include_zero_mode))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonCalibration {
    pub epsilon: f64,
    pub ell: usize,
}

/// First `ε` (in the given order) for which some `ℓ ≤ ell_max` has a
/// nonnegative complement margin at every `N` in `ns`; returns the smallest
/// such `ℓ`. Uses the spectral shortcut, so it is cheap.
pub fn calibrate_epsilon(ns: &[usize], m: f64, ell_max: usize, candidates: &[f64]) -> Option<EpsilonCalibration> {
    for &eps in candidates {
        let needed: Option<Vec<usize>> = ns
            .iter()
            .map(|&n| {
                let nu = circulant_spectrum(n, eps);
                // complement margin for ℓ: min(min_{α≤ℓ} 4(ν₀-ν_α)+M, min_{α>ℓ} 4(ν₀-ν_α)) - M
                (0..=ell_max.min(n - 1)).find(|&ell| {
                    (ell + 1..n).all(|a| 4.0 * (nu[0] - nu[a]) >= m)
                })
            })
            .collect();
        if let Some(v) = needed {
            return Some(EpsilonCalibration { epsilon: eps, ell: *v.iter().max().unwrap() });
        }
    }
    None
}

/// `t_ij = 1/(N Q_ij (λ_i - λ_j)²)`; the bound holds when `t_ij ≥ c₁`.
fn pair_ratios<'a>(q: &'a QForm, lambda: &'a [f64]) -> impl Iterator<Item = (usize, f64)> + 'a {
    let n = q.n;
    let nf = n as f64;
    (0..n).flat_map(move |i| {
        (i + 1..n).map(move |j| {
            let d = lambda[i] - lambda[j];
            (j - i, 1.0 / (nf * q.q[(i, j)] * d * d))
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseReport {
    pub c1: f64,
    pub events: usize,
    pub violations: usize,
    pub fraction: f64,
    /// Fraction of samples with at least one violating pair.
    pub sample_fraction: f64,
    /// `(|i - j|, violations)` for every index distance with a violation,
    /// largest count first.
    pub by_distance: Vec<(usize, usize)>,
}

pub fn verify_pairwise_bound(store: &SampleStore, q: &QForm, c1: f64) -> Result<PairwiseReport, ConvexifyError> {
    if store.is_empty() {
        return Err(ConvexifyError::EmptyStore);
    }
    if store.n() != q.n {
        return Err(ConvexifyError::SizeMismatch { store: store.n(), expected: q.n });
    }
    let per_sample: Vec<Vec<usize>> = store
        .snapshots
        .par_iter()
        .map(|s| pair_ratios(q, &s.lambda).filter(|&(_, t)| t < c1).map(|(d, _)| d).collect())
        .collect();
    let mut counts = vec![0usize; q.n];
    let mut violations = 0;
    let mut dirty = 0;
    for v in &per_sample {
        if !v.is_empty() {
            dirty += 1;
        }
        for &d in v {
            counts[d] += 1;
            violations += 1;
        }
    }
    let mut by_distance: Vec<(usize, usize)> = counts.iter().enumerate().filter(|(_, c)| **c > 0).map(|(d, c)| (d, *c)).collect();
    by_distance.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let events = store.len() * q.n * (q.n - 1) / 2;
    Ok(PairwiseReport {
        c1,
        events,
        violations,
        fraction: violations as f64 / events as f64,
        sample_fraction: dirty as f64 / store.len() as f64,
        by_distance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct C1Calibration {
    /// Largest `c₁` with pair-event violation fraction `≤ pair_target`.
    pub c1_pair: f64,
    /// Largest `c₁` with at most a `sample_target` fraction of samples
    /// showing any violation.
    pub c1_sample: f64,
    pub pair_target: f64,
    pub sample_target: f64,
}

impl C1Calibration {
    pub fn conservative(&self) -> f64 {
        self.c1_pair.min(self.c1_sample)
    }
}

pub fn calibrate_c1(store: &SampleStore, q: &QForm, pair_target: f64, sample_target: f64) -> Result<C1Calibration, ConvexifyError> {
    if store.is_empty() {
        return Err(ConvexifyError::EmptyStore);
    }
    if store.n() != q.n {
        return Err(ConvexifyError::SizeMismatch { store: store.n(), expected: q.n });
    }
    let per: Vec<Vec<f64>> = store
        .snapshots
        .par_iter()
        .map(|s| pair_ratios(q, &s.lambda).map(|(_, t)| t).collect())
        .collect();
    let mut all: Vec<f64> = per.iter().flatten().copied().collect();
    all.sort_by(f64::total_cmp);
    // #{t < c₁} ≤ k exactly when c₁ ≤ t_(k) (0-based order statistic)
    let k = (pair_target * all.len() as f64).floor() as usize;
    let c1_pair = all[k.min(all.len() - 1)];
    let mut mins: Vec<f64> = per.iter().map(|v| v.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    mins.sort_by(f64::total_cmp);
    let ks = (sample_target * mins.len() as f64).floor() as usize;
    let c1_sample = mins[ks.min(mins.len() - 1)];
    Ok(C1Calibration { c1_pair, c1_sample, pair_target, sample_target })
}

/// Smallest eigenvalue of `∇²H_ν` for every snapshot.
pub fn hessian_min_eigenvalues(store: &SampleStore, model: &NuModel) -> Result<Vec<f64>, ConvexifyError> {
    if store.is_empty() {
        return Err(ConvexifyError::EmptyStore);
    }
    if store.n() != model.n() {
        return Err(ConvexifyError::SizeMismatch { store: store.n(), expected: model.n() });
    }
    store
        .snapshots
        .par_iter()
        .map(|s| Ok(SymmetricEigen::new(model.hessian_nu(&s.lambda)?).eigenvalues.min()))
        .collect()
}
