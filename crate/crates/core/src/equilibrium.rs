//! One-cut equilibrium measures.
//!
//! For a polynomial potential the density is `ρ(t) = r(t)√((t-A)(B-t))/π`
//! with `r` a polynomial of degree `deg V - 2`. Everything below is computed
//! in the angle variable `t = c + h cos φ` (`c` the midpoint, `h` the
//! half-width), where both the endpoint conditions and the distribution
//! function reduce to finite trigonometric sums.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::{chebyshev_eval, monomial_to_chebyshev, Poly};
use crate::potentials::{Potential, PotentialError};
use crate::quadrature::{adaptive, gauss_chebyshev_first, gauss_chebyshev_second};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("endpoint Newton iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NoOneCutSolution { iterations: usize, residual: f64 },
    #[error("one-cut ansatz fails: density is negative near t = {point} (r = {value:e})")]
    NotOneCut { point: f64, value: f64 },
    #[error("regularity violated: r(t) = {value:e} <= 0 at t = {point}")]
    Regularity { point: f64, value: f64 },
    #[error("z = {0} lies on the support; the Stieltjes transform has a branch cut there")]
    Branch(Complex64),
    #[error("quantile level {0} outside [0, 1]")]
    Domain(f64),
    #[error(transparent)]
    Potential(#[from] PotentialError),
}

const MAX_NEWTON: usize = 200;

#[derive(Debug, Clone)]
pub struct EquilibriumMeasure {
    potential: Potential,
    a: f64,
    b: f64,
    r_poly: Poly,
    /// Chebyshev coefficients of `r(c + h u)` in `u ∈ [-1, 1]`.
    r_cheb: Vec<f64>,
    s_a: f64,
    s_b: f64,
    mass_tolerance: f64,
    residual: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassicalLocations {
    /// `F(γ_k) = k/N`
    pub gamma: Vec<f64>,
    /// `F(γ̃_j) = (j - 1/2)/N`
    pub gamma_tilde: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regularity {
    pub s_a: f64,
    pub s_b: f64,
    pub kappa0: f64,
}

/// The `eqm` document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumSummary {
    pub potential: String,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "s_A")]
    pub s_a: f64,
    #[serde(rename = "s_B")]
    pub s_b: f64,
    pub cheb_coeffs: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_tilde: Vec<f64>,
}

fn endpoint_residuals(dv: &Poly, ddv: &Poly, a: f64, b: f64, nodes: &[f64]) -> ([f64; 2], [[f64; 2]; 2]) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let n = nodes.len() as f64;
    let mut f = [0.0; 2];
    let mut jac = [[0.0; 2]; 2];
    for &u in nodes {
        let t = c + h * u;
        let v1 = dv.eval(t);
        let v2 = ddv.eval(t);
        let (wa, wb) = (0.5 * (1.0 - u), 0.5 * (1.0 + u));
        f[0] += v1;
        f[1] += t * v1;
        jac[0][0] += v2 * wa;
        jac[0][1] += v2 * wb;
        let g = v1 + t * v2;
        jac[1][0] += g * wa;
        jac[1][1] += g * wb;
    }
    // (1/2π)·(π/n)Σ = Σ/(2n)
    let scale = 0.5 / n;
    f[0] *= scale;
    f[1] = f[1] * scale - 1.0;
    for row in jac.iter_mut() {
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    (f, jac)
}

fn newton_endpoints(dv: &Poly, ddv: &Poly, a0: f64, b0: f64, nodes: &[f64]) -> (f64, f64, f64) {
    let norm = |f: &[f64; 2]| f[0].abs().max(f[1].abs());
    let (mut a, mut b) = (a0, b0);
    let (mut f, mut jac) = endpoint_residuals(dv, ddv, a, b, nodes);
    for _ in 0..MAX_NEWTON {
        let current = norm(&f);
        if current <= 1e-14 {
            break;
        }
        let det = jac[0][0] * jac[1][1] - jac[0][1] * jac[1][0];
        if det == 0.0 || !det.is_finite() {
            break;
        }
        let da = -(jac[1][1] * f[0] - jac[0][1] * f[1]) / det;
        let db = -(-jac[1][0] * f[0] + jac[0][0] * f[1]) / det;
        // Halve the step until the residual decreases.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let (na, nb) = (a + step * da, b + step * db);
            if nb > na {
                let (nf, nj) = endpoint_residuals(dv, ddv, na, nb, nodes);
                if norm(&nf) < current {
                    accepted = Some((na, nb, nf, nj));
                    break;
                }
            }
            step *= 0.5;
        }
        match accepted {
            Some((na, nb, nf, nj)) => {
                a = na;
                b = nb;
                f = nf;
                jac = nj;
            }
            None => break,
        }
    }
    (a, b, norm(&f))
}

impl EquilibriumMeasure {
    /// Solves the two endpoint conditions by damped Newton from
    /// `argmin V ∓ 1` (with a wider fallback start), then builds `r` and validates the one-cut ansatz.
    pub fn solve(potential: &Potential) -> Result<Self, EquilibriumError> {
        potential.validate()?;
        let dv = potential.derivative_poly().clone();
        let ddv = dv.derivative();
        let n_nodes = potential.degree() + 4;
        let (nodes, _) = gauss_chebyshev_first(n_nodes);

        let critical = dv.real_roots();
        let x_star = critical
            .iter()
            .copied()
            .min_by(|x, y| potential.value(*x).total_cmp(&potential.value(*y)))
            .unwrap_or(0.0);
        // A start around the deepest well can stall in a double well; the
        // fallback brackets every critical point.
        let mut starts = vec![(x_star - 1.0, x_star + 1.0)];
        if let (Some(lo), Some(hi)) = (critical.first(), critical.last()) {
            if hi > lo {
                starts.push((lo - 1.0, hi + 1.0));
            }
        }
        let mut best = None;
        for (a0, b0) in starts {
            let (a, b, residual) = newton_endpoints(&dv, &ddv, a0, b0, &nodes);
            if residual <= 1e-12 {
                best = Some((a, b, residual));
                break;
            }
            if best.is_none_or(|(_, _, r)| residual < r) {
                best = Some((a, b, residual));
            }
        }
        let (a, b, residual) = best.expect("at least one start");
        if residual > 1e-12 {
            return Err(EquilibriumError::NoOneCutSolution {
                iterations: MAX_NEWTON,
                residual,
            });
        }

        let c = 0.5 * (a + b);
        let h = 0.5 * (b - a);
        // M_j = (1/π)∫_0^π (c + h cos θ)^j dθ, exact on the first-kind nodes.
        let moments_nodes = gauss_chebyshev_first(potential.degree() + 2).0;
        let max_j = dv.degree();
        let moments: Vec<f64> = (0..max_j.max(1))
            .map(|j| {
                moments_nodes
                    .iter()
                    .map(|u| (c + h * u).powi(j as i32))
                    .sum::<f64>()
                    / moments_nodes.len() as f64
            })
            .collect();
        let bcoef = dv.coeffs();
        let mut r = vec![0.0; max_j.max(1)];
        for (i, ri) in r.iter_mut().enumerate() {
            *ri = 0.5
                * (i + 1..=max_j)
                    .map(|m| bcoef[m] * moments[m - 1 - i])
                    .sum::<f64>();
        }
        let r_poly = Poly::new(r);
        let r_cheb = monomial_to_chebyshev(&r_poly.compose_affine(c, h));
        let width = b - a;
        let s_a = r_poly.eval(a) * width.sqrt() / PI;
        let s_b = r_poly.eval(b) * width.sqrt() / PI;
        let eq = EquilibriumMeasure {
            potential: potential.clone(),
            a,
            b,
            r_poly,
            r_cheb,
            s_a,
            s_b,
            mass_tolerance: 1e-10,
            residual,
        };
        let (point, value) = eq.min_r_on(a, b);
        if value < -1e-12 * eq.r_scale() {
            return Err(EquilibriumError::NotOneCut { point, value });
        }
        Ok(eq)
    }

    pub fn potential(&self) -> &Potential {
        &self.potential
    }

    pub fn support(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn lower(&self) -> f64 {
        self.a
    }

    pub fn upper(&self) -> f64 {
        self.b
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.a + self.b)
    }

    pub fn half_width(&self) -> f64 {
        0.5 * (self.b - self.a)
    }

    /// Max-norm of the endpoint-condition residual at the solution.
    pub fn endpoint_residual(&self) -> f64 {
        self.residual
    }

    pub fn mass_tolerance(&self) -> f64 {
        self.mass_tolerance
    }

    pub fn r_poly(&self) -> &Poly {
        &self.r_poly
    }

    pub fn r_cheb(&self) -> &[f64] {
        &self.r_cheb
    }

    pub fn edge_constants(&self) -> (f64, f64) {
        (self.s_a, self.s_b)
    }

    fn r_scale(&self) -> f64 {
        self.r_cheb.iter().map(|c| c.abs()).sum::<f64>().max(f64::MIN_POSITIVE)
    }

    fn min_r_on(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut best = (lo, self.r_poly.eval(lo));
        let mut candidates = vec![hi];
        candidates.extend(
            self.r_poly
                .derivative()
                .real_roots()
                .into_iter()
                .filter(|x| *x > lo && *x < hi),
        );
        for x in candidates {
            let v = self.r_poly.eval(x);
            if v < best.1 {
                best = (x, v);
            }
        }
        best
    }

    /// `r(z)` by Gauss–Chebyshev quadrature of the divided difference
    /// `(V'(z) - V'(t))/(z - t)`, which is a polynomial in `t`.
    pub fn r_eval(&self, z: Complex64) -> Complex64 {
        let q = self.potential.derivative_poly().divided_difference(z);
        let (nodes, w) = gauss_chebyshev_first(self.potential.degree() + 2);
        let (c, h) = (self.center(), self.half_width());
        let sum: Complex64 = nodes
            .iter()
            .map(|u| {
                let t = c + h * u;
                q.iter()
                    .rev()
                    .fold(Complex64::new(0.0, 0.0), |acc, &coef| acc * t + coef)
            })
            .sum();
        sum * w / (2.0 * PI)
    }

    #[inline]
    pub fn r_real(&self, t: f64) -> f64 {
        self.r_poly.eval(t)
    }

    /// `ρ(t)`, zero outside `[A, B]`.
    pub fn density(&self, t: f64) -> f64 {
        if !(t > self.a && t < self.b) {
            return 0.0;
        }
        self.r_poly.eval(t) * ((t - self.a) * (self.b - t)).sqrt() / PI
    }

    /// `φ` with `t = c + h cos φ`, clamped to `[0, π]`.
    pub fn angle_of(&self, t: f64) -> f64 {
        ((t - self.center()) / self.half_width()).clamp(-1.0, 1.0).acos()
    }

    /// `F` as a function of the angle `φ ∈ [0, π]` (`φ = π` at `A`).
    pub fn cdf_angle(&self, phi: f64) -> f64 {
        let j = |k: usize| -> f64 {
            if k == 0 {
                PI - phi
            } else {
                -(k as f64 * phi).sin() / k as f64
            }
        };
        let h = self.half_width();
        let s: f64 = self
            .r_cheb
            .iter()
            .enumerate()
            .map(|(k, &ak)| ak * (j(k) - 0.5 * (j(k + 2) + j(k.abs_diff(2)))))
            .sum();
        h * h / (2.0 * PI) * s
    }

    fn cdf_angle_derivative(&self, phi: f64) -> f64 {
        let h = self.half_width();
        -h * h / PI * chebyshev_eval(&self.r_cheb, phi.cos()) * phi.sin().powi(2)
    }

    /// `F(t) = ∫_A^t ρ`.
    pub fn cdf(&self, t: f64) -> f64 {
        if t <= self.a {
            return 0.0;
        }
        if t >= self.b {
            return 1.0;
        }
        self.cdf_angle(self.angle_of(t))
    }

    /// Total mass `F(B)` before clamping; equals 1 up to the solver residual.
    pub fn total_mass(&self) -> f64 {
        self.cdf_angle(0.0)
    }

    pub fn quantile(&self, q: f64) -> Result<f64, EquilibriumError> {
        if !(0.0..=1.0).contains(&q) || q.is_nan() {
            return Err(EquilibriumError::Domain(q));
        }
        if q == 0.0 {
            return Ok(self.a);
        }
        if q == 1.0 {
            return Ok(self.b);
        }
        // F(φ) decreases from F(0) ≈ 1 to F(π) = 0.
        let (mut lo, mut hi) = (0.0, PI);
        let mut phi = PI * (1.0 - q);
        for _ in 0..200 {
            let f = self.cdf_angle(phi) - q;
            if f > 0.0 {
                lo = phi;
            } else {
                hi = phi;
            }
            if f.abs() <= 1e-15 || hi - lo <= 1e-15 {
                break;
            }
            let d = self.cdf_angle_derivative(phi);
            let newton = phi - f / d;
            phi = if d != 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        Ok(self.center() + self.half_width() * phi.cos())
    }

    pub fn classical_locations(&self, n: usize) -> ClassicalLocations {
        assert!(n >= 1, "need at least one particle");
        let nf = n as f64;
        let mut gamma: Vec<f64> = (1..=n)
            .map(|k| self.quantile(k as f64 / nf).expect("level in [0,1]"))
            .collect();
        gamma[n - 1] = self.b;
        let gamma_tilde = (1..=n)
            .map(|j| self.quantile((j as f64 - 0.5) / nf).expect("level in [0,1]"))
            .collect();
        ClassicalLocations {
            gamma,
            gamma_tilde,
            n,
        }
    }

    /// Certifies `r > 0` on `[A-κ, B+κ]` and returns the edge constants.
    pub fn check_regularity(&self, kappa: f64) -> Result<Regularity, EquilibriumError> {
        let tol = 1e-9 * self.r_scale();
        let (point, value) = self.min_r_on(self.a, self.b);
        if value <= tol {
            return Err(EquilibriumError::Regularity { point, value });
        }
        let (lo, hi) = (self.a - kappa, self.b + kappa);
        let (point, value) = self.min_r_on(lo, hi);
        if value <= tol {
            return Err(EquilibriumError::Regularity { point, value });
        }
        // Chebyshev range bound with bisection; shrink κ until certified.
        let mut kappa0 = kappa;
        let mut tries = 0;
        while !self.certify_positive(self.a - kappa0, self.b + kappa0, 0) {
            kappa0 *= 0.5;
            tries += 1;
            if tries > 40 {
                let (point, value) = self.min_r_on(self.a, self.b);
                return Err(EquilibriumError::Regularity { point, value });
            }
        }
        Ok(Regularity {
            s_a: self.s_a,
            s_b: self.s_b,
            kappa0,
        })
    }

    fn certify_positive(&self, lo: f64, hi: f64, depth: u32) -> bool {
        let cheb = monomial_to_chebyshev(&self.r_poly.compose_affine(0.5 * (lo + hi), 0.5 * (hi - lo)));
        let lower = cheb[0] - cheb.iter().skip(1).map(|c| c.abs()).sum::<f64>();
        if lower > 0.0 {
            return true;
        }
        if depth >= 16 || self.r_poly.eval(0.5 * (lo + hi)) <= 0.0 {
            return false;
        }
        let mid = 0.5 * (lo + hi);
        self.certify_positive(lo, mid, depth + 1) && self.certify_positive(mid, hi, depth + 1)
    }

    /// Distance from `[A, B]` to the nearest real zero of `r`.
    pub fn regular_margin(&self) -> f64 {
        self.r_poly
            .real_roots()
            .into_iter()
            .filter_map(|x| {
                if x < self.a {
                    Some(self.a - x)
                } else if x > self.b {
                    Some(x - self.b)
                } else {
                    Some(0.0)
                }
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// `m(z) = ∫ ρ(t)/(z - t) dt`.
    pub fn stieltjes(&self, z: Complex64) -> Result<Complex64, EquilibriumError> {
        if z.im == 0.0 && z.re >= self.a && z.re <= self.b {
            return Err(EquilibriumError::Branch(z));
        }
        let (c, h) = (self.center(), self.half_width());
        if (z - c).norm() > 3.0 * h {
            // Far field: the closed form cancels badly; the integrand is smooth.
            let rule = gauss_chebyshev_second(64 + self.r_cheb.len());
            let s: Complex64 = rule
                .iter()
                .map(|&(u, w)| w * chebyshev_eval(&self.r_cheb, u) / (z - (c + h * u)))
                .sum();
            return Ok(s * h * h / PI);
        }
        let f = (z - self.a).sqrt() * (z - self.b).sqrt();
        Ok(self.potential.derivative_poly().eval_complex(z) * 0.5 - self.r_eval(z) * f)
    }

    /// `m'(z)`, by the same closed form differentiated.
    pub fn stieltjes_derivative(&self, z: Complex64) -> Result<Complex64, EquilibriumError> {
        if z.im == 0.0 && z.re >= self.a && z.re <= self.b {
            return Err(EquilibriumError::Branch(z));
        }
        let (c, h) = (self.center(), self.half_width());
        let rule = gauss_chebyshev_second(128 + self.r_cheb.len());
        let s: Complex64 = rule
            .iter()
            .map(|&(u, w)| {
                let d = z - (c + h * u);
                -w * chebyshev_eval(&self.r_cheb, u) / (d * d)
            })
            .sum();
        Ok(s * h * h / PI)
    }

    /// `∫ ρ p` for a polynomial `p`, exact.
    pub fn integrate_poly(&self, p: &Poly) -> f64 {
        let (c, h) = (self.center(), self.half_width());
        let rule = gauss_chebyshev_second(p.degree() + self.r_cheb.len() + 2);
        rule.iter()
            .map(|&(u, w)| w * p.eval(c + h * u) * chebyshev_eval(&self.r_cheb, u))
            .sum::<f64>()
            * h
            * h
            / PI
    }

    /// `∫ ρ q` for complex polynomial coefficients `q` (ascending).
    pub fn integrate_complex_poly(&self, q: &[Complex64]) -> Complex64 {
        let (c, h) = (self.center(), self.half_width());
        let rule = gauss_chebyshev_second(q.len() + self.r_cheb.len() + 2);
        rule.iter()
            .map(|&(u, w)| {
                let t = c + h * u;
                let qt = q
                    .iter()
                    .rev()
                    .fold(Complex64::new(0.0, 0.0), |acc, &coef| acc * t + coef);
                qt * w * chebyshev_eval(&self.r_cheb, u)
            })
            .sum::<Complex64>()
            * (h * h / PI)
    }

    /// `∫ ρ f` for a smooth `f`, adaptive in the angle variable.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: F, tol: f64) -> f64 {
        let (c, h) = (self.center(), self.half_width());
        adaptive(
            |phi: f64| {
                let u = phi.cos();
                f(c + h * u) * chebyshev_eval(&self.r_cheb, u) * phi.sin().powi(2)
            },
            0.0,
            PI,
            tol,
        ) * h
            * h
            / PI
    }

    pub fn summary(&self, n: usize) -> EquilibriumSummary {
        let locs = self.classical_locations(n.max(1));
        EquilibriumSummary {
            potential: self.potential.to_string(),
            a: self.a,
            b: self.b,
            s_a: self.s_a,
            s_b: self.s_b,
            cheb_coeffs: self.r_cheb.clone(),
            gamma: locs.gamma,
            gamma_tilde: locs.gamma_tilde,
        }
    }
}
