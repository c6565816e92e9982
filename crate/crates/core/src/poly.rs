//! Dense real polynomials in the monomial basis, plus the handful of
//! Chebyshev helpers the equilibrium solver needs.

use num_complex::Complex64;

/// Polynomial `c[0] + c[1] x + ... + c[d] x^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Poly {
    coeffs: Vec<f64>,
}

impl Poly {
    /// Trailing zero coefficients are dropped, so `degree()` is exact.
    pub fn new(mut coeffs: Vec<f64>) -> Self {
        while coeffs.len() > 1 && *coeffs.last().unwrap() == 0.0 {
            coeffs.pop();
        }
        if coeffs.is_empty() {
            coeffs.push(0.0);
        }
        Poly { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    pub fn leading(&self) -> f64 {
        *self.coeffs.last().unwrap()
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.len() == 1 && self.coeffs[0] == 0.0
    }

    pub fn eval(&self, x: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }

    pub fn eval_complex(&self, z: Complex64) -> Complex64 {
        self.coeffs
            .iter()
            .rev()
            .fold(Complex64::new(0.0, 0.0), |acc, &c| acc * z + c)
    }

    /// Value, first and second derivative in one Horner sweep.
    pub fn eval_with_derivs(&self, x: f64) -> (f64, f64, f64) {
        let mut p = 0.0;
        let mut dp = 0.0;
        let mut ddp = 0.0;
        for &c in self.coeffs.iter().rev() {
            ddp = ddp * x + 2.0 * dp;
            dp = dp * x + p;
            p = p * x + c;
        }
        (p, dp, ddp)
    }

    pub fn derivative(&self) -> Poly {
        if self.coeffs.len() <= 1 {
            return Poly::new(vec![0.0]);
        }
        Poly::new(
            self.coeffs
                .iter()
                .enumerate()
                .skip(1)
                .map(|(k, &c)| k as f64 * c)
                .collect(),
        )
    }

    /// Coefficients of `p(center + half_width * u)` as a polynomial in `u`.
    pub fn compose_affine(&self, center: f64, half_width: f64) -> Poly {
        // Horner with polynomial arithmetic: acc = acc * (center + h u) + c
        let mut acc: Vec<f64> = vec![0.0];
        for &c in self.coeffs.iter().rev() {
            let mut next = vec![0.0; acc.len() + 1];
            for (k, &a) in acc.iter().enumerate() {
                next[k] += a * center;
                next[k + 1] += a * half_width;
            }
            next[0] += c;
            acc = next;
        }
        Poly::new(acc)
    }

    /// Quotient of synthetic division by `(t - z)` for complex `z`. For
    /// `p = V'` this is the divided difference `(V'(z) - V'(t)) / (z - t)`
    /// as a polynomial in `t`.
    pub fn divided_difference(&self, z: Complex64) -> Vec<Complex64> {
        let d = self.degree();
        if d == 0 {
            return vec![Complex64::new(0.0, 0.0)];
        }
        let mut q = vec![Complex64::new(0.0, 0.0); d];
        let mut acc = Complex64::new(self.coeffs[d], 0.0);
        q[d - 1] = acc;
        for k in (1..d).rev() {
            acc = acc * z + self.coeffs[k];
            q[k - 1] = acc;
        }
        q
    }

    /// Real roots in increasing order, found by bracketing between the real
    /// roots of the derivative and polishing with safeguarded Newton.
    pub fn real_roots(&self) -> Vec<f64> {
        let d = self.degree();
        if d == 0 {
            return Vec::new();
        }
        if d == 1 {
            return vec![-self.coeffs[0] / self.coeffs[1]];
        }
        let bound = self.cauchy_bound();
        let mut marks = vec![-bound];
        marks.extend(
            self.derivative()
                .real_roots()
                .into_iter()
                .filter(|x| x.abs() < bound),
        );
        marks.push(bound);
        let scale = self.coeffs.iter().fold(0.0_f64, |m, c| m.max(c.abs()));
        let mut roots: Vec<f64> = Vec::new();
        for w in marks.windows(2) {
            let (a, b) = (w[0], w[1]);
            let (fa, fb) = (self.eval(a), self.eval(b));
            let tol = 1e-14 * scale * (1.0 + a.abs().max(b.abs())).powi(d as i32);
            let candidate = if fa.abs() <= tol {
                Some(a)
            } else if fb.abs() <= tol {
                Some(b)
            } else if fa.signum() != fb.signum() {
                Some(self.bracketed_root(a, b, fa))
            } else {
                None
            };
            if let Some(x) = candidate {
                if roots.last().is_none_or(|&last| (x - last).abs() > 1e-12 * (1.0 + x.abs())) {
                    roots.push(x);
                }
            }
        }
        roots
    }

    fn cauchy_bound(&self) -> f64 {
        let lead = self.leading().abs();
        1.0 + self.coeffs[..self.degree()]
            .iter()
            .fold(0.0_f64, |m, c| m.max(c.abs() / lead))
    }

    fn bracketed_root(&self, mut a: f64, mut b: f64, fa: f64) -> f64 {
        let sa = fa.signum();
        let mut x = 0.5 * (a + b);
        for _ in 0..200 {
            let (f, df, _) = self.eval_with_derivs(x);
            if f == 0.0 {
                return x;
            }
            if f.signum() == sa {
                a = x;
            } else {
                b = x;
            }
            let newton = x - f / df;
            let next = if df != 0.0 && newton > a && newton < b {
                newton
            } else {
                0.5 * (a + b)
            };
            if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) || (b - a) <= 1e-15 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }
}

/// Chebyshev coefficients `a_k` with `p(u) = sum a_k T_k(u)` on `[-1, 1]`,
/// obtained by interpolation at `p.degree() + 1` first-kind nodes (exact for
/// polynomials).
pub fn monomial_to_chebyshev(p: &Poly) -> Vec<f64> {
    let n = p.degree() + 1;
    let mut a = vec![0.0; n];
    let values: Vec<f64> = (0..n)
        .map(|j| {
            let theta = std::f64::consts::PI * (j as f64 + 0.5) / n as f64;
            p.eval(theta.cos())
        })
        .collect();
    for (k, ak) in a.iter_mut().enumerate() {
        let s: f64 = values
            .iter()
            .enumerate()
            .map(|(j, v)| v * (std::f64::consts::PI * k as f64 * (j as f64 + 0.5) / n as f64).cos())
            .sum();
        *ak = if k == 0 { s / n as f64 } else { 2.0 * s / n as f64 };
    }
    a
}

/// Clenshaw evaluation of `sum a_k T_k(u)`.
pub fn chebyshev_eval(a: &[f64], u: f64) -> f64 {
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for &ak in a.iter().skip(1).rev() {
        let b0 = 2.0 * u * b1 - b2 + ak;
        b2 = b1;
        b1 = b0;
    }
    u * b1 - b2 + a.first().copied().unwrap_or(0.0)
}
