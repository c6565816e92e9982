//! Quadrature rules: Gauss–Chebyshev (both kinds), Gauss–Legendre and an
//! adaptive Gauss–Kronrod integrator for smooth integrands.

use std::f64::consts::PI;

/// Nodes `cos((2k-1)π/2n)` and the common weight `π/n` of the first-kind
/// rule: `∫_{-1}^{1} f(u) du / √(1-u²) ≈ (π/n) Σ f(u_k)`, exact for
/// polynomials of degree `≤ 2n - 1`.
pub fn gauss_chebyshev_first(n: usize) -> (Vec<f64>, f64) {
    let nodes = (1..=n)
        .map(|k| (PI * (2 * k - 1) as f64 / (2 * n) as f64).cos())
        .collect();
    (nodes, PI / n as f64)
}

/// Second-kind rule: `∫_{-1}^{1} f(u) √(1-u²) du ≈ Σ w_k f(u_k)`.
pub fn gauss_chebyshev_second(n: usize) -> Vec<(f64, f64)> {
    (1..=n)
        .map(|k| {
            let t = PI * k as f64 / (n + 1) as f64;
            (t.cos(), PI / (n + 1) as f64 * t.sin().powi(2))
        })
        .collect()
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Vec<(f64, f64)> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else { p1 };
            let pnm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pnm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        out.push((x, 2.0 / ((1.0 - x * x) * dp * dp)));
    }
    out
}

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

/// Adaptive 15-point Gauss–Kronrod quadrature with bisection until the
/// local error estimate drops below `tol` (absolute, split across
/// subintervals).
pub fn adaptive<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn recurse<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
        let (value, err) = gk15(f, a, b);
        if err <= tol || depth >= 40 || (b - a).abs() < 1e-15 * (1.0 + a.abs()) {
            return value;
        }
        let m = 0.5 * (a + b);
        recurse(f, a, m, 0.5 * tol, depth + 1) + recurse(f, m, b, 0.5 * tol, depth + 1)
    }
    recurse(&f, a, b, tol, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn chebyshev_first_kind_moment() {
        // ∫ u^4 / √(1-u²) = 3π/8
        let (nodes, w) = gauss_chebyshev_first(3);
        let s: f64 = nodes.iter().map(|u| u.powi(4) * w).sum();
        assert_relative_eq!(s, 3.0 * PI / 8.0, epsilon = 1e-14);
    }

    #[test]
    fn chebyshev_second_kind_moment() {
        // ∫ u^2 √(1-u²) = π/8
        let s: f64 = gauss_chebyshev_second(4).iter().map(|(u, w)| w * u * u).sum();
        assert_relative_eq!(s, PI / 8.0, epsilon = 1e-14);
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let rule = gauss_legendre(6);
        let s: f64 = rule.iter().map(|(x, w)| w * x.powi(10)).sum();
        assert_relative_eq!(s, 2.0 / 11.0, epsilon = 1e-14);
        let total: f64 = rule.iter().map(|(_, w)| w).sum();
        assert_relative_eq!(total, 2.0, epsilon = 1e-14);
    }

    #[test]
    fn adaptive_handles_sqrt_endpoint() {
        let v = adaptive(|x: f64| x.sqrt(), 0.0, 1.0, 1e-12);
        assert_relative_eq!(v, 2.0 / 3.0, epsilon = 1e-10);
    }
}
