use std::f64::consts::PI;

use loggas::equilibrium::EquilibriumMeasure;
use loggas::potentials::Potential;
use loggas::quadrature::adaptive;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn potentials() -> Vec<Potential> {
    vec![
        Potential::quadratic(),
        Potential::quartic_minus(0.0).unwrap(),
        Potential::quartic_minus(0.5).unwrap(),
        Potential::polynomial(vec![0.0, 0.3, 0.5, 0.1, 0.25]).unwrap(),
    ]
}

/// Endpoint conditions by adaptive quadrature in the angle variable.
fn endpoint_oracle(p: &Potential, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let i0 = adaptive(|th: f64| p.d1(c + h * th.cos()), 0.0, PI, 1e-14) / (2.0 * PI);
    let i1 = adaptive(|th: f64| {
        let t = c + h * th.cos();
        t * p.d1(t)
    }, 0.0, PI, 1e-14)
        / (2.0 * PI);
    (i0, i1 - 1.0)
}

/// Principal value of ∫ρ(s)/(t-s) ds via the subtracted integrand.
fn principal_value(eq: &EquilibriumMeasure, t: f64) -> f64 {
    let (a, b) = eq.support();
    let rt = eq.density(t);
    let g = |s: f64| {
        if s == t {
            0.0
        } else {
            (eq.density(s) - rt) / (t - s)
        }
    };
    let body = adaptive(g, a, t, 1e-13) + adaptive(g, t, b, 1e-13);
    body + rt * ((t - a) / (b - t)).ln()
}

#[test]
fn endpoint_conditions_hold_under_independent_quadrature() {
    for p in potentials() {
        let eq = EquilibriumMeasure::solve(&p).unwrap();
        let (a, b) = eq.support();
        let (f0, f1) = endpoint_oracle(&p, a, b);
        assert!(f0.abs() < 1e-11 && f1.abs() < 1e-11, "{p}: {f0} {f1}");
    }
}

#[test]
fn pure_quartic_is_symmetric() {
    let eq = EquilibriumMeasure::solve(&Potential::quartic_minus(0.0).unwrap()).unwrap();
    let (a, b) = eq.support();
    assert!((a + b).abs() < 1e-12);
    // h² = 4/√3 at a = 0
    assert!((b - (4.0 / 3f64.sqrt()).sqrt()).abs() < 1e-12);
}

#[test]
fn euler_lagrange_residual_in_bulk() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for p in potentials() {
        let eq = EquilibriumMeasure::solve(&p).unwrap();
        let (a, b) = eq.support();
        for _ in 0..50 {
            let t = rng.random_range(a + 0.05..b - 0.05);
            let lhs = principal_value(&eq, t);
            assert!((lhs - p.d1(t) / 2.0).abs() < 1e-7, "{p} at {t}: {lhs}");
        }
    }
}

#[test]
fn mass_and_cdf_agree_with_quadrature() {
    for p in potentials() {
        let eq = EquilibriumMeasure::solve(&p).unwrap();
        let (a, b) = eq.support();
        let mass = adaptive(|t| eq.density(t), a, b, 1e-13);
        assert!((mass - 1.0).abs() < 1e-10);
        assert!((eq.total_mass() - 1.0).abs() < 1e-10);
        for frac in [0.1, 0.37, 0.5, 0.92] {
            let t = a + frac * (b - a);
            let direct = adaptive(|s| eq.density(s), a, t, 1e-13);
            assert!((eq.cdf(t) - direct).abs() < 1e-10);
        }
    }
}

#[test]
fn r_matches_quadrature_of_divided_difference() {
    let p = Potential::quartic_minus(1.0).unwrap();
    let eq = EquilibriumMeasure::solve(&p).unwrap();
    let (a, b) = eq.support();
    let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
    let z = 0.0;
    let oracle = adaptive(|th: f64| {
        let t = c + h * th.cos();
        if (t - z).abs() < 1e-12 {
            p.d2(z)
        } else {
            (p.d1(z) - p.d1(t)) / (z - t)
        }
    }, 0.0, PI, 1e-14)
        / (2.0 * PI);
    let r = eq.r_eval(Complex64::new(z, 0.0));
    assert!((r.re - oracle).abs() < 1e-12 && r.im == 0.0);
}

#[test]
fn square_root_edge_law() {
    for p in potentials() {
        let eq = EquilibriumMeasure::solve(&p).unwrap();
        let (a, b) = eq.support();
        let (sa, sb) = eq.edge_constants();
        for h in [1e-4, 1e-6] {
            assert!((eq.density(a + h) / (sa * h.sqrt()) - 1.0).abs() < 0.05);
            assert!((eq.density(b - h) / (sb * h.sqrt()) - 1.0).abs() < 0.05);
        }
    }
}

#[test]
fn stieltjes_matches_quadrature() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for p in potentials() {
        let eq = EquilibriumMeasure::solve(&p).unwrap();
        let (a, b) = eq.support();
        let (c, h) = (0.5 * (a + b), 0.5 * (b - a));
        for _ in 0..20 {
            let z = Complex64::new(rng.random_range(a - 1.0..b + 1.0), rng.random_range(0.1..2.0));
            let kernel = |th: f64, part: usize| {
                let t = c + h * th.cos();
                let w = eq.density(t) * h * th.sin();
                let v = w / (z - t);
                if part == 0 {
                    v.re
                } else {
                    v.im
                }
            };
            let re = adaptive(|th| kernel(th, 0), 0.0, PI, 1e-13);
            let im = adaptive(|th| kernel(th, 1), 0.0, PI, 1e-13);
            let m = eq.stieltjes(z).unwrap();
            assert!((m - Complex64::new(re, im)).norm() < 1e-9, "{p} {z}");
        }
    }
}

#[test]
fn semicircle_quarter_quantile_by_root_finding() {
    let eq = EquilibriumMeasure::solve(&Potential::quadratic()).unwrap();
    // F(t) = 1/2 + (t√(2-t²) + 2 asin(t/√2))/(2π)
    let f = |t: f64| 0.5 + (t * (2.0 - t * t).sqrt() + 2.0 * (t / 2f64.sqrt()).asin()) / (2.0 * PI);
    let (mut lo, mut hi) = (-2f64.sqrt(), 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.25 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let locs = eq.classical_locations(2);
    assert!((locs.gamma_tilde[0] - lo).abs() < 1e-12);
    assert!((locs.gamma_tilde[1] + lo).abs() < 1e-12);
}

#[test]
fn classical_locations_are_accurate_and_close() {
    let eq = EquilibriumMeasure::solve(&Potential::quartic_minus(0.5).unwrap()).unwrap();
    let (a, b) = eq.support();
    for n in [16usize, 256] {
        let locs = eq.classical_locations(n);
        for k in 0..n {
            assert!((eq.cdf(locs.gamma[k]) - (k + 1) as f64 / n as f64).abs() < 1e-10);
            assert!((eq.cdf(locs.gamma_tilde[k]) - (k as f64 + 0.5) / n as f64).abs() < 1e-10);
            assert!(locs.gamma_tilde[k] > a && locs.gamma_tilde[k] < b);
            if k > 0 {
                assert!(locs.gamma[k] > locs.gamma[k - 1]);
                assert!(locs.gamma_tilde[k] > locs.gamma_tilde[k - 1]);
            }
        }
        let max_gap = locs
            .gamma
            .iter()
            .zip(&locs.gamma_tilde)
            .map(|(g, gt)| (g - gt).abs())
            .fold(0.0, f64::max);
        // half-quantile shift at the edge scales like N^{-2/3}
        let (sa, _) = eq.edge_constants();
        let bound = 2.0 * (1.5 / (sa * n as f64)).powf(2.0 / 3.0);
        assert!(max_gap <= bound, "{max_gap} > {bound}");
    }
}

proptest! {
    #[test]
    fn quantile_inverts_cdf(q in 0.0f64..1.0, a in -0.5f64..0.9) {
        let eq = EquilibriumMeasure::solve(&Potential::quartic_minus(a).unwrap()).unwrap();
        let t = eq.quantile(q).unwrap();
        prop_assert!((eq.cdf(t) - q).abs() <= 1e-10);
    }

    #[test]
    fn mass_is_one_for_random_quartics(c1 in -0.5f64..0.5, c2 in -0.3f64..0.8, c3 in -0.2f64..0.2) {
        let p = Potential::polynomial(vec![0.0, c1, c2, c3, 0.3]).unwrap();
        if let Ok(eq) = EquilibriumMeasure::solve(&p) {
            prop_assert!((eq.total_mass() - 1.0).abs() <= 1e-10);
            let (a, b) = eq.support();
            for k in 1..20 {
                prop_assert!(eq.density(a + (b - a) * k as f64 / 20.0) >= 0.0);
            }
        }
    }
}
