//! External potentials `V`: exact evaluation, the convexity deficit `W`
//! with `inf V'' >= -2W`, and a growth certificate against
//! `(2 + α) ln(1 + |x|)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::poly::Poly;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PotentialError {
    #[error("non-finite evaluation point {0}")]
    Domain(f64),
    #[error("inadmissible potential: {0}")]
    Inadmissible(String),
    #[error("unsupported potential: {0}")]
    Unsupported(String),
    #[error("cannot parse potential spec `{spec}`: {reason}")]
    Parse { spec: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum PotentialForm {
    Polynomial(Vec<f64>),
    Quadratic,
    /// `x⁴/4 − a·x²`
    QuarticMinus(f64),
}

/// An admissible polynomial potential. Construction enforces degree ≥ 2 and
/// a positive leading coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    form: PotentialForm,
    poly: Poly,
    dpoly: Poly,
    ddpoly: Poly,
    eval_window: (f64, f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthCertificate {
    pub alpha: f64,
    /// `V(x) > (2+α) ln(1+|x|)` holds for every `|x| >= x0`.
    pub x0: f64,
    /// Beyond this radius the bound follows from the leading term alone.
    pub tail_radius: f64,
    pub admissible: bool,
}

impl Potential {
    pub fn new(form: PotentialForm) -> Result<Self, PotentialError> {
        let coeffs = match &form {
            PotentialForm::Polynomial(c) => c.clone(),
            PotentialForm::Quadratic => vec![0.0, 0.0, 1.0],
            PotentialForm::QuarticMinus(a) => vec![0.0, 0.0, -a, 0.0, 0.25],
        };
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(PotentialError::Inadmissible(
                "non-finite coefficient".into(),
            ));
        }
        let poly = Poly::new(coeffs);
        if poly.degree() < 2 {
            return Err(PotentialError::Inadmissible(format!(
                "degree {} < 2 cannot confine the log-gas",
                poly.degree()
            )));
        }
        if poly.leading() <= 0.0 {
            return Err(PotentialError::Inadmissible(
                "leading coefficient must be positive".into(),
            ));
        }
        let dpoly = poly.derivative();
        let ddpoly = dpoly.derivative();
        Ok(Potential {
            form,
            poly,
            dpoly,
            ddpoly,
            eval_window: (-10.0, 10.0),
        })
    }

    pub fn polynomial(coeffs: Vec<f64>) -> Result<Self, PotentialError> {
        Self::new(PotentialForm::Polynomial(coeffs))
    }

    pub fn quadratic() -> Self {
        Self::new(PotentialForm::Quadratic).expect("x² is admissible")
    }

    pub fn quartic_minus(a: f64) -> Result<Self, PotentialError> {
        Self::new(PotentialForm::QuarticMinus(a))
    }

    pub fn with_eval_window(mut self, lo: f64, hi: f64) -> Self {
        self.eval_window = (lo.min(hi), lo.max(hi));
        self
    }

    pub fn form(&self) -> &PotentialForm {
        &self.form
    }

    pub fn poly(&self) -> &Poly {
        &self.poly
    }

    /// `V'` as a polynomial.
    pub fn derivative_poly(&self) -> &Poly {
        &self.dpoly
    }

    pub fn degree(&self) -> usize {
        self.poly.degree()
    }

    pub fn eval_window(&self) -> (f64, f64) {
        self.eval_window
    }

    /// `(V(x), V'(x), V''(x))`.
    pub fn eval(&self, x: f64) -> Result<(f64, f64, f64), PotentialError> {
        if !x.is_finite() {
            return Err(PotentialError::Domain(x));
        }
        Ok(self.poly.eval_with_derivs(x))
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        self.poly.eval(x)
    }

    #[inline]
    pub fn d1(&self, x: f64) -> f64 {
        self.dpoly.eval(x)
    }

    #[inline]
    pub fn d2(&self, x: f64) -> f64 {
        self.ddpoly.eval(x)
    }

    /// Smallest `W >= 0` with `inf V'' >= -2W`, from the exact critical
    /// points of `V''`.
    pub fn convexity_lower_bound(&self) -> Result<f64, PotentialError> {
        let dd = &self.ddpoly;
        if dd.degree() == 0 {
            return Ok((-0.5 * dd.coeffs()[0]).max(0.0));
        }
        if dd.degree() % 2 == 1 || dd.leading() < 0.0 {
            return Err(PotentialError::Unsupported(
                "V'' is unbounded below".into(),
            ));
        }
        let min = dd
            .derivative()
            .real_roots()
            .into_iter()
            .map(|x| dd.eval(x))
            .fold(f64::INFINITY, f64::min);
        Ok((-0.5 * min).max(0.0))
    }

    /// Growth certificate with `α = 1`.
    pub fn validate(&self) -> Result<GrowthCertificate, PotentialError> {
        self.validate_with_alpha(1.0)
    }

    pub fn validate_with_alpha(&self, alpha: f64) -> Result<GrowthCertificate, PotentialError> {
        if !(alpha > 0.0) {
            return Err(PotentialError::Inadmissible("α must be positive".into()));
        }
        let d = self.poly.degree();
        if d % 2 == 1 {
            return Err(PotentialError::Inadmissible(format!(
                "odd degree {d}: V → -∞ on one side"
            )));
        }
        let slope = 2.0 + alpha;
        let c = self.poly.coeffs();
        // L(t) = lead t^d - Σ_{k<d} |c_k| t^k bounds V(±t) from below for t ≥ 0.
        let mut lower: Vec<f64> = c[..d].iter().map(|v| -v.abs()).collect();
        lower.push(c[d]);
        let lower = Poly::new(lower);
        let mut dl = lower.derivative().coeffs().to_vec();
        dl[0] -= slope;
        let dl = Poly::new(dl);
        // Past the largest real root of L' - (2+α), L' > 2+α > (2+α)/(1+t).
        let mut tail = dl
            .real_roots()
            .last()
            .copied()
            .unwrap_or(0.0)
            .max(1.0)
            .max(self.eval_window.0.abs())
            .max(self.eval_window.1.abs());
        let mut guard = 0;
        while lower.eval(tail) <= slope * (1.0 + tail).ln() {
            tail *= 2.0;
            guard += 1;
            if guard > 60 {
                return Err(PotentialError::Inadmissible(
                    "growth condition fails at every radius".into(),
                ));
            }
        }
        let steps = 20_000usize;
        let h = tail / steps as f64;
        let mut x0 = 0.0;
        for i in (0..=steps).rev() {
            let t = i as f64 * h;
            let bound = slope * (1.0 + t).ln();
            if self.poly.eval(t) <= bound || self.poly.eval(-t) <= bound {
                x0 = (i + 1) as f64 * h;
                break;
            }
        }
        Ok(GrowthCertificate {
            alpha,
            x0,
            tail_radius: tail,
            admissible: true,
        })
    }
}

impl fmt::Display for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.form {
            PotentialForm::Quadratic => write!(f, "quadratic"),
            PotentialForm::QuarticMinus(a) => write!(f, "quartic_minus:{a}"),
            PotentialForm::Polynomial(c) => {
                let parts: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
                write!(f, "poly:[{}]", parts.join(","))
            }
        }
    }
}

impl FromStr for Potential {
    type Err = PotentialError;

    /// Grammar: `poly:[c0,c1,...,cd]`, `quadratic`, `quartic_minus:a`.
    fn from_str(spec: &str) -> Result<Self, Self::Err> {
        let parse_err = |reason: &str| PotentialError::Parse {
            spec: spec.to_string(),
            reason: reason.to_string(),
        };
        let s = spec.trim();
        if s == "quadratic" {
            return Ok(Potential::quadratic());
        }
        if let Some(rest) = s.strip_prefix("quartic_minus:") {
            let a: f64 = rest
                .trim()
                .parse()
                .map_err(|_| parse_err("expected a decimal after `quartic_minus:`"))?;
            return Potential::quartic_minus(a);
        }
        if let Some(rest) = s.strip_prefix("poly:") {
            let inner = rest
                .trim()
                .strip_prefix('[')
                .and_then(|r| r.strip_suffix(']'))
                .ok_or_else(|| parse_err("expected `[c0,c1,...]`"))?;
            let coeffs = inner
                .split(',')
                .map(|t| t.trim().parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| parse_err("coefficients must be decimals"))?;
            return Potential::polynomial(coeffs);
        }
        Err(parse_err("unknown form"))
    }
}

impl Serialize for Potential {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Potential {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let spec = String::deserialize(d)?;
        spec.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn evaluation_examples() {
        let q = Potential::quadratic();
        assert_eq!(q.eval(2.0).unwrap(), (4.0, 4.0, 2.0));
        let p = Potential::quartic_minus(1.0).unwrap();
        assert_eq!(p.eval(0.0).unwrap(), (0.0, 0.0, -2.0));
        let (v, d1, d2) = p.eval(1.0).unwrap();
        assert_relative_eq!(v, -0.75);
        assert_relative_eq!(d1, -1.0);
        assert_relative_eq!(d2, 1.0);
    }

    #[test]
    fn non_finite_point_is_a_domain_error() {
        assert!(matches!(
            Potential::quadratic().eval(f64::NAN),
            Err(PotentialError::Domain(_))
        ));
    }

    #[test]
    fn convexity_deficit_examples() {
        assert_eq!(Potential::quadratic().convexity_lower_bound().unwrap(), 0.0);
        let quartic = Potential::polynomial(vec![0.0, 0.0, 0.0, 0.0, 0.25]).unwrap();
        assert_eq!(quartic.convexity_lower_bound().unwrap(), 0.0);
        let w = Potential::quartic_minus(1.0)
            .unwrap()
            .convexity_lower_bound()
            .unwrap();
        assert_relative_eq!(w, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn convexity_deficit_matches_grid_scan() {
        // V'' = 12x^2 - 6x - 4 + ... for an asymmetric sextic
        let p = Potential::polynomial(vec![0.0, 0.3, -2.0, -1.0, 0.5, 0.0, 0.1]).unwrap();
        let w = p.convexity_lower_bound().unwrap();
        let grid_min = (0..=200_000)
            .map(|i| -10.0 + 20.0 * i as f64 / 200_000.0)
            .map(|x| p.d2(x))
            .fold(f64::INFINITY, f64::min);
        assert!((w - (-0.5 * grid_min).max(0.0)).abs() < 1e-6);
    }

    #[test]
    fn growth_certificates() {
        let cert = Potential::quadratic().validate().unwrap();
        assert!(cert.admissible);
        assert!(cert.x0 <= 3.0);
        let quartic = Potential::quartic_minus(1.0).unwrap().validate().unwrap();
        assert!(quartic.admissible);
        for alpha in [0.1, 0.5, 1.0] {
            assert!(Potential::quadratic().validate_with_alpha(alpha).is_ok());
        }
    }

    #[test]
    fn constant_and_odd_potentials_are_inadmissible() {
        assert!(matches!(
            Potential::polynomial(vec![0.0]),
            Err(PotentialError::Inadmissible(_))
        ));
        let cubic = Potential::polynomial(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert!(matches!(
            cubic.validate(),
            Err(PotentialError::Inadmissible(_))
        ));
        assert!(Potential::polynomial(vec![0.0, 0.0, -1.0]).is_err());
    }

    #[test]
    fn spec_strings_roundtrip() {
        for spec in ["quadratic", "quartic_minus:0.5", "poly:[0,0.5,1]"] {
            let p: Potential = spec.parse().unwrap();
            let again: Potential = p.to_string().parse().unwrap();
            assert_eq!(p.poly(), again.poly());
        }
        assert!("quartic_minus:abc".parse::<Potential>().is_err());
        assert!("poly:1,2".parse::<Potential>().is_err());
        assert!("cubic".parse::<Potential>().is_err());
    }

    proptest! {
        #[test]
        fn derivative_matches_central_difference(
            c in proptest::collection::vec(-2.0f64..2.0, 2..6),
            lead in 0.1f64..2.0,
            x in -5.0f64..5.0,
        ) {
            let mut coeffs = c;
            if coeffs.len() % 2 == 0 { coeffs.push(0.0); }
            coeffs.push(lead);
            let p = Potential::polynomial(coeffs).unwrap();
            let h = 1e-5;
            let fd = (p.value(x + h) - p.value(x - h)) / (2.0 * h);
            let exact = p.d1(x);
            let scale = exact.abs().max(p.value(x).abs()).max(1.0);
            prop_assert!((fd - exact).abs() <= 1e-6 * scale);
        }

        #[test]
        fn zero_deficit_iff_convex(a in -2.0f64..2.0) {
            let p = Potential::quartic_minus(a).unwrap();
            let w = p.convexity_lower_bound().unwrap();
            // V'' = 3x² - 2a
            prop_assert_eq!(w == 0.0, a <= 0.0);
        }

        #[test]
        fn certificate_bound_holds_at_x0(a in -1.0f64..1.5) {
            let p = Potential::quartic_minus(a).unwrap();
            let cert = p.validate().unwrap();
            let bound = (2.0 + cert.alpha) * (1.0 + cert.x0).ln();
            prop_assert!(p.value(cert.x0) > bound && p.value(-cert.x0) > bound);
        }
    }
}
