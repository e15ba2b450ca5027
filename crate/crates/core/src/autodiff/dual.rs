//! Dual numbers `a + a'ε` with `ε² = 0`, carrying one directional derivative.

use std::ops::{Add, Div, Mul, Neg, Sub};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dual {
    pub value: f64,
    pub deriv: f64,
}

impl Dual {
    #[inline]
    pub const fn new(value: f64, deriv: f64) -> Self {
        Dual { value, deriv }
    }

    /// Seeds a variable with unit derivative.
    #[inline]
    pub const fn variable(value: f64) -> Self {
        Dual { value, deriv: 1.0 }
    }

    #[inline]
    pub const fn constant(value: f64) -> Self {
        Dual { value, deriv: 0.0 }
    }
}

/// Packs values and tangents into duals.
pub fn seed(values: &[f64], tangents: &[f64]) -> Vec<Dual> {
    debug_assert_eq!(values.len(), tangents.len());
    values
        .iter()
        .zip(tangents)
        .map(|(&v, &d)| Dual::new(v, d))
        .collect()
}

/// Splits duals into (values, derivatives).
pub fn unzip(v: &[Dual]) -> (Vec<f64>, Vec<f64>) {
    v.iter().map(|d| (d.value, d.deriv)).unzip()
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.value + o.value, self.deriv + o.deriv)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.value - o.value, self.deriv - o.deriv)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(
            self.value * o.value,
            self.value * o.deriv + self.deriv * o.value,
        )
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.value;
        let q = self.value * inv;
        Dual::new(q, (self.deriv - q * o.deriv) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.value, -self.deriv)
    }
}

impl Add<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: f64) -> Dual {
        Dual::new(self.value + o, self.deriv)
    }
}

impl Sub<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: f64) -> Dual {
        Dual::new(self.value - o, self.deriv)
    }
}

impl Mul<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: f64) -> Dual {
        Dual::new(self.value * o, self.deriv * o)
    }
}

impl Div<f64> for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: f64) -> Dual {
        Dual::new(self.value / o, self.deriv / o)
    }
}

impl Real for Dual {
    #[inline]
    fn cst(v: f64) -> Self {
        Dual::constant(v)
    }
    #[inline]
    fn value(&self) -> f64 {
        self.value
    }
    #[inline]
    fn sqrt(self) -> Self {
        let r = self.value.sqrt();
        // subgradient 0 at the origin
        let d = if r > 0.0 { self.deriv / (2.0 * r) } else { 0.0 };
        Dual::new(r, d)
    }
    #[inline]
    fn sin(self) -> Self {
        let (s, c) = self.value.sin_cos();
        Dual::new(s, c * self.deriv)
    }
    #[inline]
    fn cos(self) -> Self {
        let (s, c) = self.value.sin_cos();
        Dual::new(c, -s * self.deriv)
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.value.exp();
        Dual::new(e, e * self.deriv)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.value.ln(), self.deriv / self.value)
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.value.tanh();
        Dual::new(t, (1.0 - t * t) * self.deriv)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        let r2 = self.value * self.value + x.value * x.value;
        let d = if r2 > 0.0 {
            (x.value * self.deriv - self.value * x.deriv) / r2
        } else {
            0.0
        };
        Dual::new(self.value.atan2(x.value), d)
    }
    #[inline]
    fn detach(self) -> Self {
        Dual::constant(self.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn product_rule() {
        let a = Dual::new(2.0, 3.0);
        let b = Dual::new(5.0, -1.0);
        let p = a * b;
        assert_eq!(p.value, 10.0);
        assert_eq!(p.deriv, 2.0 * -1.0 + 3.0 * 5.0);
    }

    #[test]
    fn quotient_matches_analytic() {
        let x = Dual::variable(1.5);
        let f = (x * x + 1.0) / (x - 0.5);
        let analytic = (2.0 * 1.5 * (1.5 - 0.5) - (1.5 * 1.5 + 1.0)) / (1.0f64 * 1.0);
        assert!((f.deriv - analytic).abs() < 1e-14);
    }

    #[test]
    fn transcendental_derivatives() {
        let x = 0.7;
        let d = Dual::variable(x);
        assert!((d.sin().deriv - x.cos()).abs() < 1e-15);
        assert!((d.cos().deriv + x.sin()).abs() < 1e-15);
        assert!((d.exp().deriv - x.exp()).abs() < 1e-15);
        assert!((d.ln().deriv - 1.0 / x).abs() < 1e-15);
        assert!((d.sqrt().deriv - 0.5 / x.sqrt()).abs() < 1e-15);
        assert!((d.tanh().deriv - (1.0 - x.tanh().powi(2))).abs() < 1e-15);
        let y = Dual::constant(0.3);
        // d/dx atan2(y, x) = -y / (x² + y²)
        assert!((y.atan2(d).deriv + 0.3 / (x * x + 0.09)).abs() < 1e-15);
    }

    #[test]
    fn detach_drops_derivative() {
        let x = Dual::variable(4.0);
        assert_eq!((x * x.detach()).deriv, 4.0);
    }
}
