//! Truncated derivative arithmetic.
//!
//! A [`Jet`] stores the value of a time signal together with its first few
//! time-derivatives along a flow. The error-cascade recursion needs exact
//! derivatives of products, reciprocals and squared norms of such signals;
//! jets give those in closed form (Leibniz rule), so no symbolic machinery
//! or numerical differentiation enters the control path.
//!
//! Jets are stack-allocated and `Copy` - they sit on the innermost loop of
//! every shooting rollout.

/// Highest representable derivative order (relative degree up to 5).
pub const MAX_ORDER: usize = 5;

/// Value plus derivatives: entry `k` is the k-th time-derivative, entry 0 the
/// value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet {
    d: [f64; MAX_ORDER + 1],
    len: u8,
}

// Pascal's triangle up to MAX_ORDER; jet products sit on hot loops.
const BINOM: [[f64; MAX_ORDER + 1]; MAX_ORDER + 1] = {
    let mut t = [[0.0; MAX_ORDER + 1]; MAX_ORDER + 1];
    let mut n = 0;
    while n <= MAX_ORDER {
        t[n][0] = 1.0;
        let mut k = 1;
        while k <= n {
            t[n][k] = t[n - 1][k - 1] + if k <= n - 1 { t[n - 1][k] } else { 0.0 };
            k += 1;
        }
        n += 1;
    }
    t
};

#[inline]
fn binom(n: usize, k: usize) -> f64 {
    BINOM[n][k]
}

impl Jet {
    /// Jet with the given derivative values, `d[0]` first.
    pub fn new(values: Vec<f64>) -> Self {
        Jet::from_slice(&values)
    }

    pub fn from_slice(values: &[f64]) -> Self {
        assert!(
            !values.is_empty() && values.len() <= MAX_ORDER + 1,
            "jet order out of range"
        );
        let mut d = [0.0; MAX_ORDER + 1];
        d[..values.len()].copy_from_slice(values);
        Jet { d, len: values.len() as u8 }
    }

    /// Constant signal: value `v`, all derivatives zero.
    pub fn constant(v: f64, order: usize) -> Self {
        assert!(order <= MAX_ORDER);
        let mut d = [0.0; MAX_ORDER + 1];
        d[0] = v;
        Jet { d, len: (order + 1) as u8 }
    }

    /// Highest derivative stored.
    pub fn order(&self) -> usize {
        self.len as usize - 1
    }

    pub fn value(&self) -> f64 {
        self.d[0]
    }

    /// k-th derivative value.
    pub fn deriv(&self, k: usize) -> f64 {
        debug_assert!(k < self.len as usize);
        self.d[k]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.d[..self.len as usize]
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs().iter().all(|v| v.is_finite())
    }

    /// Jet of the time-derivative signal; drops one order.
    pub fn shift(&self) -> Jet {
        debug_assert!(self.order() >= 1, "cannot differentiate an order-0 jet");
        Jet::from_slice(&self.d[1..self.len as usize])
    }

    /// Truncate to a lower order (no-op when already at or below it).
    pub fn truncate(&self, order: usize) -> Jet {
        let n = (order + 1).min(self.len as usize);
        Jet::from_slice(&self.d[..n])
    }

    pub fn add(&self, rhs: &Jet) -> Jet {
        let n = self.len.min(rhs.len) as usize;
        let mut d = [0.0; MAX_ORDER + 1];
        for k in 0..n {
            d[k] = self.d[k] + rhs.d[k];
        }
        Jet { d, len: n as u8 }
    }

    pub fn sub(&self, rhs: &Jet) -> Jet {
        let n = self.len.min(rhs.len) as usize;
        let mut d = [0.0; MAX_ORDER + 1];
        for k in 0..n {
            d[k] = self.d[k] - rhs.d[k];
        }
        Jet { d, len: n as u8 }
    }

    pub fn scale(&self, s: f64) -> Jet {
        let mut out = *self;
        for v in out.d[..out.len as usize].iter_mut() {
            *v *= s;
        }
        out
    }

    /// Leibniz product, truncated to the shorter operand.
    pub fn mul(&self, rhs: &Jet) -> Jet {
        let n = self.len.min(rhs.len) as usize;
        let mut d = [0.0; MAX_ORDER + 1];
        for (k, o) in d.iter_mut().enumerate().take(n) {
            let mut acc = 0.0;
            for j in 0..=k {
                acc += binom(k, j) * self.d[j] * rhs.d[k - j];
            }
            *o = acc;
        }
        Jet { d, len: n as u8 }
    }

    /// Reciprocal jet 1/f. The value must be nonzero.
    pub fn recip(&self) -> Jet {
        let n = self.len as usize;
        let mut g = [0.0; MAX_ORDER + 1];
        g[0] = 1.0 / self.d[0];
        for k in 1..n {
            // from (f * g)^(k) = 0 for k >= 1
            let mut acc = 0.0;
            for j in 1..=k {
                acc += binom(k, j) * self.d[j] * g[k - j];
            }
            g[k] = -g[0] * acc;
        }
        Jet { d: g, len: n as u8 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    /// Sample jet of exp(a*t) at time t.
    fn exp_jet(a: f64, t: f64, order: usize) -> Jet {
        Jet::new((0..=order).map(|k| a.powi(k as i32) * (a * t).exp()).collect())
    }

    #[test]
    fn product_rule_matches_closed_form() {
        // f = exp(2t), g = exp(-3t); fg = exp(-t), so (fg)^(k) = (-1)^k exp(-t)
        let t = 0.37;
        let f = exp_jet(2.0, t, 3);
        let g = exp_jet(-3.0, t, 3);
        let p = f.mul(&g);
        for k in 0..=3 {
            assert_close(p.deriv(k), (-1.0f64).powi(k as i32) * (-t).exp(), 1e-12);
        }
    }

    #[test]
    fn reciprocal_matches_closed_form() {
        // 1/exp(2t) = exp(-2t)
        let t = 0.11;
        let f = exp_jet(2.0, t, 4);
        let r = f.recip();
        for k in 0..=4 {
            assert_close(r.deriv(k), (-2.0f64).powi(k as i32) * (-2.0 * t).exp(), 1e-12);
        }
    }

    #[test]
    fn recip_is_inverse_of_mul() {
        let f = Jet::new(vec![1.7, -0.3, 2.4, 0.9]);
        let one = f.mul(&f.recip());
        assert_close(one.deriv(0), 1.0, 1e-14);
        for k in 1..=3 {
            assert_close(one.deriv(k), 0.0, 1e-12);
        }
    }

    #[test]
    fn shift_drops_order() {
        let f = Jet::new(vec![1.0, 2.0, 3.0]);
        let df = f.shift();
        assert_eq!(df.order(), 1);
        assert_eq!(df.value(), 2.0);
        assert_eq!(df.deriv(1), 3.0);
    }

    #[test]
    fn constant_has_zero_derivatives() {
        let c = Jet::constant(5.0, 3);
        assert_eq!(c.value(), 5.0);
        assert_eq!(c.deriv(3), 0.0);
    }
}
