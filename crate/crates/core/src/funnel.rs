//! Performance funnels, reference signals and the funnel error cascade.
//!
//! A funnel at level `i` constrains the auxiliary error `e_i` to
//! `||e_i(t)|| < 1/phi_i(t)`. The boundary family is fixed to
//! `1/phi(t) = a + b exp(-c t)`, which covers every funnel used by the
//! benchmark scenarios and has exact derivatives of all orders - the cascade
//! needs those as jets.
//!
//! The cascade itself is the recursion
//!
//! ```text
//! e_0 = y - y_ref,   e_{i+1} = e_i' + k_i e_i,   k_i = 1/(1 - phi_i^2 ||e_i||^2)
//! ```
//!
//! evaluated with jet arithmetic so that every `e_i'` is analytic: the chain
//! rule terms like `k_i' = k_i^2 (2 phi_i phi_i' ||e_i||^2 + 2 phi_i^2 <e_i, e_i'>)`
//! fall out of the product/reciprocal rules. All required output derivatives
//! are input-free by the relative-degree structure, so the cascade is a pure
//! function of `(t, z)`.

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::plant::Plant;

/// One funnel level with boundary `a + b exp(-c t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FunnelLevel {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Treat the boundary as infinite at exactly `t = 0`: the level imposes
    /// no constraint there (any initial error is admissible) and contributes
    /// gain 1. For `t > 0` the exponential boundary applies as usual.
    pub pole_at_zero: bool,
}

impl FunnelLevel {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        FunnelLevel { a, b, c, pole_at_zero: false }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0) {
            return Err(Error::InvalidInput(format!("funnel a = {} must be positive", self.a)));
        }
        if !(self.b >= 0.0) || !(self.c >= 0.0) {
            return Err(Error::InvalidInput(
                "funnel b and c must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Funnel functions for all cascade levels plus the controller sign.
#[derive(Debug, Clone, PartialEq)]
pub struct FunnelSpec {
    levels: Vec<FunnelLevel>,
    /// Controller sign; -1 for positive-definite high gain.
    pub sigma: f64,
}

impl FunnelSpec {
    pub fn new(levels: Vec<FunnelLevel>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidInput("funnel spec needs at least one level".into()));
        }
        for l in &levels {
            l.validate()?;
        }
        Ok(FunnelSpec { levels, sigma: -1.0 })
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, i: usize) -> &FunnelLevel {
        &self.levels[i]
    }

    /// Funnel boundary `1/phi_i(t)`; infinite at `t = 0` for pole levels.
    pub fn boundary(&self, i: usize, t: f64) -> f64 {
        let l = &self.levels[i];
        if l.pole_at_zero && t == 0.0 {
            return f64::INFINITY;
        }
        l.a + l.b * (-l.c * t).exp()
    }

    /// Jet of the boundary `a + b exp(-c t)` up to the given order.
    pub fn boundary_jet(&self, i: usize, t: f64, order: usize) -> Jet {
        let l = &self.levels[i];
        let e = l.b * (-l.c * t).exp();
        let mut d = Vec::with_capacity(order + 1);
        d.push(l.a + e);
        let mut pow = 1.0;
        for _ in 1..=order {
            pow *= -l.c;
            d.push(pow * e);
        }
        Jet::new(d)
    }

    /// Jet of `phi_i = 1/boundary`; zero jet at `t = 0` for pole levels
    /// (the constraint is inactive and the gain is exactly 1 there).
    pub fn phi_jet(&self, i: usize, t: f64, order: usize) -> Jet {
        let l = &self.levels[i];
        if l.pole_at_zero && t == 0.0 {
            return Jet::constant(0.0, order);
        }
        self.boundary_jet(i, t, order).recip()
    }
}

/// Reference signal with analytic derivatives of every order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReferenceSignal {
    Constant { value: f64 },
    Cosine { amplitude: f64, omega: f64 },
}

impl ReferenceSignal {
    /// Default tracking target used by the benchmark scenarios.
    pub fn cosine() -> Self {
        ReferenceSignal::Cosine { amplitude: 1.0, omega: 1.0 }
    }

    pub fn zero() -> Self {
        ReferenceSignal::Constant { value: 0.0 }
    }

    pub fn dim(&self) -> usize {
        1
    }

    pub fn value(&self, t: f64) -> f64 {
        self.jet(t, 0)[0].value()
    }

    /// Jets of all output components up to `order`.
    pub fn jet(&self, t: f64, order: usize) -> Vec<Jet> {
        let mut out = [Jet::constant(0.0, 0)];
        self.jet_into(t, order, &mut out);
        vec![out[0]]
    }

    /// Allocation-free variant of [`ReferenceSignal::jet`].
    pub fn jet_into(&self, t: f64, order: usize, out: &mut [Jet]) {
        match *self {
            ReferenceSignal::Constant { value } => out[0] = Jet::constant(value, order),
            ReferenceSignal::Cosine { amplitude, omega } => {
                // d^k/dt^k A cos(wt) = A w^k cos(wt + k pi/2)
                let mut d = [0.0; crate::jet::MAX_ORDER + 1];
                let mut wk = 1.0;
                for (k, dk) in d.iter_mut().enumerate().take(order + 1) {
                    *dk = amplitude
                        * wk
                        * (omega * t + k as f64 * std::f64::consts::FRAC_PI_2).cos();
                    wk *= omega;
                }
                out[0] = Jet::from_slice(&d[..=order]);
            }
        }
    }
}

/// Result of evaluating the cascade at one `(t, z)`.
#[derive(Debug, Clone)]
pub struct ErrorCascade {
    pub t: f64,
    /// `errors[i]` is the auxiliary error vector `e_i` (one entry per output).
    pub errors: Vec<Vec<f64>>,
    /// Euclidean norms `||e_i||`.
    pub norms: Vec<f64>,
    /// Gains `k_i`.
    pub gains: Vec<f64>,
    /// Funnel boundaries `1/phi_i(t)`.
    pub bounds: Vec<f64>,
    /// Jets of each error component: `jets[i][j]` has order `r-1-i`.
    pub jets: Vec<Vec<Jet>>,
    /// Strict interiority: `phi_i(t) ||e_i|| < 1` held at every level.
    pub valid: bool,
}

impl ErrorCascade {
    /// Smallest distance to a funnel boundary, `min_i (1/phi_i - ||e_i||)`.
    /// Negative once any level has left its funnel.
    pub fn margin(&self) -> f64 {
        self.bounds
            .iter()
            .zip(&self.norms)
            .map(|(b, n)| b - n)
            .fold(f64::INFINITY, f64::min)
    }

    /// Level attaining the margin (ignoring infinite boundaries).
    pub fn margin_level(&self) -> usize {
        let mut best = 0;
        let mut bestv = f64::INFINITY;
        for (i, (b, n)) in self.bounds.iter().zip(&self.norms).enumerate() {
            let m = b - n;
            if m < bestv {
                bestv = m;
                best = i;
            }
        }
        best
    }
}

fn cascade_impl(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t: f64,
    z: &[f64],
    strict: bool,
) -> Result<ErrorCascade> {
    let r = plant.relative_degree();
    debug_assert_eq!(spec.num_levels(), r, "funnel levels must match relative degree");
    let p = plant.output_dim();

    let y_jets = plant.output_jet(z, r - 1)?;
    let ref_jets = refsig.jet(t, r - 1);
    let mut e: Vec<Jet> = (0..p).map(|j| y_jets[j].sub(&ref_jets[j])).collect();

    let mut errors = Vec::with_capacity(r);
    let mut norms = Vec::with_capacity(r);
    let mut gains = Vec::with_capacity(r);
    let mut bounds = Vec::with_capacity(r);
    let mut jets = Vec::with_capacity(r);
    let mut valid = true;

    for i in 0..r {
        let order = r - 1 - i;
        let phi = spec.phi_jet(i, t, order);
        // squared norm as a jet
        let mut n2 = Jet::constant(0.0, order);
        for ej in &e {
            n2 = n2.add(&ej.mul(ej));
        }
        let w = Jet::constant(1.0, order).sub(&phi.mul(&phi).mul(&n2));
        let bound = spec.boundary(i, t);
        let norm = n2.value().max(0.0).sqrt();

        if w.value() <= 0.0 {
            valid = false;
            if strict {
                return Err(Error::FunnelViolation { level: i, t, margin: bound - norm });
            }
        }

        let k = if w.value() != 0.0 {
            w.recip()
        } else {
            Jet::constant(f64::INFINITY, order)
        };

        errors.push(e.iter().map(|ej| ej.value()).collect());
        norms.push(norm);
        gains.push(k.value());
        bounds.push(bound);
        jets.push(e.clone());

        if i + 1 < r {
            e = e.iter().map(|ej| ej.shift().add(&k.mul(ej))).collect();
        }
    }

    Ok(ErrorCascade { t, errors, norms, gains, bounds, jets, valid })
}

/// Most funnel levels any shipped plant needs (relative degree up to 5).
pub const MAX_LEVELS: usize = 5;

/// Cascade values without the jet payload. Stack-only; this sits on the
/// innermost loop of every shooting rollout.
#[derive(Debug, Clone, Copy)]
pub struct LeanCascade {
    pub r: usize,
    pub norms: [f64; MAX_LEVELS],
    pub gains: [f64; MAX_LEVELS],
    pub bounds: [f64; MAX_LEVELS],
    /// Value of the last auxiliary error's first component (SISO control law).
    pub last_error: f64,
    pub valid: bool,
}

impl LeanCascade {
    pub fn margin(&self) -> f64 {
        (0..self.r).map(|i| self.bounds[i] - self.norms[i]).fold(f64::INFINITY, f64::min)
    }
}

/// Gains/norms/bounds of the cascade at `(t, z)` without building the full
/// [`ErrorCascade`]. Never fails on funnel exit; check `valid`.
pub fn cascade_lean(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t: f64,
    z: &[f64],
) -> Result<LeanCascade> {
    const MAX_OUTPUTS: usize = 4;
    let r = plant.relative_degree();
    debug_assert!(r <= MAX_LEVELS);
    let p = plant.output_dim();
    debug_assert!(p <= MAX_OUTPUTS);

    let mut y_jets = [Jet::constant(0.0, 0); MAX_OUTPUTS];
    let mut ref_jets = [Jet::constant(0.0, 0); MAX_OUTPUTS];
    plant.output_jet_into(z, r - 1, &mut y_jets[..p])?;
    refsig.jet_into(t, r - 1, &mut ref_jets[..p]);
    let mut e = [Jet::constant(0.0, 0); MAX_OUTPUTS];
    for j in 0..p {
        e[j] = y_jets[j].sub(&ref_jets[j]);
    }

    let mut out = LeanCascade {
        r,
        norms: [0.0; MAX_LEVELS],
        gains: [0.0; MAX_LEVELS],
        bounds: [0.0; MAX_LEVELS],
        last_error: 0.0,
        valid: true,
    };

    for i in 0..r {
        let order = r - 1 - i;
        let phi = spec.phi_jet(i, t, order);
        let mut n2 = Jet::constant(0.0, order);
        for ej in &e[..p] {
            n2 = n2.add(&ej.mul(ej));
        }
        let w = Jet::constant(1.0, order).sub(&phi.mul(&phi).mul(&n2));
        out.bounds[i] = spec.boundary(i, t);
        out.norms[i] = n2.value().max(0.0).sqrt();
        if w.value() <= 0.0 {
            out.valid = false;
        }
        let k = if w.value() != 0.0 {
            w.recip()
        } else {
            Jet::constant(f64::INFINITY, order)
        };
        out.gains[i] = k.value();
        if i + 1 < r {
            for ej in e[..p].iter_mut() {
                *ej = ej.shift().add(&k.mul(ej));
            }
        } else {
            out.last_error = e[0].value();
        }
    }
    Ok(out)
}

/// Evaluate the cascade, failing with [`Error::FunnelViolation`] unless the
/// state is strictly interior at every level.
pub fn error_cascade(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t: f64,
    z: &[f64],
) -> Result<ErrorCascade> {
    cascade_impl(plant, spec, refsig, t, z, true)
}

/// Evaluate the cascade without the interiority guard. Gains computed outside
/// the funnel follow the raw formula (they turn negative); used to keep
/// recording through a sampled-data funnel exit.
pub fn error_cascade_raw(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t: f64,
    z: &[f64],
) -> Result<ErrorCascade> {
    cascade_impl(plant, spec, refsig, t, z, false)
}

/// Funnel control law `u = sigma k_{r-1} e_{r-1}` at `(t, z)`.
pub fn funnel_control(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t: f64,
    z: &[f64],
) -> Result<Vec<f64>> {
    let cascade = error_cascade(plant, spec, refsig, t, z)?;
    Ok(control_from_cascade(spec, &cascade))
}

/// Control value implied by an already-evaluated cascade.
pub fn control_from_cascade(spec: &FunnelSpec, cascade: &ErrorCascade) -> Vec<f64> {
    let last = cascade.errors.len() - 1;
    let k = cascade.gains[last];
    cascade.errors[last].iter().map(|e| spec.sigma * k * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{MassOnCar, MassOnCarParams};

    const FRAC_PI_4: f64 = std::f64::consts::FRAC_PI_4;

    /// Funnels used by the relative-degree-two benchmark runs.
    pub(crate) fn funnels_r2() -> FunnelSpec {
        FunnelSpec::new(vec![FunnelLevel::new(0.1, 5.0, 2.0), FunnelLevel::new(0.5, 10.0, 2.0)])
            .unwrap()
    }

    fn plant_r2() -> MassOnCar {
        MassOnCar::new(MassOnCarParams::benchmark(FRAC_PI_4)).unwrap()
    }

    #[test]
    fn boundary_values() {
        let spec = funnels_r2();
        assert!((spec.boundary(0, 0.0) - 5.1).abs() < 1e-15);
        assert_eq!(spec.boundary(0, 300.0), 0.1); // exp underflows to 0
        let flat = FunnelSpec::new(vec![FunnelLevel::new(0.7, 0.0, 3.0)]).unwrap();
        let jet = flat.boundary_jet(0, 1.3, 3);
        assert_eq!(jet.coeffs(), &[0.7, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn boundary_jet_derivatives() {
        let spec = funnels_r2();
        // d/dt (0.1 + 5 e^{-2t}) = -10 e^{-2t}
        let jet = spec.boundary_jet(0, 0.25, 2);
        let e = (-0.5f64).exp();
        assert!((jet.deriv(1) + 10.0 * e).abs() < 1e-14);
        assert!((jet.deriv(2) - 20.0 * e).abs() < 1e-14);
    }

    #[test]
    fn pole_level_is_free_at_zero() {
        let mut l = FunnelLevel::new(0.1, 5.0, 2.0);
        l.pole_at_zero = true;
        let spec = FunnelSpec::new(vec![l]).unwrap();
        assert_eq!(spec.boundary(0, 0.0), f64::INFINITY);
        assert_eq!(spec.phi_jet(0, 0.0, 2).coeffs(), &[0.0, 0.0, 0.0]);
        assert!(spec.boundary(0, 1e-9).is_finite());
    }

    #[test]
    fn perfect_tracking_gives_unit_gains() {
        let plant = plant_r2();
        let spec = funnels_r2();
        let refsig = ReferenceSignal::zero();
        let c = error_cascade(&plant, &spec, &refsig, 0.0, &[0.0; 4]).unwrap();
        assert_eq!(c.errors, vec![vec![0.0], vec![0.0]]);
        assert_eq!(c.gains, vec![1.0, 1.0]);
        assert!(c.valid);
        let u = funnel_control(&plant, &spec, &refsig, 0.0, &[0.0; 4]).unwrap();
        assert_eq!(u, vec![0.0]);
        assert!((c.margin() - 5.1).abs() < 1e-15);
    }

    #[test]
    fn gain_formula_value() {
        // place e_0 at 60% of the boundary: k_0 = 1/(1-0.36)
        let plant = plant_r2();
        let spec = funnels_r2();
        let refsig = ReferenceSignal::zero();
        let e0 = 0.6 * spec.boundary(0, 0.0);
        let c = error_cascade(&plant, &spec, &refsig, 0.0, &[e0, 0.0, 0.0, 0.0]).unwrap();
        assert!((c.gains[0] - 1.5625).abs() < 1e-12);
    }

    #[test]
    fn control_value_on_manufactured_state() {
        // flat unit boundary at level 1, e_1 = 0.5 -> u = -(1/0.75) * 0.5
        let plant = plant_r2();
        let spec = FunnelSpec::new(vec![
            FunnelLevel::new(5.0, 0.0, 0.0),
            FunnelLevel::new(1.0, 0.0, 0.0),
        ])
        .unwrap();
        let refsig = ReferenceSignal::zero();
        let u = funnel_control(&plant, &spec, &refsig, 0.0, &[0.0, 0.5, 0.0, 0.0]).unwrap();
        assert!((u[0] - (-0.5 / 0.75)).abs() < 1e-12);
    }

    #[test]
    fn control_opposes_last_error() {
        let plant = plant_r2();
        let spec = funnels_r2();
        let refsig = ReferenceSignal::cosine();
        for &z1 in &[0.4, -0.7, 1.2] {
            let z = [z1, 0.1, -0.2, 0.0];
            if let Ok(c) = error_cascade(&plant, &spec, &refsig, 0.5, &z) {
                let u = control_from_cascade(&spec, &c);
                let e_last = c.errors[1][0];
                if e_last != 0.0 {
                    assert!(u[0] * e_last <= 0.0, "u must oppose e_(r-1)");
                }
            }
        }
    }

    #[test]
    fn violation_carries_level_and_margin() {
        let plant = plant_r2();
        let spec = funnels_r2();
        let refsig = ReferenceSignal::zero();
        // e_0 = 6 > 5.1 at t = 0
        let err = error_cascade(&plant, &spec, &refsig, 0.0, &[6.0, 0.0, 0.0, 0.0]).unwrap_err();
        match err {
            Error::FunnelViolation { level, margin, .. } => {
                assert_eq!(level, 0);
                assert!(margin <= 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
        let raw = error_cascade_raw(&plant, &spec, &refsig, 0.0, &[6.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(!raw.valid);
        assert!(raw.margin() < 0.0);
        assert!(raw.gains[0] < 0.0);
    }

    #[test]
    fn r2_matches_direct_state_formulas() {
        // direct formulas: E_0 = h(z) - y_ref, E_1 = L_f h(z) - y_ref' + K_0 E_0
        let plant = plant_r2();
        let spec = funnels_r2();
        let refsig = ReferenceSignal::cosine();
        for (i, &t) in [0.0, 0.3, 1.7, 6.2].iter().enumerate() {
            let z = [0.2 * i as f64, -0.1, 0.05 * i as f64, 0.15];
            // the formulas hold outside the funnel too; use the raw evaluator
            let c = error_cascade_raw(&plant, &spec, &refsig, t, &z).unwrap();
            let cos_a = plant.cos_alpha();
            let y = z[0] + z[2] * cos_a;
            let lfh = z[1] + z[3] * cos_a;
            let rj = refsig.jet(t, 1);
            let e0 = y - rj[0].value();
            let phi0 = 1.0 / spec.boundary(0, t);
            let k0 = 1.0 / (1.0 - phi0 * phi0 * e0 * e0);
            let e1 = lfh - rj[0].deriv(1) + k0 * e0;
            assert!((c.errors[0][0] - e0).abs() < 1e-12);
            assert!((c.gains[0] - k0).abs() < 1e-12);
            assert!((c.errors[1][0] - e1).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_monotone_under_error_scaling() {
        let plant = plant_r2();
        let spec = funnels_r2();
        let refsig = ReferenceSignal::zero();
        let c = error_cascade(&plant, &spec, &refsig, 0.2, &[1.0, 0.3, -0.4, 0.1]).unwrap();
        let mut scaled = c.clone();
        for (ns, es) in scaled.norms.iter_mut().zip(scaled.errors.iter_mut()) {
            *ns *= 0.5;
            for e in es.iter_mut() {
                *e *= 0.5;
            }
        }
        assert!(scaled.margin() >= c.margin());
    }

    #[test]
    fn gain_blows_up_towards_boundary() {
        let spec = funnels_r2();
        let plant = plant_r2();
        let refsig = ReferenceSignal::zero();
        let bound = spec.boundary(0, 0.0);
        let mut prev = 0.0;
        for &frac in &[0.0, 0.5, 0.9, 0.99, 0.999] {
            let z = [frac * bound, 0.0, 0.0, 0.0];
            let c = error_cascade_raw(&plant, &spec, &refsig, 0.0, &z).unwrap();
            assert!(c.gains[0] >= 1.0);
            assert!(c.gains[0] > prev || frac == 0.0);
            prev = c.gains[0];
        }
        assert!(prev > 500.0);
    }

    #[test]
    fn lean_cascade_matches_full() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for &alpha in &[FRAC_PI_4, 0.0] {
            let plant = MassOnCar::new(MassOnCarParams::benchmark(alpha)).unwrap();
            let mut levels =
                vec![FunnelLevel::new(0.1, 5.0, 2.0), FunnelLevel::new(0.5, 10.0, 2.0)];
            if plant.relative_degree() == 3 {
                levels.push(FunnelLevel::new(0.05, 1.4, 1.0));
            }
            let spec = FunnelSpec::new(levels).unwrap();
            let refsig = ReferenceSignal::cosine();
            for _ in 0..200 {
                let t = rng.gen_range(0.0..8.0);
                let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let full = error_cascade_raw(&plant, &spec, &refsig, t, &z).unwrap();
                let lean = cascade_lean(&plant, &spec, &refsig, t, &z).unwrap();
                assert_eq!(full.valid, lean.valid);
                for i in 0..plant.relative_degree() {
                    assert_eq!(full.norms[i], lean.norms[i]);
                    assert_eq!(full.gains[i], lean.gains[i]);
                    assert_eq!(full.bounds[i], lean.bounds[i]);
                }
                assert_eq!(full.errors.last().unwrap()[0], lean.last_error);
            }
        }
    }

    #[test]
    fn reference_jets_are_exact() {
        let r = ReferenceSignal::Cosine { amplitude: 2.0, omega: 3.0 };
        let t = 0.4;
        let j = &r.jet(t, 3)[0];
        assert!((j.value() - 2.0 * (3.0 * t).cos()).abs() < 1e-15);
        assert!((j.deriv(1) + 6.0 * (3.0 * t).sin()).abs() < 1e-14);
        assert!((j.deriv(2) + 18.0 * (3.0 * t).cos()).abs() < 1e-13);
        assert!((j.deriv(3) - 54.0 * (3.0 * t).sin()).abs() < 1e-13);
    }
}
