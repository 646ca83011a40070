//! Control-affine plant abstraction and the mass-on-car benchmark system.
//!
//! The benchmark is a mass-spring-damper sliding on a ramp that is mounted on
//! a car; the control input is the horizontal force on the car and the output
//! is the horizontal position of the ramp mass. The ramp angle decides the
//! relative degree: `r = 2` for `alpha` in `(0, pi/2)` and `r = 3` for
//! `alpha = 0` (the input then drops out of the second output derivative).
//!
//! Output-derivative jets are hand-derived closed forms; the tests check every
//! formula against finite differences.

use crate::error::{Error, Result};
use crate::jet::Jet;

/// Ramp angles below this count as exactly zero. The relative degree is a
/// structural property, not something to infer numerically mid-run.
pub const ALPHA_ZERO_TOL: f64 = 1e-12;

/// Physical parameters of the mass-on-car system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MassOnCarParams {
    /// Car mass [kg].
    pub m1: f64,
    /// Ramp mass [kg].
    pub m2: f64,
    /// Spring constant [N/m].
    pub k: f64,
    /// Damper constant [N s/m].
    pub d: f64,
    /// Ramp angle [rad], in `[0, pi/2)`.
    pub alpha: f64,
}

impl MassOnCarParams {
    pub fn new(m1: f64, m2: f64, k: f64, d: f64, alpha: f64) -> Result<Self> {
        let p = MassOnCarParams { m1, m2, k, d, alpha };
        p.validate()?;
        Ok(p)
    }

    /// Benchmark values m1 = 4, m2 = 1, k = 2, d = 1 at the given ramp angle.
    pub fn benchmark(alpha: f64) -> Self {
        MassOnCarParams { m1: 4.0, m2: 1.0, k: 2.0, d: 1.0, alpha }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in
            [("m1", self.m1), ("m2", self.m2), ("k", self.k), ("d", self.d)]
        {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} = {v} must be positive")));
            }
        }
        if !(self.alpha >= 0.0 && self.alpha < std::f64::consts::FRAC_PI_2) {
            return Err(Error::InvalidInput(format!(
                "alpha = {} must lie in [0, pi/2)",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Mass-matrix determinant `m2 (m1 + m2 sin^2 alpha)`; positive for valid
    /// parameters.
    pub fn mass_det(&self) -> f64 {
        let s = self.alpha.sin();
        self.m2 * (self.m1 + self.m2 * s * s)
    }
}

/// Relative degree of the mass-on-car output: 3 for `alpha = 0`, else 2.
pub fn relative_degree(alpha: f64) -> usize {
    if alpha.abs() <= ALPHA_ZERO_TOL {
        3
    } else {
        2
    }
}

/// Control-affine plant with output-derivative structure.
///
/// `output_jet` returns the input-free output derivatives (orders `0..r-1`);
/// `drift_top` and `high_gain` split the r-th derivative as
/// `y^(r) = drift_top(z) + high_gain(z) * u`. The shipped plant is
/// single-input single-output; the output is still vector-typed so that the
/// cascade code works with norms throughout.
pub trait Plant: Sync {
    fn state_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn relative_degree(&self) -> usize;
    /// State derivative for state `z` and input `u`.
    fn dynamics(&self, z: &[f64], u: &[f64], dz: &mut [f64]);
    /// Input-free output derivatives, one jet per output component, each of
    /// the requested order. Fails if `order >= r`.
    fn output_jet(&self, z: &[f64], order: usize) -> Result<Vec<Jet>>;
    /// Allocation-free variant of [`Plant::output_jet`]; `out` has
    /// `output_dim` entries.
    fn output_jet_into(&self, z: &[f64], order: usize, out: &mut [Jet]) -> Result<()> {
        let jets = self.output_jet(z, order)?;
        out.copy_from_slice(&jets);
        Ok(())
    }
    /// Input-free part of `y^(r)`.
    fn drift_top(&self, z: &[f64]) -> Vec<f64>;
    /// Coefficient of `u` in `y^(r)` (scalar: SISO plant).
    fn high_gain(&self, z: &[f64]) -> f64;
}

/// The mass-on-car system. State `z = (x, x', s, s')`: car position and
/// velocity, ramp displacement and velocity.
#[derive(Debug, Clone)]
pub struct MassOnCar {
    params: MassOnCarParams,
    r: usize,
    cos_a: f64,
    sin_a: f64,
    det: f64,
}

impl MassOnCar {
    pub fn new(params: MassOnCarParams) -> Result<Self> {
        params.validate()?;
        let r = relative_degree(params.alpha);
        let (alpha, det) = (params.alpha, params.mass_det());
        // alpha = 0 is a structural configuration: use the exact trig values.
        let (cos_a, sin_a) =
            if r == 3 { (1.0, 0.0) } else { (alpha.cos(), alpha.sin()) };
        Ok(MassOnCar { params, r, cos_a, sin_a, det })
    }

    pub fn params(&self) -> &MassOnCarParams {
        &self.params
    }

    pub fn cos_alpha(&self) -> f64 {
        self.cos_a
    }

    /// Output map `y = x + s cos(alpha)`.
    pub fn output(&self, z: &[f64]) -> f64 {
        z[0] + z[2] * self.cos_a
    }

    /// Accelerations `(x'', s'')` solving the mass-matrix equation for the
    /// given state and force.
    pub fn accelerations(&self, z: &[f64], u: f64) -> (f64, f64) {
        let p = &self.params;
        let spring = p.k * z[2] + p.d * z[3];
        let xdd = (p.m2 * u + p.m2 * self.cos_a * spring) / self.det;
        let sdd = (-p.m2 * self.cos_a * u - (p.m1 + p.m2) * spring) / self.det;
        (xdd, sdd)
    }

    /// Mechanical energy `1/2 v^T M v + 1/2 k s^2`; with zero input it is
    /// non-increasing (the damper dissipates).
    pub fn energy(&self, z: &[f64]) -> f64 {
        let p = &self.params;
        let (xd, sd) = (z[1], z[3]);
        0.5 * (p.m1 + p.m2) * xd * xd
            + p.m2 * self.cos_a * xd * sd
            + 0.5 * p.m2 * sd * sd
            + 0.5 * p.k * z[2] * z[2]
    }
}

impl Plant for MassOnCar {
    fn state_dim(&self) -> usize {
        4
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn relative_degree(&self) -> usize {
        self.r
    }

    fn dynamics(&self, z: &[f64], u: &[f64], dz: &mut [f64]) {
        let (xdd, sdd) = self.accelerations(z, u[0]);
        dz[0] = z[1];
        dz[1] = xdd;
        dz[2] = z[3];
        dz[3] = sdd;
    }

    fn output_jet(&self, z: &[f64], order: usize) -> Result<Vec<Jet>> {
        let mut out = [Jet::constant(0.0, 0)];
        self.output_jet_into(z, order, &mut out)?;
        Ok(vec![out[0]])
    }

    fn output_jet_into(&self, z: &[f64], order: usize, out: &mut [Jet]) -> Result<()> {
        if order >= self.r {
            return Err(Error::OrderExceedsRelativeDegree { order, r: self.r });
        }
        let p = &self.params;
        let mut d = [0.0; 3];
        d[0] = z[0] + z[2] * self.cos_a;
        d[1] = z[1] + z[3] * self.cos_a;
        if self.r == 3 {
            // alpha = 0: y'' = -(k s + d s')/m2, still input-free
            d[2] = -(p.k * z[2] + p.d * z[3]) / p.m2;
        }
        out[0] = Jet::from_slice(&d[..=order]);
        Ok(())
    }

    fn drift_top(&self, z: &[f64]) -> Vec<f64> {
        let p = &self.params;
        let spring = p.k * z[2] + p.d * z[3];
        let v = if self.r == 2 {
            // y'' = Gamma u - m1 cos(alpha) (k s + d s') / det
            -p.m1 * self.cos_a * spring / self.det
        } else {
            // y''' = Gamma u - k s'/m2 + d (m1+m2)(k s + d s')/(m1 m2^2)
            -p.k * z[3] / p.m2 + p.d * (p.m1 + p.m2) * spring / (p.m1 * p.m2 * p.m2)
        };
        vec![v]
    }

    fn high_gain(&self, z: &[f64]) -> f64 {
        let _ = z; // constant over the state space for this plant
        let p = &self.params;
        if self.r == 2 {
            self.sin_a * self.sin_a / (p.m1 + p.m2 * self.sin_a * self.sin_a)
        } else {
            p.d / (p.m1 * p.m2)
        }
    }
}

/// Vector field of the plant driven by a fixed control function.
pub struct ControlledPlant<'a, P: Plant, U: Fn(f64, &[f64]) -> Result<Vec<f64>> + Sync> {
    pub plant: &'a P,
    pub control: U,
}

impl<'a, P: Plant, U: Fn(f64, &[f64]) -> Result<Vec<f64>> + Sync> crate::integrate::VectorField
    for ControlledPlant<'a, P, U>
{
    fn dim(&self) -> usize {
        self.plant.state_dim()
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let u = (self.control)(t, x)?;
        self.plant.dynamics(x, &u, dx);
        Ok(())
    }
}
