//! Deterministic ODE integration.
//!
//! Everything downstream (plant simulation, shooting rollouts, the
//! identification flow map) goes through this module. Two paths are provided:
//!
//! * fixed-step explicit Euler / classic RK4 ([`integrate_fixed`]),
//! * an embedded Dormand-Prince 4(5) pair with a standard step controller
//!   ([`integrate_adaptive`]).
//!
//! Both are pure functions of their inputs: identical inputs give bit-identical
//! trajectories, which the CSV golden files downstream rely on.

use crate::error::{Error, Result};

/// Right-hand side of `x' = f(t, x)`.
///
/// Implementations must be deterministic; the output slice has the same
/// length as the input state.
pub trait VectorField: Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()>;
}

/// Wrap a closure as a [`VectorField`].
pub struct FnField<F> {
    dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnField { dim, f }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(f64, &[f64], &mut [f64]) -> Result<()> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        (self.f)(t, x, dx)
    }
}

/// Time grid plus one state sample per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("trajectory is never empty")
    }
    pub fn last_time(&self) -> f64 {
        *self.times.last().expect("trajectory is never empty")
    }
}

/// Sub-step method used by [`integrate_fixed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedMethod {
    Euler,
    Rk4,
}

fn check_finite(t: f64, x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteState { t })
    }
}

fn eval_checked(f: &dyn VectorField, t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
    f.eval(t, x, dx)?;
    check_finite(t, dx)
}

/// One explicit Euler step.
pub fn euler_step(f: &dyn VectorField, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = f.dim();
    let mut k = vec![0.0; n];
    eval_checked(f, t, x, &mut k)?;
    Ok((0..n).map(|i| x[i] + h * k[i]).collect())
}

/// One classic 4th-order Runge-Kutta step.
pub fn rk4_step(f: &dyn VectorField, t: f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let n = f.dim();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];

    eval_checked(f, t, x, &mut k1)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k1[i];
    }
    eval_checked(f, t + 0.5 * h, &tmp, &mut k2)?;
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * h * k2[i];
    }
    eval_checked(f, t + 0.5 * h, &tmp, &mut k3)?;
    for i in 0..n {
        tmp[i] = x[i] + h * k3[i];
    }
    eval_checked(f, t + h, &tmp, &mut k4)?;

    Ok((0..n)
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Fixed-step integration on `[t0, tf]` with spacing `h` (shorter final step).
pub fn integrate_fixed(
    f: &dyn VectorField,
    t0: f64,
    x0: &[f64],
    tf: f64,
    h: f64,
    method: FixedMethod,
) -> Result<Trajectory> {
    if !(tf > t0) {
        return Err(Error::InvalidInput(format!("tf = {tf} must exceed t0 = {t0}")));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("step h = {h} must be positive")));
    }
    check_finite(t0, x0)?;

    let mut times = vec![t0];
    let mut states = vec![x0.to_vec()];
    let mut t = t0;
    let mut x = x0.to_vec();
    while t < tf - 1e-12 * (tf - t0).max(1.0) {
        let step = h.min(tf - t);
        x = match method {
            FixedMethod::Euler => euler_step(f, t, &x, step)?,
            FixedMethod::Rk4 => rk4_step(f, t, &x, step)?,
        };
        check_finite(t + step, &x)?;
        t = if (tf - t) <= h { tf } else { t + step };
        times.push(t);
        states.push(x.clone());
    }
    Ok(Trajectory { times, states })
}

/// Options for [`integrate_adaptive`].
#[derive(Debug, Clone)]
pub struct AdaptiveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Initial step guess; defaults to the full span.
    pub h0: Option<f64>,
    pub max_steps: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        AdaptiveOptions { rtol: 1e-6, atol: 1e-8, h0: None, max_steps: 10_000_000 }
    }
}

impl AdaptiveOptions {
    pub fn with_tol(rtol: f64, atol: f64) -> Self {
        AdaptiveOptions { rtol, atol, ..Default::default() }
    }
}

// Dormand-Prince 4(5) Butcher tableau. The last stage row doubles as the
// 5th-order propagation weights (FSAL: k7 of one step is k1 of the next).
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 6] = [
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] =
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// Adaptive solution: accepted nodes plus the field values there, so that
/// states between nodes can be reconstructed by cubic Hermite interpolation.
#[derive(Debug, Clone)]
pub struct AdaptiveSolution {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub derivs: Vec<Vec<f64>>,
}

impl AdaptiveSolution {
    /// State at `t` by cubic Hermite interpolation between accepted nodes.
    /// `t` must lie inside the integrated span.
    pub fn sample(&self, t: f64) -> Vec<f64> {
        let times = &self.times;
        let n = times.len();
        if t <= times[0] {
            return self.states[0].clone();
        }
        if t >= times[n - 1] {
            return self.states[n - 1].clone();
        }
        // partition_point: first index with times[idx] > t
        let hi = times.partition_point(|&s| s <= t);
        let (i0, i1) = (hi - 1, hi);
        if times[i0] == t {
            return self.states[i0].clone();
        }
        let h = times[i1] - times[i0];
        let s = (t - times[i0]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let dim = self.states[i0].len();
        (0..dim)
            .map(|j| {
                h00 * self.states[i0][j]
                    + h10 * h * self.derivs[i0][j]
                    + h01 * self.states[i1][j]
                    + h11 * h * self.derivs[i1][j]
            })
            .collect()
    }

    pub fn into_trajectory(self) -> Trajectory {
        Trajectory { times: self.times, states: self.states }
    }

    pub fn last_state(&self) -> &[f64] {
        self.states.last().expect("solution is never empty")
    }
}

/// Integrate with the embedded 4(5) pair; returns the accepted nodes.
///
/// Error control uses the mixed norm `sc_i = atol + rtol*max(|x_i|, |x_new_i|)`
/// and the step update `h <- 0.9 h (1/err)^(1/5)` clamped to `[0.2h, 5h]`.
pub fn integrate_adaptive(
    f: &dyn VectorField,
    t0: f64,
    x0: &[f64],
    tf: f64,
    opts: &AdaptiveOptions,
) -> Result<AdaptiveSolution> {
    if !(tf > t0) {
        return Err(Error::InvalidInput(format!("tf = {tf} must exceed t0 = {t0}")));
    }
    if !(opts.rtol > 0.0 && opts.atol > 0.0) {
        return Err(Error::InvalidInput("rtol and atol must be positive".into()));
    }
    check_finite(t0, x0)?;

    let n = f.dim();
    let span = tf - t0;
    let h_min = 1e-14 * span;

    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k: Vec<Vec<f64>> = (0..7).map(|_| vec![0.0; n]).collect();
    eval_checked(f, t, &x, &mut k[0])?;

    let mut times = vec![t0];
    let mut states = vec![x.clone()];
    let mut derivs = vec![k[0].clone()];

    let mut h = opts.h0.unwrap_or(span).min(span);
    let mut x5 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut steps = 0usize;

    while t < tf {
        if steps >= opts.max_steps {
            return Err(Error::MaxStepsExceeded { t, max_steps: opts.max_steps });
        }
        steps += 1;
        h = h.min(tf - t);
        if h < h_min {
            return Err(Error::StepUnderflow { t, h });
        }

        // stages 2..7
        let mut failed = false;
        for s in 0..6 {
            for i in 0..n {
                let mut acc = 0.0;
                for (j, a) in A[s].iter().enumerate().take(s + 1) {
                    acc += a * k[j][i];
                }
                stage[i] = x[i] + h * acc;
            }
            let ts = t + C[s + 1] * h;
            if f.eval(ts, &stage, &mut k[s + 1]).is_err() || !k[s + 1].iter().all(|v| v.is_finite())
            {
                // A stage left the domain of the field (closed-loop laws can
                // blow up just outside the funnel): treat like a too-large
                // step and retry smaller before giving up.
                failed = true;
                break;
            }
        }
        if failed {
            h *= 0.2;
            if h < h_min {
                // re-evaluate to surface the underlying error
                eval_checked(f, t + C[1] * h, &x, &mut stage)?;
                return Err(Error::StepUnderflow { t, h });
            }
            continue;
        }

        let mut err = 0.0;
        for i in 0..n {
            let mut acc5 = 0.0;
            let mut acc_e = 0.0;
            for s in 0..7 {
                acc5 += B5[s] * k[s][i];
                acc_e += (B5[s] - B4[s]) * k[s][i];
            }
            x5[i] = x[i] + h * acc5;
            let sc = opts.atol + opts.rtol * x[i].abs().max(x5[i].abs());
            let e = h * acc_e / sc;
            err += e * e;
        }
        err = (err / n as f64).sqrt();

        if !err.is_finite() {
            h *= 0.2;
            if h < h_min {
                return Err(Error::NonFiniteState { t });
            }
            continue;
        }

        let scale = if err == 0.0 { 5.0 } else { 0.9 * err.powf(-0.2) };
        let scale = scale.clamp(0.2, 5.0);

        if err <= 1.0 {
            t += h;
            check_finite(t, &x5)?;
            x.copy_from_slice(&x5);
            k.swap(0, 6); // FSAL
            times.push(t);
            states.push(x.clone());
            derivs.push(k[0].clone());
        }
        h *= scale;
    }

    // pin the endpoint exactly
    *times.last_mut().unwrap() = tf;
    Ok(AdaptiveSolution { times, states, derivs })
}

/// Adaptive integration returning a trajectory on the accepted nodes merged
/// with the requested sample times (interpolated where they fall inside a step).
pub fn integrate_adaptive_sampled(
    f: &dyn VectorField,
    t0: f64,
    x0: &[f64],
    tf: f64,
    opts: &AdaptiveOptions,
    samples: &[f64],
) -> Result<Trajectory> {
    let sol = integrate_adaptive(f, t0, x0, tf, opts)?;
    let mut times: Vec<f64> = sol.times.clone();
    times.extend(samples.iter().copied().filter(|&s| s >= t0 && s <= tf));
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    times.dedup();
    let states = times.iter().map(|&t| sol.sample(t)).collect();
    Ok(Trajectory { times, states })
}
