//! Closed-loop simulation engines and the aggregated performance measure.
//!
//! Two engines: continuous funnel control (the law is evaluated inside the
//! integrator) and its zero-order-hold implementation (the law is sampled
//! every `tau` seconds and held). The ZOH engine deliberately keeps running
//! after a funnel exit - degraded sampled-data behaviour is exactly what the
//! sweep scenarios study - and reports the first violation time instead.

use crate::error::{Error, Result};
use crate::fmpc::StageCost;
use crate::funnel::{
    control_from_cascade, error_cascade, error_cascade_raw, ErrorCascade, FunnelSpec,
    ReferenceSignal,
};
use crate::integrate::{integrate_adaptive, AdaptiveOptions, FnField};
use crate::plant::Plant;

/// Tuning for the simulation engines.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Output grid spacing for continuous runs [s].
    pub grid: f64,
    /// Funnel-margin probes per hold interval (ZOH runs).
    pub intersample_checks: usize,
    /// Store the probe points as record rows too.
    pub record_intersample: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            rtol: 1e-9,
            atol: 1e-12,
            grid: 1e-3,
            intersample_checks: 10,
            record_intersample: true,
        }
    }
}

impl SimOptions {
    fn adaptive(&self) -> AdaptiveOptions {
        AdaptiveOptions::with_tol(self.rtol, self.atol)
    }
}

/// Time-stamped closed-loop trajectory with everything the funnel analysis
/// needs per sample: state, output, reference, auxiliary errors, gains,
/// funnel boundaries, control and boundary margin.
#[derive(Debug, Clone)]
pub struct SimRecord {
    /// Relative degree (number of cascade levels).
    pub r: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub outputs: Vec<Vec<f64>>,
    pub references: Vec<Vec<f64>>,
    /// Signed auxiliary errors per level (single-output plant).
    pub errors: Vec<Vec<f64>>,
    pub gains: Vec<Vec<f64>>,
    pub bounds: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub margins: Vec<f64>,
    /// True iff the margin stayed positive at every evaluated point after the
    /// start and the run completed.
    pub feasible: bool,
    /// Smallest margin seen anywhere (rows and inter-sample probes).
    pub min_margin: f64,
    /// First time the margin was non-positive, if any.
    pub first_violation: Option<f64>,
    /// Set when the run had to stop early (state blow-up inside a hold).
    pub truncated_at: Option<f64>,
}

impl SimRecord {
    pub(crate) fn new(r: usize) -> Self {
        SimRecord {
            r,
            times: Vec::new(),
            states: Vec::new(),
            outputs: Vec::new(),
            references: Vec::new(),
            errors: Vec::new(),
            gains: Vec::new(),
            bounds: Vec::new(),
            controls: Vec::new(),
            margins: Vec::new(),
            feasible: true,
            min_margin: f64::INFINITY,
            first_violation: None,
            truncated_at: None,
        }
    }

    pub(crate) fn push_row(
        &mut self,
        plant: &dyn Plant,
        t: f64,
        z: &[f64],
        refsig: &ReferenceSignal,
        cascade: &ErrorCascade,
        u: Vec<f64>,
    ) {
        let y = plant
            .output_jet(z, 0)
            .map(|jets| jets.iter().map(|j| j.value()).collect())
            .unwrap_or_else(|_| vec![f64::NAN]);
        self.times.push(t);
        self.states.push(z.to_vec());
        self.outputs.push(y);
        self.references.push(vec![refsig.value(t)]);
        self.errors.push(cascade.errors.iter().map(|e| e[0]).collect());
        self.gains.push(cascade.gains.clone());
        self.bounds.push(cascade.bounds.clone());
        self.controls.push(u);
        self.margins.push(cascade.margin());
    }

    pub(crate) fn note_margin(&mut self, t: f64, t0: f64, margin: f64) {
        if margin < self.min_margin {
            self.min_margin = margin;
        }
        if t > t0 && margin <= 0.0 && self.first_violation.is_none() {
            self.first_violation = Some(t);
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().expect("record is never empty")
    }

    /// Smallest and largest applied control value.
    pub fn control_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for u in &self.controls {
            for &v in u {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        (lo, hi)
    }

    pub fn control_range_width(&self) -> f64 {
        let (lo, hi) = self.control_range();
        hi - lo
    }

    /// Index of the row at time `t` (within `1e-9`), if present.
    pub fn row_at(&self, t: f64) -> Option<usize> {
        let idx = self.times.partition_point(|&s| s < t - 1e-9);
        if idx < self.times.len() && (self.times[idx] - t).abs() <= 1e-9 {
            Some(idx)
        } else {
            None
        }
    }
}

/// Uniform sample times `t0, t0+g, ..., t_end` (endpoint always included).
fn uniform_grid(t0: f64, t_end: f64, g: f64) -> Vec<f64> {
    let n = ((t_end - t0) / g - 1e-9).floor() as usize + 1;
    let mut ts: Vec<f64> = (0..n).map(|i| t0 + i as f64 * g).collect();
    ts.push(t_end);
    ts
}

/// Simulate the continuous-time funnel-controlled closed loop on
/// `[t0, t_end]`, recording on a uniform grid (`opts.grid`).
///
/// The initial state must be strictly interior to every funnel; a funnel
/// violation during integration is an error (by construction it cannot occur
/// for a feasible setup).
pub fn simulate_fc_continuous(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t0: f64,
    z0: &[f64],
    t_end: f64,
    opts: &SimOptions,
) -> Result<SimRecord> {
    error_cascade(plant, spec, refsig, t0, z0)?;

    let field = FnField::new(plant.state_dim(), |t, x: &[f64], dx: &mut [f64]| {
        let cascade = error_cascade(plant, spec, refsig, t, x)?;
        let u = control_from_cascade(spec, &cascade);
        plant.dynamics(x, &u, dx);
        Ok(())
    });
    let sol = integrate_adaptive(&field, t0, z0, t_end, &opts.adaptive())?;

    let mut rec = SimRecord::new(plant.relative_degree());
    for t in uniform_grid(t0, t_end, opts.grid) {
        let z = sol.sample(t);
        let cascade = error_cascade_raw(plant, spec, refsig, t, &z)?;
        let u = control_from_cascade(spec, &cascade);
        rec.note_margin(t, t0, cascade.margin());
        rec.push_row(plant, t, &z, refsig, &cascade, u);
    }
    rec.feasible = rec.first_violation.is_none();
    Ok(rec)
}

/// Simulate the zero-order-hold funnel controller: `u(t) = u_FC(k tau)` on
/// `[k tau, (k+1) tau)`, with the law evaluated from the exact state at each
/// sampling instant. The plant is integrated adaptively inside each hold
/// interval and the funnel margin is probed between samples.
///
/// A funnel exit does not abort the run; the record carries the first
/// violation time and `feasible = false`. Only a state blow-up truncates.
pub fn simulate_fc_zoh(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t0: f64,
    z0: &[f64],
    t_end: f64,
    tau: f64,
    opts: &SimOptions,
) -> Result<SimRecord> {
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("tau = {tau} must be positive")));
    }
    if !(t_end > t0) {
        return Err(Error::InvalidInput("t_end must exceed t0".into()));
    }
    // strict interiority required at the start only
    error_cascade(plant, spec, refsig, t0, z0)?;

    // Sample times are t0 + k*tau computed multiplicatively, so a recorded
    // run and a flow-map chain replaying the recorded controls go through
    // bit-identical integrations. A non-multiple t_end adds one partial hold.
    let steps_f = (t_end - t0) / tau;
    let whole = (steps_f - steps_f.round()).abs() <= 1e-9 * steps_f.max(1.0);
    let k_last = if whole {
        (steps_f.round() as usize).max(1)
    } else {
        steps_f.floor() as usize + 1
    };

    let mut rec = SimRecord::new(plant.relative_degree());
    let mut z = z0.to_vec();
    let adaptive = opts.adaptive();

    for k in 0..=k_last {
        let t = if !whole && k == k_last { t_end } else { t0 + k as f64 * tau };
        let cascade = error_cascade_raw(plant, spec, refsig, t, &z)?;
        let u = control_from_cascade(spec, &cascade);
        rec.note_margin(t, t0, cascade.margin());
        rec.push_row(plant, t, &z, refsig, &cascade, u.clone());

        if k == k_last {
            break;
        }
        if !u.iter().all(|v| v.is_finite()) {
            rec.truncated_at = Some(t);
            break;
        }

        let t_next = if !whole && k + 1 == k_last { t_end } else { t + tau };
        let field = FnField::new(plant.state_dim(), |_, x: &[f64], dx: &mut [f64]| {
            plant.dynamics(x, &u, dx);
            Ok(())
        });
        let sol = match integrate_adaptive(&field, t, &z, t_next, &adaptive) {
            Ok(s) => s,
            Err(_) => {
                rec.truncated_at = Some(t);
                break;
            }
        };

        let m = opts.intersample_checks;
        for j in 1..=m {
            let tp = t + (t_next - t) * j as f64 / (m + 1) as f64;
            let zp = sol.sample(tp);
            let c = error_cascade_raw(plant, spec, refsig, tp, &zp)?;
            rec.note_margin(tp, t0, c.margin());
            if opts.record_intersample {
                rec.push_row(plant, tp, &zp, refsig, &c, u.clone());
            }
        }

        z = sol.last_state().to_vec();
    }

    rec.feasible = rec.first_violation.is_none() && rec.truncated_at.is_none();
    Ok(rec)
}

/// Aggregate the stage cost over the sample instants `t0 + i*delta`,
/// `i = 0..=(t_end-t0)/delta`, as a bare sum (no `delta` weighting).
pub fn performance_measure(record: &SimRecord, cost: &StageCost, delta: f64) -> Result<f64> {
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta = {delta} must be positive")));
    }
    let t0 = record.times[0];
    let span = record.t_end() - t0;
    let n = (span / delta).round() as usize;

    let mut total = 0.0;
    for i in 0..=n {
        let target = t0 + i as f64 * delta;
        let row = record
            .row_at(target)
            .ok_or(Error::GridMismatch { t: target, delta })?;
        total += cost.eval_record_row(record, row);
    }
    Ok(total)
}
