//! Learning phase: excite the plant with the (model-free) funnel controller,
//! record sampled input/output data, then fit the mass-on-car parameters and
//! the initial state by box-constrained least squares.
//!
//! The predicted output chains the exact zero-order-hold flow map: each hold
//! interval is integrated adaptively at tight tolerances, so the fitting
//! error is dominated by the optimizer, not the integrator. The optimizer is
//! multistart Nelder-Mead with box projection - the objective is nonconvex in
//! the ramp angle and the initial state - followed by a local polish of the
//! best start. Deterministic for a fixed seed.

use crate::error::{Error, Result};
use crate::funnel::{FunnelSpec, ReferenceSignal};
use crate::integrate::{integrate_adaptive, AdaptiveOptions, FnField};
use crate::opt::{nelder_mead_box, Box9, NelderMeadOptions};
use crate::plant::{MassOnCar, MassOnCarParams, Plant};
use crate::simloop::{simulate_fc_zoh, SimOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Admissible intervals for the five physical parameters and the four
/// initial-state components.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBox {
    pub alpha: (f64, f64),
    pub m1: (f64, f64),
    pub m2: (f64, f64),
    pub k: (f64, f64),
    pub d: (f64, f64),
    pub z0: [(f64, f64); 4],
}

impl Default for ParamBox {
    fn default() -> Self {
        ParamBox {
            alpha: (0.0, std::f64::consts::FRAC_PI_2),
            m1: (2.0, 6.0),
            m2: (0.5, 1.5),
            k: (1.0, 3.0),
            d: (0.5, 1.5),
            z0: [(-2.5, 3.5), (-1.0, 1.0), (-2.75, 3.25), (-1.0, 1.0)],
        }
    }
}

impl ParamBox {
    pub fn validate(&self) -> Result<()> {
        let pairs = [self.alpha, self.m1, self.m2, self.k, self.d]
            .into_iter()
            .chain(self.z0);
        for (lo, hi) in pairs {
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::InvalidInput(format!("bad box interval [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    /// As a 9-dimensional search box, ordering `[alpha, m1, m2, k, d, z0..]`.
    /// The ramp-angle upper end is kept strictly below pi/2 (the plant
    /// constructor treats the interval as half-open).
    fn bounds(&self) -> Box9 {
        let alpha_hi = self.alpha.1.min(std::f64::consts::FRAC_PI_2 * (1.0 - 1e-12));
        let lower = vec![
            self.alpha.0,
            self.m1.0,
            self.m2.0,
            self.k.0,
            self.d.0,
            self.z0[0].0,
            self.z0[1].0,
            self.z0[2].0,
            self.z0[3].0,
        ];
        let upper = vec![
            alpha_hi.max(self.alpha.0),
            self.m1.1,
            self.m2.1,
            self.k.1,
            self.d.1,
            self.z0[0].1,
            self.z0[1].1,
            self.z0[2].1,
            self.z0[3].1,
        ];
        Box9::new(lower, upper)
    }

    /// Whether the fitted values lie inside every interval (with float slack).
    pub fn contains(&self, params: &MassOnCarParams, z0: &[f64; 4]) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo - 1e-12 && v <= hi + 1e-12;
        within(params.alpha, self.alpha)
            && within(params.m1, self.m1)
            && within(params.m2, self.m2)
            && within(params.k, self.k)
            && within(params.d, self.d)
            && (0..4).all(|i| within(z0[i], self.z0[i]))
    }
}

/// Sampled input/output data from the funnel-controlled learning run.
#[derive(Debug, Clone, PartialEq)]
pub struct LearningData {
    /// Sampling period [s].
    pub tau: f64,
    /// Held control values at `i * tau`.
    pub us: Vec<f64>,
    /// Output samples at `i * tau`.
    pub ys: Vec<f64>,
}

impl LearningData {
    pub fn len(&self) -> usize {
        self.ys.len()
    }
    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }
}

/// Run the zero-order-hold funnel controller on `[0, t_bar]` with period
/// `tau` and record `(u(i tau), y(i tau))`. A funnel violation aborts the
/// collection - the learning phase relies on the controller's guarantees.
pub fn collect_learning_data(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    z0: &[f64],
    tau: f64,
    t_bar: f64,
) -> Result<LearningData> {
    let opts = SimOptions { record_intersample: false, intersample_checks: 4, ..Default::default() };
    let rec = simulate_fc_zoh(plant, spec, refsig, 0.0, z0, t_bar, tau, &opts)?;
    if let Some(tv) = rec.first_violation {
        return Err(Error::FunnelViolation { level: 0, t: tv, margin: rec.min_margin });
    }
    if let Some(tt) = rec.truncated_at {
        return Err(Error::NonFiniteState { t: tt });
    }
    Ok(LearningData {
        tau,
        us: rec.controls.iter().map(|u| u[0]).collect(),
        ys: rec.outputs.iter().map(|y| y[0]).collect(),
    })
}

/// Flow-map tolerances: tight enough that chaining errors stay far below the
/// fitting residuals of interest.
fn flow_opts() -> AdaptiveOptions {
    AdaptiveOptions::with_tol(1e-9, 1e-12)
}

/// Advance the plant by one hold interval `[t, t + tau]` under constant `u`.
fn hold_advance(
    plant: &MassOnCar,
    t: f64,
    z: &[f64],
    u: f64,
    tau: f64,
    opts: &AdaptiveOptions,
) -> Result<Vec<f64>> {
    let uv = [u];
    let field = FnField::new(4, |_, x: &[f64], dx: &mut [f64]| {
        plant.dynamics(x, &uv, dx);
        Ok(())
    });
    Ok(integrate_adaptive(&field, t, z, t + tau, opts)?.last_state().to_vec())
}

/// Sum of squared output residuals of the candidate `[alpha, m1, m2, k, d,
/// z0[0..4]]` against the recorded data; `+inf` when the candidate is outside
/// the plant's admissible set or the simulation degenerates.
pub fn identification_objective(data: &LearningData, theta: &[f64]) -> f64 {
    debug_assert_eq!(theta.len(), 9);
    let params = MassOnCarParams {
        alpha: theta[0],
        m1: theta[1],
        m2: theta[2],
        k: theta[3],
        d: theta[4],
    };
    let plant = match MassOnCar::new(params) {
        Ok(p) => p,
        Err(_) => return f64::INFINITY,
    };
    let opts = flow_opts();
    let mut z = theta[5..9].to_vec();
    let mut sse = 0.0;
    // i = 0 sample: the predicted output at the candidate initial state
    let e0 = plant.output(&z) - data.ys[0];
    sse += e0 * e0;
    for i in 1..data.len() {
        let t_prev = (i - 1) as f64 * data.tau;
        z = match hold_advance(&plant, t_prev, &z, data.us[i - 1], data.tau, &opts) {
            Ok(z) => z,
            Err(_) => return f64::INFINITY,
        };
        let e = plant.output(&z) - data.ys[i];
        sse += e * e;
        if !sse.is_finite() {
            return f64::INFINITY;
        }
    }
    sse
}

/// Fitting result.
#[derive(Debug, Clone)]
pub struct IdentResult {
    pub params: MassOnCarParams,
    pub z0: [f64; 4],
    /// Sum of squared output residuals on the learning window.
    pub residual: f64,
    pub objective_evals: usize,
    pub starts: usize,
    pub best_start: usize,
    pub converged: bool,
}

/// Knobs for [`identify_with`].
#[derive(Debug, Clone)]
pub struct IdentOptions {
    pub multistart: usize,
    pub seed: u64,
    /// Nelder-Mead budget per random start.
    pub explore_evals: usize,
    /// Budget for the final polish of the best start.
    pub refine_evals: usize,
    /// Candidate starts tried before the random ones (9-dimensional).
    pub initial_guesses: Vec<Vec<f64>>,
}

impl Default for IdentOptions {
    fn default() -> Self {
        IdentOptions {
            multistart: 20,
            seed: 0,
            explore_evals: 800,
            refine_evals: 4000,
            initial_guesses: Vec::new(),
        }
    }
}

/// Fit parameters and initial state to the data by multistart Nelder-Mead
/// over the box. Deterministic for a fixed seed; ties break on start index.
pub fn identify(
    data: &LearningData,
    bounds: &ParamBox,
    multistart: usize,
    seed: u64,
) -> Result<IdentResult> {
    identify_with(data, bounds, &IdentOptions { multistart, seed, ..Default::default() })
}

pub fn identify_with(
    data: &LearningData,
    bounds: &ParamBox,
    opts: &IdentOptions,
) -> Result<IdentResult> {
    bounds.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidInput("need at least two data samples".into()));
    }
    let b = bounds.bounds();
    let n = b.dim();

    let mut starts: Vec<Vec<f64>> = opts.initial_guesses.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.multistart {
        let s: Vec<f64> = (0..n)
            .map(|i| {
                if b.upper[i] > b.lower[i] {
                    rng.gen_range(b.lower[i]..b.upper[i])
                } else {
                    b.lower[i]
                }
            })
            .collect();
        starts.push(s);
    }
    if starts.is_empty() {
        return Err(Error::InvalidInput("no starting points configured".into()));
    }

    let explore = NelderMeadOptions {
        max_evals: opts.explore_evals,
        ..Default::default()
    };
    let obj = |x: &[f64]| identification_objective(data, x);
    let results: Vec<_> = starts
        .par_iter()
        .map(|s| nelder_mead_box(&obj, s, &b, &explore))
        .collect();

    let mut best_idx = usize::MAX;
    let mut best_f = f64::INFINITY;
    let mut evals = 0usize;
    for (i, r) in results.iter().enumerate() {
        evals += r.evals;
        if r.fx.is_finite() && r.fx < best_f {
            best_f = r.fx;
            best_idx = i;
        }
    }
    if best_idx == usize::MAX {
        return Err(Error::AllStartsFailed { starts: starts.len() });
    }

    // polish the winner with a tighter, smaller simplex
    let refine = NelderMeadOptions {
        max_evals: opts.refine_evals,
        f_tol: 1e-16,
        x_tol: 1e-12,
        init_scale: 0.002,
    };
    let polished = nelder_mead_box(&obj, &results[best_idx].x, &b, &refine);
    evals += polished.evals;
    let (x, fx, converged) = if polished.fx <= best_f {
        (polished.x, polished.fx, polished.converged)
    } else {
        (results[best_idx].x.clone(), best_f, results[best_idx].converged)
    };

    let params =
        MassOnCarParams { alpha: x[0], m1: x[1], m2: x[2], k: x[3], d: x[4] };
    Ok(IdentResult {
        params,
        z0: [x[5], x[6], x[7], x[8]],
        residual: fx,
        objective_evals: evals,
        starts: starts.len(),
        best_start: best_idx,
        converged,
    })
}

/// Open-loop prediction gap of a fitted model against recorded closed-loop
/// data: the fitted plant is driven by the recorded control sequence from the
/// fitted initial state, and the output gap is reported as
/// `(||y - y_hat||_2, ||y - y_hat||_inf)` on the sample grid.
pub fn prediction_error_on_data(data: &LearningData, fitted: &IdentResult) -> Result<(f64, f64)> {
    let plant = MassOnCar::new(fitted.params)?;
    let opts = flow_opts();
    let mut z = fitted.z0.to_vec();
    let mut sq = 0.0;
    let mut sup = 0.0f64;
    let gap0 = plant.output(&z) - data.ys[0];
    sq += gap0 * gap0;
    sup = sup.max(gap0.abs());
    for i in 1..data.len() {
        let t_prev = (i - 1) as f64 * data.tau;
        z = hold_advance(&plant, t_prev, &z, data.us[i - 1], data.tau, &opts)?;
        let gap = plant.output(&z) - data.ys[i];
        sq += gap * gap;
        sup = sup.max(gap.abs());
    }
    Ok((sq.sqrt(), sup))
}

/// Collect fresh closed-loop data from the true plant on `[0, t_end]` and
/// evaluate the fitted model's open-loop prediction gap on it.
#[allow(clippy::too_many_arguments)]
pub fn prediction_error(
    fitted: &IdentResult,
    true_plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    z0_true: &[f64],
    t_end: f64,
    tau: f64,
) -> Result<(f64, f64)> {
    let data = collect_learning_data(true_plant, spec, refsig, z0_true, tau, t_end)?;
    prediction_error_on_data(&data, fitted)
}
