//! Funnel-based model predictive control.
//!
//! The receding-horizon scheme solves, every `shift` seconds, a finite-horizon
//! optimal control problem whose output constraints are the funnels
//! `||e_i(t)|| <= 1/phi_i(t)` plus a tightened constraint at the next sampling
//! instant, `||e_i(t_hat + shift)|| <= 1/phi_i(t_hat + shift) - theta`. The
//! tightening margin `theta` is extracted from a funnel-controller rollout,
//! which by construction stays strictly inside every funnel - that same
//! rollout therefore always provides a feasible warm start, and initial
//! feasibility propagates from one sampling instant to the next.
//!
//! The OCP is discretized by direct single shooting: the decision variables
//! are the piecewise-constant controls, states come from a fixed-step rollout
//! (Euler or RK4 substeps), the running cost is a trapezoid quadrature and
//! the constraints enter through logarithmic barriers whose weight shrinks
//! geometrically over outer iterations. The funnel stage cost needs no path
//! barrier: it blows up at the boundary by itself.

use crate::error::{Error, Result};
use crate::funnel::{error_cascade, error_cascade_raw, FunnelSpec, ReferenceSignal};
use crate::integrate::{integrate_adaptive, AdaptiveOptions, FnField};
use crate::opt::{bfgs, bfgs_warm, BfgsOptions};
use crate::plant::Plant;
use crate::simloop::{simulate_fc_continuous, SimOptions, SimRecord};

/// Which running cost the OCP minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostKind {
    /// Squared auxiliary errors: `sum_i ||E_i||^2 + lambda ||u||^2`.
    Classical,
    /// Funnel gains: `sum_i 1/(1 - phi_i^2 ||E_i||^2) + lambda ||u||^2`;
    /// infinite at the funnel boundary.
    Funnel,
}

/// Stage cost `l(t, x, u)` with control weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageCost {
    pub kind: CostKind,
    pub lambda: f64,
}

impl StageCost {
    pub fn new(kind: CostKind, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) {
            return Err(Error::InvalidInput(format!("lambda = {lambda} must be positive")));
        }
        Ok(StageCost { kind, lambda })
    }

    /// Error/gain part of the cost from already-evaluated cascade data.
    fn base(&self, norms: &[f64], gains: &[f64]) -> f64 {
        match self.kind {
            CostKind::Classical => norms.iter().map(|n| n * n).sum(),
            CostKind::Funnel => gains.iter().sum(),
        }
    }

    fn control_part(&self, u: &[f64]) -> f64 {
        self.lambda * u.iter().map(|v| v * v).sum::<f64>()
    }

    /// Evaluate at `(t, z, u)`. Outside the funnel the classical form raises
    /// a violation; the funnel form returns the `+inf` sentinel, which the
    /// barrier line searches treat as an inadmissible point.
    pub fn eval(
        &self,
        plant: &dyn Plant,
        spec: &FunnelSpec,
        refsig: &ReferenceSignal,
        t: f64,
        z: &[f64],
        u: &[f64],
    ) -> Result<f64> {
        match self.kind {
            CostKind::Classical => {
                let c = error_cascade(plant, spec, refsig, t, z)?;
                Ok(self.base(&c.norms, &c.gains) + self.control_part(u))
            }
            CostKind::Funnel => {
                let c = error_cascade_raw(plant, spec, refsig, t, z)?;
                if !c.valid {
                    return Ok(f64::INFINITY);
                }
                Ok(self.base(&c.norms, &c.gains) + self.control_part(u))
            }
        }
    }

    /// Evaluate from a stored record row (used by the performance measure).
    pub fn eval_record_row(&self, record: &SimRecord, row: usize) -> f64 {
        let norms: Vec<f64> = record.errors[row].iter().map(|e| e.abs()).collect();
        self.base(&norms, &record.gains[row]) + self.control_part(&record.controls[row])
    }
}

/// How the tightening margin is extracted from the funnel-controller rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThetaMode {
    /// Smallest boundary distance at the initial time itself,
    /// `min_i (1/phi_i(t_hat) - ||e_i(t_hat)||)`; attained with equality at
    /// some level, and independent of the horizon.
    AtInitialTime,
    /// Smallest boundary distance anywhere along the funnel-controller
    /// rollout over `[t_hat, t_hat + T]`. Depends on the horizon and
    /// guarantees that the rollout satisfies the tightened constraint at
    /// `t_hat + shift`. Default.
    MinOverHorizon,
}

/// Shooting integrator for the OCP rollouts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShootingMethod {
    Euler,
    Rk4,
}

/// Solver tuning for one OCP.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// Quasi-Newton iterations per barrier stage.
    pub max_iters: usize,
    /// Relative step for central finite-difference gradients.
    pub fd_step: f64,
    /// Decreasing barrier weights (outer stages).
    pub barrier_weights: Vec<f64>,
    pub grad_tol: f64,
    pub step_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_iters: 45,
            fd_step: 1e-6,
            barrier_weights: vec![1e-2, 1e-4, 1e-6],
            grad_tol: 2e-6,
            step_tol: 1e-10,
        }
    }
}

/// Receding-horizon configuration.
#[derive(Debug, Clone)]
pub struct MpcConfig {
    /// Prediction horizon `T = N * shift` [s].
    pub horizon: f64,
    /// Time shift (and control interval length) [s].
    pub shift: f64,
    /// Shooting substeps per control interval.
    pub substeps: usize,
    pub shooting: ShootingMethod,
    pub theta_mode: ThetaMode,
    /// Apply the tightened constraint at `t_hat + shift`.
    pub enforce_feasibility_constraint: bool,
    pub solver: SolverConfig,
}

impl MpcConfig {
    pub fn new(horizon: f64, shift: f64) -> Result<Self> {
        let cfg = MpcConfig {
            horizon,
            shift,
            substeps: 3,
            shooting: ShootingMethod::Rk4,
            theta_mode: ThetaMode::MinOverHorizon,
            enforce_feasibility_constraint: true,
            solver: SolverConfig::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.shift > 0.0 && self.horizon >= self.shift) {
            return Err(Error::InvalidInput(format!(
                "need horizon {} >= shift {} > 0",
                self.horizon, self.shift
            )));
        }
        let n = self.horizon / self.shift;
        if (n - n.round()).abs() > 1e-9 || n.round() < 1.0 {
            return Err(Error::InvalidInput(format!(
                "horizon/shift = {n} must be a positive integer"
            )));
        }
        if self.substeps == 0 {
            return Err(Error::InvalidInput("substeps must be at least 1".into()));
        }
        if self.solver.barrier_weights.is_empty() {
            return Err(Error::InvalidInput("need at least one barrier weight".into()));
        }
        Ok(())
    }

    /// Number of control intervals `N`.
    pub fn intervals(&self) -> usize {
        (self.horizon / self.shift).round() as usize
    }
}

/// Feasibility margin of the funnel-controller rollout from `(t_hat, x_hat)`.
///
/// Fails with [`Error::InfeasibleInitialPoint`] when the initial point is not
/// strictly interior to every funnel.
pub fn theta(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t_hat: f64,
    x_hat: &[f64],
    horizon: f64,
    mode: ThetaMode,
) -> Result<f64> {
    let cascade = error_cascade(plant, spec, refsig, t_hat, x_hat).map_err(|e| match e {
        Error::FunnelViolation { level, t, margin } => {
            Error::InfeasibleInitialPoint { level, t, margin }
        }
        other => other,
    })?;
    let value = match mode {
        ThetaMode::AtInitialTime => cascade.margin(),
        ThetaMode::MinOverHorizon => {
            let opts = SimOptions { record_intersample: false, ..Default::default() };
            let rec = simulate_fc_continuous(
                plant,
                spec,
                refsig,
                t_hat,
                x_hat,
                t_hat + horizon,
                &opts,
            )?;
            rec.min_margin
        }
    };
    if !value.is_finite() || value <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "tightening margin {value} is not a positive finite number \
             (unbounded funnels at the initial time?)"
        )));
    }
    Ok(value)
}

/// Everything one shooting rollout yields.
#[derive(Debug, Clone)]
pub struct RolloutSummary {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    /// Trapezoid quadrature of the stage cost (no barrier terms);
    /// `+inf` for the funnel cost once a node touches a boundary.
    pub objective: f64,
    /// Smallest funnel margin over all substep nodes.
    pub min_margin: f64,
    /// Tightened margins `(1/phi_i - theta) - ||e_i||` at `t_hat + shift`.
    pub term_margins: Vec<f64>,
    /// Margins positive at every node and tightening satisfied (if enforced).
    pub feasible: bool,
}

/// Rollout bookkeeping without the trajectory payload; the optimizer only
/// ever needs these numbers.
#[derive(Debug, Clone, Copy)]
struct LeanRollout {
    objective: f64,
    min_margin: f64,
    term_margins: [f64; crate::funnel::MAX_LEVELS],
    levels: usize,
    feasible: bool,
    path_barrier: f64,
    term_barrier: f64,
}

impl LeanRollout {
    fn augmented(&self, cost: &StageCost, enforce: bool, w: f64) -> f64 {
        let mut v = self.objective;
        if cost.kind == CostKind::Classical {
            v += w * self.path_barrier;
        }
        if enforce {
            v += w * self.term_barrier;
        }
        v
    }
}

/// Shooting rollout core. `store` collects the substep nodes when the
/// caller needs the predicted trajectory.
#[allow(clippy::too_many_arguments)]
fn rollout_core(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t_hat: f64,
    x_hat: &[f64],
    controls: &[f64],
    config: &MpcConfig,
    cost: &StageCost,
    theta_value: f64,
    mut store: Option<&mut (Vec<f64>, Vec<Vec<f64>>)>,
) -> LeanRollout {
    use crate::funnel::{cascade_lean, MAX_LEVELS};

    let sub = config.substeps;
    let h = config.shift / sub as f64;
    let r = plant.relative_degree();
    let dim = plant.state_dim();

    let mut out = LeanRollout {
        objective: 0.0,
        min_margin: f64::INFINITY,
        term_margins: [f64::NEG_INFINITY; MAX_LEVELS],
        levels: r,
        feasible: false,
        path_barrier: 0.0,
        term_barrier: f64::INFINITY,
    };
    let mut broken = false;

    let mut z = x_hat.to_vec();
    let mut dz = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];

    if let Some(st) = store.as_deref_mut() {
        st.0.push(t_hat);
        st.1.push(z.clone());
    }

    // cost base at a node is u-independent; the lambda term is added per
    // interval below
    let node_eval = |t: f64, z: &[f64], out: &mut LeanRollout| -> Option<f64> {
        let c = cascade_lean(plant, spec, refsig, t, z).ok()?;
        let m = c.margin();
        if m < out.min_margin {
            out.min_margin = m;
        }
        for i in 0..c.r {
            let lm = c.bounds[i] - c.norms[i];
            if lm <= 0.0 {
                out.path_barrier = f64::INFINITY;
            } else if lm.is_finite() {
                out.path_barrier -= lm.ln();
            }
        }
        let base = match cost.kind {
            CostKind::Classical => (0..c.r).map(|i| c.norms[i] * c.norms[i]).sum::<f64>(),
            CostKind::Funnel => {
                if c.valid {
                    (0..c.r).map(|i| c.gains[i]).sum::<f64>()
                } else {
                    f64::INFINITY
                }
            }
        };
        Some(base)
    };

    'outer: for (j, &uj) in controls.iter().enumerate() {
        let u = [uj];
        let t_j = t_hat + j as f64 * config.shift;
        let mut base_prev = match node_eval(t_j, &z, &mut out) {
            Some(b) => b,
            None => {
                broken = true;
                break 'outer;
            }
        };
        let lam_u = cost.lambda * uj * uj;
        for s in 0..sub {
            match config.shooting {
                ShootingMethod::Euler => {
                    plant.dynamics(&z, &u, &mut dz);
                    for i in 0..dim {
                        z[i] += h * dz[i];
                    }
                }
                ShootingMethod::Rk4 => {
                    plant.dynamics(&z, &u, &mut dz);
                    for i in 0..dim {
                        tmp[i] = z[i] + 0.5 * h * dz[i];
                    }
                    plant.dynamics(&tmp, &u, &mut k2);
                    for i in 0..dim {
                        tmp[i] = z[i] + 0.5 * h * k2[i];
                    }
                    plant.dynamics(&tmp, &u, &mut k3);
                    for i in 0..dim {
                        tmp[i] = z[i] + h * k3[i];
                    }
                    plant.dynamics(&tmp, &u, &mut k4);
                    for i in 0..dim {
                        z[i] += h / 6.0 * (dz[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                    }
                }
            }
            if !z.iter().all(|v| v.is_finite()) {
                broken = true;
                break 'outer;
            }
            let t_next = t_j + (s + 1) as f64 * h;
            let base_next = match node_eval(t_next, &z, &mut out) {
                Some(b) => b,
                None => {
                    broken = true;
                    break 'outer;
                }
            };
            out.objective += 0.5 * h * (base_prev + base_next) + h * lam_u;
            base_prev = base_next;

            if let Some(st) = store.as_deref_mut() {
                st.0.push(t_next);
                st.1.push(z.clone());
            }

            // tightened margins at the end of the first interval
            if j == 0 && s == sub - 1 {
                if let Ok(c) = cascade_lean(plant, spec, refsig, t_next, &z) {
                    out.term_barrier = 0.0;
                    for i in 0..r {
                        let m = (c.bounds[i] - theta_value) - c.norms[i];
                        out.term_margins[i] = m;
                        if m > 0.0 {
                            out.term_barrier -= m.ln();
                        } else {
                            out.term_barrier = f64::INFINITY;
                        }
                    }
                }
            }
        }
    }

    if broken {
        out.objective = f64::INFINITY;
        out.path_barrier = f64::INFINITY;
        out.min_margin = f64::NEG_INFINITY;
    }

    let term_ok = !config.enforce_feasibility_constraint
        || out.term_margins[..r].iter().all(|&m| m >= 0.0 && m.is_finite());
    out.feasible = !broken && out.min_margin > 0.0 && out.objective.is_finite() && term_ok;
    out
}

/// Roll the piecewise-constant control sequence out from `(t_hat, x_hat)` and
/// evaluate objective, margins and the predicted trajectory. Pure, exposed so
/// that tests can recompute solver objectives on independent (finer) grids.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_rollout(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t_hat: f64,
    x_hat: &[f64],
    controls: &[f64],
    config: &MpcConfig,
    cost: &StageCost,
    theta_value: f64,
) -> RolloutSummary {
    let mut store = (Vec::new(), Vec::new());
    let lean = rollout_core(
        plant,
        spec,
        refsig,
        t_hat,
        x_hat,
        controls,
        config,
        cost,
        theta_value,
        Some(&mut store),
    );
    RolloutSummary {
        times: store.0,
        states: store.1,
        objective: lean.objective,
        min_margin: lean.min_margin,
        term_margins: lean.term_margins[..lean.levels].to_vec(),
        feasible: lean.feasible,
    }
}

/// Which initial guess the solver ended up descending from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WarmStartKind {
    /// Shifted previous solution with a funnel-controller tail.
    Shifted,
    /// Interval means of the funnel-controller rollout.
    FunnelRollout,
    /// Feasibility restoration had to run first.
    Restored,
}

#[derive(Debug, Clone)]
pub struct OcpDiagnostics {
    pub iterations: usize,
    pub obj_evals: usize,
    pub converged: bool,
    pub warm_start: WarmStartKind,
    /// True objective of the funnel-controller warm start (finite whenever
    /// that start is feasible); the returned objective never exceeds it.
    pub fc_objective: f64,
    /// Best feasible objective after each barrier stage; non-increasing.
    pub stage_objectives: Vec<f64>,
}

/// Solution of one finite-horizon OCP.
#[derive(Debug, Clone)]
pub struct OcpSolution {
    /// Piecewise-constant controls, one per interval.
    pub controls: Vec<f64>,
    pub predicted_times: Vec<f64>,
    pub predicted_states: Vec<Vec<f64>>,
    /// Stage-cost quadrature of the returned controls (no barrier terms).
    pub objective: f64,
    /// Tightened margins at `t_hat + shift` for the returned controls.
    pub shift_margins: Vec<f64>,
    pub theta: f64,
    pub min_predicted_margin: f64,
    pub diagnostics: OcpDiagnostics,
}

/// Interval means of the funnel-controller rollout: the canonical feasible
/// initial guess for the OCP.
fn fc_interval_means(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t_hat: f64,
    x_hat: &[f64],
    config: &MpcConfig,
) -> Result<Vec<f64>> {
    let opts = SimOptions { record_intersample: false, ..Default::default() };
    let rec = simulate_fc_continuous(
        plant,
        spec,
        refsig,
        t_hat,
        x_hat,
        t_hat + config.horizon,
        &opts,
    )?;
    let n = config.intervals();
    let mut means = vec![0.0; n];
    let mut counts = vec![0usize; n];
    for (row, &t) in rec.times.iter().enumerate() {
        let j = (((t - t_hat) / config.shift).floor() as usize).min(n - 1);
        means[j] += rec.controls[row][0];
        counts[j] += 1;
    }
    for j in 0..n {
        means[j] /= counts[j].max(1) as f64;
    }
    Ok(means)
}

/// Squared-hinge infeasibility of a rollout; zero iff strictly interior with
/// a small clearance. Used only when no candidate start is feasible.
fn restoration_penalty(summary: &LeanRollout, enforce: bool) -> f64 {
    let eps = 1e-6;
    let mut p = 0.0;
    if !summary.min_margin.is_finite() {
        return f64::INFINITY;
    }
    let viol = (eps - summary.min_margin).max(0.0);
    p += viol * viol;
    if enforce {
        for &m in &summary.term_margins[..summary.levels] {
            let v = (eps - m).max(0.0);
            p += v * v;
        }
    }
    p
}

/// Solve the finite-horizon OCP at `(t_hat, x_hat)` by direct single shooting.
///
/// `theta_value` comes from [`theta`]. `warm_start` is the shifted previous
/// solution when available; the funnel-controller rollout is always evaluated
/// as well and the returned control is never worse (in true objective) than
/// any feasible warm start.
#[allow(clippy::too_many_arguments)]
pub fn solve_ocp(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t_hat: f64,
    x_hat: &[f64],
    config: &MpcConfig,
    cost: &StageCost,
    theta_value: f64,
    warm_start: Option<&[f64]>,
) -> Result<OcpSolution> {
    config.validate()?;
    error_cascade(plant, spec, refsig, t_hat, x_hat).map_err(|e| match e {
        Error::FunnelViolation { level, t, margin } => {
            Error::InfeasibleInitialPoint { level, t, margin }
        }
        other => other,
    })?;

    let eval = |u: &[f64]| {
        rollout_core(plant, spec, refsig, t_hat, x_hat, u, config, cost, theta_value, None)
    };

    let fc_controls = fc_interval_means(plant, spec, refsig, t_hat, x_hat, config)?;
    let fc_summary = eval(&fc_controls);
    let fc_objective =
        if fc_summary.feasible { fc_summary.objective } else { f64::INFINITY };

    // pick the descent start
    let enforce = config.enforce_feasibility_constraint;
    let w0 = config.solver.barrier_weights[0];
    let mut start_kind = WarmStartKind::FunnelRollout;
    let mut x = fc_controls.clone();
    if let Some(ws) = warm_start {
        let s = eval(ws);
        if s.augmented(cost, enforce, w0).is_finite() {
            start_kind = WarmStartKind::Shifted;
            x = ws.to_vec();
        }
    }

    let mut best_u = fc_controls.clone();
    let mut best_obj = fc_objective;
    let mut obj_evals = 0usize;
    let mut iterations = 0usize;

    if !eval(&x).augmented(cost, enforce, w0).is_finite() {
        // restoration: pull the start into the strictly feasible region
        let pen = |u: &[f64]| restoration_penalty(&eval(u), enforce);
        let res = bfgs(
            &pen,
            &x,
            &BfgsOptions {
                max_iters: 2 * config.solver.max_iters,
                grad_tol: 0.0,
                step_tol: 1e-16,
                fd_step: config.solver.fd_step,
            },
        );
        obj_evals += res.evals;
        iterations += res.iterations;
        if !eval(&res.x).augmented(cost, enforce, w0).is_finite() {
            return Err(Error::SolverFailed {
                t: t_hat,
                reason: "no feasible initial guess found".into(),
            });
        }
        x = res.x;
        start_kind = WarmStartKind::Restored;
    }

    let mut stage_objectives = Vec::with_capacity(config.solver.barrier_weights.len());
    let mut converged = false;
    let n_stages = config.solver.barrier_weights.len();
    let mut h_carry: Option<Vec<f64>> = None;
    for (si, &w) in config.solver.barrier_weights.iter().enumerate() {
        let f = |u: &[f64]| eval(u).augmented(cost, enforce, w);
        // early stages are only there to guide the iterate towards the
        // constrained optimum; spend the iteration budget on the last one
        let max_iters = if si + 1 == n_stages {
            config.solver.max_iters
        } else {
            (config.solver.max_iters / 4).max(8)
        };
        let (res, h) = bfgs_warm(
            &f,
            &x,
            &BfgsOptions {
                max_iters,
                grad_tol: config.solver.grad_tol,
                step_tol: config.solver.step_tol,
                fd_step: config.solver.fd_step,
            },
            h_carry.take(),
        );
        h_carry = Some(h);
        iterations += res.iterations;
        obj_evals += res.evals;
        // the flag reports the stage that determines the returned control
        if si + 1 == n_stages {
            converged = res.converged;
        }
        x = res.x;
        let summary = eval(&x);
        if summary.feasible && summary.objective < best_obj {
            best_obj = summary.objective;
            best_u = x.clone();
        }
        stage_objectives.push(best_obj);
    }

    if !best_obj.is_finite() {
        return Err(Error::SolverFailed {
            t: t_hat,
            reason: "no feasible iterate encountered".into(),
        });
    }

    let best = evaluate_rollout(
        plant, spec, refsig, t_hat, x_hat, &best_u, config, cost, theta_value,
    );
    Ok(OcpSolution {
        controls: best_u,
        predicted_times: best.times,
        predicted_states: best.states,
        objective: best.objective,
        shift_margins: best.term_margins,
        theta: theta_value,
        min_predicted_margin: best.min_margin,
        diagnostics: OcpDiagnostics {
            iterations,
            obj_evals,
            converged,
            warm_start: start_kind,
            fc_objective,
            stage_objectives,
        },
    })
}

/// Per-step solver diagnostics of the receding-horizon loop.
#[derive(Debug, Clone)]
pub struct MpcStepDiag {
    pub step: usize,
    pub t_hat: f64,
    pub theta: f64,
    pub objective: f64,
    pub fc_objective: f64,
    pub iterations: usize,
    pub obj_evals: usize,
    pub converged: bool,
    pub min_predicted_margin: f64,
}

/// Closed-loop MPC run: trajectory record plus per-step diagnostics.
#[derive(Debug, Clone)]
pub struct MpcRun {
    pub record: SimRecord,
    pub steps: Vec<MpcStepDiag>,
}

/// Run the receding-horizon loop on `[0, t_end]` (`t_end` must be a multiple
/// of the shift): measure the state, extract the tightening margin, solve the
/// OCP warm-started from the shifted previous solution, apply the first
/// control interval, repeat. The plant between sampling instants is
/// integrated adaptively ("exactly"), independent of the shooting method.
pub fn run_funnel_mpc(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    z0: &[f64],
    config: &MpcConfig,
    cost: &StageCost,
    t_end: f64,
    opts: &SimOptions,
) -> Result<MpcRun> {
    config.validate()?;
    let steps_f = t_end / config.shift;
    if (steps_f - steps_f.round()).abs() > 1e-9 || steps_f.round() < 1.0 {
        return Err(Error::InvalidInput(format!(
            "t_end = {t_end} must be a positive multiple of the shift {}",
            config.shift
        )));
    }
    let n_steps = steps_f.round() as usize;
    let n = config.intervals();
    let adaptive = AdaptiveOptions::with_tol(opts.rtol, opts.atol);

    let mut rec = SimRecord::new(plant.relative_degree());
    let mut steps: Vec<MpcStepDiag> = Vec::with_capacity(n_steps + 1);
    let mut z = z0.to_vec();
    let mut warm: Option<Vec<f64>> = None;

    let rows_per_interval = (config.shift / opts.grid).round().max(1.0) as usize;

    for k in 0..=n_steps {
        let t_hat = k as f64 * config.shift;
        let th = theta(plant, spec, refsig, t_hat, &z, config.horizon, config.theta_mode)
            .map_err(|e| annotate_step(e, k))?;
        let sol = solve_ocp(
            plant,
            spec,
            refsig,
            t_hat,
            &z,
            config,
            cost,
            th,
            warm.as_deref(),
        )
        .map_err(|e| annotate_step(e, k))?;
        steps.push(MpcStepDiag {
            step: k,
            t_hat,
            theta: th,
            objective: sol.objective,
            fc_objective: sol.diagnostics.fc_objective,
            iterations: sol.diagnostics.iterations,
            obj_evals: sol.diagnostics.obj_evals,
            converged: sol.diagnostics.converged,
            min_predicted_margin: sol.min_predicted_margin,
        });

        let u0 = sol.controls[0];

        if k == n_steps {
            // final sample: record the feedback value at t_end and stop
            let cascade = error_cascade_raw(plant, spec, refsig, t_hat, &z)?;
            rec.note_margin(t_hat, 0.0, cascade.margin());
            rec.push_row(plant, t_hat, &z, refsig, &cascade, vec![u0]);
            break;
        }

        // apply u0 on [t_hat, t_hat + shift): exact plant propagation
        let t_next = (k + 1) as f64 * config.shift;
        let u_apply = [u0];
        let field = FnField::new(plant.state_dim(), |_, x: &[f64], dx: &mut [f64]| {
            plant.dynamics(x, &u_apply, dx);
            Ok(())
        });
        let sol_plant = integrate_adaptive(&field, t_hat, &z, t_next, &adaptive)?;
        for i in 0..rows_per_interval {
            let t = t_hat + i as f64 * opts.grid;
            let zt = sol_plant.sample(t);
            let cascade = error_cascade_raw(plant, spec, refsig, t, &zt)?;
            rec.note_margin(t, 0.0, cascade.margin());
            rec.push_row(plant, t, &zt, refsig, &cascade, vec![u0]);
        }
        z = sol_plant.last_state().to_vec();

        // shifted warm start with a funnel-controller tail interval
        let mut shifted: Vec<f64> = sol.controls[1..].to_vec();
        let x_term = sol.predicted_states.last().expect("rollout has nodes").clone();
        let t_term = t_hat + config.horizon;
        let tail = tail_control(plant, spec, refsig, t_term, &x_term, config.shift)
            .unwrap_or(*sol.controls.last().expect("controls non-empty"));
        shifted.push(tail);
        debug_assert_eq!(shifted.len(), n);
        warm = Some(shifted);
    }

    rec.feasible = rec.first_violation.is_none() && rec.truncated_at.is_none();
    Ok(MpcRun { record: rec, steps })
}

fn annotate_step(e: Error, step: usize) -> Error {
    match e {
        Error::SolverFailed { t, reason } => {
            Error::SolverFailed { t, reason: format!("step {step}: {reason}") }
        }
        other => other,
    }
}

/// Mean funnel-controller value over one interval starting at `(t, x)`.
fn tail_control(
    plant: &dyn Plant,
    spec: &FunnelSpec,
    refsig: &ReferenceSignal,
    t: f64,
    x: &[f64],
    shift: f64,
) -> Option<f64> {
    let opts = SimOptions { record_intersample: false, grid: shift / 16.0, ..Default::default() };
    let rec = simulate_fc_continuous(plant, spec, refsig, t, x, t + shift, &opts).ok()?;
    let sum: f64 = rec.controls.iter().map(|u| u[0]).sum();
    Some(sum / rec.controls.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funnel::{FunnelLevel, FunnelSpec};
    use crate::plant::{MassOnCar, MassOnCarParams};

    const FRAC_PI_4: f64 = std::f64::consts::FRAC_PI_4;

    fn setup() -> (MassOnCar, FunnelSpec, ReferenceSignal) {
        let plant = MassOnCar::new(MassOnCarParams::benchmark(FRAC_PI_4)).unwrap();
        let spec = FunnelSpec::new(vec![
            FunnelLevel::new(0.1, 5.0, 2.0),
            FunnelLevel::new(0.5, 10.0, 2.0),
        ])
        .unwrap();
        (plant, spec, ReferenceSignal::cosine())
    }

    fn quick_config() -> MpcConfig {
        let mut cfg = MpcConfig::new(0.25, 1.0 / 40.0).unwrap();
        cfg.solver.max_iters = 30;
        cfg
    }

    #[test]
    fn stage_cost_trivial_and_hand_values() {
        let (plant, spec, _) = setup();
        let refsig = ReferenceSignal::zero();
        let classical = StageCost::new(CostKind::Classical, 0.005).unwrap();
        let v = classical.eval(&plant, &spec, &refsig, 0.0, &[0.0; 4], &[0.0]).unwrap();
        assert_eq!(v, 0.0);
        let funnel = StageCost::new(CostKind::Funnel, 0.005).unwrap();
        let v = funnel.eval(&plant, &spec, &refsig, 0.0, &[0.0; 4], &[0.0]).unwrap();
        assert_eq!(v, 2.0); // both gains at their floor of 1

        // norms 1 and 2, u = 2, lambda = 0.005 -> 1 + 4 + 0.02
        let c = StageCost::new(CostKind::Classical, 0.005).unwrap();
        assert!((c.base(&[1.0, 2.0], &[]) + c.control_part(&[2.0]) - 5.02).abs() < 1e-15);
    }

    #[test]
    fn funnel_cost_gain_value_and_barrier() {
        let (plant, spec, _) = setup();
        let refsig = ReferenceSignal::zero();
        let funnel = StageCost::new(CostKind::Funnel, 0.005).unwrap();
        // e_0 at 60% of its boundary, e_1 = 0 is unreachable by state choice
        // (the cascade couples them), so check the formula path directly:
        let v = funnel.base(&[], &[1.5625, 1.0]);
        assert!((v - 2.5625).abs() < 1e-12);
        // boundary contact -> +inf sentinel
        let bound = spec.boundary(0, 0.0);
        let v = funnel
            .eval(&plant, &spec, &refsig, 0.0, &[bound + 0.1, 0.0, 0.0, 0.0], &[0.0])
            .unwrap();
        assert!(v.is_infinite());
    }

    #[test]
    fn funnel_cost_monotone_towards_boundary() {
        let (plant, spec, _) = setup();
        let refsig = ReferenceSignal::zero();
        let funnel = StageCost::new(CostKind::Funnel, 0.005).unwrap();
        let bound = spec.boundary(0, 0.0);
        let mut prev = 0.0;
        // fractions kept small enough that the coupled level 1 stays feasible
        for &f in &[0.1, 0.2, 0.3, 0.4, 0.5] {
            let v = funnel
                .eval(&plant, &spec, &refsig, 0.0, &[f * bound, 0.0, 0.0, 0.0], &[0.0])
                .unwrap();
            assert!(v.is_finite() && v > prev, "cost {v} at fraction {f}");
            prev = v;
        }
    }

    #[test]
    fn lambda_linearity() {
        let (plant, spec, refsig) = setup();
        let z = [0.3, 0.1, -0.2, 0.0];
        let u = [1.7];
        let a = StageCost::new(CostKind::Classical, 0.005).unwrap();
        let b = StageCost::new(CostKind::Classical, 0.010).unwrap();
        let va = a.eval(&plant, &spec, &refsig, 0.2, &z, &u).unwrap();
        let vb = b.eval(&plant, &spec, &refsig, 0.2, &z, &u).unwrap();
        assert!((vb - va - 0.005 * 1.7 * 1.7).abs() < 1e-12);
    }

    #[test]
    fn theta_at_initial_time_is_active() {
        let (plant, spec, _) = setup();
        let refsig = ReferenceSignal::zero();
        let th = theta(&plant, &spec, &refsig, 0.0, &[0.0; 4], 1.0, ThetaMode::AtInitialTime)
            .unwrap();
        // perfect tracking: margin is the smaller boundary, 5.1 at t = 0
        assert!((th - 5.1).abs() < 1e-12);
        // activeness: some level attains the margin exactly
        let c = error_cascade(&plant, &spec, &refsig, 0.0, &[0.0; 4]).unwrap();
        let j = c.margin_level();
        assert!((c.norms[j] + th - c.bounds[j]).abs() < 1e-12);
    }

    #[test]
    fn theta_min_over_horizon_not_larger() {
        let (plant, spec, refsig) = setup();
        let z = [0.0; 4];
        let a = theta(&plant, &spec, &refsig, 0.0, &z, 1.0, ThetaMode::AtInitialTime).unwrap();
        let m = theta(&plant, &spec, &refsig, 0.0, &z, 1.0, ThetaMode::MinOverHorizon).unwrap();
        assert!(m <= a + 1e-12, "min-over-horizon {m} vs at-initial {a}");
        assert!(m > 0.0);
    }

    #[test]
    fn theta_rejects_infeasible_point() {
        let (plant, spec, refsig) = setup();
        let err = theta(
            &plant,
            &spec,
            &refsig,
            0.0,
            &[20.0, 0.0, 0.0, 0.0],
            1.0,
            ThetaMode::AtInitialTime,
        )
        .unwrap_err();
        assert!(matches!(err, Error::InfeasibleInitialPoint { .. }));
    }

    #[test]
    fn ocp_equilibrium_has_near_zero_controls() {
        let (plant, spec, _) = setup();
        let refsig = ReferenceSignal::zero();
        let cfg = quick_config();
        let cost = StageCost::new(CostKind::Classical, 0.005).unwrap();
        let th = theta(&plant, &spec, &refsig, 0.0, &[0.0; 4], cfg.horizon, cfg.theta_mode)
            .unwrap();
        let sol =
            solve_ocp(&plant, &spec, &refsig, 0.0, &[0.0; 4], &cfg, &cost, th, None).unwrap();
        assert!(sol.objective < 1e-8, "objective {}", sol.objective);
        for &u in &sol.controls {
            assert!(u.abs() < 1e-3, "control {u}");
        }
        // funnel cost floor: integral of r over the horizon
        let costf = StageCost::new(CostKind::Funnel, 0.005).unwrap();
        let solf =
            solve_ocp(&plant, &spec, &refsig, 0.0, &[0.0; 4], &cfg, &costf, th, None).unwrap();
        assert!((solf.objective - 2.0 * cfg.horizon).abs() < 1e-4, "floor {}", solf.objective);
    }

    #[test]
    fn ocp_never_beats_warm_start_backwards() {
        let (plant, spec, refsig) = setup();
        let cfg = quick_config();
        let cost = StageCost::new(CostKind::Classical, 0.005).unwrap();
        let th = theta(&plant, &spec, &refsig, 0.0, &[0.0; 4], cfg.horizon, cfg.theta_mode)
            .unwrap();
        let sol =
            solve_ocp(&plant, &spec, &refsig, 0.0, &[0.0; 4], &cfg, &cost, th, None).unwrap();
        assert!(sol.objective <= sol.diagnostics.fc_objective + 1e-12);
        assert!(sol.diagnostics.fc_objective.is_finite());
        // descent across barrier stages
        let so = &sol.diagnostics.stage_objectives;
        for w in so.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        // tightened margins hold for the returned control
        for &m in &sol.shift_margins {
            assert!(m >= 0.0, "shift margin {m}");
        }
        assert!(sol.min_predicted_margin > 0.0);
    }

    #[test]
    fn warm_start_rollout_is_interior() {
        use rand::{Rng, SeedableRng};
        let (plant, spec, refsig) = setup();
        let cfg = quick_config();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(33);
        let mut accepted = 0;
        let mut tried = 0;
        while accepted < 10 && tried < 300 {
            tried += 1;
            let t_hat = rng.gen_range(0.0..3.0);
            let z: Vec<f64> = (0..4).map(|_| rng.gen_range(-0.6..0.6)).collect();
            if error_cascade(&plant, &spec, &refsig, t_hat, &z).is_err() {
                continue;
            }
            accepted += 1;
            let th = theta(&plant, &spec, &refsig, t_hat, &z, cfg.horizon, ThetaMode::MinOverHorizon)
                .unwrap();
            let fc = fc_interval_means(&plant, &spec, &refsig, t_hat, &z, &cfg).unwrap();
            let cost = StageCost::new(CostKind::Classical, 0.005).unwrap();
            let summary =
                evaluate_rollout(&plant, &spec, &refsig, t_hat, &z, &fc, &cfg, &cost, th);
            assert!(
                summary.feasible,
                "fc warm start infeasible at t_hat {t_hat}: min margin {}, term {:?}",
                summary.min_margin, summary.term_margins
            );
        }
        assert_eq!(accepted, 10);
    }

    #[test]
    fn config_validation() {
        assert!(MpcConfig::new(1.0, 0.0).is_err());
        assert!(MpcConfig::new(0.5, 1.0).is_err());
        assert!(MpcConfig::new(1.0, 0.3).is_err()); // not an integer multiple
        let cfg = MpcConfig::new(41.0 / 40.0, 1.0 / 40.0).unwrap();
        assert_eq!(cfg.intervals(), 41);
    }

    #[test]
    fn short_mpc_run_is_feasible() {
        let (plant, spec, refsig) = setup();
        let cfg = quick_config();
        let cost = StageCost::new(CostKind::Classical, 0.005).unwrap();
        let opts = SimOptions { grid: 5e-3, ..Default::default() };
        let run =
            run_funnel_mpc(&plant, &spec, &refsig, &[0.0; 4], &cfg, &cost, 0.5, &opts).unwrap();
        assert!(run.record.feasible, "min margin {}", run.record.min_margin);
        assert_eq!(run.steps.len(), 21); // 20 applied + final sample
        assert_eq!(run.record.t_end(), 0.5);
        // every applied interval shows up as constant control in the record
        for k in 0..20 {
            let t = k as f64 * cfg.shift;
            let r0 = run.record.row_at(t).unwrap();
            let r1 = run.record.row_at(t + opts.grid).unwrap();
            assert_eq!(run.record.controls[r0][0], run.record.controls[r1][0]);
        }
    }
}
