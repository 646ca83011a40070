use thiserror::Error;

/// Errors shared by the simulation, control and identification layers.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// A vector-field or stage evaluation produced NaN/Inf.
    #[error("non-finite state encountered at t = {t}")]
    NonFiniteState { t: f64 },

    /// The adaptive step controller was driven below the resolvable step size.
    #[error("adaptive step size underflow at t = {t} (required h = {h:.3e})")]
    StepUnderflow { t: f64, h: f64 },

    /// Safety cap on the number of integration steps.
    #[error("integration exceeded {max_steps} steps at t = {t}")]
    MaxStepsExceeded { t: f64, max_steps: usize },

    /// An auxiliary error reached or left its funnel: phi_i(t)*||e_i|| >= 1.
    #[error("funnel violation at level {level}, t = {t} (margin {margin:.3e})")]
    FunnelViolation { level: usize, t: f64, margin: f64 },

    /// Requested more output derivatives than the relative degree allows.
    #[error("output derivative order {order} requested, relative degree is {r}")]
    OrderExceedsRelativeDegree { order: usize, r: usize },

    /// The point handed to the OCP does not lie strictly inside all funnels.
    #[error("infeasible initial point at level {level}, t = {t} (margin {margin:.3e})")]
    InfeasibleInitialPoint { level: usize, t: f64, margin: f64 },

    /// The optimizer could not produce any funnel-feasible control.
    #[error("OCP solver failed at t = {t}: {reason}")]
    SolverFailed { t: f64, reason: String },

    /// A record is missing a required sample instant.
    #[error("record has no sample at t = {t} (grid spacing {delta})")]
    GridMismatch { t: f64, delta: f64 },

    /// Every multistart seed produced a non-finite objective.
    #[error("identification failed: all {starts} starts gave non-finite objectives")]
    AllStartsFailed { starts: usize },

    /// Construction-time validation failure.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;
