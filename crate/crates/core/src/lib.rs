//! Funnel control, its sampled-data implementation and funnel-based MPC for
//! output-constrained control-affine systems, plus grey-box parameter
//! identification of the mass-on-car benchmark.
//!
//! Module map:
//!
//! * [`integrate`] - fixed-step (Euler/RK4) and adaptive (Dormand-Prince 4(5))
//!   ODE integration,
//! * [`plant`] - the control-affine plant trait and the mass-on-car system,
//! * [`funnel`] - funnel functions, reference signals and the error cascade,
//! * [`simloop`] - closed-loop simulation engines and the performance measure,
//! * [`fmpc`] - stage costs, the feasibility margin map, the single-shooting
//!   OCP solver and the receding-horizon loop,
//! * [`ident`] - the learning phase: data collection under funnel control and
//!   box-constrained least-squares parameter fitting.

pub mod error;
pub mod fmpc;
pub mod funnel;
pub mod ident;
pub mod integrate;
pub mod jet;
pub mod opt;
pub mod plant;
pub mod simloop;

pub use error::{Error, Result};
pub use fmpc::{
    run_funnel_mpc, solve_ocp, theta, CostKind, MpcConfig, MpcRun, OcpSolution, ShootingMethod,
    StageCost, ThetaMode,
};
pub use funnel::{
    error_cascade, error_cascade_raw, funnel_control, ErrorCascade, FunnelLevel, FunnelSpec,
    ReferenceSignal,
};
pub use ident::{collect_learning_data, identify, prediction_error, IdentResult, LearningData, ParamBox};
pub use integrate::{
    integrate_adaptive, integrate_adaptive_sampled, integrate_fixed, rk4_step, AdaptiveOptions,
    FixedMethod, Trajectory, VectorField,
};
pub use plant::{relative_degree, MassOnCar, MassOnCarParams, Plant};
pub use simloop::{
    performance_measure, simulate_fc_continuous, simulate_fc_zoh, SimOptions, SimRecord,
};
