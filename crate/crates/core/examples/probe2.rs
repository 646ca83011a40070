use fmpc_core::fmpc::*;
use fmpc_core::funnel::{FunnelLevel, FunnelSpec, ReferenceSignal};
use fmpc_core::plant::{MassOnCar, MassOnCarParams};
use fmpc_core::simloop::{simulate_fc_continuous, SimOptions};
use std::time::Instant;

fn main() {
    let plant = MassOnCar::new(MassOnCarParams::benchmark(std::f64::consts::FRAC_PI_4)).unwrap();
    let spec = FunnelSpec::new(vec![
        FunnelLevel::new(0.1, 5.0, 2.0),
        FunnelLevel::new(0.5, 10.0, 2.0),
    ])
    .unwrap();
    let refsig = ReferenceSignal::cosine();
    let cost = StageCost::new(CostKind::Classical, 0.005).unwrap();
    let cfg = MpcConfig::new(41.0 / 40.0, 1.0 / 40.0).unwrap();

    // time one FC rollout sim (theta path)
    let t = Instant::now();
    let opts = SimOptions { record_intersample: false, ..Default::default() };
    let rec = simulate_fc_continuous(&plant, &spec, &refsig, 0.0, &[0.0; 4], 41.0 / 40.0, &opts).unwrap();
    println!("fc sim over horizon: {:?} ({} rows)", t.elapsed(), rec.len());

    let t = Instant::now();
    let th = theta(&plant, &spec, &refsig, 0.0, &[0.0; 4], cfg.horizon, ThetaMode::MinOverHorizon).unwrap();
    println!("theta: {:?} -> {th:.4}", t.elapsed());

    // time one rollout evaluation
    let controls = vec![0.0; 41];
    let t = Instant::now();
    let n_iter = 100;
    let mut acc = 0.0;
    for _ in 0..n_iter {
        let s = evaluate_rollout(&plant, &spec, &refsig, 0.0, &[0.0; 4], &controls, &cfg, &cost, th);
        acc += s.objective;
    }
    println!("rollout: {:?} each (acc {acc:.3})", t.elapsed() / n_iter);

    // time one full OCP solve at t=0
    let t = Instant::now();
    let sol = solve_ocp(&plant, &spec, &refsig, 0.0, &[0.0; 4], &cfg, &cost, th, None).unwrap();
    println!(
        "solve: {:?}, iters {}, evals {}, obj {:.4}, fc_obj {:.4}, converged {}",
        t.elapsed(),
        sol.diagnostics.iterations,
        sol.diagnostics.obj_evals,
        sol.objective,
        sol.diagnostics.fc_objective,
        sol.diagnostics.converged
    );
}
