use fmpc_core::fmpc::{run_funnel_mpc, CostKind, MpcConfig, StageCost};
use fmpc_core::funnel::{FunnelLevel, FunnelSpec, ReferenceSignal};
use fmpc_core::plant::{MassOnCar, MassOnCarParams};
use fmpc_core::simloop::{performance_measure, simulate_fc_zoh, SimOptions};
use std::time::Instant;

fn main() {
    let plant = MassOnCar::new(MassOnCarParams::benchmark(std::f64::consts::FRAC_PI_4)).unwrap();
    let spec = FunnelSpec::new(vec![
        FunnelLevel::new(0.1, 5.0, 2.0),
        FunnelLevel::new(0.5, 10.0, 2.0),
    ])
    .unwrap();
    let refsig = ReferenceSignal::cosine();
    let opts = SimOptions { record_intersample: false, ..Default::default() };

    let mode = std::env::args().nth(1).unwrap_or_else(|| "sweep".into());

    if mode == "sweep" {
        for tau_inv in [40.0, 100.0, 200.0, 300.0, 500.0, 600.0, 1200.0] {
            let t = Instant::now();
            let rec =
                simulate_fc_zoh(&plant, &spec, &refsig, 0.0, &[0.0; 4], 10.0, 1.0 / tau_inv, &opts)
                    .unwrap();
            let (lo, hi) = rec.control_range();
            println!(
                "tau=1/{tau_inv:<6} min_margin={:<12.6} feasible={:<5} first_viol={:?} u_range=[{:.2},{:.2}] trunc={:?} ({:?})",
                rec.min_margin,
                rec.feasible,
                rec.first_violation,
                lo,
                hi,
                rec.truncated_at,
                t.elapsed()
            );
        }
    }

    if mode == "mpc" {
        let cost = StageCost::new(CostKind::Classical, 0.005).unwrap();
        let cfg = MpcConfig::new(41.0 / 40.0, 1.0 / 40.0).unwrap();
        let t = Instant::now();
        let run = run_funnel_mpc(&plant, &spec, &refsig, &[0.0; 4], &cfg, &cost, 10.0, &opts)
            .unwrap();
        println!("mpc elapsed {:?}", t.elapsed());
        let perf = performance_measure(&run.record, &cost, 1.0 / 40.0).unwrap();
        let (lo, hi) = run.record.control_range();
        println!(
            "mpc feasible={} min_margin={:.6} perf={perf:.4} u=[{lo:.2},{hi:.2}]",
            run.record.feasible, run.record.min_margin
        );
        let iters: usize = run.steps.iter().map(|s| s.iterations).sum();
        let conv = run.steps.iter().filter(|s| s.converged).count();
        println!("total iters {iters}, converged {conv}/{}", run.steps.len());

        let zoh =
            simulate_fc_zoh(&plant, &spec, &refsig, 0.0, &[0.0; 4], 10.0, 1.0 / 40.0, &opts)
                .unwrap();
        let perf_fc = performance_measure(&zoh, &cost, 1.0 / 40.0).unwrap();
        let (flo, fhi) = zoh.control_range();
        println!(
            "fc-zoh(1/40) feasible={} min_margin={:.6} perf={perf_fc:.4} u=[{flo:.2},{fhi:.2}]",
            zoh.feasible, zoh.min_margin
        );
        println!("ratio mpc/fc = {:.4}", perf / perf_fc);
    }
}
