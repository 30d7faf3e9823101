//! Solves one channel and compares the three sampling policies by
//! simulation. Run with `cargo run --release --example compare_policies`.

use remest::channel::{ChannelModel, DelayModel};
use remest::sim::{run_experiment, Policy, SimConfig};
use remest::solver::{solve_age_opt, solve_mse_opt, SolverConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let channel = ChannelModel::new(0.65, DelayModel::lognormal_normalized(1.5)?)?;
    let cfg = SolverConfig { eps2: 1e-4, ..SolverConfig::default() };

    let optimal = solve_mse_opt(&channel, &cfg)?;
    let age = solve_age_opt(&channel, &cfg)?;
    println!(
        "solver: mse_opt = {:.5}, v = {:.5}, age_opt = {:.5}, age threshold = {:.5}",
        optimal.mse_opt, optimal.v, age.age_opt, age.threshold
    );

    let sc = SimConfig {
        dt: 1e-3,
        horizon: 2e5,
        replications: 10,
        seed: 1,
        warmup_fraction: 0.1,
    };
    for (name, policy) in [
        ("optimal", Policy::SignalAwareThreshold(optimal.v)),
        ("age-optimal", Policy::AgeThreshold(age.threshold)),
        ("zero-wait", Policy::ZeroWait),
    ] {
        let sim = run_experiment(policy, &channel, &sc)?;
        println!(
            "{name:12} avg MSE {:7.4} ± {:.4}   avg age {:7.4}   sampling rate {:.4}",
            sim.avg_mse, sim.ci_halfwidth_mse, sim.avg_age, sim.sampling_rate
        );
    }
    Ok(())
}
