//! Samples LTI filters and nonlinear systems and drives them with a chirp.
//!
//! `cargo run --release --example simulate_systems -- [count] [seed]`

use iclsysid::signals::{generate, rmse, SignalKind};
use iclsysid::systems::{frequency_response, sample_system, simulate, SystemConfig, SystemModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let count: u64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(4);
    let seed: u64 = std::env::args().nth(2).and_then(|a| a.parse().ok()).unwrap_or(0);
    let x = generate(&SignalKind::default_chirp(), 2048, 0)?;
    let config = SystemConfig::default();
    for i in 0..count {
        for lti in [true, false] {
            let spec = sample_system(i, seed + 2 * i + u64::from(lti), lti, &config)?;
            let y = simulate(&spec, &x)?;
            let y_norm = y.normalize();
            match &spec.model {
                SystemModel::Lti(l) => {
                    let gains: Vec<String> = frequency_response(l, &[0.0, 0.05, 0.25, 0.5])
                        .iter()
                        .map(|h| format!("{:.3}", h.norm()))
                        .collect();
                    println!(
                        "lti {:?} order {} cutoffs {:?}: |H| at 0/0.05/0.25/0.5 = {}; output peak {:.3}",
                        l.filter_class,
                        l.order,
                        l.cutoffs,
                        gains.join("/"),
                        y.peak()
                    );
                }
                SystemModel::Nti(n) => println!(
                    "nti order {} deadzone [{:.3}, {:.3}] saturation {:.3} play {:.3}: output peak {:.3}",
                    n.n, n.deadzone_neg, n.deadzone_pos, n.saturation, n.stiction, y.peak()
                ),
            }
            println!("    rmse(input, normalized output) = {:.4}", rmse(&x.normalize(), &y_norm)?);
        }
    }
    Ok(())
}
