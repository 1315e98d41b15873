//! Closed-loop speed control of single- and two-inertia motor models with PI
//! gains and inverse-dynamics feedforward. With a trained codec and behavior
//! model it also runs the full in-context feedforward protocol.
//!
//! `cargo run --release --example control_loop -- [codec.bin model.bin]`

use std::path::Path;

use iclsysid::behavior::BehaviorModel;
use iclsysid::codec::Codec;
use iclsysid::controlsim::{experiment_protocol, physics_ff, simulate_closed_loop, PIGains, ProtocolConfig, METHODS};
use iclsysid::signals::generate;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for (name, protocol) in [("single inertia", ProtocolConfig::single_inertia()), ("two inertia", ProtocolConfig::two_inertia())] {
        println!("{name}");
        let t = protocol.length;
        for (i, plant) in protocol.conditions.iter().enumerate() {
            let tuned = PIGains::pole_placement(plant, protocol.settling_fraction * t as f64 * plant.dt, protocol.output_limit)?;
            let untuned = tuned.scaled(protocol.untuned_factor);
            for q in &protocol.queries {
                let target = generate(&q.kind, t, 0)?;
                let ff = physics_ff(plant, &target)?;
                let rows = [
                    simulate_closed_loop(plant, &untuned, &target, None)?.tracking_rmse()?,
                    simulate_closed_loop(plant, &tuned, &target, None)?.tracking_rmse()?,
                    simulate_closed_loop(plant, &untuned, &target, Some(&ff))?.tracking_rmse()?,
                ];
                println!(
                    "  condition {i} {:<5} untuned {:.4}  tuned {:.4}  untuned + physics ff {:.4}",
                    q.name, rows[0], rows[1], rows[2]
                );
            }
        }
    }

    let args: Vec<String> = std::env::args().skip(1).collect();
    if let [codec, model] = args.as_slice() {
        let codec = Codec::load(Path::new(codec))?;
        let model = BehaviorModel::load(Path::new(model))?;
        let report = experiment_protocol(&ProtocolConfig::single_inertia(), &model, &codec)?;
        println!("held-out mean tracking rmse after finetuning on {} examples:", report.finetune_examples);
        for m in METHODS.iter().copied().chain(["icl_ff_pretrained"]) {
            if let Some(v) = report.held_out_mean(m) {
                println!("  {m:<18} {v:.4}");
            }
        }
    }
    Ok(())
}
