//! Scratch benchmark sweep (temporary; not part of the deliverable).

use gmar::attribution::{Method, RolloutConfig};
use gmar::io::{generate_synthetic, SyntheticDatasetSpec};
use gmar::metrics::{evaluate_method, PerturbationConfig};
use gmar::train::{train, TrainConfig};
use gmar::vit::ViTConfig;

fn main() -> gmar::Result<()> {
    let eval = generate_synthetic(&SyntheticDatasetSpec { samples_per_class: 50, seed: 42, ..Default::default() })?;
    let rollout_config = RolloutConfig::default();
    let perturbation = PerturbationConfig::defaults_for(4);

    for samples_per_class in [100usize, 200] {
        for epochs in [15usize, 30] {
            let dataset = generate_synthetic(&SyntheticDatasetSpec {
                samples_per_class,
                seed: 42,
                ..Default::default()
            })?;
            let tc = TrainConfig { seed: 42, epochs, ..Default::default() };
            let (params, history) = train(&ViTConfig::toy(), &tc, &dataset)?;
            println!(
                "\n== samples/class {samples_per_class}, epochs {epochs}: final acc {:.3}",
                history.last().unwrap().accuracy
            );
            println!("{:<10} {:>9} {:>8} {:>10} {:>9}", "method", "avg_drop", "avg_inc", "insertion", "deletion");
            for method in Method::ALL {
                let r = evaluate_method(&params, &eval, method, &rollout_config, &perturbation, 42)?;
                println!(
                    "{:<10} {:>9.2} {:>8.1} {:>10.4} {:>9.4}",
                    r.method, r.avg_drop, r.avg_increase, r.insertion_auc, r.deletion_auc
                );
            }
        }
    }
    Ok(())
}
