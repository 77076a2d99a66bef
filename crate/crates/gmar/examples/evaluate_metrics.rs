//! Scores every saliency method on a synthetic benchmark with the four
//! evaluation metrics and prints a comparison table.
//!
//! ```bash
//! cargo run --release -p gmar --example evaluate_metrics -- [weights.gmarw] [images] [seed]
//! ```
//!
//! Without a weights file it trains the toy model from scratch first.

use gmar::attribution::{Method, RolloutConfig};
use gmar::io::{generate_synthetic, load_weights, SyntheticDatasetSpec};
use gmar::metrics::{evaluate_method, PerturbationConfig};
use gmar::train::{train, TrainConfig};
use gmar::vit::ViTConfig;

fn main() -> gmar::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let images: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(42);

    let params = match args.get(1) {
        Some(path) => load_weights(path)?,
        None => {
            println!("no weights given; training the toy model (seed 42)...");
            let dataset = generate_synthetic(&SyntheticDatasetSpec {
                samples_per_class: 200,
                seed: 42,
                ..Default::default()
            })?;
            let (params, history) = train(&ViTConfig::toy(), &TrainConfig { seed: 42, ..Default::default() }, &dataset)?;
            println!("final training accuracy: {:.3}", history.last().unwrap().accuracy);
            params
        }
    };

    let dataset = generate_synthetic(&SyntheticDatasetSpec {
        samples_per_class: images / 4,
        seed,
        ..Default::default()
    })?;
    let rollout_config = RolloutConfig::default();
    let mut perturbation = PerturbationConfig::defaults_for(params.config.grid_side());
    if std::env::var("GMAR_INSERTION").as_deref() == Ok("gray") {
        perturbation.insertion_baseline = gmar::metrics::InsertionBaseline::Gray;
    }

    println!(
        "\n{:<10} {:>9} {:>8} {:>10} {:>9}",
        "method", "avg_drop", "avg_inc", "insertion", "deletion"
    );
    let start = std::time::Instant::now();
    for method in Method::ALL {
        let report = evaluate_method(&params, &dataset, method, &rollout_config, &perturbation, seed)?;
        println!(
            "{:<10} {:>9.2} {:>8.1} {:>10.4} {:>9.4}",
            report.method, report.avg_drop, report.avg_increase, report.insertion_auc, report.deletion_auc
        );
    }
    println!("\nevaluated {} images x {} methods in {:.1}s", dataset.len(), Method::ALL.len(), start.elapsed().as_secs_f64());
    Ok(())
}
