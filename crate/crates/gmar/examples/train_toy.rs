//! Trains the toy ViT on the synthetic quadrant dataset and saves the
//! weights plus the training history.
//!
//! ```bash
//! cargo run --release -p gmar --example train_toy -- [out_dir] [epochs] [samples] [lr]
//! ```

use gmar::io::{generate_synthetic, save_weights, SyntheticDatasetSpec};
use gmar::train::{train, TrainConfig};
use gmar::vit::ViTConfig;

fn main() -> gmar::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out_dir = args.get(1).cloned().unwrap_or_else(|| "target/train_toy".to_string());
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let samples: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(800);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(TrainConfig::default().learning_rate);

    let config = ViTConfig::toy();
    let train_config = TrainConfig { epochs, learning_rate: lr, seed: 42, augment: false, ..Default::default() };
    let dataset = generate_synthetic(&SyntheticDatasetSpec {
        samples_per_class: samples / 4,
        seed: train_config.seed,
        ..Default::default()
    })?;
    println!(
        "training: {} samples, {} epochs, lr {}, batch {}, seed {}",
        dataset.len(),
        train_config.epochs,
        train_config.learning_rate,
        train_config.batch_size,
        train_config.seed
    );

    let start = std::time::Instant::now();
    let (params, history) = train(&config, &train_config, &dataset)?;
    for row in &history {
        println!("epoch {:>3}  loss {:.4}  accuracy {:.3}", row.epoch, row.loss, row.accuracy);
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());

    std::fs::create_dir_all(&out_dir)?;
    let weights_path = format!("{out_dir}/toy.gmarw");
    save_weights(&params, &weights_path)?;
    std::fs::write(
        format!("{out_dir}/toy.history.json"),
        serde_json::to_string_pretty(&history).expect("history serializes"),
    )?;
    println!("weights -> {weights_path}");
    Ok(())
}
