//! The `gmar` command line: train the toy model, explain single images,
//! evaluate methods over a dataset, and compare two methods side by side.
//!
//! Exit codes: 0 success, 2 usage or parameter errors, 3 data or format
//! errors. Messages go to stderr; stdout carries machine-readable output
//! only. Every subcommand is deterministic given its flags.

use crate::attribution::{
    difference_map, explain, Explanation, Method, NormKind, RolloutConfig, WeightScope,
};
use crate::error::{Error, Result};
use crate::io::{
    generate_synthetic, load_image_ppm, load_weights, render_heatmap, save_image_ppm,
    save_weights, Image, RenderMode, SyntheticDatasetSpec,
};
use crate::metrics::{evaluate_method, PerturbationConfig};
use crate::train::{train, TrainConfig};
use crate::vit::{ModelParams, ViTConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;

#[derive(Parser)]
#[command(
    name = "gmar",
    version,
    about = "Gradient-weighted attention rollout for a toy Vision Transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the toy model on the synthetic quadrant dataset.
    TrainToy(TrainToyArgs),
    /// Explain one PPM image with a saliency method.
    Explain(ExplainArgs),
    /// Score a method on a synthetic dataset with all four metrics.
    Evaluate(EvaluateArgs),
    /// Run two methods on one image and render their difference map.
    Compare(CompareArgs),
}

#[derive(Args)]
struct TrainToyArgs {
    /// Output weight file (history JSON is written next to it).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    /// Total training images (split evenly over the four classes).
    #[arg(long, default_value_t = 800)]
    samples: usize,
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Input image (binary PPM, P6).
    #[arg(long)]
    image: PathBuf,
    /// rollout | gmar-l1 | gmar-l2 | gradcam | random
    #[arg(long)]
    method: String,
    /// Residual strength of the identity term in the rollout recursions.
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    /// per-layer | global
    #[arg(long, default_value = "per-layer")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes <prefix>.map.ppm, <prefix>.overlay.ppm,
    /// <prefix>.json.
    #[arg(long)]
    out: String,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    weights: PathBuf,
    /// Inline dataset spec: synthetic:SEED:N (N images, balanced classes).
    #[arg(long)]
    dataset: String,
    /// rollout | gmar-l1 | gmar-l2 | gradcam | random
    #[arg(long)]
    method: String,
    /// Curve steps (default: one patch per step).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value = "per-layer")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output report JSON path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Exactly two comma-separated methods, e.g. rollout,gmar-l1.
    #[arg(long)]
    methods: String,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value = "per-layer")]
    scope: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix for the rendered maps and the JSON summary.
    #[arg(long)]
    out: String,
}

/// A failure carrying its process exit code.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    fn data(message: impl Into<String>) -> Failure {
        Failure { code: EXIT_DATA, message: message.into() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses and runs a full invocation, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders help/version on stdout (exit 0) and usage
            // errors on stderr (exit 2).
            let _ = e.print();
            return if e.exit_code() == 0 { 0 } else { EXIT_USAGE };
        }
    };
    let outcome = match cli.command {
        Command::TrainToy(args) => cmd_train_toy(args),
        Command::Explain(args) => cmd_explain(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, Failure> {
    Method::from_str(s).map_err(|e| Failure::usage(e.to_string()))
}

fn parse_scope(s: &str) -> std::result::Result<WeightScope, Failure> {
    match s {
        "per-layer" => Ok(WeightScope::PerLayer),
        "global" => Ok(WeightScope::Global),
        other => Err(Failure::usage(format!(
            "unknown scope '{other}' (expected per-layer or global)"
        ))),
    }
}

fn rollout_config(alpha: f64, scope: &str, method: Method) -> std::result::Result<RolloutConfig, Failure> {
    let config = RolloutConfig {
        alpha,
        norm_kind: if method == Method::GmarL2 { NormKind::L2 } else { NormKind::L1 },
        weight_scope: parse_scope(scope)?,
        row_normalize: true,
    };
    config.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(config)
}

fn load_model(path: &Path) -> std::result::Result<ModelParams, Failure> {
    load_weights(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))
}

fn load_input_image(path: &Path, config: &ViTConfig) -> std::result::Result<Image, Failure> {
    let image =
        load_image_ppm(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
    if image.width() != config.image_size || image.height() != config.image_size {
        return Err(Failure::usage(format!(
            "image is {}x{} but the model expects {}x{}",
            image.width(),
            image.height(),
            config.image_size,
            config.image_size
        )));
    }
    Ok(image)
}

/// Parses `synthetic:SEED:N` into a generated dataset.
fn parse_dataset(spec: &str) -> std::result::Result<Vec<(Image, usize)>, Failure> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [kind, seed, count] = parts.as_slice() else {
        return Err(Failure::usage(format!(
            "dataset spec '{spec}' must look like synthetic:SEED:N"
        )));
    };
    if *kind != "synthetic" {
        return Err(Failure::usage(format!("unknown dataset kind '{kind}'")));
    }
    let seed: u64 =
        seed.parse().map_err(|_| Failure::usage(format!("bad dataset seed '{seed}'")))?;
    let count: usize =
        count.parse().map_err(|_| Failure::usage(format!("bad dataset size '{count}'")))?;
    let spec = SyntheticDatasetSpec::default();
    if count == 0 || count % spec.num_classes != 0 {
        return Err(Failure::usage(format!(
            "dataset size {count} must be a positive multiple of {}",
            spec.num_classes
        )));
    }
    generate_synthetic(&SyntheticDatasetSpec {
        samples_per_class: count / spec.num_classes,
        seed,
        ..spec
    })
    .map_err(|e| Failure::usage(e.to_string()))
}

fn write_json(path: &Path, value: &impl Serialize) -> CmdResult {
    let json = serde_json::to_vec_pretty(value)
        .map_err(|e| Failure::data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, json)
        .map_err(|e| Failure::data(format!("writing {}: {e}", path.display())))
}

fn cmd_train_toy(args: TrainToyArgs) -> CmdResult {
    if args.epochs == 0 {
        return Err(Failure::usage("--epochs must be at least 1".to_string()));
    }
    if args.samples == 0 || args.samples % 4 != 0 {
        return Err(Failure::usage(format!(
            "--samples must be a positive multiple of 4, got {}",
            args.samples
        )));
    }
    // Validate writability up front so a bad path fails before training.
    std::fs::write(&args.out, b"")
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", args.out.display())))?;

    let dataset = generate_synthetic(&SyntheticDatasetSpec {
        samples_per_class: args.samples / 4,
        seed: args.seed,
        ..Default::default()
    })
    .map_err(|e| Failure::usage(e.to_string()))?;
    let train_config =
        TrainConfig { seed: args.seed, epochs: args.epochs, ..Default::default() };
    let (params, history) = train(&ViTConfig::toy(), &train_config, &dataset)
        .map_err(|e| Failure::data(e.to_string()))?;

    save_weights(&params, &args.out)
        .map_err(|e| Failure::usage(format!("cannot write {}: {e}", args.out.display())))?;
    let history_path = args.out.with_extension("history.json");
    write_json(&history_path, &history)?;

    let last = history.last().expect("at least the baseline row");
    println!(
        "{}\t{}\t{:.6}\t{:.4}",
        args.out.display(),
        last.epoch,
        last.loss,
        last.accuracy
    );
    Ok(())
}

#[derive(Serialize)]
struct ExplainReport<'a> {
    method: &'a str,
    alpha: f64,
    scope: WeightScope,
    seed: u64,
    predicted_class: usize,
    probabilities: &'a [f64],
    /// Per-layer head weight vectors (gmar methods only).
    head_weights: Option<&'a crate::attribution::HeadWeights>,
    degenerate_constant_map: bool,
}

fn run_explanation(
    params: &ModelParams,
    image: &Image,
    method: Method,
    config: &RolloutConfig,
    seed: u64,
) -> std::result::Result<Explanation, Failure> {
    explain(params, image, method, config, seed).map_err(|e| match e {
        Error::Parameter(_) | Error::Config(_) | Error::Dimension(_) => {
            Failure::usage(e.to_string())
        }
        _ => Failure::data(e.to_string()),
    })
}

fn cmd_explain(args: ExplainArgs) -> CmdResult {
    let method = parse_method(&args.method)?;
    let config = rollout_config(args.alpha, &args.scope, method)?;
    let params = load_model(&args.weights)?;
    let image = load_input_image(&args.image, &params.config)?;

    let explanation = run_explanation(&params, &image, method, &config, args.seed)?;
    let map_image = render_heatmap(&explanation.map.grid, &image, RenderMode::Raw)
        .map_err(|e| Failure::data(e.to_string()))?;
    let overlay = render_heatmap(&explanation.map.grid, &image, RenderMode::Overlay)
        .map_err(|e| Failure::data(e.to_string()))?;
    save_image_ppm(&map_image, format!("{}.map.ppm", args.out))
        .map_err(|e| Failure::data(e.to_string()))?;
    save_image_ppm(&overlay, format!("{}.overlay.ppm", args.out))
        .map_err(|e| Failure::data(e.to_string()))?;
    write_json(
        Path::new(&format!("{}.json", args.out)),
        &ExplainReport {
            method: method.as_str(),
            alpha: config.alpha,
            scope: config.weight_scope,
            seed: args.seed,
            predicted_class: explanation.predicted_class,
            probabilities: &explanation.probabilities,
            head_weights: explanation.head_weights.as_ref(),
            degenerate_constant_map: explanation.map.degenerate_constant,
        },
    )?;
    println!(
        "{}\t{}\t{}",
        args.out, explanation.predicted_class, method
    );
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> CmdResult {
    let method = parse_method(&args.method)?;
    let config = rollout_config(args.alpha, &args.scope, method)?;
    let params = load_model(&args.weights)?;
    let dataset = parse_dataset(&args.dataset)?;
    let mut perturbation = PerturbationConfig::defaults_for(params.config.grid_side());
    if let Some(steps) = args.steps {
        perturbation.steps = steps;
    }
    let report =
        evaluate_method(&params, &dataset, method, &config, &perturbation, args.seed).map_err(
            |e| match e {
                Error::Parameter(_) => Failure::usage(e.to_string()),
                _ => Failure::data(e.to_string()),
            },
        )?;
    write_json(&args.out, &report)?;
    println!(
        "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
        report.method, report.avg_drop, report.avg_increase, report.insertion_auc, report.deletion_auc
    );
    Ok(())
}

#[derive(Serialize)]
struct CompareReport<'a> {
    methods: [&'a str; 2],
    alpha: f64,
    scope: WeightScope,
    seed: u64,
    predicted_class: usize,
    probabilities: &'a [f64],
    /// Mean absolute difference between the two maps.
    mean_abs_difference: f64,
    files: Vec<String>,
}

fn cmd_compare(args: CompareArgs) -> CmdResult {
    let names: Vec<&str> = args.methods.split(',').collect();
    let [first, second] = names.as_slice() else {
        return Err(Failure::usage(format!(
            "--methods needs exactly two comma-separated methods, got '{}'",
            args.methods
        )));
    };
    let methods = [parse_method(first)?, parse_method(second)?];
    let params = load_model(&args.weights)?;
    let image = load_input_image(&args.image, &params.config)?;

    let mut files = Vec::new();
    let mut explanations = Vec::new();
    for method in methods {
        let config = rollout_config(args.alpha, &args.scope, method)?;
        let explanation = run_explanation(&params, &image, method, &config, args.seed)?;
        let map_path = format!("{}.{}.map.ppm", args.out, method);
        let overlay_path = format!("{}.{}.overlay.ppm", args.out, method);
        let map_image = render_heatmap(&explanation.map.grid, &image, RenderMode::Raw)
            .map_err(|e| Failure::data(e.to_string()))?;
        let overlay = render_heatmap(&explanation.map.grid, &image, RenderMode::Overlay)
            .map_err(|e| Failure::data(e.to_string()))?;
        save_image_ppm(&map_image, &map_path).map_err(|e| Failure::data(e.to_string()))?;
        save_image_ppm(&overlay, &overlay_path).map_err(|e| Failure::data(e.to_string()))?;
        files.push(map_path);
        files.push(overlay_path);
        explanations.push(explanation);
    }

    let diff = difference_map(&explanations[0].map, &explanations[1].map)
        .map_err(|e| Failure::data(e.to_string()))?;
    let diff_image = render_heatmap(&diff, &image, RenderMode::Diverging)
        .map_err(|e| Failure::data(e.to_string()))?;
    let diff_path = format!("{}.diff.ppm", args.out);
    save_image_ppm(&diff_image, &diff_path).map_err(|e| Failure::data(e.to_string()))?;
    files.push(diff_path);

    let mean_abs = diff.data().iter().map(|v| v.abs()).sum::<f64>() / diff.numel() as f64;
    write_json(
        Path::new(&format!("{}.json", args.out)),
        &CompareReport {
            methods: [methods[0].as_str(), methods[1].as_str()],
            alpha: args.alpha,
            scope: parse_scope(&args.scope)?,
            seed: args.seed,
            predicted_class: explanations[0].predicted_class,
            probabilities: &explanations[0].probabilities,
            mean_abs_difference: mean_abs,
            files: files.clone(),
        },
    )?;
    println!("{}\t{}\t{:.6}", args.out, args.methods, mean_abs);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_exits_with_usage_code() {
        assert_eq!(run(["gmar", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn unknown_flag_is_an_error() {
        assert_eq!(run(["gmar", "train-toy", "--out", "/tmp/x.gmarw", "--bogus"]), EXIT_USAGE);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(run(["gmar", "--help"]), 0);
    }

    #[test]
    fn dataset_spec_parsing() {
        assert!(parse_dataset("synthetic:7:8").is_ok());
        for bad in ["synthetic:7", "csv:1:8", "synthetic:x:8", "synthetic:7:9", "synthetic:7:0"] {
            let err = parse_dataset(bad).err().expect(bad);
            assert_eq!(err.code, EXIT_USAGE, "{bad}");
        }
    }
}
