//! Saliency evaluation: Average Drop, Average Increase, and the
//! Insertion/Deletion AUC pair.
//!
//! Perturbations run at patch granularity — the model consumes whole
//! patches, so sub-patch pixel changes are invisible to it between patch
//! boundaries. The drop/increase pair uses soft masking (the image
//! multiplied by the upsampled `[0,1]` saliency map); the curve pair
//! reveals or removes whole patches in descending saliency order with
//! ties broken by ascending patch index. The target class is always the
//! model's prediction on the clean image.

use crate::attribution::{explain, Method, RolloutConfig, SaliencyMap};
use crate::error::{Error, Result};
use crate::io::{gaussian_blur, upsample_grid, Image};
use crate::tensor::Tensor;
use crate::vit::{predict, ModelParams};
use serde::{Deserialize, Serialize};

/// Image the insertion pass starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InsertionBaseline {
    /// Gaussian blur of the input with `sigma = patch_size / 2`.
    Blur,
    /// Constant 0.5 gray.
    Gray,
}

/// What deleted patches are replaced with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeletionBaseline {
    Zero,
    Gray,
}

/// Step schedule and baselines for the curve metrics. Granularity is
/// fixed at the patch level.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Number of curve steps after the baseline point; the default is one
    /// patch per step (`P^2` steps).
    pub steps: usize,
    pub insertion_baseline: InsertionBaseline,
    pub deletion_baseline: DeletionBaseline,
}

impl PerturbationConfig {
    /// One patch per step over a `grid_side x grid_side` patch grid.
    pub fn defaults_for(grid_side: usize) -> PerturbationConfig {
        PerturbationConfig {
            steps: grid_side * grid_side,
            insertion_baseline: InsertionBaseline::Blur,
            deletion_baseline: DeletionBaseline::Zero,
        }
    }

    fn validate(&self, num_patches: usize) -> Result<()> {
        if self.steps == 0 || self.steps > num_patches {
            return Err(Error::param(format!(
                "steps must lie in 1..={num_patches}, got {}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Clean and masked target-class probabilities of one image.
#[derive(Clone, Copy, Debug)]
pub struct Confidence {
    pub target_class: usize,
    /// `y_c`: probability on the full image.
    pub full: f64,
    /// `o_c`: probability on the soft-masked image.
    pub masked: f64,
}

/// Multiplies every channel by the bilinearly upsampled saliency grid.
pub fn apply_mask(image: &Image, grid: &Tensor) -> Result<Image> {
    let mask = upsample_grid(grid, image.width(), image.height())?;
    let pixels = image
        .pixels()
        .iter()
        .enumerate()
        .map(|(i, &v)| v * mask[i / 3].clamp(0.0, 1.0))
        .collect();
    Ok(Image::from_pixels_clamped(image.width(), image.height(), pixels))
}

/// Target-class probability on the saliency-masked image, with the clean
/// probability for reference. The target class is the prediction on the
/// clean image.
pub fn explanation_confidence(
    params: &ModelParams,
    image: &Image,
    map: &SaliencyMap,
) -> Result<Confidence> {
    let (target_class, probs) = predict(params, image)?;
    let masked_image = apply_mask(image, &map.grid)?;
    let (_, masked_probs) = predict(params, &masked_image)?;
    Ok(Confidence { target_class, full: probs[target_class], masked: masked_probs[target_class] })
}

/// Mean over images of `max(0, y_c - o_c) / y_c * 100`.
pub fn average_drop(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::param("average_drop of an empty batch".to_string()));
    }
    let sum: f64 = pairs.iter().map(|&(y, o)| ((y - o).max(0.0) / y) * 100.0).sum();
    Ok(sum / pairs.len() as f64)
}

/// Percentage of images with `o_c > y_c` (strict).
pub fn average_increase(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::param("average_increase of an empty batch".to_string()));
    }
    let count = pairs.iter().filter(|&&(y, o)| o > y).count();
    Ok(count as f64 / pairs.len() as f64 * 100.0)
}

/// Patch indices in descending saliency order, ties broken by ascending
/// index for determinism.
pub fn patch_order(grid: &Tensor) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grid.numel()).collect();
    order.sort_by(|&a, &b| {
        grid.data()[b]
            .partial_cmp(&grid.data()[a])
            .expect("saliency values are finite")
            .then(a.cmp(&b))
    });
    order
}

/// Trapezoidal area under a `(x, y)` curve.
pub fn trapezoid_auc(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) * 0.5)
        .sum()
}

fn copy_patch(dst: &mut Image, src: &Image, patch: usize, grid_side: usize) {
    let ps = src.width() / grid_side;
    let (pr, pc) = (patch / grid_side, patch % grid_side);
    for y in pr * ps..(pr + 1) * ps {
        for x in pc * ps..(pc + 1) * ps {
            for c in 0..3 {
                dst.set(x, y, c, src.get(x, y, c));
            }
        }
    }
}

fn check_map(params: &ModelParams, image: &Image, map: &SaliencyMap) -> Result<usize> {
    let side = params.config.grid_side();
    if map.grid.shape() != [side, side] {
        return Err(Error::dim(format!(
            "saliency grid {:?} does not match the {side}x{side} patch grid",
            map.grid.shape()
        )));
    }
    if image.width() != params.config.image_size || image.height() != params.config.image_size {
        return Err(Error::dim(format!(
            "image is {}x{}, model expects {}",
            image.width(),
            image.height(),
            params.config.image_size
        )));
    }
    Ok(side)
}

fn run_curve(
    params: &ModelParams,
    start: Image,
    patch_source: &Image,
    order: &[usize],
    steps: usize,
    grid_side: usize,
    target_class: usize,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let num_patches = order.len();
    let mut current = start;
    let mut curve = Vec::with_capacity(steps + 1);
    let (_, probs) = predict(params, &current)?;
    curve.push((0.0, probs[target_class]));
    let mut touched = 0usize;
    for s in 1..=steps {
        // Integer schedule: monotone, covers every patch exactly once,
        // and lands exactly on num_patches at the final step.
        let goal = num_patches * s / steps;
        while touched < goal {
            copy_patch(&mut current, patch_source, order[touched], grid_side);
            touched += 1;
        }
        let (_, probs) = predict(params, &current)?;
        curve.push((goal as f64 / num_patches as f64, probs[target_class]));
    }
    let auc = trapezoid_auc(&curve);
    Ok((curve, auc))
}

/// Starting from the insertion baseline, reveals patches of the original
/// image in saliency order, recording the target probability after each
/// step (step 0 included). The x axis is the fraction revealed.
pub fn insertion_curve(
    params: &ModelParams,
    image: &Image,
    map: &SaliencyMap,
    config: &PerturbationConfig,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let side = check_map(params, image, map)?;
    config.validate(side * side)?;
    let (target_class, _) = predict(params, image)?;
    let baseline = match config.insertion_baseline {
        InsertionBaseline::Blur => gaussian_blur(image, params.config.patch_size as f64 / 2.0)?,
        InsertionBaseline::Gray => Image::filled(image.width(), image.height(), 0.5),
    };
    let order = patch_order(&map.grid);
    run_curve(params, baseline, image, &order, config.steps, side, target_class)
}

/// Mirror of insertion: starting from the original image, replaces
/// patches with the deletion baseline in saliency order. Lower is better.
pub fn deletion_curve(
    params: &ModelParams,
    image: &Image,
    map: &SaliencyMap,
    config: &PerturbationConfig,
) -> Result<(Vec<(f64, f64)>, f64)> {
    let side = check_map(params, image, map)?;
    config.validate(side * side)?;
    let (target_class, _) = predict(params, image)?;
    let baseline = match config.deletion_baseline {
        DeletionBaseline::Zero => Image::black(image.width(), image.height()),
        DeletionBaseline::Gray => Image::filled(image.width(), image.height(), 0.5),
    };
    let order = patch_order(&map.grid);
    run_curve(params, image.clone(), &baseline, &order, config.steps, side, target_class)
}

/// Settings echoed into a [`MetricReport`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportConfig {
    pub rollout: RolloutConfig,
    pub perturbation: PerturbationConfig,
    pub seed: u64,
    pub images: usize,
}

/// Per-image insertion and deletion curves as `[fraction, probability]`
/// pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageCurves {
    pub insertion: Vec<[f64; 2]>,
    pub deletion: Vec<[f64; 2]>,
}

/// Aggregated scores of one method over one dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub config: ReportConfig,
    /// Percent, lower is better.
    pub avg_drop: f64,
    /// Percent, higher is better.
    pub avg_increase: f64,
    /// Mean AUC in `[0,1]`, higher is better.
    pub insertion_auc: f64,
    /// Mean AUC in `[0,1]`, lower is better.
    pub deletion_auc: f64,
    pub curves: Vec<ImageCurves>,
}

/// Runs `method` over every image: saliency, soft-mask confidence, and
/// both curves, aggregated into a [`MetricReport`]. Deterministic given
/// the seed; the random baseline derives one sub-seed per image index.
pub fn evaluate_method(
    params: &ModelParams,
    dataset: &[(Image, usize)],
    method: Method,
    rollout_config: &RolloutConfig,
    perturbation: &PerturbationConfig,
    seed: u64,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::param("evaluation dataset is empty".to_string()));
    }
    perturbation.validate(params.config.num_patches())?;
    let mut pairs = Vec::with_capacity(dataset.len());
    let mut curves = Vec::with_capacity(dataset.len());
    let mut insertion_sum = 0.0;
    let mut deletion_sum = 0.0;
    for (index, (image, _)) in dataset.iter().enumerate() {
        let explanation =
            explain(params, image, method, rollout_config, seed.wrapping_add(index as u64))?;
        let confidence = explanation_confidence(params, image, &explanation.map)?;
        pairs.push((confidence.full, confidence.masked));
        let (ins, ins_auc) = insertion_curve(params, image, &explanation.map, perturbation)?;
        let (del, del_auc) = deletion_curve(params, image, &explanation.map, perturbation)?;
        insertion_sum += ins_auc;
        deletion_sum += del_auc;
        curves.push(ImageCurves {
            insertion: ins.iter().map(|&(x, y)| [x, y]).collect(),
            deletion: del.iter().map(|&(x, y)| [x, y]).collect(),
        });
    }
    let n = dataset.len() as f64;
    Ok(MetricReport {
        method: method.as_str().to_string(),
        config: ReportConfig {
            rollout: *rollout_config,
            perturbation: *perturbation,
            seed,
            images: dataset.len(),
        },
        avg_drop: average_drop(&pairs)?,
        avg_increase: average_increase(&pairs)?,
        insertion_auc: insertion_sum / n,
        deletion_auc: deletion_sum / n,
        curves,
    })
}
