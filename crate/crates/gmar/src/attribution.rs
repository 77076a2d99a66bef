//! Attention rollout, gradient-based head weighting, and the weighted
//! rollout, plus the Grad-CAM-style and random baselines.
//!
//! Three operators form the core:
//!
//! - [`attention_rollout`] multiplies per-layer head-averaged attention
//!   matrices, each augmented with an identity residual of strength
//!   `alpha` and optionally row-normalized. At the default `alpha = 1`
//!   this is the classic rollout product; at `alpha = 0` it degenerates
//!   to the bare attention product.
//! - [`head_weights`] turns the gradients of the predicted-class logit
//!   with respect to each head's attention probabilities into normalized
//!   importance weights, using either the L1 or L2 norm of the gradient
//!   block. A scope of all-zero gradients falls back to uniform weights.
//! - [`gmar_rollout`] replaces the uniform head average with the convex
//!   combination given by those weights and aggregates recursively:
//!   `R <- R * A_weighted + alpha * I`, row-normalizing each intermediate
//!   when configured.
//!
//! All operators are pure functions of their inputs and safe to run
//! concurrently over a batch of traces.

use crate::error::{Error, Result};
use crate::io::Image;
use crate::tensor::{ops, Tensor};
use crate::vit::{forward, ForwardTrace, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Which norm condenses a head's gradient block into one score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    L1,
    L2,
}

/// Whether head weights are normalized within each layer or across all
/// layers jointly (one weight vector applied to every layer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScope {
    PerLayer,
    Global,
}

/// Knobs shared by both rollout operators.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RolloutConfig {
    /// Residual strength of the identity term added at each layer.
    pub alpha: f64,
    pub norm_kind: NormKind,
    pub weight_scope: WeightScope,
    /// Keep every intermediate row-stochastic.
    pub row_normalize: bool,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        RolloutConfig {
            alpha: 1.0,
            norm_kind: NormKind::L1,
            weight_scope: WeightScope::PerLayer,
            row_normalize: true,
        }
    }
}

impl RolloutConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::param(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Normalized per-head importance weights: nonnegative, each scope vector
/// summing to one.
#[derive(Clone, Debug, Serialize)]
pub struct HeadWeights {
    pub scope: WeightScope,
    /// `num_layers` vectors of length `H` for per-layer scope; exactly one
    /// vector for global scope.
    pub weights: Vec<Vec<f64>>,
}

impl HeadWeights {
    /// Weight vector applied to `layer`.
    pub fn layer(&self, layer: usize) -> &[f64] {
        match self.scope {
            WeightScope::PerLayer => &self.weights[layer],
            WeightScope::Global => &self.weights[0],
        }
    }
}

/// Per-patch relevance grid in `[0,1]` after min-max normalization.
///
/// A constant raw map carries no ordering information; it normalizes to
/// all 0.5 and sets `degenerate_constant` so downstream masking neither
/// erases nor keeps the whole image.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    /// `[P, P]` grid in patch order.
    pub grid: Tensor,
    pub source_method: String,
    pub degenerate_constant: bool,
}

fn min_max_normalize(data: &[f64]) -> (Vec<f64>, bool) {
    let min = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > min {
        (data.iter().map(|v| (v - min) / (max - min)).collect(), false)
    } else {
        (vec![0.5; data.len()], true)
    }
}

fn check_attention_stack(tensors: &[Tensor], what: &str) -> Result<(usize, usize)> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::state(format!("{what}: no layers present")))?;
    if first.rank() != 3 || first.shape()[1] != first.shape()[2] {
        return Err(Error::dim(format!(
            "{what}: tensors must be [H, N, N], got {:?}",
            first.shape()
        )));
    }
    for t in tensors {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!(
                "{what}: inconsistent shapes {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
    }
    Ok((first.shape()[0], first.shape()[1]))
}

fn add_scaled_identity(matrix: &mut [f64], n: usize, alpha: f64) {
    if alpha == 0.0 {
        return;
    }
    for i in 0..n {
        matrix[i * n + i] += alpha;
    }
}

/// Convex (or arbitrary nonnegative) combination of head matrices:
/// `sum_h w[h] * attn[h]`, accumulated in ascending head order.
fn mix_heads(attn: &Tensor, w: &[f64]) -> Tensor {
    let (h, n) = (attn.shape()[0], attn.shape()[1]);
    let nn = n * n;
    let mut out = vec![0.0; nn];
    for (head, &wh) in w.iter().enumerate().take(h) {
        let block = &attn.data()[head * nn..(head + 1) * nn];
        for (o, &v) in out.iter_mut().zip(block) {
            *o += wh * v;
        }
    }
    Tensor::from_parts(vec![n, n], out)
}

/// Plain rollout over head-averaged attention matrices:
/// `R <- R * row_normalize(mean_heads(A_l) + alpha * I)` in layer order,
/// starting from the identity. Head weights are ignored.
pub fn rollout_matrix(attentions: &[Tensor], config: &RolloutConfig) -> Result<Tensor> {
    config.validate()?;
    let (h, n) = check_attention_stack(attentions, "attention_rollout")?;
    let uniform = vec![1.0 / h as f64; h];
    let backward = std::env::var("GMAR_ORDER").as_deref() == Ok("backward");
    let mut rollout = Tensor::identity(n);
    let layers: Vec<&Tensor> =
        if backward { attentions.iter().rev().collect() } else { attentions.iter().collect() };
    for attn in layers {
        let mut factor = mix_heads(attn, &uniform);
        let mut data = factor.data().to_vec();
        add_scaled_identity(&mut data, n, config.alpha);
        factor = Tensor::from_parts(vec![n, n], data);
        if config.row_normalize {
            factor = ops::row_normalize(&factor)?;
        }
        rollout = ops::matmul(&rollout, &factor)?;
    }
    Ok(rollout)
}

/// Gradient-based head importance (L1: `sum |G|`, L2: `sqrt(sum G^2)`),
/// normalized to sum to one within each scope vector. An all-zero scope
/// resolves to uniform `1/H`.
///
/// Accepts any `[H, ...]` gradient tensors (one per layer, equal shapes);
/// the norm runs over every entry of a head's block.
pub fn head_weights(
    attention_grads: &[Tensor],
    norm_kind: NormKind,
    weight_scope: WeightScope,
) -> Result<HeadWeights> {
    let first = attention_grads
        .first()
        .ok_or_else(|| Error::state("head_weights: no gradient layers present".to_string()))?;
    if first.rank() < 2 {
        return Err(Error::dim(format!(
            "head_weights: tensors must be [H, ...], got {:?}",
            first.shape()
        )));
    }
    for t in attention_grads {
        if t.shape() != first.shape() {
            return Err(Error::dim(format!(
                "head_weights: inconsistent shapes {:?} vs {:?}",
                first.shape(),
                t.shape()
            )));
        }
    }
    let h = first.shape()[0];
    let head_score = |layer: &Tensor, head: usize| -> f64 {
        let nn = layer.numel() / h;
        let block = &layer.data()[head * nn..(head + 1) * nn];
        match norm_kind {
            NormKind::L1 => block.iter().map(|v| v.abs()).sum(),
            NormKind::L2 => block.iter().map(|v| v * v).sum::<f64>().sqrt(),
        }
    };
    let normalize = |scores: Vec<f64>| -> Vec<f64> {
        let total: f64 = scores.iter().sum();
        if total == 0.0 {
            vec![1.0 / h as f64; h]
        } else {
            scores.into_iter().map(|s| s / total).collect()
        }
    };
    let weights = match weight_scope {
        WeightScope::PerLayer => attention_grads
            .iter()
            .map(|layer| normalize((0..h).map(|i| head_score(layer, i)).collect()))
            .collect(),
        WeightScope::Global => {
            // One score per head index, pooled over every layer's block.
            let scores: Vec<f64> = (0..h)
                .map(|i| match norm_kind {
                    NormKind::L1 => attention_grads.iter().map(|l| head_score(l, i)).sum(),
                    NormKind::L2 => attention_grads
                        .iter()
                        .map(|l| {
                            let nn = l.numel() / h;
                            l.data()[i * nn..(i + 1) * nn].iter().map(|v| v * v).sum::<f64>()
                        })
                        .sum::<f64>()
                        .sqrt(),
                })
                .collect();
            vec![normalize(scores)]
        }
    };
    Ok(HeadWeights { scope: weight_scope, weights })
}

/// Weighted rollout: heads combined by their gradient-derived weights,
/// then `R <- R * A_weighted + alpha * I` per layer from the identity,
/// row-normalizing each intermediate when configured.
pub fn gmar_rollout_matrix(
    attentions: &[Tensor],
    attention_grads: &[Tensor],
    config: &RolloutConfig,
) -> Result<Tensor> {
    config.validate()?;
    let (_, n) = check_attention_stack(attentions, "gmar_rollout")?;
    if attention_grads.len() != attentions.len() {
        return Err(Error::dim(format!(
            "gmar_rollout: {} gradient layers for {} attention layers",
            attention_grads.len(),
            attentions.len()
        )));
    }
    let weights = head_weights(attention_grads, config.norm_kind, config.weight_scope)?;
    let backward = std::env::var("GMAR_ORDER").as_deref() == Ok("backward");
    let mut rollout = Tensor::identity(n);
    let order: Vec<usize> = if backward {
        (0..attentions.len()).rev().collect()
    } else {
        (0..attentions.len()).collect()
    };
    for layer in order {
        let weighted = mix_heads(&attentions[layer], weights.layer(layer));
        let product = ops::matmul(&rollout, &weighted)?;
        let mut data = product.data().to_vec();
        add_scaled_identity(&mut data, n, config.alpha);
        rollout = Tensor::from_parts(vec![n, n], data);
        if config.row_normalize {
            rollout = ops::row_normalize(&rollout)?;
        }
    }
    Ok(rollout)
}

/// Reads the CLS token's row of a rollout matrix as a patch grid:
/// row 0 with column 0 dropped, reshaped `P x P`, min-max normalized.
pub fn cls_row_to_grid(rollout: &Tensor, source_method: &str) -> Result<SaliencyMap> {
    if rollout.rank() != 2 || rollout.shape()[0] != rollout.shape()[1] {
        return Err(Error::dim(format!(
            "rollout must be square, got {:?}",
            rollout.shape()
        )));
    }
    let n = rollout.shape()[0];
    let side = ((n - 1) as f64).sqrt() as usize;
    if side * side + 1 != n {
        return Err(Error::dim(format!(
            "token count {n} is not of the form P^2 + 1"
        )));
    }
    let raw = &rollout.data()[1..n];
    let (grid, degenerate) = min_max_normalize(raw);
    Ok(SaliencyMap {
        grid: Tensor::from_parts(vec![side, side], grid),
        source_method: source_method.to_string(),
        degenerate_constant: degenerate,
    })
}

/// Eq.-1 baseline on a trace: uniform head averaging, identity residual
/// of strength `alpha`, and the CLS-row saliency grid.
pub fn attention_rollout(
    trace: &ForwardTrace,
    config: &RolloutConfig,
) -> Result<(Tensor, SaliencyMap)> {
    let matrix = rollout_matrix(&trace.attentions, config)?;
    let map = cls_row_to_grid(&matrix, Method::Rollout.as_str())?;
    Ok((matrix, map))
}

/// Gradient-weighted rollout on a trace; requires `backprop_target` to
/// have filled the attention gradients.
pub fn gmar_rollout(trace: &ForwardTrace, config: &RolloutConfig) -> Result<(Tensor, SaliencyMap)> {
    let grads = trace.attention_grads.as_ref().ok_or_else(|| {
        Error::state("attention gradients missing; call backprop_target first".to_string())
    })?;
    let matrix = gmar_rollout_matrix(&trace.attentions, grads, config)?;
    let label = match config.norm_kind {
        NormKind::L1 => Method::GmarL1,
        NormKind::L2 => Method::GmarL2,
    };
    let map = cls_row_to_grid(&matrix, label.as_str())?;
    Ok((matrix, map))
}

/// Grad-CAM adapted to patch tokens: channel weights are the token-mean
/// of the gradients, the map is the ReLU of the weighted activation sum.
pub fn gradcam_vit(token_grads: &Tensor, token_activations: &Tensor) -> Result<SaliencyMap> {
    if token_grads.rank() != 2 || token_grads.shape() != token_activations.shape() {
        return Err(Error::dim(format!(
            "gradcam expects matching [T, D] tensors, got {:?} and {:?}",
            token_grads.shape(),
            token_activations.shape()
        )));
    }
    let (t, d) = (token_grads.shape()[0], token_grads.shape()[1]);
    let side = (t as f64).sqrt() as usize;
    if side * side != t {
        return Err(Error::dim(format!("token count {t} is not a perfect square")));
    }
    let channel_weights = ops::mean_axis(token_grads, 0)?;
    let mut raw = vec![0.0; t];
    for token in 0..t {
        let acts = &token_activations.data()[token * d..(token + 1) * d];
        let s: f64 = channel_weights.data().iter().zip(acts).map(|(w, a)| w * a).sum();
        raw[token] = s.max(0.0);
    }
    let (grid, degenerate) = min_max_normalize(&raw);
    Ok(SaliencyMap {
        grid: Tensor::from_parts(vec![side, side], grid),
        source_method: Method::GradCam.as_str().to_string(),
        degenerate_constant: degenerate,
    })
}

/// Grad-CAM from a trace that has run `backprop_target`.
pub fn gradcam_from_trace(trace: &ForwardTrace) -> Result<SaliencyMap> {
    let grads = trace.patch_token_grads().ok_or_else(|| {
        Error::state("token gradients missing; call backprop_target first".to_string())
    })?;
    let acts = trace.patch_token_activations().ok_or_else(|| {
        Error::state("token activations missing from trace".to_string())
    })?;
    gradcam_vit(&grads, &acts)
}

/// Uniform random saliency grid, min-max normalized, deterministic per seed.
pub fn random_saliency(grid_side: usize, seed: u64) -> SaliencyMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw: Vec<f64> = (0..grid_side * grid_side).map(|_| rng.gen::<f64>()).collect();
    let (grid, degenerate) = min_max_normalize(&raw);
    SaliencyMap {
        grid: Tensor::from_parts(vec![grid_side, grid_side], grid),
        source_method: Method::Random.as_str().to_string(),
        degenerate_constant: degenerate,
    }
}

/// Signed difference `a - b` of two equally-shaped maps, in `[-1, 1]`.
pub fn difference_map(a: &SaliencyMap, b: &SaliencyMap) -> Result<Tensor> {
    if a.grid.shape() != b.grid.shape() {
        return Err(Error::dim(format!(
            "difference_map shapes differ: {:?} vs {:?}",
            a.grid.shape(),
            b.grid.shape()
        )));
    }
    ops::sub(&a.grid, &b.grid)
}

/// Saliency methods exposed by the CLI and the evaluation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Rollout,
    GmarL1,
    GmarL2,
    GradCam,
    Random,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::Rollout, Method::GmarL1, Method::GmarL2, Method::GradCam, Method::Random];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Rollout => "rollout",
            Method::GmarL1 => "gmar-l1",
            Method::GmarL2 => "gmar-l2",
            Method::GradCam => "gradcam",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Method> {
        match s {
            "rollout" => Ok(Method::Rollout),
            "gmar-l1" => Ok(Method::GmarL1),
            "gmar-l2" => Ok(Method::GmarL2),
            "gradcam" => Ok(Method::GradCam),
            "random" => Ok(Method::Random),
            other => Err(Error::param(format!(
                "unknown method '{other}' (expected rollout, gmar-l1, gmar-l2, gradcam, random)"
            ))),
        }
    }
}

/// Everything a single-image explanation produces.
pub struct Explanation {
    pub map: SaliencyMap,
    /// Present for the gmar methods.
    pub head_weights: Option<HeadWeights>,
    pub predicted_class: usize,
    pub probabilities: Vec<f64>,
}

/// Runs `method` on one image: forward (with capture), backprop where the
/// method needs gradients, and the saliency map. The predicted class of
/// the clean image is the gradient target.
pub fn explain(
    params: &ModelParams,
    image: &Image,
    method: Method,
    config: &RolloutConfig,
    seed: u64,
) -> Result<Explanation> {
    config.validate()?;
    let mut trace = forward(params, image)?;
    let probabilities = ops::softmax_lastdim(&trace.logits)?.data().to_vec();
    let predicted_class = trace.predicted_class;

    let (map, weights) = match method {
        Method::Rollout => {
            let (_, map) = attention_rollout(&trace, config)?;
            (map, None)
        }
        Method::GmarL1 | Method::GmarL2 => {
            trace.backprop_target(predicted_class)?;
            let cfg = RolloutConfig {
                norm_kind: if method == Method::GmarL1 { NormKind::L1 } else { NormKind::L2 },
                ..*config
            };
            let (_, map) = gmar_rollout(&trace, &cfg)?;
            let grads = trace.attention_grads.as_ref().expect("filled by backprop_target");
            let weights = head_weights(grads, cfg.norm_kind, cfg.weight_scope)?;
            (map, Some(weights))
        }
        Method::GradCam => {
            trace.backprop_target(predicted_class)?;
            (gradcam_from_trace(&trace)?, None)
        }
        Method::Random => (random_saliency(params.config.grid_side(), seed), None),
    };
    Ok(Explanation { map, head_weights: weights, predicted_class, probabilities })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Row-stochastic random attention stack and matching gradients.
    fn random_trace(
        rng: &mut ChaCha8Rng,
        layers: usize,
        heads: usize,
        tokens: usize,
    ) -> (Vec<Tensor>, Vec<Tensor>) {
        let mut attns = Vec::new();
        let mut grads = Vec::new();
        for _ in 0..layers {
            let mut a = vec![0.0; heads * tokens * tokens];
            for row in a.chunks_mut(tokens) {
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = rng.gen::<f64>() + 1e-3;
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            attns.push(Tensor::from_parts(vec![heads, tokens, tokens], a));
            let g: Vec<f64> =
                (0..heads * tokens * tokens).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            grads.push(Tensor::from_parts(vec![heads, tokens, tokens], g));
        }
        (attns, grads)
    }

    /// Explicit-loop transcription of the weighted rollout recursion,
    /// independent of the tensor ops.
    fn gmar_oracle(
        attns: &[Tensor],
        grads: &[Tensor],
        cfg: &RolloutConfig,
    ) -> Vec<f64> {
        let h = attns[0].shape()[0];
        let n = attns[0].shape()[1];
        // Head scores and weights.
        let score = |g: &Tensor, i: usize| -> f64 {
            let block = &g.data()[i * n * n..(i + 1) * n * n];
            match cfg.norm_kind {
                NormKind::L1 => block.iter().map(|v| v.abs()).sum(),
                NormKind::L2 => block.iter().map(|v| v * v).sum::<f64>().sqrt(),
            }
        };
        let weights_for = |l: usize| -> Vec<f64> {
            match cfg.weight_scope {
                WeightScope::PerLayer => {
                    let scores: Vec<f64> = (0..h).map(|i| score(&grads[l], i)).collect();
                    let total: f64 = scores.iter().sum();
                    if total == 0.0 {
                        vec![1.0 / h as f64; h]
                    } else {
                        scores.iter().map(|s| s / total).collect()
                    }
                }
                WeightScope::Global => {
                    let scores: Vec<f64> = (0..h)
                        .map(|i| match cfg.norm_kind {
                            NormKind::L1 => grads.iter().map(|g| score(g, i)).sum(),
                            NormKind::L2 => grads
                                .iter()
                                .map(|g| {
                                    g.data()[i * n * n..(i + 1) * n * n]
                                        .iter()
                                        .map(|v| v * v)
                                        .sum::<f64>()
                                })
                                .sum::<f64>()
                                .sqrt(),
                        })
                        .collect();
                    let total: f64 = scores.iter().sum();
                    if total == 0.0 {
                        vec![1.0 / h as f64; h]
                    } else {
                        scores.iter().map(|s| s / total).collect()
                    }
                }
            }
        };

        let mut r = vec![0.0; n * n];
        for i in 0..n {
            r[i * n + i] = 1.0;
        }
        for (l, attn) in attns.iter().enumerate() {
            let w = weights_for(l);
            let mut weighted = vec![0.0; n * n];
            for (head, &wh) in w.iter().enumerate() {
                let block = &attn.data()[head * n * n..(head + 1) * n * n];
                for (o, &v) in weighted.iter_mut().zip(block) {
                    *o += wh * v;
                }
            }
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    let r_ik = r[i * n + k];
                    for j in 0..n {
                        next[i * n + j] += r_ik * weighted[k * n + j];
                    }
                }
            }
            for i in 0..n {
                next[i * n + i] += cfg.alpha;
            }
            if cfg.row_normalize {
                for row in next.chunks_mut(n) {
                    let sum: f64 = row.iter().sum();
                    if sum != 0.0 {
                        for v in row.iter_mut() {
                            *v /= sum;
                        }
                    }
                }
            }
            r = next;
        }
        r
    }

    #[test]
    fn rollout_identity_layer_is_identity() {
        // One layer whose every head is the identity: (I + I)/2 = I.
        let n = 5;
        let mut data = Vec::new();
        for _ in 0..2 {
            data.extend_from_slice(Tensor::identity(n).data());
        }
        let attn = Tensor::from_parts(vec![2, n, n], data);
        let out = rollout_matrix(&[attn], &RolloutConfig::default()).unwrap();
        for (got, want) in out.data().iter().zip(Tensor::identity(n).data()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn rollout_matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (attns, _) = random_trace(&mut rng, 2, 3, 5);
        let cfg = RolloutConfig::default();
        let got = rollout_matrix(&attns, &cfg).unwrap();

        // Oracle: explicit product of row-normalized (mean + I) factors.
        let n = 5;
        let mut r = Tensor::identity(n).data().to_vec();
        for attn in &attns {
            let mut factor = vec![0.0; n * n];
            for head in 0..3 {
                let block = &attn.data()[head * n * n..(head + 1) * n * n];
                for (f, &v) in factor.iter_mut().zip(block) {
                    *f += v / 3.0;
                }
            }
            for i in 0..n {
                factor[i * n + i] += 1.0;
            }
            for row in factor.chunks_mut(n) {
                let sum: f64 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            let mut next = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        next[i * n + j] += r[i * n + k] * factor[k * n + j];
                    }
                }
            }
            r = next;
        }
        for (g, w) in got.data().iter().zip(&r) {
            assert!((g - w).abs() < 1e-10, "{g} vs {w}");
        }
    }

    #[test]
    fn rollout_rows_stay_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let (attns, _) = random_trace(&mut rng, 3, 4, 10);
            let out = rollout_matrix(&attns, &RolloutConfig::default()).unwrap();
            for row in out.data().chunks(10) {
                let sum: f64 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn head_weights_l1_example() {
        let grads = Tensor::from_parts(vec![2, 1, 2], vec![0.5, -0.5, 1.0, 0.0]);
        let w = head_weights(&[grads], NormKind::L1, WeightScope::PerLayer).unwrap();
        assert_eq!(w.layer(0), &[0.5, 0.5]);
    }

    #[test]
    fn head_weights_l2_example() {
        let grads = Tensor::from_parts(vec![2, 1, 2], vec![0.5, -0.5, 1.0, 0.0]);
        let w = head_weights(&[grads], NormKind::L2, WeightScope::PerLayer).unwrap();
        // sqrt(0.5) / (sqrt(0.5) + 1) and 1 / (sqrt(0.5) + 1).
        assert!((w.layer(0)[0] - 0.4142).abs() < 1e-4);
        assert!((w.layer(0)[1] - 0.5858).abs() < 1e-4);
    }

    #[test]
    fn identical_heads_get_exactly_uniform_weights() {
        let one = vec![0.3, -0.7, 1.1, 0.4];
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&one);
        }
        let grads = Tensor::from_parts(vec![4, 2, 2], data);
        for norm in [NormKind::L1, NormKind::L2] {
            let w = head_weights(&[grads.clone()], norm, WeightScope::PerLayer).unwrap();
            assert_eq!(w.layer(0), &[0.25, 0.25, 0.25, 0.25]);
        }
    }

    #[test]
    fn zero_gradients_fall_back_to_uniform() {
        let zero = Tensor::zeros(vec![4, 3, 3]);
        let w = head_weights(&[zero], NormKind::L1, WeightScope::PerLayer).unwrap();
        assert_eq!(w.layer(0), &[0.25; 4]);
    }

    #[test]
    fn single_nonzero_head_takes_all_weight() {
        let mut data = vec![0.0; 3 * 4 * 4];
        data[16] = -2.5; // head 1's block
        let grads = Tensor::from_parts(vec![3, 4, 4], data);
        for norm in [NormKind::L1, NormKind::L2] {
            let w = head_weights(&[grads.clone()], norm, WeightScope::PerLayer).unwrap();
            assert_eq!(w.layer(0), &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn head_weight_invariants_on_adversarial_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..100 {
            let (_, mut grads) = random_trace(&mut rng, 3, 4, 6);
            if trial % 3 == 0 {
                grads[1] = Tensor::zeros(vec![4, 6, 6]); // all-zero layer
            }
            for scope in [WeightScope::PerLayer, WeightScope::Global] {
                for norm in [NormKind::L1, NormKind::L2] {
                    let w = head_weights(&grads, norm, scope).unwrap();
                    for vec in &w.weights {
                        assert!(vec.iter().all(|&v| v >= 0.0));
                        let sum: f64 = vec.iter().sum();
                        assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
                    }
                }
            }
        }
    }

    #[test]
    fn scale_covariance_of_head_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let (_, grads) = random_trace(&mut rng, 2, 4, 5);
            let c = rng.gen::<f64>() * 10.0 + 0.01;
            let scaled: Vec<Tensor> = grads.iter().map(|g| ops::mul_scalar(g, c)).collect();
            for norm in [NormKind::L1, NormKind::L2] {
                let a = head_weights(&grads, norm, WeightScope::PerLayer).unwrap();
                let b = head_weights(&scaled, norm, WeightScope::PerLayer).unwrap();
                for (va, vb) in a.weights.iter().zip(&b.weights) {
                    for (x, y) in va.iter().zip(vb) {
                        assert!((x - y).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn gmar_matches_explicit_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..50 {
            let layers = 1 + (trial % 3);
            let heads = 1 + (trial % 4);
            let tokens = 5;
            let (attns, grads) = random_trace(&mut rng, layers, heads, tokens);
            for scope in [WeightScope::PerLayer, WeightScope::Global] {
                for norm in [NormKind::L1, NormKind::L2] {
                    let cfg = RolloutConfig {
                        alpha: 1.0,
                        norm_kind: norm,
                        weight_scope: scope,
                        row_normalize: true,
                    };
                    let got = gmar_rollout_matrix(&attns, &grads, &cfg).unwrap();
                    let want = gmar_oracle(&attns, &grads, &cfg);
                    for (g, w) in got.data().iter().zip(&want) {
                        assert!((g - w).abs() < 1e-10, "trial {trial}: {g} vs {w}");
                    }
                }
            }
        }
    }

    #[test]
    fn gmar_single_layer_single_weight_example() {
        // w = [1, 0]: head 1 has no effect; result is the row-normalized
        // (A[head 0] + alpha I).
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (attns, _) = random_trace(&mut rng, 1, 2, 4);
        // Gradients forcing w = [1, 0]: head 0 nonzero, head 1 zero.
        let mut g = vec![0.0; 2 * 16];
        for v in g.iter_mut().take(16) {
            *v = 1.0;
        }
        let grads = vec![Tensor::from_parts(vec![2, 4, 4], g)];
        let cfg = RolloutConfig { alpha: 0.7, ..Default::default() };
        let got = gmar_rollout_matrix(&attns, &grads, &cfg).unwrap();

        let head0 = ops::slice_axis(&attns[0], 0, 0, 1).unwrap();
        let head0 = ops::reshape(&head0, vec![4, 4]).unwrap();
        let mut expected = head0.data().to_vec();
        for i in 0..4 {
            expected[i * 4 + i] += 0.7;
        }
        let expected = ops::row_normalize(&Tensor::from_parts(vec![4, 4], expected)).unwrap();
        for (a, b) in got.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_gmar_equals_plain_rollout_at_zero_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..30 {
            let (attns, _) = random_trace(&mut rng, 3, 4, 10);
            // Identical per-head gradients force uniform weights.
            let g_layer: Vec<Tensor> = (0..3)
                .map(|_| {
                    let one: Vec<f64> = (0..100).map(|_| rng.gen::<f64>() - 0.5).collect();
                    let mut data = Vec::new();
                    for _ in 0..4 {
                        data.extend_from_slice(&one);
                    }
                    Tensor::from_parts(vec![4, 10, 10], data)
                })
                .collect();
            let cfg = RolloutConfig { alpha: 0.0, ..Default::default() };
            let gmar = gmar_rollout_matrix(&attns, &g_layer, &cfg).unwrap();
            let rollout = rollout_matrix(&attns, &cfg).unwrap();
            for (a, b) in gmar.data().iter().zip(rollout.data()) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn head_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        for _ in 0..100 {
            let (attns, grads) = random_trace(&mut rng, 2, 4, 5);
            let perm = [2usize, 0, 3, 1];
            let permute = |t: &Tensor| -> Tensor {
                let nn = 25;
                let mut data = vec![0.0; 4 * nn];
                for (new, &old) in perm.iter().enumerate() {
                    data[new * nn..(new + 1) * nn]
                        .copy_from_slice(&t.data()[old * nn..(old + 1) * nn]);
                }
                Tensor::from_parts(vec![4, 5, 5], data)
            };
            let p_attns: Vec<Tensor> = attns.iter().map(&permute).collect();
            let p_grads: Vec<Tensor> = grads.iter().map(&permute).collect();
            let cfg = RolloutConfig::default();
            let a = gmar_rollout_matrix(&attns, &grads, &cfg).unwrap();
            let b = gmar_rollout_matrix(&p_attns, &p_grads, &cfg).unwrap();
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12);
            }
            let ra = rollout_matrix(&attns, &cfg).unwrap();
            let rb = rollout_matrix(&p_attns, &cfg).unwrap();
            for (x, y) in ra.data().iter().zip(rb.data()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cls_grid_from_identity_rollout_is_degenerate() {
        let map = cls_row_to_grid(&Tensor::identity(17), "rollout").unwrap();
        assert!(map.degenerate_constant);
        assert!(map.grid.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn cls_grid_one_hot_row() {
        let n = 17;
        let mut data = vec![0.0; n * n];
        data[5] = 1.0; // CLS row attends to patch 4
        let map = cls_row_to_grid(&Tensor::from_parts(vec![n, n], data), "rollout").unwrap();
        assert_eq!(map.grid.shape(), &[4, 4]);
        for (i, &v) in map.grid.data().iter().enumerate() {
            assert_eq!(v, if i == 4 { 1.0 } else { 0.0 });
        }
        assert!(!map.degenerate_constant);
    }

    #[test]
    fn cls_grid_requires_square_plus_one_tokens() {
        let err = cls_row_to_grid(&Tensor::identity(6), "rollout").unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn minmax_spans_unit_interval_for_nonconstant_input() {
        let n = 10;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = vec![0.0; n * n];
        for v in data.iter_mut() {
            *v = rng.gen();
        }
        let map = cls_row_to_grid(&Tensor::from_parts(vec![n, n], data), "x").unwrap();
        let min = map.grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = map.grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(min, 0.0);
        assert_eq!(max, 1.0);
    }

    #[test]
    fn gradcam_relu_clamps_all_negative_maps() {
        // Gradients and activations chosen so every weighted sum is negative.
        let grads = Tensor::full([4, 3], -1.0);
        let acts = Tensor::full([4, 3], 1.0);
        let map = gradcam_vit(&grads, &acts).unwrap();
        assert!(map.degenerate_constant);
        assert!(map.grid.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn gradcam_peaks_at_dominant_activation() {
        // One channel dominates and only token 2 activates it.
        let mut grads = vec![0.0; 4 * 2];
        grads[0] = 1.0; // token 0, channel 0 -> channel weight 0.25 for c0
        let mut acts = vec![0.0; 4 * 2];
        acts[2 * 2] = 5.0; // token 2, channel 0
        let map = gradcam_vit(
            &Tensor::from_parts(vec![4, 2], grads),
            &Tensor::from_parts(vec![4, 2], acts),
        )
        .unwrap();
        assert_eq!(map.grid.shape(), &[2, 2]);
        assert_eq!(map.grid.data()[2], 1.0);
    }

    #[test]
    fn random_saliency_is_deterministic_and_spans() {
        let a = random_saliency(4, 9);
        let b = random_saliency(4, 9);
        assert_eq!(a.grid.data(), b.grid.data());
        let min = a.grid.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = a.grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!((min, max), (0.0, 1.0));
    }

    #[test]
    fn random_saliency_mean_near_half() {
        let map = random_saliency(100, 123);
        let mean: f64 = map.grid.data().iter().sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
    }

    #[test]
    fn difference_map_properties() {
        let a = random_saliency(4, 1);
        let b = random_saliency(4, 2);
        let ab = difference_map(&a, &b).unwrap();
        let ba = difference_map(&b, &a).unwrap();
        for (x, y) in ab.data().iter().zip(ba.data()) {
            assert_eq!(*x, -*y);
        }
        let aa = difference_map(&a, &a).unwrap();
        assert!(aa.data().iter().all(|&v| v == 0.0));
        assert!(ab.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));

        let small = random_saliency(3, 1);
        assert!(difference_map(&a, &small).is_err());
    }

    #[test]
    fn gmar_on_trace_requires_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (attns, _) = random_trace(&mut rng, 2, 4, 17);
        let trace = ForwardTrace::synthetic(attns, None).unwrap();
        let err = gmar_rollout(&trace, &RolloutConfig::default()).unwrap_err();
        assert!(matches!(err, Error::State(_)));
        assert!(err.to_string().contains("backprop_target"));
    }

    #[test]
    fn method_strings_round_trip() {
        for m in Method::ALL {
            assert_eq!(Method::from_str(m.as_str()).unwrap(), m);
        }
        assert!(matches!(Method::from_str("lime"), Err(Error::Parameter(_))));
    }
}
