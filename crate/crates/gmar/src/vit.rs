//! Minimal Vision Transformer with attention capture and gradient
//! extraction.
//!
//! The encoder uses pre-norm blocks (layernorm before attention and MLP),
//! exact-erf GELU, and a classifier head reading the CLS token after a
//! final layernorm. Every forward pass run through [`forward`] captures
//! the post-softmax attention probabilities of all layers;
//! [`ForwardTrace::backprop_target`] then fills in the gradients of a
//! chosen class logit with respect to those same probability tensors,
//! which is what the head-weighting in [`crate::attribution`] consumes.
//!
//! Gradients are taken with respect to the post-softmax attention
//! probabilities, not the raw scores, because the weighted rollout
//! multiplies head weights against those probabilities.

use crate::error::{Error, Result};
use crate::io::Image;
use crate::tensor::{ops, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Layernorm epsilon used across the encoder.
pub const LN_EPS: f64 = 1e-6;

/// Standard deviation of the truncated-normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
///
/// The toy configuration runs everything in this crate; the 224/16
/// constants of the full-scale reference model are kept alongside for
/// context but are never instantiated here.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
}

/// Full-scale reference input resolution (not used by the toy model).
pub const REFERENCE_IMAGE_SIZE: usize = 224;
/// Full-scale reference patch size (not used by the toy model).
pub const REFERENCE_PATCH_SIZE: usize = 16;

impl ViTConfig {
    /// Desk-scale defaults: 32x32 input, 8 px patches, 4 layers, 4 heads.
    pub fn toy() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            mlp_dim: 128,
            num_classes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0
            || self.patch_size == 0
            || self.embed_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.mlp_dim == 0
            || self.num_classes == 0
        {
            return Err(Error::config("all config fields must be positive".to_string()));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    /// Patches per image side.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Token count `N = (image_size/patch_size)^2 + 1` (CLS prepended).
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    /// Flattened patch length: `patch_size^2 * 3`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Per-encoder-block parameter tensors.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// All parameter tensors of one model, in a fixed canonical order used by
/// initialization, serialization, and the optimizer alike.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub config: ViTConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm_gamma: Tensor,
    pub norm_beta: Tensor,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl ModelParams {
    /// Canonical `(name, shape)` list for a configuration.
    pub fn expected_shapes(config: &ViTConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.embed_dim;
        let n = config.num_tokens();
        let m = config.mlp_dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![config.patch_dim(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![n, d]),
        ];
        for i in 0..config.num_layers {
            let b = |suffix: &str| format!("blocks.{i}.{suffix}");
            out.extend([
                (b("ln1.gamma"), vec![d]),
                (b("ln1.beta"), vec![d]),
                (b("attn.wq"), vec![d, d]),
                (b("attn.bq"), vec![d]),
                (b("attn.wk"), vec![d, d]),
                (b("attn.bk"), vec![d]),
                (b("attn.wv"), vec![d, d]),
                (b("attn.bv"), vec![d]),
                (b("attn.wo"), vec![d, d]),
                (b("attn.bo"), vec![d]),
                (b("ln2.gamma"), vec![d]),
                (b("ln2.beta"), vec![d]),
                (b("mlp.w1"), vec![d, m]),
                (b("mlp.b1"), vec![m]),
                (b("mlp.w2"), vec![m, d]),
                (b("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, config.num_classes]),
            ("head.bias".to_string(), vec![config.num_classes]),
        ]);
        out
    }

    /// Tensors with their canonical names, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("patch_embed.weight".to_string(), &self.patch_weight),
            ("patch_embed.bias".to_string(), &self.patch_bias),
            ("cls_token".to_string(), &self.cls_token),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, blk) in self.blocks.iter().enumerate() {
            let b = |suffix: &str| format!("blocks.{i}.{suffix}");
            out.extend([
                (b("ln1.gamma"), &blk.ln1_gamma),
                (b("ln1.beta"), &blk.ln1_beta),
                (b("attn.wq"), &blk.wq),
                (b("attn.bq"), &blk.bq),
                (b("attn.wk"), &blk.wk),
                (b("attn.bk"), &blk.bk),
                (b("attn.wv"), &blk.wv),
                (b("attn.bv"), &blk.bv),
                (b("attn.wo"), &blk.wo),
                (b("attn.bo"), &blk.bo),
                (b("ln2.gamma"), &blk.ln2_gamma),
                (b("ln2.beta"), &blk.ln2_beta),
                (b("mlp.w1"), &blk.mlp_w1),
                (b("mlp.b1"), &blk.mlp_b1),
                (b("mlp.w2"), &blk.mlp_w2),
                (b("mlp.b2"), &blk.mlp_b2),
            ]);
        }
        out.extend([
            ("norm.gamma".to_string(), &self.norm_gamma),
            ("norm.beta".to_string(), &self.norm_beta),
            ("head.weight".to_string(), &self.head_weight),
            ("head.bias".to_string(), &self.head_bias),
        ]);
        out
    }

    /// Mutable views of all tensors, canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.patch_weight,
            &mut self.patch_bias,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for blk in self.blocks.iter_mut() {
            out.extend([
                &mut blk.ln1_gamma,
                &mut blk.ln1_beta,
                &mut blk.wq,
                &mut blk.bq,
                &mut blk.wk,
                &mut blk.bk,
                &mut blk.wv,
                &mut blk.bv,
                &mut blk.wo,
                &mut blk.bo,
                &mut blk.ln2_gamma,
                &mut blk.ln2_beta,
                &mut blk.mlp_w1,
                &mut blk.mlp_b1,
                &mut blk.mlp_w2,
                &mut blk.mlp_b2,
            ]);
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_weight,
            &mut self.head_bias,
        ]);
        out
    }

    /// Reassembles params from `(name, tensor)` pairs, validating that the
    /// set of names and every shape match the configuration exactly.
    pub fn from_named(config: ViTConfig, entries: Vec<(String, Tensor)>) -> Result<ModelParams> {
        config.validate()?;
        let expected = Self::expected_shapes(&config);
        let mut map: std::collections::HashMap<String, Tensor> = entries.into_iter().collect();
        let mut tensors = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::format(format!("missing parameter tensor '{name}'")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::format(format!(
                    "parameter '{name}' has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.push(t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::format(format!("unexpected parameter tensor '{extra}'")));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("counted above");
        let patch_weight = next();
        let patch_bias = next();
        let cls_token = next();
        let pos_embed = next();
        let blocks = (0..config.num_layers)
            .map(|_| BlockParams {
                ln1_gamma: next(),
                ln1_beta: next(),
                wq: next(),
                bq: next(),
                wk: next(),
                bk: next(),
                wv: next(),
                bv: next(),
                wo: next(),
                bo: next(),
                ln2_gamma: next(),
                ln2_beta: next(),
                mlp_w1: next(),
                mlp_b1: next(),
                mlp_w2: next(),
                mlp_b2: next(),
            })
            .collect();
        Ok(ModelParams {
            config,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            norm_gamma: next(),
            norm_beta: next(),
            head_weight: next(),
            head_bias: next(),
        })
    }

    /// Registers every tensor as a tape leaf, returning the tracked copy.
    pub(crate) fn on_tape(&self, tape: &mut Tape) -> ModelParams {
        let entries = self
            .named_tensors()
            .into_iter()
            .map(|(name, t)| (name, tape.leaf(t)))
            .collect();
        Self::from_named(self.config.clone(), entries).expect("shapes unchanged by leaf()")
    }
}

/// Standard normal draw via Box-Muller; consumes exactly two uniforms.
fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Truncated normal: rejects draws beyond two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z = normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Deterministic initialization: truncated normal (std 0.02) for weights
/// and embeddings, ones for layernorm gains, zeros for every bias.
/// Identical seeds produce bit-identical parameters.
pub fn init_params(config: &ViTConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = ModelParams::expected_shapes(config)
        .into_iter()
        .map(|(name, shape)| {
            let numel: usize = shape.iter().product();
            let is_gain = name.ends_with("gamma");
            let is_bias = name.ends_with("beta") || name.ends_with("bias") || name.ends_with(".b1")
                || name.ends_with(".b2")
                || name.ends_with(".bq")
                || name.ends_with(".bk")
                || name.ends_with(".bv")
                || name.ends_with(".bo");
            let data = if is_gain {
                vec![1.0; numel]
            } else if is_bias {
                vec![0.0; numel]
            } else {
                (0..numel).map(|_| trunc_normal(&mut rng, INIT_STD)).collect()
            };
            (name, Tensor::from_parts(shape, data))
        })
        .collect();
    ModelParams::from_named(config.clone(), entries)
}

/// Flattens an image into its patch matrix `[P^2, patch_size^2 * 3]`.
///
/// Patches are ordered row-major from the top-left; within a patch,
/// pixels are row-major with the three channels interleaved last.
pub fn patchify(image: &Image, config: &ViTConfig) -> Result<Tensor> {
    if image.width() != config.image_size || image.height() != config.image_size {
        return Err(Error::dim(format!(
            "image is {}x{}, model expects {}x{}",
            image.width(),
            image.height(),
            config.image_size,
            config.image_size
        )));
    }
    let ps = config.patch_size;
    let side = config.grid_side();
    let mut data = Vec::with_capacity(config.num_patches() * config.patch_dim());
    for pr in 0..side {
        for pc in 0..side {
            for py in 0..ps {
                for px in 0..ps {
                    for c in 0..3 {
                        data.push(image.get(pc * ps + px, pr * ps + py, c));
                    }
                }
            }
        }
    }
    Tensor::new(vec![config.num_patches(), config.patch_dim()], data)
}

/// Targeted perturbation of one attention probability entry, used to
/// probe gradients with finite differences.
#[derive(Clone, Copy, Debug)]
pub struct AttnDelta {
    pub layer: usize,
    pub head: usize,
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

pub(crate) struct ForwardParts {
    pub logits: Tensor,
    pub attn_values: Vec<Tensor>,
    pub attn_ids: Vec<Vec<Option<usize>>>,
    pub final_tokens: Option<Tensor>,
    pub normed_tokens: Option<Tensor>,
}

fn linear(tape: &mut Tape, x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = tape.matmul(x, w)?;
    tape.add_row(&y, b)
}

/// One pass through the encoder. `params` may be tape leaves (gradients
/// flow to them) or plain values (treated as constants; gradients still
/// reach the attention tensors created on the tape).
pub(crate) fn forward_parts(
    tape: &mut Tape,
    params: &ModelParams,
    image: &Image,
    capture: bool,
    perturb: Option<&AttnDelta>,
) -> Result<ForwardParts> {
    let cfg = &params.config;
    let n = cfg.num_tokens();
    let h = cfg.num_heads;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let patches = patchify(image, cfg)?;
    let embedded = linear(tape, &patches, &params.patch_weight, &params.patch_bias)?;
    let with_cls = tape.concat(&[&params.cls_token, &embedded], 0)?;
    let mut x = tape.add(&with_cls, &params.pos_embed)?;

    let mut attn_values = Vec::new();
    let mut attn_ids = Vec::new();
    for (layer, blk) in params.blocks.iter().enumerate() {
        let y = tape.layernorm(&x, &blk.ln1_gamma, &blk.ln1_beta, LN_EPS)?;
        let q = linear(tape, &y, &blk.wq, &blk.bq)?;
        let k = linear(tape, &y, &blk.wk, &blk.bk)?;
        let v = linear(tape, &y, &blk.wv, &blk.bv)?;

        let mut ctx_parts = Vec::with_capacity(h);
        let mut layer_ids = Vec::with_capacity(h);
        let mut layer_values = Vec::with_capacity(h);
        for head in 0..h {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = tape.slice_axis(&q, 1, lo, hi)?;
            let kh = tape.slice_axis(&k, 1, lo, hi)?;
            let vh = tape.slice_axis(&v, 1, lo, hi)?;
            let kt = tape.transpose_last2(&kh)?;
            let raw_scores = tape.matmul(&qh, &kt)?;
            let scores = tape.mul_scalar(&raw_scores, scale);
            let mut attn = tape.softmax_lastdim(&scores)?;
            if let Some(p) = perturb {
                if p.layer == layer && p.head == head {
                    // Finite-difference probes run without recording; the
                    // perturbed tensor simply replaces the probabilities.
                    debug_assert!(!tape.is_recording());
                    let mut data = attn.data().to_vec();
                    data[p.row * n + p.col] += p.delta;
                    attn = Tensor::from_parts(attn.shape().to_vec(), data);
                }
            }
            layer_ids.push(attn.tape_id());
            if capture {
                layer_values.push(attn.detach());
            }
            ctx_parts.push(tape.matmul(&attn, &vh)?);
        }
        let refs: Vec<&Tensor> = ctx_parts.iter().collect();
        let ctx = tape.concat(&refs, 1)?;
        let attn_out = linear(tape, &ctx, &blk.wo, &blk.bo)?;
        x = tape.add(&x, &attn_out)?;

        let y2 = tape.layernorm(&x, &blk.ln2_gamma, &blk.ln2_beta, LN_EPS)?;
        let pre = linear(tape, &y2, &blk.mlp_w1, &blk.mlp_b1)?;
        let h1 = tape.gelu(&pre);
        let mlp_out = linear(tape, &h1, &blk.mlp_w2, &blk.mlp_b2)?;
        x = tape.add(&x, &mlp_out)?;

        attn_ids.push(layer_ids);
        if capture {
            let mut stacked = Vec::with_capacity(h * n * n);
            for a in &layer_values {
                stacked.extend_from_slice(a.data());
            }
            attn_values.push(Tensor::from_parts(vec![h, n, n], stacked));
        }
    }

    let final_tokens = capture.then(|| x.clone());
    let xf = tape.layernorm(&x, &params.norm_gamma, &params.norm_beta, LN_EPS)?;
    let normed_tokens = capture.then(|| xf.clone());
    let cls = tape.slice_axis(&xf, 0, 0, 1)?;
    let logits_row = linear(tape, &cls, &params.head_weight, &params.head_bias)?;
    let logits = tape.reshape(&logits_row, vec![cfg.num_classes])?;

    Ok(ForwardParts { logits, attn_values, attn_ids, final_tokens, normed_tokens })
}

/// Lowest-index argmax.
pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One inference's captured state: logits, per-layer attention
/// probabilities, and (after [`ForwardTrace::backprop_target`]) their
/// gradients. Owns the tape of its forward pass.
pub struct ForwardTrace {
    pub logits: Tensor,
    /// L tensors of shape `[H, N, N]`, softmaxed attention probabilities.
    pub attentions: Vec<Tensor>,
    /// Same shapes as `attentions`; filled by `backprop_target`.
    pub attention_grads: Option<Vec<Tensor>>,
    pub predicted_class: usize,
    config: ViTConfig,
    tape: Tape,
    attn_ids: Vec<Vec<Option<usize>>>,
    final_tokens: Option<Tensor>,
    final_token_grads: Option<Tensor>,
    normed_tokens: Option<Tensor>,
    normed_token_grads: Option<Tensor>,
}

fn use_postln_gradcam() -> bool {
    std::env::var("GMAR_GRADCAM").as_deref() == Ok("postln")
}

impl ForwardTrace {
    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    /// Final encoder block's patch-token activations `[N-1, D]` (CLS
    /// dropped), for the Grad-CAM baseline.
    pub fn patch_token_activations(&self) -> Option<Tensor> {
        let x = if use_postln_gradcam() {
            self.normed_tokens.as_ref()?
        } else {
            self.final_tokens.as_ref()?
        };
        ops::slice_axis(x, 0, 1, x.shape()[0]).ok()
    }

    /// Gradients matching [`Self::patch_token_activations`]; present after
    /// `backprop_target`.
    pub fn patch_token_grads(&self) -> Option<Tensor> {
        let g = if use_postln_gradcam() {
            self.normed_token_grads.as_ref()?
        } else {
            self.final_token_grads.as_ref()?
        };
        ops::slice_axis(g, 0, 1, g.shape()[0]).ok()
    }

    /// Builds a trace from bare attention tensors (and optional gradients)
    /// without running a model. Useful for exercising the attribution
    /// operators on synthetic inputs; `backprop_target` is unavailable on
    /// such traces.
    pub fn synthetic(attentions: Vec<Tensor>, grads: Option<Vec<Tensor>>) -> Result<ForwardTrace> {
        let first = attentions
            .first()
            .ok_or_else(|| Error::state("synthetic trace needs at least one layer".to_string()))?;
        if first.rank() != 3 || first.shape()[1] != first.shape()[2] {
            return Err(Error::dim(format!(
                "attention tensors must be [H, N, N], got {:?}",
                first.shape()
            )));
        }
        let shape = first.shape().to_vec();
        for a in &attentions {
            if a.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "all layers must share shape {shape:?}, got {:?}",
                    a.shape()
                )));
            }
        }
        if let Some(g) = &grads {
            if g.len() != attentions.len() {
                return Err(Error::dim(format!(
                    "{} gradient tensors for {} layers",
                    g.len(),
                    attentions.len()
                )));
            }
            for t in g {
                if t.shape() != shape.as_slice() {
                    return Err(Error::dim(format!(
                        "gradient shape {:?} does not match attention shape {shape:?}",
                        t.shape()
                    )));
                }
            }
        }
        let n = shape[1];
        let side = ((n - 1) as f64).sqrt().round() as usize;
        let config = ViTConfig {
            image_size: side.max(1),
            patch_size: 1,
            embed_dim: shape[0],
            num_layers: attentions.len(),
            num_heads: shape[0],
            mlp_dim: 1,
            num_classes: 1,
        };
        Ok(ForwardTrace {
            logits: Tensor::zeros(vec![1]),
            attentions,
            attention_grads: grads,
            predicted_class: 0,
            config,
            tape: Tape::no_grad(),
            attn_ids: Vec::new(),
            final_tokens: None,
            final_token_grads: None,
        })
    }

    /// Backpropagates `logits[class_index]` and fills `attention_grads`
    /// (and the Grad-CAM token gradients). Calling it again, with the same
    /// or another class, recomputes the gradients from the same tape.
    pub fn backprop_target(&mut self, class_index: usize) -> Result<()> {
        if class_index >= self.logits.numel() {
            return Err(Error::param(format!(
                "class {class_index} out of range for {} classes",
                self.logits.numel()
            )));
        }
        if !self.tape.is_recording() || self.logits.tape_id().is_none() {
            return Err(Error::state(
                "trace has no gradient tape; run forward() before backprop_target".to_string(),
            ));
        }
        let target = self.tape.slice_axis(&self.logits, 0, class_index, class_index + 1)?;
        let store = self.tape.backward(&target)?;

        let (h, n) = (self.config.num_heads, self.config.num_tokens());
        let mut grads = Vec::with_capacity(self.attn_ids.len());
        for layer_ids in &self.attn_ids {
            let mut stacked = Vec::with_capacity(h * n * n);
            for id in layer_ids {
                match id.and_then(|i| store.by_id(i)) {
                    Some(g) => stacked.extend_from_slice(g.data()),
                    None => stacked.extend(std::iter::repeat(0.0).take(n * n)),
                }
            }
            grads.push(Tensor::from_parts(vec![h, n, n], stacked));
        }
        self.attention_grads = Some(grads);
        self.final_token_grads = self
            .final_tokens
            .as_ref()
            .and_then(|t| t.tape_id())
            .and_then(|id| store.by_id(id).cloned());
        self.normed_token_grads = self
            .normed_tokens
            .as_ref()
            .and_then(|t| t.tape_id())
            .and_then(|id| store.by_id(id).cloned());
        Ok(())
    }
}

/// Runs the model with attention capture and gradient taping enabled.
pub fn forward(params: &ModelParams, image: &Image) -> Result<ForwardTrace> {
    params.config.validate()?;
    let mut tape = Tape::new();
    let taped = params.on_tape(&mut tape);
    let parts = forward_parts(&mut tape, &taped, image, true, None)?;
    let predicted_class = argmax(parts.logits.data());
    Ok(ForwardTrace {
        logits: parts.logits,
        attentions: parts.attn_values,
        attention_grads: None,
        predicted_class,
        config: params.config.clone(),
        tape,
        attn_ids: parts.attn_ids,
        final_tokens: parts.final_tokens,
        final_token_grads: None,
    })
}

/// Class prediction without gradient taping: `(argmax, softmax(logits))`.
/// Ties break toward the lowest class index.
pub fn predict(params: &ModelParams, image: &Image) -> Result<(usize, Vec<f64>)> {
    params.config.validate()?;
    let mut tape = Tape::no_grad();
    let parts = forward_parts(&mut tape, params, image, false, None)?;
    let probs = ops::softmax_lastdim(&parts.logits)?;
    Ok((argmax(probs.data()), probs.data().to_vec()))
}

/// Logits of a forward pass in which a single attention probability entry
/// is shifted by `delta` after its softmax. No gradients are taped; this
/// exists to finite-difference the attention gradients.
pub fn logits_with_attention_delta(
    params: &ModelParams,
    image: &Image,
    delta: &AttnDelta,
) -> Result<Tensor> {
    params.config.validate()?;
    if delta.layer >= params.config.num_layers || delta.head >= params.config.num_heads {
        return Err(Error::param(format!(
            "perturbation target layer {} head {} out of range",
            delta.layer, delta.head
        )));
    }
    let mut tape = Tape::no_grad();
    let parts = forward_parts(&mut tape, params, image, false, Some(delta))?;
    Ok(parts.logits)
}
