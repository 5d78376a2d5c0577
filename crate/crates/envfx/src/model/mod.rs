//! The conversion network.
//!
//! Six submodules around a shared latent width `d_model`:
//!
//! - mel encoder: 1-D convolutions along time over the source mel;
//! - effect extractor: a 1-D U-Net that pulls the environment ("effect")
//!   spectrum out of the reference mel;
//! - effect encoder: encodes the alpha-scaled effect spectrum into the
//!   additive conditioning term;
//! - variance adaptor: pitch/energy predictors plus quantized embeddings;
//! - mel decoder: feed-forward transformer blocks ending in an 80-channel
//!   projection;
//! - two environment classifiers (content side and effect side) used
//!   adversarially through gradient reversal.
//!
//! Decoding computes `Dec(Enc(x) + EffectEnc(alpha * Extract(y)) + Var(Enc(x)))`.
//! Every activation is re-masked after each layer, so values in padded
//! frames can never reach valid ones.

pub mod checkpoint;
mod layers;
#[cfg(test)]
mod tests;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointData};
pub use layers::{BatchNormLayer, ParamGroup, ParamRegistry};

use ndarray::{Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EnvironmentLabel, N_ENVIRONMENTS};
use crate::error::{Error, Result};
use crate::features::log_floor;
use crate::nn::{ops, Tensor};
use layers::{Conv1dLayer, EmbeddingLayer, LayerNormLayer, LinearLayer, UpsampleLayer};

/// Network hyperparameters. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_mels: usize,
    pub d_model: usize,
    pub max_frames: usize,
    pub encoder_layers: usize,
    pub encoder_kernel: usize,
    pub unet_depth: usize,
    pub unet_base_channels: usize,
    pub unet_kernel: usize,
    pub effect_encoder_kernel: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub decoder_ff_kernel: usize,
    pub variance_kernel: usize,
    pub variance_bins: usize,
    pub classifier_channels: usize,
    pub classifier_kernel: usize,
    pub pitch_min_hz: f64,
    pub pitch_max_hz: f64,
    /// Upper edge of the energy embedding bins (training-corpus maximum).
    pub energy_max: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub ln_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_mels: 80,
            d_model: 256,
            max_frames: 1200,
            encoder_layers: 3,
            encoder_kernel: 5,
            unet_depth: 4,
            unet_base_channels: 32,
            unet_kernel: 3,
            effect_encoder_kernel: 3,
            decoder_layers: 4,
            decoder_heads: 2,
            decoder_ff: 1024,
            decoder_ff_kernel: 9,
            variance_kernel: 3,
            variance_bins: 256,
            classifier_channels: 256,
            classifier_kernel: 3,
            pitch_min_hz: 50.0,
            pitch_max_hz: 800.0,
            energy_max: 1.0,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            ln_eps: 1e-6,
            init_seed: 7777,
        }
    }
}

impl ModelConfig {
    /// Tiny configuration for gradient checks (latent width 8, 16 frames).
    pub fn micro() -> Self {
        Self {
            d_model: 8,
            max_frames: 16,
            encoder_layers: 2,
            unet_depth: 2,
            unet_base_channels: 4,
            decoder_layers: 1,
            decoder_heads: 2,
            decoder_ff: 16,
            decoder_ff_kernel: 3,
            variance_bins: 16,
            classifier_channels: 8,
            ..Self::default()
        }
    }

    /// Small configuration for desk-scale smoke training.
    pub fn toy() -> Self {
        Self {
            d_model: 48,
            max_frames: 96,
            unet_base_channels: 12,
            decoder_layers: 2,
            decoder_ff: 192,
            decoder_ff_kernel: 3,
            classifier_channels: 32,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(Error::Config(msg));
        if self.n_mels == 0 || self.d_model == 0 || self.max_frames == 0 {
            return err("n_mels, d_model, and max_frames must be positive".into());
        }
        if self.d_model % self.decoder_heads != 0 {
            return err(format!(
                "d_model {} must be divisible by decoder_heads {}",
                self.d_model, self.decoder_heads
            ));
        }
        if self.max_frames % (1 << self.unet_depth) != 0 {
            return err(format!(
                "max_frames {} must be divisible by 2^unet_depth = {}",
                self.max_frames,
                1 << self.unet_depth
            ));
        }
        for (name, k) in [
            ("encoder_kernel", self.encoder_kernel),
            ("unet_kernel", self.unet_kernel),
            ("effect_encoder_kernel", self.effect_encoder_kernel),
            ("decoder_ff_kernel", self.decoder_ff_kernel),
            ("variance_kernel", self.variance_kernel),
            ("classifier_kernel", self.classifier_kernel),
        ] {
            if k % 2 == 0 {
                return err(format!("{name} must be odd, got {k}"));
            }
        }
        if !(self.pitch_min_hz > 0.0 && self.pitch_max_hz > self.pitch_min_hz) {
            return err("pitch range must satisfy 0 < min < max".into());
        }
        if self.energy_max <= 0.0 {
            return err("energy_max must be positive".into());
        }
        Ok(())
    }
}

/// Per-sample gradient reversal: identity forward; in backward each row's
/// gradient is negated when its label differs from its conversion target
/// and passed through unchanged when they match.
pub fn grl_non_target(
    v: &Tensor,
    sample_labels: &[EnvironmentLabel],
    targets: &[EnvironmentLabel],
) -> Tensor {
    assert_eq!(sample_labels.len(), targets.len());
    let scales: Vec<f64> = sample_labels
        .iter()
        .zip(targets)
        .map(|(s, t)| if s == t { 1.0 } else { -1.0 })
        .collect();
    ops::grl_row_scale(v, &scales)
}

/// Replace padded time steps of `x` with `fill`, in-graph. Gradients to
/// padded positions are dropped.
fn sanitize_padded(x: &Tensor, mask: &Array2<bool>, fill: f64) -> Tensor {
    let shape = x.shape();
    let (b, t, c) = (shape[0], shape[1], shape[2]);
    let masked = ops::mask_time(x, mask);
    let mut pad_fill = Array3::<f64>::zeros((b, t, c));
    for bi in 0..b {
        for ti in 0..t {
            if !mask[[bi, ti]] {
                for ci in 0..c {
                    pad_fill[[bi, ti, ci]] = fill;
                }
            }
        }
    }
    ops::add(&masked, &Tensor::constant(pad_fill.into_dyn()))
}

/// Sinusoidal positional table `[t, d]`.
fn positional_encoding(t: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::<f64>::zeros((t, d));
    for ti in 0..t {
        for i in 0..d / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[[ti, 2 * i]] = (ti as f64 * rate).sin();
            pe[[ti, 2 * i + 1]] = (ti as f64 * rate).cos();
        }
    }
    pe
}

// ---------------------------------------------------------------------------
// Submodules
// ---------------------------------------------------------------------------

struct MelEncoder {
    convs: Vec<Conv1dLayer>,
    norms: Vec<LayerNormLayer>,
}

impl MelEncoder {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for i in 0..cfg.encoder_layers {
            let c_in = if i == 0 { cfg.n_mels } else { cfg.d_model };
            convs.push(Conv1dLayer::new(rng, c_in, cfg.d_model, cfg.encoder_kernel, 1));
            norms.push(LayerNormLayer::new(cfg.d_model, cfg.ln_eps));
        }
        Self { convs, norms }
    }

    fn forward(&self, x: &Tensor, mask: &Array2<bool>) -> Tensor {
        let mut h = sanitize_padded(x, mask, log_floor());
        for (conv, norm) in self.convs.iter().zip(&self.norms) {
            h = ops::mask_time(&norm.forward(&ops::relu(&conv.forward(&h))), mask);
        }
        h
    }

    fn register(&self, reg: &mut ParamRegistry) {
        for (i, (c, n)) in self.convs.iter().zip(&self.norms).enumerate() {
            c.register(reg, &format!("encoder.conv{i}"), ParamGroup::Encoder);
            n.register(reg, &format!("encoder.ln{i}"), ParamGroup::Encoder);
        }
    }
}

/// Two conv/BN/ReLU stages, the building block of the U-Net.
struct ConvBlock {
    conv1: Conv1dLayer,
    bn1: BatchNormLayer,
    conv2: Conv1dLayer,
    bn2: BatchNormLayer,
}

impl ConvBlock {
    fn new(rng: &mut ChaCha20Rng, c_in: usize, c_out: usize, kernel: usize, cfg: &ModelConfig) -> Self {
        Self {
            conv1: Conv1dLayer::new(rng, c_in, c_out, kernel, 1),
            bn1: BatchNormLayer::new(c_out, cfg.bn_momentum, cfg.bn_eps),
            conv2: Conv1dLayer::new(rng, c_out, c_out, kernel, 1),
            bn2: BatchNormLayer::new(c_out, cfg.bn_momentum, cfg.bn_eps),
        }
    }

    fn forward(&self, x: &Tensor, train: bool) -> Tensor {
        let h = ops::relu(&self.bn1.forward(&self.conv1.forward(x), train));
        ops::relu(&self.bn2.forward(&self.conv2.forward(&h), train))
    }

    fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        self.conv1.register(reg, &format!("{prefix}.conv1"), group);
        self.bn1.register(reg, &format!("{prefix}.bn1"), group);
        self.conv2.register(reg, &format!("{prefix}.conv2"), group);
        self.bn2.register(reg, &format!("{prefix}.bn2"), group);
    }

    fn bn_layers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a BatchNormLayer)>) {
        out.push((format!("{prefix}.bn1"), &self.bn1));
        out.push((format!("{prefix}.bn2"), &self.bn2));
    }
}

/// U-Net over the reference mel: max-pool down path, transposed-conv up
/// path with skip concatenation, linear 80-channel head.
struct EffectExtractor {
    down: Vec<ConvBlock>,
    bottleneck: ConvBlock,
    up_samplers: Vec<UpsampleLayer>,
    up: Vec<ConvBlock>,
    head: Conv1dLayer,
    depth: usize,
}

impl EffectExtractor {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        let ch = |i: usize| cfg.unet_base_channels << i;
        let mut down = Vec::new();
        for i in 0..cfg.unet_depth {
            let c_in = if i == 0 { cfg.n_mels } else { ch(i - 1) };
            down.push(ConvBlock::new(rng, c_in, ch(i), cfg.unet_kernel, cfg));
        }
        let bottleneck = ConvBlock::new(
            rng,
            ch(cfg.unet_depth - 1),
            ch(cfg.unet_depth),
            cfg.unet_kernel,
            cfg,
        );
        let mut up_samplers = Vec::new();
        let mut up = Vec::new();
        for i in (0..cfg.unet_depth).rev() {
            let c_above = if i + 1 == cfg.unet_depth {
                ch(cfg.unet_depth)
            } else {
                ch(i + 1)
            };
            up_samplers.push(UpsampleLayer::new(rng, c_above, ch(i)));
            up.push(ConvBlock::new(rng, 2 * ch(i), ch(i), cfg.unet_kernel, cfg));
        }
        let head = Conv1dLayer::new(rng, ch(0), cfg.n_mels, cfg.unet_kernel, 1);
        Self {
            down,
            bottleneck,
            up_samplers,
            up,
            head,
            depth: cfg.unet_depth,
        }
    }

    fn forward(&self, y: &Tensor, mask: &Array2<bool>, train: bool) -> Tensor {
        let mut h = sanitize_padded(y, mask, log_floor());
        let mut skips = Vec::with_capacity(self.depth);
        for block in &self.down {
            h = block.forward(&h, train);
            skips.push(h.clone());
            h = ops::maxpool2(&h);
        }
        h = self.bottleneck.forward(&h, train);
        for (i, (upsample, block)) in self.up_samplers.iter().zip(&self.up).enumerate() {
            let skip = &skips[self.depth - 1 - i];
            h = upsample.forward(&h);
            h = ops::concat_channels(&h, skip);
            h = block.forward(&h, train);
        }
        ops::mask_time(&self.head.forward(&h), mask)
    }

    /// Time lengths visited by the down/up path for an input of length `t`:
    /// `[t, t/2, ..., bottleneck, ..., t/2, t]`.
    fn time_trace(&self, t: usize) -> Vec<usize> {
        let mut trace = vec![t];
        let mut cur = t;
        for _ in 0..self.depth {
            cur /= 2;
            trace.push(cur);
        }
        for _ in 0..self.depth {
            cur *= 2;
            trace.push(cur);
        }
        trace
    }

    fn register(&self, reg: &mut ParamRegistry) {
        let g = ParamGroup::EffectExtractor;
        for (i, b) in self.down.iter().enumerate() {
            b.register(reg, &format!("extractor.down{i}"), g);
        }
        self.bottleneck.register(reg, "extractor.bottleneck", g);
        for (i, (s, b)) in self.up_samplers.iter().zip(&self.up).enumerate() {
            s.register(reg, &format!("extractor.upsample{i}"), g);
            b.register(reg, &format!("extractor.up{i}"), g);
        }
        self.head.register(reg, "extractor.head", g);
    }

    fn bn_layers(&self) -> Vec<(String, &BatchNormLayer)> {
        let mut out = Vec::new();
        for (i, b) in self.down.iter().enumerate() {
            b.bn_layers(&format!("extractor.down{i}"), &mut out);
        }
        self.bottleneck.bn_layers("extractor.bottleneck", &mut out);
        for (i, b) in self.up.iter().enumerate() {
            b.bn_layers(&format!("extractor.up{i}"), &mut out);
        }
        out
    }
}

/// Single convolution mapping the scaled effect spectrum to the latent
/// width (kernel taps use padding and dilation of 1).
struct EffectEncoder {
    conv: Conv1dLayer,
}

impl EffectEncoder {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        Self {
            conv: Conv1dLayer::new(rng, cfg.n_mels, cfg.d_model, cfg.effect_encoder_kernel, 1),
        }
    }

    fn forward(&self, y_prime: &Tensor, mask: &Array2<bool>) -> Tensor {
        ops::mask_time(&self.conv.forward(y_prime), mask)
    }

    fn register(&self, reg: &mut ParamRegistry) {
        self.conv
            .register(reg, "effect_encoder.conv", ParamGroup::EffectEncoder);
    }
}

/// One scalar-per-frame predictor (two conv/ReLU/LN stages plus a linear
/// head).
struct VariancePredictor {
    conv1: Conv1dLayer,
    ln1: LayerNormLayer,
    conv2: Conv1dLayer,
    ln2: LayerNormLayer,
    out: LinearLayer,
}

impl VariancePredictor {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        Self {
            conv1: Conv1dLayer::new(rng, cfg.d_model, cfg.d_model, cfg.variance_kernel, 1),
            ln1: LayerNormLayer::new(cfg.d_model, cfg.ln_eps),
            conv2: Conv1dLayer::new(rng, cfg.d_model, cfg.d_model, cfg.variance_kernel, 1),
            ln2: LayerNormLayer::new(cfg.d_model, cfg.ln_eps),
            out: LinearLayer::new(rng, cfg.d_model, 1),
        }
    }

    fn forward(&self, h: &Tensor, mask: &Array2<bool>) -> Tensor {
        let a = ops::mask_time(&self.ln1.forward(&ops::relu(&self.conv1.forward(h))), mask);
        let b = ops::mask_time(&self.ln2.forward(&ops::relu(&self.conv2.forward(&a))), mask);
        ops::mask_time(&self.out.forward(&b), mask)
    }

    fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        self.conv1.register(reg, &format!("{prefix}.conv1"), group);
        self.ln1.register(reg, &format!("{prefix}.ln1"), group);
        self.conv2.register(reg, &format!("{prefix}.conv2"), group);
        self.ln2.register(reg, &format!("{prefix}.ln2"), group);
        self.out.register(reg, &format!("{prefix}.out"), group);
    }
}

/// Pitch/energy prediction and the summed quantized embeddings.
struct VarianceAdaptor {
    pitch: VariancePredictor,
    energy: VariancePredictor,
    pitch_embed: EmbeddingLayer,
    energy_embed: EmbeddingLayer,
    bins: usize,
    pitch_log_min: f64,
    pitch_log_max: f64,
    energy_max: f64,
}

/// Output bundle of the variance adaptor.
pub struct VarianceOut {
    /// Per-frame log-Hz prediction, `[B,T,1]`.
    pub pitch_pred: Tensor,
    /// Per-frame energy prediction, `[B,T,1]`.
    pub energy_pred: Tensor,
    /// Summed pitch/energy embeddings, `[B,T,d]`.
    pub embedding: Tensor,
}

impl VarianceAdaptor {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        Self {
            pitch: VariancePredictor::new(rng, cfg),
            energy: VariancePredictor::new(rng, cfg),
            pitch_embed: EmbeddingLayer::new(rng, cfg.variance_bins, cfg.d_model),
            energy_embed: EmbeddingLayer::new(rng, cfg.variance_bins, cfg.d_model),
            bins: cfg.variance_bins,
            pitch_log_min: cfg.pitch_min_hz.ln(),
            pitch_log_max: cfg.pitch_max_hz.ln(),
            energy_max: cfg.energy_max,
        }
    }

    fn pitch_bin(&self, log_hz: f64) -> usize {
        let frac = (log_hz - self.pitch_log_min) / (self.pitch_log_max - self.pitch_log_min);
        ((frac * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1)
    }

    fn energy_bin(&self, e: f64) -> usize {
        let frac = e / self.energy_max;
        ((frac * self.bins as f64).floor().max(0.0) as usize).min(self.bins - 1)
    }

    /// With `targets`, the embeddings look up ground-truth bins (teacher
    /// forcing); without, they quantize the model's own predictions.
    fn forward(
        &self,
        h: &Tensor,
        mask: &Array2<bool>,
        targets: Option<(&Array2<f64>, &Array2<f64>)>,
    ) -> VarianceOut {
        let pitch_pred = self.pitch.forward(h, mask);
        let energy_pred = self.energy.forward(h, mask);

        let (b, t) = mask.dim();
        let mut pitch_ids = Array2::<usize>::zeros((b, t));
        let mut energy_ids = Array2::<usize>::zeros((b, t));
        match targets {
            Some((pitch_hz, energy)) => {
                for bi in 0..b {
                    for ti in 0..t {
                        let hz = pitch_hz[[bi, ti]];
                        let log_hz = if hz > 0.0 { hz.ln() } else { f64::NEG_INFINITY };
                        pitch_ids[[bi, ti]] = self.pitch_bin(log_hz);
                        energy_ids[[bi, ti]] = self.energy_bin(energy[[bi, ti]]);
                    }
                }
            }
            None => {
                let pv = pitch_pred.value();
                let ev = energy_pred.value();
                for bi in 0..b {
                    for ti in 0..t {
                        pitch_ids[[bi, ti]] = self.pitch_bin(pv[[bi, ti, 0]]);
                        energy_ids[[bi, ti]] = self.energy_bin(ev[[bi, ti, 0]]);
                    }
                }
            }
        }

        let embedding = ops::mask_time(
            &ops::add(
                &self.pitch_embed.forward(&pitch_ids),
                &self.energy_embed.forward(&energy_ids),
            ),
            mask,
        );
        VarianceOut {
            pitch_pred,
            energy_pred,
            embedding,
        }
    }

    fn register(&self, reg: &mut ParamRegistry) {
        let g = ParamGroup::VarianceAdaptor;
        self.pitch.register(reg, "variance.pitch", g);
        self.energy.register(reg, "variance.energy", g);
        self.pitch_embed.register(reg, "variance.pitch_embed", g);
        self.energy_embed.register(reg, "variance.energy_embed", g);
    }
}

/// Feed-forward transformer block: masked self-attention plus a two-stage
/// convolutional feed-forward, each with a post-norm residual.
struct FftBlock {
    wq: LinearLayer,
    wk: LinearLayer,
    wv: LinearLayer,
    wo: LinearLayer,
    ln1: LayerNormLayer,
    ff1: Conv1dLayer,
    ff2: Conv1dLayer,
    ln2: LayerNormLayer,
    heads: usize,
}

impl FftBlock {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        Self {
            wq: LinearLayer::new(rng, cfg.d_model, cfg.d_model),
            wk: LinearLayer::new(rng, cfg.d_model, cfg.d_model),
            wv: LinearLayer::new(rng, cfg.d_model, cfg.d_model),
            wo: LinearLayer::new(rng, cfg.d_model, cfg.d_model),
            ln1: LayerNormLayer::new(cfg.d_model, cfg.ln_eps),
            ff1: Conv1dLayer::new(rng, cfg.d_model, cfg.decoder_ff, cfg.decoder_ff_kernel, 1),
            ff2: Conv1dLayer::new(rng, cfg.decoder_ff, cfg.d_model, cfg.decoder_ff_kernel, 1),
            ln2: LayerNormLayer::new(cfg.d_model, cfg.ln_eps),
            heads: cfg.decoder_heads,
        }
    }

    fn forward(&self, x: &Tensor, mask: &Array2<bool>) -> Tensor {
        let d_head = (x.shape()[2] / self.heads) as f64;
        let q = ops::split_heads(&self.wq.forward(x), self.heads);
        let k = ops::split_heads(&self.wk.forward(x), self.heads);
        let v = ops::split_heads(&self.wv.forward(x), self.heads);
        let scores = ops::scale(&ops::bmm_nt(&q, &k), 1.0 / d_head.sqrt());
        let probs = ops::masked_softmax(&scores, &ops::expand_mask_heads(mask, self.heads));
        let ctx = ops::merge_heads(&ops::bmm_nn(&probs, &v), self.heads);
        let attn = self.wo.forward(&ctx);
        let x = ops::mask_time(&self.ln1.forward(&ops::add(x, &attn)), mask);

        let ff = self.ff2.forward(&ops::relu(&self.ff1.forward(&x)));
        ops::mask_time(&self.ln2.forward(&ops::add(&x, &ff)), mask)
    }

    fn register(&self, reg: &mut ParamRegistry, prefix: &str) {
        let g = ParamGroup::Decoder;
        self.wq.register(reg, &format!("{prefix}.wq"), g);
        self.wk.register(reg, &format!("{prefix}.wk"), g);
        self.wv.register(reg, &format!("{prefix}.wv"), g);
        self.wo.register(reg, &format!("{prefix}.wo"), g);
        self.ln1.register(reg, &format!("{prefix}.ln1"), g);
        self.ff1.register(reg, &format!("{prefix}.ff1"), g);
        self.ff2.register(reg, &format!("{prefix}.ff2"), g);
        self.ln2.register(reg, &format!("{prefix}.ln2"), g);
    }
}

struct MelDecoder {
    blocks: Vec<FftBlock>,
    out: LinearLayer,
}

impl MelDecoder {
    fn new(rng: &mut ChaCha20Rng, cfg: &ModelConfig) -> Self {
        Self {
            blocks: (0..cfg.decoder_layers).map(|_| FftBlock::new(rng, cfg)).collect(),
            out: LinearLayer::new(rng, cfg.d_model, cfg.n_mels),
        }
    }

    fn forward(&self, z: &Tensor, mask: &Array2<bool>) -> Tensor {
        let shape = z.shape();
        let pe = positional_encoding(shape[1], shape[2]);
        let mut h = ops::mask_time(&ops::add_const_tc(z, &pe), mask);
        for block in &self.blocks {
            h = block.forward(&h, mask);
        }
        ops::mask_time(&self.out.forward(&h), mask)
    }

    fn register(&self, reg: &mut ParamRegistry) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.register(reg, &format!("decoder.block{i}"));
        }
        self.out.register(reg, "decoder.out", ParamGroup::Decoder);
    }
}

/// Two 1-D convolutions, masked temporal mean pooling, and a linear head
/// over the five environment classes.
struct EnvClassifier {
    conv1: Conv1dLayer,
    conv2: Conv1dLayer,
    fc: LinearLayer,
}

impl EnvClassifier {
    fn new(rng: &mut ChaCha20Rng, c_in: usize, cfg: &ModelConfig) -> Self {
        Self {
            conv1: Conv1dLayer::new(rng, c_in, cfg.classifier_channels, cfg.classifier_kernel, 1),
            conv2: Conv1dLayer::new(
                rng,
                cfg.classifier_channels,
                cfg.classifier_channels,
                cfg.classifier_kernel,
                1,
            ),
            fc: LinearLayer::new(rng, cfg.classifier_channels, N_ENVIRONMENTS),
        }
    }

    fn forward(&self, latent: &Tensor, mask: &Array2<bool>) -> Tensor {
        let h = ops::relu(&self.conv1.forward(latent));
        let h = ops::relu(&self.conv2.forward(&h));
        let pooled = ops::masked_mean_time(&h, mask); // [B, ch]
        // The linear op works on [B,T,C]; lift to one time step and back.
        let (b, c) = {
            let s = pooled.shape();
            (s[0], s[1])
        };
        let lifted = reshape_2d_to_3d(&pooled, b, 1, c);
        let logits = self.fc.forward(&lifted);
        reshape_3d_to_2d(&logits, b, N_ENVIRONMENTS)
    }

    fn register(&self, reg: &mut ParamRegistry, prefix: &str, group: ParamGroup) {
        self.conv1.register(reg, &format!("{prefix}.conv1"), group);
        self.conv2.register(reg, &format!("{prefix}.conv2"), group);
        self.fc.register(reg, &format!("{prefix}.fc"), group);
    }
}

/// Exact reshape `[B,C] -> [B,T=1,C]` with pass-through gradient.
fn reshape_2d_to_3d(x: &Tensor, b: usize, t: usize, c: usize) -> Tensor {
    let value = x
        .to_array()
        .into_shape_with_order(ndarray::IxDyn(&[b, t, c]))
        .unwrap();
    let from = x.shape();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            vec![Some(
                g.clone()
                    .into_shape_with_order(ndarray::IxDyn(&from))
                    .unwrap(),
            )]
        }),
    )
}

fn reshape_3d_to_2d(x: &Tensor, b: usize, c: usize) -> Tensor {
    let value = x
        .to_array()
        .into_shape_with_order(ndarray::IxDyn(&[b, c]))
        .unwrap();
    let from = x.shape();
    Tensor::from_op(
        value,
        vec![x.clone()],
        Box::new(move |g| {
            vec![Some(
                g.clone()
                    .into_shape_with_order(ndarray::IxDyn(&from))
                    .unwrap(),
            )]
        }),
    )
}

// ---------------------------------------------------------------------------
// The full model
// ---------------------------------------------------------------------------

/// Which classifier to run in [`Model::classify_environment`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierSide {
    /// On the mel encoder output (content latent).
    Content,
    /// On the effect extractor output (effect spectrum).
    Effect,
}

pub struct Model {
    pub config: ModelConfig,
    encoder: MelEncoder,
    extractor: EffectExtractor,
    effect_encoder: EffectEncoder,
    variance: VarianceAdaptor,
    decoder: MelDecoder,
    content_classifier: EnvClassifier,
    effect_classifier: EnvClassifier,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
        Ok(Self {
            encoder: MelEncoder::new(&mut rng, &config),
            extractor: EffectExtractor::new(&mut rng, &config),
            effect_encoder: EffectEncoder::new(&mut rng, &config),
            variance: VarianceAdaptor::new(&mut rng, &config),
            decoder: MelDecoder::new(&mut rng, &config),
            content_classifier: EnvClassifier::new(&mut rng, config.d_model, &config),
            effect_classifier: EnvClassifier::new(&mut rng, config.n_mels, &config),
            config,
        })
    }

    /// Mel encoder: `[B,T,80] -> [B,T,d]`, zero vectors on padded frames.
    pub fn encode(&self, x: &Tensor, mask: &Array2<bool>) -> Result<Tensor> {
        self.check_input(x, mask)?;
        Ok(self.encoder.forward(x, mask))
    }

    /// Effect extractor: `[B,T,80] -> [B,T,80]` effect spectrum.
    pub fn extract_effect(&self, y: &Tensor, mask: &Array2<bool>, train: bool) -> Result<Tensor> {
        self.check_input(y, mask)?;
        let t = y.shape()[1];
        if t % (1 << self.config.unet_depth) != 0 {
            return Err(Error::Model(format!(
                "time length {t} not divisible by 2^{}",
                self.config.unet_depth
            )));
        }
        Ok(self.extractor.forward(y, mask, train))
    }

    /// Internal U-Net time lengths for an input of `t` frames.
    pub fn effect_time_trace(&self, t: usize) -> Vec<usize> {
        self.extractor.time_trace(t)
    }

    /// Effect encoder on the alpha-scaled spectrum. `alpha = 0` encodes an
    /// exact zero spectrum regardless of the reference.
    pub fn encode_effect(
        &self,
        y_prime: &Tensor,
        alpha: f64,
        mask: &Array2<bool>,
    ) -> Result<Tensor> {
        if !(0.0..=2.0).contains(&alpha) {
            return Err(Error::Model(format!(
                "effect strength alpha = {alpha} outside [0, 2]"
            )));
        }
        let scaled = if alpha == 0.0 {
            Tensor::constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&y_prime.shape())))
        } else {
            ops::scale(y_prime, alpha)
        };
        Ok(self.effect_encoder.forward(&scaled, mask))
    }

    /// Variance adaptor on the content latent.
    pub fn variance_forward(
        &self,
        h: &Tensor,
        mask: &Array2<bool>,
        targets: Option<(&Array2<f64>, &Array2<f64>)>,
    ) -> VarianceOut {
        self.variance.forward(h, mask, targets)
    }

    /// Mel decoder on the fused latent.
    pub fn decode(&self, z: &Tensor, mask: &Array2<bool>) -> Tensor {
        self.decoder.forward(&ops::mask_time(z, mask), mask)
    }

    /// Run one of the two environment classifiers.
    pub fn classify_environment(
        &self,
        latent: &Tensor,
        mask: &Array2<bool>,
        side: ClassifierSide,
    ) -> Tensor {
        match side {
            ClassifierSide::Content => self.content_classifier.forward(latent, mask),
            ClassifierSide::Effect => self.effect_classifier.forward(latent, mask),
        }
    }

    fn check_input(&self, x: &Tensor, mask: &Array2<bool>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 3 || shape[2] != self.config.n_mels {
            return Err(Error::Model(format!(
                "expected [batch, time, {}] input, got {:?}",
                self.config.n_mels, shape
            )));
        }
        if mask.dim() != (shape[0], shape[1]) {
            return Err(Error::Model(format!(
                "mask shape {:?} does not match input {:?}",
                mask.dim(),
                shape
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> ParamRegistry {
        let mut reg = ParamRegistry::default();
        self.encoder.register(&mut reg);
        self.extractor.register(&mut reg);
        self.effect_encoder.register(&mut reg);
        self.variance.register(&mut reg);
        self.decoder.register(&mut reg);
        self.content_classifier
            .register(&mut reg, "content_clf", ParamGroup::ContentClassifier);
        self.effect_classifier
            .register(&mut reg, "effect_clf", ParamGroup::EffectClassifier);
        reg
    }

    /// Batch-norm layers with their checkpoint names.
    pub fn bn_layers(&self) -> Vec<(String, &BatchNormLayer)> {
        self.extractor.bn_layers()
    }
}
