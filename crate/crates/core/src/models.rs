//! Full classifiers assembled from the residual blocks: five token-mixing
//! families plus a residual CNN baseline, with deterministic seeded init,
//! taped forward passes and structural profiling.
//!
//! Parameter layout is flat and name-addressed; insertion order is forward
//! order and is the order the optimizer and checkpoints see.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::defaults;
use crate::error::{Error, Result};
use crate::mixers::{
    self, metaformer_block, AttentionParams, BlockConfig, BlockParams, BnPair, ChannelMlpParams,
    DepthwiseMixParams, MixerKind, MixerParams, NormKind, NormParams, SpatialMlpParams,
    WaveletLevelParams, WaveletMixParams,
};
use crate::tape::{GradTape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    WaveMixNet,
    FNet2DNet,
    ConvMixerNet,
    MLPMixerNet,
    MiniViT,
    MiniCNN,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::WaveMixNet,
        Family::FNet2DNet,
        Family::ConvMixerNet,
        Family::MLPMixerNet,
        Family::MiniViT,
        Family::MiniCNN,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::WaveMixNet => "WaveMixNet",
            Family::FNet2DNet => "FNet2DNet",
            Family::ConvMixerNet => "ConvMixerNet",
            Family::MLPMixerNet => "MLPMixerNet",
            Family::MiniViT => "MiniViT",
            Family::MiniCNN => "MiniCNN",
        }
    }

    fn mixer_kind(self) -> Option<MixerKind> {
        match self {
            Family::WaveMixNet => Some(MixerKind::WaveletMix),
            Family::FNet2DNet => Some(MixerKind::FourierMix),
            Family::ConvMixerNet => Some(MixerKind::DepthwiseConvMix),
            Family::MLPMixerNet => Some(MixerKind::SpatialMlpMix),
            Family::MiniViT => Some(MixerKind::SelfAttentionMix),
            Family::MiniCNN => None,
        }
    }

    /// Patch-embedding families operate on a coarse token grid; the rest keep
    /// full resolution and grow their receptive field inside the blocks.
    pub fn uses_patch_embed(self) -> bool {
        matches!(self, Family::ConvMixerNet | Family::MLPMixerNet | Family::MiniViT)
    }

    /// Families whose parameters bind to one trained resolution.
    pub fn fixed_resolution(self) -> bool {
        matches!(self, Family::MLPMixerNet | Family::MiniViT)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        for fam in Family::ALL {
            if key == fam.name().to_ascii_lowercase() {
                return Ok(fam);
            }
        }
        match key.as_str() {
            "wavemix" => Ok(Family::WaveMixNet),
            "fnet" | "fnet2d" => Ok(Family::FNet2DNet),
            "convmixer" => Ok(Family::ConvMixerNet),
            "mlpmixer" => Ok(Family::MLPMixerNet),
            "vit" => Ok(Family::MiniViT),
            "cnn" => Ok(Family::MiniCNN),
            _ => {
                let names: Vec<&str> = Family::ALL.iter().map(|f| f.name()).collect();
                Err(Error::config(
                    "family",
                    format!("unknown family '{s}' (expected one of {})", names.join(", ")),
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    pub depth: usize,
    pub embed_dim: usize,
    pub patch_size: usize,
    pub input_size: (usize, usize),
    pub num_classes: usize,
    pub in_channels: usize,
    pub mlp_ratio: f64,
    pub heads: usize,
    pub dwt_levels: usize,
    pub kernel_size: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: train in minutes on a CPU while exercising every
    /// mechanism.
    pub fn desk(family: Family) -> Self {
        ModelConfig {
            family,
            depth: defaults::DEPTH,
            embed_dim: defaults::EMBED_DIM,
            patch_size: defaults::PATCH_SIZE,
            input_size: (defaults::INPUT_SIZE, defaults::INPUT_SIZE),
            num_classes: defaults::NUM_CLASSES,
            in_channels: 3,
            mlp_ratio: defaults::MLP_RATIO,
            heads: defaults::HEADS,
            dwt_levels: defaults::DWT_LEVELS,
            kernel_size: defaults::DW_KERNEL_SIZE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::config("depth", "must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::config("input_size", "must be positive"));
        }
        if self.family.uses_patch_embed() {
            if self.patch_size == 0 {
                return Err(Error::config("patch_size", "must be >= 1"));
            }
            if self.input_size.0 % self.patch_size != 0 || self.input_size.1 % self.patch_size != 0 {
                return Err(Error::config(
                    "patch_size",
                    format!(
                        "input {}x{} not divisible by patch {}",
                        self.input_size.0, self.input_size.1, self.patch_size
                    ),
                ));
            }
        }
        if let Some(kind) = self.family.mixer_kind() {
            self.block_config(kind).validate()?;
        }
        Ok(())
    }

    /// Token-grid size the blocks operate on.
    pub fn grid(&self) -> (usize, usize) {
        if self.family.uses_patch_embed() {
            (self.input_size.0 / self.patch_size, self.input_size.1 / self.patch_size)
        } else {
            self.input_size
        }
    }

    fn block_config(&self, kind: MixerKind) -> BlockConfig {
        BlockConfig {
            kind,
            channels: self.embed_dim,
            spatial: self.grid(),
            mlp_ratio: self.mlp_ratio,
            heads: self.heads,
            dwt_levels: self.dwt_levels,
            kernel_size: self.kernel_size,
        }
    }
}

/// Structural cost summary of one forward pass at batch size 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelProfile {
    pub param_count: usize,
    pub activation_elems: usize,
    pub mult_adds: usize,
}

enum Init {
    /// Truncated normal, std 0.02: dense, patch-embedding and position
    /// parameters.
    Dense,
    /// Normal with std sqrt(2/fan_in): convolution kernels.
    FanIn(usize),
    Zero,
    One,
}

#[derive(Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: IndexMap<String, Tensor<f32>>,
    buffers: IndexMap<String, BnPair<f32>>,
}

/// A forward pass left open on its tape so a loss can be appended and
/// differentiated. `leaves` parallels the model's parameter order.
pub struct TapedForward {
    pub tape: GradTape<f32>,
    pub logits: Var,
    pub leaves: Vec<Var>,
}

struct Builder {
    rng: ChaCha8Rng,
    params: IndexMap<String, Tensor<f32>>,
    buffers: IndexMap<String, BnPair<f32>>,
}

impl Builder {
    fn push(&mut self, name: String, shape: &[usize], init: Init) {
        let t = match init {
            Init::Dense => Tensor::trunc_normal(shape, 0.02, &mut self.rng),
            Init::FanIn(fan) => Tensor::randn(shape, (2.0 / fan as f64).sqrt(), &mut self.rng),
            Init::Zero => Tensor::zeros(shape),
            Init::One => Tensor::full(shape, 1.0),
        };
        let prev = self.params.insert(name.clone(), t);
        assert!(prev.is_none(), "duplicate parameter name {name}");
    }

    fn push_norm(&mut self, prefix: &str, c: usize, bn: bool) {
        self.push(format!("{prefix}.gamma"), &[c], Init::One);
        self.push(format!("{prefix}.beta"), &[c], Init::Zero);
        if bn {
            let prev = self.buffers.insert(prefix.to_string(), BnPair::new(c));
            assert!(prev.is_none(), "duplicate buffer name {prefix}");
        }
    }
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: IndexMap::new(),
            buffers: IndexMap::new(),
        };
        let d = config.embed_dim;
        let cin = config.in_channels;

        if config.family.uses_patch_embed() {
            let p = config.patch_size;
            b.push("stem.w".into(), &[d, cin, p, p], Init::Dense);
            b.push("stem.b".into(), &[d], Init::Zero);
        } else {
            b.push("stem.w".into(), &[d, cin, 3, 3], Init::FanIn(cin * 9));
            b.push("stem.b".into(), &[d], Init::Zero);
        }
        if config.family == Family::MiniViT {
            let (gh, gw) = config.grid();
            b.push("pos".into(), &[1, d, gh, gw], Init::Dense);
        }

        for i in 0..config.depth {
            let pre = format!("blocks.{i}");
            match config.family.mixer_kind() {
                Some(kind) => {
                    let bn = mixers::norm_kind(kind) == NormKind::Batch;
                    b.push_norm(&format!("{pre}.norm1"), d, bn);
                    b.push_norm(&format!("{pre}.norm2"), d, bn);
                    let hid = config.block_config(kind).mlp_hidden();
                    match kind {
                        MixerKind::WaveletMix => {
                            let q = d / 4;
                            b.push(format!("{pre}.mixer.reduce.w"), &[q, d, 1, 1], Init::FanIn(d));
                            b.push(format!("{pre}.mixer.reduce.b"), &[q], Init::Zero);
                            for l in 0..config.dwt_levels {
                                let lp = format!("{pre}.mixer.level{l}");
                                b.push(format!("{lp}.mlp.w1"), &[hid, d, 1, 1], Init::FanIn(d));
                                b.push(format!("{lp}.mlp.b1"), &[hid], Init::Zero);
                                b.push(format!("{lp}.mlp.w2"), &[d, hid, 1, 1], Init::FanIn(hid));
                                b.push(format!("{lp}.mlp.b2"), &[d], Init::Zero);
                                for u in 0..=l {
                                    b.push(format!("{lp}.up{u}.w"), &[d, d, 4, 4], Init::FanIn(d * 16));
                                }
                            }
                        }
                        MixerKind::FourierMix => {}
                        MixerKind::DepthwiseConvMix => {
                            let k = config.kernel_size;
                            b.push(format!("{pre}.mixer.dw.w"), &[d, 1, k, k], Init::FanIn(k * k));
                            b.push(format!("{pre}.mixer.dw.b"), &[d], Init::Zero);
                        }
                        MixerKind::SpatialMlpMix => {
                            let t = config.grid().0 * config.grid().1;
                            b.push(format!("{pre}.mixer.token.w"), &[t, t], Init::Dense);
                            b.push(format!("{pre}.mixer.token.b"), &[t], Init::Zero);
                        }
                        MixerKind::SelfAttentionMix => {
                            for proj in ["q", "k", "v", "o"] {
                                b.push(format!("{pre}.mixer.{proj}.w"), &[d, d], Init::Dense);
                                b.push(format!("{pre}.mixer.{proj}.b"), &[d], Init::Zero);
                            }
                        }
                    }
                    b.push(format!("{pre}.mlp.w1"), &[hid, d, 1, 1], Init::FanIn(d));
                    b.push(format!("{pre}.mlp.b1"), &[hid], Init::Zero);
                    b.push(format!("{pre}.mlp.w2"), &[d, hid, 1, 1], Init::FanIn(hid));
                    b.push(format!("{pre}.mlp.b2"), &[d], Init::Zero);
                }
                None => {
                    // Residual CNN block: conv-bn-gelu-conv-bn plus skip.
                    b.push(format!("{pre}.conv1.w"), &[d, d, 3, 3], Init::FanIn(d * 9));
                    b.push_norm(&format!("{pre}.bn1"), d, true);
                    b.push(format!("{pre}.conv2.w"), &[d, d, 3, 3], Init::FanIn(d * 9));
                    b.push_norm(&format!("{pre}.bn2"), d, true);
                    if cnn_stride(i, config.depth) == 2 {
                        b.push(format!("{pre}.skip.w"), &[d, d, 1, 1], Init::FanIn(d));
                    }
                }
            }
        }

        // Zero head: first-batch loss is exactly ln(num_classes).
        b.push("head.w".into(), &[d, config.num_classes], Init::Zero);
        b.push("head.b".into(), &[config.num_classes], Init::Zero);

        Ok(Model { config, params: b.params, buffers: b.buffers })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Mutable views in parameter order, for the optimizer.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.params.values_mut().collect()
    }

    pub fn get_param(&self, name: &str) -> Option<&Tensor<f32>> {
        self.params.get(name)
    }

    pub fn set_param(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        match self.params.get_mut(name) {
            Some(slot) if slot.shape() == t.shape() => {
                *slot = t;
                Ok(())
            }
            Some(slot) => Err(Error::shape(
                "set_param",
                format!("{name}: {:?} vs stored {:?}", t.shape(), slot.shape()),
            )),
            None => Err(Error::config("param", format!("unknown parameter '{name}'"))),
        }
    }

    pub fn named_buffers(&self) -> impl Iterator<Item = (&str, &BnPair<f32>)> {
        self.buffers.iter().map(|(n, p)| (n.as_str(), p))
    }

    pub fn set_buffer(&mut self, name: &str, pair: BnPair<f32>) -> Result<()> {
        match self.buffers.get_mut(name) {
            Some(slot) if slot.mean.shape() == pair.mean.shape() && slot.var.shape() == pair.var.shape() => {
                *slot = pair;
                Ok(())
            }
            Some(_) => Err(Error::shape("set_buffer", format!("{name}: shape mismatch"))),
            None => Err(Error::config("buffer", format!("unknown buffer '{name}'"))),
        }
    }

    fn check_input(&self, batch: &Tensor<f32>) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(Error::shape(
                "forward",
                format!("need [N,{},H,W], got {:?}", self.config.in_channels, s),
            ));
        }
        let (h, w) = (s[2], s[3]);
        if h == 0 || w == 0 || s[0] == 0 {
            return Err(Error::shape("forward", "empty batch or spatial extent"));
        }
        if self.config.family.fixed_resolution() && (h, w) != self.config.input_size {
            return Err(Error::ResolutionMismatch {
                expected: format!("{}x{}", self.config.input_size.0, self.config.input_size.1),
                got: format!("{h}x{w}"),
            });
        }
        if self.config.family.uses_patch_embed()
            && (h % self.config.patch_size != 0 || w % self.config.patch_size != 0)
        {
            return Err(Error::shape(
                "forward",
                format!("input {h}x{w} not divisible by patch {}", self.config.patch_size),
            ));
        }
        if self.config.family == Family::WaveMixNet {
            let div = 1usize << self.config.dwt_levels;
            if h % div != 0 || w % div != 0 {
                return Err(Error::shape(
                    "forward",
                    format!("input {h}x{w} not divisible by 2^{}", self.config.dwt_levels),
                ));
            }
        }
        Ok(())
    }

    pub fn forward_taped(&mut self, batch: &Tensor<f32>, train: bool) -> Result<TapedForward> {
        self.check_input(batch)?;
        let mut tape = GradTape::new();
        let mut by_name: IndexMap<&str, Var> = IndexMap::with_capacity(self.params.len());
        let mut leaves = Vec::with_capacity(self.params.len());
        for (name, t) in &self.params {
            let v = tape.leaf(t.clone(), train);
            by_name.insert(name.as_str(), v);
            leaves.push(v);
        }
        let get = |name: &str| -> Result<Var> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| Error::config("param", format!("missing parameter '{name}'")))
        };

        let x = tape.leaf(batch.clone(), false);
        let stride = if self.config.family.uses_patch_embed() { self.config.patch_size } else { 1 };
        let pad = if self.config.family.uses_patch_embed() { 0 } else { 1 };
        let mut cur = tape.conv2d(x, get("stem.w")?, Some(get("stem.b")?), stride, pad, 1)?;
        if self.config.family == Family::MiniViT {
            cur = tape.add_broadcast(cur, get("pos")?)?;
        }

        let momentum = defaults::BN_MOMENTUM;
        let mut bn_iter = self.buffers.values_mut();
        for i in 0..self.config.depth {
            let pre = format!("blocks.{i}");
            match self.config.family.mixer_kind() {
                Some(kind) => {
                    let cfg = self.config.block_config(kind);
                    let norm1 = NormParams {
                        gamma: get(&format!("{pre}.norm1.gamma"))?,
                        beta: get(&format!("{pre}.norm1.beta"))?,
                    };
                    let norm2 = NormParams {
                        gamma: get(&format!("{pre}.norm2.gamma"))?,
                        beta: get(&format!("{pre}.norm2.beta"))?,
                    };
                    let mixer = match kind {
                        MixerKind::WaveletMix => {
                            let mut levels = Vec::new();
                            for l in 0..self.config.dwt_levels {
                                let lp = format!("{pre}.mixer.level{l}");
                                levels.push(WaveletLevelParams {
                                    mlp_w1: get(&format!("{lp}.mlp.w1"))?,
                                    mlp_b1: get(&format!("{lp}.mlp.b1"))?,
                                    mlp_w2: get(&format!("{lp}.mlp.w2"))?,
                                    mlp_b2: get(&format!("{lp}.mlp.b2"))?,
                                    upsamples: (0..=l)
                                        .map(|u| get(&format!("{lp}.up{u}.w")))
                                        .collect::<Result<_>>()?,
                                });
                            }
                            MixerParams::Wavelet(WaveletMixParams {
                                reduce_w: get(&format!("{pre}.mixer.reduce.w"))?,
                                reduce_b: get(&format!("{pre}.mixer.reduce.b"))?,
                                levels,
                            })
                        }
                        MixerKind::FourierMix => MixerParams::Fourier,
                        MixerKind::DepthwiseConvMix => MixerParams::Depthwise(DepthwiseMixParams {
                            w: get(&format!("{pre}.mixer.dw.w"))?,
                            b: get(&format!("{pre}.mixer.dw.b"))?,
                        }),
                        MixerKind::SpatialMlpMix => MixerParams::SpatialMlp(SpatialMlpParams {
                            w: get(&format!("{pre}.mixer.token.w"))?,
                            b: get(&format!("{pre}.mixer.token.b"))?,
                        }),
                        MixerKind::SelfAttentionMix => MixerParams::SelfAttention(AttentionParams {
                            wq: get(&format!("{pre}.mixer.q.w"))?,
                            bq: get(&format!("{pre}.mixer.q.b"))?,
                            wk: get(&format!("{pre}.mixer.k.w"))?,
                            bk: get(&format!("{pre}.mixer.k.b"))?,
                            wv: get(&format!("{pre}.mixer.v.w"))?,
                            bv: get(&format!("{pre}.mixer.v.b"))?,
                            wo: get(&format!("{pre}.mixer.o.w"))?,
                            bo: get(&format!("{pre}.mixer.o.b"))?,
                        }),
                    };
                    let params = BlockParams {
                        norm1,
                        norm2,
                        mixer,
                        mlp: ChannelMlpParams {
                            w1: get(&format!("{pre}.mlp.w1"))?,
                            b1: get(&format!("{pre}.mlp.b1"))?,
                            w2: get(&format!("{pre}.mlp.w2"))?,
                            b2: get(&format!("{pre}.mlp.b2"))?,
                        },
                    };
                    let bn = if mixers::norm_kind(kind) == NormKind::Batch {
                        let a = bn_iter.next().expect("buffer layout mismatch");
                        let b = bn_iter.next().expect("buffer layout mismatch");
                        Some((a, b))
                    } else {
                        None
                    };
                    cur = metaformer_block(&mut tape, cur, &cfg, &params, bn, momentum, train)?;
                }
                None => {
                    let s = cnn_stride(i, self.config.depth);
                    let bn1 = bn_iter.next().expect("buffer layout mismatch");
                    let h1 = tape.conv2d(cur, get(&format!("{pre}.conv1.w"))?, None, s, 1, 1)?;
                    let h1 = tape.batch_norm(
                        h1,
                        get(&format!("{pre}.bn1.gamma"))?,
                        get(&format!("{pre}.bn1.beta"))?,
                        &mut bn1.mean,
                        &mut bn1.var,
                        momentum,
                        train,
                    )?;
                    let h1 = tape.gelu(h1);
                    let bn2 = bn_iter.next().expect("buffer layout mismatch");
                    let h2 = tape.conv2d(h1, get(&format!("{pre}.conv2.w"))?, None, 1, 1, 1)?;
                    let h2 = tape.batch_norm(
                        h2,
                        get(&format!("{pre}.bn2.gamma"))?,
                        get(&format!("{pre}.bn2.beta"))?,
                        &mut bn2.mean,
                        &mut bn2.var,
                        momentum,
                        train,
                    )?;
                    let skip = if s == 2 {
                        tape.conv2d(cur, get(&format!("{pre}.skip.w"))?, None, 2, 0, 1)?
                    } else {
                        cur
                    };
                    let sum = tape.add(h2, skip)?;
                    cur = tape.gelu(sum);
                }
            }
        }

        let pooled = tape.global_avg_pool(cur)?;
        let logits = tape.linear(pooled, get("head.w")?, Some(get("head.b")?))?;
        Ok(TapedForward { tape, logits, leaves })
    }

    pub fn forward(&mut self, batch: &Tensor<f32>, train: bool) -> Result<Tensor<f32>> {
        let fwd = self.forward_taped(batch, train)?;
        let logits = fwd.tape.value(fwd.logits);
        if !logits.all_finite() {
            return Err(Error::NonFinite { context: "forward logits".into() });
        }
        Ok(logits.clone())
    }

    /// Structural cost of one forward pass at the configured input size,
    /// batch 1, eval mode. Depends only on the architecture, not the seed.
    pub fn profile(&mut self) -> Result<ModelProfile> {
        let (h, w) = self.config.input_size;
        let input = Tensor::zeros(&[1, self.config.in_channels, h, w]);
        let fwd = self.forward_taped(&input, false)?;
        let tp = fwd.tape.profile();
        Ok(ModelProfile {
            param_count: self.param_count(),
            activation_elems: tp.activation_elems,
            mult_adds: tp.mult_adds,
        })
    }
}

/// First three stages halve the resolution, as long as a later block exists.
fn cnn_stride(block: usize, depth: usize) -> usize {
    if block < 3 && block + 1 < depth {
        2
    } else {
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk(family: Family) -> Model {
        Model::build(ModelConfig::desk(family), 0).unwrap()
    }

    // Hand-summed parameter formulas, kept independent of the builder.
    fn expected_params(cfg: &ModelConfig) -> usize {
        let d = cfg.embed_dim;
        let hid = ((d as f64 * cfg.mlp_ratio).round() as usize).max(1);
        let stem = if cfg.family.uses_patch_embed() {
            d * cfg.in_channels * cfg.patch_size * cfg.patch_size + d
        } else {
            d * cfg.in_channels * 9 + d
        };
        let pos = if cfg.family == Family::MiniViT {
            let (gh, gw) = cfg.grid();
            d * gh * gw
        } else {
            0
        };
        let mlp = hid * d + hid + d * hid + d;
        let per_block = match cfg.family {
            Family::WaveMixNet => {
                let mut mixer = (d / 4) * d + d / 4;
                for l in 0..cfg.dwt_levels {
                    mixer += hid * d + hid + d * hid + d + (l + 1) * d * d * 16;
                }
                4 * d + mixer + mlp
            }
            Family::FNet2DNet => 4 * d + mlp,
            Family::ConvMixerNet => {
                4 * d + d * cfg.kernel_size * cfg.kernel_size + d + mlp
            }
            Family::MLPMixerNet => {
                let t = cfg.grid().0 * cfg.grid().1;
                4 * d + t * t + t + mlp
            }
            Family::MiniViT => 4 * d + 4 * (d * d + d) + mlp,
            Family::MiniCNN => 0,
        };
        let blocks = if cfg.family == Family::MiniCNN {
            (0..cfg.depth)
                .map(|i| {
                    let skip = if cnn_stride(i, cfg.depth) == 2 { d * d } else { 0 };
                    2 * (d * d * 9) + 4 * d + skip
                })
                .sum::<usize>()
        } else {
            cfg.depth * per_block
        };
        let head = d * cfg.num_classes + cfg.num_classes;
        stem + pos + blocks + head
    }

    #[test]
    fn parameter_counts_match_hand_formulas() {
        for family in Family::ALL {
            let cfg = ModelConfig::desk(family);
            let m = Model::build(cfg.clone(), 3).unwrap();
            assert_eq!(m.param_count(), expected_params(&cfg), "{family}");
        }
    }

    #[test]
    fn desk_parameter_totals_are_frozen() {
        let expect = [
            (Family::WaveMixNet, 401858usize),
            (Family::FNet2DNet, 69250),
            (Family::ConvMixerNet, 77250),
            (Family::MLPMixerNet, 333762),
            (Family::MiniViT, 153538),
            (Family::MiniCNN, 310146),
        ];
        for (family, count) in expect {
            assert_eq!(desk(family).param_count(), count, "{family}");
        }
    }

    #[test]
    fn head_contributes_130_params() {
        let m = desk(Family::FNet2DNet);
        let w = m.get_param("head.w").unwrap().numel();
        let b = m.get_param("head.b").unwrap().numel();
        assert_eq!(w + b, 130);
    }

    #[test]
    fn same_seed_builds_identical_models() {
        for family in [Family::WaveMixNet, Family::MiniViT] {
            let a = Model::build(ModelConfig::desk(family), 42).unwrap();
            let b = Model::build(ModelConfig::desk(family), 42).unwrap();
            for ((na, ta), (nb, tb)) in a.named_params().zip(b.named_params()) {
                assert_eq!(na, nb);
                assert_eq!(ta.data(), tb.data(), "{family} {na}");
            }
            let c = Model::build(ModelConfig::desk(family), 43).unwrap();
            let differs = a
                .named_params()
                .zip(c.named_params())
                .any(|((_, ta), (_, tc))| ta.data() != tc.data());
            assert!(differs, "{family}: different seeds must differ");
        }
    }

    #[test]
    fn forward_shape_and_finiteness_for_every_family() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        for family in Family::ALL {
            let mut m = desk(family);
            let logits = m.forward(&x, false).unwrap();
            assert_eq!(logits.shape(), &[1, 2], "{family}");
            assert!(logits.all_finite(), "{family}");
        }
    }

    #[test]
    fn zero_head_gives_ln_k_loss() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(&[2, 3, 64, 64], 1.0, &mut rng);
        for family in Family::ALL {
            let mut m = desk(family);
            let mut fwd = m.forward_taped(&x, true).unwrap();
            assert!(fwd.tape.value(fwd.logits).data().iter().all(|&v| v == 0.0), "{family}");
            let loss = fwd.tape.softmax_cross_entropy(fwd.logits, &[0, 1]).unwrap();
            let got = fwd.tape.value(loss).item() as f64;
            assert!((got - (2.0f64).ln()).abs() < 1e-6, "{family}: {got}");
        }
    }

    #[test]
    fn eval_rows_are_independent_and_stats_untouched() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let one = Tensor::<f32>::randn(&[1, 3, 64, 64], 1.0, &mut rng);
        let mut two = Tensor::<f32>::zeros(&[2, 3, 64, 64]);
        two.data_mut()[..one.numel()].copy_from_slice(one.data());
        two.data_mut()[one.numel()..].copy_from_slice(one.data());
        for family in [Family::WaveMixNet, Family::MiniCNN, Family::MiniViT] {
            let mut m = desk(family);
            let before: Vec<Vec<f32>> = m
                .named_buffers()
                .map(|(_, p)| p.mean.data().iter().chain(p.var.data()).copied().collect())
                .collect();
            let logits = m.forward(&two, false).unwrap();
            let after: Vec<Vec<f32>> = m
                .named_buffers()
                .map(|(_, p)| p.mean.data().iter().chain(p.var.data()).copied().collect())
                .collect();
            assert_eq!(before, after, "{family}: eval must not touch running stats");
            let (a, b) = logits.data().split_at(2);
            assert_eq!(a, b, "{family}: duplicated rows must agree");
        }
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::<f32>::randn(&[2, 3, 64, 64], 1.0, &mut rng);
        let mut m = desk(Family::MiniCNN);
        let before: Vec<f32> = m.named_buffers().flat_map(|(_, p)| p.mean.data().to_vec()).collect();
        m.forward(&x, true).unwrap();
        let after: Vec<f32> = m.named_buffers().flat_map(|(_, p)| p.mean.data().to_vec()).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn resolution_flexibility_matrix() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x32 = Tensor::<f32>::randn(&[1, 3, 32, 32], 1.0, &mut rng);
        for family in [Family::WaveMixNet, Family::FNet2DNet, Family::ConvMixerNet, Family::MiniCNN] {
            let mut m = desk(family);
            let logits = m.forward(&x32, false).unwrap();
            assert_eq!(logits.shape(), &[1, 2], "{family} must accept 32x32");
        }
        for family in [Family::MLPMixerNet, Family::MiniViT] {
            let mut m = desk(family);
            let err = m.forward(&x32, false).unwrap_err();
            assert!(matches!(err, Error::ResolutionMismatch { .. }), "{family}");
        }
    }

    #[test]
    fn profile_is_seed_invariant_and_exact_on_linear() {
        let p1 = desk(Family::ConvMixerNet).profile().unwrap();
        let p2 = Model::build(ModelConfig::desk(Family::ConvMixerNet), 999).unwrap().profile().unwrap();
        assert_eq!(p1, p2);

        // A lone 8->4 affine map: 36 parameters, 32 multiply-adds.
        let mut tape = GradTape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 8]), false);
        let w = tape.leaf(Tensor::zeros(&[8, 4]), true);
        let b = tape.leaf(Tensor::zeros(&[4]), true);
        let _ = tape.linear(x, w, Some(b)).unwrap();
        let prof = tape.profile();
        assert_eq!(prof.mult_adds, 32);
        assert_eq!(tape.value(w).numel() + tape.value(b).numel(), 36);
    }

    #[test]
    fn fnet_activations_dominate_every_family() {
        let fnet = desk(Family::FNet2DNet).profile().unwrap().activation_elems;
        for family in Family::ALL {
            if family == Family::FNet2DNet {
                continue;
            }
            let other = desk(family).profile().unwrap().activation_elems;
            assert!(
                fnet > other,
                "{family}: {other} must stay below FNet2DNet {fnet}"
            );
        }
    }

    #[test]
    fn invalid_configs_are_rejected_with_field_names() {
        let mut cfg = ModelConfig::desk(Family::MiniViT);
        cfg.heads = 5;
        assert!(Model::build(cfg, 0).is_err());
        let mut cfg = ModelConfig::desk(Family::MLPMixerNet);
        cfg.patch_size = 5;
        assert!(Model::build(cfg, 0).is_err());
        let mut cfg = ModelConfig::desk(Family::MiniCNN);
        cfg.num_classes = 1;
        assert!(Model::build(cfg, 0).is_err());
    }

    #[test]
    fn family_names_round_trip() {
        for family in Family::ALL {
            assert_eq!(family.name().parse::<Family>().unwrap(), family);
        }
        assert_eq!("wavemix".parse::<Family>().unwrap(), Family::WaveMixNet);
        assert!("resnet".parse::<Family>().is_err());
    }
}
