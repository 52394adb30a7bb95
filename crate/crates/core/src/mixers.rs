//! The shared residual block and its interchangeable token mixers.
//!
//! Every block computes `u = x + Mix(Norm(x)); y = u + ChannelMlp(Norm(u))`
//! on [N,C,H,W] maps. The norm kind is fixed per mixer family: batch norm
//! for the wavelet and depthwise-conv mixers, channel layer norm otherwise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{GradTape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MixerKind {
    WaveletMix,
    FourierMix,
    DepthwiseConvMix,
    SpatialMlpMix,
    SelfAttentionMix,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    Batch,
    Layer,
}

/// Batch norm for mixers built from convolutions, layer norm for the rest.
pub fn norm_kind(kind: MixerKind) -> NormKind {
    match kind {
        MixerKind::WaveletMix | MixerKind::DepthwiseConvMix => NormKind::Batch,
        _ => NormKind::Layer,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlockConfig {
    pub kind: MixerKind,
    pub channels: usize,
    /// Nominal (H, W) the block is built for. Fixed-resolution mixers bind
    /// their parameter shapes to it; the rest accept any admissible size.
    pub spatial: (usize, usize),
    pub mlp_ratio: f64,
    pub heads: usize,
    pub dwt_levels: usize,
    pub kernel_size: usize,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.spatial.0 == 0 || self.spatial.1 == 0 {
            return Err(Error::config("channels/spatial", "must be positive"));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio", "must be a positive real"));
        }
        match self.kind {
            MixerKind::WaveletMix => {
                if self.channels % 4 != 0 {
                    return Err(Error::config(
                        "channels",
                        format!("{} not divisible by 4 (wavelet mixer concatenates 4 subbands)", self.channels),
                    ));
                }
                if self.dwt_levels == 0 {
                    return Err(Error::config("dwt_levels", "must be >= 1"));
                }
                let div = 1usize << self.dwt_levels;
                if self.spatial.0 % div != 0 || self.spatial.1 % div != 0 {
                    return Err(Error::config(
                        "dwt_levels",
                        format!("spatial {}x{} not divisible by 2^{}", self.spatial.0, self.spatial.1, self.dwt_levels),
                    ));
                }
            }
            MixerKind::SelfAttentionMix => {
                if self.heads == 0 || self.channels % self.heads != 0 {
                    return Err(Error::config(
                        "heads",
                        format!("{} heads must divide channels {}", self.heads, self.channels),
                    ));
                }
            }
            MixerKind::DepthwiseConvMix => {
                if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
                    return Err(Error::config(
                        "kernel_size",
                        format!("{} must be odd for same-size padding", self.kernel_size),
                    ));
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Hidden width of the channel MLP (and of the wavelet level MLPs).
    pub fn mlp_hidden(&self) -> usize {
        ((self.channels as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn tokens(&self) -> usize {
        self.spatial.0 * self.spatial.1
    }
}

// ---- parameter bundles (tape leaves, owned by the model) -----------------

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: Var,
    pub beta: Var,
}

/// Two pointwise convolutions with a GELU between them.
#[derive(Clone, Copy, Debug)]
pub struct ChannelMlpParams {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct WaveletLevelParams {
    pub mlp_w1: Var,
    pub mlp_b1: Var,
    pub mlp_w2: Var,
    pub mlp_b2: Var,
    /// Stride-2 transposed convolutions back to full resolution; level ℓ
    /// (1-based) carries ℓ of them.
    pub upsamples: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct WaveletMixParams {
    pub reduce_w: Var,
    pub reduce_b: Var,
    pub levels: Vec<WaveletLevelParams>,
}

#[derive(Clone, Copy, Debug)]
pub struct DepthwiseMixParams {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SpatialMlpParams {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Clone, Debug)]
pub enum MixerParams {
    Wavelet(WaveletMixParams),
    Fourier,
    Depthwise(DepthwiseMixParams),
    SpatialMlp(SpatialMlpParams),
    SelfAttention(AttentionParams),
}

impl MixerParams {
    pub fn kind(&self) -> MixerKind {
        match self {
            MixerParams::Wavelet(_) => MixerKind::WaveletMix,
            MixerParams::Fourier => MixerKind::FourierMix,
            MixerParams::Depthwise(_) => MixerKind::DepthwiseConvMix,
            MixerParams::SpatialMlp(_) => MixerKind::SpatialMlpMix,
            MixerParams::SelfAttention(_) => MixerKind::SelfAttentionMix,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: NormParams,
    pub norm2: NormParams,
    pub mixer: MixerParams,
    pub mlp: ChannelMlpParams,
}

/// Running statistics for one batch-norm site.
#[derive(Clone, Debug)]
pub struct BnPair<T: Scalar> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> BnPair<T> {
    pub fn new(channels: usize) -> Self {
        BnPair { mean: Tensor::zeros(&[channels]), var: Tensor::full(&[channels], T::ONE) }
    }
}

// ---- mixers ---------------------------------------------------------------

/// Real part of the spatial 2D DFT, per channel. Parameter-free and
/// resolution-agnostic.
pub fn fourier_mix<T: Scalar>(tape: &mut GradTape<T>, x: Var) -> Result<Var> {
    tape.fourier_mix(x)
}

/// Reduce to C/4 channels, split each level into Haar subbands concatenated
/// back to C channels at half resolution, mix channels with a pointwise MLP,
/// then upsample to full resolution with stride-2 transposed convolutions.
/// Level outputs are summed. Levels beyond the first decompose the previous
/// level's LL block. Returns the per-level subband concatenations alongside
/// the output so callers can inspect them.
pub fn wavelet_mix<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    cfg: &BlockConfig,
    p: &WaveletMixParams,
) -> Result<(Var, Vec<Var>)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape("wavelet_mix", format!("input {:?} vs {} channels", shape, cfg.channels)));
    }
    let levels = p.levels.len();
    if levels != cfg.dwt_levels {
        return Err(Error::config("dwt_levels", format!("{} parameter levels vs {} configured", levels, cfg.dwt_levels)));
    }
    let div = 1usize << levels;
    if shape[2] % div != 0 || shape[3] % div != 0 {
        return Err(Error::shape(
            "wavelet_mix",
            format!("spatial {}x{} not divisible by 2^{levels}", shape[2], shape[3]),
        ));
    }
    let quarter = cfg.channels / 4;

    let mut current = tape.conv2d(x, p.reduce_w, Some(p.reduce_b), 1, 0, 1)?;
    let mut taps = Vec::with_capacity(levels);
    let mut restored = Vec::with_capacity(levels);
    for lp in &p.levels {
        let concat = tape.dwt_concat(current)?;
        taps.push(concat);
        let h1 = tape.conv2d(concat, lp.mlp_w1, Some(lp.mlp_b1), 1, 0, 1)?;
        let h1 = tape.gelu(h1);
        let mixed = tape.conv2d(h1, lp.mlp_w2, Some(lp.mlp_b2), 1, 0, 1)?;
        let mut up = mixed;
        for &k in &lp.upsamples {
            up = tape.conv_transpose2d(up, k, None, 2, 1)?;
        }
        restored.push(up);
        current = tape.slice_channels(concat, 0, quarter)?;
    }
    let mut y = restored[0];
    for &r in &restored[1..] {
        y = tape.add(y, r)?;
    }
    Ok((y, taps))
}

/// Depthwise convolution, stride 1, same padding. One k×k filter per channel.
pub fn depthwise_mix<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    cfg: &BlockConfig,
    p: &DepthwiseMixParams,
) -> Result<Var> {
    let pad = (cfg.kernel_size - 1) / 2;
    tape.conv2d(x, p.w, Some(p.b), 1, pad, cfg.channels)
}

/// One dense map over the token axis, shared across channels. The weight is
/// bound to the trained token count, so other resolutions are rejected.
pub fn spatial_mlp_mix<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    cfg: &BlockConfig,
    p: &SpatialMlpParams,
) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape("spatial_mlp_mix", format!("input {:?} vs {} channels", shape, cfg.channels)));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let trained = tape.value(p.w).shape()[0];
    if h * w != trained {
        return Err(Error::ResolutionMismatch {
            expected: format!("{trained} tokens"),
            got: format!("{h}x{w} = {} tokens", h * w),
        });
    }
    let flat = tape.reshape(x, &[n, c, h * w])?;
    let mixed = tape.linear(flat, p.w, Some(p.b))?;
    tape.reshape(mixed, &[n, c, h, w])
}

/// Multi-head scaled dot-product attention over the H·W token sequence.
/// Returns the output map and the attention weights [N, heads, T, T].
pub fn self_attention_mix<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    cfg: &BlockConfig,
    p: &AttentionParams,
) -> Result<(Var, Var)> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(Error::shape("self_attention_mix", format!("input {:?} vs {} channels", shape, cfg.channels)));
    }
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (heads, t) = (cfg.heads, h * w);
    let dim = c / heads;

    let flat = tape.reshape(x, &[n, c, t])?;
    let tokens = tape.permute(flat, &[0, 2, 1])?;
    let q = tape.linear(tokens, p.wq, Some(p.bq))?;
    let k = tape.linear(tokens, p.wk, Some(p.bk))?;
    let v = tape.linear(tokens, p.wv, Some(p.bv))?;

    let q = tape.reshape(q, &[n, t, heads, dim])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?;
    let k = tape.reshape(k, &[n, t, heads, dim])?;
    let k = tape.permute(k, &[0, 2, 3, 1])?;
    let v = tape.reshape(v, &[n, t, heads, dim])?;
    let v = tape.permute(v, &[0, 2, 1, 3])?;

    let scores = tape.matmul_batched(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let probs = tape.softmax_last(scores)?;
    let ctx = tape.matmul_batched(probs, v)?;

    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[n, t, c])?;
    let out = tape.linear(ctx, p.wo, Some(p.bo))?;
    let out = tape.permute(out, &[0, 2, 1])?;
    let y = tape.reshape(out, &[n, c, h, w])?;
    Ok((y, probs))
}

// ---- the block --------------------------------------------------------------

fn apply_norm<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    np: &NormParams,
    kind: NormKind,
    bn: Option<&mut BnPair<T>>,
    momentum: f64,
    train: bool,
) -> Result<Var> {
    match kind {
        NormKind::Layer => tape.layer_norm(x, np.gamma, np.beta, 1),
        NormKind::Batch => {
            let bn = bn.ok_or_else(|| Error::config("norms", "batch-norm block needs running statistics"))?;
            tape.batch_norm(x, np.gamma, np.beta, &mut bn.mean, &mut bn.var, momentum, train)
        }
    }
}

fn channel_mlp<T: Scalar>(tape: &mut GradTape<T>, x: Var, p: &ChannelMlpParams) -> Result<Var> {
    let h = tape.conv2d(x, p.w1, Some(p.b1), 1, 0, 1)?;
    let h = tape.gelu(h);
    tape.conv2d(h, p.w2, Some(p.b2), 1, 0, 1)
}

/// `u = x + Mix(Norm(x)); y = u + ChannelMlp(Norm(u))`. Pass `bn` iff the
/// mixer family norms with batch statistics (one pair per norm site).
pub fn metaformer_block<T: Scalar>(
    tape: &mut GradTape<T>,
    x: Var,
    cfg: &BlockConfig,
    params: &BlockParams,
    bn: Option<(&mut BnPair<T>, &mut BnPair<T>)>,
    momentum: f64,
    train: bool,
) -> Result<Var> {
    cfg.validate()?;
    if params.mixer.kind() != cfg.kind {
        return Err(Error::config("kind", format!("{:?} parameters in a {:?} block", params.mixer.kind(), cfg.kind)));
    }
    let kind = norm_kind(cfg.kind);
    if (kind == NormKind::Batch) != bn.is_some() {
        return Err(Error::config("norms", "running statistics must be passed exactly for batch-norm blocks"));
    }
    let (bn1, bn2) = match bn {
        Some((a, b)) => (Some(a), Some(b)),
        None => (None, None),
    };

    let n1 = apply_norm(tape, x, &params.norm1, kind, bn1, momentum, train)?;
    let mixed = match &params.mixer {
        MixerParams::Wavelet(p) => wavelet_mix(tape, n1, cfg, p)?.0,
        MixerParams::Fourier => fourier_mix(tape, n1)?,
        MixerParams::Depthwise(p) => depthwise_mix(tape, n1, cfg, p)?,
        MixerParams::SpatialMlp(p) => spatial_mlp_mix(tape, n1, cfg, p)?,
        MixerParams::SelfAttention(p) => self_attention_mix(tape, n1, cfg, p)?.0,
    };
    let u = tape.add(x, mixed)?;

    let n2 = apply_norm(tape, u, &params.norm2, kind, bn2, momentum, train)?;
    let expanded = channel_mlp(tape, n2, &params.mlp)?;
    tape.add(u, expanded)
}
