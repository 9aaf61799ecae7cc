//! Mixer-block generator and PatchGAN discriminator.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{dim, invalid, Result};
use crate::graph::{Graph, Var};
use crate::impl_tree;
use crate::rng;
use crate::tensor::Tensor;

/// Convolution kernel `[c_out, c_in, k, k]` with per-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<P> {
    pub weight: P,
    pub bias: P,
}
impl_tree!(Conv { weight, bias });

/// Bias-free kernel for convolutions followed by instance norm, which
/// would cancel a per-channel bias anyway.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel<P> {
    pub weight: P,
}
impl_tree!(Kernel { weight });

/// Weight matrix plus bias vector. The orientation of `weight` depends on
/// where the layer is used; see the individual forward functions.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<P> {
    pub weight: P,
    pub bias: P,
}
impl_tree!(Dense { weight, bias });

/// LayerNorm scale and shift.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm<P> {
    pub gamma: P,
    pub beta: P,
}
impl_tree!(Norm { gamma, beta });

/// One isotropic mixer block on an `n × c` token matrix.
///
/// * `token_w1`: `[d_token_hidden, n]`, `token_w2`: `[n, d_token_hidden]`,
///   applied from the left so they mix the token axis (columns).
/// * `channel_w3`: `[d_channel_hidden, c]`, `channel_w4`: `[c, d_channel_hidden]`,
///   applied to each token's channel vector.
#[derive(Clone, Debug, PartialEq)]
pub struct MixerBlock<P> {
    pub norm1: Norm<P>,
    pub token_w1: Dense<P>,
    pub token_w2: Dense<P>,
    pub norm2: Norm<P>,
    pub channel_w3: Dense<P>,
    pub channel_w4: Dense<P>,
}
impl_tree!(MixerBlock {} nested { norm1, token_w1, token_w2, norm2, channel_w3, channel_w4 });

pub type MixerBlockParams = MixerBlock<Tensor>;

/// Which MLP of a mixer block runs first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixerOrder {
    TokenFirst,
    ChannelFirst,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixerSettings {
    pub ln_eps: f64,
    pub order: MixerOrder,
}

impl Default for MixerSettings {
    fn default() -> Self {
        Self { ln_eps: 1e-5, order: MixerOrder::TokenFirst }
    }
}

fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    Tensor::from_fn(&[rows, cols], |_| rng.random_range(-bound..bound))
}

fn uniform_vector(rng: &mut impl Rng, len: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    Tensor::from_fn(&[len], |_| rng.random_range(-bound..bound))
}

/// `weight: [out, in]` with uniform ±1/√in entries and bias.
fn dense_init(rng: &mut impl Rng, out: usize, inp: usize) -> Dense<Tensor> {
    Dense { weight: uniform_matrix(rng, out, inp, inp), bias: uniform_vector(rng, out, inp) }
}

fn kernel_init(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Kernel<Tensor> {
    Kernel { weight: Tensor::from_fn(&[c_out, c_in, k, k], |_| rng::truncated_normal(rng, 0.02)) }
}

fn conv_init(rng: &mut impl Rng, c_out: usize, c_in: usize, k: usize) -> Conv<Tensor> {
    Conv { weight: kernel_init(rng, c_out, c_in, k).weight, bias: Tensor::zeros(&[c_out]) }
}

impl MixerBlock<Tensor> {
    /// Block for `tokens × channels` inputs with hidden widths `token_hidden`, `channel_hidden`.
    pub fn init(rng: &mut impl Rng, tokens: usize, channels: usize, token_hidden: usize, channel_hidden: usize) -> Self {
        Self {
            norm1: Norm { gamma: Tensor::full(&[channels], 1.0), beta: Tensor::zeros(&[channels]) },
            token_w1: dense_init(rng, token_hidden, tokens),
            token_w2: dense_init(rng, tokens, token_hidden),
            norm2: Norm { gamma: Tensor::full(&[channels], 1.0), beta: Tensor::zeros(&[channels]) },
            channel_w3: dense_init(rng, channel_hidden, channels),
            channel_w4: dense_init(rng, channels, channel_hidden),
        }
    }

    /// Same extents, all MLP weights and biases zero, identity LayerNorm.
    pub fn zeroed(tokens: usize, channels: usize, token_hidden: usize, channel_hidden: usize) -> Self {
        let z = |r: usize, c: usize| Dense { weight: Tensor::zeros(&[r, c]), bias: Tensor::zeros(&[r]) };
        Self {
            norm1: Norm { gamma: Tensor::full(&[channels], 1.0), beta: Tensor::zeros(&[channels]) },
            token_w1: z(token_hidden, tokens),
            token_w2: z(tokens, token_hidden),
            norm2: Norm { gamma: Tensor::full(&[channels], 1.0), beta: Tensor::zeros(&[channels]) },
            channel_w3: z(channel_hidden, channels),
            channel_w4: z(channels, channel_hidden),
        }
    }

    pub fn tokens(&self) -> usize {
        self.token_w1.weight.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.channel_w3.weight.shape()[1]
    }

    /// Parameters of the token-mixing MLP only (`W₁`, `W₂` and their biases).
    pub fn token_mixing_param_count(&self) -> usize {
        [&self.token_w1, &self.token_w2]
            .iter()
            .map(|d| d.weight.numel() + d.bias.numel())
            .sum()
    }

    /// Parameters of the channel-mixing MLP only (`W₃`, `W₄` and their biases).
    pub fn channel_mixing_param_count(&self) -> usize {
        [&self.channel_w3, &self.channel_w4]
            .iter()
            .map(|d| d.weight.numel() + d.bias.numel())
            .sum()
    }
}

/// `U = X + W₂·GELU(W₁·LayerNorm(X))`, mixing along the token axis of `x: [b, n, c]`.
pub fn token_mixing(g: &mut Graph, x: Var, p: &MixerBlock<Var>, eps: f64) -> Result<Var> {
    let ln = g.layer_norm(x, p.norm1.gamma, p.norm1.beta, eps)?;
    let h = g.token_linear(p.token_w1.weight, ln, Some(p.token_w1.bias))?;
    let a = g.gelu(h);
    let o = g.token_linear(p.token_w2.weight, a, Some(p.token_w2.bias))?;
    g.add(x, o)
}

/// `Y = U + GELU(LayerNorm(U)·W₃ᵀ)·W₄ᵀ`, mixing each token's channels.
pub fn channel_mixing(g: &mut Graph, u: Var, p: &MixerBlock<Var>, eps: f64) -> Result<Var> {
    let ln = g.layer_norm(u, p.norm2.gamma, p.norm2.beta, eps)?;
    let h = g.linear(ln, p.channel_w3.weight, Some(p.channel_w3.bias))?;
    let a = g.gelu(h);
    let o = g.linear(a, p.channel_w4.weight, Some(p.channel_w4.bias))?;
    g.add(u, o)
}

/// Full mixer block on `x: [b, n, c]` (a rank-2 `[n, c]` input is treated as one sample).
pub fn mixer_block(g: &mut Graph, x: Var, p: &MixerBlock<Var>, settings: MixerSettings) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (n, c) = (g.shape(p.token_w1.weight)[1], g.shape(p.channel_w3.weight)[1]);
    let ok = match shape.as_slice() {
        [tn, tc] | [_, tn, tc] => *tn == n && *tc == c,
        _ => false,
    };
    if !ok {
        return Err(dim("mixer_block", format!("input {:?} for a block of {} tokens × {} channels", shape, n, c)));
    }
    let x3 = if shape.len() == 2 { g.reshape(x, &[1, n, c])? } else { x };
    let y = match settings.order {
        MixerOrder::TokenFirst => {
            let u = token_mixing(g, x3, p, settings.ln_eps)?;
            channel_mixing(g, u, p, settings.ln_eps)?
        }
        MixerOrder::ChannelFirst => {
            let u = channel_mixing(g, x3, p, settings.ln_eps)?;
            token_mixing(g, u, p, settings.ln_eps)?
        }
    };
    if shape.len() == 2 {
        g.reshape(y, &shape)
    } else {
        Ok(y)
    }
}

/// Shape hyper-parameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub base_channels: usize,
    pub patch_size: usize,
    /// Token width after patch projection (latent channel width).
    pub token_dim: usize,
    pub blocks: usize,
    pub token_expansion: usize,
    pub channel_expansion: usize,
    pub ln_eps: f64,
    pub in_eps: f64,
    pub order: MixerOrder,
}

impl GeneratorConfig {
    /// Channels of the downsampled feature map that gets patch-projected.
    pub fn feature_channels(&self) -> usize {
        4 * self.base_channels
    }

    pub fn grid(&self) -> usize {
        self.image_size / (4 * self.patch_size)
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * self.feature_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % (4 * self.patch_size) != 0 {
            return Err(invalid(
                "generator geometry",
                format!("image size {} is not divisible by 4·patch = {}", self.image_size, 4 * self.patch_size),
            ));
        }
        if self.base_channels == 0 || self.token_dim == 0 || self.token_expansion == 0 || self.channel_expansion == 0 {
            return Err(invalid("generator geometry", "channel widths and expansions must be ≥ 1"));
        }
        Ok(())
    }
}

/// Conv stem, two stride-2 downsampling convs, patch projection, mixer
/// blocks, patch unprojection, two transposed convs and a 7×7 output conv.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<P> {
    pub stem: Kernel<P>,
    /// `weight: [token_dim, p²·c_feat]`.
    pub patch_in: Dense<P>,
    /// `weight: [p²·c_feat, token_dim]`.
    pub patch_out: Dense<P>,
    pub head: Conv<P>,
    pub down: Vec<Kernel<P>>,
    pub blocks: Vec<MixerBlock<P>>,
    /// Transposed-conv kernels stored as `[c_in_of_upsample, c_out_of_upsample, 3, 3]`.
    pub up: Vec<Kernel<P>>,
}
impl_tree!(Generator {} nested { stem, patch_in, patch_out, head } seq { down, blocks, up });

pub type GeneratorParams = Generator<Tensor>;

impl Generator<Tensor> {
    pub fn init(cfg: &GeneratorConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let c0 = cfg.base_channels;
        let n = cfg.tokens();
        let stem = kernel_init(rng, c0, 3, 7);
        let down = alloc::vec![kernel_init(rng, 2 * c0, c0, 3), kernel_init(rng, 4 * c0, 2 * c0, 3)];
        let patch_in = dense_init(rng, cfg.token_dim, cfg.patch_features());
        let blocks = (0..cfg.blocks)
            .map(|_| MixerBlock::init(rng, n, cfg.token_dim, cfg.token_expansion * n, cfg.channel_expansion * cfg.token_dim))
            .collect();
        let patch_out = dense_init(rng, cfg.patch_features(), cfg.token_dim);
        // conv_transpose weights are laid out like the forward conv they invert
        let up = alloc::vec![kernel_init(rng, 4 * c0, 2 * c0, 3), kernel_init(rng, 2 * c0, c0, 3)];
        let head = conv_init(rng, 3, c0, 7);
        Ok(Self { stem, patch_in, patch_out, head, down, blocks, up })
    }
}

/// Tokens `[b, n, token_dim]` from a feature map `[b, c, h, w]`.
pub fn patch_project(g: &mut Graph, features: Var, proj: &Dense<Var>, patch: usize) -> Result<Var> {
    let patches = g.patchify(features, patch)?;
    g.linear(patches, proj.weight, Some(proj.bias))
}

/// Inverse-shaped map back to `[b, channels, h, w]`.
pub fn patch_unproject(
    g: &mut Graph,
    tokens: Var,
    proj: &Dense<Var>,
    channels: usize,
    h: usize,
    w: usize,
    patch: usize,
) -> Result<Var> {
    let patches = g.linear(tokens, proj.weight, Some(proj.bias))?;
    g.unpatchify(patches, channels, h, w, patch)
}

fn conv_in_relu(g: &mut Graph, x: Var, k: &Kernel<Var>, stride: usize, pad: usize, eps: f64) -> Result<Var> {
    let y = g.conv2d(x, k.weight, None, stride, pad)?;
    let y = g.instance_norm(y, eps)?;
    Ok(g.relu(y))
}

impl Generator<Var> {
    /// `x: [b, 3, H, W]` → `[b, 3, H, W]` in `[-1, 1]`.
    pub fn forward(&self, g: &mut Graph, x: Var, cfg: &GeneratorConfig) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_size || s[3] != cfg.image_size {
            return Err(dim(
                "generator_forward",
                format!("input {:?} for a generator built for [b, 3, {}, {}]", s, cfg.image_size, cfg.image_size),
            ));
        }
        cfg.validate()?;
        let eps = cfg.in_eps;
        let h = conv_in_relu(g, x, &self.stem, 1, 3, eps)?;
        let h = conv_in_relu(g, h, &self.down[0], 2, 1, eps)?;
        let h = conv_in_relu(g, h, &self.down[1], 2, 1, eps)?;
        let fs = g.shape(h).to_vec();
        let mut t = patch_project(g, h, &self.patch_in, cfg.patch_size)?;
        let settings = MixerSettings { ln_eps: cfg.ln_eps, order: cfg.order };
        for block in &self.blocks {
            t = mixer_block(g, t, block, settings)?;
        }
        let h = patch_unproject(g, t, &self.patch_out, fs[1], fs[2], fs[3], cfg.patch_size)?;
        let mut h = h;
        for up in &self.up {
            h = g.conv_transpose2d(h, up.weight, None, 2, 1, 1)?;
            h = g.instance_norm(h, eps)?;
            h = g.relu(h);
        }
        let y = g.conv2d(h, self.head.weight, Some(self.head.bias), 1, 3)?;
        Ok(g.tanh(y))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    pub in_eps: f64,
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { base_channels: 64, in_eps: 1e-5, slope: 0.2 }
    }
}

/// Layer strides of the PatchGAN stack; the last entry is the 1-channel head.
pub const DISCRIMINATOR_STRIDES: [usize; 5] = [2, 2, 2, 1, 1];
const DISC_KERNEL: usize = 4;
const DISC_PAD: usize = 1;

/// Score-map extent for an input of extent `size`, or `None` if too small.
pub fn discriminator_output_size(size: usize) -> Option<usize> {
    DISCRIMINATOR_STRIDES.iter().try_fold(size, |s, &stride| {
        crate::kernels::ConvGeom::new(DISC_KERNEL, stride, DISC_PAD).conv_out(s).filter(|&o| o > 0)
    })
}

/// 70×70-style PatchGAN: 4×4 convs with widths `c, 2c, 4c, 8c`, then a 1-channel head.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<P> {
    pub first: Conv<P>,
    /// The instance-normalized middle convolutions.
    pub body: Vec<Kernel<P>>,
    pub head: Conv<P>,
}
impl_tree!(Discriminator {} nested { first, head } seq { body });

pub type DiscriminatorParams = Discriminator<Tensor>;

impl Discriminator<Tensor> {
    pub fn init(cfg: &DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.base_channels;
        let first = conv_init(rng, c, 3, DISC_KERNEL);
        let body = [(c, 2 * c), (2 * c, 4 * c), (4 * c, 8 * c)]
            .iter()
            .map(|&(i, o)| kernel_init(rng, o, i, DISC_KERNEL))
            .collect();
        let head = conv_init(rng, 1, 8 * c, DISC_KERNEL);
        Self { first, body, head }
    }
}

impl Discriminator<Var> {
    /// `x: [b, 3, H, W]` → raw patch scores `[b, 1, h_p, w_p]` (no sigmoid).
    pub fn forward(&self, g: &mut Graph, x: Var, cfg: &DiscriminatorConfig) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let fits = s.len() == 4 && s[1] == 3 && discriminator_output_size(s[2]).is_some() && discriminator_output_size(s[3]).is_some();
        if !fits {
            return Err(dim("discriminator_forward", format!("input {:?} too small for the PatchGAN stack", s)));
        }
        let strides = DISCRIMINATOR_STRIDES;
        let h = g.conv2d(x, self.first.weight, Some(self.first.bias), strides[0], DISC_PAD)?;
        let mut h = g.leaky_relu(h, cfg.slope);
        for (k, &stride) in self.body.iter().zip(&strides[1..4]) {
            h = g.conv2d(h, k.weight, None, stride, DISC_PAD)?;
            h = g.instance_norm(h, cfg.in_eps)?;
            h = g.leaky_relu(h, cfg.slope);
        }
        g.conv2d(h, self.head.weight, Some(self.head.bias), strides[4], DISC_PAD)
    }
}
