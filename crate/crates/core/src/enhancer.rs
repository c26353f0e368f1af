//! The full enhancer: input embedding, four-level encoder, a decoder with a
//! prompt block after each upsampling level, and a residual image output
//! `I_e = clamp(I_0 + F_e, 0, 1)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cgm::{Cgm, PromptDims, PromptMode};
use crate::checkpoint::ElemType;
use crate::cpb::{BlockKind, CpbConfig, PromptBlock, SigmaMode};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Spatial size must be a multiple of this (inputs are padded otherwise).
pub const SIZE_MULTIPLE: usize = 8;
pub const LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnhancerConfig {
    pub base_channels: usize,
    pub levels: usize,
    pub prompt_height: usize,
    pub prompt_width: usize,
    pub prompt_channels: usize,
    pub splits: usize,
    pub reduction: usize,
    pub heads: usize,
    pub expansion: f64,
    pub sigma_mode: SigmaMode,
    pub rfa_enabled: bool,
    pub rfa_kernel: usize,
    pub elem_type: ElemType,
    pub prompt_mode: PromptMode,
    pub block: BlockKind,
}

impl Default for EnhancerConfig {
    fn default() -> Self {
        EnhancerConfig {
            base_channels: 16,
            levels: LEVELS,
            prompt_height: 32,
            prompt_width: 32,
            prompt_channels: 128,
            splits: 4,
            reduction: 16,
            heads: 1,
            expansion: 2.0,
            sigma_mode: SigmaMode::Softmax,
            rfa_enabled: true,
            rfa_kernel: 3,
            elem_type: ElemType::F64,
            prompt_mode: PromptMode::Chained,
            block: BlockKind::Cpb,
        }
    }
}

impl EnhancerConfig {
    /// Desk-scale configuration: C = 8, prompt 8×8×64.
    pub fn toy() -> Self {
        EnhancerConfig {
            base_channels: 8,
            prompt_height: 8,
            prompt_width: 8,
            prompt_channels: 64,
            ..Self::default()
        }
    }

    /// Smallest configuration used for end-to-end gradient checks.
    pub fn tiny() -> Self {
        EnhancerConfig {
            base_channels: 4,
            prompt_height: 2,
            prompt_width: 2,
            prompt_channels: 32,
            splits: 2,
            reduction: 4,
            ..Self::default()
        }
    }

    pub fn prompt_dims(&self) -> PromptDims {
        PromptDims::new(self.prompt_height, self.prompt_width, self.prompt_channels)
    }

    /// Prompt-block channels at decoder level `i ∈ {1, 2, 3}`: 2C, 4C, 8C.
    pub fn decoder_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn block_config(&self, level: usize) -> CpbConfig {
        CpbConfig {
            channels: self.decoder_channels(level),
            splits: self.splits,
            reduction: self.reduction,
            heads: self.heads,
            expansion: self.expansion,
            sigma_mode: self.sigma_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels != LEVELS {
            return Err(Error::Config(format!("levels must be {LEVELS}, got {}", self.levels)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be positive".into()));
        }
        if self.rfa_kernel % 2 == 0 {
            return Err(Error::Config(format!("rfa_kernel {} must be odd", self.rfa_kernel)));
        }
        self.prompt_dims().validate()?;
        if self.block == BlockKind::Cpb {
            for level in 1..=3 {
                self.block_config(level)
                    .validate()
                    .map_err(|e| Error::Config(format!("decoder level {level}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Receptive-field attention convolution: every k×k neighbourhood is
/// re-weighted by a per-position softmax over its k² taps (logits from an
/// average-pooled grouped 1×1 path) before a pointwise projection. With
/// attention disabled it is a plain k×k convolution.
#[derive(Clone, Debug)]
pub struct RfaConv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub enabled: bool,
}

impl RfaConv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize, enabled: bool) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("receptive-field kernel {kernel} must be odd")));
        }
        Ok(RfaConv {
            name: name.into(),
            cin,
            cout,
            kernel,
            enabled,
        })
    }

    fn taps(&self) -> usize {
        self.kernel * self.kernel
    }

    fn attn(&self) -> Conv {
        let t = self.taps();
        Conv::pointwise(format!("{}.attn", self.name), self.cin, self.cin * t)
            .with_spec(Conv2dSpec::default().groups(self.cin))
    }

    /// Aggregating projection (a plain k×k conv when attention is off).
    pub fn proj(&self) -> Conv {
        let name = format!("{}.proj", self.name);
        if self.enabled {
            Conv::pointwise(name, self.cin * self.taps(), self.cout)
        } else {
            Conv::same(name, self.cin, self.cout, self.kernel)
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        if self.enabled {
            // Zero logits: taps start uniformly weighted.
            let attn = self.attn();
            store.register(attn.weight_name(), Tensor::zeros(attn.weight_shape()))?;
            store.register(attn.bias_name(), Tensor::zeros([1, attn.cout, 1, 1]))?;
            // Tap weights average to 1/k², so a variance-preserving bound of
            // k·sqrt(3 / cin) keeps activations from shrinking with depth.
            let proj = self.proj();
            let bound = self.kernel as f64 * (3.0 / self.cin as f64).sqrt();
            store.register(proj.weight_name(), Tensor::uniform(proj.weight_shape(), -bound, bound, rng))?;
            store.register(proj.bias_name(), Tensor::zeros([1, self.cout, 1, 1]))?;
            Ok(())
        } else {
            self.proj().init(store, rng)
        }
    }

    /// Per-position tap weights, `N × (C·k²) × H × W`, summing to 1 over each
    /// channel's k² taps.
    pub fn attention_weights(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let xs = g.value(x).shape();
        let (k, t) = (self.kernel, self.taps());
        let avg = g.constant(Tensor::full([self.cin, 1, k, k], 1.0 / t as f64));
        let spec = Conv2dSpec::default().padding(k / 2).groups(self.cin);
        let pooled = g.conv2d(x, avg, None, spec)?;
        let logits = self.attn().forward(g, store, pooled)?;
        let grouped = g.reshape(logits, [xs.n(), self.cin, t, xs.h() * xs.w()])?;
        let weights = g.softmax(grouped, 2)?;
        g.reshape(weights, [xs.n(), self.cin * t, xs.h(), xs.w()])
    }

    /// Extracts the k² shifted copies of each channel (`N × C·k² × H × W`).
    pub fn unfold(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.unfold(x, self.kernel)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let c = g.value(x).shape().c();
        if c != self.cin {
            return Err(Error::dim("rfa_conv", format!("{} expects {} channels, got {c}", self.name, self.cin)));
        }
        if !self.enabled {
            return self.proj().forward(g, store, x);
        }
        let weights = self.attention_weights(g, store, x)?;
        let fields = self.unfold(g, x)?;
        let weighted = g.mul(fields, weights)?;
        self.proj().forward(g, store, weighted)
    }
}

/// Tape handles for everything one forward pass exposes.
#[derive(Clone, Copy, Debug)]
pub struct EnhancerVars {
    /// Clamped enhanced image.
    pub output: Var,
    /// `F_e`, cropped to the input size.
    pub residual: Var,
    /// `F_r`: 8C × H/8 × W/8.
    pub latent: Var,
    /// `F_h`: 2C × H × W (before the output projection).
    pub decoder: Var,
    /// Prompt-block outputs at decoder levels 1, 2, 3.
    pub levels: [Var; 3],
}

/// Plain-tensor copy of the features of [`EnhancerVars`].
#[derive(Clone, Debug)]
pub struct Features {
    pub latent: Tensor,
    pub decoder: Tensor,
    pub levels: [Tensor; 3],
}

#[derive(Clone, Debug)]
pub struct Enhanced {
    pub image: Tensor,
    pub features: Features,
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    down: Option<Conv>,
    body: RfaConv,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    fuse: Conv,
    body: RfaConv,
    block: PromptBlock,
}

#[derive(Clone, Debug)]
pub struct Enhancer {
    pub config: EnhancerConfig,
    pub cgm: Cgm,
    embed: RfaConv,
    encoder: Vec<EncoderLevel>,
    /// Index `i − 1` holds decoder level `i`.
    decoder: Vec<DecoderLevel>,
    out: RfaConv,
}

impl Enhancer {
    pub fn new(config: EnhancerConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let (k, rfa) = (config.rfa_kernel, config.rfa_enabled);
        let targets = [1, 2, 3].map(|l| config.decoder_channels(l));
        let cgm = Cgm::new(config.prompt_dims(), config.prompt_mode, Some(targets))?;
        let embed = RfaConv::new("enc.embed", 3, c, k, rfa)?;
        let down_spec = Conv2dSpec::default().stride(2).padding(1);
        let encoder = (1..=LEVELS)
            .map(|l| {
                let ch = c << (l - 1);
                Ok(EncoderLevel {
                    down: (l > 1).then(|| Conv::same(format!("enc.down{}", l - 1), ch / 2, ch, 3).with_spec(down_spec)),
                    body: RfaConv::new(format!("enc.l{l}"), ch, ch, k, rfa)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let up_spec = Conv2dSpec::default().stride(2).padding(1).transposed(1);
        let decoder = (1..=3)
            .map(|l| {
                let below = if l == 3 { 8 * c } else { config.decoder_channels(l + 1) };
                let up_ch = below / 2;
                let skip = c << (l - 1);
                let ch = config.decoder_channels(l);
                Ok(DecoderLevel {
                    up: Conv::same(format!("dec.up{l}"), below, up_ch, 3).with_spec(up_spec),
                    fuse: Conv::pointwise(format!("dec.fuse{l}"), up_ch + skip, ch),
                    body: RfaConv::new(format!("dec.l{l}"), ch, ch, k, rfa)?,
                    block: PromptBlock::new(config.block, &block_prefix(config.block, l), config.block_config(l))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out = RfaConv::new("out", 2 * c, 3, k, rfa)?;
        Ok(Enhancer {
            config,
            cgm,
            embed,
            encoder,
            decoder,
            out,
        })
    }

    /// Registers every parameter; deterministic for a given RNG state.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.cgm.init(store, rng)?;
        self.embed.init(store, rng)?;
        for level in &self.encoder {
            if let Some(down) = &level.down {
                down.init_linear(store, rng)?;
            }
            level.body.init(store, rng)?;
        }
        for level in self.decoder.iter().rev() {
            level.up.init(store, rng)?;
            level.fuse.init_linear(store, rng)?;
            level.body.init(store, rng)?;
            level.block.init(store, rng)?;
        }
        // The network starts as the identity map; the output projection
        // learns the correction from zero.
        self.out.init(store, rng)?;
        store.zero_prefix(&self.output_projection_prefix());
        Ok(())
    }

    /// Fresh parameters from `seed`.
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        self.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        if self.config.elem_type == ElemType::F32 {
            store.quantize_f32();
        }
        Ok(store)
    }

    /// Prefix of the output projection; zeroing it makes the network an identity.
    pub fn output_projection_prefix(&self) -> String {
        format!("{}.proj.", self.out.name)
    }

    /// Zeroes the output projection so that `F_e ≡ 0`.
    pub fn zero_output(&self, store: &mut ParamStore) -> usize {
        store.zero_prefix(&self.output_projection_prefix())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, image: Var) -> Result<EnhancerVars> {
        let s = g.value(image).shape();
        if s.c() != 3 {
            return Err(Error::dim("enhance", format!("expected 3 input channels, got {s}")));
        }
        let pad = |d: usize| (SIZE_MULTIPLE - d % SIZE_MULTIPLE) % SIZE_MULTIPLE;
        let x = g.pad_replicate(image, pad(s.h()), pad(s.w()))?;

        let mut feat = self.embed.forward(g, store, x)?;
        let mut skips = Vec::with_capacity(LEVELS);
        for level in &self.encoder {
            if let Some(down) = &level.down {
                feat = down.forward(g, store, feat)?;
            }
            feat = level.body.forward(g, store, feat)?;
            skips.push(feat);
        }
        let latent = feat;

        let prompts = self.cgm.forward(g, store)?;
        let mut levels = [latent; 3];
        for l in (1..=3).rev() {
            let level = &self.decoder[l - 1];
            let up = level.up.forward(g, store, feat)?;
            let cat = g.concat_channels(&[up, skips[l - 1]])?;
            let fused = level.fuse.forward(g, store, cat)?;
            let body = level.body.forward(g, store, fused)?;
            feat = level.block.forward(g, store, body, prompts[l - 1])?;
            levels[l - 1] = feat;
        }
        let decoder = feat;

        let residual = self.out.forward(g, store, decoder)?;
        let residual = if residual_needs_crop(g.value(residual).shape(), s) {
            g.crop(residual, 0, 0, s.h(), s.w())?
        } else {
            residual
        };
        let sum = g.add(image, residual)?;
        let output = g.clamp(sum, 0.0, 1.0)?;
        Ok(EnhancerVars {
            output,
            residual,
            latent,
            decoder,
            levels,
        })
    }

    /// Inference on an N×3×H×W batch with values in [0, 1].
    pub fn enhance(&self, store: &ParamStore, images: &Tensor) -> Result<Enhanced> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let v = self.forward(&mut g, store, x)?;
        let take = |v: Var| g.value(v).clone();
        Ok(Enhanced {
            image: take(v.output),
            features: Features {
                latent: take(v.latent),
                decoder: take(v.decoder),
                levels: v.levels.map(take),
            },
        })
    }

    /// Checks that `store` holds exactly this network's parameters with matching shapes.
    pub fn check_params(&self, store: &ParamStore) -> Result<()> {
        let reference = self.init_params(0)?;
        for (name, t) in reference.iter() {
            match store.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{name}`"))),
                Some(have) if have.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{name}` has shape {}, expected {}",
                        have.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = store.names().find(|n| !reference.contains(n)) {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(())
    }

    /// Expected `[latent, decoder, level1, level2, level3]` shapes for an input.
    pub fn feature_shapes(&self, n: usize, h: usize, w: usize) -> [Shape; 5] {
        let up = |d: usize| d.div_ceil(SIZE_MULTIPLE) * SIZE_MULTIPLE;
        let (h, w) = (up(h), up(w));
        let c = self.config.base_channels;
        let level = |l: usize| Shape::new(n, self.config.decoder_channels(l), h >> (l - 1), w >> (l - 1));
        [
            Shape::new(n, 8 * c, h / 8, w / 8),
            Shape::new(n, 2 * c, h, w),
            level(1),
            level(2),
            level(3),
        ]
    }
}

fn residual_needs_crop(have: Shape, want: Shape) -> bool {
    have.h() != want.h() || have.w() != want.w()
}

fn block_prefix(kind: BlockKind, level: usize) -> String {
    match kind {
        BlockKind::Cpb => format!("cpb.L{level}"),
        BlockKind::Spb => format!("spb.L{level}"),
    }
}

/// Variants of `base` covering the prompt-design ablations: block splits
/// n ∈ {2, 4, 8}, independent (unchained) prompts, and the simple prompt block.
pub fn ablation_grid(base: &EnhancerConfig) -> Vec<(String, EnhancerConfig)> {
    let mut grid: Vec<(String, EnhancerConfig)> = [2, 4, 8]
        .into_iter()
        .map(|n| (format!("cpb_n{n}_chained"), EnhancerConfig { splits: n, ..base.clone() }))
        .collect();
    grid.push((
        "cpb_independent".into(),
        EnhancerConfig {
            prompt_mode: PromptMode::Independent,
            ..base.clone()
        },
    ));
    grid.push((
        "spb_chained".into(),
        EnhancerConfig {
            block: BlockKind::Spb,
            ..base.clone()
        },
    ));
    grid
}

/// Exact number of learnable scalars for `cfg`.
pub fn count_params(cfg: &EnhancerConfig) -> Result<usize> {
    let net = Enhancer::new(cfg.clone())?;
    Ok(net.init_params(0)?.numel())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_levels_rejected() {
        let cfg = EnhancerConfig { levels: 0, ..EnhancerConfig::tiny() };
        assert!(matches!(count_params(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn shapes_follow_schedule() {
        let net = Enhancer::new(EnhancerConfig::toy()).unwrap();
        let store = net.init_params(1).unwrap();
        let img = Tensor::full([1, 3, 64, 64], 0.5);
        let out = net.enhance(&store, &img).unwrap();
        assert_eq!(out.features.latent.shape(), Shape::new(1, 64, 8, 8));
        assert_eq!(out.features.decoder.shape(), Shape::new(1, 16, 64, 64));
        let expect = net.feature_shapes(1, 64, 64);
        assert_eq!(out.features.levels[2].shape(), expect[4]);
        assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_output_projection_is_identity_even_when_padded() {
        let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
        let mut store = net.init_params(2).unwrap();
        assert_eq!(net.zero_output(&mut store), 2);
        let img = Tensor::from_fn([1, 3, 13, 10], |_, c, h, w| ((c * 7 + h * 3 + w) % 11) as f64 / 10.0);
        let out = net.enhance(&store, &img).unwrap();
        assert_eq!(out.image, img);
    }

    #[test]
    fn rfa_disabled_matches_plain_conv() {
        let rfa = RfaConv::new("r", 2, 3, 3, false).unwrap();
        let mut store = ParamStore::new();
        rfa.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = Tensor::randn([1, 2, 5, 5], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = rfa.forward(&mut g, &store, xv).unwrap();
        let w = store.get("r.proj.weight").unwrap();
        let reference = crate::ops::conv2d_reference(&x, w, None, Conv2dSpec::default().padding(1)).unwrap();
        for (a, b) in g.value(y).data().iter().zip(reference.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(RfaConv::new("r", 2, 3, 4, true).is_err());
    }
}
