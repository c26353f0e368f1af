//! Content-driven prompt block: attention-gated fusion of a decoder feature
//! with a prompt, followed by `n` independent channel-split transformer parts
//! (transposed attention + gated feed-forward). Also holds the simple
//! multiply-concat block used as an ablation baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv, LayerNorm};
use crate::ops::PoolKind;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Attention-matrix normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaMode {
    #[default]
    Softmax,
    Sigmoid,
}

impl std::str::FromStr for SigmaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax" => Ok(SigmaMode::Softmax),
            "sigmoid" => Ok(SigmaMode::Sigmoid),
            _ => Err(Error::Config(format!("unknown sigma mode `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpbConfig {
    pub channels: usize,
    pub splits: usize,
    pub reduction: usize,
    pub heads: usize,
    pub expansion: f64,
    pub sigma_mode: SigmaMode,
}

impl CpbConfig {
    /// Defaults: n = 4, r = 16, one head, expansion 2.
    pub fn new(channels: usize) -> Self {
        CpbConfig {
            channels,
            splits: 4,
            reduction: 16,
            heads: 1,
            expansion: 2.0,
            sigma_mode: SigmaMode::Softmax,
        }
    }

    pub fn part_channels(&self) -> usize {
        self.channels / self.splits
    }

    pub fn hidden_channels(&self) -> usize {
        ((self.part_channels() as f64 * self.expansion).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels;
        let check = |ok: bool, msg: String| if ok { Ok(()) } else { Err(Error::Config(msg)) };
        check(c > 0, "block channels must be positive".into())?;
        check(self.splits > 0 && c % self.splits == 0, format!("splits {} must divide channels {c}", self.splits))?;
        check(
            self.reduction > 0 && c % self.reduction == 0,
            format!("reduction ratio {} must divide channels {c}", self.reduction),
        )?;
        let part = self.part_channels();
        check(
            self.heads > 0 && part % self.heads == 0,
            format!("heads {} must divide part channels {part}", self.heads),
        )?;
        check(
            self.expansion.is_finite() && self.expansion > 0.0,
            format!("expansion {} must be positive", self.expansion),
        )
    }
}

/// `W_c = 1×1(ReLU(1×1(GAP(f))))`, bottleneck C → C/r → C.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    reduce: Conv,
    expand: Conv,
}

impl ChannelAttention {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Self {
        let mid = channels / reduction;
        ChannelAttention {
            reduce: Conv::pointwise(format!("{prefix}.reduce"), channels, mid),
            expand: Conv::pointwise(format!("{prefix}.expand"), mid, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.reduce.init(store, rng)?;
        self.expand.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let pooled = g.pool(f, PoolKind::GapSpatial)?;
        let h = self.reduce.forward(g, store, pooled)?;
        let h = g.relu(h)?;
        self.expand.forward(g, store, h)
    }
}

/// `W_s = 7×7([mean_c(f), max_c(f)])`, 2 → C channels.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    conv: Conv,
}

impl SpatialAttention {
    pub fn new(prefix: &str, channels: usize) -> Self {
        SpatialAttention {
            conv: Conv::same(format!("{prefix}.conv"), 2, channels, 7),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var) -> Result<Var> {
        let avg = g.pool(f, PoolKind::GapChannel)?;
        let max = g.pool(f, PoolKind::GmpChannel)?;
        let both = g.concat_channels(&[avg, max])?;
        self.conv.forward(g, store, both)
    }
}

/// Fuses a feature map with a prompt into `F_p`.
#[derive(Clone, Debug)]
pub struct PromptFusion {
    pub channels: usize,
    pub channel_attn: ChannelAttention,
    pub spatial_attn: SpatialAttention,
    dw: Conv,
    pw: Conv,
    out: Conv,
}

impl PromptFusion {
    pub fn new(prefix: &str, channels: usize, reduction: usize) -> Self {
        PromptFusion {
            channels,
            channel_attn: ChannelAttention::new(&format!("{prefix}.ca"), channels, reduction),
            spatial_attn: SpatialAttention::new(&format!("{prefix}.sa"), channels),
            dw: Conv::depthwise(format!("{prefix}.fuse.dw"), 2 * channels, 7),
            pw: Conv::pointwise(format!("{prefix}.fuse.pw"), 2 * channels, channels),
            out: Conv::pointwise(format!("{prefix}.fuse.out"), 2 * channels, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.channel_attn.init(store, rng)?;
        self.spatial_attn.init(store, rng)?;
        self.dw.init(store, rng)?;
        self.pw.init(store, rng)?;
        self.out.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, prompt: Var) -> Result<Var> {
        let fs = g.value(f).shape();
        let ps = g.value(prompt).shape();
        if ps.c() != self.channels || fs.c() != self.channels {
            return Err(Error::Config(format!(
                "prompt {ps} and feature {fs} must both have {} channels",
                self.channels
            )));
        }
        let wc = self.channel_attn.forward(g, store, f)?;
        let ws = self.spatial_attn.forward(g, store, f)?;
        let gate = g.add(wc, ws)?;
        let gated = g.mul(gate, f)?;
        let fw = g.concat_channels(&[gated, f])?;
        let shuffled = g.channel_shuffle(fw, 2)?;
        let t = self.dw.forward(g, store, shuffled)?;
        let t = self.pw.forward(g, store, t)?;
        let f_s = g.sigmoid(t)?;
        let p = g.bilinear_rescale(prompt, fs.h(), fs.w())?;
        let guided = g.add(p, f_s)?;
        let cat = g.concat_channels(&[f, guided])?;
        self.out.forward(g, store, cat)
    }
}

/// A 1×1 projection followed by a 3×3 depthwise conv.
#[derive(Clone, Debug)]
struct PointDepth {
    pc: Conv,
    dc: Conv,
}

impl PointDepth {
    fn new(prefix: &str, cin: usize, cout: usize) -> Self {
        PointDepth {
            pc: Conv::pointwise(prefix, cin, cout),
            dc: Conv::depthwise(format!("{prefix}_dw"), cout, 3),
        }
    }

    fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.pc.init(store, rng)?;
        self.dc.init(store, rng)
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let t = self.pc.forward(g, store, x)?;
        self.dc.forward(g, store, t)
    }
}

/// Transposed (channel-wise) self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct Mdta {
    pub prefix: String,
    pub channels: usize,
    pub heads: usize,
    pub sigma_mode: SigmaMode,
    norm: LayerNorm,
    q: PointDepth,
    k: PointDepth,
    v: PointDepth,
    proj: Conv,
}

impl Mdta {
    pub fn new(prefix: &str, channels: usize, heads: usize, sigma_mode: SigmaMode) -> Self {
        Mdta {
            prefix: prefix.to_string(),
            channels,
            heads,
            sigma_mode,
            norm: LayerNorm::new(format!("{prefix}.norm"), channels),
            q: PointDepth::new(&format!("{prefix}.q"), channels, channels),
            k: PointDepth::new(&format!("{prefix}.k"), channels, channels),
            v: PointDepth::new(&format!("{prefix}.v"), channels, channels),
            proj: Conv::pointwise(format!("{prefix}.proj"), channels, channels),
        }
    }

    /// Name of the per-head temperature α (shape 1×heads×1×1).
    pub fn alpha_name(&self) -> String {
        format!("{}.alpha", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm.init(store)?;
        self.q.init(store, rng)?;
        self.k.init(store, rng)?;
        self.v.init(store, rng)?;
        self.proj.init(store, rng)?;
        store.register(self.alpha_name(), Tensor::ones([1, self.heads, 1, 1]))
    }

    /// Returns the block output and the `N×heads×d×d` attention matrix.
    pub fn forward_with_attention(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<(Var, Var)> {
        let xs = g.value(x).shape();
        if self.heads == 0 || xs.c() % self.heads != 0 {
            return Err(Error::Config(format!("heads {} must divide channels {}", self.heads, xs.c())));
        }
        let head_shape = Shape::new(xs.n(), self.heads, xs.c() / self.heads, xs.h() * xs.w());
        let ln = self.norm.forward(g, store, x)?;
        let mut qkv = [ln; 3];
        for (slot, branch) in qkv.iter_mut().zip([&self.q, &self.k, &self.v]) {
            let t = branch.forward(g, store, ln)?;
            *slot = g.reshape(t, head_shape)?;
        }
        let [q, k, v] = qkv;
        let q = g.l2_normalize_last(q)?;
        let k = g.l2_normalize_last(k)?;
        let kt = g.transpose_last(k)?;
        let logits = g.matmul(q, kt)?;
        let alpha = g.param(store, &self.alpha_name())?;
        let logits = g.div(logits, alpha)?;
        let attn = match self.sigma_mode {
            SigmaMode::Softmax => g.softmax(logits, 3)?,
            SigmaMode::Sigmoid => g.sigmoid(logits)?,
        };
        let mixed = g.matmul(attn, v)?;
        let mixed = g.reshape(mixed, xs)?;
        let out = self.proj.forward(g, store, mixed)?;
        Ok((g.add(out, x)?, attn))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, store, x)?.0)
    }
}

/// Gated depthwise feed-forward network with a residual connection.
#[derive(Clone, Debug)]
pub struct Gdfn {
    norm: LayerNorm,
    gate: PointDepth,
    value: PointDepth,
    out: Conv,
}

impl Gdfn {
    pub fn new(prefix: &str, channels: usize, hidden: usize) -> Self {
        Gdfn {
            norm: LayerNorm::new(format!("{prefix}.norm"), channels),
            gate: PointDepth::new(&format!("{prefix}.pc1"), channels, hidden),
            value: PointDepth::new(&format!("{prefix}.pc2"), channels, hidden),
            out: Conv::pointwise(format!("{prefix}.out"), hidden, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.norm.init(store)?;
        self.gate.init(store, rng)?;
        self.value.init(store, rng)?;
        self.out.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let ln = self.norm.forward(g, store, x)?;
        let x1 = self.gate.forward(g, store, ln)?;
        let x1 = g.gelu(x1)?;
        let x2 = self.value.forward(g, store, ln)?;
        let gated = g.mul(x1, x2)?;
        let out = self.out.forward(g, store, gated)?;
        g.add(out, x)
    }
}

#[derive(Clone, Debug)]
pub struct Cpb {
    pub config: CpbConfig,
    pub fusion: PromptFusion,
    pub parts: Vec<(Mdta, Gdfn)>,
}

impl Cpb {
    pub fn new(prefix: &str, config: CpbConfig) -> Result<Self> {
        config.validate()?;
        let part = config.part_channels();
        let parts = (0..config.splits)
            .map(|j| {
                (
                    Mdta::new(&format!("{prefix}.part{j}.attn"), part, config.heads, config.sigma_mode),
                    Gdfn::new(&format!("{prefix}.part{j}.ffn"), part, config.hidden_channels()),
                )
            })
            .collect();
        Ok(Cpb {
            config,
            fusion: PromptFusion::new(prefix, config.channels, config.reduction),
            parts,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.fusion.init(store, rng)?;
        for (attn, ffn) in &self.parts {
            attn.init(store, rng)?;
            ffn.init(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, prompt: Var) -> Result<Var> {
        let order: Vec<usize> = (0..self.parts.len()).collect();
        self.forward_in_order(g, store, f, prompt, &order)
    }

    /// Evaluates the parts in `order`, concatenating in channel order.
    pub fn forward_in_order(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        prompt: Var,
        order: &[usize],
    ) -> Result<Var> {
        let fp = self.fusion.forward(g, store, f, prompt)?;
        let inputs = g.split_channels(fp, self.config.splits)?;
        let mut outputs: Vec<Option<Var>> = vec![None; inputs.len()];
        for &j in order {
            let (attn, ffn) = self
                .parts
                .get(j)
                .ok_or_else(|| Error::Usage(format!("part index {j} out of range")))?;
            let t = attn.forward(g, store, inputs[j])?;
            outputs[j] = Some(ffn.forward(g, store, t)?);
        }
        let outputs = outputs
            .into_iter()
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| Error::Usage("part order must cover every part".into()))?;
        g.concat_channels(&outputs)
    }
}

/// `1×1([f, f ⊙ Rescale(P)])`.
#[derive(Clone, Debug)]
pub struct Spb {
    pub channels: usize,
    conv: Conv,
}

impl Spb {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Spb {
            channels,
            conv: Conv::pointwise(format!("{prefix}.conv"), 2 * channels, channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.conv.init(store, rng)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, prompt: Var) -> Result<Var> {
        let fs = g.value(f).shape();
        let ps = g.value(prompt).shape();
        if ps.c() != self.channels || fs.c() != self.channels {
            return Err(Error::Config(format!(
                "prompt {ps} and feature {fs} must both have {} channels",
                self.channels
            )));
        }
        let p = g.bilinear_rescale(prompt, fs.h(), fs.w())?;
        let prod = g.mul(f, p)?;
        let cat = g.concat_channels(&[f, prod])?;
        self.conv.forward(g, store, cat)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    #[default]
    Cpb,
    Spb,
}

/// Either block behind one interface.
#[derive(Clone, Debug)]
pub enum PromptBlock {
    Cpb(Cpb),
    Spb(Spb),
}

impl PromptBlock {
    pub fn new(kind: BlockKind, prefix: &str, config: CpbConfig) -> Result<Self> {
        Ok(match kind {
            BlockKind::Cpb => PromptBlock::Cpb(Cpb::new(prefix, config)?),
            BlockKind::Spb => PromptBlock::Spb(Spb::new(prefix, config.channels)),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self {
            PromptBlock::Cpb(b) => b.init(store, rng),
            PromptBlock::Spb(b) => b.init(store, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, f: Var, prompt: Var) -> Result<Var> {
        match self {
            PromptBlock::Cpb(b) => b.forward(g, store, f, prompt),
            PromptBlock::Spb(b) => b.forward(g, store, f, prompt),
        }
    }
}
