//! Prompt generation: a learnable initial prompt expanded into a three-level
//! pyramid by chained stride-2 transposed convolutions with Hardswish gating.
//!
//! Level `i ∈ {1, 2, 3}` has shape `1 × Ĉ/2^(3−i) × 2^(3−i)Ĥ × 2^(3−i)Ŵ`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv;
use crate::ops::Conv2dSpec;
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Standard deviation of the prompt initializer.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Initial prompt extents (Ĥ, Ŵ, Ĉ).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl PromptDims {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        PromptDims { height, width, channels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("prompt dimensions must be positive".into()));
        }
        if self.channels % 4 != 0 {
            return Err(Error::Config(format!(
                "prompt channels {} must be divisible by 4",
                self.channels
            )));
        }
        Ok(())
    }

    /// Shape of the prompt at `level ∈ {1, 2, 3}`.
    pub fn level_shape(&self, level: usize) -> Shape {
        let f = 1 << (3 - level);
        Shape::new(1, self.channels / f, self.height * f, self.width * f)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    /// Each level generated from the previous one.
    #[default]
    Chained,
    /// One free learnable tensor per level (ablation baseline).
    Independent,
}

/// The three prompts, finest level first in `levels()`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPyramid {
    pub p3: Tensor,
    pub p2: Tensor,
    pub p1: Tensor,
    pub dims: PromptDims,
}

impl PromptPyramid {
    /// `[p1, p2, p3]`.
    pub fn levels(&self) -> [&Tensor; 3] {
        [&self.p1, &self.p2, &self.p3]
    }

    /// Whether all three tensors obey the pyramid shape law.
    pub fn shape_law_holds(&self) -> bool {
        self.levels()
            .iter()
            .enumerate()
            .all(|(i, t)| t.shape() == self.dims.level_shape(i + 1))
    }
}

/// Prompt-generation module.
#[derive(Clone, Debug)]
pub struct Cgm {
    pub dims: PromptDims,
    pub mode: PromptMode,
    tc2: Conv,
    tc1: Conv,
    /// Optional 1×1 projections to the decoder channel count, index = level − 1.
    projections: [Option<Conv>; 3],
}

impl Cgm {
    /// `targets[i]` is the decoder channel count the level-`i+1` prompt must match.
    pub fn new(dims: PromptDims, mode: PromptMode, targets: Option<[usize; 3]>) -> Result<Self> {
        dims.validate()?;
        let c = dims.channels;
        let spec = Conv2dSpec::default().stride(2).padding(1).transposed(1);
        let projections = match targets {
            Some(t) => std::array::from_fn(|i| {
                let have = dims.level_shape(i + 1).c();
                (have != t[i]).then(|| Conv::pointwise(format!("cgm.proj{}", i + 1), have, t[i]))
            }),
            None => [None, None, None],
        };
        Ok(Cgm {
            dims,
            mode,
            tc2: Conv::same("cgm.tc2", c, c / 2, 3).with_spec(spec),
            tc1: Conv::same("cgm.tc1", c / 2, c / 4, 3).with_spec(spec),
            projections,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("valid std");
        let prompt = |shape: Shape, rng: &mut R| {
            let data = (0..shape.numel()).map(|_| normal.sample(rng)).collect();
            Tensor::from_vec(shape, data)
        };
        store.register("cgm.p3", prompt(self.dims.level_shape(3), rng)?)?;
        match self.mode {
            PromptMode::Chained => {
                self.tc2.init(store, rng)?;
                self.tc1.init(store, rng)?;
            }
            PromptMode::Independent => {
                store.register("cgm.p2", prompt(self.dims.level_shape(2), rng)?)?;
                store.register("cgm.p1", prompt(self.dims.level_shape(1), rng)?)?;
            }
        }
        for p in self.projections.iter().flatten() {
            p.init(store, rng)?;
        }
        Ok(())
    }

    /// Raw pyramid `[p1, p2, p3]` on the tape.
    pub fn forward_raw(&self, g: &mut Graph, store: &ParamStore) -> Result<[Var; 3]> {
        let p3 = g.param(store, "cgm.p3")?;
        let shape = g.value(p3).shape();
        if shape != self.dims.level_shape(3) {
            return Err(Error::dim("cgm", format!("initial prompt {shape}, expected {}", self.dims.level_shape(3))));
        }
        match self.mode {
            PromptMode::Chained => {
                let t = self.tc2.forward(g, store, p3)?;
                let p2 = g.hardswish(t)?;
                let t = self.tc1.forward(g, store, p2)?;
                let p1 = g.hardswish(t)?;
                Ok([p1, p2, p3])
            }
            PromptMode::Independent => Ok([g.param(store, "cgm.p1")?, g.param(store, "cgm.p2")?, p3]),
        }
    }

    /// Prompts `[p1, p2, p3]` projected to the decoder channel counts.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore) -> Result<[Var; 3]> {
        let mut levels = self.forward_raw(g, store)?;
        for (v, proj) in levels.iter_mut().zip(&self.projections) {
            if let Some(proj) = proj {
                *v = proj.forward(g, store, *v)?;
            }
        }
        Ok(levels)
    }

    /// Evaluates the pyramid outside of any training graph.
    pub fn generate(&self, store: &ParamStore) -> Result<PromptPyramid> {
        let mut g = Graph::new();
        let [p1, p2, p3] = self.forward_raw(&mut g, store)?;
        Ok(PromptPyramid {
            p3: g.value(p3).clone(),
            p2: g.value(p2).clone(),
            p1: g.value(p1).clone(),
            dims: self.dims,
        })
    }

    pub fn has_projection(&self, level: usize) -> bool {
        self.projections[level - 1].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_prompt_shapes() {
        let dims = PromptDims::new(32, 32, 128);
        assert_eq!(dims.level_shape(3), Shape::new(1, 128, 32, 32));
        assert_eq!(dims.level_shape(2), Shape::new(1, 64, 64, 64));
        assert_eq!(dims.level_shape(1), Shape::new(1, 32, 128, 128));
    }

    #[test]
    fn channels_must_divide_by_four() {
        assert!(matches!(
            Cgm::new(PromptDims::new(4, 4, 6), PromptMode::Chained, None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_prompt_gives_zero_pyramid() {
        let cgm = Cgm::new(PromptDims::new(2, 3, 8), PromptMode::Chained, None).unwrap();
        let mut store = ParamStore::new();
        cgm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        store.zero_prefix("cgm.p3");
        let pyr = cgm.generate(&store).unwrap();
        assert!(pyr.shape_law_holds());
        assert_eq!(pyr.p2.max_abs(), 0.0);
        assert_eq!(pyr.p1.max_abs(), 0.0);
    }

    #[test]
    fn projections_only_where_needed() {
        let cgm = Cgm::new(PromptDims::new(2, 2, 16), PromptMode::Chained, Some([4, 6, 16])).unwrap();
        assert!(!cgm.has_projection(1));
        assert!(cgm.has_projection(2));
        assert!(!cgm.has_projection(3));
        let mut store = ParamStore::new();
        cgm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new();
        let [p1, p2, p3] = cgm.forward(&mut g, &store).unwrap();
        assert_eq!(g.value(p1).shape().c(), 4);
        assert_eq!(g.value(p2).shape().c(), 6);
        assert_eq!(g.value(p3).shape().c(), 16);
    }
}
