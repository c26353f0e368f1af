//! Parameterized layers: a name prefix, fixed hyper-parameters, and
//! `init`/`forward` against a [`ParamStore`].

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::ops::Conv2dSpec;
use crate::params::{kaiming_uniform, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub spec: Conv2dSpec,
}

impl Conv {
    /// Stride-1 convolution with "same" padding.
    pub fn same(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Conv {
            name: name.into(),
            cin,
            cout,
            kernel,
            spec: Conv2dSpec::default().padding(kernel / 2),
        }
    }

    pub fn pointwise(name: impl Into<String>, cin: usize, cout: usize) -> Self {
        Self::same(name, cin, cout, 1)
    }

    /// Per-channel `kernel × kernel` convolution.
    pub fn depthwise(name: impl Into<String>, channels: usize, kernel: usize) -> Self {
        let mut c = Self::same(name, channels, channels, kernel);
        c.spec = c.spec.groups(channels);
        c
    }

    pub fn with_spec(mut self, spec: Conv2dSpec) -> Self {
        self.spec = spec;
        self
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let g = self.spec.groups;
        if self.spec.transposed {
            [self.cin, self.cout / g, self.kernel, self.kernel]
        } else {
            [self.cout, self.cin / g, self.kernel, self.kernel]
        }
    }

    /// Kaiming-uniform weights (ReLU gain), zero bias.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        store.register(self.weight_name(), kaiming_uniform(shape, fan_in, rng))?;
        store.register(self.bias_name(), Tensor::zeros([1, self.cout, 1, 1]))
    }

    /// Unit-gain uniform weights, U(±sqrt(3 / fan_in)), for convs with no
    /// following nonlinearity; zero bias.
    pub fn init_linear<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let shape = self.weight_shape();
        let bound = (3.0 / (shape[1] * shape[2] * shape[3]) as f64).sqrt();
        store.register(self.weight_name(), Tensor::uniform(shape, -bound, bound, rng))?;
        store.register(self.bias_name(), Tensor::zeros([1, self.cout, 1, 1]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &self.weight_name())?;
        let b = g.param(store, &self.bias_name())?;
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub channels: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        LayerNorm {
            name: name.into(),
            channels,
        }
    }

    pub fn init(&self, store: &mut ParamStore) -> Result<()> {
        store.register(format!("{}.weight", self.name), Tensor::ones([1, self.channels, 1, 1]))?;
        store.register(format!("{}.bias", self.name), Tensor::zeros([1, self.channels, 1, 1]))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, &format!("{}.weight", self.name))?;
        let b = g.param(store, &format!("{}.bias", self.name))?;
        g.layer_norm(x, w, b)
    }
}
