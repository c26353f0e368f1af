//! The gradient-check suite: every differentiable op and composite block on
//! small random inputs, each reduced to a scalar by a random projection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::cgm::{Cgm, PromptDims, PromptMode};
use crate::cpb::{ChannelAttention, Cpb, CpbConfig, Gdfn, Mdta, PromptFusion, SigmaMode, SpatialAttention, Spb};
use crate::degrade::derive_seed;
use crate::enhancer::{Enhancer, EnhancerConfig, RfaConv};
use crate::error::Result;
use crate::gradcheck::{grad_check, projection_loss, GradCheckOptions, GradCheckReport, Stencil};
use crate::ops::{Conv2dSpec, PoolKind};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

type Body = Box<dyn Fn(&mut Graph, &ParamStore) -> Result<Var> + Send + Sync>;

/// One named scalar function of a parameter set.
pub struct Case {
    pub name: String,
    pub params: ParamStore,
    /// Shapes of the data tensors fed to the op (parameters excluded).
    pub input_shapes: Vec<Shape>,
    /// Overrides the per-tensor element budget (for large composites).
    pub max_elems: Option<usize>,
    /// Overrides the finite-difference step and formula.
    pub stencil: Option<(f64, Stencil)>,
    body: Body,
}

impl Case {
    pub fn new(
        name: impl Into<String>,
        params: ParamStore,
        body: impl Fn(&mut Graph, &ParamStore) -> Result<Var> + Send + Sync + 'static,
    ) -> Self {
        // Data inputs are registered under bare names; block parameters are
        // namespaced with dots.
        let input_shapes = params.iter().filter(|(n, _)| !n.contains('.')).map(|(_, t)| t.shape()).collect();
        Case {
            name: name.into(),
            params,
            input_shapes,
            max_elems: None,
            stencil: None,
            body: Box::new(body),
        }
    }

    pub fn eval(&self, g: &mut Graph, p: &ParamStore) -> Result<Var> {
        (self.body)(g, p)
    }

    pub fn check(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        let mut opts = opts.clone();
        if let Some(m) = self.max_elems {
            opts.max_elems = m;
        }
        if let Some((h, stencil)) = self.stencil {
            opts.step = h;
            opts.stencil = stencil;
        }
        grad_check(&self.name, |g, p| self.eval(g, p), &self.params, &opts)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub reports: Vec<GradCheckReport>,
    pub passed: bool,
    pub max_rel_error: f64,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradCheckReport> {
        self.reports.iter().filter(|r| !r.passed)
    }
}

pub fn run(cases: &[Case], opts: &GradCheckOptions) -> Result<SuiteReport> {
    let reports = cases.iter().map(|c| c.check(opts)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        passed: reports.iter().all(|r| r.passed),
        max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
        reports,
    })
}

struct Inputs {
    store: ParamStore,
    rng: ChaCha8Rng,
}

impl Inputs {
    fn new(seed: u64) -> Self {
        Inputs {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn randn(mut self, name: &str, shape: impl Into<Shape>) -> Self {
        let t = Tensor::randn(shape, 1.0, &mut self.rng);
        self.store.register(name, t).expect("fresh name");
        self
    }

    /// Values in `[lo, hi]`, for ops with restricted domains.
    fn uniform(mut self, name: &str, shape: impl Into<Shape>, lo: f64, hi: f64) -> Self {
        let t = Tensor::uniform(shape, lo, hi, &mut self.rng);
        self.store.register(name, t).expect("fresh name");
        self
    }

    /// Random values kept at least `gap` away from each kink.
    fn away_from(mut self, name: &str, shape: impl Into<Shape>, kinks: &[f64], gap: f64) -> Self {
        let shape = shape.into();
        let mut t = Tensor::randn(shape, 2.0, &mut self.rng);
        for v in t.data_mut() {
            for &k in kinks {
                if (*v - k).abs() < gap {
                    *v = k + if *v >= k { gap } else { -gap };
                }
            }
        }
        self.store.register(name, t).expect("fresh name");
        self
    }

    fn with<F>(mut self, init: F) -> Self
    where
        F: FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<()>,
    {
        init(&mut self.store, &mut self.rng).expect("block init");
        self
    }

    fn done(self) -> ParamStore {
        self.store
    }
}

fn unary_case(name: &str, seed: u64, kinks: &[f64], op: fn(&mut Graph, Var) -> Result<Var>) -> Case {
    let params = Inputs::new(seed).away_from("x", [1, 4, 6, 6], kinks, 0.05).done();
    Case::new(name, params, move |g, p| {
        let x = g.param(p, "x")?;
        let y = op(g, x)?;
        projection_loss(g, y, seed)
    })
}

fn conv_case(name: &str, seed: u64, x: [usize; 4], w: [usize; 4], spec: Conv2dSpec) -> Case {
    let cout = if spec.transposed { w[1] * spec.groups } else { w[0] };
    let params = Inputs::new(seed).randn("x", x).randn("w", w).randn("b", [1, cout, 1, 1]).done();
    let mut case = Case::new(name, params, move |g, p| {
        let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
        let y = g.conv2d(x, w, Some(b), spec)?;
        projection_loss(g, y, seed)
    });
    case.input_shapes = vec![Shape::from(x)];
    case
}

/// Every primitive op.
pub fn op_cases(seed: u64) -> Vec<Case> {
    let s = |i: u64| derive_seed(seed, i);
    let mut cases = vec![
        conv_case("conv2d", s(0), [1, 4, 6, 6], [3, 4, 3, 3], Conv2dSpec::default().padding(1)),
        conv_case("conv2d_strided", s(1), [1, 4, 6, 6], [4, 4, 3, 3], Conv2dSpec::default().padding(1).stride(2)),
        conv_case("conv2d_grouped", s(2), [1, 4, 5, 5], [6, 2, 3, 3], Conv2dSpec::default().padding(1).groups(2)),
        conv_case("conv2d_depthwise", s(3), [1, 4, 6, 6], [4, 1, 7, 7], Conv2dSpec::default().padding(3).groups(4)),
        conv_case("conv2d_pointwise", s(4), [1, 4, 6, 6], [5, 4, 1, 1], Conv2dSpec::default()),
        conv_case(
            "conv_transpose2d",
            s(5),
            [1, 4, 3, 3],
            [4, 2, 3, 3],
            Conv2dSpec::default().stride(2).padding(1).transposed(1),
        ),
        unary_case("relu", s(6), &[0.0], |g, x| g.relu(x)),
        unary_case("gelu", s(7), &[], |g, x| g.gelu(x)),
        unary_case("hardswish", s(8), &[-3.0, 3.0], |g, x| g.hardswish(x)),
        unary_case("sigmoid", s(9), &[], |g, x| g.sigmoid(x)),
        unary_case("abs", s(10), &[0.0], |g, x| g.abs(x)),
        unary_case("square", s(11), &[], |g, x| g.square(x)),
        unary_case("scale", s(12), &[], |g, x| g.scale(x, -1.7)),
        unary_case("clamp", s(13), &[-0.5, 0.5], |g, x| g.clamp(x, -0.5, 0.5)),
        unary_case("gap_spatial", s(14), &[], |g, x| g.pool(x, PoolKind::GapSpatial)),
        unary_case("gap_channel", s(15), &[], |g, x| g.pool(x, PoolKind::GapChannel)),
        unary_case("gmp_channel", s(16), &[], |g, x| g.pool(x, PoolKind::GmpChannel)),
        unary_case("bilinear_upscale", s(17), &[], |g, x| g.bilinear_rescale(x, 9, 11)),
        unary_case("bilinear_downscale", s(18), &[], |g, x| g.bilinear_rescale(x, 4, 3)),
        unary_case("channel_shuffle", s(19), &[], |g, x| g.channel_shuffle(x, 2)),
        unary_case("crop", s(20), &[], |g, x| g.crop(x, 1, 2, 4, 3)),
        unary_case("pad_replicate", s(21), &[], |g, x| g.pad_replicate(x, 2, 3)),
        unary_case("unfold", s(22), &[], |g, x| g.unfold(x, 3)),
        unary_case("softmax_channels", s(23), &[], |g, x| g.softmax(x, 1)),
        unary_case("softmax_rows", s(24), &[], |g, x| g.softmax(x, 3)),
        unary_case("l2_normalize", s(25), &[], |g, x| g.l2_normalize_last(x)),
        unary_case("transpose_last", s(26), &[], |g, x| g.transpose_last(x)),
        unary_case("reshape", s(27), &[], |g, x| g.reshape(x, [1, 2, 12, 6])),
        unary_case("mean", s(28), &[], |g, x| g.mean(x)),
        unary_case("split_concat", s(29), &[], |g, x| {
            let parts = g.split_channels(x, 2)?;
            g.concat_channels(&[parts[1], parts[0]])
        }),
    ];
    for (i, (name, kind)) in [("add", 0), ("sub", 1), ("mul", 2), ("div", 3)].into_iter().enumerate() {
        let mut inputs = Inputs::new(s(40 + i as u64)).randn("a", [1, 4, 5, 5]);
        inputs = if kind == 3 {
            inputs.uniform("b", [1, 4, 1, 5], 0.5, 2.0)
        } else {
            inputs.randn("b", [1, 4, 1, 5])
        };
        let seed = s(40 + i as u64);
        cases.push(Case::new(name, inputs.done(), move |g, p| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let y = match kind {
                0 => g.add(a, b)?,
                1 => g.sub(a, b)?,
                2 => g.mul(a, b)?,
                _ => g.div(a, b)?,
            };
            projection_loss(g, y, seed)
        }));
    }
    let seed = s(50);
    cases.push(Case::new(
        "matmul",
        Inputs::new(seed).randn("a", [1, 2, 3, 5]).randn("b", [1, 2, 5, 4]).done(),
        move |g, p| {
            let (a, b) = (g.param(p, "a")?, g.param(p, "b")?);
            let y = g.matmul(a, b)?;
            projection_loss(g, y, seed)
        },
    ));
    let seed = s(51);
    let mut case = Case::new(
        "layer_norm",
        Inputs::new(seed)
            .randn("x", [1, 4, 6, 6])
            .randn("w", [1, 4, 1, 1])
            .randn("b", [1, 4, 1, 1])
            .done(),
        move |g, p| {
            let (x, w, b) = (g.param(p, "x")?, g.param(p, "w")?, g.param(p, "b")?);
            let y = g.layer_norm(x, w, b)?;
            projection_loss(g, y, seed)
        },
    );
    case.input_shapes = vec![Shape::new(1, 4, 6, 6)];
    cases.push(case);
    cases
}

fn block_case(
    name: &str,
    seed: u64,
    feature: [usize; 4],
    prompt: Option<[usize; 4]>,
    init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng) -> Result<()>,
    body: impl Fn(&mut Graph, &ParamStore, Var, Option<Var>) -> Result<Var> + Send + Sync + 'static,
) -> Case {
    let mut inputs = Inputs::new(seed).randn("x", feature);
    if let Some(ps) = prompt {
        inputs = inputs.randn("prompt", ps);
    }
    let params = inputs.with(init).done();
    let has_prompt = prompt.is_some();
    Case::new(name, params, move |g, p| {
        let x = g.param(p, "x")?;
        let pr = if has_prompt { Some(g.param(p, "prompt")?) } else { None };
        let y = body(g, p, x, pr)?;
        projection_loss(g, y, seed)
    })
}

/// Prompt generation, attention stages and the composite prompt blocks.
pub fn block_cases(seed: u64) -> Result<Vec<Case>> {
    let s = |i: u64| derive_seed(seed ^ 0xb10c, i);
    let f = [1, 8, 8, 8];
    let p = Some([1, 8, 4, 4]);
    let mut cases = Vec::new();

    for (i, mode) in [PromptMode::Chained, PromptMode::Independent].into_iter().enumerate() {
        let cgm = Cgm::new(PromptDims::new(2, 2, 8), mode, None)?;
        let init = cgm.clone();
        let name = match mode {
            PromptMode::Chained => "cgm_chained",
            PromptMode::Independent => "cgm_independent",
        };
        let seed = s(i as u64);
        let mut store = ParamStore::new();
        init.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        // Larger prompts keep the finite differences away from round-off.
        for t in store.iter_mut().filter(|(n, _)| n.starts_with("cgm.p")).map(|(_, t)| t) {
            *t = t.map(|v| v * 50.0);
        }
        let prompts = store.iter().filter(|(n, _)| n.starts_with("cgm.p")).map(|(_, t)| t.shape()).collect();
        let mut case = Case::new(name, store, move |g, p| {
            let [p1, p2, p3] = cgm.forward_raw(g, p)?;
            let a = projection_loss(g, p1, seed)?;
            let b = projection_loss(g, p2, seed + 1)?;
            let c = projection_loss(g, p3, seed + 2)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        });
        case.input_shapes = prompts;
        cases.push(case);
    }

    let rfa = RfaConv::new("rfa", 4, 5, 3, true)?;
    let r2 = rfa.clone();
    cases.push(block_case("rfa_conv", s(10), [1, 4, 6, 6], None, move |st, rng| r2.init(st, rng), move |g, p, x, _| rfa.forward(g, p, x)));

    let ca = ChannelAttention::new("ca", 8, 2);
    let c2 = ca.clone();
    cases.push(block_case("channel_attention", s(11), f, None, move |st, rng| c2.init(st, rng), move |g, p, x, _| ca.forward(g, p, x)));

    let sa = SpatialAttention::new("sa", 8);
    let s2 = sa.clone();
    cases.push(block_case("spatial_attention", s(12), f, None, move |st, rng| s2.init(st, rng), move |g, p, x, _| sa.forward(g, p, x)));

    let fusion = PromptFusion::new("cpb", 8, 2);
    let f2 = fusion.clone();
    cases.push(block_case("prompt_fusion", s(13), f, p, move |st, rng| f2.init(st, rng), move |g, p, x, pr| {
        fusion.forward(g, p, x, pr.expect("prompt"))
    }));

    for (i, mode) in [SigmaMode::Softmax, SigmaMode::Sigmoid].into_iter().enumerate() {
        let mdta = Mdta::new("attn", 4, 2, mode);
        let m2 = mdta.clone();
        let name = if mode == SigmaMode::Softmax { "mdta_softmax" } else { "mdta_sigmoid" };
        cases.push(block_case(name, s(14 + i as u64), [1, 4, 6, 6], None, move |st, rng| m2.init(st, rng), move |g, p, x, _| {
            mdta.forward(g, p, x)
        }));
    }

    let gdfn = Gdfn::new("ffn", 4, 8);
    let g2 = gdfn.clone();
    cases.push(block_case("gdfn", s(16), [1, 4, 6, 6], None, move |st, rng| g2.init(st, rng), move |g, p, x, _| gdfn.forward(g, p, x)));

    for (i, n) in [2usize, 4].into_iter().enumerate() {
        let cfg = CpbConfig {
            splits: n,
            reduction: 2,
            ..CpbConfig::new(8)
        };
        let block = Cpb::new("cpb", cfg)?;
        let b2 = block.clone();
        cases.push(block_case(&format!("cpb_n{n}"), s(20 + i as u64), f, p, move |st, rng| b2.init(st, rng), move |g, p, x, pr| {
            block.forward(g, p, x, pr.expect("prompt"))
        }));
    }

    let spb = Spb::new("spb", 8);
    let sp2 = spb.clone();
    cases.push(block_case("spb", s(30), f, p, move |st, rng| sp2.init(st, rng), move |g, p, x, pr| {
        spb.forward(g, p, x, pr.expect("prompt"))
    }));
    Ok(cases)
}

/// End-to-end enhancer on a 1×3×`size`×`size` input, checking at most
/// `elems_per_tensor` entries of each parameter. The loss is taken on the
/// unclamped residual output; clamping is checked separately.
pub fn enhancer_case(cfg: EnhancerConfig, seed: u64, size: usize, elems_per_tensor: usize) -> Result<Case> {
    let net = Enhancer::new(cfg)?;
    let mut params = net.init_params(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 99));
    // Zero-initialized weights (output projection, attention logits) would
    // hide every upstream gradient; give them small random values.
    for (name, t) in params.iter_mut() {
        if name.ends_with(".weight") && t.data().iter().all(|&v| v == 0.0) {
            *t = Tensor::randn(t.shape(), 0.1, &mut rng);
        }
    }
    let image = Tensor::from_fn([1, 3, size, size], |_, _, _, _| rng.random_range(0.2..0.8));
    let mut case = Case::new("enhancer", params, move |g, p| {
        let x = g.constant(image.clone());
        let out = net.forward(g, p, x)?;
        let sum = g.add(out.residual, x)?;
        projection_loss(g, sum, seed)
    });
    case.input_shapes = vec![Shape::new(1, 3, size, size)];
    case.max_elems = Some(elems_per_tensor);
    // Many ReLU and channel-max units put kinks within a few 1e-5 of the
    // evaluation point for parameters that shift whole feature maps; the
    // two-point stencil stays within ±h of it.
    case.stencil = Some((1e-5, Stencil::Central));
    Ok(case)
}

/// Ops, blocks and (optionally) the full enhancer.
pub fn standard_suite(seed: u64, with_enhancer: bool) -> Result<Vec<Case>> {
    let mut cases = op_cases(seed);
    cases.extend(block_cases(seed)?);
    if with_enhancer {
        cases.push(enhancer_case(EnhancerConfig::tiny(), seed, 8, 4)?);
    }
    Ok(cases)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_declares_small_inputs() {
        for case in standard_suite(0, true).unwrap() {
            assert!(!case.input_shapes.is_empty(), "{}", case.name);
            for shape in &case.input_shapes {
                let d = shape.dims();
                assert!(d[0] == 1 && d[1..].iter().all(|&v| v <= 8), "{}: {d:?}", case.name);
            }
        }
    }

    #[test]
    fn op_cases_pass() {
        let report = run(&op_cases(0), &GradCheckOptions::default()).unwrap();
        for r in &report.reports {
            assert!(r.passed, "{}: {}", r.op, r.max_rel_error);
        }
    }
}
