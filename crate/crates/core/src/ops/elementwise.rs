use std::str::FromStr;

use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

fn broadcast_shape(op: &'static str, a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        let (x, y) = (a.0[i], b.0[i]);
        out[i] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(Error::dim(op, format!("cannot broadcast {a} with {b}")));
        };
    }
    Ok(Shape(out))
}

fn broadcast_strides(src: Shape, out: Shape) -> [usize; 4] {
    let s = src.strides();
    let mut r = [0; 4];
    for i in 0..4 {
        r[i] = if src.0[i] == out.0[i] { s[i] } else { 0 };
    }
    r
}

/// Calls `f(out_index, a_index, b_index)` for every output element.
fn for_each_pair(out: Shape, sa: [usize; 4], sb: [usize; 4], mut f: impl FnMut(usize, usize, usize)) {
    let [n, c, h, w] = out.dims();
    let mut o = 0;
    for ni in 0..n {
        for ci in 0..c {
            for hi in 0..h {
                let ba = ni * sa[0] + ci * sa[1] + hi * sa[2];
                let bb = ni * sb[0] + ci * sb[1] + hi * sb[2];
                for wi in 0..w {
                    f(o, ba + wi * sa[3], bb + wi * sb[3]);
                    o += 1;
                }
            }
        }
    }
}

/// Element-wise activation functions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Exact form `x * Phi(x)`.
    Gelu,
    /// `x * clamp(x + 3, 0, 6) / 6`.
    Hardswish,
    Sigmoid,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "gelu" => Ok(Activation::Gelu),
            "hardswish" => Ok(Activation::Hardswish),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Gelu => "gelu",
            Activation::Hardswish => "hardswish",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn eval(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x`.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
            }
            Activation::Hardswish => {
                if x <= -3.0 {
                    0.0
                } else if x >= 3.0 {
                    1.0
                } else {
                    (2.0 * x + 3.0) / 6.0
                }
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (sa_shape, sb_shape) = (self.value(a).shape(), self.value(b).shape());
        let out_shape = broadcast_shape(name, sa_shape, sb_shape)?;
        let sa = broadcast_strides(sa_shape, out_shape);
        let sb = broadcast_strides(sb_shape, out_shape);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let apply = match kind {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let out: Vec<f64> = if sa_shape == sb_shape {
            av.iter().zip(bv).map(|(&x, &y)| apply(x, y)).collect()
        } else {
            let mut out = vec![0.0; out_shape.numel()];
            for_each_pair(out_shape, sa, sb, |o, ia, ib| out[o] = apply(av[ia], bv[ib]));
            out
        };
        let value = Tensor::from_vec(out_shape, out)?;
        self.push(name, value, &[a, b], move |ctx: &BackwardCtx<'_>, g: &Tensor| {
            let (av, bv) = (ctx.input(0).data(), ctx.input(1).data());
            let gv = g.data();
            let mut ga = ctx.wants_grad(0).then(|| vec![0.0; sa_shape.numel()]);
            let mut gb = ctx.wants_grad(1).then(|| vec![0.0; sb_shape.numel()]);
            if sa_shape == sb_shape && matches!(kind, Binary::Add | Binary::Sub | Binary::Mul) {
                let sign = if kind == Binary::Sub { -1.0 } else { 1.0 };
                if let Some(ga) = ga.as_mut() {
                    match kind {
                        Binary::Mul => ga.iter_mut().zip(gv.iter().zip(bv)).for_each(|(d, (g, b))| *d = g * b),
                        _ => ga.copy_from_slice(gv),
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    match kind {
                        Binary::Mul => gb.iter_mut().zip(gv.iter().zip(av)).for_each(|(d, (g, a))| *d = g * a),
                        _ => gb.iter_mut().zip(gv).for_each(|(d, g)| *d = sign * g),
                    }
                }
                return Ok(vec![
                    ga.map(|d| Tensor::from_vec(sa_shape, d)).transpose()?,
                    gb.map(|d| Tensor::from_vec(sb_shape, d)).transpose()?,
                ]);
            }
            for_each_pair(out_shape, sa, sb, |o, ia, ib| {
                let go = gv[o];
                let (da, db) = match kind {
                    Binary::Add => (go, go),
                    Binary::Sub => (go, -go),
                    Binary::Mul => (go * bv[ib], go * av[ia]),
                    Binary::Div => (go / bv[ib], -go * av[ia] / (bv[ib] * bv[ib])),
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += db;
                }
            });
            Ok(vec![
                ga.map(|d| Tensor::from_vec(sa_shape, d)).transpose()?,
                gb.map(|d| Tensor::from_vec(sb_shape, d)).transpose()?,
            ])
        })
    }

    /// Broadcasting addition (size-1 dims stretch).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(
        &mut self,
        name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Var> {
        let value = self.value(x).map(f);
        self.push(name, value, &[x], move |ctx: &BackwardCtx<'_>, g: &Tensor| {
            let xv = ctx.input(0);
            let data = xv.data().iter().zip(g.data()).map(|(&x, &g)| g * df(x)).collect();
            Ok(vec![Some(Tensor::from_vec(xv.shape(), data)?)])
        })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        self.unary(kind.name(), x, move |v| kind.eval(v), move |v| kind.derivative(v))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    pub fn hardswish(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Hardswish)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.unary("scale", x, move |v| v * factor, move |_| factor)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary("square", x, |v| v * v, |v| 2.0 * v)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, |v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", x, move |v| v.clamp(lo, hi), move |v| {
            if v >= lo && v <= hi {
                1.0
            } else {
                0.0
            }
        })
    }

    /// Sum of all elements as a 1×1×1×1 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", value, &[x], |ctx: &BackwardCtx<'_>, g: &Tensor| {
            Ok(vec![Some(Tensor::full(ctx.input(0).shape(), g.data()[0]))])
        })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }
}
