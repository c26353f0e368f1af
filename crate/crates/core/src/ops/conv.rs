//! 2-d convolution and transposed convolution via im2col + GEMM.

use rayon::prelude::*;

use super::gemm::{gemm, Mat};
use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Hyper-parameters of a (transposed) 2-d convolution.
///
/// Weights are `out × in/groups × kh × kw` for a plain convolution and
/// `in × out/groups × kh × kw` when `transposed` is set; `stride` then acts
/// as the upsampling factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub transposed: bool,
    pub output_padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec {
            stride: 1,
            padding: 0,
            groups: 1,
            transposed: false,
            output_padding: 0,
        }
    }
}

impl Conv2dSpec {
    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }
    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }
    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
    pub fn transposed(mut self, output_padding: usize) -> Self {
        self.transposed = true;
        self.output_padding = output_padding;
        self
    }
}

pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    (input + 2 * padding).checked_sub(kernel).map(|d| d / stride + 1)
}

pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel + output_padding)
        .checked_sub(2 * padding)
        .filter(|&v| v > 0)
}

/// Validated problem sizes shared by forward and backward.
#[derive(Clone, Copy, Debug)]
struct Plan {
    n: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    spec: Conv2dSpec,
}

impl Plan {
    fn new(x: Shape, w: Shape, bias: Option<Shape>, spec: Conv2dSpec) -> Result<Self> {
        const OP: &str = "conv2d";
        if spec.stride == 0 {
            return Err(Error::Config("convolution stride must be at least 1".into()));
        }
        let g = spec.groups;
        let [n, cin, h, wd] = x.dims();
        let [w0, w1, kh, kw] = w.dims();
        if g == 0 || cin % g != 0 {
            return Err(Error::Config(format!("groups {g} must divide input channels {cin}")));
        }
        let cout = if spec.transposed {
            if w0 != cin {
                return Err(Error::dim(OP, format!("transposed weight {w} expects {cin} input channels")));
            }
            if spec.output_padding >= spec.stride && spec.output_padding > 0 {
                return Err(Error::Config("output padding must be smaller than stride".into()));
            }
            w1 * g
        } else {
            if w1 * g != cin {
                return Err(Error::dim(OP, format!("weight {w} with {g} groups does not fit {cin} input channels")));
            }
            if w0 % g != 0 {
                return Err(Error::Config(format!("groups {g} must divide output channels {w0}")));
            }
            w0
        };
        if let Some(b) = bias {
            if b.numel() != cout {
                return Err(Error::dim(OP, format!("bias {b} for {cout} output channels")));
            }
        }
        let (oh, ow) = if spec.transposed {
            (
                conv_transpose_out_extent(h, kh, spec.stride, spec.padding, spec.output_padding),
                conv_transpose_out_extent(wd, kw, spec.stride, spec.padding, spec.output_padding),
            )
        } else {
            (
                conv_out_extent(h, kh, spec.stride, spec.padding),
                conv_out_extent(wd, kw, spec.stride, spec.padding),
            )
        };
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim(OP, format!("kernel {kh}x{kw} does not fit input {x}")));
        };
        Ok(Plan {
            n,
            cin,
            cout,
            groups: g,
            kh,
            kw,
            h,
            w: wd,
            oh,
            ow,
            spec,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.cout, self.oh, self.ow)
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// im2col geometry for one group. For transposed convolutions the
    /// "image" is the output and the column grid is the input.
    fn geom(&self) -> Geom {
        if self.spec.transposed {
            Geom {
                c: self.cout_g(),
                h: self.oh,
                w: self.ow,
                kh: self.kh,
                kw: self.kw,
                stride: self.spec.stride,
                pad: self.spec.padding,
                oh: self.h,
                ow: self.w,
            }
        } else {
            Geom {
                c: self.cin_g(),
                h: self.h,
                w: self.w,
                kh: self.kh,
                kw: self.kw,
                stride: self.spec.stride,
                pad: self.spec.padding,
                oh: self.oh,
                ow: self.ow,
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unrolls receptive fields into a `(c·kh·kw) × (oh·ow)` matrix.
pub(crate) fn im2col(src: &[f64], g: &Geom, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `dst`.
pub(crate) fn col2im(cols: &[f64], g: &Geom, dst: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst_row[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

impl Plan {
    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn is_pointwise(&self) -> bool {
        !self.spec.transposed && self.kh == 1 && self.kw == 1 && self.spec.stride == 1 && self.spec.padding == 0
    }

    /// One input and one output channel per group.
    fn is_depthwise(&self) -> bool {
        !self.spec.transposed && self.cin_g() == 1 && self.cout_g() == 1
    }
}

/// Depthwise forward for one channel plane.
fn depthwise_plane(x: &[f64], k: &[f64], g: &Geom, out: &mut [f64]) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = k[ky * g.kw + kx];
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let src = &x[iy as usize * g.w..(iy as usize + 1) * g.w];
                let dst = &mut out[oy * g.ow..(oy + 1) * g.ow];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                if g.stride == 1 {
                    let base = lo + kx - g.pad;
                    for (d, s) in dst[lo..hi].iter_mut().zip(&src[base..base + hi - lo]) {
                        *d += wv * s;
                    }
                } else {
                    for ox in lo..hi {
                        dst[ox] += wv * src[ox * g.stride + kx - g.pad];
                    }
                }
            }
        }
    }
}

/// Depthwise adjoint for one plane: accumulates into `dx` and `dk`.
fn depthwise_plane_backward(x: &[f64], k: &[f64], gout: &[f64], g: &Geom, mut dx: Option<&mut [f64]>, mut dk: Option<&mut [f64]>) {
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let wv = k[ky * g.kw + kx];
            let (lo, hi) = valid_cols(g, kx);
            if lo >= hi {
                continue;
            }
            let mut acc = 0.0;
            for oy in 0..g.oh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let row = iy as usize * g.w;
                let go = &gout[oy * g.ow + lo..oy * g.ow + hi];
                let start = row + lo * g.stride + kx - g.pad;
                if g.stride == 1 {
                    let xs = &x[start..start + go.len()];
                    if dk.is_some() {
                        acc += xs.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        for (d, gv) in dx[start..start + go.len()].iter_mut().zip(go) {
                            *d += wv * gv;
                        }
                    }
                } else {
                    for (j, gv) in go.iter().enumerate() {
                        let ix = start + j * g.stride;
                        acc += x[ix] * gv;
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[ix] += wv * gv;
                        }
                    }
                }
            }
            if let Some(dk) = dk.as_deref_mut() {
                dk[ky * g.kw + kx] += acc;
            }
        }
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside the input row.
fn valid_cols(g: &Geom, kx: usize) -> (usize, usize) {
    let s = g.stride;
    // ox·s + kx − pad ≥ 0  and  ox·s + kx − pad < w
    let lo = if kx >= g.pad { 0 } else { (g.pad - kx).div_ceil(s) };
    let lim = g.w + g.pad;
    let hi = if lim > kx { (lim - kx).div_ceil(s).min(g.ow) } else { 0 };
    (lo.min(hi), hi)
}

fn forward(plan: &Plan, x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let out_shape = plan.out_shape();
    let mut out = vec![0.0; out_shape.numel()];
    let geom = plan.geom();
    let (cin_g, cout_g) = (plan.cin_g(), plan.cout_g());
    let in_item = plan.cin * plan.h * plan.w;
    let out_item = plan.cout * plan.oh * plan.ow;
    let wdata = w.data();
    let xdata = x.data();

    let pointwise = plan.is_pointwise();
    let depthwise = plan.is_depthwise();
    let col_len = if pointwise || depthwise { 0 } else { geom.rows() * geom.cols() };
    out.par_chunks_mut(out_item).enumerate().for_each(|(n, out_n)| {
        let x_n = &xdata[n * in_item..(n + 1) * in_item];
        let mut cols = vec![0.0; col_len];
        for gi in 0..plan.groups {
            if depthwise {
                let plane = plan.h * plan.w;
                let oplane = plan.oh * plan.ow;
                let k = plan.kh * plan.kw;
                depthwise_plane(
                    &x_n[gi * plane..(gi + 1) * plane],
                    &wdata[gi * k..(gi + 1) * k],
                    &geom,
                    &mut out_n[gi * oplane..(gi + 1) * oplane],
                );
            } else if pointwise {
                let plane = plan.h * plan.w;
                let w_g = &wdata[gi * cout_g * cin_g..(gi + 1) * cout_g * cin_g];
                gemm(
                    Mat::new(w_g, cout_g, cin_g),
                    Mat::new(&x_n[gi * cin_g * plane..(gi + 1) * cin_g * plane], cin_g, plane),
                    0.0,
                    &mut out_n[gi * cout_g * plane..(gi + 1) * cout_g * plane],
                );
            } else if plan.spec.transposed {
                let x_g = &x_n[gi * cin_g * plan.h * plan.w..(gi + 1) * cin_g * plan.h * plan.w];
                let w_g = &wdata[gi * cin_g * geom.rows()..(gi + 1) * cin_g * geom.rows()];
                gemm(
                    Mat::new(w_g, cin_g, geom.rows()).t(),
                    Mat::new(x_g, cin_g, geom.cols()),
                    0.0,
                    &mut cols,
                );
                let plane = plan.oh * plan.ow;
                col2im(&cols, &geom, &mut out_n[gi * cout_g * plane..(gi + 1) * cout_g * plane]);
            } else {
                let plane = plan.h * plan.w;
                im2col(&x_n[gi * cin_g * plane..(gi + 1) * cin_g * plane], &geom, &mut cols);
                let w_g = &wdata[gi * cout_g * geom.rows()..(gi + 1) * cout_g * geom.rows()];
                let oplane = plan.oh * plan.ow;
                gemm(
                    Mat::new(w_g, cout_g, geom.rows()),
                    Mat::new(&cols, geom.rows(), geom.cols()),
                    0.0,
                    &mut out_n[gi * cout_g * oplane..(gi + 1) * cout_g * oplane],
                );
            }
        }
        if let Some(b) = bias {
            let plane = plan.oh * plan.ow;
            for (o, &bv) in b.data().iter().enumerate() {
                out_n[o * plane..(o + 1) * plane].iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Returns (dx, dw, db); per-item weight gradients are summed in batch order.
fn backward(
    plan: &Plan,
    x: &Tensor,
    w: &Tensor,
    grad: &Tensor,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let geom = plan.geom();
    let (cin_g, cout_g) = (plan.cin_g(), plan.cout_g());
    let in_plane = plan.h * plan.w;
    let out_plane = plan.oh * plan.ow;
    let in_item = plan.cin * in_plane;
    let out_item = plan.cout * out_plane;
    let wdata = w.data();
    let w_len = wdata.len();

    let per_item: Vec<(Vec<f64>, Vec<f64>)> = (0..plan.n)
        .into_par_iter()
        .map(|n| {
            let x_n = &x.data()[n * in_item..(n + 1) * in_item];
            let g_n = &grad.data()[n * out_item..(n + 1) * out_item];
            let mut dx = if need_x { vec![0.0; in_item] } else { Vec::new() };
            let mut dw = if need_w { vec![0.0; w_len] } else { Vec::new() };
            let pointwise = plan.is_pointwise();
            let depthwise = plan.is_depthwise();
            let col_len = if pointwise || depthwise { 0 } else { geom.rows() * geom.cols() };
            let mut cols = vec![0.0; col_len];
            for gi in 0..plan.groups {
                let x_g = &x_n[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane];
                let g_g = &g_n[gi * cout_g * out_plane..(gi + 1) * cout_g * out_plane];
                if depthwise {
                    let k = plan.kh * plan.kw;
                    depthwise_plane_backward(
                        x_g,
                        &wdata[gi * k..(gi + 1) * k],
                        g_g,
                        &geom,
                        need_x.then(|| &mut dx[gi * in_plane..(gi + 1) * in_plane]),
                        need_w.then(|| &mut dw[gi * k..(gi + 1) * k]),
                    );
                } else if pointwise {
                    let wr = gi * cout_g * cin_g..(gi + 1) * cout_g * cin_g;
                    let dout = Mat::new(g_g, cout_g, out_plane);
                    if need_w {
                        gemm(dout, Mat::new(x_g, cin_g, in_plane).t(), 0.0, &mut dw[wr.clone()]);
                    }
                    if need_x {
                        gemm(
                            Mat::new(&wdata[wr], cout_g, cin_g).t(),
                            dout,
                            0.0,
                            &mut dx[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane],
                        );
                    }
                } else if plan.spec.transposed {
                    let wr = gi * cin_g * geom.rows()..(gi + 1) * cin_g * geom.rows();
                    im2col(g_g, &geom, &mut cols);
                    let dcols = Mat::new(&cols, geom.rows(), geom.cols());
                    if need_x {
                        gemm(
                            Mat::new(&wdata[wr.clone()], cin_g, geom.rows()),
                            dcols,
                            0.0,
                            &mut dx[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane],
                        );
                    }
                    if need_w {
                        gemm(Mat::new(x_g, cin_g, geom.cols()), dcols.t(), 0.0, &mut dw[wr]);
                    }
                } else {
                    let wr = gi * cout_g * geom.rows()..(gi + 1) * cout_g * geom.rows();
                    let dout = Mat::new(g_g, cout_g, geom.cols());
                    if need_w {
                        im2col(x_g, &geom, &mut cols);
                        gemm(dout, Mat::new(&cols, geom.rows(), geom.cols()).t(), 0.0, &mut dw[wr.clone()]);
                    }
                    if need_x {
                        gemm(Mat::new(&wdata[wr], cout_g, geom.rows()).t(), dout, 0.0, &mut cols);
                        col2im(&cols, &geom, &mut dx[gi * cin_g * in_plane..(gi + 1) * cin_g * in_plane]);
                    }
                }
            }
            (dx, dw)
        })
        .collect();

    let mut db = vec![0.0; plan.cout];
    for n in 0..plan.n {
        let g_n = &grad.data()[n * out_item..(n + 1) * out_item];
        for (o, acc) in db.iter_mut().enumerate() {
            *acc += g_n[o * out_plane..(o + 1) * out_plane].iter().sum::<f64>();
        }
    }
    let dx = need_x.then(|| per_item.iter().flat_map(|(dx, _)| dx.iter().copied()).collect());
    let dw = need_w.then(|| {
        let mut acc = vec![0.0; w_len];
        for (_, dw) in &per_item {
            for (a, b) in acc.iter_mut().zip(dw) {
                *a += b;
            }
        }
        acc
    });
    (dx, dw, db)
}

impl Graph {
    /// Cross-correlation (or its transpose) with optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let plan = Plan::new(
            self.value(x).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
            spec,
        )?;
        let value = forward(&plan, self.value(x), self.value(weight), bias.map(|b| self.value(b)))?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let has_bias = bias.is_some();
        self.push(
            if spec.transposed { "conv_transpose2d" } else { "conv2d" },
            value,
            &inputs,
            move |ctx: &BackwardCtx<'_>, g: &Tensor| {
                let (x, w) = (ctx.input(0), ctx.input(1));
                let (dx, dw, db) = backward(&plan, x, w, g, ctx.wants_grad(0), ctx.wants_grad(1));
                let mut grads = vec![
                    dx.map(|d| Tensor::from_vec(x.shape(), d)).transpose()?,
                    dw.map(|d| Tensor::from_vec(w.shape(), d)).transpose()?,
                ];
                if has_bias {
                    grads.push(Some(Tensor::from_vec(ctx.input(2).shape(), db)?));
                }
                Ok(grads)
            },
        )
    }
}

impl Graph {
    /// Stacks the k×k neighbourhood of every pixel (zero padded, stride 1):
    /// `N×C×H×W → N×(C·k²)×H×W`, channel `c·k² + ky·k + kx`.
    pub fn unfold(&mut self, x: Var, kernel: usize) -> Result<Var> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("unfold kernel {kernel} must be odd")));
        }
        let xs = self.value(x).shape();
        let [n, c, h, w] = xs.dims();
        let geom = Geom {
            c,
            h,
            w,
            kh: kernel,
            kw: kernel,
            stride: 1,
            pad: kernel / 2,
            oh: h,
            ow: w,
        };
        let out_shape = Shape::new(n, c * kernel * kernel, h, w);
        let item = out_shape.numel() / n.max(1);
        let mut out = vec![0.0; out_shape.numel()];
        let xd = self.value(x).data();
        out.par_chunks_mut(item.max(1)).enumerate().for_each(|(i, o)| {
            im2col(&xd[i * c * h * w..(i + 1) * c * h * w], &geom, o);
        });
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("unfold", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut d = vec![0.0; xs.numel()];
            d.par_chunks_mut((c * h * w).max(1)).enumerate().for_each(|(i, di)| {
                col2im(&g.data()[i * item..(i + 1) * item], &geom, di);
            });
            Ok(vec![Some(Tensor::from_vec(xs, d)?)])
        })
    }
}

/// Direct nested-loop evaluation, kept as an independent reference for the GEMM path.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
    let plan = Plan::new(x.shape(), w.shape(), bias.map(Tensor::shape), spec)?;
    let mut out = Tensor::zeros(plan.out_shape());
    let (cin_g, cout_g) = (plan.cin_g(), plan.cout_g());
    let (s, p) = (spec.stride as isize, spec.padding as isize);
    for n in 0..plan.n {
        for g in 0..plan.groups {
            if spec.transposed {
                for ci in 0..cin_g {
                    let cin = g * cin_g + ci;
                    for iy in 0..plan.h {
                        for ix in 0..plan.w {
                            let xv = x.at(n, cin, iy, ix);
                            for oc in 0..cout_g {
                                for ky in 0..plan.kh {
                                    for kx in 0..plan.kw {
                                        let oy = iy as isize * s - p + ky as isize;
                                        let ox = ix as isize * s - p + kx as isize;
                                        if oy < 0 || ox < 0 || oy >= plan.oh as isize || ox >= plan.ow as isize {
                                            continue;
                                        }
                                        let (oy, ox) = (oy as usize, ox as usize);
                                        let o = g * cout_g + oc;
                                        let v = out.at(n, o, oy, ox) + xv * w.at(cin, oc, ky, kx);
                                        out.set(n, o, oy, ox, v);
                                    }
                                }
                            }
                        }
                    }
                }
            } else {
                for oc in 0..cout_g {
                    let o = g * cout_g + oc;
                    for oy in 0..plan.oh {
                        for ox in 0..plan.ow {
                            let mut acc = 0.0;
                            for ci in 0..cin_g {
                                for ky in 0..plan.kh {
                                    for kx in 0..plan.kw {
                                        let iy = oy as isize * s - p + ky as isize;
                                        let ix = ox as isize * s - p + kx as isize;
                                        if iy < 0 || ix < 0 || iy >= plan.h as isize || ix >= plan.w as isize {
                                            continue;
                                        }
                                        acc += x.at(n, g * cin_g + ci, iy as usize, ix as usize)
                                            * w.at(o, ci, ky, kx);
                                    }
                                }
                            }
                            out.set(n, o, oy, ox, acc);
                        }
                    }
                }
            }
        }
        if let Some(b) = bias {
            for o in 0..plan.cout {
                for oy in 0..plan.oh {
                    for ox in 0..plan.ow {
                        let v = out.at(n, o, oy, ox) + b.data()[o];
                        out.set(n, o, oy, ox, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn conv(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: Conv2dSpec) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let wv = g.constant(w.clone());
        let bv = b.map(|b| g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, spec)?;
        Ok(g.value(y).clone())
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::from_fn([1, 1, 3, 3], |_, _, h, w| (h * 3 + w) as f64);
        let w = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(conv(&x, &w, None, Conv2dSpec::default()).unwrap(), x);
    }

    #[test]
    fn zero_weight_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([2, 3, 5, 5], 1.0, &mut rng);
        let y = conv(&x, &Tensor::zeros([4, 3, 3, 3]), Some(&Tensor::zeros([1, 4, 1, 1])), Conv2dSpec::default().padding(1)).unwrap();
        assert_eq!(y.max_abs(), 0.0);
    }

    #[test]
    fn ones_sum_to_nine() {
        let y = conv(&Tensor::ones([1, 1, 3, 3]), &Tensor::ones([1, 1, 3, 3]), None, Conv2dSpec::default()).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn matches_reference_across_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cases = [
            ([2, 4, 7, 6], [6, 2, 3, 3], Conv2dSpec::default().padding(1).groups(2)),
            ([1, 3, 8, 8], [5, 3, 3, 3], Conv2dSpec::default().padding(1).stride(2)),
            ([1, 4, 5, 5], [4, 1, 7, 7], Conv2dSpec::default().padding(3).groups(4)),
            ([2, 4, 3, 4], [4, 3, 3, 3], Conv2dSpec::default().padding(1).stride(2).transposed(1)),
            ([1, 4, 3, 3], [4, 1, 3, 3], Conv2dSpec::default().padding(1).stride(2).groups(2).transposed(1)),
            ([2, 6, 4, 5], [4, 3, 1, 1], Conv2dSpec::default().groups(2)),
            ([1, 3, 7, 6], [3, 1, 3, 3], Conv2dSpec::default().padding(1).stride(2).groups(3)),
            ([1, 2, 6, 6], [2, 1, 5, 5], Conv2dSpec::default().padding(1).groups(2)),
            ([1, 2, 3, 8], [2, 1, 7, 7], Conv2dSpec::default().padding(3).groups(2)),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::randn(xs, 1.0, &mut rng);
            let w = Tensor::randn(ws, 1.0, &mut rng);
            let cout = if spec.transposed { ws[1] * spec.groups } else { ws[0] };
            let b = Tensor::randn([1, cout, 1, 1], 1.0, &mut rng);
            let fast = conv(&x, &w, Some(&b), spec).unwrap();
            let slow = conv2d_reference(&x, &w, Some(&b), spec).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{spec:?}");
            }
        }
    }

    #[test]
    fn transposed_doubles_extent() {
        assert_eq!(conv_transpose_out_extent(8, 3, 2, 1, 1), Some(16));
        assert_eq!(conv_out_extent(16, 3, 2, 1), Some(8));
    }

    #[test]
    fn bad_groups_and_shapes() {
        let x = Tensor::zeros([1, 3, 4, 4]);
        assert!(matches!(
            conv(&x, &Tensor::zeros([4, 1, 3, 3]), None, Conv2dSpec::default().groups(2)),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            conv(&x, &Tensor::zeros([4, 2, 3, 3]), None, Conv2dSpec::default()),
            Err(Error::Dimension { .. })
        ));
        assert!(matches!(
            conv(&x, &Tensor::zeros([4, 3, 3, 3]), None, Conv2dSpec::default().stride(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn fast_path_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, projection_loss, GradCheckOptions};
        use crate::params::ParamStore;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cases = [
            ([1, 4, 5, 5], [4, 1, 3, 3], Conv2dSpec::default().padding(1).groups(4)),
            ([1, 3, 6, 5], [3, 1, 3, 3], Conv2dSpec::default().padding(1).stride(2).groups(3)),
            ([2, 4, 3, 3], [6, 2, 1, 1], Conv2dSpec::default().groups(2)),
        ];
        for (xs, ws, spec) in cases {
            let mut p = ParamStore::new();
            p.register("x", Tensor::randn(xs, 1.0, &mut rng)).unwrap();
            p.register("w", Tensor::randn(ws, 1.0, &mut rng)).unwrap();
            let report = grad_check(
                "conv2d",
                |g, p| {
                    let x = g.param(p, "x")?;
                    let w = g.param(p, "w")?;
                    let y = g.conv2d(x, w, None, spec)?;
                    projection_loss(g, y, 1)
                },
                &p,
                &GradCheckOptions::default(),
            )
            .unwrap();
            assert!(report.passed, "{spec:?}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn unfold_matches_one_hot_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::randn([2, 3, 5, 4], 1.0, &mut rng);
        let mut onehot = Tensor::zeros([27, 1, 3, 3]);
        for c in 0..3 {
            for t in 0..9 {
                onehot.set(c * 9 + t, 0, t / 3, t % 3, 1.0);
            }
        }
        let reference = conv2d_reference(&x, &onehot, None, Conv2dSpec::default().padding(1).groups(3)).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x);
        let u = g.unfold(xv, 3).unwrap();
        assert_eq!(g.value(u), &reference);
        assert!(matches!(g.unfold(xv, 2), Err(Error::Config(_))));
    }
}
