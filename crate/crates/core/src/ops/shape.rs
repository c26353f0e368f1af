use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Source channel for every output channel of a channel shuffle with `groups`.
///
/// Input channel `c` lands at `(c mod groups)·(C/groups) + ⌊c/groups⌋`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Config(format!(
            "channel shuffle groups {groups} must divide {channels} channels"
        )));
    }
    let per = channels / groups;
    let mut src = vec![0; channels];
    for c in 0..channels {
        src[(c % groups) * per + c / groups] = c;
    }
    Ok(src)
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: impl Into<Shape>) -> Result<Var> {
        let shape = shape.into();
        let from = self.value(x).shape();
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            Ok(vec![Some(g.reshape(from)?)])
        })
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Usage("concat of zero tensors".into()));
        };
        let base = self.value(first).shape();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.n() != base.n() || s.h() != base.h() || s.w() != base.w() {
                return Err(Error::dim("concat_channels", format!("{s} vs {base}")));
            }
            widths.push(s.c());
        }
        let total: usize = widths.iter().sum();
        let out_shape = base.with_c(total);
        let plane = base.h() * base.w();
        let mut out = Vec::with_capacity(out_shape.numel());
        for n in 0..base.n() {
            for &p in parts {
                out.extend_from_slice(self.value(p).item(n));
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("concat_channels", value, parts, move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut grads: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(w * plane * base.n())).collect();
            for n in 0..base.n() {
                let item = g.item(n);
                let mut off = 0;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.extend_from_slice(&item[off..off + w * plane]);
                    off += w * plane;
                }
            }
            grads
                .into_iter()
                .zip(&widths)
                .map(|(d, &w)| Tensor::from_vec(base.with_c(w), d).map(Some))
                .collect()
        })
    }

    /// Channels `[start, start + len)`.
    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if len == 0 || start + len > xs.c() {
            return Err(Error::dim("slice_channels", format!("[{start}, {}) of {xs}", start + len)));
        }
        let plane = xs.h() * xs.w();
        let mut out = Vec::with_capacity(xs.n() * len * plane);
        for n in 0..xs.n() {
            out.extend_from_slice(&self.value(x).item(n)[start * plane..(start + len) * plane]);
        }
        let value = Tensor::from_vec(xs.with_c(len), out)?;
        self.push("slice_channels", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut d = vec![0.0; xs.numel()];
            let item = xs.c() * plane;
            for n in 0..xs.n() {
                d[n * item + start * plane..n * item + (start + len) * plane].copy_from_slice(g.item(n));
            }
            Ok(vec![Some(Tensor::from_vec(xs, d)?)])
        })
    }

    /// `n` equal contiguous channel groups, in order.
    pub fn split_channels(&mut self, x: Var, n: usize) -> Result<Vec<Var>> {
        let c = self.value(x).shape().c();
        if n == 0 || c % n != 0 {
            return Err(Error::Config(format!("cannot split {c} channels into {n} equal parts")));
        }
        let per = c / n;
        (0..n).map(|j| self.slice_channels(x, j * per, per)).collect()
    }

    /// Output channel `i` takes input channel `src[i]`; `src` must be a permutation.
    pub fn permute_channels(&mut self, x: Var, src: Vec<usize>) -> Result<Var> {
        let xs = self.value(x).shape();
        let c = xs.c();
        let mut seen = vec![false; c];
        if src.len() != c || src.iter().any(|&s| s >= c || std::mem::replace(&mut seen[s], true)) {
            return Err(Error::Config(format!("not a permutation of {c} channels")));
        }
        let plane = xs.h() * xs.w();
        let mut out = Vec::with_capacity(xs.numel());
        for n in 0..xs.n() {
            let item = self.value(x).item(n);
            for &s in &src {
                out.extend_from_slice(&item[s * plane..(s + 1) * plane]);
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        self.push("permute_channels", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut d = vec![0.0; xs.numel()];
            for n in 0..xs.n() {
                let gi = g.item(n);
                let base = n * c * plane;
                for (i, &s) in src.iter().enumerate() {
                    d[base + s * plane..base + (s + 1) * plane].copy_from_slice(&gi[i * plane..(i + 1) * plane]);
                }
            }
            Ok(vec![Some(Tensor::from_vec(xs, d)?)])
        })
    }

    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let src = shuffle_permutation(self.value(x).shape().c(), groups)?;
        self.permute_channels(x, src)
    }

    /// Spatial window `[top, top + h) × [left, left + w)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if h == 0 || w == 0 || top + h > xs.h() || left + w > xs.w() {
            return Err(Error::dim("crop", format!("window {h}x{w}@({top},{left}) in {xs}")));
        }
        let out_shape = Shape::new(xs.n(), xs.c(), h, w);
        let xv = self.value(x);
        let value = Tensor::from_fn(out_shape, |n, c, y, x| xv.at(n, c, y + top, x + left));
        self.push("crop", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut d = Tensor::zeros(xs);
            for n in 0..xs.n() {
                for c in 0..xs.c() {
                    for y in 0..h {
                        for x in 0..w {
                            d.set(n, c, y + top, x + left, g.at(n, c, y, x));
                        }
                    }
                }
            }
            Ok(vec![Some(d)])
        })
    }

    /// Extends the bottom and right edges by repeating the last row/column.
    pub fn pad_replicate(&mut self, x: Var, bottom: usize, right: usize) -> Result<Var> {
        let xs = self.value(x).shape();
        if bottom == 0 && right == 0 {
            return Ok(x);
        }
        let (h, w) = (xs.h(), xs.w());
        let out_shape = Shape::new(xs.n(), xs.c(), h + bottom, w + right);
        let xv = self.value(x);
        let value = Tensor::from_fn(out_shape, |n, c, y, x| xv.at(n, c, y.min(h - 1), x.min(w - 1)));
        self.push("pad_replicate", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut d = Tensor::zeros(xs);
            for n in 0..xs.n() {
                for c in 0..xs.c() {
                    for y in 0..h + bottom {
                        for x in 0..w + right {
                            let o = d.offset(n, c, y.min(h - 1), x.min(w - 1));
                            d.data_mut()[o] += g.at(n, c, y, x);
                        }
                    }
                }
            }
            Ok(vec![Some(d)])
        })
    }
}
