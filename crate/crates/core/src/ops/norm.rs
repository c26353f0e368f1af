use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Variance guard inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

impl Graph {
    /// Layer normalization across channels at every spatial position, followed by
    /// a per-channel affine map. `weight` and `bias` are 1×C×1×1.
    pub fn layer_norm(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let [n, c, h, w] = xs.dims();
        for p in [weight, bias] {
            if self.value(p).numel() != c {
                return Err(Error::dim("layer_norm", format!("affine {} for {c} channels", self.value(p).shape())));
            }
        }
        let plane = h * w;
        let xd = self.value(x).data();
        let (wd, bd) = (self.value(weight).data(), self.value(bias).data());
        let mut normed = vec![0.0; xs.numel()];
        let mut inv_std = vec![0.0; n * plane];
        let mut out = vec![0.0; xs.numel()];
        for ni in 0..n {
            for p in 0..plane {
                let base = ni * c * plane + p;
                let mean = (0..c).map(|ci| xd[base + ci * plane]).sum::<f64>() / c as f64;
                let var = (0..c)
                    .map(|ci| {
                        let d = xd[base + ci * plane] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[ni * plane + p] = is;
                for ci in 0..c {
                    let i = base + ci * plane;
                    normed[i] = (xd[i] - mean) * is;
                    out[i] = normed[i] * wd[ci] + bd[ci];
                }
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        self.push("layer_norm", value, &[x, weight, bias], move |ctx: &BackwardCtx<'_>, g: &Tensor| {
            let wd = ctx.input(1).data();
            let gd = g.data();
            let mut dx = vec![0.0; xs.numel()];
            let mut dw = vec![0.0; c];
            let mut db = vec![0.0; c];
            for ni in 0..n {
                for p in 0..plane {
                    let base = ni * c * plane + p;
                    let (mut mean_dy, mut mean_dy_y) = (0.0, 0.0);
                    for ci in 0..c {
                        let i = base + ci * plane;
                        let dy = gd[i] * wd[ci];
                        mean_dy += dy;
                        mean_dy_y += dy * normed[i];
                        dw[ci] += gd[i] * normed[i];
                        db[ci] += gd[i];
                    }
                    mean_dy /= c as f64;
                    mean_dy_y /= c as f64;
                    let is = inv_std[ni * plane + p];
                    for ci in 0..c {
                        let i = base + ci * plane;
                        dx[i] = is * (gd[i] * wd[ci] - mean_dy - normed[i] * mean_dy_y);
                    }
                }
            }
            let affine = ctx.input(1).shape();
            Ok(vec![
                Some(Tensor::from_vec(xs, dx)?),
                Some(Tensor::from_vec(affine, dw)?),
                Some(Tensor::from_vec(ctx.input(2).shape(), db)?),
            ])
        })
    }
}
