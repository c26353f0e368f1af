use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Source taps `(i0, i1, frac)` for each destination index (half-pixel centers).
fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl Graph {
    /// Bilinear resampling with half-pixel (align-corners = false) sampling.
    pub fn bilinear_rescale(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config("rescale target must be at least 1x1".into()));
        }
        let xs = self.value(x).shape();
        let [n, c, h, w] = xs.dims();
        if h == 0 || w == 0 {
            return Err(Error::dim("bilinear_rescale", format!("empty input {xs}")));
        }
        let ty = taps(h, out_h);
        let tx = taps(w, out_w);
        let out_shape = Shape::new(n, c, out_h, out_w);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(out_shape.numel());
        for plane in xd.chunks(h * w) {
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("bilinear_rescale", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
            let mut dx = vec![0.0; xs.numel()];
            for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
                for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                        let gv = gplane[oy * out_w + ox];
                        dplane[y0 * w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                        dplane[y0 * w + x1] += gv * (1.0 - fy) * fx;
                        dplane[y1 * w + x0] += gv * fy * (1.0 - fx);
                        dplane[y1 * w + x1] += gv * fy * fx;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(xs, dx)?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rescale(x: Tensor, h: usize, w: usize) -> Tensor {
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.bilinear_rescale(v, h, w).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn constant_stays_constant() {
        let y = rescale(Tensor::full([1, 2, 3, 5], 0.3), 7, 4);
        assert!(y.data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::from_fn([1, 2, 4, 3], |_, c, h, w| (c * 100 + h * 10 + w) as f64);
        assert_eq!(rescale(x.clone(), 4, 3), x);
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let y = rescale(x, 4, 4);
        // Separable: rows weights [0, .25, .75, 1] between 0 and 2, columns between 0 and 1.
        let f = [0.0, 0.25, 0.75, 1.0];
        for r in 0..4 {
            for c in 0..4 {
                let want = 2.0 * f[r] + f[c];
                assert!((y.at(0, 0, r, c) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_target_rejected() {
        let mut g = Graph::new();
        let v = g.constant(Tensor::zeros([1, 1, 2, 2]));
        assert!(g.bilinear_rescale(v, 0, 2).is_err());
    }
}
