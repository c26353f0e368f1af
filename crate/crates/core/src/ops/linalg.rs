use super::gemm::{gemm, Mat};
use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Guard used by row normalization.
const NORMALIZE_EPS: f64 = 1e-12;

/// (outer, len, inner) decomposition of a 4-d shape around `axis`.
fn around_axis(s: Shape, axis: usize) -> (usize, usize, usize) {
    let d = s.dims();
    (d[..axis].iter().product(), d[axis], d[axis + 1..].iter().product())
}

impl Graph {
    /// Batched matrix product over the last two axes: `[n,c,m,k]·[n,c,k,p] → [n,c,m,p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let [n, c, m, k] = sa.dims();
        let [nb, cb, kb, p] = sb.dims();
        if n != nb || c != cb || k != kb {
            return Err(Error::dim("matmul", format!("{sa} · {sb}")));
        }
        let out_shape = Shape::new(n, c, m, p);
        let mut out = vec![0.0; out_shape.numel()];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..n * c {
            gemm(
                Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k),
                Mat::new(&bd[i * k * p..(i + 1) * k * p], k, p),
                0.0,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push("matmul", value, &[a, b], move |ctx: &BackwardCtx<'_>, g: &Tensor| {
            let (ad, bd, gd) = (ctx.input(0).data(), ctx.input(1).data(), g.data());
            let mut da = ctx.wants_grad(0).then(|| vec![0.0; sa.numel()]);
            let mut db = ctx.wants_grad(1).then(|| vec![0.0; sb.numel()]);
            for i in 0..n * c {
                let gm = Mat::new(&gd[i * m * p..(i + 1) * m * p], m, p);
                if let Some(da) = da.as_mut() {
                    gemm(gm, Mat::new(&bd[i * k * p..(i + 1) * k * p], k, p).t(), 0.0, &mut da[i * m * k..(i + 1) * m * k]);
                }
                if let Some(db) = db.as_mut() {
                    gemm(Mat::new(&ad[i * m * k..(i + 1) * m * k], m, k).t(), gm, 0.0, &mut db[i * k * p..(i + 1) * k * p]);
                }
            }
            Ok(vec![
                da.map(|d| Tensor::from_vec(sa, d)).transpose()?,
                db.map(|d| Tensor::from_vec(sb, d)).transpose()?,
            ])
        })
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        fn swap(t: &Tensor) -> Tensor {
            let [n, c, h, w] = t.shape().dims();
            Tensor::from_fn([n, c, w, h], |a, b, i, j| t.at(a, b, j, i))
        }
        let value = swap(self.value(x));
        self.push("transpose_last", value, &[x], |_: &BackwardCtx<'_>, g: &Tensor| Ok(vec![Some(swap(g))]))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis > 3 {
            return Err(Error::Config(format!("softmax axis {axis} out of range")));
        }
        let xs = self.value(x).shape();
        let (outer, len, inner) = around_axis(xs, axis);
        let mut out = self.value(x).data().to_vec();
        // Rows of `inner` contiguous lanes; reduce across the `len` rows.
        for block in out.chunks_mut(len * inner) {
            let mut max = vec![f64::NEG_INFINITY; inner];
            for row in block.chunks(inner) {
                max.iter_mut().zip(row).for_each(|(m, &v)| *m = m.max(v));
            }
            let mut z = vec![0.0; inner];
            for row in block.chunks_mut(inner) {
                for ((v, m), z) in row.iter_mut().zip(&max).zip(z.iter_mut()) {
                    *v = (*v - m).exp();
                    *z += *v;
                }
            }
            for row in block.chunks_mut(inner) {
                row.iter_mut().zip(&z).for_each(|(v, z)| *v /= z);
            }
        }
        debug_assert_eq!(out.len(), outer * len * inner);
        let value = Tensor::from_vec(xs, out)?;
        self.push("softmax", value, &[x], move |ctx: &BackwardCtx<'_>, g: &Tensor| {
            let y = ctx.output().data();
            let mut d = g.data().to_vec();
            for (db, yb) in d.chunks_mut(len * inner).zip(y.chunks(len * inner)) {
                let mut dot = vec![0.0; inner];
                for (gr, yr) in db.chunks(inner).zip(yb.chunks(inner)) {
                    for ((acc, g), y) in dot.iter_mut().zip(gr).zip(yr) {
                        *acc += g * y;
                    }
                }
                for (gr, yr) in db.chunks_mut(inner).zip(yb.chunks(inner)) {
                    for ((g, y), dot) in gr.iter_mut().zip(yr).zip(&dot) {
                        *g = y * (*g - dot);
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(xs, d)?)])
        })
    }

    /// Scales each row of the last axis to unit Euclidean norm.
    pub fn l2_normalize_last(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let len = xs.w();
        let xd = self.value(x).data();
        let norms: Vec<f64> = xd
            .chunks(len)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORMALIZE_EPS))
            .collect();
        let out = xd
            .chunks(len)
            .zip(&norms)
            .flat_map(|(r, &nrm)| r.iter().map(move |v| v / nrm))
            .collect();
        let value = Tensor::from_vec(xs, out)?;
        self.push("l2_normalize", value, &[x], move |ctx: &BackwardCtx<'_>, g: &Tensor| {
            let y = ctx.output().data();
            let mut d = vec![0.0; xs.numel()];
            for (r, &nrm) in norms.iter().enumerate() {
                let rows = r * len..(r + 1) * len;
                let gy = &g.data()[rows.clone()];
                let yr = &y[rows.clone()];
                if nrm <= NORMALIZE_EPS {
                    for (dv, gv) in d[rows].iter_mut().zip(gy) {
                        *dv = gv / nrm;
                    }
                    continue;
                }
                let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((dv, gv), yv) in d[rows].iter_mut().zip(gy).zip(yr) {
                    *dv = (gv - yv * dot) / nrm;
                }
            }
            Ok(vec![Some(Tensor::from_vec(xs, d)?)])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec([1, 1, 1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let y = g.softmax(x, 3).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

        let u = g.constant(Tensor::full([1, 1, 2, 5], 4.2));
        let y = g.softmax(u, 3).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn softmax_inner_axis_sums_to_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn([2, 3, 4, 5], |n, c, h, w| ((n + 2 * c + 3 * h + w) as f64).sin() * 5.0));
        let y = g.softmax(x, 2).unwrap();
        let t = g.value(y);
        for n in 0..2 {
            for c in 0..3 {
                for w in 0..5 {
                    let s: f64 = (0..4).map(|h| t.at(n, c, h, w)).sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_small() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::from_vec([1, 1, 2, 1], vec![5.0, 6.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
        let t = g.transpose_last(a).unwrap();
        assert_eq!(g.value(t).data(), &[1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn normalize_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec([1, 1, 1, 2], vec![3.0, 4.0]).unwrap());
        let y = g.l2_normalize_last(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.6, 0.8]);
    }
}
