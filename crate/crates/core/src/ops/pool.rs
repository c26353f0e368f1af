use crate::autodiff::{BackwardCtx, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Mean over H, W → N×C×1×1.
    GapSpatial,
    /// Mean over C → N×1×H×W.
    GapChannel,
    /// Max over C → N×1×H×W.
    GmpChannel,
}

impl Graph {
    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let [n, c, h, w] = shape.dims();
        if c == 0 || h * w == 0 {
            return Err(Error::dim("pool", format!("empty extent in {shape}")));
        }
        let plane = h * w;
        match kind {
            PoolKind::GapSpatial => {
                let data = xv
                    .data()
                    .chunks(plane)
                    .map(|p| p.iter().sum::<f64>() / plane as f64)
                    .collect();
                let value = Tensor::from_vec([n, c, 1, 1], data)?;
                self.push("gap_spatial", value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
                    let mut d = Vec::with_capacity(shape.numel());
                    for &gv in g.data() {
                        d.extend(std::iter::repeat_n(gv / plane as f64, plane));
                    }
                    Ok(vec![Some(Tensor::from_vec(shape, d)?)])
                })
            }
            PoolKind::GapChannel | PoolKind::GmpChannel => {
                let mut out = vec![0.0; n * plane];
                let mut arg = vec![0usize; n * plane];
                let data = xv.data();
                for ni in 0..n {
                    for p in 0..plane {
                        let base = ni * c * plane + p;
                        let o = ni * plane + p;
                        if kind == PoolKind::GapChannel {
                            out[o] = (0..c).map(|ci| data[base + ci * plane]).sum::<f64>() / c as f64;
                        } else {
                            let (mut best, mut bi) = (data[base], 0);
                            for ci in 1..c {
                                let v = data[base + ci * plane];
                                if v > best {
                                    best = v;
                                    bi = ci;
                                }
                            }
                            out[o] = best;
                            arg[o] = bi;
                        }
                    }
                }
                let value = Tensor::from_vec(Shape::new(n, 1, h, w), out)?;
                let name = if kind == PoolKind::GapChannel { "gap_channel" } else { "gmp_channel" };
                self.push(name, value, &[x], move |_: &BackwardCtx<'_>, g: &Tensor| {
                    let mut d = vec![0.0; shape.numel()];
                    for ni in 0..n {
                        for p in 0..plane {
                            let o = ni * plane + p;
                            let base = ni * c * plane + p;
                            let gv = g.data()[o];
                            if kind == PoolKind::GapChannel {
                                for ci in 0..c {
                                    d[base + ci * plane] += gv / c as f64;
                                }
                            } else {
                                d[base + arg[o] * plane] += gv;
                            }
                        }
                    }
                    Ok(vec![Some(Tensor::from_vec(shape, d)?)])
                })
            }
        }
    }
}
