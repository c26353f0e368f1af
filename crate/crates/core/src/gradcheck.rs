//! Central-difference verification of tape gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so near-zero gradients are
/// compared on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

/// Finite-difference formula.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`; only probes within ±h.
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`.
    #[default]
    FourthOrder,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tol: f64,
    /// Central-difference step.
    pub step: f64,
    pub stencil: Stencil,
    /// Parameters larger than this are checked on a random subsample of this many elements.
    pub max_elems: usize,
    pub seed: u64,
    /// Test hook: negate the backward rule of the named op.
    pub flip_sign_of: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tol: 1e-4,
            step: 1e-5,
            stencil: Stencil::FourthOrder,
            max_elems: 64,
            seed: 0,
            flip_sign_of: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub params: Vec<ParamError>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn scalar_of<F>(f: &F, params: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Usage(format!("gradient check needs a scalar function, got {}", v.shape())));
    }
    Ok(v.data()[0])
}

/// Compares tape gradients of the scalar `f` against central differences for
/// every parameter in `params`. The default fourth-order stencil keeps
/// strongly curved functions from being misreported at the default step.
pub fn grad_check<F>(op: &str, f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    if let Some(name) = &opts.flip_sign_of {
        g.flip_gradient_sign(name.clone());
    }
    let out = f(&mut g, params)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "gradient check needs a scalar function, got {}",
            g.value(out).shape()
        )));
    }
    let analytic = g.backward(out)?.into_named();

    let mut work = params.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut rows = Vec::new();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let numel = params.get(&name).map_or(0, Tensor::numel);
        let picks: Vec<usize> = if numel <= opts.max_elems {
            (0..numel).collect()
        } else {
            let mut v = index::sample(&mut rng, numel, opts.max_elems).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst: f64 = 0.0;
        for &i in &picks {
            let orig = params.get(&name).expect("listed name").data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(&name).expect("listed name").data_mut()[i] = orig + offset;
                scalar_of(&f, &work)
            };
            let h = opts.step;
            let numeric = match opts.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                Stencil::FourthOrder => {
                    let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
                    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
                }
            };
            work.get_mut(&name).expect("listed name").data_mut()[i] = orig;
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[i]);
            worst = worst.max(relative_error(a, numeric));
        }
        rows.push(ParamError {
            name,
            max_rel_error: worst,
            checked: picks.len(),
        });
    }
    let max_rel_error = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        op: op.to_owned(),
        max_rel_error,
        params: rows,
        tol: opts.tol,
        passed: max_rel_error < opts.tol,
    })
}

/// `sum(out ⊙ R)` for a fixed pseudo-random `R`; turns any op output into a
/// scalar whose gradient exercises every output element differently.
pub fn projection_loss(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let r = Tensor::randn(g.value(out).shape(), 1.0, &mut rng);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.register(name, t).unwrap();
        s
    }

    #[test]
    fn sum_of_squares() {
        let params = store("x", Tensor::from_vec([1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
        let f = |g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let sq = g.square(x)?;
            g.sum(sq)
        };
        let mut g = Graph::new();
        let out = f(&mut g, &params).unwrap();
        let grads = g.backward(out).unwrap();
        assert_eq!(grads.param("x").unwrap().data(), &[2.0, 4.0]);
        let report = grad_check("square", f, &params, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn constant_function_passes() {
        let params = store("x", Tensor::ones([1, 1, 2, 2]));
        let f = |g: &mut Graph, p: &ParamStore| {
            let _ = g.param(p, "x")?;
            Ok(g.constant(Tensor::scalar(3.0)))
        };
        let report = grad_check("constant", f, &params, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert!(report.passed);
    }

    #[test]
    fn non_scalar_is_usage_error() {
        let params = store("x", Tensor::ones([1, 1, 2, 2]));
        let f = |g: &mut Graph, p: &ParamStore| g.param(p, "x");
        assert!(matches!(
            grad_check("id", f, &params, &GradCheckOptions::default()),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn sign_flip_is_caught() {
        let params = store("x", Tensor::from_vec([1, 1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let f = |g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let y = g.sigmoid(x)?;
            projection_loss(g, y, 1)
        };
        let opts = GradCheckOptions {
            flip_sign_of: Some("sigmoid".into()),
            ..Default::default()
        };
        let report = grad_check("sigmoid", f, &params, &opts).unwrap();
        assert!(!report.passed);
        assert!(report.max_rel_error > 1.0);
    }

    #[test]
    fn large_params_are_subsampled() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = store("x", Tensor::randn([1, 4, 6, 6], 1.0, &mut rng));
        let f = |g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "x")?;
            let y = g.gelu(x)?;
            projection_loss(g, y, 2)
        };
        let report = grad_check("gelu", f, &params, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.params[0].checked, 64);
        assert!(report.passed, "{report:?}");
    }
}
