//! Momentum SGD, L1 restoration training on degraded/clean pairs, and the
//! silhouette-based prompt-discriminability measurement.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::dataset::Pair;
use crate::degrade::DegradationKind;
use crate::enhancer::Enhancer;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch: usize,
    pub iters: usize,
    pub seed: u64,
    pub kinds: Vec<DegradationKind>,
    /// Number of synthetic training images.
    pub images: usize,
    /// Side length of the square training images.
    pub size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.9,
            batch: 4,
            iters: 200,
            seed: 0,
            kinds: vec![
                DegradationKind::Fog,
                DegradationKind::Dark,
                DegradationKind::Snow,
                DegradationKind::Rain,
            ],
            images: 16,
            size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr {} must be non-negative", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if self.kinds.is_empty() {
            return Err(Error::Config("at least one degradation kind is required".into()));
        }
        Ok(())
    }
}

/// Per-parameter momentum buffers.
#[derive(Clone, Debug, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Tensor>,
}

impl SgdState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// `v ← m·v + g + wd·θ;  θ ← θ − lr·v` for every registered parameter.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<()> {
    if let Some(name) = params.names().find(|n| !grads.contains_key(*n)) {
        return Err(Error::Consistency(format!("no gradient for parameter `{name}`")));
    }
    for (name, theta) in params.iter_mut() {
        let g = &grads[name];
        if g.shape() != theta.shape() {
            return Err(Error::Consistency(format!(
                "gradient for `{name}` has shape {}, parameter {}",
                g.shape(),
                theta.shape()
            )));
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        for ((t, v), &g) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = cfg.momentum * *v + g + cfg.weight_decay * *t;
            *t -= cfg.lr * *v;
        }
    }
    Ok(())
}

/// Mean absolute error of the enhanced degraded image against the clean one,
/// with parameter gradients when `with_grad` is set.
pub fn pair_loss(
    net: &Enhancer,
    store: &ParamStore,
    pair: &Pair,
    with_grad: bool,
) -> Result<(f64, Option<BTreeMap<String, Tensor>>)> {
    let mut g = Graph::new().with_strict(false);
    let x = g.constant(pair.degraded.to_tensor());
    let target = g.constant(pair.clean.to_tensor());
    let out = net.forward(&mut g, store, x)?.output;
    let diff = g.sub(out, target)?;
    let abs = g.abs(diff)?;
    let loss = g.mean(abs)?;
    let value = g.value(loss).data()[0];
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "l1_loss" });
    }
    let grads = if with_grad { Some(g.backward(loss)?.into_named()) } else { None };
    Ok((value, grads))
}

/// Mean L1 loss over all pairs.
pub fn dataset_loss(net: &Enhancer, store: &ParamStore, pairs: &[Pair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("empty dataset".into()));
    }
    let losses = pairs
        .par_iter()
        .map(|p| pair_loss(net, store, p, false).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(losses.iter().sum::<f64>() / pairs.len() as f64)
}

/// Batch loss and mean gradients; samples run in parallel and are reduced in
/// index order so the result does not depend on the thread count.
pub fn batch_gradients(
    net: &Enhancer,
    store: &ParamStore,
    batch: &[&Pair],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let per_sample = batch
        .par_iter()
        .map(|p| pair_loss(net, store, p, true))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, grads) in per_sample {
        loss += l * scale;
        for (name, g) in grads.expect("requested gradients") {
            match total.get_mut(&name) {
                Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b * scale),
                None => {
                    total.insert(name, g.map(|v| v * scale));
                }
            }
        }
    }
    Ok((loss, total))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    /// Batch loss at each iteration.
    pub losses: Vec<f64>,
    /// Dataset loss before the first step.
    pub initial_loss: f64,
    /// Dataset loss after the last step.
    pub final_loss: f64,
}

/// Runs `cfg.iters` SGD steps from `params`, drawing batches from seeded
/// epoch shuffles. `on_step(iter, loss)` observes each batch loss.
pub fn train(
    net: &Enhancer,
    mut params: ParamStore,
    pairs: &[Pair],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let initial_loss = dataset_loss(net, &params, pairs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut state = SgdState::new();
    let mut losses = Vec::with_capacity(cfg.iters);
    for iter in 0..cfg.iters {
        let mut batch = Vec::with_capacity(cfg.batch);
        while batch.len() < cfg.batch {
            if cursor == order.len() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&pairs[order[cursor]]);
            cursor += 1;
        }
        let (loss, grads) = batch_gradients(net, &params, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "l1_loss" });
        }
        sgd_step(&mut params, &grads, &mut state, cfg)?;
        losses.push(loss);
        on_step(iter, loss);
    }
    let final_loss = dataset_loss(net, &params, pairs)?;
    if !final_loss.is_finite() {
        return Err(Error::NonFinite { op: "l1_loss" });
    }
    Ok(TrainOutcome {
        params,
        losses,
        initial_loss,
        final_loss,
    })
}

/// Fewest probes per kind accepted by [`measure_discriminability`].
pub const MIN_PROBES_PER_KIND: usize = 8;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiscriminabilityReport {
    pub level: usize,
    pub silhouette: f64,
    /// All embeddings coincide; the score is 0 by convention.
    pub degenerate: bool,
    pub samples: usize,
    pub centroids: BTreeMap<DegradationKind, Vec<f64>>,
}

/// Mean silhouette coefficient with Euclidean distance. Returns
/// `(score, degenerate)`; a set whose points all coincide scores 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<(f64, bool)> {
    if points.len() != labels.len() {
        return Err(Error::Input("one label per point required".into()));
    }
    let clusters = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; clusters];
    labels.iter().for_each(|&l| sizes[l] += 1);
    let populated = sizes.iter().filter(|&&s| s > 0).count();
    if populated < 2 || sizes.iter().any(|&s| s == 1) {
        return Err(Error::Input("silhouette needs at least 2 clusters of at least 2 points".into()));
    }
    let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n = points.len();
    let mut degenerate = true;
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; clusters];
        for j in 0..n {
            if i != j {
                let d = dist(&points[i], &points[j]);
                degenerate &= d == 0.0;
                sums[labels[j]] += d;
            }
        }
        let own = labels[i];
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    if degenerate {
        return Ok((0.0, true));
    }
    Ok((total / n as f64, false))
}

/// Spatial mean of the prompt-block output at decoder `level` for each image.
pub fn embed(net: &Enhancer, store: &ParamStore, images: &[&Image], level: usize) -> Result<Vec<Vec<f64>>> {
    if !(1..=3).contains(&level) {
        return Err(Error::Config(format!("decoder level {level} outside 1..=3")));
    }
    images
        .par_iter()
        .map(|img| {
            let out = net.enhance(store, &img.to_tensor())?;
            let f = &out.features.levels[level - 1];
            let s = f.shape();
            let hw = (s.h() * s.w()) as f64;
            Ok((0..s.c())
                .map(|c| f.item(0)[c * s.h() * s.w()..(c + 1) * s.h() * s.w()].iter().sum::<f64>() / hw)
                .collect())
        })
        .collect()
}

/// Silhouette of probe embeddings grouped by degradation kind.
pub fn measure_discriminability(
    net: &Enhancer,
    store: &ParamStore,
    probes: &[(Image, DegradationKind)],
    level: usize,
) -> Result<DiscriminabilityReport> {
    let mut kinds: Vec<DegradationKind> = probes.iter().map(|p| p.1).collect();
    kinds.sort();
    kinds.dedup();
    if kinds.len() < 2 {
        return Err(Error::Input(format!("need at least 2 degradation kinds, got {}", kinds.len())));
    }
    for &k in &kinds {
        let count = probes.iter().filter(|p| p.1 == k).count();
        if count < MIN_PROBES_PER_KIND {
            return Err(Error::Input(format!(
                "kind {k} has {count} probes, need at least {MIN_PROBES_PER_KIND}"
            )));
        }
    }
    let images: Vec<&Image> = probes.iter().map(|p| &p.0).collect();
    let points = embed(net, store, &images, level)?;
    let labels: Vec<usize> = probes
        .iter()
        .map(|p| kinds.iter().position(|&k| k == p.1).expect("kind listed"))
        .collect();
    let (score, degenerate) = silhouette(&points, &labels)?;
    let dim = points[0].len();
    let centroids = kinds
        .iter()
        .enumerate()
        .map(|(ci, &k)| {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == ci).map(|p| p.0).collect();
            let c = (0..dim)
                .map(|d| members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64)
                .collect();
            (k, c)
        })
        .collect();
    Ok(DiscriminabilityReport {
        level,
        silhouette: score,
        degenerate,
        samples: probes.len(),
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_rule() {
        let mut p = ParamStore::new();
        p.register("theta", Tensor::scalar(1.0)).unwrap();
        let grads = BTreeMap::from([("theta".to_string(), Tensor::scalar(1.0))]);
        let cfg = TrainConfig {
            lr: 0.1,
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        sgd_step(&mut p, &grads, &mut SgdState::new(), &cfg).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 0.9).abs() < 1e-15);
        let frozen = TrainConfig { lr: 0.0, ..cfg };
        sgd_step(&mut p, &grads, &mut SgdState::new(), &frozen).unwrap();
        assert!((p.get("theta").unwrap().data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn missing_gradient_is_consistency_error() {
        let mut p = ParamStore::new();
        p.register("a", Tensor::scalar(1.0)).unwrap();
        let r = sgd_step(&mut p, &BTreeMap::new(), &mut SgdState::new(), &TrainConfig::default());
        assert!(matches!(r, Err(Error::Consistency(_))));
    }

    #[test]
    fn silhouette_separated_and_degenerate() {
        let pts = vec![vec![0.0], vec![0.1], vec![10.0], vec![10.1]];
        let (s, deg) = silhouette(&pts, &[0, 0, 1, 1]).unwrap();
        assert!(s > 0.98 && !deg);
        let same = vec![vec![1.0, 2.0]; 4];
        assert_eq!(silhouette(&same, &[0, 0, 1, 1]).unwrap(), (0.0, true));
        assert!(silhouette(&pts, &[0, 0, 0, 0]).is_err());
    }
}
