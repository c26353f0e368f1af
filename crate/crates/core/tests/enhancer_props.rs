//! Whole-network properties: prompt pyramid shapes and values, residual
//! identity, feature shapes, parameter bookkeeping and checkpoints.

mod common;

use common::max_abs_diff;
use cpa_enhancer::cgm::{Cgm, PromptDims, PromptMode};
use cpa_enhancer::checkpoint::{self, ElemType};
use cpa_enhancer::enhancer::{count_params, Enhancer, EnhancerConfig};
use cpa_enhancer::params::ParamStore;
use cpa_enhancer::tensor::{Shape, Tensor};
use cpa_enhancer::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (_, t) in store.iter_mut() {
        let jitter = Tensor::uniform(t.shape(), -0.05, 0.05, &mut r);
        for (v, d) in t.data_mut().iter_mut().zip(jitter.data()) {
            *v += d;
        }
    }
}

fn hardswish(x: f64) -> f64 {
    x * (x + 3.0).clamp(0.0, 6.0) / 6.0
}

/// Stride-2, padding-1, output-padding-1, 3×3 transposed convolution by scattering.
fn naive_upsample(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let [n, cin, h, wd] = x.shape().dims();
    let cout = w.shape().dims()[1];
    let (oh, ow) = (2 * h, 2 * wd);
    let mut out = Tensor::from_fn([n, cout, oh, ow], |_, o, _, _| b.data()[o]);
    for ni in 0..n {
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    for o in 0..cout {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (oy, ox) = ((2 * iy + ky) as isize - 1, (2 * ix + kx) as isize - 1);
                                if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                    let (oy, ox) = (oy as usize, ox as usize);
                                    let v = out.at(ni, o, oy, ox) + x.at(ni, ci, iy, ix) * w.at(ci, o, ky, kx);
                                    out.set(ni, o, oy, ox, v);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn default_prompt_pyramid_shape_law() {
    let cgm = Cgm::new(PromptDims::new(32, 32, 128), PromptMode::Chained, None).unwrap();
    let mut store = ParamStore::new();
    cgm.init(&mut store, &mut rng(0)).unwrap();
    let pyramid = cgm.generate(&store).unwrap();
    assert_eq!(pyramid.p3.shape(), Shape::new(1, 128, 32, 32));
    assert_eq!(pyramid.p2.shape(), Shape::new(1, 64, 64, 64));
    assert_eq!(pyramid.p1.shape(), Shape::new(1, 32, 128, 128));
    assert!(pyramid.shape_law_holds());
}

#[test]
fn chained_prompts_match_upsample_then_hardswish() {
    let cgm = Cgm::new(PromptDims::new(3, 4, 8), PromptMode::Chained, None).unwrap();
    let mut store = ParamStore::new();
    cgm.init(&mut store, &mut rng(1)).unwrap();
    randomize(&mut store, 2);
    let pyramid = cgm.generate(&store).unwrap();
    let get = |n: &str| store.get(n).unwrap();
    let p3 = get("cgm.p3");
    let p2 = naive_upsample(p3, get("cgm.tc2.weight"), get("cgm.tc2.bias")).map(hardswish);
    let p1 = naive_upsample(&p2, get("cgm.tc1.weight"), get("cgm.tc1.bias")).map(hardswish);
    assert_eq!(&pyramid.p3, p3);
    assert!(max_abs_diff(&pyramid.p2, &p2) < 1e-12);
    assert!(max_abs_diff(&pyramid.p1, &p1) < 1e-12);
}

#[test]
fn independent_prompts_are_free_tensors() {
    let cgm = Cgm::new(PromptDims::new(2, 2, 16), PromptMode::Independent, None).unwrap();
    let mut store = ParamStore::new();
    cgm.init(&mut store, &mut rng(3)).unwrap();
    let pyramid = cgm.generate(&store).unwrap();
    assert_eq!(&pyramid.p2, store.get("cgm.p2").unwrap());
    assert_eq!(&pyramid.p1, store.get("cgm.p1").unwrap());
    assert!(pyramid.shape_law_holds());
}

#[test]
fn prompt_channels_must_split_twice() {
    assert!(matches!(
        Cgm::new(PromptDims::new(4, 4, 6), PromptMode::Chained, None),
        Err(Error::Config(_))
    ));
}

fn image_batch(n: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform([n, 3, h, w], 0.0, 1.0, &mut rng(seed))
}

#[test]
fn zero_output_projection_returns_input_bit_exactly() {
    let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
    let mut store = net.init_params(4).unwrap();
    randomize(&mut store, 5);
    let x = image_batch(2, 16, 16, 6);
    assert_ne!(net.enhance(&store, &x).unwrap().image, x);
    assert!(net.zero_output(&mut store) > 0);
    for (h, w) in [(16, 16), (20, 12), (9, 17)] {
        let x = image_batch(1, h, w, 7);
        assert_eq!(net.enhance(&store, &x).unwrap().image, x, "{h}x{w}");
    }
}

#[test]
fn fresh_network_starts_as_identity() {
    let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
    let store = net.init_params(8).unwrap();
    let x = image_batch(1, 16, 16, 9);
    assert_eq!(net.enhance(&store, &x).unwrap().image, x);
}

#[test]
fn feature_shapes_match_forward_pass() {
    let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
    let store = net.init_params(10).unwrap();
    for (h, w) in [(16, 16), (20, 12)] {
        let out = net.enhance(&store, &image_batch(2, h, w, 11)).unwrap();
        let [latent, decoder, l1, l2, l3] = net.feature_shapes(2, h, w);
        assert_eq!(out.image.shape(), Shape::new(2, 3, h, w));
        assert_eq!(out.features.latent.shape(), latent);
        assert_eq!(out.features.decoder.shape(), decoder);
        assert_eq!(out.features.levels[0].shape(), l1);
        assert_eq!(out.features.levels[1].shape(), l2);
        assert_eq!(out.features.levels[2].shape(), l3);
    }
    let [_, _, l1, l2, l3] = net.feature_shapes(1, 32, 32);
    assert_eq!((l1.c(), l1.h()), (8, 32));
    assert_eq!((l2.c(), l2.h()), (16, 16));
    assert_eq!((l3.c(), l3.h()), (32, 8));
}

#[test]
fn non_rgb_input_is_rejected() {
    let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
    let store = net.init_params(0).unwrap();
    assert!(net.enhance(&store, &Tensor::zeros([1, 4, 8, 8])).is_err());
}

#[test]
fn independent_prompts_trade_upsamplers_for_free_tensors() {
    let base = EnhancerConfig::toy();
    let chained = count_params(&base).unwrap();
    let independent = count_params(&EnhancerConfig {
        prompt_mode: PromptMode::Independent,
        ..base.clone()
    })
    .unwrap();
    let (h, w, c) = (base.prompt_height, base.prompt_width, base.prompt_channels);
    let free = (c / 2) * 4 * h * w + (c / 4) * 16 * h * w;
    let upsamplers = (c * (c / 2) * 9 + c / 2) + ((c / 2) * (c / 4) * 9 + c / 4);
    assert_eq!(independent + upsamplers, chained + free);
}

#[test]
fn check_params_rejects_foreign_stores() {
    let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
    let mut store = net.init_params(0).unwrap();
    net.check_params(&store).unwrap();
    store.register("stray", Tensor::zeros([1, 1, 1, 1])).unwrap();
    assert!(matches!(net.check_params(&store), Err(Error::Checkpoint(_))));
    let other = Enhancer::new(EnhancerConfig::toy()).unwrap().init_params(0).unwrap();
    assert!(matches!(net.check_params(&other), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoints_roundtrip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
    let mut store = net.init_params(12).unwrap();
    randomize(&mut store, 13);
    let path = dir.path().join("net.ckpt");
    checkpoint::save(&store, ElemType::F64, &path).unwrap();
    assert_eq!(checkpoint::load(&path).unwrap(), store);

    checkpoint::save(&store, ElemType::F32, &path).unwrap();
    let narrowed = checkpoint::load(&path).unwrap();
    let mut expect = store.clone();
    expect.quantize_f32();
    assert_eq!(narrowed, expect);
}

#[test]
fn truncated_checkpoint_is_an_error() {
    let store = Enhancer::new(EnhancerConfig::tiny()).unwrap().init_params(0).unwrap();
    let mut bytes = Vec::new();
    checkpoint::write(&store, ElemType::F64, &mut bytes).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(checkpoint::read(bytes.as_slice()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn same_seed_same_parameters(seed in 0u64..10_000) {
        let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
        prop_assert_eq!(net.init_params(seed).unwrap(), net.init_params(seed).unwrap());
    }

    #[test]
    fn outputs_stay_in_unit_range(seed in 0u64..10_000) {
        let net = Enhancer::new(EnhancerConfig::tiny()).unwrap();
        let mut store = net.init_params(seed).unwrap();
        randomize(&mut store, seed + 1);
        let out = net.enhance(&store, &image_batch(1, 8, 8, seed + 2)).unwrap();
        prop_assert!(out.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
