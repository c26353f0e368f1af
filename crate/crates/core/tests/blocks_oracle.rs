//! Prompt-block components against straight-line evaluations, plus the
//! residual and normalization invariants of the attention blocks.

mod common;

use common::{cat, max_abs_diff, naive_bilinear, naive_conv, sigmoid, zip};
use cpa_enhancer::autodiff::Graph;
use cpa_enhancer::cpb::{ChannelAttention, Cpb, CpbConfig, Gdfn, Mdta, PromptFusion, SigmaMode, SpatialAttention, Spb};
use cpa_enhancer::params::ParamStore;
use cpa_enhancer::tensor::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Replaces every parameter with small random values so biases and affine
/// terms all contribute; temperatures stay positive.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for (name, t) in store.iter_mut() {
        let fresh = Tensor::randn(t.shape(), 0.3, &mut r);
        *t = if name.ends_with(".alpha") { fresh.map(|v| v.abs() + 0.5) } else { fresh };
    }
}

fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|| panic!("missing {name}"))
}

fn conv_named(store: &ParamStore, name: &str, x: &Tensor, pad: usize, groups: usize) -> Tensor {
    naive_conv(x, p(store, &format!("{name}.weight")), Some(p(store, &format!("{name}.bias"))), 1, pad, groups)
}

fn eval(f: impl FnOnce(&mut Graph) -> cpa_enhancer::Var) -> Tensor {
    let mut g = Graph::new();
    let v = f(&mut g);
    g.value(v).clone()
}

fn channel_attention_oracle(store: &ParamStore, prefix: &str, f: &Tensor) -> Tensor {
    let [n, c, h, w] = f.shape().dims();
    let gap = Tensor::from_fn([n, c, 1, 1], |ni, ci, _, _| {
        (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).map(|(y, x)| f.at(ni, ci, y, x)).sum::<f64>() / (h * w) as f64
    });
    let hidden = conv_named(store, &format!("{prefix}.reduce"), &gap, 0, 1).map(|v| v.max(0.0));
    conv_named(store, &format!("{prefix}.expand"), &hidden, 0, 1)
}

fn spatial_attention_oracle(store: &ParamStore, prefix: &str, f: &Tensor) -> Tensor {
    let [n, c, h, w] = f.shape().dims();
    let stats = Tensor::from_fn([n, 2, h, w], |ni, k, y, x| {
        let vals = (0..c).map(|ci| f.at(ni, ci, y, x));
        if k == 0 {
            vals.sum::<f64>() / c as f64
        } else {
            vals.fold(f64::MIN, f64::max)
        }
    });
    conv_named(store, &format!("{prefix}.conv"), &stats, 3, 1)
}

fn broadcast_add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(b.shape(), |n, c, h, w| a.at(n, c, 0, 0) + b.at(n, c, h, w))
}

#[test]
fn channel_and_spatial_attention_match_oracles() {
    let (c, r) = (8, 4);
    let ca = ChannelAttention::new("ca", c, r);
    let sa = SpatialAttention::new("sa", c);
    let mut store = ParamStore::new();
    ca.init(&mut store, &mut rng(0)).unwrap();
    sa.init(&mut store, &mut rng(1)).unwrap();
    randomize(&mut store, 2);
    let f = Tensor::randn([2, c, 5, 6], 1.0, &mut rng(3));
    let got = eval(|g| {
        let x = g.constant(f.clone());
        ca.forward(g, &store, x).unwrap()
    });
    assert_eq!(got.shape().dims(), [2, c, 1, 1]);
    assert!(max_abs_diff(&got, &channel_attention_oracle(&store, "ca", &f)) < 1e-12);
    let got = eval(|g| {
        let x = g.constant(f.clone());
        sa.forward(g, &store, x).unwrap()
    });
    assert!(max_abs_diff(&got, &spatial_attention_oracle(&store, "sa", &f)) < 1e-12);
}

#[test]
fn prompt_fusion_matches_straight_line_evaluation() {
    let c = 4;
    let fusion = PromptFusion::new("blk", c, 2);
    let mut store = ParamStore::new();
    fusion.init(&mut store, &mut rng(4)).unwrap();
    randomize(&mut store, 5);
    let f = Tensor::randn([2, c, 6, 6], 1.0, &mut rng(6));
    let prompt = Tensor::randn([1, c, 3, 3], 1.0, &mut rng(7));
    let prompt2 = Tensor::from_fn([2, c, 3, 3], |_, ci, y, x| prompt.at(0, ci, y, x));

    let wc = channel_attention_oracle(&store, "blk.ca", &f);
    let ws = spatial_attention_oracle(&store, "blk.sa", &f);
    let gated = zip(&broadcast_add(&wc, &ws), &f, |a, b| a * b);
    let fw = cat(&gated, &f);
    // Input channel k of the 2C stack lands at (k mod 2)·C + ⌊k / 2⌋.
    let mut shuffled = Tensor::zeros(fw.shape());
    for k in 0..2 * c {
        let dst = (k % 2) * c + k / 2;
        for n in 0..2 {
            for y in 0..6 {
                for x in 0..6 {
                    shuffled.set(n, dst, y, x, fw.at(n, k, y, x));
                }
            }
        }
    }
    let t = conv_named(&store, "blk.fuse.dw", &shuffled, 3, 2 * c);
    let f_s = conv_named(&store, "blk.fuse.pw", &t, 0, 1).map(sigmoid);
    let guided = zip(&naive_bilinear(&prompt2, 6, 6), &f_s, |a, b| a + b);
    let expect = conv_named(&store, "blk.fuse.out", &cat(&f, &guided), 0, 1);

    let got = eval(|g| {
        let x = g.constant(f.clone());
        let pv = g.constant(prompt.clone());
        fusion.forward(g, &store, x, pv).unwrap()
    });
    assert_eq!(got.shape().dims(), [2, c, 6, 6]);
    assert!(max_abs_diff(&got, &expect) < 1e-12);
}

#[test]
fn simple_prompt_block_matches_straight_line_evaluation() {
    let c = 3;
    let spb = Spb::new("spb", c);
    let mut store = ParamStore::new();
    spb.init(&mut store, &mut rng(8)).unwrap();
    randomize(&mut store, 9);
    let f = Tensor::randn([1, c, 4, 4], 1.0, &mut rng(10));
    let prompt = Tensor::randn([1, c, 2, 2], 1.0, &mut rng(11));
    let prod = zip(&f, &naive_bilinear(&prompt, 4, 4), |a, b| a * b);
    let expect = conv_named(&store, "spb.conv", &cat(&f, &prod), 0, 1);
    let got = eval(|g| {
        let x = g.constant(f.clone());
        let pv = g.constant(prompt.clone());
        spb.forward(g, &store, x, pv).unwrap()
    });
    assert!(max_abs_diff(&got, &expect) < 1e-12);
}

#[test]
fn prompt_channel_mismatch_is_rejected() {
    let fusion = PromptFusion::new("blk", 4, 2);
    let mut store = ParamStore::new();
    fusion.init(&mut store, &mut rng(0)).unwrap();
    let mut g = Graph::new();
    let f = g.constant(Tensor::zeros([1, 4, 4, 4]));
    let prompt = g.constant(Tensor::zeros([1, 3, 2, 2]));
    assert!(fusion.forward(&mut g, &store, f, prompt).is_err());
}

fn zero_names(store: &mut ParamStore, prefix: &str) {
    assert!(store.zero_prefix(prefix) > 0, "no parameters under {prefix}");
}

#[test]
fn attention_and_feed_forward_are_exact_identities_with_zero_projection() {
    let x = Tensor::randn([2, 4, 5, 5], 1.0, &mut rng(12));
    for mode in [SigmaMode::Softmax, SigmaMode::Sigmoid] {
        let mdta = Mdta::new("m", 4, 2, mode);
        let mut store = ParamStore::new();
        mdta.init(&mut store, &mut rng(13)).unwrap();
        randomize(&mut store, 14);
        zero_names(&mut store, "m.proj.");
        let got = eval(|g| {
            let v = g.constant(x.clone());
            mdta.forward(g, &store, v).unwrap()
        });
        assert_eq!(got, x);
    }
    let gdfn = Gdfn::new("f", 4, 8);
    let mut store = ParamStore::new();
    gdfn.init(&mut store, &mut rng(15)).unwrap();
    randomize(&mut store, 16);
    zero_names(&mut store, "f.out.");
    let got = eval(|g| {
        let v = g.constant(x.clone());
        gdfn.forward(g, &store, v).unwrap()
    });
    assert_eq!(got, x);
}

#[test]
fn prompt_block_reduces_to_fusion_when_every_part_is_an_identity() {
    let cfg = CpbConfig { reduction: 2, ..CpbConfig::new(8) };
    let cpb = Cpb::new("cpb", cfg).unwrap();
    let mut store = ParamStore::new();
    cpb.init(&mut store, &mut rng(17)).unwrap();
    randomize(&mut store, 18);
    for j in 0..cfg.splits {
        zero_names(&mut store, &format!("cpb.part{j}.attn.proj."));
        zero_names(&mut store, &format!("cpb.part{j}.ffn.out."));
    }
    let f = Tensor::randn([1, 8, 4, 4], 1.0, &mut rng(19));
    let prompt = Tensor::randn([1, 8, 2, 2], 1.0, &mut rng(20));
    let mut g = Graph::new();
    let (fv, pv) = (g.constant(f), g.constant(prompt));
    let whole = cpb.forward(&mut g, &store, fv, pv).unwrap();
    let fused = cpb.fusion.forward(&mut g, &store, fv, pv).unwrap();
    assert_eq!(g.value(whole), g.value(fused));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn attention_rows_are_normalized(seed in 0u64..1000, heads in prop::sample::select(vec![1usize, 2, 4])) {
        let mdta = Mdta::new("m", 4, heads, SigmaMode::Softmax);
        let mut store = ParamStore::new();
        mdta.init(&mut store, &mut rng(seed)).unwrap();
        randomize(&mut store, seed + 1);
        let x = Tensor::randn([2, 4, 3, 5], 2.0, &mut rng(seed + 2));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (_, attn) = mdta.forward_with_attention(&mut g, &store, xv).unwrap();
        let a = g.value(attn);
        let d = 4 / heads;
        prop_assert_eq!(a.shape().dims(), [2, heads, d, d]);
        for row in a.data().chunks(d) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn parts_are_independent_of_evaluation_order(seed in 0u64..1000) {
        let cfg = CpbConfig { reduction: 2, ..CpbConfig::new(8) };
        let cpb = Cpb::new("cpb", cfg).unwrap();
        let mut store = ParamStore::new();
        cpb.init(&mut store, &mut rng(seed)).unwrap();
        randomize(&mut store, seed + 1);
        let mut g = Graph::new();
        let f = g.constant(Tensor::randn([1, 8, 4, 4], 1.0, &mut rng(seed + 2)));
        let pr = g.constant(Tensor::randn([1, 8, 2, 2], 1.0, &mut rng(seed + 3)));
        let forward = cpb.forward(&mut g, &store, f, pr).unwrap();
        let reversed = cpb.forward_in_order(&mut g, &store, f, pr, &[3, 2, 1, 0]).unwrap();
        prop_assert_eq!(g.value(forward), g.value(reversed));
    }
}
