//! Trains the toy enhancer briefly and compares how well decoder features
//! separate degradation kinds (silhouette score) before and after training.
//!
//! `cargo run --release --example discriminability -- [iters] [seed]`

use cpa_enhancer::dataset::{probe_set, synthetic_pairs};
use cpa_enhancer::degrade::derive_seed;
use cpa_enhancer::enhancer::{Enhancer, EnhancerConfig};
use cpa_enhancer::train::{measure_discriminability, train, TrainConfig};

fn main() -> cpa_enhancer::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters = args.next().map_or(50, |s| s.parse().expect("iters"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));
    let cfg = TrainConfig { iters, seed, ..TrainConfig::default() };

    let net = Enhancer::new(EnhancerConfig::toy())?;
    let init = net.init_params(seed)?;
    let pairs = synthetic_pairs(cfg.images, cfg.size, &cfg.kinds, seed)?;
    let outcome = train(&net, init.clone(), &pairs, &cfg, |_, _| {})?;
    println!("loss {:.4} -> {:.4} after {iters} iterations", outcome.initial_loss, outcome.final_loss);

    let probes = probe_set(8, cfg.size, &cfg.kinds, derive_seed(seed, 1 << 20))?;
    for level in 1..=3 {
        let before = measure_discriminability(&net, &init, &probes, level)?;
        let after = measure_discriminability(&net, &outcome.params, &probes, level)?;
        println!("level {level}: silhouette {:+.4} -> {:+.4}", before.silhouette, after.silhouette);
    }
    Ok(())
}
