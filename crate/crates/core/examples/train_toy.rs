//! Trains the desk-scale enhancer (C = 8, n = 4) on synthetic degraded
//! scenes with L1 restoration loss and prints the loss curve.
//!
//! `cargo run --release --example train_toy -- [iters] [seed]`

use std::time::Instant;

use cpa_enhancer::dataset::synthetic_pairs;
use cpa_enhancer::enhancer::{Enhancer, EnhancerConfig};
use cpa_enhancer::train::{train, TrainConfig};

fn main() -> cpa_enhancer::Result<()> {
    let mut args = std::env::args().skip(1);
    let iters = args.next().map_or(200, |s| s.parse().expect("iters"));
    let seed = args.next().map_or(0, |s| s.parse().expect("seed"));

    let cfg = TrainConfig { iters, seed, ..TrainConfig::default() };
    let net = Enhancer::new(EnhancerConfig::toy())?;
    let params = net.init_params(seed)?;
    println!("parameters: {}", params.numel());
    let pairs = synthetic_pairs(cfg.images, cfg.size, &cfg.kinds, seed)?;

    let start = Instant::now();
    let outcome = train(&net, params, &pairs, &cfg, |i, loss| {
        if i % 20 == 0 || i + 1 == iters {
            println!("iter {i:4}  batch loss {loss:.5}  ({:.1}s)", start.elapsed().as_secs_f64());
        }
    })?;
    println!(
        "dataset loss {:.5} -> {:.5} (ratio {:.3}) in {:.1}s",
        outcome.initial_loss,
        outcome.final_loss,
        outcome.final_loss / outcome.initial_loss,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
