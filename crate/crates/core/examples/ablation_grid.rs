//! Builds every ablation variant (block splits, prompt chaining, block type),
//! takes one training step with each and gradient-checks it end to end.
//!
//! `cargo run --release --example ablation_grid`

use cpa_enhancer::dataset::synthetic_pairs;
use cpa_enhancer::enhancer::{ablation_grid, count_params, Enhancer, EnhancerConfig};
use cpa_enhancer::gradcheck::GradCheckOptions;
use cpa_enhancer::suite::enhancer_case;
use cpa_enhancer::train::{train, TrainConfig};

fn main() -> cpa_enhancer::Result<()> {
    let base = EnhancerConfig { base_channels: 16, ..EnhancerConfig::tiny() };
    let cfg = TrainConfig { iters: 1, batch: 2, images: 2, size: 16, ..TrainConfig::default() };
    let pairs = synthetic_pairs(cfg.images, cfg.size, &cfg.kinds, 0)?;
    for (name, variant) in ablation_grid(&base) {
        let net = Enhancer::new(variant.clone())?;
        let outcome = train(&net, net.init_params(0)?, &pairs, &cfg, |_, _| {})?;
        let report = enhancer_case(variant.clone(), 0, 8, 2)?.check(&GradCheckOptions::default())?;
        println!(
            "{name:<16} params {:>6}  step loss {:.4}  gradcheck {:.2e} {}",
            count_params(&variant)?,
            outcome.losses[0],
            report.max_rel_error,
            if report.passed { "ok" } else { "FAIL" }
        );
    }
    Ok(())
}
