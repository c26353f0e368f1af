//! Generates the three-level prompt pyramid at the default 32×32×128 size,
//! in chained and independent modes, and prints level shapes and statistics.
//!
//! `cargo run --release --example prompt_pyramid`

use cpa_enhancer::cgm::{Cgm, PromptDims, PromptMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpa_enhancer::Result<()> {
    let dims = PromptDims::new(32, 32, 128);
    for mode in [PromptMode::Chained, PromptMode::Independent] {
        let cgm = Cgm::new(dims, mode, None)?;
        let mut store = cpa_enhancer::ParamStore::new();
        cgm.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0))?;
        let pyramid = cgm.generate(&store)?;
        println!("{mode:?}: {} learnable scalars, shape law holds: {}", store.numel(), pyramid.shape_law_holds());
        for (i, p) in pyramid.levels().iter().enumerate() {
            let s = p.shape();
            let mean = p.sum() / p.numel() as f64;
            println!("  P{}: {}x{}x{} (C×H×W)  mean {mean:+.5}  max|.| {:.5}", i + 1, s.c(), s.h(), s.w(), p.max_abs());
        }
    }
    Ok(())
}
