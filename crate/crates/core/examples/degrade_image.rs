//! Renders a synthetic scene and writes one PNG per degradation kind.
//!
//! `cargo run --release --example degrade_image -- [out_dir] [seed]`

use std::path::PathBuf;

use cpa_enhancer::dataset::{sample_spec, scene};
use cpa_enhancer::degrade::{derive_seed, DegradationKind};

fn main() -> cpa_enhancer::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "degraded".into()));
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    std::fs::create_dir_all(&out)?;

    let clean = scene(128, 128, seed);
    clean.save(&out.join("clean.png"))?;
    let mean = |px: &[f64]| px.iter().sum::<f64>() / px.len() as f64;
    println!("clean  mean {:.3}", mean(clean.pixels()));
    for (i, kind) in DegradationKind::ALL.into_iter().enumerate() {
        let spec = sample_spec(kind, derive_seed(seed, i as u64));
        let img = spec.apply(&clean)?;
        img.save(&out.join(format!("{kind}.png")))?;
        println!("{kind:<6} mean {:.3}  {}", mean(img.pixels()), serde_json::to_string(&spec)?);
    }
    println!("wrote {}", out.display());
    Ok(())
}
