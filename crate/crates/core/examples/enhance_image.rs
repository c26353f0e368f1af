//! Builds the desk-scale enhancer, verifies the zero-output identity, then
//! enhances a degraded scene with random weights and reports feature shapes.
//!
//! `cargo run --release --example enhance_image -- [out.png]`

use cpa_enhancer::dataset::{sample_spec, scene};
use cpa_enhancer::degrade::DegradationKind;
use cpa_enhancer::enhancer::{count_params, Enhancer, EnhancerConfig};
use cpa_enhancer::image::Image;

fn main() -> cpa_enhancer::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "enhanced.png".into());
    let cfg = EnhancerConfig::toy();
    println!("toy enhancer: {} parameters", count_params(&cfg)?);
    let net = Enhancer::new(cfg)?;

    let degraded = sample_spec(DegradationKind::Fog, 1).apply(&scene(60, 52, 1))?;
    let input = degraded.to_tensor();

    let mut identity = net.init_params(0)?;
    net.zero_output(&mut identity);
    let same = net.enhance(&identity, &input)?;
    println!("zero output projection returns the input exactly: {}", same.image == input);

    let params = net.init_params(0)?;
    let enhanced = net.enhance(&params, &input)?;
    for (i, f) in enhanced.features.levels.iter().enumerate() {
        println!("decoder level {}: {}", i + 1, f.shape());
    }
    println!("latent {}, decoder output {}", enhanced.features.latent.shape(), enhanced.features.decoder.shape());
    Image::from_tensor(&enhanced.image, 0)?.save(std::path::Path::new(&out))?;
    println!("wrote {out}");
    Ok(())
}
