//! Saves enhancer parameters in both element types, reloads them and checks
//! that outputs are reproduced.
//!
//! `cargo run --release --example checkpoint_roundtrip`

use cpa_enhancer::checkpoint::{self, ElemType};
use cpa_enhancer::dataset::scene;
use cpa_enhancer::enhancer::{Enhancer, EnhancerConfig};

fn main() -> cpa_enhancer::Result<()> {
    let net = Enhancer::new(EnhancerConfig::toy())?;
    let params = net.init_params(5)?;
    let input = scene(32, 32, 5).to_tensor();
    let reference = net.enhance(&params, &input)?.image;
    let dir = std::env::temp_dir().join(format!("cpa-roundtrip-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    for dtype in [ElemType::F64, ElemType::F32] {
        let path = dir.join(format!("params-{dtype:?}.ckpt"));
        checkpoint::save(&params, dtype, &path)?;
        let loaded = checkpoint::load(&path)?;
        net.check_params(&loaded)?;
        let out = net.enhance(&loaded, &input)?.image;
        let max_diff = out.data().iter().zip(reference.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let bytes = std::fs::metadata(&path)?.len();
        println!("{dtype:?}: {bytes} bytes, max output difference {max_diff:.3e}");
    }
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
