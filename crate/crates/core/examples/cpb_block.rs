//! Runs one content-driven prompt block on random features and a prompt of a
//! different spatial size, and shows the channel-attention map of one part.
//!
//! `cargo run --release --example cpb_block`

use cpa_enhancer::cpb::{Cpb, CpbConfig, Mdta};
use cpa_enhancer::{Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> cpa_enhancer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = CpbConfig { reduction: 4, ..CpbConfig::new(16) };
    let block = Cpb::new("demo", cfg.clone())?;
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng)?;

    let mut g = Graph::new();
    let f = g.constant(Tensor::randn([1, 16, 12, 12], 1.0, &mut rng));
    let p = g.constant(Tensor::randn([1, 16, 6, 6], 1.0, &mut rng));
    let out = block.forward(&mut g, &store, f, p)?;
    println!(
        "CPB: features {} + prompt {} -> {} ({} parts of {} channels, {} params)",
        g.value(f).shape(),
        g.value(p).shape(),
        g.value(out).shape(),
        cfg.splits,
        cfg.part_channels(),
        store.numel()
    );

    let attn_block = Mdta::new("attn", 4, 1, cfg.sigma_mode);
    let mut attn_store = ParamStore::new();
    attn_block.init(&mut attn_store, &mut rng)?;
    let x = g.constant(Tensor::randn([1, 4, 12, 12], 1.0, &mut rng));
    let (_, attn) = attn_block.forward_with_attention(&mut g, &attn_store, x)?;
    let a = g.value(attn);
    println!("channel attention {} (rows sum to 1):", a.shape());
    for i in 0..4 {
        let row: Vec<String> = (0..4).map(|j| format!("{:.3}", a.at(0, 0, i, j))).collect();
        println!("  [{}]", row.join(", "));
    }
    Ok(())
}
