//! Prints the attention layouts used by the two inference phases and by the
//! no_hybrid ablation.
//!
//!     cargo run --example hybrid_masks -- 5 4

use allmask::attention_mask::{
    block_mask_with_cache, construct_block_mask, construct_causal_mask, construct_hybrid_mask, BlockAttention,
};

fn main() -> allmask::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let h = args.first().copied().unwrap_or(5);
    let n = args.get(1).copied().unwrap_or(4);

    println!("causal, {h} history rows (phase one):");
    print!("{}", construct_causal_mask(h)?.render());

    let hybrid = construct_hybrid_mask(h, n)?;
    hybrid.validate().expect("hybrid layout is well formed");
    println!("\nhybrid, H={h} N={n}: causal history, bidirectional placeholders");
    print!("{}", hybrid.render());

    println!("\nplaceholder rows only, history served from the cache:");
    print!("{}", block_mask_with_cache(h, n, BlockAttention::Bidirectional)?.render());

    println!("\nno_hybrid ablation (placeholders causal among themselves):");
    print!("{}", construct_block_mask(h, n, BlockAttention::Causal)?.render());

    println!("\nallowed entries: hybrid {} vs fully causal {}", hybrid.popcount(), construct_causal_mask(h + n)?.popcount());
    Ok(())
}
