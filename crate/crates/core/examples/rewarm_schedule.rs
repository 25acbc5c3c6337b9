//! Base cosine schedule next to the re-warmup curve for new regions.
//!
//! `cargo run --example rewarm_schedule`

use widegrow::expansion::RegionTag;
use widegrow::schedule::{region_lr, CosineWarmup, RewarmPlan};

fn main() -> widegrow::Result<()> {
    let base = CosineWarmup::with_defaults(2000, 3e-3)?;
    let rewarm = RewarmPlan::default().at(1000);
    println!("step,original,new");
    for t in (0..=2000).step_by(50).chain([1001, 1125, 1250]) {
        let t = t as f64;
        println!(
            "{t},{:.6e},{:.6e}",
            region_lr(&base, Some(&rewarm), RegionTag::Original, t)?,
            region_lr(&base, Some(&rewarm), RegionTag::New, t)?
        );
    }
    Ok(())
}
