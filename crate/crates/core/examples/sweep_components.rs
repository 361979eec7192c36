//! The six loss-component combinations as a short sweep.
//!
//! `cargo run --release --example sweep_components [out_dir] [epochs]`
//!
//! Rerunning with the same directory skips finished cells.

use masked_distill::harness::config::Preset;
use masked_distill::harness::{sweep, SweepSpec};
use serde_json::json;

fn main() -> masked_distill::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/sweep-components".into());
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(6);
    let mut spec = SweepSpec::loss_components(Preset::Toy);
    spec.budget.epochs = Some(epochs);
    let base = json!({ "lr": { "warmup_epochs": 1 } });
    let outcome = sweep(&spec, &base, out.as_ref(), None)?;
    println!("{:<16} {:>9} {:>8} {:>8}", "objectives", "total", "top1", "top5");
    for r in &outcome.rows {
        println!("{:<16} {:>9.4} {:>8.2} {:>8.2}", r.label, r.final_total, r.knn_top1, r.knn_top5);
    }
    println!("{} ({} cells trained now)", outcome.csv.display(), outcome.trained);
    Ok(())
}
