//! The evolved-masking schedule: α, cluster count and the grid/cluster blend
//! per epoch, for the reference settings (γ 1.7, 10 to 40 clusters).
//!
//! `cargo run --release --example schedule [epochs]`

use masked_distill::masking::{alpha_schedule, blend_probabilities, cluster_count, MaskProbabilities, MaskSchedule};

fn main() -> masked_distill::Result<()> {
    let k: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let schedule = MaskSchedule {
        total_epochs: k,
        ..MaskSchedule::paper()
    };
    println!("{:>6} {:>8} {:>4}", "epoch", "alpha", "C");
    for e in (0..=k).step_by((k / 10).max(1)) {
        let a = alpha_schedule(e, &schedule)?;
        println!("{e:>6} {a:>8.5} {:>4}", cluster_count(a, &schedule));
    }
    let grid = MaskProbabilities::new(vec![1.0, 0.0, 1.0, 0.0])?;
    let cluster = MaskProbabilities::new(vec![1.0, 1.0, 0.0, 0.0])?;
    let mid = alpha_schedule(k / 2, &schedule)?;
    println!("blend at epoch {}: {:?}", k / 2, blend_probabilities(&grid, &cluster, mid)?.as_slice());
    Ok(())
}
