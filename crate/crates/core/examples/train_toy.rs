//! Toy distillation run: 30 epochs × 10 steps on the shapes dataset.
//!
//! `cargo run --release --example train_toy [out_dir]`

use masked_distill::harness::{train, TrainConfig};

fn main() -> masked_distill::Result<()> {
    let out = std::env::args().nth(1).map(std::path::PathBuf::from);
    let cfg = TrainConfig::toy();
    let t = std::time::Instant::now();
    let report = train(&cfg, out.as_deref())?;
    for m in &report.metrics {
        println!(
            "epoch {:>3}  total {:.4}  rep {:.4}  disc {:.4}  pixel {:.4}  knn {:?}",
            m.epoch, m.total, m.rep, m.disc, m.pixel, m.knn_top1
        );
    }
    println!(
        "first step {:.4}  last step {:.4}  ratio {:.3}  top1 {:.1}%  top5 {:.1}%  ({:.1}s)",
        report.first_loss(),
        report.last_loss(),
        report.last_loss() / report.first_loss(),
        report.final_knn.top1,
        report.final_knn.top5,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
