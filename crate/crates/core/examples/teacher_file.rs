//! Writes the synthetic teacher's features for the toy dataset, reads them
//! back, and trains briefly from the file.
//!
//! `cargo run --release --example teacher_file [out_dir]`

use masked_distill::harness::config::TeacherSource;
use masked_distill::harness::{export_teacher_features, train, TrainConfig};
use masked_distill::model::read_teacher_features;

fn main() -> masked_distill::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/teacher".into()));
    let mut cfg = TrainConfig::toy();
    cfg.epochs = 3;
    cfg.lr.warmup_epochs = 1;
    let path = out.join("teacher.medt");
    let written = export_teacher_features(&cfg, &path)?;
    let read = read_teacher_features(&path)?;
    println!(
        "{}: {} images, {} patches × {} dims, round trip {}",
        path.display(),
        read.len(),
        read.patches(),
        read.dim(),
        if read == written { "exact" } else { "differs" }
    );
    cfg.teacher = TeacherSource::File { path };
    let report = train(&cfg, None)?;
    println!(
        "3 epochs from file: loss {:.4} -> {:.4}, top1 {:.1}%",
        report.first_loss(),
        report.last_loss(),
        report.final_knn.top1
    );
    Ok(())
}
