//! kNN (k = 20, cosine, similarity-weighted) on raw pixels of the shapes
//! dataset, as a reference for learned embeddings.
//!
//! `cargo run --release --example knn`

use masked_distill::harness::{knn_eval, Dataset, TrainConfig};

fn main() -> masked_distill::Result<()> {
    let cfg = TrainConfig::toy();
    let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
    let pixels = |imgs: &[masked_distill::model::Image]| -> Vec<Vec<f64>> {
        imgs.iter()
            .map(|i| {
                let d = i.data();
                let m = d.iter().sum::<f64>() / d.len() as f64;
                d.iter().map(|v| v - m).collect()
            })
            .collect()
    };
    for k in [1, 5, 20] {
        let r = knn_eval(
            &pixels(&data.train.images),
            &data.train.labels,
            &pixels(&data.test.images),
            &data.test.labels,
            k,
        )?;
        println!("k = {k:>2}: top1 {:.1}%  top5 {:.1}%", r.top1, r.top5);
    }
    Ok(())
}
