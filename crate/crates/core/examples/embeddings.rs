//! Train briefly, save a checkpoint, reload it and extract frozen CLS and
//! mean-pooled embeddings for kNN.
//!
//! `cargo run --release --example embeddings [out_dir]`

use masked_distill::harness::train::files;
use masked_distill::harness::{extract_embeddings, knn_eval, train, Dataset, TrainConfig};
use masked_distill::model::{load_checkpoint, Pooling};

fn main() -> masked_distill::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "runs/embeddings".into()));
    let mut cfg = TrainConfig::toy();
    cfg.epochs = 5;
    cfg.lr.warmup_epochs = 1;
    train(&cfg, Some(&out))?;
    let ckpt = load_checkpoint(&out.join(files::CHECKPOINT))?;
    let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
    for pooling in [Pooling::Cls, Pooling::Mean] {
        let tr = extract_embeddings(&cfg.model, &ckpt, &data.train.images, pooling)?;
        let te = extract_embeddings(&cfg.model, &ckpt, &data.test.images, pooling)?;
        let r = knn_eval(&tr, &data.train.labels, &te, &data.test.labels, cfg.eval.knn_k)?;
        println!("{pooling:?}: dim {}  top1 {:.1}%  top5 {:.1}%", tr[0].len(), r.top1, r.top5);
    }
    Ok(())
}
