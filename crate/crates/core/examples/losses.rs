//! The three objectives on one shapes image, under dense and sparse
//! encoding, before any training.
//!
//! `cargo run --release --example losses`

use masked_distill::harness::train::teacher_targets;
use masked_distill::harness::{Dataset, TrainConfig};
use masked_distill::masking::block_mask;
use masked_distill::model::{patchify, EncodingMode, Student};
use masked_distill::rng::{substream, tag};
use masked_distill::tensor::Tape;

fn main() -> masked_distill::Result<()> {
    let mut cfg = TrainConfig::toy();
    cfg.data.train = 8;
    cfg.data.test = 8;
    let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
    let image = &data.train.images[0];
    let teacher = &teacher_targets(&cfg, std::slice::from_ref(image))?[0];
    let grid = cfg.model.grid()?;
    let mask = block_mask(&grid, cfg.mask.ratio, &mut substream(cfg.seed, &[tag::MASK]))?;
    for mode in [EncodingMode::Dense, EncodingMode::Sparse] {
        cfg.model.encoding_mode = mode;
        let student = Student::new(&cfg.model)?;
        let params = student.init(&mut substream(cfg.seed, &[tag::INIT]));
        let patches = patchify(image, cfg.model.patch_size)?;
        let mut tape = Tape::new();
        let vars = student.register(&mut tape, &params, true)?;
        let out = student.losses(&mut tape, &vars, &patches, teacher, &mask, &cfg.loss)?;
        let b = out.breakdown;
        println!(
            "{mode:?}: rep {:.4}  disc {:.4}  pixel {:.4}  total {:.4}  ({} tape nodes)",
            b.rep,
            b.disc,
            b.pixel,
            b.total,
            tape.len()
        );
    }
    Ok(())
}
