//! EM and HC evolved masks for a few test images at the start, middle and
//! end of the schedule, written as PGM files.
//!
//! `cargo run --release --example mask_gallery [out_dir] [checkpoint]`

use masked_distill::harness::{export_masks, Dataset, TrainConfig};
use masked_distill::masking::{MaskStrategy, MaskSchedule};
use masked_distill::model::load_checkpoint;

fn main() -> masked_distill::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "runs/gallery".into()));
    let ckpt = args.next().map(|p| load_checkpoint(p.as_ref())).transpose()?;
    let mut cfg = TrainConfig::toy();
    let reference = MaskSchedule::paper();
    cfg.mask.gamma = reference.gamma;
    cfg.mask.zeta = reference.zeta;
    cfg.mask.ratio = reference.ratio;
    let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
    let k = cfg.epochs;
    let written = export_masks(
        &cfg,
        ckpt.as_ref().map(|c| &c.params),
        &[MaskStrategy::EvolvedEm, MaskStrategy::EvolvedHc],
        &[0, k / 2, k],
        &data.test.images[..3],
        &out,
    )?;
    for w in &written {
        println!("{}  {} masked", w.path.display(), w.mask.masked_count());
    }
    Ok(())
}
