//! Mask galleries: one PGM per (strategy, epoch, image).
//!
//! Evolved strategies cluster the attention of the image itself, taken from
//! the given student parameters (a trained checkpoint, or the seeded
//! initialization). At epoch 0 no clustering happens and the mask realizes
//! the grid pattern; at epoch K it realizes the cluster probabilities only.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::config::TrainConfig;
use super::data::Dataset;
use super::train::cluster_for_epoch;
use crate::error::{Error, Result};
use crate::masking::{block_mask, evolved_mask, grid_mask, random_mask, write_mask_pgm, BinaryMask, MaskStrategy};
use crate::model::{
    patchify, write_teacher_features, Image, ParamSet, Student, SyntheticTeacher, TeacherFeatures,
};
use crate::rng::{substream, tag};

#[derive(Clone, Debug)]
pub struct ExportedMask {
    pub path: PathBuf,
    pub strategy: MaskStrategy,
    pub epoch: usize,
    pub image: usize,
    pub mask: BinaryMask,
}

/// `{strategy}_g{γ}_z{ζ}_r{ratio}_e{epoch:03}_s{seed}_img{image:03}.pgm`
pub fn mask_file_name(cfg: &TrainConfig, strategy: MaskStrategy, epoch: usize, image: usize) -> String {
    format!(
        "{}_g{}_z{}_r{}_e{epoch:03}_s{}_img{image:03}.pgm",
        strategy.name(),
        cfg.mask.gamma,
        cfg.mask.zeta,
        cfg.mask.ratio,
        cfg.seed
    )
}

/// Writes masks for every strategy × epoch × image into `out`. Images are
/// numbered by their position in `images`. Evolved strategies also write
/// `clusters_{strategy}_e{epoch:03}_img{image:03}.csv`.
pub fn export_masks(
    cfg: &TrainConfig,
    params: Option<&ParamSet<f64>>,
    strategies: &[MaskStrategy],
    epochs: &[usize],
    images: &[Image],
    out: &Path,
) -> Result<Vec<ExportedMask>> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let grid = cfg.model.grid()?;
    let student = Student::new(&cfg.model)?;
    let init;
    let params = match params {
        Some(p) => p,
        None => {
            init = student.init(&mut substream(cfg.seed, &[tag::INIT]));
            &init
        }
    };

    let needs_attention = strategies.iter().any(|s| s.is_evolved());
    let attention = if needs_attention {
        images
            .iter()
            .map(|img| {
                student.probe_attention(
                    params,
                    &patchify(img, cfg.model.patch_size)?,
                    cfg.clustering.renormalize_attention,
                )
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };

    let mut written = Vec::new();
    for (si, &strategy) in strategies.iter().enumerate() {
        let mut scfg = cfg.clone();
        scfg.mask.strategy = strategy;
        for &epoch in epochs {
            if epoch > scfg.epochs {
                return Err(Error::Range { epoch, total: scfg.epochs });
            }
            for image in 0..images.len() {
                let mut rng = substream(cfg.seed, &[tag::EXPORT, si as u64, epoch as u64, image as u64]);
                let ratio = scfg.mask.ratio;
                let mask = match strategy {
                    MaskStrategy::Grid => grid_mask(&grid, ratio)?,
                    MaskStrategy::Random => random_mask(&grid, ratio, &mut rng)?,
                    MaskStrategy::Block => block_mask(&grid, ratio, &mut rng)?,
                    MaskStrategy::EvolvedHc | MaskStrategy::EvolvedEm => {
                        let assignment = if epoch > 0 {
                            let a = cluster_for_epoch(&scfg, &grid, &attention[image], epoch)?;
                            let p = out.join(format!("clusters_{}_e{epoch:03}_img{image:03}.csv", strategy.name()));
                            std::fs::write(&p, a.to_csv()).map_err(|e| Error::io(p, e))?;
                            Some(a)
                        } else {
                            None
                        };
                        evolved_mask(&grid, &scfg.mask, epoch, assignment.as_ref(), &mut rng)?
                    }
                };
                let path = out.join(mask_file_name(&scfg, strategy, epoch, image));
                write_mask_pgm(&path, &mask, &grid)?;
                written.push(ExportedMask {
                    path,
                    strategy,
                    epoch,
                    image,
                    mask,
                });
            }
        }
    }
    Ok(written)
}

/// Synthetic-teacher features for every image (train, test and probe) of
/// the configured dataset, written to `path`. Training with
/// `teacher = {"kind": "file", "path": ...}` then reads them back.
pub fn export_teacher_features(cfg: &TrainConfig, path: &Path) -> Result<TeacherFeatures> {
    let mut cfg = cfg.clone();
    cfg.normalize();
    cfg.validate()?;
    let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
    let teacher = SyntheticTeacher::new(&cfg.model)?;
    let images: Vec<&Image> = data
        .train
        .images
        .iter()
        .chain(&data.test.images)
        .chain(&data.probe.images)
        .collect();
    let outputs = super::train::thread_pool(cfg.threads)?
        .install(|| images.par_iter().map(|img| teacher.forward(img)).collect::<Result<Vec<_>>>())?;
    let mut feats = TeacherFeatures::new(cfg.model.num_patches(), teacher.dim());
    for (img, out) in images.iter().zip(&outputs) {
        feats.insert(img.content_hash(), out)?;
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_teacher_features(path, &feats)?;
    Ok(feats)
}
