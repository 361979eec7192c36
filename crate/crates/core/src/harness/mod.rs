//! Experiment surface: configuration, data, training, evaluation, sweeps and
//! artifact export.

pub mod config;
pub mod data;
pub mod export;
pub mod knn;
pub mod optim;
pub mod sweep;
pub mod train;

pub use config::{resolve, Preset, TrainConfig};
pub use export::{export_masks, export_teacher_features, mask_file_name, ExportedMask};
pub use data::{Dataset, LabeledImages, SHAPE_CLASSES};
pub use knn::{knn_eval, KnnResult};
pub use optim::{clip_grad_norm, lr_at, AdamW};
pub use sweep::{sweep, SweepRow, SweepSpec};
pub use train::{embed_images, extract_embeddings, train, MetricsRow, StepRow, TrainReport};
