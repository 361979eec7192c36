use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use masked_distill::harness::config::{from_value, parse_override, resolve_value, set_path, Preset};
use masked_distill::harness::train::files;
use masked_distill::harness::{
    export_masks, export_teacher_features, extract_embeddings, knn_eval, sweep, train, Dataset, SweepSpec,
    TrainConfig,
};
use masked_distill::masking::MaskStrategy;
use masked_distill::model::load_checkpoint;
use masked_distill::{Error, Result};

#[derive(Parser)]
#[command(name = "mdistill", version, about = "Masked multi-objective distillation on a toy ViT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Output directory (`out_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    /// Any config path, e.g. `--set loss.weights.pixel=0.1`. Repeatable.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a student and write metrics and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// kNN accuracy of a checkpoint's frozen embeddings.
    EvalKnn {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/checkpoint.medc`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run a sweep grid and write `results.csv`.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Built-in grid: loss-components, loss-weights or masking.
        #[arg(long, conflicts_with = "spec")]
        grid: Option<String>,
        /// Sweep spec as JSON.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Write PGM mask galleries.
    ExportMasks {
        #[command(flatten)]
        common: Common,
        /// Epochs to export; defaults to 0, K/2 and K.
        #[arg(long, value_delimiter = ',')]
        epochs: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "evolved-em,evolved-hc")]
        strategies: Vec<String>,
        /// Number of test images.
        #[arg(long, default_value_t = 4)]
        images: usize,
        /// Student whose attention drives evolved masks; the seeded
        /// initialization when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write synthetic-teacher features for the configured dataset.
    TeacherExport {
        #[command(flatten)]
        common: Common,
        /// Defaults to `<out>/teacher.medt`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, Value)>> {
        let mut o: Vec<(String, Value)> = self.set.iter().map(|s| parse_override(s)).collect::<Result<_>>()?;
        if let Some(s) = self.seed {
            o.push(("seed".into(), json!(s)));
        }
        if let Some(p) = &self.out {
            o.push(("out_dir".into(), json!(p)));
        }
        if let Some(t) = self.threads {
            o.push(("threads".into(), json!(t)));
        }
        Ok(o)
    }

    fn value(&self) -> Result<Value> {
        resolve_value(self.preset, self.config.as_deref(), &self.overrides()?)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        from_value(self.value()?)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => {
            let cfg = common.resolve()?;
            let report = train(&cfg, Some(&cfg.out_dir))?;
            println!(
                "{}: {} steps, loss {:.4} -> {:.4}, knn top1 {:.2}% top5 {:.2}%",
                cfg.out_dir.display(),
                report.steps.len(),
                report.first_loss(),
                report.last_loss(),
                report.final_knn.top1,
                report.final_knn.top5
            );
        }
        Command::EvalKnn { common, checkpoint } => {
            let base = common.resolve()?;
            let path = checkpoint.unwrap_or_else(|| base.out_dir.join(files::CHECKPOINT));
            let ckpt = load_checkpoint(&path)?;
            // Without an explicit config the checkpoint's own is used.
            let cfg = if common.config.is_none() && common.preset.is_none() {
                let mut v = ckpt.config.clone();
                for (p, val) in common.overrides()? {
                    set_path(&mut v, &p, val)?;
                }
                from_value(v)?
            } else {
                base
            };
            let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            let (train_e, test_e) = pool.install(|| -> Result<_> {
                Ok((
                    extract_embeddings(&cfg.model, &ckpt, &data.train.images, cfg.eval.pooling)?,
                    extract_embeddings(&cfg.model, &ckpt, &data.test.images, cfg.eval.pooling)?,
                ))
            })?;
            let r = knn_eval(&train_e, &data.train.labels, &test_e, &data.test.labels, cfg.eval.knn_k)?;
            println!("{}", serde_json::to_string(&json!({ "k": cfg.eval.knn_k, "top1": r.top1, "top5": r.top5 }))?);
        }
        Command::Sweep { common, grid, spec } => {
            let mut s = match (grid, spec) {
                (_, Some(p)) => {
                    let text = std::fs::read_to_string(&p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                    serde_json::from_str::<SweepSpec>(&text)
                        .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                (Some(g), None) => SweepSpec::named(&g, common.preset.unwrap_or_default())?,
                (None, None) => return Err(Error::Config("sweep needs --grid or --spec".into())),
            };
            if let Some(p) = common.preset {
                s.preset = p;
            }
            let mut base = match &common.config {
                Some(p) => masked_distill::harness::config::read_json(p)?,
                None => json!({}),
            };
            for (p, v) in common.overrides()? {
                set_path(&mut base, &p, v)?;
            }
            let out = common
                .out
                .clone()
                .unwrap_or_else(|| Path::new("runs").join(format!("sweep-{}", s.name)));
            let outcome = sweep(&s, &base, &out, common.threads)?;
            println!(
                "{}: {} rows ({} trained now)",
                outcome.csv.display(),
                outcome.rows.len(),
                outcome.trained
            );
        }
        Command::ExportMasks {
            common,
            epochs,
            strategies,
            images,
            checkpoint,
        } => {
            let cfg = common.resolve()?;
            let strategies = strategies
                .iter()
                .map(|s| {
                    serde_json::from_value::<MaskStrategy>(json!(s))
                        .map_err(|_| Error::Config(format!("unknown mask strategy {s:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let epochs = if epochs.is_empty() {
                vec![0, cfg.epochs / 2, cfg.epochs]
            } else {
                epochs
            };
            let data = Dataset::generate(&cfg.data, cfg.model.image_size, cfg.seed)?;
            let n = images.min(data.test.len());
            let params = checkpoint
                .map(|p| -> Result<_> {
                    let c = load_checkpoint(&p)?;
                    masked_distill::model::Student::new(&cfg.model)?
                        .layout()
                        .check(&c.params)
                        .map_err(|e| Error::Version(e.to_string()))?;
                    Ok(c.params)
                })
                .transpose()?;
            let dir = cfg.out_dir.join("masks");
            let written = export_masks(&cfg, params.as_ref(), &strategies, &epochs, &data.test.images[..n], &dir)?;
            println!("{}: {} masks", dir.display(), written.len());
        }
        Command::TeacherExport { common, file } => {
            let cfg = common.resolve()?;
            let path = file.unwrap_or_else(|| cfg.out_dir.join("teacher.medt"));
            let feats = export_teacher_features(&cfg, &path)?;
            println!("{}: {} images, {} patches x {} dims", path.display(), feats.len(), feats.patches(), feats.dim());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mdistill: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
