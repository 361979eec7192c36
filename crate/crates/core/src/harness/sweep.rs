//! Grid sweeps over configuration paths with resumable cells.
//!
//! A sweep's grid is the product of its explicit `cells` (each a labelled
//! set of path overrides) and its `axes` (each a list of values for one
//! path). Every grid cell is keyed by the hash of its resolved config. Its
//! finished row goes to `cells/<hash>.json`, and the run itself goes to
//! `cells/<hash>/`. While a cell trains, `cells/<hash>.partial` exists.
//! Rerunning a sweep skips cells whose row file is present, so an
//! interrupted sweep picks up where it stopped, and `results.csv` is
//! rebuilt from the row files in grid order every time.
//!
//! `results.csv` columns, in order: cell, label, config_hash, seed,
//! strategy, gamma, zeta, ratio, lambda_rep, dlw, clw, epochs, steps,
//! final_rep, final_disc, final_pixel, final_total, knn_top1, knn_top5,
//! best_top1, best_top5, best_epoch, knn_every. The `final_*` losses are
//! means over the last epoch; `knn_*` is the last-epoch evaluation and
//! `best_*` the best periodic one.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::config::{deep_merge, from_value, set_path, Preset, TrainConfig};
use super::train::{train, TrainReport};
use crate::error::{Error, Result};

pub const RESULTS: &str = "results.csv";
pub const CELLS: &str = "cells";

/// One labelled point: config paths and their values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub label: String,
    #[serde(default)]
    pub set: Map<String, Value>,
}

/// One swept path with its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Short name used in cell labels, such as `dlw`.
    pub name: String,
    pub path: String,
    pub values: Vec<Value>,
}

/// Per-cell training budget, applied after all other overrides.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budget {
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub name: String,
    #[serde(default)]
    pub preset: Preset,
    /// Merged over the preset before any cell overrides.
    #[serde(default = "empty_object")]
    pub base: Value,
    #[serde(default)]
    pub cells: Vec<SweepCell>,
    #[serde(default)]
    pub axes: Vec<SweepAxis>,
    #[serde(default)]
    pub budget: Budget,
}

fn empty_object() -> Value {
    Value::Object(Map::new())
}

fn cell(label: &str, set: Value) -> SweepCell {
    SweepCell {
        label: label.into(),
        set: set.as_object().cloned().unwrap_or_default(),
    }
}

fn weights(rep: f64, disc: f64, pixel: f64) -> Value {
    json!({ "loss.weights.rep": rep, "loss.weights.disc": disc, "loss.weights.pixel": pixel })
}

impl SweepSpec {
    pub fn new(name: &str, preset: Preset) -> Self {
        SweepSpec {
            name: name.into(),
            preset,
            base: empty_object(),
            cells: Vec::new(),
            axes: Vec::new(),
            budget: Budget::default(),
        }
    }

    /// The six loss-component combinations. An active component uses the
    /// best combined weights (rep 1, CLS 0.3, pixel 0.01); an inactive one
    /// has weight 0.
    pub fn loss_components(preset: Preset) -> Self {
        let (r, d, p) = (1.0, 0.3, 0.01);
        let mut s = Self::new("loss-components", preset);
        s.cells = vec![
            cell("disc", weights(0.0, d, 0.0)),
            cell("pixel", weights(0.0, 0.0, p)),
            cell("rep", weights(r, 0.0, 0.0)),
            cell("rep+pixel", weights(r, 0.0, p)),
            cell("rep+disc", weights(r, d, 0.0)),
            cell("rep+pixel+disc", weights(r, d, p)),
        ];
        s
    }

    /// DLW alone, CLW alone, then the two combined settings.
    pub fn loss_weights(preset: Preset) -> Self {
        let mut s = Self::new("loss-weights", preset);
        for dlw in [0.5, 0.4, 0.3, 0.2, 0.1, 0.05, 0.01, 0.005] {
            s.cells.push(cell(&format!("dlw={dlw}"), weights(1.0, 0.0, dlw)));
        }
        for clw in [0.5, 0.3, 0.2, 0.1] {
            s.cells.push(cell(&format!("clw={clw}"), weights(1.0, clw, 0.0)));
        }
        for (dlw, clw) in [(0.01, 0.3), (0.1, 0.1)] {
            s.cells
                .push(cell(&format!("dlw={dlw},clw={clw}"), weights(1.0, clw, dlw)));
        }
        s
    }

    /// Block masking, then EM/HC over γ at ratios 0.5 and 0.75, then ζ at
    /// γ = 1.5, ratio 0.75.
    pub fn masking(preset: Preset) -> Self {
        let m = |strategy: &str, gamma: f64, zeta: f64, ratio: f64| {
            let label = if strategy == "block" {
                format!("block,r={ratio}")
            } else {
                format!("{strategy},g={gamma},z={zeta},r={ratio}")
            };
            cell(
                &label,
                json!({
                    "mask.strategy": strategy,
                    "mask.gamma": gamma,
                    "mask.zeta": zeta,
                    "mask.ratio": ratio,
                }),
            )
        };
        let mut s = Self::new("masking", preset);
        s.cells.push(m("block", 1.7, 0.9, 0.5));
        s.cells.push(m("evolved-em", 2.0, 0.5, 0.5));
        for g in [2.0, 1.6, 1.4, 1.2, 1.1, 0.5, 0.3, 0.2, 0.1] {
            s.cells.push(m("evolved-hc", g, 0.5, 0.5));
        }
        s.cells.push(m("evolved-em", 2.0, 0.5, 0.75));
        for g in [2.0, 1.7, 1.6, 1.5, 1.4, 1.3, 1.1] {
            s.cells.push(m("evolved-hc", g, 0.5, 0.75));
        }
        for z in [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
            s.cells.push(m("evolved-hc", 1.5, z, 0.75));
        }
        s
    }

    pub fn named(name: &str, preset: Preset) -> Result<Self> {
        match name {
            "loss-components" => Ok(Self::loss_components(preset)),
            "loss-weights" => Ok(Self::loss_weights(preset)),
            "masking" => Ok(Self::masking(preset)),
            other => Err(Error::Config(format!(
                "unknown sweep {other:?} (expected loss-components, loss-weights or masking)"
            ))),
        }
    }

    /// Grid cells in order: explicit cells outermost, then axes with the
    /// last axis varying fastest.
    pub fn grid(&self) -> Result<Vec<SweepCell>> {
        let mut out = if self.cells.is_empty() {
            vec![SweepCell::default()]
        } else {
            self.cells.clone()
        };
        for axis in &self.axes {
            if axis.values.is_empty() {
                return Err(Error::Config(format!("sweep axis {:?} has no values", axis.name)));
            }
            let mut next = Vec::with_capacity(out.len() * axis.values.len());
            for c in &out {
                for v in &axis.values {
                    let mut c = c.clone();
                    let part = format!("{}={}", axis.name, plain(v));
                    c.label = if c.label.is_empty() { part } else { format!("{},{part}", c.label) };
                    c.set.insert(axis.path.clone(), v.clone());
                    next.push(c);
                }
            }
            out = next;
        }
        Ok(out)
    }

    /// Resolved config of one cell: preset, `base` (already merged with any
    /// caller overlay), the cell's paths, then the budget.
    pub fn cell_config(&self, base: &Value, cell: &SweepCell) -> Result<TrainConfig> {
        let mut v = TrainConfig::preset(self.preset).to_value();
        deep_merge(&mut v, &self.base);
        deep_merge(&mut v, base);
        for (path, val) in &cell.set {
            set_path(&mut v, path, val.clone())?;
        }
        if let Some(e) = self.budget.epochs {
            set_path(&mut v, "epochs", json!(e))?;
        }
        if let Some(s) = self.budget.steps_per_epoch {
            set_path(&mut v, "steps_per_epoch", json!(s))?;
        }
        from_value(v)
    }

    /// Resolves and validates every cell.
    pub fn configs(&self, base: &Value) -> Result<Vec<(SweepCell, TrainConfig)>> {
        let grid = self.grid()?;
        if grid.is_empty() {
            return Err(Error::Config("sweep grid is empty".into()));
        }
        grid.into_iter()
            .map(|c| {
                let cfg = self
                    .cell_config(base, &c)
                    .map_err(|e| Error::Config(format!("sweep cell {:?}: {e}", c.label)))?;
                Ok((c, cfg))
            })
            .collect()
    }
}

fn plain(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub label: String,
    pub config_hash: String,
    pub seed: u64,
    pub strategy: String,
    pub gamma: f64,
    pub zeta: f64,
    pub ratio: f64,
    pub lambda_rep: f64,
    pub dlw: f64,
    pub clw: f64,
    pub epochs: usize,
    pub steps: usize,
    pub final_rep: f64,
    pub final_disc: f64,
    pub final_pixel: f64,
    pub final_total: f64,
    pub knn_top1: f64,
    pub knn_top5: f64,
    pub best_top1: f64,
    pub best_top5: f64,
    pub best_epoch: usize,
    pub knn_every: usize,
}

pub const COLUMNS: [&str; 23] = [
    "cell", "label", "config_hash", "seed", "strategy", "gamma", "zeta", "ratio", "lambda_rep", "dlw", "clw",
    "epochs", "steps", "final_rep", "final_disc", "final_pixel", "final_total", "knn_top1", "knn_top5",
    "best_top1", "best_top5", "best_epoch", "knn_every",
];

impl SweepRow {
    pub fn from_report(cell: usize, label: &str, r: &TrainReport) -> Self {
        let c = &r.config;
        let last = r.metrics.last().expect("training runs at least one epoch");
        let (best, best_epoch) = r.best_knn().unwrap_or((r.final_knn, c.epochs));
        SweepRow {
            cell,
            label: label.into(),
            config_hash: r.hash.clone(),
            seed: c.seed,
            strategy: c.mask.strategy.name().into(),
            gamma: c.mask.gamma,
            zeta: c.mask.zeta,
            ratio: c.mask.ratio,
            lambda_rep: c.loss.weights.rep,
            dlw: c.loss.weights.pixel,
            clw: c.loss.weights.disc,
            epochs: c.epochs,
            steps: last.step,
            final_rep: last.rep,
            final_disc: last.disc,
            final_pixel: last.pixel,
            final_total: last.total,
            knn_top1: r.final_knn.top1,
            knn_top5: r.final_knn.top5,
            best_top1: best.top1,
            best_top5: best.top5,
            best_epoch,
            knn_every: c.knn_every(),
        }
    }

    pub fn is_finite(&self) -> bool {
        [
            self.final_rep,
            self.final_disc,
            self.final_pixel,
            self.final_total,
            self.knn_top1,
            self.knn_top5,
            self.best_top1,
            self.best_top5,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Cells trained in this invocation (the rest were already complete).
    pub trained: usize,
    pub csv: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn read_row(path: &Path) -> Option<SweepRow> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub fn rows_to_csv(rows: &[SweepRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::Format { what: "sweep csv", detail: e.to_string() })?;
    }
    if rows.is_empty() {
        w.write_record(COLUMNS)
            .map_err(|e| Error::Format { what: "sweep csv", detail: e.to_string() })?;
    }
    w.into_inner()
        .map_err(|e| Error::Format { what: "sweep csv", detail: e.to_string() })
}

pub fn read_results(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format { what: "sweep csv", detail: e.to_string() })?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format { what: "sweep csv", detail: e.to_string() }))
        .collect()
}

/// Runs every incomplete cell and rewrites `results.csv` under `out`.
/// `base` is merged over the spec's own `base`; `threads` overrides each
/// cell's thread count when set.
pub fn sweep(spec: &SweepSpec, base: &Value, out: &Path, threads: Option<usize>) -> Result<SweepOutcome> {
    let cells = spec.configs(base)?;
    let cell_dir = out.join(CELLS);
    std::fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    let spec_path = out.join("sweep.json");
    write_atomic(&spec_path, (serde_json::to_string_pretty(spec)? + "\n").as_bytes())?;

    let mut rows = Vec::with_capacity(cells.len());
    let mut trained = 0;
    for (i, (c, mut cfg)) in cells.into_iter().enumerate() {
        if let Some(t) = threads {
            cfg.threads = t;
        }
        let hash = cfg.hash();
        let row_path = cell_dir.join(format!("{hash}.json"));
        if let Some(mut row) = read_row(&row_path) {
            // Identical configs under different labels share one run.
            row.cell = i;
            row.label = c.label.clone();
            rows.push(row);
            continue;
        }
        let marker = cell_dir.join(format!("{hash}.partial"));
        std::fs::write(&marker, &c.label).map_err(|e| Error::io(&marker, e))?;
        let report = train(&cfg, Some(&cell_dir.join(&hash)))?;
        let row = SweepRow::from_report(i, &c.label, &report);
        write_atomic(&row_path, (serde_json::to_string_pretty(&row)? + "\n").as_bytes())?;
        std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
        trained += 1;
        rows.push(row);
    }
    let csv = out.join(RESULTS);
    write_atomic(&csv, &rows_to_csv(&rows)?)?;
    Ok(SweepOutcome { rows, trained, csv })
}
