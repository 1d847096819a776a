//! Per-epoch metrics, probe and gate logs, and their CSV forms.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradprobe::{GradSnapshot, LayerStat};

/// Row label used for the whole-model statistics in `grads.csv`.
pub const GLOBAL_ROW: &str = "_global";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Completed passes over the training partition.
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    /// Means over fusion-branch steps of the epoch; empty when none ran.
    pub mean_g_fbank: Option<f64>,
    pub mean_g_unit: Option<f64>,
    /// Mean over probes of the epoch; empty when nothing was probed.
    pub conflict_fraction: Option<f64>,
    pub wall_seconds: f64,
}

/// Statistics from one gradient probe, without the raw vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeRecord {
    pub step: usize,
    pub epoch: usize,
    pub per_layer: Vec<LayerStat>,
    pub global_cos: Option<f64>,
    pub norm_fbank: f64,
    pub norm_unit: f64,
    pub conflict_fraction: f64,
    pub gate_target: f64,
}

impl ProbeRecord {
    pub fn from_snapshot(s: &GradSnapshot, gate_target: f64) -> Self {
        Self {
            step: s.step,
            epoch: s.epoch,
            per_layer: s.per_layer.clone(),
            global_cos: s.global_cos,
            norm_fbank: s.norm_fbank(),
            norm_unit: s.norm_unit(),
            conflict_fraction: s.conflict_fraction,
            gate_target,
        }
    }
}

/// One row of `grads.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradRow {
    pub step: usize,
    pub epoch: usize,
    pub layer: String,
    pub cos_theta: Option<f64>,
    pub norm_fbank: f64,
    pub norm_unit: f64,
    pub global_cos: Option<f64>,
    pub conflict_fraction: f64,
    pub gate_target: f64,
}

impl ProbeRecord {
    pub fn rows(&self) -> Vec<GradRow> {
        let row = |layer: &str, cos, nf, nu| GradRow {
            step: self.step,
            epoch: self.epoch,
            layer: layer.to_string(),
            cos_theta: cos,
            norm_fbank: nf,
            norm_unit: nu,
            global_cos: self.global_cos,
            conflict_fraction: self.conflict_fraction,
            gate_target: self.gate_target,
        };
        let mut out: Vec<GradRow> = self
            .per_layer
            .iter()
            .map(|l| row(&l.name, l.cos, l.norm_fbank, l.norm_unit))
            .collect();
        out.push(row(
            GLOBAL_ROW,
            self.global_cos,
            self.norm_fbank,
            self.norm_unit,
        ));
        out
    }
}

/// Gate statistics for one fusion-branch training step (`gates.csv`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateRecord {
    pub step: usize,
    pub epoch: usize,
    pub mean_g_fbank: f64,
    pub mean_g_unit: f64,
    pub frac_g_fbank_above_1: f64,
    pub n_elements: usize,
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .map(|row| row.map_err(|e| csv_error(path, e)))
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(path, e.to_string())
    }
}

pub const METRICS_HEADER: &[&str] = &[
    "epoch",
    "train_loss",
    "valid_loss",
    "valid_accuracy",
    "mean_g_fbank",
    "mean_g_unit",
    "conflict_fraction",
    "wall_seconds",
];

pub const GRADS_HEADER: &[&str] = &[
    "step",
    "epoch",
    "layer",
    "cos_theta",
    "norm_fbank",
    "norm_unit",
    "global_cos",
    "conflict_fraction",
    "gate_target",
];

pub const GATES_HEADER: &[&str] = &[
    "step",
    "epoch",
    "mean_g_fbank",
    "mean_g_unit",
    "frac_g_fbank_above_1",
    "n_elements",
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_roundtrip_with_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        let rows = vec![MetricsRecord {
            epoch: 1,
            train_loss: 2.5,
            valid_loss: 0.1 + 0.2,
            valid_accuracy: 0.25,
            mean_g_fbank: None,
            mean_g_unit: Some(1.0),
            conflict_fraction: None,
            wall_seconds: 0.5,
        }];
        write_csv(&p, &rows, METRICS_HEADER).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("epoch,train_loss,valid_loss"));
        assert!(text.contains(",,1.0,,"));
        let back: Vec<MetricsRecord> = read_csv(&p).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn probe_rows_end_with_global() {
        let rec = ProbeRecord {
            step: 3,
            epoch: 1,
            per_layer: vec![LayerStat {
                name: "dec.0.w".into(),
                cos: None,
                norm_fbank: 0.0,
                norm_unit: 1.0,
            }],
            global_cos: Some(-0.5),
            norm_fbank: 1.0,
            norm_unit: 1.0,
            conflict_fraction: 0.0,
            gate_target: 1.5,
        };
        let rows = rec.rows();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].layer, GLOBAL_ROW);
        assert_eq!(rows[1].cos_theta, Some(-0.5));
    }

    #[test]
    fn missing_file_is_io() {
        let err = read_csv::<GateRecord>(Path::new("/nonexistent/gates.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }
}
