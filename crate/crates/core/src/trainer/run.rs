use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::checkpoint::{average_checkpoint_files, Checkpoint};
use super::metrics::{
    read_csv, write_csv, GradRow, MetricsRecord, GATES_HEADER, GRADS_HEADER, METRICS_HEADER,
};
use super::{best_accuracy, epochs_to_best, epochs_to_reach, Trainer};
use crate::config::{FusionMode, RunConfig};
use crate::datagen::Corpus;
use crate::error::{Error, Result};

/// Share of the baseline's best accuracy used for the epochs-to-level
/// comparison.
pub const LEVEL_FRACTION: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineComparison {
    pub baseline_dir: PathBuf,
    pub baseline_epochs_to_best: usize,
    pub epochs_to_best: usize,
    /// `baseline_epochs_to_best / epochs_to_best`.
    pub speedup_ratio: f64,
    pub baseline_best_accuracy: f64,
    /// `LEVEL_FRACTION` of the baseline's best validation accuracy.
    pub level: f64,
    pub baseline_epochs_to_level: usize,
    /// `None` if this run never reached the level.
    pub epochs_to_level: Option<usize>,
    /// `baseline_epochs_to_level / epochs_to_level`, 0 if never reached.
    pub speedup_at_level: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub fusion_mode: FusionMode,
    pub config_hash: String,
    pub epochs_trained: usize,
    pub steps: usize,
    pub best_valid_accuracy: Option<f64>,
    pub epochs_to_best: Option<usize>,
    /// Latest epoch among the averaged checkpoints.
    pub avg_window_end: usize,
    pub avg_source_epochs: Vec<usize>,
    pub avg_valid_loss: f64,
    pub avg_valid_accuracy: f64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Training-partition `(min, max)` of the unit view.
    pub unit_range: [f64; 2],
    /// Range the noise was drawn from, when a noise ablation ran.
    pub noise_range: Option<[f64; 2]>,
    pub baseline: Option<BaselineComparison>,
}

/// Compares a run's history with a baseline's. Both curves are read
/// from their `metrics.csv` so the numbers can be recomputed by hand.
pub fn baseline_comparison(
    baseline_dir: &Path,
    baseline: &[MetricsRecord],
    run: &[MetricsRecord],
) -> Result<BaselineComparison> {
    let none = |what: &str| Error::Config(format!("{what} has no epochs to compare"));
    let b_best = epochs_to_best(baseline).ok_or_else(|| none("baseline"))?;
    let r_best = epochs_to_best(run).ok_or_else(|| none("run"))?;
    let b_acc = best_accuracy(baseline).ok_or_else(|| none("baseline"))?;
    let level = LEVEL_FRACTION * b_acc;
    let b_level = epochs_to_reach(baseline, level).expect("best epoch reaches the level");
    let r_level = epochs_to_reach(run, level);
    Ok(BaselineComparison {
        baseline_dir: baseline_dir.to_path_buf(),
        baseline_epochs_to_best: b_best,
        epochs_to_best: r_best,
        speedup_ratio: b_best as f64 / r_best as f64,
        baseline_best_accuracy: b_acc,
        level,
        baseline_epochs_to_level: b_level,
        epochs_to_level: r_level,
        speedup_at_level: r_level.map_or(0.0, |r| b_level as f64 / r as f64),
    })
}

fn ckpt_name(epoch: usize) -> String {
    format!("epoch_{epoch:03}.ckpt")
}

/// Trains on `corpus` and writes the run directory:
///
/// * `config.txt` with the resolved configuration
/// * `metrics.csv`, `grads.csv`, `gates.csv`
/// * `ckpt/epoch_NNN.ckpt` after every epoch
/// * `avg10.ckpt`, the mean of the best checkpoints by validation loss
/// * `summary.json`
pub fn run_training(
    cfg: RunConfig,
    corpus: Corpus,
    out: &Path,
    init: Option<&Checkpoint>,
    baseline: Option<&Path>,
) -> Result<RunSummary> {
    let baseline_metrics = baseline
        .map(|dir| read_csv::<MetricsRecord>(&dir.join("metrics.csv")))
        .transpose()?;
    let ckpt_dir = out.join("ckpt");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let mut trainer = Trainer::new(cfg, corpus, init)?;
    let cfg_path = out.join("config.txt");
    fs::write(&cfg_path, trainer.config().to_text()).map_err(|e| Error::io(&cfg_path, e))?;

    let result = trainer.fit(|t, rec| {
        let ck = t.checkpoint(super::EvalResult {
            loss: rec.valid_loss,
            accuracy: rec.valid_accuracy,
            positions: 0,
        });
        ck.save(&ckpt_dir.join(ckpt_name(rec.epoch)))
    });
    // logs are written even when training aborted
    write_logs(&trainer, out)?;
    result?;

    let history = trainer.history();
    let avg = if history.is_empty() {
        let valid = trainer.evaluate_on(None, "valid")?;
        trainer.checkpoint(valid)
    } else {
        let mut ranked: Vec<&MetricsRecord> = history.iter().collect();
        ranked.sort_by(|a, b| {
            a.valid_loss
                .total_cmp(&b.valid_loss)
                .then(a.epoch.cmp(&b.epoch))
        });
        ranked.truncate(trainer.config().train.avg_best);
        ranked.sort_by_key(|r| r.epoch);
        let paths: Vec<PathBuf> = ranked
            .iter()
            .map(|r| ckpt_dir.join(ckpt_name(r.epoch)))
            .collect();
        let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
        let mut avg = average_checkpoint_files(&refs)?;
        let valid = trainer.evaluate_on(Some(&avg.params), "valid")?;
        avg.meta.valid_loss = valid.loss;
        avg.meta.valid_accuracy = valid.accuracy;
        avg
    };
    avg.save(&out.join("avg10.ckpt"))?;
    let test = trainer.evaluate_on(Some(&avg.params), "test")?;

    let (lo, hi) = trainer.unit_range();
    let comparison = match (baseline, &baseline_metrics) {
        (Some(dir), Some(b)) => Some(baseline_comparison(dir, b, history)?),
        _ => None,
    };
    let summary = RunSummary {
        fusion_mode: trainer.config().train.fusion_mode,
        config_hash: trainer.config().hash(),
        epochs_trained: trainer.epochs_done(),
        steps: trainer.step(),
        best_valid_accuracy: best_accuracy(history),
        epochs_to_best: epochs_to_best(history),
        avg_window_end: avg.meta.epoch,
        avg_source_epochs: avg.meta.source_epochs.clone(),
        avg_valid_loss: avg.meta.valid_loss,
        avg_valid_accuracy: avg.meta.valid_accuracy,
        test_loss: test.loss,
        test_accuracy: test.accuracy,
        unit_range: [lo, hi],
        noise_range: trainer.config().train.noise.map(|_| [lo, hi]),
        baseline: comparison,
    };
    let path = out.join("summary.json");
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

fn write_logs(trainer: &Trainer, out: &Path) -> Result<()> {
    write_csv(&out.join("metrics.csv"), trainer.history(), METRICS_HEADER)?;
    let grads: Vec<GradRow> = trainer.probes().iter().flat_map(|p| p.rows()).collect();
    write_csv(&out.join("grads.csv"), &grads, GRADS_HEADER)?;
    write_csv(&out.join("gates.csv"), trainer.gate_log(), GATES_HEADER)
}
