//! Trains a few epochs, averages the last per-epoch checkpoints by hand
//! and compares the average with each source checkpoint on validation.
//!
//! cargo run --release --example checkpoint_averaging

use std::path::PathBuf;

use mvfuse::config::RunConfig;
use mvfuse::datagen::{generate_corpus, CorpusSpec};
use mvfuse::trainer::{
    average_checkpoint_files, evaluate, run_training, Checkpoint, EvalMode, Net,
};

fn main() -> mvfuse::Result<()> {
    let corpus = generate_corpus(&CorpusSpec {
        n_train: 600,
        n_valid: 100,
        n_test: 100,
        ..CorpusSpec::default()
    })?;
    let dir = tempfile::tempdir().map_err(|e| mvfuse::Error::io(std::env::temp_dir(), e))?;
    let mut cfg = RunConfig::default();
    cfg.train.max_epochs = 12;
    cfg.train.avg_best = 3;
    let summary = run_training(cfg, corpus.clone(), dir.path(), None, None)?;
    println!(
        "run averaged epochs {:?}: valid acc {:.4}",
        summary.avg_source_epochs, summary.avg_valid_accuracy
    );

    let paths: Vec<PathBuf> = (10..=12)
        .map(|e| dir.path().join(format!("ckpt/epoch_{e:03}.ckpt")))
        .collect();
    let refs: Vec<&std::path::Path> = paths.iter().map(PathBuf::as_path).collect();
    let avg = average_checkpoint_files(&refs)?;

    let score = |ck: &Checkpoint| -> mvfuse::Result<f64> {
        let net = Net {
            model: &ck.meta.model,
            gate: &ck.meta.config.gsgn,
            mode: ck.meta.config.train.fusion_mode,
        };
        let r = evaluate(
            &ck.params,
            &net,
            &corpus.valid,
            32,
            EvalMode::Deterministic,
            &ck.meta.config.schedule.stages,
        )?;
        Ok(r.accuracy)
    };
    for p in &paths {
        let ck = Checkpoint::load(p)?;
        println!("epoch {}: valid acc {:.4}", ck.meta.epoch, score(&ck)?);
    }
    println!(
        "average of last three epochs {:?}: valid acc {:.4}",
        avg.meta.source_epochs,
        score(&avg)?
    );
    Ok(())
}
