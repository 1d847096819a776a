//! Noise ablation: a baseline with uniform noise added to its input, and
//! the gated model with its unit view replaced by uniform noise.
//!
//! cargo run --release --example noise_ablation

use mvfuse::config::{FusionMode, NoiseMode, RunConfig};
use mvfuse::datagen::{generate_corpus, CorpusSpec};
use mvfuse::trainer::run_training;

fn main() -> mvfuse::Result<()> {
    let corpus = generate_corpus(&CorpusSpec {
        n_train: 600,
        n_valid: 100,
        n_test: 100,
        ..CorpusSpec::default()
    })?;
    let dir = tempfile::tempdir().map_err(|e| mvfuse::Error::io(std::env::temp_dir(), e))?;
    let runs = [
        ("fbank_only", FusionMode::FbankOnly, None),
        (
            "fbank_only + sum",
            FusionMode::FbankOnly,
            Some(NoiseMode::Sum),
        ),
        ("gsgn", FusionMode::Gsgn, None),
        ("gsgn + replace", FusionMode::Gsgn, Some(NoiseMode::Replace)),
    ];
    for (i, (label, mode, noise)) in runs.into_iter().enumerate() {
        let mut cfg = RunConfig::default();
        cfg.train.max_epochs = 12;
        cfg.train.fusion_mode = mode;
        cfg.train.noise = noise;
        let s = run_training(
            cfg,
            corpus.clone(),
            &dir.path().join(i.to_string()),
            None,
            None,
        )?;
        let range = s
            .noise_range
            .map_or("-".into(), |[lo, hi]| format!("[{lo:.2}, {hi:.2}]"));
        println!(
            "{label:<18} noise {range:<16} test acc {:.4}",
            s.test_accuracy
        );
    }
    Ok(())
}
