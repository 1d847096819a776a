//! Trains a single-view baseline and the gated two-view model on the same
//! corpus and compares their validation curves.
//!
//! cargo run --release --example train_compare [epochs]

use mvfuse::config::{FusionMode, RunConfig};
use mvfuse::datagen::{generate_corpus, CorpusSpec};
use mvfuse::trainer::run_training;

fn main() -> mvfuse::Result<()> {
    let epochs = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(12);
    let spec = CorpusSpec {
        n_train: 600,
        n_valid: 100,
        n_test: 100,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec)?;
    let dir = tempfile::tempdir().map_err(|e| mvfuse::Error::io(std::env::temp_dir(), e))?;

    let mut cfg = RunConfig::default();
    cfg.train.max_epochs = epochs;
    let base_dir = dir.path().join("fbank_only");
    cfg.train.fusion_mode = FusionMode::FbankOnly;
    let base = run_training(cfg.clone(), corpus.clone(), &base_dir, None, None)?;

    cfg.train.fusion_mode = FusionMode::Gsgn;
    let gsgn = run_training(cfg, corpus, &dir.path().join("gsgn"), None, Some(&base_dir))?;

    for s in [&base, &gsgn] {
        println!(
            "{:<10} best valid acc {:.4} at epoch {:?}, averaged test acc {:.4}",
            s.fusion_mode.as_str(),
            s.best_valid_accuracy.unwrap_or(f64::NAN),
            s.epochs_to_best,
            s.test_accuracy
        );
    }
    if let Some(b) = &gsgn.baseline {
        println!(
            "epochs to best: {} vs {} (ratio {:.2}); epochs to {:.3}: {} vs {:?} (ratio {:.2})",
            b.baseline_epochs_to_best,
            b.epochs_to_best,
            b.speedup_ratio,
            b.level,
            b.baseline_epochs_to_level,
            b.epochs_to_level,
            b.speedup_at_level
        );
    }
    Ok(())
}
