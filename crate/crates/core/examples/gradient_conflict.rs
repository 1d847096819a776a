//! Probes the per-view gradients of an untrained model on one batch,
//! then shows deconfliction on a hand-made conflicting pair.
//!
//! cargo run --example gradient_conflict

use mvfuse::datagen::{generate_corpus, Batch, CorpusSpec};
use mvfuse::gradprobe::{self, corrected_gradient, cosine, deconflict, dot, ProbeLoss};
use mvfuse::model::{self, ModelConfig};
use mvfuse::params::ParamSet;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mvfuse::Result<()> {
    let corpus = generate_corpus(&CorpusSpec {
        n_train: 64,
        n_valid: 8,
        n_test: 8,
        ..CorpusSpec::default()
    })?;
    let cfg = ModelConfig {
        fbank_dim: corpus.fbank_dim(),
        unit_dim: corpus.unit_dim(),
        vocab_size: corpus.spec.vocab_size,
        ..ModelConfig::default()
    };
    let mut params = ParamSet::new();
    model::init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut params);

    let batch_refs: Vec<_> = corpus.train.iter().take(16).collect();
    let batch = Batch::from_examples(&batch_refs)?;
    let snap = gradprobe::per_view_gradients(
        &params,
        &batch,
        &cfg,
        &ProbeLoss::CrossEntropy { smoothing: 0.1 },
        0,
        0,
    )?;
    println!(
        "{:<16} {:>8} {:>10} {:>10}",
        "layer", "cos", "|g_fbank|", "|g_unit|"
    );
    for l in &snap.per_layer {
        let cos = l.cos.map_or("-".to_string(), |c| format!("{c:.3}"));
        println!(
            "{:<16} {:>8} {:>10.4} {:>10.4}",
            l.name, cos, l.norm_fbank, l.norm_unit
        );
    }
    println!(
        "global cos {:?}, conflicting layers {:.0}%, gate target {:.3}",
        snap.global_cos,
        100.0 * snap.conflict_fraction,
        gradprobe::gate_target(&snap, 2.0)
    );

    let a = [1.0, 0.0, 0.5];
    let b = [-0.8, 0.6, 0.0];
    let d = deconflict(&a, &b)?;
    let g = corrected_gradient(&a, &b)?;
    println!("cos(a, b) = {:.3}", cosine(&a, &b).unwrap());
    println!("deconflicted b = {d:.3?}, a·b' = {:.1e}", dot(&a, &d));
    println!("corrected sum  = {g:.3?}");
    Ok(())
}
