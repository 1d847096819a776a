//! Computes the two gates for a pair of views, fuses the projected views
//! and shows how the gate loss reacts to different `g_fbank` targets.
//!
//! cargo run --example gate_fusion

use mvfuse::autodiff::Tape;
use mvfuse::gsgn::{self, GateConfig};
use mvfuse::model::{self, ModelConfig};
use mvfuse::params::ParamSet;
use mvfuse::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.len() as f64
}

fn main() -> mvfuse::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = ModelConfig {
        hidden_dim: 8,
        fbank_dim: 6,
        unit_dim: 4,
        ..ModelConfig::default()
    };
    let mut params = ParamSet::new();
    model::init_backbone(&cfg, &mut rng, &mut params);
    gsgn::init_fusion(&cfg, &mut rng, &mut params);
    let gate_cfg = GateConfig::default();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let xf = tape.input(Tensor::randn(&[5, 6], 1.0, &mut rng));
    let xu = tape.input(Tensor::randn(&[5, 4], 1.0, &mut rng));
    let gates = gsgn::compute_gates(&mut tape, &bound, xf, xu, &gate_cfg)?;
    println!(
        "gate scale {}: mean g_fbank {:.4}, mean g_unit {:.4}",
        gate_cfg.scale,
        mean(tape.value(gates.g_fbank)),
        mean(tape.value(gates.g_unit))
    );

    let hf = model::project(&mut tape, &bound, model::PROJ_FBANK, xf)?;
    let hu = model::project(&mut tape, &bound, cfg.unit_projection_name(), xu)?;
    let fused = gsgn::fuse(&mut tape, &gates, hf, hu)?;
    println!("fused representation: {:?}", tape.value(fused).shape());

    for target in [0.5, 1.0, 1.5] {
        let l = gsgn::gate_loss(&mut tape, &gates, target)?;
        println!(
            "gate loss with g_fbank target {target}: {:.5}",
            tape.scalar(l)
        );
    }
    Ok(())
}
