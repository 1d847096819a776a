//! Gradient-sensitive gating network.
//!
//! Each view gets a gate computed from *both* raw views:
//!
//! ```text
//! g = s · sigmoid(x_fbank·L1 + x_unit·L2 + bias)
//! ```
//!
//! and the projected views are fused as `g_fbank ∘ x_fbank + g_unit ∘ x_unit`.
//! The gate loss regresses `g_fbank` toward the target produced by
//! [`crate::gradprobe::gate_target`] and `g_unit` toward one.
//!
//! The concatenation baseline ([`concat_gate_fuse`]) lives here too, so
//! the two fusion modes share parameter initialization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateConfig {
    /// Activation scale `s`; gates live in `(0, s)`.
    pub scale: f64,
    /// Weight of the gate loss in the final objective.
    pub lambda: f64,
    /// Pin `g_unit` to exactly one instead of penalizing it toward one.
    pub hard_unit_gate: bool,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            scale: 2.0,
            lambda: 1.0,
            hard_unit_gate: false,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!(
                "gate scale must be > 0, got {}",
                self.scale
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "gate lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    Fbank,
    Unit,
}

impl GateKind {
    fn prefix(self) -> &'static str {
        match self {
            GateKind::Fbank => "gate.fbank",
            GateKind::Unit => "gate.unit",
        }
    }

    pub fn lin1(self) -> String {
        format!("{}.lin1", self.prefix())
    }

    pub fn lin2(self) -> String {
        format!("{}.lin2", self.prefix())
    }

    pub fn bias(self) -> String {
        format!("{}.bias", self.prefix())
    }
}

pub const CONCAT_W: &str = "concat.w";
pub const CONCAT_B: &str = "concat.b";

/// Gate and concat-baseline parameters.
///
/// Gate weights start small and gate biases at zero, so initial gates sit
/// at `s/2`. The concat weight starts as `[½I; ½I]` (view average).
pub fn init_fusion<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R, params: &mut ParamSet) {
    let d = cfg.hidden_dim;
    for kind in [GateKind::Fbank, GateKind::Unit] {
        params.push(
            kind.lin1(),
            Tensor::randn(
                &[cfg.fbank_dim, d],
                0.1 / (cfg.fbank_dim as f64).sqrt(),
                rng,
            ),
        );
        params.push(
            kind.lin2(),
            Tensor::randn(&[cfg.unit_dim, d], 0.1 / (cfg.unit_dim as f64).sqrt(), rng),
        );
        params.push(kind.bias(), Tensor::zeros(&[d]));
    }
    let mut w = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        w.data_mut()[i * d + i] = 0.5;
        w.data_mut()[(d + i) * d + i] = 0.5;
    }
    params.push(CONCAT_W, w);
    params.push(CONCAT_B, Tensor::zeros(&[d]));
}

/// Gate tensors on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub g_fbank: Var,
    pub g_unit: Var,
    pub scale: f64,
    /// `g_unit` is the constant one, not a function of the inputs.
    pub hard_unit: bool,
}

fn gate(tape: &mut Tape, bound: &Bound, kind: GateKind, xf: Var, xu: Var, s: f64) -> Result<Var> {
    let a = tape.matmul(xf, bound.get(&kind.lin1())?)?;
    let b = tape.matmul(xu, bound.get(&kind.lin2())?)?;
    let pre = tape.add(a, b)?;
    let pre = tape.add_bias(pre, bound.get(&kind.bias())?)?;
    let sig = tape.sigmoid(pre);
    Ok(if s == 1.0 { sig } else { tape.scale(sig, s) })
}

/// Computes both gates from the raw views `[T×D_f]` and `[T×D_u]`.
pub fn compute_gates(
    tape: &mut Tape,
    bound: &Bound,
    x_fbank: Var,
    x_unit: Var,
    cfg: &GateConfig,
) -> Result<GateOutput> {
    let tf = tape.value(x_fbank).dims2()?.0;
    let tu = tape.value(x_unit).dims2()?.0;
    if tf != tu {
        return Err(Error::Shape(format!(
            "view lengths differ: fbank {tf} rows, unit {tu} rows"
        )));
    }
    let g_fbank = gate(tape, bound, GateKind::Fbank, x_fbank, x_unit, cfg.scale)?;
    let g_unit = if cfg.hard_unit_gate {
        let shape = tape.value(g_fbank).shape().to_vec();
        tape.input(Tensor::ones(&shape))
    } else {
        gate(tape, bound, GateKind::Unit, x_fbank, x_unit, cfg.scale)?
    };
    Ok(GateOutput {
        g_fbank,
        g_unit,
        scale: cfg.scale,
        hard_unit: cfg.hard_unit_gate,
    })
}

/// `g_fbank ∘ x_fbank + g_unit ∘ x_unit` over projected `[T×D]` views.
pub fn fuse(tape: &mut Tape, gates: &GateOutput, x_fbank: Var, x_unit: Var) -> Result<Var> {
    let a = tape.hadamard(gates.g_fbank, x_fbank)?;
    let b = tape.hadamard(gates.g_unit, x_unit)?;
    tape.add(a, b)
}

/// Baseline fusion: `[x_fbank | x_unit]·W + b`, mapping `2D → D`.
pub fn concat_gate_fuse(tape: &mut Tape, bound: &Bound, x_fbank: Var, x_unit: Var) -> Result<Var> {
    let f = tape.value(x_fbank).shape().to_vec();
    let u = tape.value(x_unit).shape().to_vec();
    if f != u {
        return Err(Error::Shape(format!(
            "concat fuse shapes differ: {f:?} vs {u:?}"
        )));
    }
    let cat = tape.concat_cols(x_fbank, x_unit)?;
    let y = tape.matmul(cat, bound.get(CONCAT_W)?)?;
    tape.add_bias(y, bound.get(CONCAT_B)?)
}

/// `MSE(g_fbank, target) + MSE(g_unit, 1)`. With a hard unit gate the
/// second term is identically zero and is left off the tape.
pub fn gate_loss(tape: &mut Tape, gates: &GateOutput, target_fbank: f64) -> Result<Var> {
    let shape = tape.value(gates.g_fbank).shape().to_vec();
    let target = tape.input(Tensor::full(&shape, target_fbank));
    let lf = tape.mse(gates.g_fbank, target)?;
    if gates.hard_unit {
        return Ok(lf);
    }
    let ones = tape.input(Tensor::ones(tape.value(gates.g_unit).shape()));
    let lu = tape.mse(gates.g_unit, ones)?;
    tape.add(lf, lu)
}

/// `task + λ·gate` on a tape.
pub fn final_loss(tape: &mut Tape, task: Var, gate: Var, lambda: f64) -> Result<Var> {
    let g = if lambda == 1.0 {
        gate
    } else {
        tape.scale(gate, lambda)
    };
    tape.add(task, g)
}

/// Scalar form of [`final_loss`].
pub fn final_loss_value(task: f64, gate: f64, lambda: f64) -> f64 {
    task + lambda * gate
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            fbank_dim: 3,
            unit_dim: 2,
            ..ModelConfig::default()
        }
    }

    fn zero_gate_params() -> ParamSet {
        let mut p = ParamSet::new();
        init_fusion(&cfg(), &mut ChaCha8Rng::seed_from_u64(0), &mut p);
        let names: Vec<String> = p.names().map(String::from).collect();
        for n in names {
            if n.starts_with("gate.") {
                let shape = p.get(&n).unwrap().shape().to_vec();
                p.set(&n, Tensor::zeros(&shape)).unwrap();
            }
        }
        p
    }

    fn gates_for(p: &ParamSet, s: f64, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let xf = tape.input(Tensor::uniform(&[5, 3], -2.0, 2.0, &mut rng));
        let xu = tape.input(Tensor::uniform(&[5, 2], -2.0, 2.0, &mut rng));
        let gc = GateConfig {
            scale: s,
            ..GateConfig::default()
        };
        let g = compute_gates(&mut tape, &bound, xf, xu, &gc).unwrap();
        (tape.value(g.g_fbank).clone(), tape.value(g.g_unit).clone())
    }

    #[test]
    fn zero_params_give_half_scale() {
        let p = zero_gate_params();
        let (f, u) = gates_for(&p, 1.0, 1);
        assert!(f.data().iter().chain(u.data()).all(|&g| g == 0.5));
        let (f, u) = gates_for(&p, 2.0, 1);
        assert!(f.data().iter().chain(u.data()).all(|&g| g == 1.0));
    }

    #[test]
    fn random_gates_stay_inside_range() {
        let mut p = ParamSet::new();
        init_fusion(&cfg(), &mut ChaCha8Rng::seed_from_u64(9), &mut p);
        for s in [1.0, 2.0] {
            let (f, u) = gates_for(&p, s, 4);
            assert!(f.data().iter().chain(u.data()).all(|&g| g > 0.0 && g < s));
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let p = zero_gate_params();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let xf = tape.input(Tensor::zeros(&[5, 3]));
        let xu = tape.input(Tensor::zeros(&[4, 2]));
        assert!(compute_gates(&mut tape, &bound, xf, xu, &GateConfig::default()).is_err());
    }

    #[test]
    fn fuse_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let xf = tape.input(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let xu = tape.input(Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng));
        let one = tape.input(Tensor::ones(&[3, 4]));
        let zero = tape.input(Tensor::zeros(&[3, 4]));
        let half = tape.input(Tensor::full(&[3, 4], 0.5));
        let g = GateOutput {
            g_fbank: one,
            g_unit: zero,
            scale: 1.0,
            hard_unit: false,
        };
        let y = fuse(&mut tape, &g, xf, xu).unwrap();
        assert_eq!(tape.value(y), tape.value(xf));
        let g = GateOutput {
            g_fbank: half,
            g_unit: half,
            scale: 1.0,
            hard_unit: false,
        };
        let y = fuse(&mut tape, &g, xf, xu).unwrap();
        let mean = tape
            .value(xf)
            .zip_map(tape.value(xu), |a, b| 0.5 * a + 0.5 * b)
            .unwrap();
        assert_eq!(tape.value(y), &mean);
    }

    #[test]
    fn concat_identity_blocks() {
        let d = 4;
        let mut p = ParamSet::new();
        init_fusion(&cfg(), &mut ChaCha8Rng::seed_from_u64(0), &mut p);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xf_t = Tensor::uniform(&[3, d], -1.0, 1.0, &mut rng);
        let xu_t = Tensor::uniform(&[3, d], -1.0, 1.0, &mut rng);

        let mut top = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            top.data_mut()[i * d + i] = 1.0;
        }
        p.set(CONCAT_W, top.clone()).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let xf = tape.input(xf_t.clone());
        let xu = tape.input(xu_t.clone());
        let y = concat_gate_fuse(&mut tape, &bound, xf, xu).unwrap();
        assert_eq!(tape.value(y), &xf_t);

        let mut both = top;
        for i in 0..d {
            both.data_mut()[(d + i) * d + i] = 1.0;
        }
        p.set(CONCAT_W, both).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let xf = tape.input(xf_t.clone());
        let xu = tape.input(xu_t.clone());
        let y = concat_gate_fuse(&mut tape, &bound, xf, xu).unwrap();
        assert_eq!(tape.value(y), &xf_t.zip_map(&xu_t, |a, b| a + b).unwrap());
    }

    #[test]
    fn concat_grad_check() {
        let mut p = ParamSet::new();
        init_fusion(&cfg(), &mut ChaCha8Rng::seed_from_u64(3), &mut p);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xf = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let xu = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let err = grad_check_params(&p, |tape, bound| {
            let a = tape.input(xf.clone());
            let b = tape.input(xu.clone());
            let y = concat_gate_fuse(tape, bound, a, b)?;
            let y2 = tape.hadamard(y, y)?;
            Ok(tape.sum(y2))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn loss_with(gf: f64, gu: f64, target: f64) -> f64 {
        let mut tape = Tape::new();
        let f = tape.input(Tensor::full(&[2, 3], gf));
        let u = tape.input(Tensor::full(&[2, 3], gu));
        let g = GateOutput {
            g_fbank: f,
            g_unit: u,
            scale: 2.0,
            hard_unit: false,
        };
        let l = gate_loss(&mut tape, &g, target).unwrap();
        tape.scalar(l)
    }

    #[test]
    fn gate_loss_table() {
        assert_eq!(loss_with(1.3, 1.0, 1.3), 0.0);
        assert_eq!(loss_with(0.5, 1.0, 1.0), 0.25);
        assert_eq!(loss_with(1.0, 1.0, 1.5), 0.25);
        assert!(loss_with(0.7, 0.4, 1.1) > 0.0);
    }

    #[test]
    fn final_loss_is_weighted_sum() {
        assert_eq!(final_loss_value(2.0, 0.5, 1.0), 2.5);
        assert_eq!(final_loss_value(2.0, 0.5, 0.0), 2.0);
        assert_eq!(final_loss_value(1.0, 1.0, 2.0), 3.0);
        let mut tape = Tape::new();
        let t = tape.input(Tensor::scalar(2.0));
        let g = tape.input(Tensor::scalar(0.5));
        let l = final_loss(&mut tape, t, g, 1.0).unwrap();
        assert_eq!(tape.scalar(l), 2.5);
    }
}
