//! Miniature residual encoder–decoder.
//!
//! Three stacks of residual blocks (acoustic encoder, textual encoder,
//! decoder) run position-wise over a `[N×D]` input, followed by the
//! output projection to `V` logits. Each block computes
//! `h ← F(h) + h` where `F(h) = h·W + b` in linear mode and
//! `F(h) = layer_norm(relu(h·W + b))` otherwise.
//!
//! Rows are positions, so a whole batch of sequences is processed as
//! one stacked matrix.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub acoustic_layers: usize,
    pub textual_layers: usize,
    pub decoder_layers: usize,
    pub vocab_size: usize,
    pub fbank_dim: usize,
    pub unit_dim: usize,
    /// Affine residual branch, no ReLU or layer norm.
    pub linear_mode: bool,
    pub residual: bool,
    /// Use the fbank input projection for both views. Needs equal view widths.
    pub tie_input_projections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            acoustic_layers: 4,
            textual_layers: 2,
            decoder_layers: 2,
            vocab_size: 16,
            fbank_dim: 16,
            unit_dim: 8,
            linear_mode: false,
            residual: true,
            tie_input_projections: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.acoustic_layers == 0 || self.textual_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("every layer count must be >= 1".into()));
        }
        if self.hidden_dim < 2 {
            return Err(Error::Config("hidden_dim must be >= 2".into()));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be >= 2".into()));
        }
        if self.fbank_dim == 0 || self.unit_dim == 0 {
            return Err(Error::Config("view widths must be positive".into()));
        }
        if self.tie_input_projections && self.fbank_dim != self.unit_dim {
            return Err(Error::Config(format!(
                "tied projections need equal view widths, got {} and {}",
                self.fbank_dim, self.unit_dim
            )));
        }
        Ok(())
    }

    /// Residual block names in forward order.
    pub fn block_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.acoustic_layers {
            out.push(format!("a_enc.{i}"));
        }
        for i in 0..self.textual_layers {
            out.push(format!("t_enc.{i}"));
        }
        for i in 0..self.decoder_layers {
            out.push(format!("dec.{i}"));
        }
        out
    }

    /// Weight matrices shared by both views: every block's `w` and the
    /// output projection. These are the tensors whose per-view gradients
    /// are compared.
    pub fn shared_weight_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .block_names()
            .into_iter()
            .map(|b| format!("{b}.w"))
            .collect();
        out.push(OUT_W.to_string());
        out
    }

    pub fn unit_projection_name(&self) -> &'static str {
        if self.tie_input_projections {
            PROJ_FBANK
        } else {
            PROJ_UNIT
        }
    }
}

pub const PROJ_FBANK: &str = "proj.fbank";
pub const PROJ_UNIT: &str = "proj.unit";
pub const OUT_W: &str = "out.w";

/// Fresh backbone parameters: input projections, residual blocks and
/// the output projection. Residual-branch weights start small so the
/// stack begins close to the identity.
pub fn init_backbone<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R, params: &mut ParamSet) {
    let d = cfg.hidden_dim;
    params.push(
        PROJ_FBANK,
        Tensor::randn(
            &[cfg.fbank_dim, d],
            1.0 / (cfg.fbank_dim as f64).sqrt(),
            rng,
        ),
    );
    params.push(
        PROJ_UNIT,
        Tensor::randn(&[cfg.unit_dim, d], 1.0 / (cfg.unit_dim as f64).sqrt(), rng),
    );
    let depth = cfg.block_names().len() as f64;
    for name in cfg.block_names() {
        params.push(
            format!("{name}.w"),
            Tensor::randn(&[d, d], 0.5 / (d as f64 * depth).sqrt(), rng),
        );
        params.push(format!("{name}.b"), Tensor::zeros(&[d]));
        if !cfg.linear_mode {
            params.push(format!("{name}.ln_gain"), Tensor::full(&[d], 0.1));
            params.push(format!("{name}.ln_bias"), Tensor::zeros(&[d]));
        }
    }
    params.push(
        OUT_W,
        Tensor::randn(&[d, cfg.vocab_size], 1.0 / (d as f64).sqrt(), rng),
    );
}

/// Projects a raw view `[N×D_view]` to the hidden width.
pub fn project(tape: &mut Tape, bound: &Bound, proj: &str, x: Var) -> Result<Var> {
    let p = bound.get(proj)?;
    tape.matmul(x, p)
}

/// Runs the residual stacks and output projection on an already fused
/// or projected `[N×D]` input, returning `[N×V]` logits.
pub fn forward(tape: &mut Tape, bound: &Bound, cfg: &ModelConfig, x: Var) -> Result<Var> {
    let (_, d) = tape.value(x).dims2()?;
    if d != cfg.hidden_dim {
        return Err(Error::Shape(format!(
            "input width {d} does not match hidden_dim {}",
            cfg.hidden_dim
        )));
    }
    let mut h = x;
    for name in cfg.block_names() {
        let w = bound.get(&format!("{name}.w"))?;
        let b = bound.get(&format!("{name}.b"))?;
        let pre = tape.matmul(h, w)?;
        let pre = tape.add_bias(pre, b)?;
        let branch = if cfg.linear_mode {
            pre
        } else {
            let gain = bound.get(&format!("{name}.ln_gain"))?;
            let bias = bound.get(&format!("{name}.ln_bias"))?;
            let r = tape.relu(pre);
            tape.layer_norm(r, gain, bias)?
        };
        h = if cfg.residual {
            tape.add(branch, h)?
        } else {
            branch
        };
    }
    let w_out = bound.get(OUT_W)?;
    tape.matmul(h, w_out)
}

/// Label-smoothed cross-entropy over the logits.
pub fn task_loss(tape: &mut Tape, logits: Var, targets: &[usize], smoothing: f64) -> Result<Var> {
    tape.softmax_cross_entropy(logits, targets, smoothing)
}

/// Per-row argmax; the lowest index wins ties.
pub fn greedy_decode(logits: &Tensor) -> Vec<usize> {
    let v = logits.last_dim();
    logits
        .data()
        .chunks(v)
        .map(|row| {
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg(linear: bool) -> ModelConfig {
        ModelConfig {
            hidden_dim: 4,
            acoustic_layers: 2,
            textual_layers: 1,
            decoder_layers: 1,
            vocab_size: 3,
            fbank_dim: 3,
            unit_dim: 2,
            linear_mode: linear,
            ..ModelConfig::default()
        }
    }

    fn logits_for(params: &ParamSet, cfg: &ModelConfig, x: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let xv = tape.input(x.clone());
        let l = forward(&mut tape, &bound, cfg, xv).unwrap();
        tape.value(l).clone()
    }

    #[test]
    fn zero_residual_branch_is_pure_shortcut() {
        let cfg = ModelConfig {
            linear_mode: true,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut params = ParamSet::new();
        init_backbone(&cfg, &mut rng, &mut params);
        for name in cfg.block_names() {
            params
                .set(&format!("{name}.w"), Tensor::zeros(&[32, 32]))
                .unwrap();
        }
        let mut w_out = Tensor::zeros(&[32, 16]);
        for i in 0..16 {
            w_out.data_mut()[i * 16 + i] = 1.0;
        }
        params.set(OUT_W, w_out).unwrap();
        let x = Tensor::uniform(&[5, 32], -1.0, 1.0, &mut rng);
        let logits = logits_for(&params, &cfg, &x);
        for i in 0..5 {
            assert_eq!(logits.row(i), &x.row(i)[..16]);
        }
    }

    #[test]
    fn depth_one_linear_expansion() {
        let cfg = ModelConfig {
            hidden_dim: 3,
            acoustic_layers: 1,
            textual_layers: 1,
            decoder_layers: 1,
            vocab_size: 2,
            linear_mode: true,
            ..ModelConfig::default()
        };
        // Only the first block is active; the others are zeroed.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamSet::new();
        init_backbone(&cfg, &mut rng, &mut params);
        params.set("t_enc.0.w", Tensor::zeros(&[3, 3])).unwrap();
        params.set("dec.0.w", Tensor::zeros(&[3, 3])).unwrap();
        let b1 = Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap();
        params.set("a_enc.0.b", b1.clone()).unwrap();
        let x = Tensor::uniform(&[4, 3], -1.0, 1.0, &mut rng);
        let logits = logits_for(&params, &cfg, &x);

        let w1 = params.get("a_enc.0.w").unwrap();
        let w_out = params.get(OUT_W).unwrap();
        let mut h = x.matmul(w1).unwrap();
        for (i, v) in h.data_mut().iter_mut().enumerate() {
            *v += b1.data()[i % 3] + x.data()[i];
        }
        let expect = h.matmul(w_out).unwrap();
        for (a, b) in logits.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let cfg = small_cfg(true);
        let mut params = ParamSet::new();
        init_backbone(&cfg, &mut ChaCha8Rng::seed_from_u64(0), &mut params);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.input(Tensor::zeros(&[2, 5]));
        assert!(forward(&mut tape, &bound, &cfg, x).is_err());
    }

    #[test]
    fn full_mode_grad_check() {
        let cfg = small_cfg(false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut params = ParamSet::new();
        init_backbone(&cfg, &mut rng, &mut params);
        let x = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let targets = vec![0, 2, 1];
        let err = grad_check_params(&params, |tape, bound| {
            let xv = tape.input(x.clone());
            let l = forward(tape, bound, &cfg, xv)?;
            task_loss(tape, l, &targets, 0.1)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn greedy_decode_ties_and_argmax() {
        let l = Tensor::from_rows(&[vec![0.0, 0.0, 0.0, 5.0], vec![1.0, 2.0, 2.0, 0.0]]).unwrap();
        assert_eq!(greedy_decode(&l), vec![3, 1]);
    }
}
