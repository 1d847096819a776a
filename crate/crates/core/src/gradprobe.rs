//! Per-view gradient probing, conflict statistics and deconfliction.
//!
//! A probe runs the backbone twice on the same frozen parameters, once
//! with only the fbank view and once with only the unit view, and
//! compares the two gradients of every shared weight matrix. The fbank
//! gradient is the "main" direction `a`, the unit gradient is `b`.
//!
//! When `cos(a, b) < 0` the unit gradient is corrected by removing its
//! component along `a`:
//!
//! ```text
//! deconflict(a, b) = b − (‖b‖ cosθ / ‖a‖) · a
//! ```
//!
//! which is the same as scaling `a` by `1 − ‖b‖ cosθ / ‖a‖` and adding
//! `b` unchanged. That scale is the gate target for `g_fbank`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datagen::Batch;
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, PROJ_FBANK};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Gradient statistics for one shared weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub name: String,
    /// `None` when either gradient is exactly zero.
    pub cos: Option<f64>,
    pub norm_fbank: f64,
    pub norm_unit: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSnapshot {
    pub grad_fbank: Vec<f64>,
    pub grad_unit: Vec<f64>,
    pub per_layer: Vec<LayerStat>,
    pub global_cos: Option<f64>,
    pub conflict_fraction: f64,
    pub step: usize,
    pub epoch: usize,
}

impl GradSnapshot {
    /// Builds a snapshot from two flattened gradients, split into named
    /// segments of the given lengths.
    pub fn from_flat(
        grad_fbank: Vec<f64>,
        grad_unit: Vec<f64>,
        segments: &[(String, usize)],
        step: usize,
        epoch: usize,
    ) -> Result<Self> {
        let total: usize = segments.iter().map(|(_, n)| n).sum();
        if grad_fbank.len() != total || grad_unit.len() != total {
            return Err(Error::Shape(format!(
                "segments cover {total} values, gradients have {} and {}",
                grad_fbank.len(),
                grad_unit.len()
            )));
        }
        let mut per_layer = Vec::with_capacity(segments.len());
        let mut off = 0;
        for (name, n) in segments {
            let a = &grad_fbank[off..off + n];
            let b = &grad_unit[off..off + n];
            per_layer.push(LayerStat {
                name: name.clone(),
                cos: cosine(a, b),
                norm_fbank: norm(a),
                norm_unit: norm(b),
            });
            off += n;
        }
        let defined: Vec<f64> = per_layer.iter().filter_map(|l| l.cos).collect();
        let conflict_fraction = if defined.is_empty() {
            0.0
        } else {
            defined.iter().filter(|&&c| c < 0.0).count() as f64 / defined.len() as f64
        };
        Ok(Self {
            global_cos: cosine(&grad_fbank, &grad_unit),
            grad_fbank,
            grad_unit,
            per_layer,
            conflict_fraction,
            step,
            epoch,
        })
    }

    pub fn norm_fbank(&self) -> f64 {
        norm(&self.grad_fbank)
    }

    pub fn norm_unit(&self) -> f64 {
        norm(&self.grad_unit)
    }
}

/// Loss used by a probe pass.
#[derive(Clone, Debug)]
pub enum ProbeLoss {
    /// Label-smoothed cross-entropy against the batch targets.
    CrossEntropy { smoothing: f64 },
    /// `sum(c ∘ logits)` for a fixed `[N×V]` coefficient matrix.
    Linear(Tensor),
}

/// Gradients of every parameter with only one view as input.
pub fn single_view_gradients(
    params: &ParamSet,
    cfg: &ModelConfig,
    x_raw: &Tensor,
    proj: &str,
    targets: &[usize],
    loss: &ProbeLoss,
) -> Result<ParamSet> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x = tape.input(x_raw.clone());
    let h = model::project(&mut tape, &bound, proj, x)?;
    let logits = model::forward(&mut tape, &bound, cfg, h)?;
    let l = match loss {
        ProbeLoss::CrossEntropy { smoothing } => {
            model::task_loss(&mut tape, logits, targets, *smoothing)?
        }
        ProbeLoss::Linear(c) => {
            let cv = tape.input(c.clone());
            let prod = tape.hadamard(logits, cv)?;
            tape.sum(prod)
        }
    };
    let grads = tape.backward(l)?;
    Ok(params.collect_grads(&grads))
}

/// Two frozen-parameter passes (fbank only, unit only) and the
/// statistics comparing them. `params` is not modified.
pub fn per_view_gradients(
    params: &ParamSet,
    batch: &Batch,
    cfg: &ModelConfig,
    loss: &ProbeLoss,
    step: usize,
    epoch: usize,
) -> Result<GradSnapshot> {
    let (gf, gu) = rayon::join(
        || {
            single_view_gradients(
                params,
                cfg,
                &batch.x_fbank,
                PROJ_FBANK,
                &batch.targets,
                loss,
            )
        },
        || {
            single_view_gradients(
                params,
                cfg,
                &batch.x_unit,
                cfg.unit_projection_name(),
                &batch.targets,
                loss,
            )
        },
    );
    let (gf, gu) = (gf?, gu?);
    let names = cfg.shared_weight_names();
    let segments: Vec<(String, usize)> = names
        .iter()
        .map(|n| Ok((n.clone(), params.require(n)?.len())))
        .collect::<Result<_>>()?;
    GradSnapshot::from_flat(
        gf.flatten(&names)?,
        gu.flatten(&names)?,
        &segments,
        step,
        epoch,
    )
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity clamped to `[-1, 1]`; `None` if either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Removes from `b` its component along `a`, whatever the sign of the
/// cosine.
pub fn deconflict(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    let aa = dot(a, a);
    if aa == 0.0 {
        return Err(Error::Degenerate(
            "deconflict: main gradient has zero norm".into(),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    // ‖b‖cosθ/‖a‖ = a·b / ‖a‖²
    let coef = dot(a, b) / aa;
    Ok(a.iter().zip(b).map(|(x, y)| y - coef * x).collect())
}

/// `a + b` without conflict, `a + deconflict(a, b)` otherwise.
pub fn corrected_gradient(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if norm(a) == 0.0 {
        return Err(Error::Degenerate(
            "corrected_gradient: main gradient has zero norm".into(),
        ));
    }
    match cosine(a, b) {
        Some(c) if c < 0.0 => {
            let d = deconflict(a, b)?;
            Ok(a.iter().zip(&d).map(|(x, y)| x + y).collect())
        }
        _ => Ok(a.iter().zip(b).map(|(x, y)| x + y).collect()),
    }
}

/// Regression target for `g_fbank`: one without conflict, otherwise
/// `1 − ‖b‖ cosθ / ‖a‖` from the global flattened gradients, clamped to
/// `[0, scale]`.
pub fn gate_target(snapshot: &GradSnapshot, scale: f64) -> f64 {
    let Some(cos) = snapshot.global_cos else {
        if snapshot.norm_fbank() == 0.0 {
            log::warn!(
                "step {}: fbank gradient is zero, gate target defaults to 1",
                snapshot.step
            );
        }
        return 1.0f64.min(scale);
    };
    if cos >= 0.0 {
        return 1.0f64.min(scale);
    }
    let t = 1.0 - snapshot.norm_unit() * cos / snapshot.norm_fbank();
    t.clamp(0.0, scale)
}

/// Per-epoch aggregate of probe statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConflictRow {
    pub epoch: usize,
    pub probes: usize,
    /// Mean over probes with a defined global cosine; `None` if there were none.
    pub mean_global_cos: Option<f64>,
    pub mean_conflict_fraction: f64,
    pub mean_gate_target: f64,
}

/// Groups snapshots by epoch and averages their statistics.
pub fn conflict_report(snapshots: &[GradSnapshot], gate_scale: f64) -> Vec<ConflictRow> {
    let mut by_epoch: BTreeMap<usize, Vec<&GradSnapshot>> = BTreeMap::new();
    for s in snapshots {
        by_epoch.entry(s.epoch).or_default().push(s);
    }
    by_epoch
        .into_iter()
        .map(|(epoch, group)| {
            let n = group.len() as f64;
            let cos: Vec<f64> = group.iter().filter_map(|s| s.global_cos).collect();
            ConflictRow {
                epoch,
                probes: group.len(),
                mean_global_cos: (!cos.is_empty())
                    .then(|| cos.iter().sum::<f64>() / cos.len() as f64),
                mean_conflict_fraction: group.iter().map(|s| s.conflict_fraction).sum::<f64>() / n,
                mean_gate_target: group
                    .iter()
                    .map(|s| gate_target(s, gate_scale))
                    .sum::<f64>()
                    / n,
            }
        })
        .collect()
}
