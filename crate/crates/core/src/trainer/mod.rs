//! Training loop.
//!
//! A [`Trainer`] owns the parameters, the optimizer state and a single
//! seeded random stream. Within an epoch the stream is consumed in a fixed
//! order: the shuffle first, then for every batch the branch draw(s)
//! followed by any input noise. Probing and evaluation never touch it, so
//! their internal parallelism cannot change results.
//!
//! Epoch indices passed to the stage schedule are zero-based (the first
//! pass over the data is epoch 0). Everything written to disk counts
//! completed passes, so the first record carries `epoch = 1`.

pub mod adam;
pub mod checkpoint;
pub mod metrics;
mod run;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::branch::{sample_branch, Branch, StageSchedule};
use crate::config::{FusionMode, NoiseMode, RunConfig};
use crate::datagen::{self, Batch, Corpus, MultiViewExample};
use crate::error::{Error, Result};
use crate::gradprobe::{self, ProbeLoss};
use crate::gsgn::{self, GateConfig, GateOutput};
use crate::model::{self, ModelConfig, PROJ_FBANK};
use crate::params::{Bound, ParamSet};
use crate::tensor::Tensor;

pub use adam::{adam_step, learning_rate, AdamState};
pub use checkpoint::{average_checkpoint_files, average_checkpoints, Checkpoint, CheckpointMeta};
pub use metrics::{GateRecord, GradRow, MetricsRecord, ProbeRecord};
pub use run::{baseline_comparison, run_training, BaselineComparison, RunSummary};

/// The pieces of configuration needed to run the network forward.
#[derive(Clone, Copy, Debug)]
pub struct Net<'a> {
    pub model: &'a ModelConfig,
    pub gate: &'a GateConfig,
    pub mode: FusionMode,
}

impl Net<'_> {
    fn multi_view(&self) -> bool {
        matches!(self.mode, FusionMode::Gsgn | FusionMode::Concat)
    }

    fn fixed_branch(&self) -> Option<Branch> {
        match self.mode {
            FusionMode::FbankOnly => Some(Branch::Fbank),
            FusionMode::UnitOnly => Some(Branch::Unit),
            FusionMode::Gsgn | FusionMode::Concat => None,
        }
    }
}

/// Which input each row of a batch receives.
#[derive(Clone, Debug, PartialEq)]
pub enum Route {
    All(Branch),
    /// One branch per row.
    PerRow(Vec<Branch>),
}

pub struct ForwardOut {
    pub logits: Var,
    /// Present when the gated fusion ran on at least one row.
    pub gates: Option<GateOutput>,
    /// `[N×D]` indicator of fusion rows for a mixed route.
    pub fusion_mask: Option<Tensor>,
}

fn fused_input(
    tape: &mut Tape,
    bound: &Bound,
    net: &Net,
    xf: Var,
    xu: Var,
    pf: Var,
    pu: Var,
) -> Result<(Var, Option<GateOutput>)> {
    match net.mode {
        FusionMode::Gsgn => {
            let g = gsgn::compute_gates(tape, bound, xf, xu, net.gate)?;
            Ok((gsgn::fuse(tape, &g, pf, pu)?, Some(g)))
        }
        FusionMode::Concat => Ok((gsgn::concat_gate_fuse(tape, bound, pf, pu)?, None)),
        _ => Err(Error::Config(format!(
            "fusion branch requested in {} mode",
            net.mode
        ))),
    }
}

fn row_mask(branches: &[Branch], want: Branch, d: usize) -> Tensor {
    let mut m = Tensor::zeros(&[branches.len(), d]);
    for (i, &b) in branches.iter().enumerate() {
        if b == want {
            m.data_mut()[i * d..(i + 1) * d].fill(1.0);
        }
    }
    m
}

/// Builds the logits for raw views `x_fbank [N×D_f]`, `x_unit [N×D_u]`.
pub fn forward_batch(
    tape: &mut Tape,
    bound: &Bound,
    net: &Net,
    x_fbank: &Tensor,
    x_unit: &Tensor,
    route: &Route,
) -> Result<ForwardOut> {
    let xf = tape.input(x_fbank.clone());
    let xu = tape.input(x_unit.clone());
    let unit_proj = net.model.unit_projection_name();
    let (h, gates, fusion_mask) = match route {
        Route::All(Branch::Fbank) => (model::project(tape, bound, PROJ_FBANK, xf)?, None, None),
        Route::All(Branch::Unit) => (model::project(tape, bound, unit_proj, xu)?, None, None),
        Route::All(Branch::Fusion) => {
            let pf = model::project(tape, bound, PROJ_FBANK, xf)?;
            let pu = model::project(tape, bound, unit_proj, xu)?;
            let (h, g) = fused_input(tape, bound, net, xf, xu, pf, pu)?;
            (h, g, None)
        }
        Route::PerRow(branches) => {
            let n = x_fbank.dims2()?.0;
            if branches.len() != n {
                return Err(Error::Shape(format!(
                    "route has {} rows, batch has {n}",
                    branches.len()
                )));
            }
            let d = net.model.hidden_dim;
            let pf = model::project(tape, bound, PROJ_FBANK, xf)?;
            let pu = model::project(tape, bound, unit_proj, xu)?;
            let mut parts = Vec::new();
            let mut gates = None;
            let mut fusion_mask = None;
            for (branch, x) in [(Branch::Fbank, pf), (Branch::Unit, pu)] {
                if branches.contains(&branch) {
                    let m = tape.input(row_mask(branches, branch, d));
                    parts.push(tape.hadamard(m, x)?);
                }
            }
            if branches.contains(&Branch::Fusion) {
                let (fused, g) = fused_input(tape, bound, net, xf, xu, pf, pu)?;
                let mask = row_mask(branches, Branch::Fusion, d);
                let m = tape.input(mask.clone());
                parts.push(tape.hadamard(m, fused)?);
                gates = g;
                fusion_mask = Some(mask);
            }
            let mut h = parts[0];
            for &p in &parts[1..] {
                h = tape.add(h, p)?;
            }
            (h, gates, fusion_mask)
        }
    };
    let logits = model::forward(tape, bound, net.model, h)?;
    Ok(ForwardOut {
        logits,
        gates,
        fusion_mask,
    })
}

/// Gate regression loss restricted to the rows in `mask` (all rows when
/// `mask` is `None`), normalized by the number of fusion elements.
pub fn masked_gate_loss(
    tape: &mut Tape,
    gates: &GateOutput,
    target_fbank: f64,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let Some(mask) = mask else {
        return gsgn::gate_loss(tape, gates, target_fbank);
    };
    let active = mask.sum();
    if active == 0.0 {
        return Err(Error::Degenerate("gate loss over zero fusion rows".into()));
    }
    let rescale = mask.len() as f64 / active;
    let m = tape.input(mask.clone());
    let gf = tape.hadamard(gates.g_fbank, m)?;
    let tf = tape.input(mask.map(|v| v * target_fbank));
    let lf = tape.mse(gf, tf)?;
    let total = if gates.hard_unit {
        lf
    } else {
        let gu = tape.hadamard(gates.g_unit, m)?;
        let tu = tape.input(mask.clone());
        let lu = tape.mse(gu, tu)?;
        tape.add(lf, lu)?
    };
    Ok(tape.scale(total, rescale))
}

/// Evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    /// Single-view models use their view; multi-view models always fuse.
    Deterministic,
    /// Branches drawn per batch from the last stage's thresholds.
    PaperInference { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Mean unsmoothed cross-entropy per position.
    pub loss: f64,
    /// Fraction of positions whose greedy prediction equals the target.
    pub accuracy: f64,
    pub positions: usize,
}

/// Greedy-decoding loss and token accuracy over `examples`.
pub fn evaluate(
    params: &ParamSet,
    net: &Net,
    examples: &[MultiViewExample],
    batch_size: usize,
    mode: EvalMode,
    schedule: &StageSchedule,
) -> Result<EvalResult> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let chunks: Vec<&[MultiViewExample]> = examples.chunks(batch_size).collect();
    let routes: Vec<Branch> = match (net.fixed_branch(), mode) {
        (Some(b), _) => vec![b; chunks.len()],
        (None, EvalMode::Deterministic) => vec![Branch::Fusion; chunks.len()],
        (None, EvalMode::PaperInference { seed }) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = schedule.last();
            (0..chunks.len())
                .map(|_| sample_branch(rng.random::<f64>(), t))
                .collect::<Result<_>>()?
        }
    };
    let parts: Vec<(f64, usize, usize)> = chunks
        .par_iter()
        .zip(routes.par_iter())
        .map(|(chunk, &branch)| {
            let refs: Vec<&MultiViewExample> = chunk.iter().collect();
            let batch = Batch::from_examples(&refs)?;
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let out = forward_batch(
                &mut tape,
                &bound,
                net,
                &batch.x_fbank,
                &batch.x_unit,
                &Route::All(branch),
            )?;
            let loss = model::task_loss(&mut tape, out.logits, &batch.targets, 0.0)?;
            let pred = model::greedy_decode(tape.value(out.logits));
            let correct = pred
                .iter()
                .zip(&batch.targets)
                .filter(|(p, t)| p == t)
                .count();
            Ok((
                tape.scalar(loss) * batch.rows() as f64,
                correct,
                batch.rows(),
            ))
        })
        .collect::<Result<_>>()?;
    let (mut loss, mut correct, mut positions) = (0.0, 0, 0);
    for (l, c, n) in parts {
        loss += l;
        correct += c;
        positions += n;
    }
    if positions == 0 {
        return Ok(EvalResult {
            loss: 0.0,
            accuracy: 0.0,
            positions: 0,
        });
    }
    Ok(EvalResult {
        loss: loss / positions as f64,
        accuracy: correct as f64 / positions as f64,
        positions,
    })
}

/// True once the best validation loss is `patience` or more epochs old.
pub fn early_stop(valid_losses: &[f64], patience: usize) -> bool {
    let Some(best) = best_index(valid_losses, |a, b| a < b) else {
        return false;
    };
    valid_losses.len() - 1 - best >= patience
}

/// Index of the first element that no later element beats under `better`.
fn best_index(xs: &[f64], better: impl Fn(f64, f64) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        if best.is_none_or(|b| better(x, xs[b])) {
            best = Some(i);
        }
    }
    best
}

/// One-based epoch with the highest validation accuracy (first on ties).
pub fn epochs_to_best(history: &[MetricsRecord]) -> Option<usize> {
    let acc: Vec<f64> = history.iter().map(|r| r.valid_accuracy).collect();
    best_index(&acc, |a, b| a > b).map(|i| history[i].epoch)
}

/// First one-based epoch whose validation accuracy reaches `level`.
pub fn epochs_to_reach(history: &[MetricsRecord], level: f64) -> Option<usize> {
    history
        .iter()
        .find(|r| r.valid_accuracy >= level)
        .map(|r| r.epoch)
}

pub fn best_accuracy(history: &[MetricsRecord]) -> Option<f64> {
    history.iter().map(|r| r.valid_accuracy).reduce(f64::max)
}

/// Initial parameters for every mode. Gate and concat parameters are
/// always present so that checkpoints share one layout across modes.
pub fn init_params(model: &ModelConfig, rng: &mut impl Rng) -> ParamSet {
    let mut params = ParamSet::new();
    model::init_backbone(model, rng, &mut params);
    gsgn::init_fusion(model, rng, &mut params);
    params
}

#[derive(Default)]
struct GateAccum {
    sum_f: f64,
    sum_u: f64,
    n: usize,
}

pub struct Trainer {
    cfg: RunConfig,
    model: ModelConfig,
    train: Vec<MultiViewExample>,
    valid: Vec<MultiViewExample>,
    test: Vec<MultiViewExample>,
    unit_range: (f64, f64),
    params: ParamSet,
    adam: AdamState,
    rng: ChaCha8Rng,
    step: usize,
    epochs_done: usize,
    gate_target: f64,
    history: Vec<MetricsRecord>,
    probes: Vec<ProbeRecord>,
    gate_log: Vec<GateRecord>,
}

impl Trainer {
    /// Prepares a run on `corpus`. The config's data section is replaced
    /// by the corpus's own spec. With `init`, training resumes from that
    /// checkpoint's parameters (fresh optimizer state).
    pub fn new(mut cfg: RunConfig, corpus: Corpus, init: Option<&Checkpoint>) -> Result<Self> {
        cfg.data = corpus.spec.clone();
        cfg.validate()?;
        let model = cfg.model.resolve(
            corpus.fbank_dim(),
            corpus.unit_dim(),
            corpus.spec.vocab_size,
        );
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let mut params = init_params(&model, &mut rng);
        if let Some(ck) = init {
            if ck.meta.model != model || !ck.params.same_layout(&params) {
                return Err(Error::Incompatible(
                    "initial checkpoint does not match the model layout".into(),
                ));
            }
            params = ck.params.clone();
        }
        let unit_range = datagen::unit_range(&corpus.train);
        let Corpus {
            mut train,
            mut valid,
            mut test,
            ..
        } = corpus;
        if cfg.train.noise == Some(NoiseMode::Replace) {
            for part in [&mut train, &mut valid, &mut test] {
                for e in part.iter_mut() {
                    *e = datagen::noise_replace(e, unit_range, &mut rng)?;
                }
            }
        }
        Ok(Self {
            adam: AdamState::new(&params),
            cfg,
            model,
            train,
            valid,
            test,
            unit_range,
            params,
            rng,
            step: 0,
            epochs_done: 0,
            gate_target: 1.0,
            history: Vec::new(),
            probes: Vec::new(),
            gate_log: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &ModelConfig {
        &self.model
    }

    pub fn net(&self) -> Net<'_> {
        Net {
            model: &self.model,
            gate: &self.cfg.gsgn,
            mode: self.cfg.train.fusion_mode,
        }
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn gate_target(&self) -> f64 {
        self.gate_target
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn probes(&self) -> &[ProbeRecord] {
        &self.probes
    }

    pub fn gate_log(&self) -> &[GateRecord] {
        &self.gate_log
    }

    /// Training-partition `(min, max)` of the unit view, as used for
    /// noise ablations.
    pub fn unit_range(&self) -> (f64, f64) {
        self.unit_range
    }

    pub fn partition(&self, name: &str) -> Result<&[MultiViewExample]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown partition {other}"))),
        }
    }

    pub fn eval_mode(&self) -> EvalMode {
        if self.cfg.train.paper_inference {
            EvalMode::PaperInference {
                seed: self.cfg.train.seed,
            }
        } else {
            EvalMode::Deterministic
        }
    }

    /// Evaluates `params` (or the current parameters) on a partition.
    pub fn evaluate_on(&self, params: Option<&ParamSet>, partition: &str) -> Result<EvalResult> {
        evaluate(
            params.unwrap_or(&self.params),
            &self.net(),
            self.partition(partition)?,
            self.cfg.train.batch_size,
            self.eval_mode(),
            &self.cfg.schedule.stages,
        )
    }

    /// Checkpoint of the current parameters with the given metrics.
    pub fn checkpoint(&self, valid: EvalResult) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                config_hash: self.cfg.hash(),
                config: self.cfg.clone(),
                model: self.model.clone(),
                epoch: self.epochs_done,
                step: self.step,
                valid_loss: valid.loss,
                valid_accuracy: valid.accuracy,
                source_epochs: Vec::new(),
            },
            params: self.params.clone(),
        }
    }

    fn draw_route(&mut self, epoch_index: usize, batch: &Batch) -> Result<Route> {
        let net = self.net();
        if let Some(b) = net.fixed_branch() {
            return Ok(Route::All(b));
        }
        let t = self.cfg.schedule.stages.stage_for_epoch(epoch_index);
        if !self.cfg.train.per_example_sampling {
            return Ok(Route::All(sample_branch(self.rng.random::<f64>(), t)?));
        }
        let mut rows = Vec::with_capacity(batch.rows());
        for &(lo, hi) in &batch.spans {
            let b = sample_branch(self.rng.random::<f64>(), t)?;
            rows.extend(std::iter::repeat_n(b, hi - lo));
        }
        Ok(match rows.first() {
            Some(&first) if rows.iter().all(|&b| b == first) => Route::All(first),
            _ => Route::PerRow(rows),
        })
    }

    fn probe(&mut self, batch: &Batch, epoch: usize) -> Result<()> {
        let snap = gradprobe::per_view_gradients(
            &self.params,
            batch,
            &self.model,
            &ProbeLoss::CrossEntropy {
                smoothing: self.cfg.train.label_smoothing,
            },
            self.step,
            epoch,
        )?;
        if self.cfg.train.fusion_mode == FusionMode::Gsgn {
            self.gate_target = gradprobe::gate_target(&snap, self.cfg.gsgn.scale);
        }
        self.probes
            .push(ProbeRecord::from_snapshot(&snap, self.gate_target));
        Ok(())
    }

    fn non_finite(&self, batch_index: usize, what: &str) -> Error {
        let last = self.probes.last().map_or_else(
            || "no probe yet".to_string(),
            |p| {
                format!(
                    "last probe at step {}: global cos {:?}, norms {} / {}, gate target {}",
                    p.step, p.global_cos, p.norm_fbank, p.norm_unit, p.gate_target
                )
            },
        );
        Error::NonFinite {
            epoch: self.epochs_done + 1,
            batch: batch_index,
            detail: format!("{what} (step {}); {last}", self.step),
        }
    }

    /// One pass over the shuffled training partition followed by
    /// validation.
    pub fn train_epoch(&mut self) -> Result<MetricsRecord> {
        let start = Instant::now();
        let epoch_index = self.epochs_done;
        let epoch = epoch_index + 1;
        let tc = self.cfg.train.clone();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);

        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut gates = GateAccum::default();
        let probes_before = self.probes.len();

        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            self.step += 1;
            let refs: Vec<&MultiViewExample> = chunk.iter().map(|&i| &self.train[i]).collect();
            let mut batch = Batch::from_examples(&refs)?;
            let route = self.draw_route(epoch_index, &batch)?;
            if tc.noise == Some(NoiseMode::Sum) {
                let (lo, hi) = self.unit_range;
                for v in batch.x_fbank.data_mut() {
                    *v += lo + (hi - lo) * self.rng.random::<f64>();
                }
            }
            if tc.probe_every > 0
                && (self.step - 1).is_multiple_of(tc.probe_every)
                && self.net().multi_view()
            {
                self.probe(&batch, epoch)?;
            }

            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let net = self.net();
            let out = forward_batch(
                &mut tape,
                &bound,
                &net,
                &batch.x_fbank,
                &batch.x_unit,
                &route,
            )?;
            let task = model::task_loss(&mut tape, out.logits, &batch.targets, tc.label_smoothing)?;
            let loss = match (&out.gates, net.mode) {
                (Some(g), FusionMode::Gsgn) => {
                    let gl =
                        masked_gate_loss(&mut tape, g, self.gate_target, out.fusion_mask.as_ref())?;
                    gsgn::final_loss(&mut tape, task, gl, self.cfg.gsgn.lambda)?
                }
                _ => task,
            };
            let lv = tape.scalar(loss);
            if !lv.is_finite() {
                return Err(self.non_finite(bi, &format!("loss is {lv}")));
            }
            if let Some(g) = &out.gates {
                let rec = gate_record(
                    tape.value(g.g_fbank),
                    tape.value(g.g_unit),
                    out.fusion_mask.as_ref(),
                    self.step,
                    epoch,
                );
                gates.sum_f += rec.mean_g_fbank * rec.n_elements as f64;
                gates.sum_u += rec.mean_g_unit * rec.n_elements as f64;
                gates.n += rec.n_elements;
                self.gate_log.push(rec);
            }
            let grads = tape.backward(loss)?;
            let grads = self.params.collect_grads(&grads);
            if !grads.all_finite() {
                return Err(self.non_finite(bi, "gradient has non-finite entries"));
            }
            adam_step(&mut self.params, &grads, &mut self.adam, self.step, &tc)?;
            loss_sum += lv;
            batches += 1;
        }

        self.epochs_done += 1;
        let valid = self.evaluate_on(None, "valid")?;
        let new_probes = &self.probes[probes_before..];
        let conflict_fraction = (!new_probes.is_empty()).then(|| {
            new_probes.iter().map(|p| p.conflict_fraction).sum::<f64>() / new_probes.len() as f64
        });
        let (mean_g_fbank, mean_g_unit) = if gates.n > 0 {
            (
                Some(gates.sum_f / gates.n as f64),
                Some(gates.sum_u / gates.n as f64),
            )
        } else {
            (None, None)
        };
        let rec = MetricsRecord {
            epoch,
            train_loss: if batches > 0 {
                loss_sum / batches as f64
            } else {
                0.0
            },
            valid_loss: valid.loss,
            valid_accuracy: valid.accuracy,
            mean_g_fbank,
            mean_g_unit,
            conflict_fraction,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: train {:.4} valid {:.4} acc {:.4}",
            rec.train_loss,
            rec.valid_loss,
            rec.valid_accuracy
        );
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs epochs until `max_epochs` or early stopping, calling `after`
    /// once per completed epoch.
    pub fn fit(
        &mut self,
        mut after: impl FnMut(&Trainer, &MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        while self.epochs_done < self.cfg.train.max_epochs {
            let rec = self.train_epoch()?;
            after(self, &rec)?;
            let losses: Vec<f64> = self.history.iter().map(|r| r.valid_loss).collect();
            if early_stop(&losses, self.cfg.train.patience) {
                log::info!("early stop after epoch {}", rec.epoch);
                break;
            }
        }
        Ok(())
    }
}

/// Gate statistics over the fusion rows (all rows without a mask).
fn gate_record(
    g_fbank: &Tensor,
    g_unit: &Tensor,
    mask: Option<&Tensor>,
    step: usize,
    epoch: usize,
) -> GateRecord {
    let (mut sf, mut su, mut above, mut n) = (0.0, 0.0, 0usize, 0usize);
    for i in 0..g_fbank.len() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        let f = g_fbank.data()[i];
        sf += f;
        su += g_unit.data()[i];
        above += usize::from(f > 1.0);
        n += 1;
    }
    let nf = n.max(1) as f64;
    GateRecord {
        step,
        epoch,
        mean_g_fbank: sf / nf,
        mean_g_unit: su / nf,
        frac_g_fbank_above_1: above as f64 / nf,
        n_elements: n,
    }
}
