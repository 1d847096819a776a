use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::params::ParamSet;

/// Inverse-square-root decay with linear warmup:
/// `peak · min(step^-0.5 · warmup^0.5, step / warmup)`.
pub fn learning_rate(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step as f64;
    let w = warmup as f64;
    peak * (w.sqrt() / s.sqrt()).min(s / w)
}

/// First and second moment estimates, laid out like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One bias-corrected Adam update at `step` (1-based).
pub fn adam_step(
    params: &mut ParamSet,
    grads: &ParamSet,
    state: &mut AdamState,
    step: usize,
    cfg: &TrainConfig,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Config("adam step counter starts at 1".into()));
    }
    if !params.same_layout(grads) || !params.same_layout(&state.m) {
        return Err(Error::Shape(
            "gradient layout differs from parameters".into(),
        ));
    }
    let lr = learning_rate(step, cfg.peak_lr, cfg.warmup_steps);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}
