//! Adam with bias correction, and the exponential-moving-average update
//! that drives the teacher network.

use super::error::{EngineError, Result};
use super::param::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, p)| Tensor::zeros(&p.shape()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update of every parameter in `params` from its stored gradient.
///
/// All gradients are checked before any parameter is touched, so a missing
/// gradient leaves both the parameters and the state unchanged.
pub fn adam_step(params: &ParamSet, state: &mut AdamState) -> Result<()> {
    if params.len() != state.first.len() {
        return Err(EngineError::ParamMismatch(format!(
            "optimizer state tracks {} tensors, parameter set has {}",
            state.first.len(),
            params.len()
        )));
    }
    let mut grads = Vec::with_capacity(params.len());
    for ((name, p), m) in params.iter().zip(&state.first) {
        let g = p
            .grad()
            .ok_or_else(|| EngineError::MissingGrad(name.to_string()))?;
        if g.shape() != m.shape() {
            return Err(EngineError::ParamMismatch(format!(
                "`{name}` gradient shape {:?} vs moment shape {:?}",
                g.shape(),
                m.shape()
            )));
        }
        grads.push(g);
    }

    state.step += 1;
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);

    for (((_, p), g), (m, v)) in params
        .iter()
        .zip(&grads)
        .zip(state.first.iter_mut().zip(state.second.iter_mut()))
    {
        p.update(|value, _| {
            let it = value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((w, &g), (m, v)) in it {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
    Ok(())
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, elementwise.
pub fn ema_update(teacher: &ParamSet, student: &ParamSet, alpha: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EngineError::Invalid(format!(
            "EMA coefficient {alpha} outside [0, 1]"
        )));
    }
    teacher.check_compatible(student)?;
    for ((_, t), (_, s)) in teacher.iter().zip(student.iter()) {
        let src = s.value();
        t.update(|value, _| {
            value
                .data_mut()
                .iter_mut()
                .zip(src.data())
                .for_each(|(t, s)| *t = alpha * *t + (1.0 - alpha) * s);
        });
    }
    Ok(())
}
