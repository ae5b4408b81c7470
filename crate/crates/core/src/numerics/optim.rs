use super::{Params, TensorError};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamWState {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One AdamW update on a flat buffer. `step` is 1-based.
///
/// Weight decay multiplies the parameter directly and never enters the
/// moment estimates.
pub fn adamw_step(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamWState,
    step: u64,
    cfg: &AdamWConfig,
) -> Result<(), TensorError> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(TensorError::DimensionMismatch {
            op: "adamw_step",
            left: vec![param.len()],
            right: vec![grad.len()],
        });
    }
    let (b1, b2) = cfg.betas;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        param[i] = param[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// AdamW over a whole [`Params`] store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub states: Vec<AdamWState>,
}

impl AdamW {
    pub fn new(params: &Params, config: AdamWConfig) -> Self {
        let states = params
            .ids()
            .map(|id| AdamWState::zeros(params.value(id).numel()))
            .collect();
        Self {
            config,
            step: 0,
            states,
        }
    }

    /// Applies one step using the gradients currently stored in `params`.
    pub fn step(&mut self, params: &mut Params) -> Result<(), TensorError> {
        self.step += 1;
        for id in params.ids() {
            let (value, grad) = params.value_and_grad_mut(id);
            adamw_step(
                value.data_mut(),
                grad,
                &mut self.states[id.index()],
                self.step,
                &self.config,
            )?;
        }
        Ok(())
    }
}
