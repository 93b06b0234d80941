use super::TrainError;
use crate::numerics::ParamStore;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// First/second moment buffers over the canonical flat coordinate order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let n = params.num_coords();
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// Bias-corrected Adam with decoupled weight decay applied as
/// `theta <- theta - lr * wd * theta` before the moment update. Consumes
/// the gradients currently in the store's buffers.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<(), TrainError> {
    if state.m.len() != params.num_coords() {
        return Err(TrainError::UninitializedState {
            state: state.m.len(),
            params: params.num_coords(),
        });
    }
    let grads = params.flat_grads();
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - BETA1.powi(t);
    let bc2 = 1.0 - BETA2.powi(t);

    let mut theta = params.flat_params();
    for i in 0..theta.len() {
        theta[i] -= lr * weight_decay * theta[i];
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        theta[i] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }

    // Write back in canonical order.
    let keys: Vec<String> = params.keys().map(str::to_string).collect();
    let mut offset = 0;
    for key in keys {
        let tensor = params.get_mut(&key)?;
        let n = tensor.numel();
        tensor.data_mut().copy_from_slice(&theta[offset..offset + n]);
        offset += n;
    }
    Ok(())
}
