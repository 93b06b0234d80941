use super::TrainError;
use crate::numerics::ParamStore;

/// Exponential-moving-average copy of the trained parameters, used as the
/// consistency teacher during finetuning.
#[derive(Clone, Debug)]
pub struct EmaState {
    smoothed: ParamStore,
    beta: f64,
}

impl EmaState {
    /// Starts as an exact copy of the given parameters.
    pub fn new(params: &ParamStore, beta: f64) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(TrainError::InvalidConfig(format!(
                "smoothing factor {beta} outside [0, 1]"
            )));
        }
        Ok(EmaState {
            smoothed: params.clone(),
            beta,
        })
    }

    pub fn smoothed(&self) -> &ParamStore {
        &self.smoothed
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// `smoothed <- (1 - beta) * params + beta * smoothed`, element-wise. The
/// endpoints are exact: beta = 0 copies the parameters bitwise, beta = 1
/// leaves the smoothed copy untouched.
pub fn ema_update(ema: &mut EmaState, params: &ParamStore) -> Result<(), TrainError> {
    if !ema.smoothed.same_layout(params) {
        return Err(TrainError::LayoutMismatch("ema_update"));
    }
    if ema.beta == 0.0 {
        ema.smoothed = params.clone();
        return Ok(());
    }
    if ema.beta == 1.0 {
        return Ok(());
    }
    let beta = ema.beta;
    let theta = params.flat_params();
    let mut smoothed = ema.smoothed.flat_params();
    for (s, &p) in smoothed.iter_mut().zip(&theta) {
        *s = (1.0 - beta) * p + beta * *s;
    }
    let keys: Vec<String> = ema.smoothed.keys().map(str::to_string).collect();
    let mut offset = 0;
    for key in keys {
        let tensor = ema.smoothed.get_mut(&key)?;
        let n = tensor.numel();
        tensor
            .data_mut()
            .copy_from_slice(&smoothed[offset..offset + n]);
        offset += n;
    }
    Ok(())
}
