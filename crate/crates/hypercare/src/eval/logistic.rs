use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::cohort::{Cohort, Group, Scenario, Split, Visit};
use crate::numerics::Tensor;

/// Which training population and feature width the baseline uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrMode {
    /// Basic features of every training visit.
    Basic,
    /// Full features, but only visits that carry extra features.
    Full,
    /// All training visits over the full width, zero-filled where extra
    /// features are absent.
    Both,
}

/// Per-label logistic model over multi-hot code indicators.
#[derive(Clone, Debug)]
pub struct LogisticModel {
    pub mode: LrMode,
    pub input_dim: usize,
    pub weights: Tensor, // input_dim x T
    pub bias: Tensor,    // 1 x T
}

const GD_LEARNING_RATE: f64 = 0.5;

fn feature_row(visit: &Visit, input_dim: usize, keep_extra: bool, num_basic: usize) -> Vec<f64> {
    let mut row = vec![0.0; input_dim];
    for &c in &visit.codes {
        if c >= input_dim {
            continue;
        }
        if c >= num_basic && !keep_extra {
            continue;
        }
        row[c] = 1.0;
    }
    row
}

fn training_visits<'a>(cohort: &'a Cohort, mode: LrMode) -> Vec<&'a Visit> {
    cohort
        .visits
        .iter()
        .filter(|v| matches!(v.split, Split::PretrainTrain | Split::FinetuneTrain))
        .filter(|v| mode != LrMode::Full || v.group == Group::Extra)
        .collect()
}

/// Full-batch gradient descent on L2-penalized logistic loss,
/// deterministic from a zero initialization.
pub fn train_logistic_regression(
    cohort: &Cohort,
    mode: LrMode,
    l2: f64,
    iters: usize,
) -> Result<LogisticModel, EvalError> {
    let visits = training_visits(cohort, mode);
    if visits.is_empty() {
        return Err(EvalError::EmptyTrainingSet);
    }
    let num_basic = cohort.num_basic();
    let input_dim = match mode {
        LrMode::Basic => num_basic,
        LrMode::Full | LrMode::Both => cohort.num_codes(),
    };
    let t = cohort.num_labels;
    let n = visits.len();
    let rows: Vec<Vec<f64>> = visits
        .iter()
        .map(|v| feature_row(v, input_dim, true, num_basic))
        .collect();
    let labels: Vec<&[u8]> = visits.iter().map(|v| v.labels.as_slice()).collect();

    let mut weights = Tensor::zeros(input_dim, t);
    let mut bias = Tensor::zeros(1, t);
    for _ in 0..iters {
        let mut grad_w = Tensor::zeros(input_dim, t);
        let mut grad_b = vec![0.0; t];
        for (row, y) in rows.iter().zip(&labels) {
            for col in 0..t {
                let mut z = bias.get(0, col);
                for (j, &x) in row.iter().enumerate() {
                    if x != 0.0 {
                        z += weights.get(j, col);
                    }
                }
                let residual = 1.0 / (1.0 + (-z).exp()) - f64::from(y[col]);
                grad_b[col] += residual;
                for (j, &x) in row.iter().enumerate() {
                    if x != 0.0 {
                        grad_w.set(j, col, grad_w.get(j, col) + residual);
                    }
                }
            }
        }
        for col in 0..t {
            bias.set(
                0,
                col,
                bias.get(0, col) - GD_LEARNING_RATE * grad_b[col] / n as f64,
            );
            for j in 0..input_dim {
                let g = grad_w.get(j, col) / n as f64 + l2 * weights.get(j, col);
                weights.set(j, col, weights.get(j, col) - GD_LEARNING_RATE * g);
            }
        }
    }
    Ok(LogisticModel {
        mode,
        input_dim,
        weights,
        bias,
    })
}

/// Scores for the visits of one split, `n x T`, with extra-code indicators
/// zeroed in the basic scenario.
pub fn predict_lr(
    model: &LogisticModel,
    cohort: &Cohort,
    split: Split,
    scenario: Scenario,
) -> Vec<Vec<f64>> {
    let num_basic = cohort.num_basic();
    let keep_extra = scenario == Scenario::Full;
    cohort
        .visits_in(split)
        .map(|v| {
            let row = feature_row(v, model.input_dim, keep_extra, num_basic);
            (0..cohort.num_labels)
                .map(|col| {
                    let mut z = model.bias.get(0, col);
                    for (j, &x) in row.iter().enumerate() {
                        if x != 0.0 {
                            z += model.weights.get(j, col);
                        }
                    }
                    1.0 / (1.0 + (-z).exp())
                })
                .collect()
        })
        .collect()
}
