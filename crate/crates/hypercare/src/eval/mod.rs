//! Metrics with exact tie handling, the two-scenario evaluation protocol,
//! the multi-hot logistic-regression baseline, and report emission.

mod logistic;
mod metrics;
mod report;
mod scenarios;

pub use logistic::{predict_lr, train_logistic_regression, LogisticModel, LrMode};
pub use metrics::{accuracy, aupr_macro, auroc, auroc_macro, average_precision, MacroMetric};
pub use report::emit_report;
pub use scenarios::{evaluate_scenarios, EvalMeta, MetricsTable, ScenarioMetrics};

use thiserror::Error;

use crate::hypergraph::GraphError;
use crate::model::ModelError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{op}: predictions ({pred}) and labels ({labels}) must both hold {expected} 0/1 entries")]
    ShapeMismatch {
        op: &'static str,
        pred: usize,
        labels: usize,
        expected: usize,
    },
    #[error("{0}: every label column is single-class")]
    DegenerateColumns(&'static str),
    #[error("no training visits for this baseline mode")]
    EmptyTrainingSet,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("report io: {0}")]
    Io(#[from] std::io::Error),
}
