//! The two-stage training pipeline: Adam-optimized supervised pretraining
//! on the basic graph, then consistency-regularized finetuning with
//! group-balanced gradient reweighting on the extended graph.

mod adam;
mod ema;
mod reweight;

pub use adam::{adam_step, AdamState};
pub use ema::{ema_update, EmaState};
pub use reweight::{
    group_similarities, predicted_reduction, reweight, reweight_from_similarities, GroupWeights,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, Group, Scenario, Split};
use crate::eval::{auroc_macro, EvalError};
use crate::hypergraph::{
    build_basic_graph, build_finetune_graph, build_inference_graph, GraphError, Hypergraph,
};
use crate::model::{
    extend_embedding, gradient_check_instance, init_params, model_forward, predict, ModelConfig,
    ModelError,
};
use crate::numerics::{NodeId, NumericsError, ParamStore, Tape, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("finetuning group {0} is empty")]
    EmptyGroup(&'static str),
    #[error("optimizer state covers {state} coordinates but the model has {params}")]
    UninitializedState { state: usize, params: usize },
    #[error("parameter layouts differ in {0}")]
    LayoutMismatch(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Hyperparameters of both training stages. The defaults are the paper's
/// reported settings; `tau` and `finetune_basic_fraction` govern the
/// reweighting temperature and how many basic-only records the finetuning
/// site retains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iter_pretrain: usize,
    pub iter_finetune: usize,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub weight_decay: f64,
    /// Weight of the consistency term against the smoothed model.
    pub mu: f64,
    /// EMA smoothing factor for the teacher parameters.
    pub beta: f64,
    /// Temperature of the gradient-similarity exponents.
    pub tau: f64,
    pub finetune_basic_fraction: f64,
    pub seed: u64,
    /// Smoothness-inducing regularization (EMA teacher + consistency).
    pub enable_sr: bool,
    /// Group-balanced reweighting.
    pub enable_gr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iter_pretrain: 300,
            iter_finetune: 200,
            lr_pretrain: 1e-3,
            lr_finetune: 2e-4,
            weight_decay: 1e-3,
            mu: 0.5,
            beta: 0.5,
            tau: 1.0,
            finetune_basic_fraction: 0.2,
            seed: 0,
            enable_sr: true,
            enable_gr: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::InvalidConfig(msg));
        if self.mu < 0.0 {
            return fail(format!("mu {} must be nonnegative", self.mu));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta {} outside [0,1]", self.beta));
        }
        if self.tau <= 0.0 {
            return fail(format!("tau {} must be positive", self.tau));
        }
        if !(self.finetune_basic_fraction > 0.0 && self.finetune_basic_fraction <= 1.0) {
            return fail(format!(
                "finetune_basic_fraction {} outside (0,1]",
                self.finetune_basic_fraction
            ));
        }
        if self.lr_pretrain <= 0.0 || self.lr_finetune <= 0.0 || self.weight_decay < 0.0 {
            return fail("learning rates must be positive, weight decay nonnegative".into());
        }
        Ok(())
    }
}

/// Stable seed derivation so every stage draws from its own stream of the
/// single run seed.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

fn check_label_arity(cohort: &Cohort, config: &ModelConfig) -> Result<(), TrainError> {
    if cohort.num_labels != config.num_labels {
        return Err(TrainError::InvalidConfig(format!(
            "model predicts {} labels but the cohort has {}",
            config.num_labels, cohort.num_labels
        )));
    }
    Ok(())
}

/// Label rows for the given graph edges, in edge order.
pub fn labels_for_edges(cohort: &Cohort, graph: &Hypergraph, edge_ids: &[usize]) -> Tensor {
    let by_visit: std::collections::HashMap<u64, &[u8]> = cohort
        .visits
        .iter()
        .map(|v| (v.visit_id, v.labels.as_slice()))
        .collect();
    let t = cohort.num_labels;
    let mut out = Tensor::zeros(edge_ids.len(), t);
    for (row, &e) in edge_ids.iter().enumerate() {
        let labels = by_visit[&graph.edge_visit_id(e)];
        for (c, &y) in labels.iter().enumerate() {
            out.set(row, c, f64::from(y));
        }
    }
    out
}

pub struct PretrainOutput {
    pub params: ParamStore,
    /// Full-batch training loss per iteration, before each update.
    pub loss_log: Vec<f64>,
}

/// Full-batch supervised pretraining on the basic graph. With zero
/// iterations the returned parameters equal the seeded initialization
/// bitwise.
pub fn pretrain(
    cohort: &Cohort,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<PretrainOutput, TrainError> {
    train_config.validate()?;
    check_label_arity(cohort, model_config)?;
    let graph = build_basic_graph(cohort)?;
    let mut params = init_params(
        model_config,
        graph.num_nodes(),
        derive_seed(train_config.seed, "init"),
    )?;
    let edge_ids: Vec<usize> = (0..graph.num_edges()).collect();
    let labels = labels_for_edges(cohort, &graph, &edge_ids);
    let mut adam = AdamState::new(&params);
    let mut loss_log = Vec::with_capacity(train_config.iter_pretrain);
    for _ in 0..train_config.iter_pretrain {
        let mut tape = Tape::new();
        let pred = model_forward(&mut tape, &graph, &params, model_config, &edge_ids)?;
        let loss = tape.bce_loss(pred, &labels)?;
        loss_log.push(tape.value(loss).scalar_value());
        tape.backward(loss, &mut params)?;
        adam_step(
            &mut params,
            &mut adam,
            train_config.lr_pretrain,
            train_config.weight_decay,
        )?;
    }
    Ok(PretrainOutput { params, loss_log })
}

/// Per-group finetuning objective: classification loss over the group's
/// edges plus `mu` times the KL consistency against the smoothed model's
/// predictions on the same graph. The teacher output is detached; no
/// gradient reaches the smoothed parameters.
#[allow(clippy::too_many_arguments)]
pub fn finetune_group_loss(
    tape: &mut Tape,
    params: &ParamStore,
    ema: &EmaState,
    graph: &Hypergraph,
    config: &ModelConfig,
    edge_ids: &[usize],
    labels: &Tensor,
    mu: f64,
) -> Result<NodeId, TrainError> {
    if edge_ids.is_empty() {
        return Err(TrainError::EmptyGroup("requested"));
    }
    let pred = model_forward(tape, graph, params, config, edge_ids)?;
    let mut loss = tape.bce_loss(pred, labels)?;
    if mu > 0.0 {
        let teacher = predict(graph, ema.smoothed(), config, edge_ids)?;
        let kl = tape.bernoulli_kl(pred, &teacher)?;
        let scaled = tape.scale(kl, mu);
        loss = tape.add(loss, scaled)?;
    }
    Ok(loss)
}

/// One edge batch of a finetuning group.
pub struct GroupBatch {
    pub edge_ids: Vec<usize>,
    pub labels: Tensor,
}

/// Losses and flattened gradients of the two groups at the current
/// parameters: one shared forward pass, one independent backward per
/// group. Gradients are in canonical key order.
pub fn compute_group_gradients(
    params: &mut ParamStore,
    teacher: Option<&ParamStore>,
    graph: &Hypergraph,
    config: &ModelConfig,
    batch_basic: &GroupBatch,
    batch_extra: &GroupBatch,
    mu: f64,
) -> Result<(f64, f64, Vec<f64>, Vec<f64>), TrainError> {
    if batch_basic.edge_ids.is_empty() {
        return Err(TrainError::EmptyGroup("basic"));
    }
    if batch_extra.edge_ids.is_empty() {
        return Err(TrainError::EmptyGroup("extra"));
    }
    let nb = batch_basic.edge_ids.len();
    let all_edges: Vec<usize> = batch_basic
        .edge_ids
        .iter()
        .chain(&batch_extra.edge_ids)
        .copied()
        .collect();
    let teacher_pred = match teacher {
        Some(t) if mu > 0.0 => Some(predict(graph, t, config, &all_edges)?),
        _ => None,
    };

    let mut tape = Tape::new();
    let pred_all = model_forward(&mut tape, graph, params, config, &all_edges)?;
    let pred_b = tape.gather_rows(pred_all, (0..nb).collect());
    let pred_e = tape.gather_rows(pred_all, (nb..all_edges.len()).collect());
    let mut loss_b = tape.bce_loss(pred_b, &batch_basic.labels)?;
    let mut loss_e = tape.bce_loss(pred_e, &batch_extra.labels)?;
    if let Some(tp) = &teacher_pred {
        let teacher_b = tp.slice_rows(0, nb);
        let teacher_e = tp.slice_rows(nb, all_edges.len());
        let kl_b = tape.bernoulli_kl(pred_b, &teacher_b)?;
        let kl_b = tape.scale(kl_b, mu);
        loss_b = tape.add(loss_b, kl_b)?;
        let kl_e = tape.bernoulli_kl(pred_e, &teacher_e)?;
        let kl_e = tape.scale(kl_e, mu);
        loss_e = tape.add(loss_e, kl_e)?;
    }

    tape.backward(loss_b, params)?;
    let s_basic = params.flat_grads();
    tape.backward(loss_e, params)?;
    let s_extra = params.flat_grads();
    Ok((
        tape.value(loss_b).scalar_value(),
        tape.value(loss_e).scalar_value(),
        s_basic,
        s_extra,
    ))
}

/// The basic-only finetuning records the local site retains: a seeded
/// sample of the configured fraction of basic-only finetune-train visits.
pub fn sample_basic_subset(cohort: &Cohort, fraction: f64, seed: u64) -> Vec<u64> {
    let mut ids: Vec<u64> = cohort
        .visits_in(Split::FinetuneTrain)
        .filter(|v| v.group == Group::BasicOnly)
        .map(|v| v.visit_id)
        .collect();
    if ids.is_empty() {
        return ids;
    }
    let k = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.truncate(k);
    ids.sort_unstable();
    ids
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneIterLog {
    pub iter: usize,
    pub loss_basic: f64,
    pub loss_extra: f64,
    pub omega_basic: f64,
    pub omega_extra: f64,
    pub val_auroc_basic: f64,
    pub val_auroc_full: f64,
}

pub struct FinetuneOutput {
    /// Checkpoint with the best mean of the two validation AUROCs.
    pub params: ParamStore,
    /// The starting point: pretrained parameters with extended embedding.
    pub initial_params: ParamStore,
    pub curve: Vec<FinetuneIterLog>,
    pub basic_subset: Vec<u64>,
    pub best_iter: usize,
}

/// Finetuning loop: per iteration, group losses and gradients, the
/// multiplicative weight update (when enabled), one Adam step on the
/// weighted gradient, the EMA teacher update (when enabled), and a
/// validation pass in both scenarios.
pub fn finetune(
    pretrained: &ParamStore,
    cohort: &Cohort,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<FinetuneOutput, TrainError> {
    train_config.validate()?;
    check_label_arity(cohort, model_config)?;
    let basic_subset = sample_basic_subset(
        cohort,
        train_config.finetune_basic_fraction,
        derive_seed(train_config.seed, "finetune-basic-subset"),
    );
    if basic_subset.is_empty() {
        return Err(TrainError::EmptyGroup("basic"));
    }
    let graph = build_finetune_graph(cohort, &basic_subset)?;
    let mut params = extend_embedding(
        pretrained,
        cohort.num_codes(),
        derive_seed(train_config.seed, "extend-embedding"),
    )?;
    let initial_params = params.clone();

    // Group membership of each training edge.
    let group_of: std::collections::HashMap<u64, Group> = cohort
        .visits
        .iter()
        .map(|v| (v.visit_id, v.group))
        .collect();
    let mut edges_basic = Vec::new();
    let mut edges_extra = Vec::new();
    for e in graph.base_edges() {
        match group_of[&graph.edge_visit_id(e)] {
            Group::BasicOnly => edges_basic.push(e),
            Group::Extra => edges_extra.push(e),
        }
    }
    let batch_basic = GroupBatch {
        labels: labels_for_edges(cohort, &graph, &edges_basic),
        edge_ids: edges_basic,
    };
    let batch_extra = GroupBatch {
        labels: labels_for_edges(cohort, &graph, &edges_extra),
        edge_ids: edges_extra,
    };

    // Validation inference graphs are static across iterations.
    let (val_basic_graph, val_basic_edges) =
        build_inference_graph(&graph, cohort, Split::Validation, Scenario::Basic)?;
    let (val_full_graph, val_full_edges) =
        build_inference_graph(&graph, cohort, Split::Validation, Scenario::Full)?;
    let val_labels = labels_for_edges(cohort, &val_basic_graph, &val_basic_edges);

    let mu = if train_config.enable_sr {
        train_config.mu
    } else {
        0.0
    };
    let mut ema = EmaState::new(&params, train_config.beta)?;
    let mut weights = GroupWeights::balanced();
    let mut adam = AdamState::new(&params);
    let mut curve = Vec::with_capacity(train_config.iter_finetune);
    let mut best = (f64::NEG_INFINITY, params.clone(), 0usize);

    for iter in 1..=train_config.iter_finetune {
        let teacher = train_config.enable_sr.then(|| ema.smoothed().clone());
        let (loss_b, loss_e, s_basic, s_extra) = compute_group_gradients(
            &mut params,
            teacher.as_ref(),
            &graph,
            model_config,
            &batch_basic,
            &batch_extra,
            mu,
        )?;
        if train_config.enable_gr {
            weights = reweight(weights, &s_basic, &s_extra, train_config.tau);
        }
        let combined: Vec<f64> = s_basic
            .iter()
            .zip(&s_extra)
            .map(|(&b, &e)| weights.basic * b + weights.extra * e)
            .collect();
        params.set_grads_from_flat(&combined)?;
        adam_step(
            &mut params,
            &mut adam,
            train_config.lr_finetune,
            train_config.weight_decay,
        )?;
        if train_config.enable_sr {
            ema_update(&mut ema, &params)?;
        }

        let t = cohort.num_labels;
        let pred_basic = predict(&val_basic_graph, &params, model_config, &val_basic_edges)?;
        let val_auroc_basic =
            auroc_macro(pred_basic.data(), val_labels.data(), val_basic_edges.len(), t)?.value;
        let pred_full = predict(&val_full_graph, &params, model_config, &val_full_edges)?;
        let val_auroc_full =
            auroc_macro(pred_full.data(), val_labels.data(), val_full_edges.len(), t)?.value;

        curve.push(FinetuneIterLog {
            iter,
            loss_basic: loss_b,
            loss_extra: loss_e,
            omega_basic: weights.basic,
            omega_extra: weights.extra,
            val_auroc_basic,
            val_auroc_full,
        });
        let score = (val_auroc_basic + val_auroc_full) / 2.0;
        if score > best.0 {
            best = (score, params.clone(), iter);
        }
    }

    let (_, best_params, best_iter) = best;
    Ok(FinetuneOutput {
        params: if train_config.iter_finetune == 0 {
            params
        } else {
            best_params
        },
        initial_params,
        curve,
        basic_subset,
        best_iter,
    })
}

/// Probe for the first-order loss-reduction approximation on the fixed
/// small instance: returns the predicted change and the measured change
/// after one step of size `alpha` along the weighted gradient direction.
pub fn taylor_probe(alpha: f64, seed: u64) -> Result<(f64, f64), TrainError> {
    let (graph, cfg, _, labels) = gradient_check_instance();
    let mut params = init_params(&cfg, graph.num_nodes(), seed)?;
    let teacher = params.clone();
    let mu = 0.5;

    let batch_basic = GroupBatch {
        edge_ids: vec![0, 1],
        labels: labels.slice_rows(0, 2),
    };
    let batch_extra = GroupBatch {
        edge_ids: vec![2, 3],
        labels: labels.slice_rows(2, 4),
    };
    let (lb0, le0, s_basic, s_extra) = compute_group_gradients(
        &mut params,
        Some(&teacher),
        &graph,
        &cfg,
        &batch_basic,
        &batch_extra,
        mu,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "taylor-weights"));
    let wb = rng.gen_range(0.1..0.9);
    let weights = GroupWeights::new(wb, 1.0 - wb);
    let predicted = predicted_reduction(weights, &s_basic, &s_extra, alpha);

    let direction: Vec<f64> = s_basic
        .iter()
        .zip(&s_extra)
        .map(|(&b, &e)| weights.basic * b + weights.extra * e)
        .collect();
    params.add_scaled_flat(&direction, -alpha)?;
    let (lb1, le1, _, _) = compute_group_gradients(
        &mut params,
        Some(&teacher),
        &graph,
        &cfg,
        &batch_basic,
        &batch_extra,
        mu,
    )?;
    let actual = (lb1 - lb0) + (le1 - le0);
    Ok((predicted, actual))
}
