use serde::Serialize;

use super::metrics::{accuracy, aupr_macro, auroc_macro};
use super::EvalError;
use crate::cohort::{Cohort, Scenario, Split};
use crate::hypergraph::{build_finetune_graph, build_inference_graph};
use crate::model::{predict, ModelConfig};
use crate::numerics::{ParamStore, Tensor};

pub const ACCURACY_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioMetrics {
    pub acc: f64,
    pub auroc_macro: f64,
    pub aupr_macro: f64,
    /// Label columns skipped by the ranking metrics for lacking a class.
    pub skipped_columns: Vec<usize>,
}

/// Identification attached to a metrics row.
#[derive(Clone, Debug, Serialize)]
pub struct EvalMeta {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Both evaluation scenarios over the same split, side by side.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsTable {
    pub model: String,
    pub seed: u64,
    pub config_hash: String,
    pub basic: ScenarioMetrics,
    pub full: ScenarioMetrics,
}

impl MetricsTable {
    pub fn scenario(&self, scenario: Scenario) -> &ScenarioMetrics {
        match scenario {
            Scenario::Basic => &self.basic,
            Scenario::Full => &self.full,
        }
    }
}

/// Evaluates a checkpoint on one split under both scenarios. The split's
/// visits join the finetuning graph as prediction-only edges, with their
/// extra codes masked in the basic scenario; both scenarios score the
/// identical visit set.
pub fn evaluate_scenarios(
    params: &ParamStore,
    cohort: &Cohort,
    config: &ModelConfig,
    split: Split,
    basic_subset: &[u64],
    meta: &EvalMeta,
) -> Result<MetricsTable, EvalError> {
    let base = build_finetune_graph(cohort, basic_subset)?;
    let mut per_scenario = Vec::with_capacity(2);
    for scenario in [Scenario::Basic, Scenario::Full] {
        let (graph, edge_ids) = build_inference_graph(&base, cohort, split, scenario)?;
        let pred = predict(&graph, params, config, &edge_ids)?;
        let labels = split_labels(cohort, split);
        per_scenario.push(scenario_metrics(&pred, &labels, cohort.num_labels)?);
    }
    let full = per_scenario.pop().expect("two scenarios");
    let basic = per_scenario.pop().expect("two scenarios");
    Ok(MetricsTable {
        model: meta.model.clone(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
        basic,
        full,
    })
}

fn split_labels(cohort: &Cohort, split: Split) -> Tensor {
    let rows: Vec<&Vec<u8>> = cohort.visits_in(split).map(|v| &v.labels).collect();
    let mut out = Tensor::zeros(rows.len(), cohort.num_labels);
    for (r, labels) in rows.iter().enumerate() {
        for (c, &y) in labels.iter().enumerate() {
            out.set(r, c, f64::from(y));
        }
    }
    out
}

fn scenario_metrics(
    pred: &Tensor,
    labels: &Tensor,
    num_labels: usize,
) -> Result<ScenarioMetrics, EvalError> {
    let n = pred.rows();
    let acc = accuracy(pred.data(), labels.data(), n, num_labels, ACCURACY_THRESHOLD)?;
    let auroc = auroc_macro(pred.data(), labels.data(), n, num_labels)?;
    let aupr = aupr_macro(pred.data(), labels.data(), n, num_labels)?;
    let mut skipped = auroc.skipped_columns.clone();
    for c in aupr.skipped_columns {
        if !skipped.contains(&c) {
            skipped.push(c);
        }
    }
    skipped.sort_unstable();
    Ok(ScenarioMetrics {
        acc,
        auroc_macro: auroc.value,
        aupr_macro: aupr.value,
        skipped_columns: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic, SyntheticConfig};
    use crate::model::{extend_embedding, init_params, Activation, EMBEDDING_KEY};
    use crate::training::{pretrain, sample_basic_subset, TrainConfig};

    fn fixture() -> (Cohort, ModelConfig, ParamStore, Vec<u64>) {
        let cohort = generate_synthetic(&SyntheticConfig {
            n_visits: 150,
            n_basic: 12,
            n_extra: 10,
            extra_fraction: 0.2,
            seed: 51,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mc = ModelConfig {
            width: 8,
            heads: 2,
            layers: 2,
            ffn_width: 16,
            num_labels: 1,
            activation: Activation::Relu,
        };
        let tc = TrainConfig {
            iter_pretrain: 20,
            iter_finetune: 5,
            seed: 51,
            ..TrainConfig::default()
        };
        let pre = pretrain(&cohort, &mc, &tc).unwrap();
        let subset = sample_basic_subset(&cohort, 0.3, 9);
        let params = extend_embedding(&pre.params, cohort.num_codes(), 3).unwrap();
        (cohort, mc, params, subset)
    }

    fn meta() -> EvalMeta {
        EvalMeta {
            model: "test".into(),
            seed: 0,
            config_hash: "deadbeef".into(),
        }
    }

    #[test]
    fn both_scenarios_cover_the_same_visits() {
        let (cohort, mc, params, subset) = fixture();
        let table =
            evaluate_scenarios(&params, &cohort, &mc, Split::Test, &subset, &meta()).unwrap();
        for s in [&table.basic, &table.full] {
            assert!((0.0..=1.0).contains(&s.acc));
            assert!((0.0..=1.0).contains(&s.auroc_macro));
            assert!((0.0..=1.0).contains(&s.aupr_macro));
        }
        assert_eq!(table.model, "test");
        assert_eq!(table.config_hash, "deadbeef");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (cohort, mc, params, subset) = fixture();
        let a = evaluate_scenarios(&params, &cohort, &mc, Split::Test, &subset, &meta()).unwrap();
        let b = evaluate_scenarios(&params, &cohort, &mc, Split::Test, &subset, &meta()).unwrap();
        assert_eq!(a.basic.auroc_macro.to_bits(), b.basic.auroc_macro.to_bits());
        assert_eq!(a.full.aupr_macro.to_bits(), b.full.aupr_macro.to_bits());
        assert_eq!(a.basic.acc.to_bits(), b.basic.acc.to_bits());
    }

    #[test]
    fn zeroed_extra_embeddings_collapse_the_scenario_gap() {
        // When extra codes appear only in appended test edges and their
        // embedding rows are zero, both scenarios see the same inputs up to
        // the zero rows' pooled contributions being identical constants.
        let cohort = generate_synthetic(&SyntheticConfig {
            n_visits: 120,
            n_basic: 10,
            n_extra: 6,
            extra_fraction: 0.15,
            seed: 77,
            ..SyntheticConfig::default()
        })
        .unwrap();
        // Keep extra visits out of the finetune base: they go to val/test only.
        // (Filter the cohort: extra-group visits in finetune_train are moved to test.)
        let mut cohort = cohort;
        for v in &mut cohort.visits {
            if v.split == Split::FinetuneTrain && v.group == crate::cohort::Group::Extra {
                v.split = Split::Test;
            }
        }
        // The finetune graph needs an extra group; fabricate one basic-coded
        // extra visit so the base graph itself carries no extra incidences.
        let donor = cohort
            .visits
            .iter()
            .position(|v| v.split == Split::FinetuneTrain)
            .unwrap();
        cohort.visits[donor].group = crate::cohort::Group::Extra;

        let mc = ModelConfig {
            width: 8,
            heads: 2,
            layers: 2,
            ffn_width: 16,
            num_labels: 1,
            activation: Activation::Relu,
        };
        let mut params = init_params(&mc, cohort.num_codes(), 5).unwrap();
        let mut emb = params.get(EMBEDDING_KEY).unwrap().clone();
        for v in cohort.num_basic()..cohort.num_codes() {
            for c in 0..mc.width {
                emb.set(v, c, 0.0);
            }
        }
        params.insert(EMBEDDING_KEY, emb);

        let subset = sample_basic_subset(&cohort, 0.3, 9);
        let table =
            evaluate_scenarios(&params, &cohort, &mc, Split::Test, &subset, &meta()).unwrap();
        // Zero rows still shift attention softmax mass, so the scenarios
        // are close but need not match bitwise.
        assert!(
            (table.basic.auroc_macro - table.full.auroc_macro).abs() < 0.2,
            "zeroed extra rows should not create a large gap: {} vs {}",
            table.basic.auroc_macro,
            table.full.auroc_macro
        );
    }
}
