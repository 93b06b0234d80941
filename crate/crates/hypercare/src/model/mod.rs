//! The hypergraph transformer: set-attention pooling with learned
//! per-head queries, two-step message passing per layer, and a sigmoid
//! classification head over the concatenated per-layer edge embeddings.

mod forward;
mod params;

pub use forward::{
    attention_pool, block_forward, layer_forward, model_forward, predict, wire_block, WiredBlock,
};
pub use params::{
    block_key, extend_embedding, head_key, init_params, Activation, Direction, ModelConfig,
    CLS_BIAS_KEY, CLS_WEIGHT_KEY, EMBEDDING_KEY, LAYER_NORM_EPS,
};

use thiserror::Error;

use crate::hypergraph::Hypergraph;
use crate::numerics::{NumericsError, ParamStore, Tensor};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("attention pooling over an empty set")]
    EmptySet,
    #[error("embedding cannot shrink from {from} to {to} rows")]
    ShrinkNotAllowed { from: usize, to: usize },
    #[error("edge {edge} out of range for a graph with {num_edges} edges")]
    EdgeOutOfRange { edge: usize, num_edges: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// The fixed small instance used by the gradient-check command and the
/// verification suite: 6 nodes (one isolated), 4 edges, d=8, h=2, L=2,
/// T=2.
pub fn gradient_check_instance() -> (Hypergraph, ModelConfig, ParamStore, Tensor) {
    let config = ModelConfig {
        width: 8,
        heads: 2,
        layers: 2,
        ffn_width: 16,
        num_labels: 2,
        activation: Activation::Relu,
    };
    let edges = vec![vec![0, 1, 2], vec![1, 3], vec![2, 3, 4], vec![4]];
    let graph = Hypergraph::from_edge_lists(6, edges, vec![0, 1, 2, 3])
        .expect("fixed instance is well-formed");
    let params = init_params(&config, 6, 7).expect("fixed config is valid");
    let labels = Tensor::from_vec(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0])
        .expect("label shape matches");
    (graph, config, params, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, Tape};

    // ---- straight-line oracle: an independent transcription of the
    // propagation formulas using plain loops, no tape code shared. ----

    fn vecmat(x: &[f64], w: &Tensor) -> Vec<f64> {
        let (rows, cols) = w.shape();
        assert_eq!(x.len(), rows);
        let mut out = vec![0.0; cols];
        for (r, &xv) in x.iter().enumerate() {
            for c in 0..cols {
                out[c] += xv * w.get(r, c);
            }
        }
        out
    }

    fn oracle_attention_pool(
        x_set: &[Vec<f64>],
        store: &ParamStore,
        cfg: &ModelConfig,
        layer: usize,
        dir: Direction,
    ) -> Vec<f64> {
        let d_h = cfg.head_width();
        let mut concat = Vec::with_capacity(cfg.width);
        for head in 1..=cfg.heads {
            let q = store.get(&head_key(layer, dir, head, "query")).unwrap();
            let wk = store.get(&head_key(layer, dir, head, "key")).unwrap();
            let wv = store.get(&head_key(layer, dir, head, "value")).unwrap();
            let scores: Vec<f64> = x_set
                .iter()
                .map(|row| {
                    let k = vecmat(row, wk);
                    (0..d_h).map(|i| q.get(0, i) * k[i]).sum::<f64>() / (d_h as f64).sqrt()
                })
                .collect();
            let exps: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
            let total: f64 = exps.iter().sum();
            let mut pooled = vec![0.0; d_h];
            for (row, &e) in x_set.iter().zip(&exps) {
                let v = vecmat(row, wv);
                for i in 0..d_h {
                    pooled[i] += (e / total) * v[i];
                }
            }
            concat.extend(pooled);
        }
        let wo = store.get(&block_key(layer, dir, "out")).unwrap();
        vecmat(&concat, wo)
    }

    fn oracle_block(
        x_set: &[Vec<f64>],
        store: &ParamStore,
        cfg: &ModelConfig,
        layer: usize,
        dir: Direction,
    ) -> Vec<f64> {
        let y = oracle_attention_pool(x_set, store, cfg, layer, dir);
        let w1 = store.get(&block_key(layer, dir, "ffn.w1")).unwrap();
        let b1 = store.get(&block_key(layer, dir, "ffn.b1")).unwrap();
        let w2 = store.get(&block_key(layer, dir, "ffn.w2")).unwrap();
        let b2 = store.get(&block_key(layer, dir, "ffn.b2")).unwrap();
        let mut h = vecmat(&y, w1);
        for (i, v) in h.iter_mut().enumerate() {
            *v += b1.get(0, i);
            *v = match cfg.activation {
                Activation::Relu => v.max(0.0),
                Activation::Sigmoid => 1.0 / (1.0 + (-*v).exp()),
            };
        }
        let mut f = vecmat(&h, w2);
        for (i, v) in f.iter_mut().enumerate() {
            *v += b2.get(0, i) + y[i];
        }
        // layer norm with population variance
        let d = f.len() as f64;
        let mean = f.iter().sum::<f64>() / d;
        let var = f.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let gain = store.get(&block_key(layer, dir, "ln.gain")).unwrap();
        let bias = store.get(&block_key(layer, dir, "ln.bias")).unwrap();
        f.iter()
            .enumerate()
            .map(|(i, &v)| (v - mean) * inv * gain.get(0, i) + bias.get(0, i))
            .collect()
    }

    fn oracle_model(
        graph: &Hypergraph,
        store: &ParamStore,
        cfg: &ModelConfig,
        edge_ids: &[usize],
    ) -> Vec<Vec<f64>> {
        let embedding = store.get(EMBEDDING_KEY).unwrap();
        let mut x: Vec<Vec<f64>> = (0..graph.num_nodes())
            .map(|v| embedding.row(v).to_vec())
            .collect();
        let mut per_layer_edges: Vec<Vec<Vec<f64>>> = Vec::new();
        for layer in 1..=cfg.layers {
            let edges: Vec<Vec<f64>> = (0..graph.num_edges())
                .map(|e| {
                    let set: Vec<Vec<f64>> = graph
                        .edge_nodes(e)
                        .iter()
                        .map(|&v| x[v].clone())
                        .collect();
                    oracle_block(&set, store, cfg, layer, Direction::NodesToEdges)
                })
                .collect();
            x = (0..graph.num_nodes())
                .map(|v| {
                    if graph.is_isolated(v) {
                        x[v].clone()
                    } else {
                        let set: Vec<Vec<f64>> = graph
                            .node_edges(v)
                            .iter()
                            .map(|&e| edges[e].clone())
                            .collect();
                        oracle_block(&set, store, cfg, layer, Direction::EdgesToNodes)
                    }
                })
                .collect();
            per_layer_edges.push(edges);
        }
        let cls_w = store.get(CLS_WEIGHT_KEY).unwrap();
        let cls_b = store.get(CLS_BIAS_KEY).unwrap();
        edge_ids
            .iter()
            .map(|&e| {
                let mut concat = Vec::with_capacity(cfg.layers * cfg.width);
                for edges in &per_layer_edges {
                    concat.extend(edges[e].iter().copied());
                }
                let mut logits = vecmat(&concat, cls_w);
                for (i, v) in logits.iter_mut().enumerate() {
                    *v += cls_b.get(0, i);
                    *v = 1.0 / (1.0 + (-*v).exp());
                }
                logits
            })
            .collect()
    }

    // ---- fixtures ----

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            width: 8,
            heads: 2,
            layers: 2,
            ffn_width: 16,
            num_labels: 2,
            activation: Activation::Relu,
        }
    }

    fn random_set(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn singleton_pool_reduces_to_value_projection() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 6, 3).unwrap();
        let x = random_set(1, 8, 10);

        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let block = wire_block(&mut tape, &store, &cfg, 1, Direction::NodesToEdges).unwrap();
        let pooled = attention_pool(&mut tape, xn, &block).unwrap();

        // With one element the softmax weight is 1: out = concat_i(x Wv_i) Wo.
        let mut concat = Vec::new();
        for head in 1..=cfg.heads {
            let wv = store
                .get(&head_key(1, Direction::NodesToEdges, head, "value"))
                .unwrap();
            concat.extend(x.matmul(wv).unwrap().data().to_vec());
        }
        let wo = store.get(&block_key(1, Direction::NodesToEdges, "out")).unwrap();
        let expect = Tensor::row_vec(concat).matmul(wo).unwrap();
        for (a, e) in tape.value(pooled).data().iter().zip(expect.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_row_equals_singleton() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 6, 4).unwrap();
        let single = random_set(1, 8, 11);
        let doubled = Tensor::from_fn(2, 8, |_, c| single.get(0, c));

        let mut tape = Tape::new();
        let block = wire_block(&mut tape, &store, &cfg, 1, Direction::NodesToEdges).unwrap();
        let a = tape.constant(single);
        let b = tape.constant(doubled);
        let pa = attention_pool(&mut tape, a, &block).unwrap();
        let pb = attention_pool(&mut tape, b, &block).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_is_permutation_invariant() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 6, 5).unwrap();
        let x = random_set(5, 8, 12);
        let perm = [3usize, 0, 4, 1, 2];
        let shuffled = Tensor::from_fn(5, 8, |r, c| x.get(perm[r], c));

        let mut tape = Tape::new();
        let block = wire_block(&mut tape, &store, &cfg, 1, Direction::EdgesToNodes).unwrap();
        let a = tape.constant(x);
        let b = tape.constant(shuffled);
        let pa = block_forward(&mut tape, a, &block).unwrap();
        let pb = block_forward(&mut tape, b, &block).unwrap();
        for (x, y) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_forward_matches_straight_line_oracle() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 6, 6).unwrap();
        let x = random_set(3, 8, 13);
        let set: Vec<Vec<f64>> = (0..3).map(|r| x.row(r).to_vec()).collect();

        let mut tape = Tape::new();
        let block = wire_block(&mut tape, &store, &cfg, 2, Direction::NodesToEdges).unwrap();
        let xn = tape.constant(x);
        let out = block_forward(&mut tape, xn, &block).unwrap();
        assert_eq!(tape.value(out).shape(), (1, 8));

        let expect = oracle_block(&set, &store, &cfg, 2, Direction::NodesToEdges);
        for (a, e) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn empty_set_is_rejected() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 6, 6).unwrap();
        let mut tape = Tape::new();
        let block = wire_block(&mut tape, &store, &cfg, 1, Direction::NodesToEdges).unwrap();
        let empty = tape.constant(Tensor::zeros(0, 8));
        assert!(matches!(
            attention_pool(&mut tape, empty, &block),
            Err(ModelError::EmptySet)
        ));
    }

    #[test]
    fn model_forward_matches_oracle_and_stays_in_unit_interval() {
        let (graph, cfg, store, _) = gradient_check_instance();
        let edge_ids = [0usize, 1, 2, 3];
        let mut tape = Tape::new();
        let out = model_forward(&mut tape, &graph, &store, &cfg, &edge_ids).unwrap();
        let got = tape.value(out);
        assert_eq!(got.shape(), (4, 2));
        for &p in got.data() {
            assert!(p > 0.0 && p < 1.0);
        }
        let expect = oracle_model(&graph, &store, &cfg, &edge_ids);
        for (r, row) in expect.iter().enumerate() {
            for (c, &e) in row.iter().enumerate() {
                assert!(
                    (got.get(r, c) - e).abs() < 1e-10,
                    "({r},{c}): {} vs {e}",
                    got.get(r, c)
                );
            }
        }
    }

    #[test]
    fn classifier_consumes_layers_times_width_features() {
        let cfg = ModelConfig {
            width: 8,
            heads: 2,
            layers: 3,
            ffn_width: 16,
            num_labels: 1,
            activation: Activation::Relu,
        };
        let store = init_params(&cfg, 10, 1).unwrap();
        assert_eq!(store.get(CLS_WEIGHT_KEY).unwrap().shape(), (24, 1));
        let graph = Hypergraph::from_edge_lists(
            10,
            vec![vec![0, 1, 2], vec![3, 4], vec![5, 6, 7, 8, 9]],
            vec![0, 1, 2],
        )
        .unwrap();
        let probs = predict(&graph, &store, &cfg, &[0, 1, 2]).unwrap();
        assert_eq!(probs.shape(), (3, 1));
    }

    #[test]
    fn isolated_node_keeps_previous_embedding() {
        let (graph, cfg, store, _) = gradient_check_instance();
        let mut tape = Tape::new();
        let x0 = tape.param(&store, EMBEDDING_KEY).unwrap();
        let v2e = wire_block(&mut tape, &store, &cfg, 1, Direction::NodesToEdges).unwrap();
        let e2v = wire_block(&mut tape, &store, &cfg, 1, Direction::EdgesToNodes).unwrap();
        let (_, x1) = layer_forward(&mut tape, &graph, x0, &v2e, &e2v).unwrap();
        assert!(graph.is_isolated(5));
        let embedding = store.get(EMBEDDING_KEY).unwrap();
        for c in 0..cfg.width {
            assert_eq!(tape.value(x1).get(5, c).to_bits(), embedding.get(5, c).to_bits());
        }
    }

    #[test]
    fn hyperedge_order_shuffle_changes_nothing() {
        let (_, cfg, store, _) = gradient_check_instance();
        let ordered = Hypergraph::from_edge_lists(
            6,
            vec![vec![0, 1, 2], vec![1, 3], vec![2, 3, 4], vec![4]],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let shuffled = Hypergraph::from_edge_lists(
            6,
            vec![vec![2, 0, 1], vec![3, 1], vec![4, 2, 3], vec![4]],
            vec![0, 1, 2, 3],
        )
        .unwrap();
        let a = predict(&ordered, &store, &cfg, &[0, 1, 2, 3]).unwrap();
        let b = predict(&shuffled, &store, &cfg, &[0, 1, 2, 3]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= 1e-10);
        }
    }

    #[test]
    fn disjoint_components_are_independent() {
        let cfg = tiny_cfg();
        let graph = Hypergraph::from_edge_lists(
            6,
            vec![vec![0, 1], vec![1, 2], vec![3, 4, 5]],
            vec![0, 1, 2],
        )
        .unwrap();
        let store = init_params(&cfg, 6, 21).unwrap();
        let before = predict(&graph, &store, &cfg, &[0, 1]).unwrap();

        // Perturb only the second component's embedding rows.
        let mut perturbed = store.clone();
        let mut emb = perturbed.get(EMBEDDING_KEY).unwrap().clone();
        for v in 3..6 {
            for c in 0..cfg.width {
                emb.set(v, c, emb.get(v, c) + 0.37);
            }
        }
        perturbed.insert(EMBEDDING_KEY, emb);
        let after = predict(&graph, &perturbed, &cfg, &[0, 1]).unwrap();
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn forward_is_deterministic() {
        let (graph, cfg, store, _) = gradient_check_instance();
        let a = predict(&graph, &store, &cfg, &[0, 1, 2, 3]).unwrap();
        let b = predict(&graph, &store, &cfg, &[0, 1, 2, 3]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn node_relabeling_is_equivariant() {
        let cfg = tiny_cfg();
        let store = init_params(&cfg, 5, 8).unwrap();
        let graph = Hypergraph::from_edge_lists(
            5,
            vec![vec![0, 1, 2], vec![2, 3], vec![3, 4]],
            vec![0, 1, 2],
        )
        .unwrap();
        // Relabel nodes with v -> perm[v] and permute embedding rows to match.
        let perm = [2usize, 4, 0, 1, 3];
        let relabeled = Hypergraph::from_edge_lists(
            5,
            vec![
                vec![perm[0], perm[1], perm[2]],
                vec![perm[2], perm[3]],
                vec![perm[3], perm[4]],
            ],
            vec![0, 1, 2],
        )
        .unwrap();
        let mut permuted = store.clone();
        let emb = store.get(EMBEDDING_KEY).unwrap();
        let mut emb_perm = Tensor::zeros(5, cfg.width);
        for v in 0..5 {
            emb_perm.row_mut(perm[v]).copy_from_slice(emb.row(v));
        }
        permuted.insert(EMBEDDING_KEY, emb_perm);

        let a = predict(&graph, &store, &cfg, &[0, 1, 2]).unwrap();
        let b = predict(&relabeled, &permuted, &cfg, &[0, 1, 2]).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (graph, cfg, mut params, labels) = gradient_check_instance();
        let loss_of = |store: &ParamStore| {
            let mut tape = Tape::new();
            let pred = model_forward(&mut tape, &graph, store, &cfg, &[0, 1, 2, 3]).unwrap();
            let loss = tape.bce_loss(pred, &labels).unwrap();
            tape.value(loss).scalar_value()
        };
        let mut tape = Tape::new();
        let pred = model_forward(&mut tape, &graph, &params, &cfg, &[0, 1, 2, 3]).unwrap();
        let loss = tape.bce_loss(pred, &labels).unwrap();
        tape.backward(loss, &mut params).unwrap();

        // Sampled coordinates here; the verification suite sweeps them all.
        let err = finite_diff_check(&mut params, 1e-5, 4, 99, loss_of).unwrap();
        assert!(err <= 1e-4, "max relative error {err}");
    }
}
