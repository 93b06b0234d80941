use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Hypergraph transformer shape. Edge and node embeddings share the same
/// width so the two message-passing directions can reuse each other's
/// output without adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding width d; must be divisible by `heads`.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Hidden width of the position-wise feed-forward sublayer.
    pub ffn_width: usize,
    pub num_labels: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            width: 32,
            heads: 4,
            layers: 3,
            ffn_width: 64,
            num_labels: 1,
            activation: Activation::Relu,
        }
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.width < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "width {} must be at least 2",
                self.width
            )));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "width {} not divisible by heads {}",
                self.width, self.heads
            )));
        }
        if self.layers == 0 {
            return Err(ModelError::InvalidConfig("layers must be >= 1".into()));
        }
        if self.ffn_width == 0 || self.num_labels == 0 {
            return Err(ModelError::InvalidConfig(
                "ffn_width and num_labels must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// The two message-passing directions of each layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    NodesToEdges,
    EdgesToNodes,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::NodesToEdges, Direction::EdgesToNodes];

    fn tag(self) -> &'static str {
        match self {
            Direction::NodesToEdges => "v2e",
            Direction::EdgesToNodes => "e2v",
        }
    }
}

pub const EMBEDDING_KEY: &str = "embedding";
pub const CLS_WEIGHT_KEY: &str = "classifier.weight";
pub const CLS_BIAS_KEY: &str = "classifier.bias";

pub fn block_key(layer: usize, dir: Direction, part: &str) -> String {
    format!("layer{layer}.{}.{part}", dir.tag())
}

pub fn head_key(layer: usize, dir: Direction, head: usize, part: &str) -> String {
    format!("layer{layer}.{}.head{head}.{part}", dir.tag())
}

fn uniform_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
}

/// Every weight i.i.d. uniform(-1/sqrt(d), 1/sqrt(d)); layer-norm gains 1,
/// all biases 0. Deterministic in the seed.
pub fn init_params(
    config: &ModelConfig,
    num_nodes: usize,
    seed: u64,
) -> Result<ParamStore, ModelError> {
    config.validate()?;
    if num_nodes == 0 {
        return Err(ModelError::InvalidConfig("num_nodes must be >= 1".into()));
    }
    let d = config.width;
    let d_h = config.head_width();
    let d_m = config.ffn_width;
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();

    store.insert(EMBEDDING_KEY, uniform_tensor(&mut rng, num_nodes, d, bound));
    for layer in 1..=config.layers {
        for dir in Direction::BOTH {
            for head in 1..=config.heads {
                store.insert(
                    head_key(layer, dir, head, "query"),
                    uniform_tensor(&mut rng, 1, d_h, bound),
                );
                store.insert(
                    head_key(layer, dir, head, "key"),
                    uniform_tensor(&mut rng, d, d_h, bound),
                );
                store.insert(
                    head_key(layer, dir, head, "value"),
                    uniform_tensor(&mut rng, d, d_h, bound),
                );
            }
            store.insert(
                block_key(layer, dir, "out"),
                uniform_tensor(&mut rng, d, d, bound),
            );
            store.insert(
                block_key(layer, dir, "ffn.w1"),
                uniform_tensor(&mut rng, d, d_m, bound),
            );
            store.insert(block_key(layer, dir, "ffn.b1"), Tensor::zeros(1, d_m));
            store.insert(
                block_key(layer, dir, "ffn.w2"),
                uniform_tensor(&mut rng, d_m, d, bound),
            );
            store.insert(block_key(layer, dir, "ffn.b2"), Tensor::zeros(1, d));
            store.insert(
                block_key(layer, dir, "ln.gain"),
                Tensor::from_fn(1, d, |_, _| 1.0),
            );
            store.insert(block_key(layer, dir, "ln.bias"), Tensor::zeros(1, d));
        }
    }
    store.insert(
        CLS_WEIGHT_KEY,
        uniform_tensor(&mut rng, config.layers * d, config.num_labels, bound),
    );
    store.insert(CLS_BIAS_KEY, Tensor::zeros(1, config.num_labels));
    Ok(store)
}

/// Grows the embedding table to `new_num_nodes` rows. Existing rows are
/// preserved bitwise, new rows are drawn as in [`init_params`], and every
/// other parameter is untouched.
pub fn extend_embedding(
    params: &ParamStore,
    new_num_nodes: usize,
    seed: u64,
) -> Result<ParamStore, ModelError> {
    let embedding = params.get(EMBEDDING_KEY)?;
    let (old_rows, d) = embedding.shape();
    if new_num_nodes < old_rows {
        return Err(ModelError::ShrinkNotAllowed {
            from: old_rows,
            to: new_num_nodes,
        });
    }
    let mut out = params.clone();
    if new_num_nodes == old_rows {
        return Ok(out);
    }
    let bound = 1.0 / (d as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grown = Tensor::zeros(new_num_nodes, d);
    for r in 0..old_rows {
        grown.row_mut(r).copy_from_slice(embedding.row(r));
    }
    for r in old_rows..new_num_nodes {
        for c in 0..d {
            grown.set(r, c, rng.gen_range(-bound..bound));
        }
    }
    out.insert(EMBEDDING_KEY, grown);
    Ok(out)
}
