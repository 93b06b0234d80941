use super::params::{
    block_key, head_key, Activation, Direction, ModelConfig, CLS_BIAS_KEY, CLS_WEIGHT_KEY,
    EMBEDDING_KEY, LAYER_NORM_EPS,
};
use super::ModelError;
use crate::hypergraph::Hypergraph;
use crate::numerics::{NodeId, ParamStore, Tape, Tensor};

struct WiredHead {
    query: NodeId,
    key: NodeId,
    value: NodeId,
}

/// One direction's propagation block (attention pooling + FFNN + LN)
/// wired onto a tape.
pub struct WiredBlock {
    heads: Vec<WiredHead>,
    out: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
    ln_gain: NodeId,
    ln_bias: NodeId,
    activation: Activation,
}

pub fn wire_block(
    tape: &mut Tape,
    store: &ParamStore,
    config: &ModelConfig,
    layer: usize,
    dir: Direction,
) -> Result<WiredBlock, ModelError> {
    let mut heads = Vec::with_capacity(config.heads);
    for head in 1..=config.heads {
        heads.push(WiredHead {
            query: tape.param(store, &head_key(layer, dir, head, "query"))?,
            key: tape.param(store, &head_key(layer, dir, head, "key"))?,
            value: tape.param(store, &head_key(layer, dir, head, "value"))?,
        });
    }
    Ok(WiredBlock {
        heads,
        out: tape.param(store, &block_key(layer, dir, "out"))?,
        ffn_w1: tape.param(store, &block_key(layer, dir, "ffn.w1"))?,
        ffn_b1: tape.param(store, &block_key(layer, dir, "ffn.b1"))?,
        ffn_w2: tape.param(store, &block_key(layer, dir, "ffn.w2"))?,
        ffn_b2: tape.param(store, &block_key(layer, dir, "ffn.b2"))?,
        ln_gain: tape.param(store, &block_key(layer, dir, "ln.gain"))?,
        ln_bias: tape.param(store, &block_key(layer, dir, "ln.bias"))?,
        activation: config.activation,
    })
}

fn apply_activation(tape: &mut Tape, x: NodeId, activation: Activation) -> NodeId {
    match activation {
        Activation::Relu => tape.relu(x),
        Activation::Sigmoid => tape.sigmoid(x),
    }
}

/// Residual FFNN plus layer norm applied row-wise:
/// `LN(y + FFNN(y))` with `FFNN(y) = act(y W1 + b1) W2 + b2`.
fn ffn_ln_rows(tape: &mut Tape, y: NodeId, block: &WiredBlock) -> Result<NodeId, ModelError> {
    let h = tape.matmul(y, block.ffn_w1)?;
    let h = tape.add_bias(h, block.ffn_b1)?;
    let a = apply_activation(tape, h, block.activation);
    let f = tape.matmul(a, block.ffn_w2)?;
    let f = tape.add_bias(f, block.ffn_b2)?;
    let z = tape.add(y, f)?;
    Ok(tape.layer_norm_rows(z, block.ln_gain, block.ln_bias, LAYER_NORM_EPS)?)
}

/// Multi-head attention pooling of a variable-size set into one vector:
/// each head scores the set against a learned query, softmax-weights the
/// value projections, and the concatenated heads pass through the output
/// projection.
pub fn attention_pool(
    tape: &mut Tape,
    x_set: NodeId,
    block: &WiredBlock,
) -> Result<NodeId, ModelError> {
    let m = tape.value(x_set).rows();
    if m == 0 {
        return Err(ModelError::EmptySet);
    }
    let rows: Vec<usize> = (0..m).collect();
    let mut pooled = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let keys = tape.matmul(x_set, head.key)?;
        let values = tape.matmul(x_set, head.value)?;
        pooled.push(tape.set_attention(head.query, keys, values, rows.clone())?);
    }
    let concat = tape.concat_cols(pooled)?;
    Ok(tape.matmul(concat, block.out)?)
}

/// `LN(Y + FFNN(Y))` over the pooled set embedding `Y = MHA(X_set)`.
pub fn block_forward(
    tape: &mut Tape,
    x_set: NodeId,
    block: &WiredBlock,
) -> Result<NodeId, ModelError> {
    let y = attention_pool(tape, x_set, block)?;
    ffn_ln_rows(tape, y, block)
}

/// Pools each listed row set of `inputs` with shared per-head key/value
/// projections, then applies the output projection, FFNN, and LN batched
/// over the stacked rows.
fn pool_sets<'a>(
    tape: &mut Tape,
    inputs: NodeId,
    sets: impl Iterator<Item = &'a [usize]>,
    block: &WiredBlock,
) -> Result<NodeId, ModelError> {
    let mut projections = Vec::with_capacity(block.heads.len());
    for head in &block.heads {
        let keys = tape.matmul(inputs, head.key)?;
        let values = tape.matmul(inputs, head.value)?;
        projections.push((head.query, keys, values));
    }
    let mut rows = Vec::new();
    for set in sets {
        debug_assert!(!set.is_empty());
        let mut pooled = Vec::with_capacity(projections.len());
        for &(query, keys, values) in &projections {
            pooled.push(tape.set_attention(query, keys, values, set.to_vec())?);
        }
        rows.push(tape.concat_cols(pooled)?);
    }
    if rows.is_empty() {
        return Err(ModelError::EmptySet);
    }
    let stacked = tape.concat_rows(rows)?;
    let y = tape.matmul(stacked, block.out)?;
    ffn_ln_rows(tape, y, block)
}

/// One message-passing layer: edges pool their nodes' previous embeddings,
/// then nodes pool the fresh edge embeddings of their incident edges.
/// Isolated nodes carry their previous embedding through unchanged.
pub fn layer_forward(
    tape: &mut Tape,
    graph: &Hypergraph,
    x_prev: NodeId,
    v2e: &WiredBlock,
    e2v: &WiredBlock,
) -> Result<(NodeId, NodeId), ModelError> {
    let edge_sets = (0..graph.num_edges()).map(|e| graph.edge_nodes(e));
    let edges = pool_sets(tape, x_prev, edge_sets, v2e)?;

    let active: Vec<usize> = (0..graph.num_nodes())
        .filter(|&v| !graph.is_isolated(v))
        .collect();
    let node_sets = active.iter().map(|&v| graph.node_edges(v));
    let processed = pool_sets(tape, edges, node_sets, e2v)?;

    let nodes = if active.len() == graph.num_nodes() {
        processed
    } else {
        let mut parts = Vec::with_capacity(graph.num_nodes());
        let mut next_active = 0;
        for v in 0..graph.num_nodes() {
            if graph.is_isolated(v) {
                parts.push(tape.gather_rows(x_prev, vec![v]));
            } else {
                parts.push(tape.gather_rows(processed, vec![next_active]));
                next_active += 1;
            }
        }
        tape.concat_rows(parts)?
    };
    Ok((edges, nodes))
}

/// Runs all layers from the embedding table and predicts per-label
/// probabilities for the requested edges from their concatenated per-layer
/// embeddings. Output entries are strictly inside (0, 1).
pub fn model_forward(
    tape: &mut Tape,
    graph: &Hypergraph,
    store: &ParamStore,
    config: &ModelConfig,
    edge_ids: &[usize],
) -> Result<NodeId, ModelError> {
    config.validate()?;
    for &e in edge_ids {
        if e >= graph.num_edges() {
            return Err(ModelError::EdgeOutOfRange {
                edge: e,
                num_edges: graph.num_edges(),
            });
        }
    }
    let embedding = tape.param(store, EMBEDDING_KEY)?;
    let em_rows = tape.value(embedding).rows();
    if em_rows != graph.num_nodes() {
        return Err(ModelError::InvalidConfig(format!(
            "embedding has {em_rows} rows but the graph has {} nodes",
            graph.num_nodes()
        )));
    }

    let mut x = embedding;
    let mut picked = Vec::with_capacity(config.layers);
    for layer in 1..=config.layers {
        let v2e = wire_block(tape, store, config, layer, Direction::NodesToEdges)?;
        let e2v = wire_block(tape, store, config, layer, Direction::EdgesToNodes)?;
        let (edges, nodes) = layer_forward(tape, graph, x, &v2e, &e2v)?;
        picked.push(tape.gather_rows(edges, edge_ids.to_vec()));
        x = nodes;
    }
    let concat = tape.concat_cols(picked)?;
    let cls_w = tape.param(store, CLS_WEIGHT_KEY)?;
    let cls_b = tape.param(store, CLS_BIAS_KEY)?;
    let logits = tape.matmul(concat, cls_w)?;
    let logits = tape.add_bias(logits, cls_b)?;
    Ok(tape.sigmoid(logits))
}

/// Inference-only forward pass; the tape is discarded.
pub fn predict(
    graph: &Hypergraph,
    store: &ParamStore,
    config: &ModelConfig,
    edge_ids: &[usize],
) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let out = model_forward(&mut tape, graph, store, config, edge_ids)?;
    Ok(tape.value(out).clone())
}
