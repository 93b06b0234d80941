//! Hypergraph-transformer pretrain-then-finetune pipeline for clinical-style
//! prediction over visit/feature incidence data.
//!
//! Visits are hyperedges, medical codes are nodes. A set-attention
//! transformer passes messages in two steps per layer (nodes to edges, then
//! edges to nodes) and a sigmoid head predicts per-visit labels from the
//! concatenated per-layer edge embeddings. Training runs in two stages:
//! supervised pretraining on the basic-feature graph over the whole
//! population, then finetuning on the smaller graph that carries extra
//! features, with two stabilizers:
//!
//! - a consistency penalty against an exponential-moving-average copy of
//!   the parameters, which damps aggressive updates, and
//! - a closed-form multiplicative reweighting of the two patient groups
//!   (basic-only vs extra) on the probability simplex, driven by gradient
//!   similarity.
//!
//! Everything is deterministic given a seed and double precision
//! throughout, verified by finite-difference gradient checks, brute-force
//! metric oracles, and a synthetic cohort generator with an exact
//! naive-Bayes scoring oracle.
//!
//! Start from the runnable examples (`cargo run --example <name>`) or the
//! `hypercare` binary (`generate | pretrain | finetune | evaluate |
//! run-all | grad-check | ablate`).

pub mod cohort;
pub mod eval;
pub mod hypergraph;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod training;
