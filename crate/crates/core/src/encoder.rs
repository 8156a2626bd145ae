//! Relational graph convolution encoder with layer aggregation.
//!
//! Each layer computes, per entity i,
//! `relu(sum_r mean_{j in N_i^r} h_j W_r + h_i W_0)`; the final entity table
//! concatenates the input and every layer output and projects the result.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::math::{stream_rng, Matrix, NeighborLists, ParamSet, Tape, Var};

/// Encoder dimensions: per-layer width `d_k`, output width `d_f`, and the
/// number of convolution layers.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_k: usize,
    pub d_f: usize,
    pub layers: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_k: 200,
            d_f: 200,
            layers: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 || self.d_f == 0 || self.layers == 0 {
            return Err(Error::shape(
                "encoder dimensions and layer count must be positive",
            ));
        }
        Ok(())
    }
}

/// Per-relation neighbor lists in tape form, built once per graph and shared
/// across forward passes.
pub fn relation_indices(graph: &KnowledgeGraph) -> Vec<Arc<NeighborLists>> {
    (0..graph.num_relations())
        .map(|r| {
            Arc::new(NeighborLists {
                lists: graph.neighbor_lists(r).to_vec(),
            })
        })
        .collect()
}

/// Names of every encoder parameter for a given configuration.
pub fn encoder_param_names(num_relations: usize, cfg: &EncoderConfig) -> Vec<String> {
    let mut names = vec!["enc.base".to_string()];
    for l in 0..cfg.layers {
        names.push(format!("enc.l{l}.w0"));
        for r in 0..num_relations {
            names.push(format!("enc.l{l}.r{r}.w"));
        }
    }
    names.push("enc.agg.w".to_string());
    names.push("enc.agg.b".to_string());
    names
}

/// Insert freshly initialized encoder parameters. Weights and the base
/// embedding table start uniform in [-0.1, 0.1]; the aggregation bias starts
/// at zero.
pub fn init_encoder_params(
    params: &mut ParamSet,
    graph: &KnowledgeGraph,
    cfg: &EncoderConfig,
    seed: u64,
) {
    let n = graph.num_entities();
    params.insert("enc.base", uniform(n, cfg.d_k, seed, "enc.base"));
    for l in 0..cfg.layers {
        let name = format!("enc.l{l}.w0");
        params.insert(&name, uniform(cfg.d_k, cfg.d_k, seed, &name));
        for r in 0..graph.num_relations() {
            let name = format!("enc.l{l}.r{r}.w");
            params.insert(&name, uniform(cfg.d_k, cfg.d_k, seed, &name));
        }
    }
    let agg_in = (cfg.layers + 1) * cfg.d_k;
    params.insert("enc.agg.w", uniform(agg_in, cfg.d_f, seed, "enc.agg.w"));
    params.init_zeros("enc.agg.b", 1, cfg.d_f);
}

fn uniform(rows: usize, cols: usize, seed: u64, label: &str) -> Matrix {
    let mut rng = stream_rng(seed, label);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-0.1..0.1))
}

/// One convolution layer on the tape. `neighbor_index` holds one entry per
/// relation; `h` is the |V| x d_k input.
pub fn rgcn_layer_forward(
    tape: &mut Tape,
    h: Var,
    w0: Var,
    relation_weights: &[Var],
    neighbor_index: &[Arc<NeighborLists>],
) -> Var {
    assert_eq!(relation_weights.len(), neighbor_index.len());
    let mut acc = tape.matmul(h, w0);
    for (wr, index) in relation_weights.iter().zip(neighbor_index) {
        let avg = tape.neighbor_avg(h, index.clone());
        let term = tape.matmul(avg, *wr);
        acc = tape.add(acc, term);
    }
    tape.relu(acc)
}

/// Full encoder pass: L convolution layers plus layer aggregation. Returns
/// the |V| x d_f entity table node.
pub fn encode_graph_tape(
    tape: &mut Tape,
    params: &ParamSet,
    neighbor_index: &[Arc<NeighborLists>],
    cfg: &EncoderConfig,
) -> Var {
    let base = tape.param("enc.base", params.get("enc.base").clone());
    let mut layer_outputs = vec![base];
    let mut h = base;
    for l in 0..cfg.layers {
        let w0 = tape.param(
            &format!("enc.l{l}.w0"),
            params.get(&format!("enc.l{l}.w0")).clone(),
        );
        let relation_weights: Vec<Var> = (0..neighbor_index.len())
            .map(|r| {
                let name = format!("enc.l{l}.r{r}.w");
                tape.param(&name, params.get(&name).clone())
            })
            .collect();
        h = rgcn_layer_forward(tape, h, w0, &relation_weights, neighbor_index);
        layer_outputs.push(h);
    }
    let concat = tape.concat_cols(&layer_outputs);
    let agg_w = tape.param("enc.agg.w", params.get("enc.agg.w").clone());
    let agg_b = tape.param("enc.agg.b", params.get("enc.agg.b").clone());
    let projected = tape.matmul(concat, agg_w);
    tape.add_row(projected, agg_b)
}

/// Frozen-parameter encoding: run the tape forward and return the table.
pub fn encode_graph(
    params: &ParamSet,
    graph: &KnowledgeGraph,
    cfg: &EncoderConfig,
) -> Result<Matrix> {
    cfg.validate()?;
    let index = relation_indices(graph);
    let mut tape = Tape::new();
    let h = encode_graph_tape(&mut tape, params, &index, cfg);
    let out = tape.value(h).clone();
    if !out.is_finite() {
        return Err(Error::numerical("entity table contains non-finite values"));
    }
    Ok(out)
}

/// Rows of the entity table for the graph's items, in `item_ids` order.
pub fn item_rows(tape: &mut Tape, entity_table: Var, graph: &KnowledgeGraph) -> Var {
    tape.gather_rows(entity_table, graph.item_ids())
}
