//! Optimization loop shared by both model halves: Adam with a global
//! gradient-norm clip and L2 weight decay, deterministic epoch schedules,
//! best-checkpoint retention, and a finite-difference harness that audits
//! analytic gradients against central differences.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::GenExample;
use crate::encoder::{encode_graph_tape, init_encoder_params, relation_indices, EncoderConfig};
use crate::error::{Error, Result};
use crate::generator::{
    init_generator_params, prepare_example, total_generation_loss, GenConfig, PreparedGenExample,
};
use crate::kg::KnowledgeGraph;
use crate::math::{stream_rng, GradMap, Matrix, NeighborLists, ParamSet, Tape};
use crate::recommender::{
    init_recommender_params, pooled_history, rec_loss_tape, RecTrainingExample,
};
use crate::vocab::Vocabulary;

/// Central-difference step size used by the gradient audit.
pub const FD_STEP: f64 = 1e-5;

/// Coordinates whose ReLU pre-activations come closer to zero than this are
/// skipped by the audit: a kink between the two perturbed points makes the
/// numerical derivative meaningless.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr_rec: f64,
    pub lr_gen: f64,
    pub batch_rec: usize,
    pub batch_gen: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub clip_threshold: f64,
    pub l2_coeff: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_rec: 3e-3,
            lr_gen: 1e-1,
            batch_rec: 128,
            batch_gen: 32,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
            clip_threshold: 0.1,
            l2_coeff: 1e-5,
            lambda1: 1.5,
            lambda2: 0.025,
            lambda3: 0.1,
            epochs: 30,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_rec < 0.0 || self.lr_gen < 0.0 {
            return Err(Error::data("learning rates must be nonnegative"));
        }
        if self.batch_rec == 0 || self.batch_gen == 0 {
            return Err(Error::data("batch sizes must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::data("Adam betas must lie in [0, 1)"));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::data("Adam epsilon must be positive"));
        }
        if self.clip_threshold <= 0.0 {
            return Err(Error::data("clip threshold must be positive"));
        }
        if self.l2_coeff < 0.0 {
            return Err(Error::data("L2 coefficient must be nonnegative"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return Err(Error::data("loss weights must be nonnegative"));
        }
        if self.epochs == 0 {
            return Err(Error::data("epoch count must be at least 1"));
        }
        Ok(())
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    m: BTreeMap<String, Matrix>,
    v: BTreeMap<String, Matrix>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Apply one optimizer step in place and return the post-clip gradient norm.
///
/// Every parameter participates: tensors absent from `grads` contribute a
/// zero gradient, so weight decay still reaches them. The L2 term is added
/// before the global-norm clip, and moment estimates are bias-corrected.
pub fn clip_and_step(
    params: &mut ParamSet,
    grads: &GradMap,
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    for (name, g) in grads {
        if !g.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite gradient for parameter {name:?}"
            )));
        }
    }
    let mut effective: BTreeMap<String, Matrix> = BTreeMap::new();
    let mut sq = 0.0;
    for (name, theta) in params.iter() {
        let mut g = match grads.get(name) {
            Some(g) => g.clone(),
            None => Matrix::zeros(theta.rows(), theta.cols()),
        };
        if cfg.l2_coeff > 0.0 {
            for (gi, ti) in g.data_mut().iter_mut().zip(theta.data()) {
                *gi += cfg.l2_coeff * ti;
            }
        }
        sq += g.sq_sum();
        effective.insert(name.clone(), g);
    }
    let norm = sq.sqrt();
    let scale = if norm > cfg.clip_threshold {
        cfg.clip_threshold / norm
    } else {
        1.0
    };
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (name, grad) in &effective {
        let theta = params.get_mut(name);
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(theta.rows(), theta.cols()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Matrix::zeros(theta.rows(), theta.cols()));
        for i in 0..theta.data().len() {
            let g = grad.data()[i] * scale;
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            theta.data_mut()[i] -= lr * (mi / bc1) / ((vi / bc2).sqrt() + cfg.epsilon);
        }
    }
    Ok(norm * scale)
}

/// Recommendation loss over one batch, differentiated end to end through the
/// graph encoder. Returns the loss value, gradients for every touched
/// parameter, and the smallest |pre-activation| any ReLU saw.
pub fn rec_training_loss(
    params: &ParamSet,
    graph: &KnowledgeGraph,
    neighbor_index: &[Arc<NeighborLists>],
    enc_cfg: &EncoderConfig,
    batch: &[&RecTrainingExample],
) -> Result<(f64, GradMap, f64)> {
    let mut tape = Tape::new();
    let table = encode_graph_tape(&mut tape, params, neighbor_index, enc_cfg);
    let loss = rec_loss_tape(&mut tape, params, table, graph, batch)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss);
    Ok((value, grads, tape.relu_margin()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation loss.
    pub params: ParamSet,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// True when a non-finite loss or gradient cut training short; `params`
    /// still holds the last finite checkpoint.
    pub diverged: bool,
}

/// Write a loss curve as `epoch,train_loss,val_loss` CSV.
pub fn write_loss_curve(path: &Path, curve: &[EpochRecord]) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "epoch,train_loss,val_loss")?;
    for rec in curve {
        writeln!(out, "{},{},{}", rec.epoch, rec.train_loss, rec.val_loss)?;
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Shared epoch driver. `batch_loss` maps shuffled training indices to a
/// loss/gradient pair; `val_loss` scores the whole validation set. Keeps the
/// best-validation parameters, stops early after `patience` stale epochs,
/// and treats any non-finite loss as divergence rather than an error.
#[allow(clippy::too_many_arguments)]
fn run_epochs(
    cfg: &TrainConfig,
    label: &str,
    n_train: usize,
    batch_size: usize,
    lr: f64,
    mut params: ParamSet,
    mut batch_loss: impl FnMut(&ParamSet, &[usize]) -> Result<(f64, GradMap)>,
    mut val_loss: impl FnMut(&ParamSet) -> Result<f64>,
) -> Result<TrainOutcome> {
    let mut state = AdamState::new();
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut curve = Vec::new();
    let mut diverged = false;

    'epochs: for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut stream_rng(cfg.seed, &format!("{label}.epoch{epoch}")));
        let mut weighted = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(batch_size) {
            let (loss, grads) = batch_loss(&params, chunk)?;
            if !loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            match clip_and_step(&mut params, &grads, &mut state, lr, cfg) {
                Ok(_) => {}
                Err(Error::Numerical(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            weighted += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_loss = weighted / seen as f64;
        let val = val_loss(&params)?;
        if !val.is_finite() {
            diverged = true;
            break;
        }
        curve.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val,
        });
        if val < best_val {
            best_val = val;
            best_epoch = epoch;
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }

    if best_epoch == 0 {
        // Nothing ever improved on infinity, which only happens when the
        // very first epoch diverged; fall back to the initial parameters.
        best = params;
    }
    Ok(TrainOutcome {
        params: best,
        curve,
        best_epoch,
        best_val,
        diverged,
    })
}

/// Train the graph encoder and recommendation head from scratch.
///
/// Only new, liked recommendations are kept. When the validation split has
/// no trainable examples the full training set stands in for it, so
/// deliberate overfitting runs still checkpoint sensibly.
pub fn train_recommender(
    graph: &KnowledgeGraph,
    enc_cfg: &EncoderConfig,
    d_q: usize,
    train: &[RecTrainingExample],
    valid: &[RecTrainingExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    let train: Vec<&RecTrainingExample> = train.iter().filter(|e| e.trainable()).collect();
    if train.is_empty() {
        return Err(Error::data("no trainable recommendation examples"));
    }
    let valid: Vec<&RecTrainingExample> = valid.iter().filter(|e| e.trainable()).collect();

    let mut params = ParamSet::new();
    init_encoder_params(&mut params, graph, enc_cfg, cfg.seed);
    init_recommender_params(&mut params, enc_cfg.d_f, d_q, cfg.seed);

    let index = relation_indices(graph);
    run_epochs(
        cfg,
        "rec",
        train.len(),
        cfg.batch_rec,
        cfg.lr_rec,
        params,
        |params, chunk| {
            let batch: Vec<&RecTrainingExample> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads, _) = rec_training_loss(params, graph, &index, enc_cfg, &batch)?;
            Ok((loss, grads))
        },
        |params| {
            let held_out = if valid.is_empty() { &train } else { &valid };
            let (loss, _, _) = rec_training_loss(params, graph, &index, enc_cfg, held_out)?;
            Ok(loss)
        },
    )
}

/// Pair each generation example with the pooled history vector produced by
/// a trained recommender, yielding self-contained training records.
pub fn prepare_gen_examples(
    examples: &[GenExample],
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    rec_params: &ParamSet,
    entity_table: &Matrix,
    gen_cfg: &GenConfig,
) -> Result<Vec<PreparedGenExample>> {
    examples
        .iter()
        .map(|ex| {
            let pooled = pooled_history(rec_params, entity_table, &ex.history.entity_ids)?;
            prepare_example(ex, graph, vocab, Matrix::row_vector(&pooled), gen_cfg)
        })
        .collect()
}

/// Train the response generator against a frozen entity table.
///
/// The entity encoding and pooled history vectors baked into the prepared
/// examples stay fixed; only generator parameters move. Validation falls
/// back to the training set when empty, as for the recommender.
pub fn train_generator(
    entity_table: &Matrix,
    vocab_size: usize,
    gen_cfg: &GenConfig,
    train: &[PreparedGenExample],
    valid: &[PreparedGenExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    gen_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::data("no generation examples to train on"));
    }
    let mut params = ParamSet::new();
    init_generator_params(
        &mut params,
        gen_cfg,
        vocab_size,
        entity_table.rows(),
        cfg.seed,
    );
    run_epochs(
        cfg,
        "gen",
        train.len(),
        cfg.batch_gen,
        cfg.lr_gen,
        params,
        |params, chunk| {
            let batch: Vec<PreparedGenExample> = chunk.iter().map(|&i| train[i].clone()).collect();
            let (bd, grads, _) = total_generation_loss(
                params,
                entity_table,
                gen_cfg,
                &batch,
                cfg.lambda1,
                cfg.lambda2,
            )?;
            Ok((bd.l_total, grads))
        },
        |params| {
            let held_out = if valid.is_empty() { train } else { valid };
            let (bd, _, _) = total_generation_loss(
                params,
                entity_table,
                gen_cfg,
                held_out,
                cfg.lambda1,
                cfg.lambda2,
            )?;
            Ok(bd.l_total)
        },
    )
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    /// Worst relative error across all sampled coordinates.
    pub max_rel_err: f64,
    pub worst_tensor: String,
    /// Coordinates compared against central differences.
    pub checked: usize,
    /// Coordinates skipped because a perturbed pass grazed a ReLU kink.
    pub skipped: usize,
    /// Tensors the loss never touched (no gradient to audit).
    pub untouched: Vec<String>,
}

/// Audit analytic gradients with central finite differences.
///
/// Samples up to `coords_per_tensor` coordinates from every tensor that
/// received a gradient, using the relative error
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). A coordinate is
/// skipped when either perturbed evaluation reports a ReLU pre-activation
/// within [`KINK_MARGIN`] of zero. Tensors the loss never reads are listed
/// in the report instead of being checked against zero, where central
/// differences only measure roundoff noise.
pub fn finite_difference_check<F>(
    f: F,
    params: &ParamSet,
    step: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&ParamSet) -> Result<(f64, GradMap, f64)>,
{
    if step <= 0.0 || coords_per_tensor == 0 {
        return Err(Error::data("step and coordinate count must be positive"));
    }
    let (_, grads, _) = f(params)?;
    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        checked: 0,
        skipped: 0,
        untouched: Vec::new(),
    };
    for (name, theta) in params.iter() {
        let Some(grad) = grads.get(name) else {
            report.untouched.push(name.clone());
            continue;
        };
        let numel = theta.rows() * theta.cols();
        let mut coords: Vec<usize> = (0..numel).collect();
        coords.shuffle(&mut stream_rng(seed, &format!("fd.{name}")));
        coords.truncate(coords_per_tensor);
        for idx in coords {
            let orig = theta.data()[idx];
            work.get_mut(name).data_mut()[idx] = orig + step;
            let (up, _, margin_up) = f(&work)?;
            work.get_mut(name).data_mut()[idx] = orig - step;
            let (down, _, margin_down) = f(&work)?;
            work.get_mut(name).data_mut()[idx] = orig;
            if margin_up < KINK_MARGIN || margin_down < KINK_MARGIN {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * step);
            let analytic = grad.data()[idx];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.clone();
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
