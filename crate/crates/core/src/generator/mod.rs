//! Response generation: a transformer encoder-decoder conditioned on the
//! pooled entity vector, trained with the generation, bag-of-entity, and
//! infusion losses, and decoded greedily with an entity-biased score.

mod transformer;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::math::{stream_rng, GradMap, Matrix, ParamSet, Tape, Var};
use crate::vocab::{Vocabulary, BOS, EOS, SPLIT};

pub use transformer::{causal_mask, sinusoidal_positions, MASK_VALUE};

use transformer::{decoder_layer, encoder_layer};

/// Generator shape. `d_t` is both the token embedding width and the decoder
/// hidden width; the output projection reuses the embedding matrix, which
/// forces those two to be equal.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub d_t: usize,
    /// Entity feature width; must match the table produced by the graph
    /// encoder.
    pub d_f: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    /// Maximum context length in tokens; older tokens are dropped first.
    pub max_context: usize,
    /// Maximum response length in tokens.
    pub max_response: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            d_t: 300,
            d_f: 200,
            enc_layers: 2,
            dec_layers: 2,
            heads: 2,
            max_context: 256,
            max_response: 20,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_t == 0
            || self.d_f == 0
            || self.enc_layers == 0
            || self.dec_layers == 0
            || self.heads == 0
            || self.max_context == 0
            || self.max_response == 0
        {
            return Err(Error::shape("generator dimensions must all be nonzero"));
        }
        if !self.d_t.is_multiple_of(self.heads) {
            return Err(Error::shape(format!(
                "width {} is not divisible by {} heads",
                self.d_t, self.heads
            )));
        }
        Ok(())
    }
}

fn block_names(prefix: &str) -> Vec<String> {
    let mut names: Vec<String> = ["wq", "wk", "wv", "wo"]
        .iter()
        .map(|s| format!("{prefix}.{s}"))
        .collect();
    names.push(format!("{prefix}.norm.gamma"));
    names.push(format!("{prefix}.norm.beta"));
    names
}

fn ffn_names(prefix: &str) -> Vec<String> {
    vec![
        format!("{prefix}.w1"),
        format!("{prefix}.b1"),
        format!("{prefix}.w2"),
        format!("{prefix}.b2"),
        format!("{prefix}.norm.gamma"),
        format!("{prefix}.norm.beta"),
    ]
}

/// Stable parameter names for checkpointing.
pub fn generator_param_names(cfg: &GenConfig) -> Vec<String> {
    let mut names = vec!["gen.embed".to_string()];
    for l in 0..cfg.enc_layers {
        names.extend(block_names(&format!("gen.enc{l}.attn")));
        names.extend(ffn_names(&format!("gen.enc{l}.ffn")));
    }
    for l in 0..cfg.dec_layers {
        names.extend(block_names(&format!("gen.dec{l}.self")));
        names.extend(block_names(&format!("gen.dec{l}.cross")));
        names.extend(ffn_names(&format!("gen.dec{l}.ffn")));
    }
    names.extend(
        [
            "gen.phi",
            "gen.b_res",
            "gen.w_align",
            "gen.b_ent",
            "gen.phi_prime",
            "gen.b_infuse",
        ]
        .iter()
        .map(|s| s.to_string()),
    );
    names
}

/// Seeded initialization: weights uniform in [-0.1, 0.1], biases zero,
/// normalization gains one.
pub fn init_generator_params(
    params: &mut ParamSet,
    cfg: &GenConfig,
    vocab_size: usize,
    num_entities: usize,
    seed: u64,
) {
    let d = cfg.d_t;
    let shape = |name: &str| -> (usize, usize) {
        if name == "gen.embed" {
            (vocab_size, d)
        } else if name == "gen.phi" {
            (d + cfg.d_f, d)
        } else if name == "gen.b_res" || name == "gen.b_infuse" {
            (1, vocab_size)
        } else if name == "gen.w_align" {
            (d + cfg.d_f, cfg.d_f)
        } else if name == "gen.b_ent" {
            (1, num_entities)
        } else if name == "gen.phi_prime" {
            (cfg.d_f, d)
        } else if name.ends_with(".w1") {
            (d, 4 * d)
        } else if name.ends_with(".b1") {
            (1, 4 * d)
        } else if name.ends_with(".w2") {
            (4 * d, d)
        } else if name.ends_with(".b2")
            || name.ends_with(".norm.gamma")
            || name.ends_with(".norm.beta")
        {
            (1, d)
        } else {
            (d, d)
        }
    };
    for name in generator_param_names(cfg) {
        let (r, c) = shape(&name);
        let value = if name.ends_with(".norm.gamma") {
            Matrix::filled(r, c, 1.0)
        } else if name.starts_with("gen.b_") || name.ends_with(".b1") || name.ends_with(".b2") {
            Matrix::zeros(r, c)
        } else {
            let mut rng = stream_rng(seed, &name);
            Matrix::from_fn(r, c, |_, _| rand::Rng::random_range(&mut rng, -0.1..0.1))
        };
        params.insert(&name, value);
    }
}

/// Insert every parameter as a named tape leaf (training).
pub fn bind_params(tape: &mut Tape, params: &ParamSet) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, m)| (n.clone(), tape.param(n, m.clone())))
        .collect()
}

/// Insert every parameter as an unnamed constant leaf (frozen inference).
pub fn bind_constants(tape: &mut Tape, params: &ParamSet) -> BTreeMap<String, Var> {
    params
        .iter()
        .map(|(n, m)| (n.clone(), tape.leaf(m.clone())))
        .collect()
}

/// Token stream for a context: messages joined by the separator token,
/// truncated to the most recent `max_context` tokens. An empty context
/// becomes a single begin-of-sequence token.
pub fn context_token_ids(texts: &[String], vocab: &Vocabulary, max_context: usize) -> Vec<usize> {
    let mut ids = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        if i > 0 {
            ids.push(SPLIT);
        }
        ids.extend(vocab.encode(text));
    }
    if ids.len() > max_context {
        ids.drain(..ids.len() - max_context);
    }
    if ids.is_empty() {
        ids.push(BOS);
    }
    ids
}

fn embed_sequence(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    token_ids: &[usize],
    d: usize,
) -> Var {
    let emb = tape.gather_rows(vars["gen.embed"], token_ids);
    let emb = tape.scale(emb, (d as f64).sqrt());
    let pe = tape.leaf(sinusoidal_positions(token_ids.len(), d));
    tape.add(emb, pe)
}

/// Run the context tokens through the encoder stack.
pub fn encode_context_tape(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    token_ids: &[usize],
    cfg: &GenConfig,
) -> Var {
    let mut x = embed_sequence(tape, vars, token_ids, cfg.d_t);
    for l in 0..cfg.enc_layers {
        x = encoder_layer(tape, vars, &format!("gen.enc{l}"), x, cfg.heads);
    }
    x
}

/// Frozen-parameter context encoding.
pub fn encode_context(params: &ParamSet, cfg: &GenConfig, token_ids: &[usize]) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = bind_constants(&mut tape, params);
    let memory = encode_context_tape(&mut tape, &vars, token_ids, cfg);
    let m = tape.value(memory).clone();
    if !m.is_finite() {
        return Err(Error::numerical(
            "context encoding produced non-finite values",
        ));
    }
    Ok(m)
}

/// Teacher-forced decoder pass over `input_ids`, returning one hidden row
/// per input position.
pub fn decoder_forward(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &GenConfig,
    memory: Var,
    input_ids: &[usize],
) -> Var {
    let mut x = embed_sequence(tape, vars, input_ids, cfg.d_t);
    let mask = tape.leaf(causal_mask(input_ids.len()));
    for l in 0..cfg.dec_layers {
        x = decoder_layer(
            tape,
            vars,
            &format!("gen.dec{l}"),
            x,
            memory,
            cfg.heads,
            mask,
        );
    }
    x
}

/// Broadcast the pooled entity vector to `n` rows and append it to each row
/// of `s`.
fn augment_with_pooled(tape: &mut Tape, s: Var, pooled: Var, n: usize) -> Var {
    let rep = tape.gather_rows(pooled, &vec![0; n]);
    tape.concat_cols(&[s, rep])
}

/// Vocabulary logits: phi([s; c_E]) E_m^T + b_res.
fn response_logits(tape: &mut Tape, vars: &BTreeMap<String, Var>, s: Var, pooled: Var) -> Var {
    let n = tape.value(s).rows();
    let cat = augment_with_pooled(tape, s, pooled, n);
    let h = tape.matmul(cat, vars["gen.phi"]);
    let et = tape.transpose(vars["gen.embed"]);
    let logits = tape.matmul(h, et);
    tape.add_row(logits, vars["gen.b_res"])
}

/// Entity logits: [s; c_E] W_align H^T + b_ent.
fn entity_logits(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    s: Var,
    pooled: Var,
    entity_table: Var,
) -> Var {
    let n = tape.value(s).rows();
    let cat = augment_with_pooled(tape, s, pooled, n);
    let h = tape.matmul(cat, vars["gen.w_align"]);
    let ht = tape.transpose(entity_table);
    let logits = tape.matmul(h, ht);
    tape.add_row(logits, vars["gen.b_ent"])
}

/// One generation example prepared for the loss: token streams plus the
/// frozen recommendation-side quantities it conditions on.
#[derive(Clone, Debug)]
pub struct PreparedGenExample {
    pub context_ids: Vec<usize>,
    /// Gold response tokens, nonempty, EOS not included.
    pub response_ids: Vec<usize>,
    /// Pooled entity vector c_E for this context, 1 x d_f.
    pub pooled: Matrix,
    /// Union of one-hop neighbors of the recommended items; empty when the
    /// response carries no recommendation.
    pub boe_target_entities: Vec<usize>,
    /// Binary indicator over the vocabulary marking tokens whose linked
    /// entity occurs in the context history.
    pub infusion_indicator: Matrix,
}

/// Assemble the per-example conditioning data from a corpus example.
pub fn prepare_example(
    ex: &crate::corpus::GenExample,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    pooled: Matrix,
    cfg: &GenConfig,
) -> Result<PreparedGenExample> {
    let mut boe: Vec<usize> = Vec::new();
    for &item in &ex.recommended {
        for n in graph.one_hop_neighbors(item)? {
            if !boe.contains(&n) {
                boe.push(n);
            }
        }
    }
    boe.sort_unstable();
    let history: std::collections::BTreeSet<usize> =
        ex.history.entity_ids.iter().copied().collect();
    let mut indicator = Matrix::zeros(1, vocab.len());
    for (&token, &entity) in vocab.entity_token_map() {
        if history.contains(&entity) {
            indicator.set(0, token, 1.0);
        }
    }
    Ok(PreparedGenExample {
        context_ids: context_token_ids(&ex.context_texts, vocab, cfg.max_context),
        response_ids: ex.response_ids.clone(),
        pooled,
        boe_target_entities: boe,
        infusion_indicator: indicator,
    })
}

/// Component losses plus their weighted total. The total always equals
/// `l_gen + lambda1 * l_boe + lambda2 * l_infuse` evaluated in that order.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_gen: f64,
    pub l_boe: f64,
    pub l_infuse: f64,
    pub l_total: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl LossBreakdown {
    pub fn combine(l_gen: f64, l_boe: f64, l_infuse: f64, lambda1: f64, lambda2: f64) -> Self {
        LossBreakdown {
            l_gen,
            l_boe,
            l_infuse,
            l_total: l_gen + lambda1 * l_boe + lambda2 * l_infuse,
            lambda1,
            lambda2,
        }
    }
}

struct ExampleVars {
    gen: Option<Var>,
    boe: Option<Var>,
    infuse: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
fn example_losses(
    tape: &mut Tape,
    vars: &BTreeMap<String, Var>,
    cfg: &GenConfig,
    entity_table: Option<Var>,
    ex: &PreparedGenExample,
    want_gen: bool,
    want_boe: bool,
    want_infuse: bool,
) -> Result<ExampleVars> {
    if ex.response_ids.is_empty() {
        return Err(Error::data("generation example has an empty response"));
    }
    if ex.response_ids.len() > cfg.max_response {
        return Err(Error::data(format!(
            "response has {} tokens, over the {} limit",
            ex.response_ids.len(),
            cfg.max_response
        )));
    }
    let pooled = tape.leaf(ex.pooled.clone());

    let needs_decoder = want_gen || (want_boe && !ex.boe_target_entities.is_empty());
    let mut gen = None;
    let mut boe = None;
    if needs_decoder {
        let memory = encode_context_tape(tape, vars, &ex.context_ids, cfg);
        let mut input = Vec::with_capacity(ex.response_ids.len() + 1);
        input.push(BOS);
        input.extend_from_slice(&ex.response_ids);
        let mut targets = ex.response_ids.clone();
        targets.push(EOS);
        let s = decoder_forward(tape, vars, cfg, memory, &input);

        if want_gen {
            let logits = response_logits(tape, vars, s, pooled);
            let lp = tape.log_softmax_rows(logits);
            let entries: Vec<(usize, usize)> =
                targets.iter().enumerate().map(|(j, &t)| (j, t)).collect();
            let picked = tape.gather_entries(lp, &entries);
            let total = tape.sum_all(picked);
            gen = Some(tape.scale(total, -1.0 / targets.len() as f64));
        }

        if want_boe && !ex.boe_target_entities.is_empty() {
            let table = entity_table
                .ok_or_else(|| Error::shape("bag-of-entity loss needs the entity table"))?;
            // Hidden states for the response tokens themselves; the state
            // that predicts EOS is not part of the sentence.
            let rows: Vec<usize> = (0..ex.response_ids.len()).collect();
            let s_sentence = tape.gather_rows(s, &rows);
            let logits = entity_logits(tape, vars, s_sentence, pooled, table);
            let per_step = tape.softmax_rows(logits);
            let acc = tape.sum_rows(per_step);
            let p_boe = tape.sigmoid(acc);
            let lp = tape.log(p_boe);
            let entries: Vec<(usize, usize)> =
                ex.boe_target_entities.iter().map(|&e| (0, e)).collect();
            let picked = tape.gather_entries(lp, &entries);
            let total = tape.sum_all(picked);
            boe = Some(tape.scale(total, -1.0));
        }
    }

    let infuse = if want_infuse {
        let h = tape.matmul(pooled, vars["gen.phi_prime"]);
        let et = tape.transpose(vars["gen.embed"]);
        let scores = tape.matmul(h, et);
        let scores = tape.add_row(scores, vars["gen.b_infuse"]);
        let target = tape.leaf(ex.infusion_indicator.clone());
        let diff = tape.sub(scores, target);
        let sq = tape.hadamard(diff, diff);
        let total = tape.sum_all(sq);
        Some(tape.scale(total, 1.0 / ex.infusion_indicator.cols() as f64))
    } else {
        None
    };

    Ok(ExampleVars { gen, boe, infuse })
}

fn mean_var(tape: &mut Tape, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v);
    }
    tape.scale(acc, 1.0 / vars.len() as f64)
}

fn check_batch(batch: &[PreparedGenExample]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::data("generation batch is empty"));
    }
    Ok(())
}

/// Mean per-token negative log-likelihood of the gold responses under
/// teacher forcing, with gradients. The third value is the smallest absolute
/// ReLU pre-activation seen on the tape, used by the finite-difference
/// harness to skip kink-adjacent coordinates.
pub fn generation_loss(
    params: &ParamSet,
    cfg: &GenConfig,
    batch: &[PreparedGenExample],
) -> Result<(f64, GradMap, f64)> {
    check_batch(batch)?;
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let mut losses = Vec::new();
    for ex in batch {
        let parts = example_losses(&mut tape, &vars, cfg, None, ex, true, false, false)?;
        losses.push(parts.gen.expect("generation loss requested"));
    }
    let loss = mean_var(&mut tape, &losses);
    let grads = tape.backward(loss);
    Ok((tape.value(loss).get(0, 0), grads, tape.relu_margin()))
}

/// Bag-of-entity loss over the examples that carry recommendations, with
/// gradients and the tape's ReLU margin. Errors when no example carries one.
pub fn boe_loss(
    params: &ParamSet,
    entity_table: &Matrix,
    cfg: &GenConfig,
    batch: &[PreparedGenExample],
) -> Result<(f64, GradMap, f64)> {
    check_batch(batch)?;
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let table = tape.leaf(entity_table.clone());
    let mut losses = Vec::new();
    for ex in batch {
        let parts = example_losses(&mut tape, &vars, cfg, Some(table), ex, false, true, false)?;
        if let Some(b) = parts.boe {
            losses.push(b);
        }
    }
    if losses.is_empty() {
        return Err(Error::data("no example carries a recommendation target"));
    }
    let loss = mean_var(&mut tape, &losses);
    let grads = tape.backward(loss);
    Ok((tape.value(loss).get(0, 0), grads, tape.relu_margin()))
}

/// Squared distance between the projected pooled vector's vocabulary scores
/// and the context-entity indicator, averaged over the vocabulary and the
/// batch, with gradients and the tape's ReLU margin.
pub fn infusion_loss(
    params: &ParamSet,
    cfg: &GenConfig,
    batch: &[PreparedGenExample],
) -> Result<(f64, GradMap, f64)> {
    check_batch(batch)?;
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let mut losses = Vec::new();
    for ex in batch {
        let parts = example_losses(&mut tape, &vars, cfg, None, ex, false, false, true)?;
        losses.push(parts.infuse.expect("infusion loss requested"));
    }
    let loss = mean_var(&mut tape, &losses);
    let grads = tape.backward(loss);
    Ok((tape.value(loss).get(0, 0), grads, tape.relu_margin()))
}

/// All three losses on one tape, combined as
/// l_gen + lambda1 * l_boe + lambda2 * l_infuse.
pub fn total_generation_loss(
    params: &ParamSet,
    entity_table: &Matrix,
    cfg: &GenConfig,
    batch: &[PreparedGenExample],
    lambda1: f64,
    lambda2: f64,
) -> Result<(LossBreakdown, GradMap, f64)> {
    check_batch(batch)?;
    if lambda1 < 0.0 || lambda2 < 0.0 {
        return Err(Error::data("loss weights must be nonnegative"));
    }
    let mut tape = Tape::new();
    let vars = bind_params(&mut tape, params);
    let table = tape.leaf(entity_table.clone());
    let mut gen_losses = Vec::new();
    let mut boe_losses = Vec::new();
    let mut infuse_losses = Vec::new();
    for ex in batch {
        let parts = example_losses(&mut tape, &vars, cfg, Some(table), ex, true, true, true)?;
        gen_losses.push(parts.gen.expect("generation loss requested"));
        if let Some(b) = parts.boe {
            boe_losses.push(b);
        }
        infuse_losses.push(parts.infuse.expect("infusion loss requested"));
    }
    let l_gen = mean_var(&mut tape, &gen_losses);
    let l_boe = if boe_losses.is_empty() {
        tape.leaf(Matrix::zeros(1, 1))
    } else {
        mean_var(&mut tape, &boe_losses)
    };
    let l_infuse = mean_var(&mut tape, &infuse_losses);
    let boe_scaled = tape.scale(l_boe, lambda1);
    let partial = tape.add(l_gen, boe_scaled);
    let infuse_scaled = tape.scale(l_infuse, lambda2);
    let total = tape.add(partial, infuse_scaled);
    let grads = tape.backward(total);
    let breakdown = LossBreakdown::combine(
        tape.value(l_gen).get(0, 0),
        tape.value(l_boe).get(0, 0),
        tape.value(l_infuse).get(0, 0),
        lambda1,
        lambda2,
    );
    Ok((breakdown, grads, tape.relu_margin()))
}

/// Sentence-level entity probabilities for a teacher-forced response:
/// sigmoid over the per-step entity distributions summed across the
/// response's steps.
pub fn boe_sentence_probability(
    params: &ParamSet,
    entity_table: &Matrix,
    cfg: &GenConfig,
    context_ids: &[usize],
    response_ids: &[usize],
    pooled: &Matrix,
) -> Result<Vec<f64>> {
    if response_ids.is_empty() {
        return Err(Error::data("response has no tokens"));
    }
    let mut tape = Tape::new();
    let vars = bind_constants(&mut tape, params);
    let table = tape.leaf(entity_table.clone());
    let pooled = tape.leaf(pooled.clone());
    let memory = encode_context_tape(&mut tape, &vars, context_ids, cfg);
    let mut input = Vec::with_capacity(response_ids.len() + 1);
    input.push(BOS);
    input.extend_from_slice(response_ids);
    let s = decoder_forward(&mut tape, &vars, cfg, memory, &input);
    let rows: Vec<usize> = (0..response_ids.len()).collect();
    let s_sentence = tape.gather_rows(s, &rows);
    let logits = entity_logits(&mut tape, &vars, s_sentence, pooled, table);
    let per_step = tape.softmax_rows(logits);
    let acc = tape.sum_rows(per_step);
    let p_boe = tape.sigmoid(acc);
    Ok(tape.value(p_boe).data().to_vec())
}

/// Incremental greedy decoding state: the growing prefix, per-step hidden
/// rows, and the running pre-sigmoid entity score accumulator.
pub struct DecoderState {
    memory: Matrix,
    entity_table: Matrix,
    pub prefix: Vec<usize>,
    pub step_hiddens: Vec<Vec<f64>>,
    pub boe_logit_accumulator: Vec<f64>,
}

impl DecoderState {
    pub fn new(memory: Matrix, entity_table: Matrix) -> Self {
        let num_entities = entity_table.rows();
        DecoderState {
            memory,
            entity_table,
            prefix: vec![BOS],
            step_hiddens: Vec::new(),
            boe_logit_accumulator: vec![0.0; num_entities],
        }
    }

    /// Tokens generated so far (the prefix minus the leading BOS).
    pub fn generated_len(&self) -> usize {
        self.prefix.len() - 1
    }
}

/// One greedy decoding step: run the decoder over the current prefix,
/// return the vocabulary distribution for the next token, and fold the
/// step's entity distribution into the accumulator.
pub fn decode_step(
    state: &mut DecoderState,
    pooled: &Matrix,
    params: &ParamSet,
    cfg: &GenConfig,
) -> Result<Vec<f64>> {
    if state.generated_len() >= cfg.max_response {
        return Err(Error::data(format!(
            "decoder prefix already holds {} generated tokens, the limit",
            cfg.max_response
        )));
    }
    let mut tape = Tape::new();
    let vars = bind_constants(&mut tape, params);
    let memory = tape.leaf(state.memory.clone());
    let table = tape.leaf(state.entity_table.clone());
    let pooled = tape.leaf(pooled.clone());
    let s = decoder_forward(&mut tape, &vars, cfg, memory, &state.prefix);
    let last = tape.gather_rows(s, &[state.prefix.len() - 1]);
    let logits = response_logits(&mut tape, &vars, last, pooled);
    let p_res = tape.softmax_rows(logits);
    let ent = entity_logits(&mut tape, &vars, last, pooled, table);
    let p_ent = tape.softmax_rows(ent);

    state.step_hiddens.push(tape.value(last).data().to_vec());
    for (slot, v) in state
        .boe_logit_accumulator
        .iter_mut()
        .zip(tape.value(p_ent).data())
    {
        *slot += v;
    }
    Ok(tape.value(p_res).data().to_vec())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Greedy decoding with the entity-biased selection score: each candidate
/// token's probability is raised by lambda3 times the current sentence-level
/// probability of its linked entity. Stops at EOS or the length limit.
pub fn generate_response(
    context_texts: &[String],
    pooled: &Matrix,
    params: &ParamSet,
    vocab: &Vocabulary,
    entity_table: &Matrix,
    cfg: &GenConfig,
    lambda3: f64,
) -> Result<Vec<usize>> {
    let context_ids = context_token_ids(context_texts, vocab, cfg.max_context);
    let memory = encode_context(params, cfg, &context_ids)?;
    let mut state = DecoderState::new(memory, entity_table.clone());
    let mut out = Vec::new();
    for _ in 0..cfg.max_response {
        let p_res = decode_step(&mut state, pooled, params, cfg)?;
        let mut best_token = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (t, &p) in p_res.iter().enumerate() {
            let mut score = p;
            if let Some(&e) = vocab.entity_token_map().get(&t) {
                score += lambda3 * sigmoid(state.boe_logit_accumulator[e]);
            }
            if score > best_score {
                best_score = score;
                best_token = t;
            }
        }
        if best_token == EOS {
            break;
        }
        out.push(best_token);
        state.prefix.push(best_token);
    }
    Ok(out)
}
