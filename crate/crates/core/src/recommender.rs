//! Dialogue-history recommendation: entity linking, self-attentive pooling,
//! item scoring, the training loss, and novelty-constrained top-K selection.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::math::{Matrix, ParamSet, Tape, Var};
use crate::vocab::{tokenize, tokenize_with_spans};

/// Entities mentioned in a conversation, in occurrence order, with the
/// message index and byte range each mention came from.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EntitySequence {
    pub entity_ids: Vec<usize>,
    pub source_spans: Vec<(usize, Range<usize>)>,
}

impl EntitySequence {
    pub fn is_empty(&self) -> bool {
        self.entity_ids.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entity_ids.len()
    }

    /// Distinct mentioned items (movie entities), for the novelty filter.
    pub fn mentioned_items(&self, graph: &KnowledgeGraph) -> BTreeSet<usize> {
        self.entity_ids
            .iter()
            .copied()
            .filter(|&e| graph.is_item(e))
            .collect()
    }
}

/// One message as seen by the entity linker: its raw text and the mention
/// marker table in scope (marker string -> item entity id).
#[derive(Clone, Copy, Debug)]
pub struct LinkSource<'a> {
    pub text: &'a str,
    pub markers: &'a BTreeMap<String, usize>,
}

/// Entity surface names tokenized for longest-match lookup.
#[derive(Clone, Debug)]
pub struct Lexicon {
    entries: BTreeMap<Vec<String>, usize>,
    max_len: usize,
}

impl Lexicon {
    /// Index every entity name. Names that tokenize identically resolve to
    /// the lowest entity id.
    pub fn from_graph(graph: &KnowledgeGraph) -> Lexicon {
        let mut entries: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        let mut max_len = 0;
        for e in 0..graph.num_entities() {
            let toks = tokenize(graph.entity_name(e));
            if toks.is_empty() {
                continue;
            }
            max_len = max_len.max(toks.len());
            entries.entry(toks).or_insert(e);
        }
        Lexicon { entries, max_len }
    }

    fn lookup(&self, window: &[String]) -> Option<usize> {
        self.entries.get(window).copied()
    }
}

/// Scan messages left to right, resolving `@marker` mentions through the
/// marker table and everything else by longest token-sequence match against
/// entity names. Overlaps resolve longest-first, then leftmost.
pub fn link_entities(messages: &[LinkSource], lexicon: &Lexicon) -> Result<EntitySequence> {
    link_sources(messages, lexicon, true)
}

fn link_sources(
    messages: &[LinkSource],
    lexicon: &Lexicon,
    resolve_markers: bool,
) -> Result<EntitySequence> {
    let mut seq = EntitySequence::default();
    for (mi, msg) in messages.iter().enumerate() {
        let mut found: Vec<(usize, Range<usize>, usize)> = Vec::new();

        let marker_spans = if resolve_markers {
            find_mention_markers(msg.text)
        } else {
            Vec::new()
        };
        for (range, marker) in &marker_spans {
            let entity = msg
                .markers
                .get(marker)
                .copied()
                .ok_or_else(|| Error::data(format!("unresolvable mention marker @{marker}")))?;
            found.push((range.start, range.clone(), entity));
        }

        let spans = tokenize_with_spans(msg.text);
        let mut used = vec![false; spans.len()];
        for (ti, (_, range)) in spans.iter().enumerate() {
            if marker_spans
                .iter()
                .any(|(mr, _)| range.start < mr.end && mr.start < range.end)
            {
                used[ti] = true;
            }
        }

        let tokens: Vec<String> = spans.iter().map(|(t, _)| t.clone()).collect();
        let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
        for start in 0..tokens.len() {
            let top = lexicon.max_len.min(tokens.len() - start);
            for len in 1..=top {
                if let Some(entity) = lexicon.lookup(&tokens[start..start + len]) {
                    candidates.push((len, start, entity));
                }
            }
        }
        candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
        for (len, start, entity) in candidates {
            if used[start..start + len].iter().any(|&u| u) {
                continue;
            }
            for u in &mut used[start..start + len] {
                *u = true;
            }
            let range = spans[start].1.start..spans[start + len - 1].1.end;
            found.push((range.start, range, entity));
        }

        found.sort_by_key(|(start, _, _)| *start);
        for (_, range, entity) in found {
            seq.entity_ids.push(entity);
            seq.source_spans.push((mi, range));
        }
    }
    Ok(seq)
}

/// Link plain text by lexicon match alone. No marker table is in scope, so
/// `@<digits>` sequences are ordinary text here, not mentions.
pub fn link_text(text: &str, lexicon: &Lexicon) -> Vec<usize> {
    let markers = BTreeMap::new();
    link_sources(
        &[LinkSource {
            text,
            markers: &markers,
        }],
        lexicon,
        false,
    )
    .expect("plain-text linking has no failure path")
    .entity_ids
}

/// `@<digits>` mention spans in a message.
pub fn find_mention_markers(text: &str) -> Vec<(Range<usize>, String)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'@' {
            let start = i;
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            if j > i + 1 {
                out.push((start..j, text[i + 1..j].to_string()));
                i = j;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// Scores over the graph's items for one dialogue history, plus the pooled
/// history vector and attention weights behind them.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecPrediction {
    /// Probability per item, in `graph.item_ids()` order.
    pub probs: Vec<f64>,
    pub pooled: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Insert attention parameters: a query map of shape d_q x d_f and a key
/// vector of shape 1 x d_q.
pub fn init_recommender_params(params: &mut ParamSet, d_f: usize, d_q: usize, seed: u64) {
    let mut rng = crate::math::stream_rng(seed, "rec.attn.wq");
    params.insert(
        "rec.attn.wq",
        Matrix::from_fn(d_q, d_f, |_, _| {
            rand::Rng::random_range(&mut rng, -0.1..0.1)
        }),
    );
    let mut rng = crate::math::stream_rng(seed, "rec.attn.wk");
    params.insert(
        "rec.attn.wk",
        Matrix::from_fn(1, d_q, |_, _| rand::Rng::random_range(&mut rng, -0.1..0.1)),
    );
}

/// Self-attentive pooling of entity rows: alpha = softmax(wk tanh(wq He^T)),
/// pooled = alpha He. Requires at least one row.
pub fn attentive_pool(tape: &mut Tape, h_e: Var, wq: Var, wk: Var) -> Result<(Var, Var)> {
    if tape.value(h_e).rows() == 0 {
        return Err(Error::shape("attentive_pool needs a nonempty history"));
    }
    let he_t = tape.transpose(h_e);
    let q = tape.matmul(wq, he_t);
    let t = tape.tanh(q);
    let scores = tape.matmul(wk, t);
    let alpha = tape.softmax_rows(scores);
    let pooled = tape.matmul(alpha, h_e);
    Ok((pooled, alpha))
}

/// Softmax over inner products between the pooled vector and each item row.
pub fn score_items_tape(tape: &mut Tape, pooled: Var, h_items: Var) -> Var {
    let items_t = tape.transpose(h_items);
    let logits = tape.matmul(pooled, items_t);
    tape.softmax_rows(logits)
}

/// Pool a history against a frozen entity table. Empty histories pool to the
/// zero vector (uniform downstream scores).
pub fn pooled_history(
    params: &ParamSet,
    entity_table: &Matrix,
    history: &[usize],
) -> Result<Vec<f64>> {
    let d_f = entity_table.cols();
    if history.is_empty() {
        return Ok(vec![0.0; d_f]);
    }
    let mut tape = Tape::new();
    let table = tape.leaf(entity_table.clone());
    let h_e = tape.gather_rows(table, history);
    let wq = tape.leaf(params.get("rec.attn.wq").clone());
    let wk = tape.leaf(params.get("rec.attn.wk").clone());
    let (pooled, _) = attentive_pool(&mut tape, h_e, wq, wk)?;
    Ok(tape.value(pooled).row(0).to_vec())
}

/// Score every item for one history against a frozen entity table.
pub fn predict(
    params: &ParamSet,
    entity_table: &Matrix,
    graph: &KnowledgeGraph,
    history: &[usize],
) -> Result<RecPrediction> {
    for &e in history {
        if e >= graph.num_entities() {
            return Err(Error::data(format!("history entity {e} not in graph")));
        }
    }
    let mut tape = Tape::new();
    let table = tape.leaf(entity_table.clone());
    let h_items = tape.gather_rows(table, graph.item_ids());
    let (pooled, attention) = if history.is_empty() {
        let zero = tape.leaf(Matrix::zeros(1, entity_table.cols()));
        (zero, None)
    } else {
        let h_e = tape.gather_rows(table, history);
        let wq = tape.leaf(params.get("rec.attn.wq").clone());
        let wk = tape.leaf(params.get("rec.attn.wk").clone());
        let (pooled, alpha) = attentive_pool(&mut tape, h_e, wq, wk)?;
        (pooled, Some(alpha))
    };
    let probs = score_items_tape(&mut tape, pooled, h_items);
    Ok(RecPrediction {
        probs: tape.value(probs).row(0).to_vec(),
        pooled: tape.value(pooled).row(0).to_vec(),
        attention: attention
            .map(|a| tape.value(a).row(0).to_vec())
            .unwrap_or_default(),
    })
}

/// One recommendation drawn from a conversation: the entity history before
/// the recommending turn and the recommended item, with eligibility flags.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecTrainingExample {
    pub history: EntitySequence,
    /// Recommended item as an entity id.
    pub label: usize,
    pub is_new: bool,
    pub is_liked: bool,
}

impl RecTrainingExample {
    /// Training keeps only new, liked recommendations.
    pub fn trainable(&self) -> bool {
        self.is_new && self.is_liked
    }
}

/// Mean cross-entropy of the labeled items for a batch of histories, built
/// on the tape against the (trainable) entity table node. `item_index` maps
/// entity id -> position in `graph.item_ids()`.
pub fn rec_loss_tape(
    tape: &mut Tape,
    params: &ParamSet,
    entity_table: Var,
    graph: &KnowledgeGraph,
    batch: &[&RecTrainingExample],
) -> Result<Var> {
    let trainable: Vec<&&RecTrainingExample> = batch.iter().filter(|ex| ex.trainable()).collect();
    if trainable.is_empty() {
        return Err(Error::data(
            "batch has no trainable examples after the new-and-liked filter",
        ));
    }
    let item_index: BTreeMap<usize, usize> = graph
        .item_ids()
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, i))
        .collect();
    let h_items = tape.gather_rows(entity_table, graph.item_ids());
    let items_t = tape.transpose(h_items);
    let wq = tape.param("rec.attn.wq", params.get("rec.attn.wq").clone());
    let wk = tape.param("rec.attn.wk", params.get("rec.attn.wk").clone());
    let d_f = tape.value(entity_table).cols();

    let mut total: Option<Var> = None;
    for ex in &trainable {
        let label = *item_index
            .get(&ex.label)
            .ok_or_else(|| Error::data(format!("label {} is not an item", ex.label)))?;
        let pooled = if ex.history.is_empty() {
            tape.leaf(Matrix::zeros(1, d_f))
        } else {
            let h_e = tape.gather_rows(entity_table, &ex.history.entity_ids);
            attentive_pool(tape, h_e, wq, wk)?.0
        };
        let logits = tape.matmul(pooled, items_t);
        let logp = tape.log_softmax_rows(logits);
        let picked = tape.gather_entries(logp, &[(0, label)]);
        let neg = tape.scale(picked, -1.0);
        total = Some(match total {
            Some(t) => tape.add(t, neg),
            None => neg,
        });
    }
    let total = total.expect("nonempty batch");
    Ok(tape.scale(total, 1.0 / trainable.len() as f64))
}

/// The K highest-probability items excluding `mentioned`, ties broken by
/// ascending item id. The flag reports truncation (fewer than K eligible).
pub fn recommend_topk(
    probs: &[f64],
    graph: &KnowledgeGraph,
    k: usize,
    mentioned: &BTreeSet<usize>,
) -> (Vec<usize>, bool) {
    assert!(k >= 1, "top-K needs K >= 1");
    assert_eq!(probs.len(), graph.item_ids().len());
    let mut eligible: Vec<(usize, f64)> = graph
        .item_ids()
        .iter()
        .zip(probs)
        .filter(|(id, _)| !mentioned.contains(*id))
        .map(|(&id, &p)| (id, p))
        .collect();
    eligible.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    let truncated = eligible.len() < k;
    eligible.truncate(k);
    (eligible.into_iter().map(|(id, _)| id).collect(), truncated)
}
