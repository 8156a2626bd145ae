//! Conversation corpus handling: JSON-lines ingestion, dataset splitting,
//! vocabulary construction, training-example extraction, and the synthetic
//! desk-scale corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::evalkit::PredictionEvent;
use crate::kg::{KnowledgeGraph, NodeType, Triple};
use crate::math::stream_rng;
use crate::recommender::{
    find_mention_markers, link_entities, EntitySequence, Lexicon, LinkSource, RecTrainingExample,
};
use crate::vocab::{tokenize, Vocabulary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Recommender,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Message {
    pub speaker: Speaker,
    pub text: String,
}

/// Questionnaire flags for one mentioned movie. `seen` and `liked` keep the
/// raw three-way encoding (0 = no, 1 = yes, 2 = did not say).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionFlags {
    pub suggested: bool,
    pub seen: u8,
    pub liked: u8,
}

impl MentionFlags {
    /// `two_is_liked` controls whether the "did not say" answer counts as
    /// liked (the optimistic default).
    pub fn is_liked(&self, two_is_liked: bool) -> bool {
        self.liked == 1 || (self.liked == 2 && two_is_liked)
    }
}

/// One conversation with markers resolved to graph entities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub messages: Vec<Message>,
    /// Mention marker -> item entity id.
    pub markers: BTreeMap<String, usize>,
    pub flags: BTreeMap<String, MentionFlags>,
}

impl PartialEq for Message {
    fn eq(&self, other: &Self) -> bool {
        self.speaker == other.speaker && self.text == other.text
    }
}

impl Conversation {
    /// Linker views over all messages, sharing the marker table.
    pub fn link_sources(&self) -> Vec<LinkSource<'_>> {
        self.messages
            .iter()
            .map(|m| LinkSource {
                text: &m.text,
                markers: &self.markers,
            })
            .collect()
    }

    /// Message text with each `@marker` replaced by the entity surface name.
    pub fn resolved_text(&self, msg_idx: usize, graph: &KnowledgeGraph) -> String {
        let text = &self.messages[msg_idx].text;
        let mut out = String::with_capacity(text.len());
        let mut cursor = 0;
        for (range, marker) in find_mention_markers(text) {
            out.push_str(&text[cursor..range.start]);
            match self.markers.get(&marker) {
                Some(&entity) => out.push_str(graph.entity_name(entity)),
                None => out.push_str(&text[range.clone()]),
            }
            cursor = range.end;
        }
        out.push_str(&text[cursor..]);
        out
    }
}

// Raw JSON-lines shapes. Field names follow the interchange format.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RawConversation {
    #[serde(deserialize_with = "de_id")]
    pub conversation_id: String,
    pub messages: Vec<RawMessage>,
    #[serde(default)]
    pub movie_mentions: BTreeMap<String, Value>,
    #[serde(default)]
    pub initiator_questions: BTreeMap<String, RawQuestion>,
    #[serde(default)]
    pub respondent_questions: BTreeMap<String, RawQuestion>,
    pub initiator_worker_id: i64,
    pub respondent_worker_id: i64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RawMessage {
    #[serde(default)]
    pub time_offset: i64,
    pub text: String,
    pub sender_worker_id: i64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RawQuestion {
    pub suggested: u8,
    pub seen: u8,
    pub liked: u8,
}

fn de_id<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    match Value::deserialize(d)? {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        other => Err(serde::de::Error::custom(format!(
            "conversationId must be a string or number, got {other}"
        ))),
    }
}

/// Parse raw conversations without validating against a graph. Used by the
/// repetition audit, which only needs marker identities.
pub fn load_raw_conversations(reader: impl BufRead) -> Result<Vec<RawConversation>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawConversation = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("conversation line {}: {e}", lineno + 1)))?;
        out.push(raw);
    }
    Ok(out)
}

/// Parse and validate conversations against a graph: messages ordered by
/// time offset, every text marker present in the movie table, every movie
/// table entry carrying flags, and titles resolved to movie entities.
///
/// When seeker and recommender questionnaires disagree, the seeker's answers
/// win.
pub fn load_conversations(
    reader: impl BufRead,
    graph: &KnowledgeGraph,
) -> Result<Vec<Conversation>> {
    let mut title_map: BTreeMap<String, usize> = BTreeMap::new();
    for &item in graph.item_ids() {
        title_map
            .entry(graph.entity_name(item).to_lowercase())
            .or_insert(item);
    }

    let raws = load_raw_conversations(reader)?;
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        let id = raw.conversation_id.clone();
        let mut ordered: Vec<&RawMessage> = raw.messages.iter().collect();
        ordered.sort_by_key(|m| m.time_offset);
        let mut messages = Vec::with_capacity(ordered.len());
        for m in &ordered {
            let speaker = if m.sender_worker_id == raw.initiator_worker_id {
                Speaker::Seeker
            } else if m.sender_worker_id == raw.respondent_worker_id {
                Speaker::Recommender
            } else {
                return Err(Error::data(format!(
                    "conversation {id}: sender {} is neither participant",
                    m.sender_worker_id
                )));
            };
            messages.push(Message {
                speaker,
                text: m.text.clone(),
            });
        }

        let mut markers = BTreeMap::new();
        let mut flags = BTreeMap::new();
        for (marker, title) in &raw.movie_mentions {
            let title = title.as_str().ok_or_else(|| {
                Error::data(format!("conversation {id}: marker {marker} has no title"))
            })?;
            let entity = title_map
                .get(&title.to_lowercase())
                .copied()
                .ok_or_else(|| {
                    Error::data(format!(
                        "conversation {id}: movie {title:?} is not in the graph"
                    ))
                })?;
            markers.insert(marker.clone(), entity);

            let seeker = raw.initiator_questions.get(marker);
            let respondent = raw.respondent_questions.get(marker);
            let merged = match (seeker, respondent) {
                (Some(s), _) => MentionFlags {
                    suggested: s.suggested == 1,
                    seen: s.seen,
                    liked: s.liked,
                },
                (None, Some(r)) => MentionFlags {
                    suggested: r.suggested == 1,
                    seen: r.seen,
                    liked: r.liked,
                },
                (None, None) => {
                    return Err(Error::data(format!(
                        "conversation {id}: marker {marker} has no flag record"
                    )))
                }
            };
            flags.insert(marker.clone(), merged);
        }

        for m in &messages {
            for (_, marker) in find_mention_markers(&m.text) {
                if !markers.contains_key(&marker) {
                    return Err(Error::data(format!(
                        "conversation {id}: marker @{marker} has no movie table entry"
                    )));
                }
            }
        }

        out.push(Conversation {
            id,
            messages,
            markers,
            flags,
        });
    }
    Ok(out)
}

/// Write conversations back to the JSON-lines interchange format.
pub fn save_conversations(
    path: &Path,
    convs: &[Conversation],
    graph: &KnowledgeGraph,
) -> Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for conv in convs {
        let raw = RawConversation {
            conversation_id: conv.id.clone(),
            messages: conv
                .messages
                .iter()
                .enumerate()
                .map(|(i, m)| RawMessage {
                    time_offset: i as i64,
                    text: m.text.clone(),
                    sender_worker_id: match m.speaker {
                        Speaker::Seeker => 1,
                        Speaker::Recommender => 2,
                    },
                })
                .collect(),
            movie_mentions: conv
                .markers
                .iter()
                .map(|(m, &e)| (m.clone(), Value::String(graph.entity_name(e).to_string())))
                .collect(),
            initiator_questions: conv
                .flags
                .iter()
                .map(|(m, f)| {
                    (
                        m.clone(),
                        RawQuestion {
                            suggested: f.suggested as u8,
                            seen: f.seen,
                            liked: f.liked,
                        },
                    )
                })
                .collect(),
            respondent_questions: BTreeMap::new(),
            initiator_worker_id: 1,
            respondent_worker_id: 2,
        };
        serde_json::to_writer(&mut out, &raw)?;
        writeln!(out)?;
    }
    Ok(())
}

/// Train/valid/test partition of conversations.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub train: Vec<Conversation>,
    pub valid: Vec<Conversation>,
    pub test: Vec<Conversation>,
}

/// Largest-remainder seat counts for weights (0.8, 0.1, 0.1), remainder ties
/// resolved in favor of test, then valid.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let weights = [0.8, 0.1, 0.1];
    let quotas: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut remaining = n - sizes.iter().sum::<usize>();
    // Priority: largest fractional remainder first; ties favor test (2),
    // then valid (1), then train (0).
    let mut order: Vec<usize> = vec![0, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(b.cmp(&a))
    });
    let mut i = 0;
    while remaining > 0 {
        sizes[order[i % 3]] += 1;
        remaining -= 1;
        i += 1;
    }
    (sizes[0], sizes[1], sizes[2])
}

/// Seeded shuffle followed by the 8:1:1 partition.
pub fn split_dataset(convs: &[Conversation], seed: u64) -> Result<DatasetSplit> {
    if convs.len() < 10 {
        return Err(Error::data(format!(
            "splitting needs at least 10 conversations, got {}",
            convs.len()
        )));
    }
    let mut order: Vec<usize> = (0..convs.len()).collect();
    order.shuffle(&mut stream_rng(seed, "split"));
    let (n_train, n_valid, _) = split_sizes(convs.len());
    let pick = |range: std::ops::Range<usize>| -> Vec<Conversation> {
        order[range].iter().map(|&i| convs[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: pick(0..n_train),
        valid: pick(n_train..n_train + n_valid),
        test: pick(n_train + n_valid..convs.len()),
    })
}

/// Count tokens over marker-resolved text and build the vocabulary.
pub fn build_vocab(train: &[Conversation], graph: &KnowledgeGraph, min_freq: usize) -> Vocabulary {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for conv in train {
        for i in 0..conv.messages.len() {
            for tok in tokenize(&conv.resolved_text(i, graph)) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
    }
    let mut vocab = Vocabulary::from_counts(&counts, min_freq);
    vocab.link_entities(graph);
    vocab
}

/// One recommendation example per suggested item in each recommender
/// message. All examples are emitted with their flags; training filters to
/// `trainable()` (new and liked).
pub fn make_rec_examples(
    conv: &Conversation,
    graph: &KnowledgeGraph,
    lexicon: &Lexicon,
    two_is_liked: bool,
) -> Result<Vec<RecTrainingExample>> {
    let sources = conv.link_sources();
    let mut out = Vec::new();
    let mut prior_items: BTreeSet<usize> = BTreeSet::new();
    for (mi, msg) in conv.messages.iter().enumerate() {
        if msg.speaker == Speaker::Recommender {
            for (_, marker) in find_mention_markers(&msg.text) {
                let flags = conv.flags.get(&marker).ok_or_else(|| {
                    Error::data(format!(
                        "conversation {}: marker @{marker} has no flag record",
                        conv.id
                    ))
                })?;
                if !flags.suggested {
                    continue;
                }
                let entity = *conv.markers.get(&marker).ok_or_else(|| {
                    Error::data(format!(
                        "conversation {}: marker @{marker} unresolved",
                        conv.id
                    ))
                })?;
                let history = link_entities(&sources[..mi], lexicon)?;
                out.push(RecTrainingExample {
                    history,
                    label: entity,
                    is_new: !prior_items.contains(&entity),
                    is_liked: flags.is_liked(two_is_liked),
                });
            }
        }
        let seq = link_entities(&sources[mi..=mi], lexicon)?;
        for &e in &seq.entity_ids {
            if graph.is_item(e) {
                prior_items.insert(e);
            }
        }
    }
    Ok(out)
}

/// One generation example per recommender message.
#[derive(Clone, Debug)]
pub struct GenExample {
    pub conversation_id: String,
    /// Message index of the gold response.
    pub turn: usize,
    /// Marker-resolved prior messages, oldest first.
    pub context_texts: Vec<String>,
    /// Gold response tokens (no EOS), at most `max_len`.
    pub response_ids: Vec<usize>,
    /// Entities linked in the prior messages.
    pub history: EntitySequence,
    /// Items suggested in the gold response.
    pub recommended: Vec<usize>,
}

pub fn make_gen_examples(
    conv: &Conversation,
    graph: &KnowledgeGraph,
    vocab: &Vocabulary,
    lexicon: &Lexicon,
    max_len: usize,
) -> Result<Vec<GenExample>> {
    let sources = conv.link_sources();
    let mut out = Vec::new();
    for (mi, msg) in conv.messages.iter().enumerate() {
        if msg.speaker != Speaker::Recommender {
            continue;
        }
        let mut response_ids = vocab.encode(&conv.resolved_text(mi, graph));
        response_ids.truncate(max_len);
        if response_ids.is_empty() {
            continue;
        }
        let mut recommended: Vec<usize> = Vec::new();
        for (_, marker) in find_mention_markers(&msg.text) {
            let suggested = conv
                .flags
                .get(&marker)
                .map(|f| f.suggested)
                .unwrap_or(false);
            if suggested {
                if let Some(&e) = conv.markers.get(&marker) {
                    if !recommended.contains(&e) {
                        recommended.push(e);
                    }
                }
            }
        }
        out.push(GenExample {
            conversation_id: conv.id.clone(),
            turn: mi,
            context_texts: (0..mi).map(|i| conv.resolved_text(i, graph)).collect(),
            response_ids,
            history: link_entities(&sources[..mi], lexicon)?,
            recommended,
        });
    }
    Ok(out)
}

/// Audit events over raw conversations: one event per suggested mention in a
/// recommender turn, ranking exactly that item against the markers mentioned
/// earlier. Markers lacking flag records are skipped.
pub fn human_recommendation_events(raws: &[RawConversation]) -> Vec<PredictionEvent> {
    let mut events = Vec::new();
    for raw in raws {
        let marker_ids: BTreeMap<&String, usize> = raw
            .movie_mentions
            .keys()
            .enumerate()
            .map(|(i, m)| (m, i))
            .collect();
        let suggested = |marker: &String| -> Option<bool> {
            raw.initiator_questions
                .get(marker)
                .or_else(|| raw.respondent_questions.get(marker))
                .map(|q| q.suggested == 1)
        };
        let mut ordered: Vec<&RawMessage> = raw.messages.iter().collect();
        ordered.sort_by_key(|m| m.time_offset);
        let mut mentioned: Vec<usize> = Vec::new();
        for (turn, msg) in ordered.iter().enumerate() {
            let markers_here: Vec<String> = find_mention_markers(&msg.text)
                .into_iter()
                .map(|(_, m)| m)
                .collect();
            if msg.sender_worker_id == raw.respondent_worker_id {
                for marker in &markers_here {
                    let (Some(&id), Some(true)) = (marker_ids.get(marker), suggested(marker))
                    else {
                        continue;
                    };
                    events.push(PredictionEvent {
                        conversation_id: raw.conversation_id.clone(),
                        turn,
                        ranked_item_ids: vec![id],
                        mentioned_item_ids: mentioned.clone(),
                        gold_item_ids: vec![id],
                        gold_liked_flags: vec![true],
                    });
                }
            }
            for marker in &markers_here {
                if let Some(&id) = marker_ids.get(marker) {
                    if !mentioned.contains(&id) {
                        mentioned.push(id);
                    }
                }
            }
        }
    }
    events
}

/// Synthetic-corpus shape: conversation, item, and attribute counts plus the
/// filler-word pool size.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_convs: usize,
    pub num_items: usize,
    pub num_attrs: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_convs: 50,
            num_items: 10,
            num_attrs: 6,
            vocab_size: 60,
            seed: 0,
        }
    }
}

/// Generate a toy graph and template conversations. Each item owns a unique
/// attribute subset; each conversation's seeker names the gold item's full
/// subset, so the gold item is recoverable from the mentioned attributes.
/// Output is deterministic per seed.
pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Vec<Conversation>, KnowledgeGraph)> {
    if cfg.num_convs == 0 || cfg.num_items == 0 || cfg.num_attrs == 0 || cfg.vocab_size == 0 {
        return Err(Error::data("synthetic corpus counts must be at least 1"));
    }
    if cfg.num_attrs >= usize::BITS as usize || (1usize << cfg.num_attrs) - 1 < cfg.num_items {
        return Err(Error::data(format!(
            "{} attributes admit too few distinct subsets for {} items",
            cfg.num_attrs, cfg.num_items
        )));
    }

    // Assign each item the next nonempty attribute subset, smallest first.
    let mut subsets: Vec<usize> = (1..1usize << cfg.num_attrs).collect();
    subsets.sort_by_key(|s| (s.count_ones(), *s));
    subsets.truncate(cfg.num_items);

    let mut entity_names: Vec<String> = Vec::new();
    let mut entity_types: Vec<NodeType> = Vec::new();
    for i in 0..cfg.num_items {
        entity_names.push(format!("item{i}"));
        entity_types.push(NodeType::Movie);
    }
    for a in 0..cfg.num_attrs {
        entity_names.push(format!("attr{a}"));
        entity_types.push(NodeType::Keyword);
    }
    let mut triples = Vec::new();
    for (i, subset) in subsets.iter().enumerate() {
        for a in 0..cfg.num_attrs {
            if subset & (1 << a) != 0 {
                triples.push(Triple {
                    head: i,
                    relation: 0,
                    tail: cfg.num_items + a,
                });
            }
        }
    }
    let graph = KnowledgeGraph::new(
        entity_names,
        entity_types,
        vec!["has_attr".to_string()],
        triples,
    )?;

    let mut rng = stream_rng(cfg.seed, "synth");
    let mut item_order: Vec<usize> = (0..cfg.num_items).collect();
    item_order.shuffle(&mut rng);
    let mut filler_order: Vec<usize> = (0..cfg.vocab_size).collect();
    filler_order.shuffle(&mut rng);

    let mut convs = Vec::with_capacity(cfg.num_convs);
    for c in 0..cfg.num_convs {
        let item = item_order[c % cfg.num_items];
        let subset = subsets[item];
        let attrs: Vec<String> = (0..cfg.num_attrs)
            .filter(|a| subset & (1 << a) != 0)
            .map(|a| format!("attr{a}"))
            .collect();
        let filler = format!("w{}", filler_order[c % cfg.vocab_size]);
        let marker = format!("{}", 1000 + c);
        let seeker_text = format!(
            "hi i am looking for something {} {filler} please",
            attrs.join(" ")
        );
        let rec_text = format!("you should watch @{marker} it is {} {filler}", attrs[0]);
        convs.push(Conversation {
            id: format!("synth{c}"),
            messages: vec![
                Message {
                    speaker: Speaker::Seeker,
                    text: seeker_text,
                },
                Message {
                    speaker: Speaker::Recommender,
                    text: rec_text,
                },
            ],
            markers: [(marker.clone(), item)].into_iter().collect(),
            flags: [(
                marker,
                MentionFlags {
                    suggested: true,
                    seen: 0,
                    liked: 1,
                },
            )]
            .into_iter()
            .collect(),
        });
    }
    Ok((convs, graph))
}
