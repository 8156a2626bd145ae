//! Tokenization and the generation vocabulary.

use std::collections::BTreeMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const SPLIT: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<bos>", "<eos>", "_split_"];

/// Lowercased word tokens. Word characters are ASCII alphanumerics and
/// underscore; everything else separates tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    tokenize_with_spans(text)
        .into_iter()
        .map(|(tok, _)| tok)
        .collect()
}

/// Tokens with their byte ranges in the original text.
pub fn tokenize_with_spans(text: &str) -> Vec<(String, Range<usize>)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if is_word_byte(bytes[i]) {
            let start = i;
            while i < bytes.len() && is_word_byte(bytes[i]) {
                i += 1;
            }
            let tok = text[start..i].to_ascii_lowercase();
            out.push((tok, start..i));
        } else {
            i += 1;
        }
    }
    out
}

fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// Token table for generation, with reserved control tokens and a map from
/// single-token entity names to their entities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    ids: BTreeMap<String, usize>,
    /// Token id -> entity id, for tokens whose surface form equals an entity
    /// name after case-folding. Multi-token entity names are not mapped.
    entity_token_map: BTreeMap<usize, usize>,
}

impl Vocabulary {
    /// Build from token counts. Tokens below `min_freq` are dropped (they
    /// encode as UNK); survivors are ordered by descending count, then token.
    pub fn from_counts(counts: &BTreeMap<String, usize>, min_freq: usize) -> Vocabulary {
        let mut kept: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(tok, &c)| c >= min_freq && !RESERVED.contains(&tok.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(tok, _)| tok.clone()));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary {
            tokens,
            ids,
            entity_token_map: BTreeMap::new(),
        }
    }

    /// Map vocabulary tokens to entities whose surface name tokenizes to
    /// exactly that one token. Name collisions resolve to the lowest entity
    /// id.
    pub fn link_entities(&mut self, graph: &KnowledgeGraph) {
        self.entity_token_map.clear();
        for e in 0..graph.num_entities() {
            let toks = tokenize(graph.entity_name(e));
            if toks.len() != 1 {
                continue;
            }
            if let Some(&tid) = self.ids.get(&toks[0]) {
                if tid >= RESERVED.len() {
                    self.entity_token_map.entry(tid).or_insert(e);
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn entity_token_map(&self) -> &BTreeMap<usize, usize> {
        &self.entity_token_map
    }

    /// Token ids of `text`, unknown words mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .into_iter()
            .map(|tok| self.ids.get(&tok).copied().unwrap_or(UNK))
            .collect()
    }

    /// Space-joined token strings, skipping control tokens.
    pub fn decode(&self, ids: &[usize]) -> String {
        let words: Vec<&str> = ids
            .iter()
            .filter(|&&id| id >= RESERVED.len() || id == UNK)
            .map(|&id| self.token(id))
            .collect();
        words.join(" ")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Vocabulary> {
        let file = std::fs::File::open(path)?;
        let mut vocab: Vocabulary = serde_json::from_reader(std::io::BufReader::new(file))?;
        if vocab.tokens.len() < RESERVED.len()
            || vocab.tokens[..RESERVED.len()]
                .iter()
                .zip(RESERVED)
                .any(|(a, b)| a != b)
        {
            return Err(Error::data("vocabulary file lacks the reserved tokens"));
        }
        vocab.ids = vocab
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for &tid in vocab.entity_token_map.keys() {
            if tid >= vocab.tokens.len() {
                return Err(Error::data("entity token map references unknown token"));
            }
        }
        Ok(vocab)
    }
}
