//! Knowledge graph storage: loading, domain construction, neighbor queries,
//! and statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Node categories carried by the entity table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeType {
    Genre,
    Movie,
    Cast,
    Crew,
    Keyword,
    Production,
    Generic,
}

impl NodeType {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeType::Genre => "genre",
            NodeType::Movie => "movie",
            NodeType::Cast => "cast",
            NodeType::Crew => "crew",
            NodeType::Keyword => "keyword",
            NodeType::Production => "production",
            NodeType::Generic => "generic",
        }
    }

    fn parse(s: &str) -> Option<NodeType> {
        Some(match s {
            "genre" => NodeType::Genre,
            "movie" => NodeType::Movie,
            "cast" => NodeType::Cast,
            "crew" => NodeType::Crew,
            "keyword" => NodeType::Keyword,
            "production" => NodeType::Production,
            "generic" => NodeType::Generic,
            _ => return None,
        })
    }
}

/// One directed edge of the graph. Indexing treats edges as bidirectional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

/// The eleven crew departments, in the order their relations are numbered.
pub const CREW_DEPARTMENTS: [&str; 11] = [
    "production",
    "sound",
    "editing",
    "directing",
    "writing",
    "art",
    "costume & make-up",
    "camera",
    "visual effect",
    "lighting",
    "generic crew",
];

/// One movie with its attribute lists, as read from a record dump.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainRecord {
    pub title: String,
    pub year: i32,
    #[serde(default)]
    pub genres: Vec<String>,
    #[serde(default)]
    pub cast: Vec<String>,
    #[serde(default)]
    pub crew: Vec<CrewCredit>,
    #[serde(default)]
    pub keywords: Vec<String>,
    #[serde(default)]
    pub companies: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrewCredit {
    pub name: String,
    pub department: String,
}

impl DomainRecord {
    pub fn validate(&self) -> Result<()> {
        if self.title.trim().is_empty() {
            return Err(Error::data("record has an empty title"));
        }
        for credit in &self.crew {
            if !CREW_DEPARTMENTS.contains(&credit.department.as_str()) {
                return Err(Error::data(format!(
                    "unknown crew department {:?} for {:?}",
                    credit.department, credit.name
                )));
            }
        }
        Ok(())
    }
}

/// Attribute-frequency thresholds applied while building a domain graph.
/// A value is kept when it occurs in at least `threshold` records.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    pub keyword: usize,
    pub cast: usize,
    pub company: usize,
    pub crew: usize,
    pub genre: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            keyword: 4,
            cast: 4,
            company: 4,
            crew: 10,
            genre: 1,
        }
    }
}

/// Node and edge tallies grouped by type and relation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgStats {
    pub node_counts: BTreeMap<String, usize>,
    pub edge_counts: BTreeMap<String, usize>,
    pub total_nodes: usize,
    pub total_edges: usize,
}

/// Immutable entity/relation/triple store with a materialized bidirectional
/// neighbor index.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entity_names: Vec<String>,
    entity_types: Vec<NodeType>,
    relation_names: Vec<String>,
    triples: Vec<Triple>,
    /// `neighbor_index[r][e]` is the sorted, deduplicated list of entities
    /// adjacent to `e` under relation `r` in either direction.
    neighbor_index: Vec<Vec<Vec<usize>>>,
    item_ids: Vec<usize>,
}

impl KnowledgeGraph {
    /// Assemble a graph from parts, deduplicate triples, and build the index.
    /// Entity names must be unique per node type after case-folding; triples
    /// must reference valid ids and must not be self-loops.
    pub fn new(
        entity_names: Vec<String>,
        entity_types: Vec<NodeType>,
        relation_names: Vec<String>,
        triples: Vec<Triple>,
    ) -> Result<KnowledgeGraph> {
        if entity_names.len() != entity_types.len() {
            return Err(Error::data("entity name/type tables differ in length"));
        }
        let n = entity_names.len();
        let mut seen = BTreeSet::new();
        for (name, ty) in entity_names.iter().zip(&entity_types) {
            if !seen.insert((*ty, name.to_lowercase())) {
                return Err(Error::data(format!(
                    "duplicate {} entity name {name:?} after case-folding",
                    ty.as_str()
                )));
            }
        }
        let mut unique = BTreeSet::new();
        for t in &triples {
            if t.head >= n || t.tail >= n {
                return Err(Error::data(format!(
                    "triple ({}, {}, {}) references an unknown entity",
                    t.head, t.relation, t.tail
                )));
            }
            if t.relation >= relation_names.len() {
                return Err(Error::data(format!(
                    "triple ({}, {}, {}) references an unknown relation",
                    t.head, t.relation, t.tail
                )));
            }
            if t.head == t.tail {
                return Err(Error::data(format!(
                    "self-loop on entity {} under relation {}",
                    t.head, t.relation
                )));
            }
            unique.insert(*t);
        }
        let triples: Vec<Triple> = unique.into_iter().collect();

        let mut neighbor_index = vec![vec![BTreeSet::new(); n]; relation_names.len()];
        for t in &triples {
            neighbor_index[t.relation][t.head].insert(t.tail);
            neighbor_index[t.relation][t.tail].insert(t.head);
        }
        let neighbor_index = neighbor_index
            .into_iter()
            .map(|per_entity| {
                per_entity
                    .into_iter()
                    .map(|set| set.into_iter().collect())
                    .collect()
            })
            .collect();

        let item_ids = entity_types
            .iter()
            .enumerate()
            .filter(|(_, ty)| **ty == NodeType::Movie)
            .map(|(i, _)| i)
            .collect();

        Ok(KnowledgeGraph {
            entity_names,
            entity_types,
            relation_names,
            triples,
            neighbor_index,
            item_ids,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.entity_names.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_names.len()
    }

    pub fn entity_name(&self, id: usize) -> &str {
        &self.entity_names[id]
    }

    pub fn entity_type(&self, id: usize) -> NodeType {
        self.entity_types[id]
    }

    pub fn relation_name(&self, id: usize) -> &str {
        &self.relation_names[id]
    }

    pub fn relation_id(&self, name: &str) -> Option<usize> {
        self.relation_names.iter().position(|r| r == name)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    /// Recommendable items: every movie-typed entity, ascending id.
    pub fn item_ids(&self) -> &[usize] {
        &self.item_ids
    }

    pub fn is_item(&self, id: usize) -> bool {
        self.entity_types.get(id).copied() == Some(NodeType::Movie)
    }

    /// Neighbors of `e` under relation `r`, sorted ascending.
    pub fn neighbors(&self, e: usize, r: usize) -> &[usize] {
        &self.neighbor_index[r][e]
    }

    /// Per-entity neighbor lists for one relation, indexed by entity id.
    pub fn neighbor_lists(&self, r: usize) -> &[Vec<usize>] {
        &self.neighbor_index[r]
    }

    /// Union of an item's neighbors over all relations, the item excluded,
    /// sorted ascending.
    pub fn one_hop_neighbors(&self, item: usize) -> Result<Vec<usize>> {
        if !self.is_item(item) {
            return Err(Error::data(format!("entity {item} is not an item")));
        }
        let mut out = BTreeSet::new();
        for r in 0..self.num_relations() {
            for &j in self.neighbors(item, r) {
                if j != item {
                    out.insert(j);
                }
            }
        }
        Ok(out.into_iter().collect())
    }

    pub fn stats(&self) -> KgStats {
        let mut node_counts = BTreeMap::new();
        for ty in &self.entity_types {
            *node_counts.entry(ty.as_str().to_string()).or_insert(0) += 1;
        }
        let mut edge_counts: BTreeMap<String, usize> =
            self.relation_names.iter().map(|r| (r.clone(), 0)).collect();
        for t in &self.triples {
            *edge_counts
                .get_mut(&self.relation_names[t.relation])
                .expect("relation validated at construction") += 1;
        }
        KgStats {
            total_nodes: self.entity_names.len(),
            total_edges: self.triples.len(),
            node_counts,
            edge_counts,
        }
    }

    /// Write the entity and triple files. Triples are sorted by (relation,
    /// head, tail) so a reload assigns identical relation ids.
    pub fn save(&self, entity_path: &Path, triple_path: &Path) -> Result<()> {
        let mut ef = std::io::BufWriter::new(std::fs::File::create(entity_path)?);
        for (id, (name, ty)) in self.entity_names.iter().zip(&self.entity_types).enumerate() {
            writeln!(ef, "{id}\t{}\t{name}", ty.as_str())?;
        }
        let mut sorted = self.triples.clone();
        sorted.sort();
        let mut tf = std::io::BufWriter::new(std::fs::File::create(triple_path)?);
        for t in &sorted {
            writeln!(
                tf,
                "{}\t{}\t{}",
                t.head, self.relation_names[t.relation], t.tail
            )?;
        }
        Ok(())
    }
}

/// Parse entity and triple streams into a graph.
///
/// Entity lines are `id<TAB>node_type<TAB>surface_name` with ids sequential
/// from zero. Triple lines are `head_id<TAB>relation_name<TAB>tail_id`.
/// Lines starting with `#` and blank lines are skipped. Relation ids follow
/// first appearance order in the triple stream.
pub fn load_triples(
    triple_file: impl BufRead,
    entity_file: impl BufRead,
) -> Result<KnowledgeGraph> {
    let mut entity_names = Vec::new();
    let mut entity_types = Vec::new();
    for (lineno, line) in entity_file.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "entity file line {lineno}: expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let id: usize = fields[0].parse().map_err(|_| {
            Error::data(format!("entity file line {lineno}: bad id {:?}", fields[0]))
        })?;
        if id != entity_names.len() {
            return Err(Error::data(format!(
                "entity file line {lineno}: expected id {}, got {id}",
                entity_names.len()
            )));
        }
        let ty = NodeType::parse(fields[1]).ok_or_else(|| {
            Error::data(format!(
                "entity file line {lineno}: unknown node type {:?}",
                fields[1]
            ))
        })?;
        entity_names.push(fields[2].to_string());
        entity_types.push(ty);
    }

    let mut relation_names: Vec<String> = Vec::new();
    let mut triples = Vec::new();
    for (lineno, line) in triple_file.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::data(format!(
                "triple file line {lineno}: expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        }
        let head: usize = fields[0].parse().map_err(|_| {
            Error::data(format!(
                "triple file line {lineno}: bad head id {:?}",
                fields[0]
            ))
        })?;
        let tail: usize = fields[2].parse().map_err(|_| {
            Error::data(format!(
                "triple file line {lineno}: bad tail id {:?}",
                fields[2]
            ))
        })?;
        if head >= entity_names.len() || tail >= entity_names.len() {
            return Err(Error::data(format!(
                "triple file line {lineno}: entity id out of range"
            )));
        }
        if head == tail {
            return Err(Error::data(format!(
                "triple file line {lineno}: self-loop on entity {head}"
            )));
        }
        let relation = match relation_names.iter().position(|r| r == fields[1]) {
            Some(r) => r,
            None => {
                relation_names.push(fields[1].to_string());
                relation_names.len() - 1
            }
        };
        triples.push(Triple {
            head,
            relation,
            tail,
        });
    }

    KnowledgeGraph::new(entity_names, entity_types, relation_names, triples)
}

/// Convenience wrapper over [`load_triples`] for file paths.
pub fn load_graph_files(triple_path: &Path, entity_path: &Path) -> Result<KnowledgeGraph> {
    let tf = BufReader::new(std::fs::File::open(triple_path)?);
    let ef = BufReader::new(std::fs::File::open(entity_path)?);
    load_triples(tf, ef)
}

/// Read one JSON record per line, validating each.
pub fn load_domain_records(reader: impl BufRead) -> Result<Vec<DomainRecord>> {
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let record: DomainRecord = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("record line {lineno}: {e}")))?;
        record
            .validate()
            .map_err(|e| Error::data(format!("record line {lineno}: {e}")))?;
        records.push(record);
    }
    Ok(records)
}

/// Relation families of a domain graph: genre, keyword, cast, company, and
/// one relation per crew department.
pub fn domain_relation_names() -> Vec<String> {
    let mut names = vec![
        "genre".to_string(),
        "keyword".to_string(),
        "cast".to_string(),
        "company".to_string(),
    ];
    names.extend(CREW_DEPARTMENTS.iter().map(|d| d.to_string()));
    names
}

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum AttrKind {
    Genre,
    Cast,
    Crew,
    Keyword,
    Company,
}

impl AttrKind {
    fn node_type(self) -> NodeType {
        match self {
            AttrKind::Genre => NodeType::Genre,
            AttrKind::Cast => NodeType::Cast,
            AttrKind::Crew => NodeType::Crew,
            AttrKind::Keyword => NodeType::Keyword,
            AttrKind::Company => NodeType::Production,
        }
    }
}

/// Build a movie knowledge graph from attribute records.
///
/// Attribute values are counted globally first (one count per record that
/// mentions the value, case-folded) and only values meeting their type's
/// threshold become nodes. Movies always become nodes; colliding titles are
/// disambiguated with the year, then a numeric suffix. The graph always
/// carries the full relation table from [`domain_relation_names`].
pub fn build_domain_kg(records: &[DomainRecord], thresholds: Thresholds) -> Result<KnowledgeGraph> {
    for r in records {
        r.validate()?;
    }

    // Global occurrence counts, one per record containing the value.
    let mut counts: BTreeMap<(AttrKind, String), usize> = BTreeMap::new();
    for record in records {
        let mut seen = BTreeSet::new();
        for (kind, values) in [
            (AttrKind::Genre, &record.genres),
            (AttrKind::Cast, &record.cast),
            (AttrKind::Keyword, &record.keywords),
            (AttrKind::Company, &record.companies),
        ] {
            for v in values {
                seen.insert((kind, v.to_lowercase()));
            }
        }
        for credit in &record.crew {
            seen.insert((AttrKind::Crew, credit.name.to_lowercase()));
        }
        for key in seen {
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    let survives = |kind: AttrKind, value: &str| -> bool {
        let need = match kind {
            AttrKind::Genre => thresholds.genre,
            AttrKind::Cast => thresholds.cast,
            AttrKind::Crew => thresholds.crew,
            AttrKind::Keyword => thresholds.keyword,
            AttrKind::Company => thresholds.company,
        };
        counts
            .get(&(kind, value.to_lowercase()))
            .is_some_and(|&c| c >= need)
    };

    // Movie nodes first, in record order, with titles disambiguated.
    let mut entity_names: Vec<String> = Vec::new();
    let mut entity_types: Vec<NodeType> = Vec::new();
    let mut used_titles: BTreeSet<String> = BTreeSet::new();
    for record in records {
        let mut name = record.title.clone();
        if used_titles.contains(&name.to_lowercase()) {
            name = format!("{} ({})", record.title, record.year);
        }
        let mut k = 2;
        while used_titles.contains(&name.to_lowercase()) {
            name = format!("{} ({}) #{k}", record.title, record.year);
            k += 1;
        }
        used_titles.insert(name.to_lowercase());
        entity_names.push(name);
        entity_types.push(NodeType::Movie);
    }

    // Attribute nodes in first-appearance order, grouped by kind.
    let mut node_of: BTreeMap<(AttrKind, String), usize> = BTreeMap::new();
    for kind in [
        AttrKind::Genre,
        AttrKind::Cast,
        AttrKind::Crew,
        AttrKind::Keyword,
        AttrKind::Company,
    ] {
        for record in records {
            let values: Vec<&String> = match kind {
                AttrKind::Genre => record.genres.iter().collect(),
                AttrKind::Cast => record.cast.iter().collect(),
                AttrKind::Keyword => record.keywords.iter().collect(),
                AttrKind::Company => record.companies.iter().collect(),
                AttrKind::Crew => record.crew.iter().map(|c| &c.name).collect(),
            };
            for v in values {
                let key = (kind, v.to_lowercase());
                if node_of.contains_key(&key) || !survives(kind, v) {
                    continue;
                }
                node_of.insert(key, entity_names.len());
                entity_names.push(v.clone());
                entity_types.push(kind.node_type());
            }
        }
    }

    let relation_names = domain_relation_names();
    let rel_id = |name: &str| -> usize {
        relation_names
            .iter()
            .position(|r| r == name)
            .expect("domain relation table is fixed")
    };

    let mut triples = Vec::new();
    for (movie, record) in records.iter().enumerate() {
        for (kind, rel, values) in [
            (AttrKind::Genre, rel_id("genre"), &record.genres),
            (AttrKind::Keyword, rel_id("keyword"), &record.keywords),
            (AttrKind::Cast, rel_id("cast"), &record.cast),
            (AttrKind::Company, rel_id("company"), &record.companies),
        ] {
            for v in values {
                if let Some(&node) = node_of.get(&(kind, v.to_lowercase())) {
                    triples.push(Triple {
                        head: movie,
                        relation: rel,
                        tail: node,
                    });
                }
            }
        }
        for credit in &record.crew {
            if let Some(&node) = node_of.get(&(AttrKind::Crew, credit.name.to_lowercase())) {
                triples.push(Triple {
                    head: movie,
                    relation: rel_id(&credit.department),
                    tail: node,
                });
            }
        }
    }

    KnowledgeGraph::new(entity_names, entity_types, relation_names, triples)
}
