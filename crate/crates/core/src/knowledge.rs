//! Concept store and neighbor retrieval.
//!
//! The store is a preprocessed slice of a commonsense graph, loaded
//! from tab-separated `head<TAB>relation<TAB>tail<TAB>weight` lines.
//! Anchor identification is exact surface matching of lowercase
//! unigrams and bigrams against store heads; retrieval returns each
//! anchor's one-hop neighbors ranked by edge weight.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Common function words that never match as unigram anchors (they can
/// still participate in bigram concepts like "red light").
pub const STOPWORDS: &[&str] = &[
    "a", "an", "the", "and", "or", "but", "if", "then", "of", "in", "on", "at", "to", "for",
    "with", "is", "are", "was", "were", "be", "been", "being", "it", "its", "this", "that",
    "these", "those", "as", "by", "from", "he", "she", "they", "we", "you", "i", "me", "my",
    "your", "their", "our", "his", "her", "not", "no", "so", "do", "does", "did", "will",
    "would", "can", "could", "has", "have", "had", "what", "when", "who", "how", "all", "just",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptEdge {
    pub neighbor: String,
    pub relation: String,
    pub weight: f64,
}

/// Directed one-hop adjacency from concept labels to weighted
/// neighbors. Labels are lowercase and single-space normalized;
/// duplicate (neighbor, relation) pairs per head are dropped on load.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConceptStore {
    edges: BTreeMap<String, Vec<ConceptEdge>>,
}

fn normalize_label(raw: &str) -> String {
    raw.split_whitespace()
        .map(|t| t.to_lowercase())
        .collect::<Vec<_>>()
        .join(" ")
}

impl ConceptStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts one edge, normalizing labels and ignoring a duplicate
    /// (neighbor, relation) pair under the same head.
    pub fn insert(&mut self, head: &str, relation: &str, tail: &str, weight: f64) {
        let head = normalize_label(head);
        let tail = normalize_label(tail);
        let entry = self.edges.entry(head).or_default();
        if entry
            .iter()
            .any(|e| e.neighbor == tail && e.relation == relation)
        {
            return;
        }
        entry.push(ConceptEdge {
            neighbor: tail,
            relation: relation.to_string(),
            weight,
        });
    }

    pub fn contains(&self, label: &str) -> bool {
        self.edges.contains_key(label)
    }

    pub fn neighbors(&self, label: &str) -> &[ConceptEdge] {
        self.edges.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.edges.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn heads(&self) -> impl Iterator<Item = &str> {
        self.edges.keys().map(String::as_str)
    }

    /// Iterates all edges in deterministic (head, insertion) order.
    pub fn iter_edges(&self) -> impl Iterator<Item = (&str, &ConceptEdge)> {
        self.edges
            .iter()
            .flat_map(|(head, edges)| edges.iter().map(move |e| (head.as_str(), e)))
    }
}

/// Loads a store from `head<TAB>relation<TAB>tail<TAB>weight` lines.
/// Directions are kept as given; no symmetric closure is applied.
pub fn load_concept_store(path: impl AsRef<Path>) -> Result<ConceptStore> {
    let display = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| Error::io(&display, e))?;
    let mut store = ConceptStore::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(&display, e))?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::knowledge(
                &display,
                line_no,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        }
        let weight: f64 = fields[3].trim().parse().map_err(|_| {
            Error::knowledge(&display, line_no, format!("bad weight '{}'", fields[3]))
        })?;
        if fields[0].trim().is_empty() || fields[2].trim().is_empty() {
            return Err(Error::knowledge(&display, line_no, "empty concept label"));
        }
        store.insert(fields[0], fields[1], fields[2], weight);
    }
    Ok(store)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceKind {
    Caption,
    Object,
}

/// One matched concept with the token span it came from.
/// `span` is a half-open `[start, end)` range over the source tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub label: String,
    pub span: (usize, usize),
    pub kind: SourceKind,
}

/// Anchors in source-position order with non-overlapping spans.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<Anchor>,
}

/// Scans lowercase tokens against the store: bigrams claim their two
/// tokens greedily left-to-right, remaining tokens may match as
/// unigrams. Stopwords never match as unigrams. Anchors come back in
/// span order.
pub fn identify_anchors(tokens: &[String], store: &ConceptStore, kind: SourceKind) -> AnchorSet {
    let mut consumed = vec![false; tokens.len()];
    let mut anchors = Vec::new();

    let mut i = 0;
    while i + 1 < tokens.len() {
        let bigram = format!("{} {}", tokens[i], tokens[i + 1]);
        if store.contains(&bigram) {
            anchors.push(Anchor {
                label: bigram,
                span: (i, i + 2),
                kind,
            });
            consumed[i] = true;
            consumed[i + 1] = true;
            i += 2;
        } else {
            i += 1;
        }
    }

    for (i, token) in tokens.iter().enumerate() {
        if consumed[i] || STOPWORDS.contains(&token.as_str()) {
            continue;
        }
        if store.contains(token) {
            anchors.push(Anchor {
                label: token.clone(),
                span: (i, i + 1),
                kind,
            });
        }
    }

    anchors.sort_by_key(|a| a.span.0);
    AnchorSet { anchors }
}

/// For each anchor, its one-hop neighbors sorted by weight descending
/// (ties lexicographic), capped at `per_anchor_cap`, with self-edges
/// dropped. An anchor absent from the store yields an empty list.
/// The result is index-aligned with `anchors.anchors`.
pub fn retrieve_neighbors(
    anchors: &AnchorSet,
    store: &ConceptStore,
    per_anchor_cap: usize,
) -> Result<Vec<Vec<String>>> {
    if per_anchor_cap == 0 {
        return Err(Error::Config("per_anchor_cap must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(anchors.anchors.len());
    for anchor in &anchors.anchors {
        let mut edges: Vec<&ConceptEdge> = store
            .neighbors(&anchor.label)
            .iter()
            .filter(|e| e.neighbor != anchor.label)
            .collect();
        edges.sort_by(|a, b| {
            b.weight
                .partial_cmp(&a.weight)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| a.neighbor.cmp(&b.neighbor))
        });
        out.push(
            edges
                .into_iter()
                .take(per_anchor_cap)
                .map(|e| e.neighbor.clone())
                .collect(),
        );
    }
    Ok(out)
}
