//! Polar dictionaries and distant supervision.
//!
//! Dictionary file format, one entry per line:
//!
//! ```text
//! # comment
//! apprehension<TAB>neg
//! very good<TAB>pos
//! ```
//!
//! Multiword surfaces must be tokenized the same way as the corpus. During
//! training, every non-root node whose yield (tokens joined by one space)
//! equals a surface gets that polarity as a hard label, unless it already has
//! a gold label.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::treeio::{LabelKind, LabelSource, NodeId, NodeLabel, ParseTree};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexiconError {
    #[error("line {line}: expected `surface<TAB>pos|neg`")]
    Malformed { line: usize },
    #[error("line {line}: unknown polarity tag {tag:?}")]
    UnknownPolarity { line: usize, tag: String },
    #[error("tree root has no label")]
    UnlabeledRoot,
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_tag(tag: &str) -> Option<Polarity> {
        match tag {
            "pos" => Some(Polarity::Positive),
            "neg" => Some(Polarity::Negative),
            _ => None,
        }
    }
}

/// Class indices assigned to dictionary polarities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolarityMap {
    pub positive: usize,
    pub negative: usize,
}

impl PolarityMap {
    /// Binary: negative 0, positive 1. Five-way: negative 1, positive 3.
    pub fn default_for(kind: LabelKind) -> Self {
        match kind {
            LabelKind::Binary => PolarityMap { positive: 1, negative: 0 },
            LabelKind::Fine5 => PolarityMap { positive: 3, negative: 1 },
        }
    }

    pub fn class(&self, p: Polarity) -> usize {
        match p {
            Polarity::Positive => self.positive,
            Polarity::Negative => self.negative,
        }
    }
}

/// Surface string to polarity class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolarDictionary {
    entries: HashMap<String, (Polarity, usize)>,
    max_tokens: usize,
    warnings: Vec<String>,
}

fn normalize_surface(surface: &str) -> String {
    surface.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl PolarDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces an entry; returns the previous polarity.
    pub fn insert(&mut self, surface: &str, polarity: Polarity, map: PolarityMap) -> Option<Polarity> {
        let surface = normalize_surface(surface);
        self.max_tokens = self.max_tokens.max(surface.split(' ').count());
        self.entries.insert(surface, (polarity, map.class(polarity))).map(|(p, _)| p)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, surface: &str) -> Option<usize> {
        self.entries.get(surface).map(|&(_, c)| c)
    }

    pub fn count(&self, polarity: Polarity) -> usize {
        self.entries.values().filter(|(p, _)| *p == polarity).count()
    }

    /// Longest entry, in tokens.
    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    /// Load-time warnings (duplicate surfaces).
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// All tokens occurring in any surface.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().flat_map(|s| s.split(' '))
    }

    /// Entries sorted by surface.
    pub fn sorted_entries(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<_> = self.entries.iter().map(|(s, &(_, c))| (s.as_str(), c)).collect();
        v.sort_unstable();
        v
    }
}

pub fn load_dictionary<R: BufRead>(reader: R, map: PolarityMap) -> Result<PolarDictionary, LexiconError> {
    let mut dict = PolarDictionary::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LexiconError::Io(e.to_string()))?;
        let line_no = i + 1;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (surface, tag) = trimmed.split_once('\t').ok_or(LexiconError::Malformed { line: line_no })?;
        if surface.trim().is_empty() || tag.contains('\t') {
            return Err(LexiconError::Malformed { line: line_no });
        }
        let tag = tag.trim();
        let polarity = Polarity::from_tag(tag)
            .ok_or_else(|| LexiconError::UnknownPolarity { line: line_no, tag: tag.to_string() })?;
        if dict.insert(surface, polarity, map).is_some() {
            let msg = format!("line {line_no}: duplicate surface {:?}, keeping the later entry", surface.trim());
            log::warn!("{msg}");
            dict.warnings.push(msg);
        }
    }
    Ok(dict)
}

/// Stamps dictionary labels onto every matching non-root node. Existing gold
/// labels are kept.
pub fn annotate(tree: &ParseTree, dict: &PolarDictionary) -> ParseTree {
    let mut out = tree.clone();
    if dict.is_empty() {
        return out;
    }
    let tokens = tree.tokens();
    let root = tree.root();
    for (id, node) in tree.nodes().iter().enumerate() {
        if id == root || node.span.width() > dict.max_tokens() {
            continue;
        }
        if matches!(node.label, Some(NodeLabel { source: LabelSource::Gold, .. })) {
            continue;
        }
        let surface = tokens[node.span.start..node.span.end].join(" ");
        if let Some(class) = dict.get(&surface) {
            out.node_mut(id).label = Some(NodeLabel { class, source: LabelSource::Dictionary });
        }
    }
    out
}

/// Labeled nodes, root first, then the rest in post-order.
pub fn collect_loss_nodes(tree: &ParseTree) -> Result<Vec<NodeId>, LexiconError> {
    let root = tree.root();
    if tree.root_label().is_none() {
        return Err(LexiconError::UnlabeledRoot);
    }
    let mut out = vec![root];
    out.extend(tree.nodes().iter().enumerate().filter(|(id, n)| *id != root && n.label.is_some()).map(|(id, _)| id));
    Ok(out)
}
