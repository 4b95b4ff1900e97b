//! Labeled constituency trees in SST-style s-expression form.
//!
//! A tree is stored as an arena whose node ids are in post-order: children
//! always precede their parent and the root is the last node.
//!
//! ```text
//! (3 (2 good) (1 bad))
//! ```
//!
//! Each group starts with a label head. A group holding a single bare token is
//! a leaf; bare tokens next to other children become unlabeled leaves. The head
//! `_` marks a node without a label.

use std::fmt::{self, Write as _};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type NodeId = usize;

const NO_LABEL: &str = "_";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TreeError {
    #[error("unbalanced parentheses")]
    Unbalanced,
    #[error("empty group at token {0}")]
    EmptyGroup(usize),
    #[error("expected '(' at token {0}")]
    ExpectedOpen(usize),
    #[error("unexpected input after the tree at token {0}")]
    TrailingInput(usize),
    #[error("non-numeric label {0:?}")]
    NonNumericLabel(String),
    #[error("label {label} outside the {scheme} range")]
    LabelOutOfRange { label: String, scheme: LabelKind },
    #[error("unknown node id {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not binary")]
    NotBinary(NodeId),
    #[error("line {line}: {source}")]
    AtLine { line: usize, source: Box<TreeError> },
    #[error("i/o error: {0}")]
    Io(String),
}

/// Label inventory of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    /// Negative/positive. Raw labels `0`/`1`, or `N`/`P`.
    Binary,
    /// Five-way fine-grained sentiment, raw labels `0`..=`4`.
    Fine5,
}

impl LabelKind {
    pub fn num_classes(self) -> usize {
        match self {
            LabelKind::Binary => 2,
            LabelKind::Fine5 => 5,
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelKind::Binary => "binary",
            LabelKind::Fine5 => "fine5",
        })
    }
}

/// How raw label heads map to class indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub kind: LabelKind,
    /// Keep only the root label; heads below the root are ignored and may be
    /// arbitrary strings (e.g. syntactic categories).
    pub sentence_only: bool,
}

impl LabelScheme {
    pub fn new(kind: LabelKind, sentence_only: bool) -> Self {
        LabelScheme { kind, sentence_only }
    }

    pub fn num_classes(&self) -> usize {
        self.kind.num_classes()
    }

    pub fn parse_label(&self, raw: &str) -> Result<Option<usize>, TreeError> {
        if raw == NO_LABEL {
            return Ok(None);
        }
        if self.kind == LabelKind::Binary {
            match raw {
                "N" | "n" => return Ok(Some(0)),
                "P" | "p" => return Ok(Some(1)),
                _ => {}
            }
        }
        let value: usize = raw.parse().map_err(|_| TreeError::NonNumericLabel(raw.to_string()))?;
        if value < self.num_classes() {
            Ok(Some(value))
        } else {
            Err(TreeError::LabelOutOfRange { label: raw.to_string(), scheme: self.kind })
        }
    }
}

/// Where a node's label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Gold,
    Dictionary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NodeLabel {
    pub class: usize,
    pub source: LabelSource,
}

impl NodeLabel {
    pub fn gold(class: usize) -> Self {
        NodeLabel { class, source: LabelSource::Gold }
    }
}

/// Half-open token interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn width(&self) -> usize {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub label: Option<NodeLabel>,
    pub token: Option<String>,
    pub children: Vec<NodeId>,
    pub span: Span,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn class(&self) -> Option<usize> {
        self.label.map(|l| l.class)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseTree {
    nodes: Vec<TreeNode>,
    root: NodeId,
}

impl ParseTree {
    pub fn root(&self) -> NodeId {
        self.root
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Result<&TreeNode, TreeError> {
        self.nodes.get(id).ok_or(TreeError::UnknownNode(id))
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> &mut TreeNode {
        &mut self.nodes[id]
    }

    /// Nodes in post-order (children before parents).
    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn root_label(&self) -> Option<usize> {
        self.nodes[self.root].class()
    }

    /// Sentence tokens, left to right.
    pub fn tokens(&self) -> Vec<&str> {
        self.nodes.iter().filter_map(|n| n.token.as_deref()).collect()
    }

    pub fn num_tokens(&self) -> usize {
        self.nodes[self.root].span.end
    }

    pub fn is_binary(&self) -> bool {
        self.nodes.iter().all(|n| n.children.is_empty() || n.children.len() == 2)
    }

    /// Strict descendants of `id`, in post-order.
    pub fn descendants(&self, id: NodeId) -> Result<Vec<NodeId>, TreeError> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.nodes[id].children.clone();
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(self.nodes[n].children.iter().copied());
        }
        out.sort_unstable();
        Ok(out)
    }

    /// Left-to-right leaf tokens under `id`.
    pub fn yield_tokens(&self, id: NodeId) -> Result<Vec<&str>, TreeError> {
        self.node(id)?;
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            let node = &self.nodes[n];
            match &node.token {
                Some(t) if node.is_leaf() => out.push(t.as_str()),
                _ => stack.extend(node.children.iter().rev().copied()),
            }
        }
        Ok(out)
    }

    /// Checks the arena invariants: one root, unique parents, post-order ids,
    /// contiguous spans, non-empty leaf tokens.
    pub fn validate(&self) -> Result<(), String> {
        if self.nodes.is_empty() || self.root != self.nodes.len() - 1 {
            return Err("root must be the last node".into());
        }
        let mut parent = vec![None; self.nodes.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if node.is_leaf() {
                match &node.token {
                    Some(t) if !t.is_empty() => {}
                    _ => return Err(format!("leaf {id} has no token")),
                }
                if node.span.width() != 1 {
                    return Err(format!("leaf {id} span width {}", node.span.width()));
                }
                continue;
            }
            if node.token.is_some() {
                return Err(format!("internal node {id} carries a token"));
            }
            let mut expected = node.span.start;
            for &c in &node.children {
                if c >= id {
                    return Err(format!("child {c} does not precede parent {id}"));
                }
                if parent[c].replace(id).is_some() {
                    return Err(format!("node {c} has two parents"));
                }
                if self.nodes[c].span.start != expected {
                    return Err(format!("child spans of {id} are not contiguous"));
                }
                expected = self.nodes[c].span.end;
            }
            if expected != node.span.end {
                return Err(format!("span of {id} is not the union of its children"));
            }
        }
        let orphans = parent.iter().enumerate().filter(|(i, p)| p.is_none() && *i != self.root).count();
        if orphans > 0 || parent[self.root].is_some() {
            return Err("tree must have exactly one root".into());
        }
        Ok(())
    }

    /// SST-style rendering; unlabeled nodes print the head `_`.
    pub fn to_sexpr(&self) -> String {
        let mut out = String::new();
        self.write_node(self.root, &mut out);
        out
    }

    fn write_node(&self, id: NodeId, out: &mut String) {
        let node = &self.nodes[id];
        out.push('(');
        match node.class() {
            Some(c) => write!(out, "{c}").unwrap(),
            None => out.push_str(NO_LABEL),
        }
        if let Some(t) = &node.token {
            out.push(' ');
            out.push_str(t);
        }
        for &c in &node.children {
            out.push(' ');
            self.write_node(c, out);
        }
        out.push(')');
    }

    /// Left-branching binarization with unary-chain collapse.
    ///
    /// `(A B C)` becomes `((A B) C)` with an unlabeled inner node. A unary chain
    /// collapses onto its bottom node, which keeps the topmost label on the chain.
    pub fn binarize(&self) -> ParseTree {
        let mut out = Vec::with_capacity(self.nodes.len());
        let root = self.binarize_node(self.root, &mut out);
        ParseTree { nodes: out, root }
    }

    fn binarize_node(&self, id: NodeId, out: &mut Vec<TreeNode>) -> NodeId {
        let mut cur = id;
        let mut label = self.nodes[cur].label;
        while self.nodes[cur].children.len() == 1 {
            cur = self.nodes[cur].children[0];
            label = label.or(self.nodes[cur].label);
        }
        let node = &self.nodes[cur];
        if node.is_leaf() {
            out.push(TreeNode { label, token: node.token.clone(), children: Vec::new(), span: node.span });
            return out.len() - 1;
        }
        // Fold one child at a time so ids stay in canonical post-order.
        let mut acc = self.binarize_node(node.children[0], out);
        for (k, &child) in node.children.iter().enumerate().skip(1) {
            let right = self.binarize_node(child, out);
            let top = k == node.children.len() - 1;
            let span = Span { start: out[acc].span.start, end: out[right].span.end };
            out.push(TreeNode { label: if top { label } else { None }, token: None, children: vec![acc, right], span });
            acc = out.len() - 1;
        }
        acc
    }

    pub fn clear_non_root_labels(&mut self) {
        let root = self.root;
        for (id, n) in self.nodes.iter_mut().enumerate() {
            if id != root {
                n.label = None;
            }
        }
    }
}

impl fmt::Display for ParseTree {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_sexpr())
    }
}

enum Item<'a> {
    Group(NodeId),
    Bare(&'a str, usize),
}

#[derive(Debug, Clone, PartialEq)]
enum Lex<'a> {
    Open,
    Close,
    Atom(&'a str),
}

fn lex(text: &str) -> Vec<Lex<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        let delim = ch == '(' || ch == ')' || ch.is_whitespace();
        if delim {
            if let Some(s) = start.take() {
                out.push(Lex::Atom(&text[s..i]));
            }
            match ch {
                '(' => out.push(Lex::Open),
                ')' => out.push(Lex::Close),
                _ => {}
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(Lex::Atom(&text[s..]));
    }
    out
}

struct Parser<'a> {
    lexemes: Vec<Lex<'a>>,
    pos: usize,
    scheme: LabelScheme,
    nodes: Vec<TreeNode>,
    next_token: usize,
}

impl<'a> Parser<'a> {
    fn group(&mut self, is_root: bool) -> Result<NodeId, TreeError> {
        match self.lexemes.get(self.pos) {
            Some(Lex::Open) => self.pos += 1,
            Some(_) => return Err(TreeError::ExpectedOpen(self.pos)),
            None => return Err(TreeError::Unbalanced),
        }
        let head = match self.lexemes.get(self.pos) {
            Some(Lex::Atom(a)) => *a,
            Some(_) => return Err(TreeError::EmptyGroup(self.pos)),
            None => return Err(TreeError::Unbalanced),
        };
        self.pos += 1;
        let label = if is_root || !self.scheme.sentence_only {
            self.scheme.parse_label(head)?.map(NodeLabel::gold)
        } else {
            None
        };

        let start = self.next_token;
        let mut items: Vec<Item<'a>> = Vec::new();
        loop {
            match self.lexemes.get(self.pos) {
                Some(Lex::Close) => {
                    self.pos += 1;
                    break;
                }
                Some(Lex::Open) => items.push(Item::Group(self.group(false)?)),
                Some(Lex::Atom(a)) => {
                    items.push(Item::Bare(a, self.next_token));
                    self.next_token += 1;
                    self.pos += 1;
                }
                None => return Err(TreeError::Unbalanced),
            }
        }
        match items.as_slice() {
            [] => Err(TreeError::EmptyGroup(self.pos - 1)),
            [Item::Bare(token, at)] => {
                let span = Span { start: *at, end: at + 1 };
                Ok(self.push(TreeNode { label, token: Some(token.to_string()), children: Vec::new(), span }))
            }
            _ => {
                let mut children = Vec::with_capacity(items.len());
                for item in &items {
                    match *item {
                        Item::Group(id) => children.push(id),
                        Item::Bare(token, at) => children.push(self.push(TreeNode {
                            label: None,
                            token: Some(token.to_string()),
                            children: Vec::new(),
                            span: Span { start: at, end: at + 1 },
                        })),
                    }
                }
                let span = Span { start, end: self.next_token };
                Ok(self.push(TreeNode { label, token: None, children, span }))
            }
        }
    }

    fn push(&mut self, node: TreeNode) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }
}

/// Parses one s-expression tree.
pub fn parse_sexpr(text: &str, scheme: LabelScheme) -> Result<ParseTree, TreeError> {
    let lexemes = lex(text);
    let mut parser = Parser { lexemes, pos: 0, scheme, nodes: Vec::new(), next_token: 0 };
    let root = parser.group(true)?;
    if parser.pos != parser.lexemes.len() {
        return Err(match parser.lexemes[parser.pos] {
            Lex::Close => TreeError::Unbalanced,
            _ => TreeError::TrailingInput(parser.pos),
        });
    }
    let mut tree = ParseTree { nodes: parser.nodes, root };
    if !children_in_order(&tree) {
        tree = renumber_post_order(&tree);
    }
    debug_assert_eq!(tree.validate(), Ok(()));
    Ok(tree)
}

// Bare-token leaves are pushed after the sibling groups that follow them in
// the text, which breaks post-order numbering.
fn children_in_order(tree: &ParseTree) -> bool {
    tree.nodes.iter().all(|n| n.children.windows(2).all(|w| w[0] < w[1]))
}

fn renumber_post_order(tree: &ParseTree) -> ParseTree {
    fn visit(tree: &ParseTree, id: NodeId, out: &mut Vec<TreeNode>) -> NodeId {
        let node = &tree.nodes[id];
        let children = node.children.iter().map(|&c| visit(tree, c, out)).collect();
        out.push(TreeNode { children, ..node.clone() });
        out.len() - 1
    }
    let mut out = Vec::with_capacity(tree.nodes.len());
    let root = visit(tree, tree.root, &mut out);
    ParseTree { nodes: out, root }
}

/// Reads one tree per non-blank line. Errors carry the 1-based line number.
pub fn read_trees<R: BufRead>(reader: R, scheme: LabelScheme) -> Result<Vec<ParseTree>, TreeError> {
    let mut trees = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TreeError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let tree = parse_sexpr(&line, scheme).map_err(|e| TreeError::AtLine { line: i + 1, source: Box::new(e) })?;
        trees.push(tree);
    }
    Ok(trees)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fine() -> LabelScheme {
        LabelScheme::new(LabelKind::Fine5, false)
    }

    #[test]
    fn parses_two_leaf_tree() {
        let t = parse_sexpr("(3 (2 good) (1 bad))", fine()).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.root_label(), Some(3));
        assert_eq!(t.tokens(), vec!["good", "bad"]);
        assert_eq!(t.node(0).unwrap().class(), Some(2));
        assert_eq!(t.node(1).unwrap().class(), Some(1));
        assert_eq!(t.node(t.root()).unwrap().span, Span { start: 0, end: 2 });
    }

    #[test]
    fn single_leaf_tree() {
        let t = parse_sexpr("(2 word)", fine()).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.node(0).unwrap().span, Span { start: 0, end: 1 });
        assert_eq!(t.node(0).unwrap().token.as_deref(), Some("word"));
    }

    #[test]
    fn parse_errors() {
        assert_eq!(parse_sexpr("(3 (2 good)", fine()), Err(TreeError::Unbalanced));
        assert_eq!(parse_sexpr("(3 (2 good)))", fine()), Err(TreeError::Unbalanced));
        assert!(matches!(parse_sexpr("()", fine()), Err(TreeError::EmptyGroup(_))));
        assert!(matches!(parse_sexpr("(3)", fine()), Err(TreeError::EmptyGroup(_))));
        assert!(matches!(parse_sexpr("good", fine()), Err(TreeError::ExpectedOpen(0))));
        assert!(matches!(parse_sexpr("(2 a) (2 b)", fine()), Err(TreeError::TrailingInput(_))));
        assert_eq!(parse_sexpr("(X (2 a) (2 b))", fine()), Err(TreeError::NonNumericLabel("X".into())));
        assert!(matches!(parse_sexpr("(7 word)", fine()), Err(TreeError::LabelOutOfRange { .. })));
        let bin = LabelScheme::new(LabelKind::Binary, false);
        assert!(matches!(parse_sexpr("(2 word)", bin), Err(TreeError::LabelOutOfRange { .. })));
        assert_eq!(parse_sexpr("(P word)", bin).unwrap().root_label(), Some(1));
    }

    #[test]
    fn sentence_only_ignores_inner_heads() {
        let scheme = LabelScheme::new(LabelKind::Binary, true);
        let t = parse_sexpr("(1 (NP (N cat)) (VP sat))", scheme).unwrap();
        assert_eq!(t.root_label(), Some(1));
        assert!(t.nodes().iter().filter(|n| n.label.is_some()).count() == 1);
        assert!(parse_sexpr("(S (NP cat) (VP sat))", scheme).is_err());
    }

    #[test]
    fn bare_tokens_become_leaves_in_order() {
        let t = parse_sexpr("(3 (2 very) good (1 not bad) film)", fine()).unwrap();
        assert_eq!(t.validate(), Ok(()));
        assert_eq!(t.tokens(), vec!["very", "good", "not", "bad", "film"]);
        assert_eq!(t.yield_tokens(t.root()).unwrap(), vec!["very", "good", "not", "bad", "film"]);
    }

    #[test]
    fn serializer_is_byte_identical_for_labeled_trees() {
        let line = "(3 (2 (2 The) (2 film)) (3 (2 is) (4 great)))";
        assert_eq!(parse_sexpr(line, fine()).unwrap().to_sexpr(), line);
    }

    #[test]
    fn binarize_left_branching() {
        let t = parse_sexpr("(3 (2 a) (1 b) (0 c))", fine()).unwrap();
        let b = t.binarize();
        assert_eq!(b.to_sexpr(), "(3 (_ (2 a) (1 b)) (0 c))");
        assert_eq!(b.validate(), Ok(()));
        assert!(b.is_binary());
    }

    #[test]
    fn binarize_identity_on_binary_tree() {
        let t = parse_sexpr("(3 (2 (2 The) (2 film)) (3 (2 is) (4 great)))", fine()).unwrap();
        assert_eq!(t.binarize(), t);
    }

    #[test]
    fn binarize_collapses_unary_chain() {
        let t = parse_sexpr("(3 (2 word))", fine()).unwrap();
        let b = t.binarize();
        assert_eq!(b.len(), 1);
        assert_eq!(b.root_label(), Some(3));
        assert_eq!(b.to_sexpr(), "(3 word)");
        let t = parse_sexpr("(_ (_ (1 word)))", fine()).unwrap();
        assert_eq!(t.binarize().to_sexpr(), "(1 word)");
    }

    #[test]
    fn yields() {
        let t = parse_sexpr("(3 (2 good) (1 bad))", fine()).unwrap();
        assert_eq!(t.yield_tokens(0).unwrap(), vec!["good"]);
        assert_eq!(t.yield_tokens(t.root()).unwrap(), vec!["good", "bad"]);
        assert_eq!(t.yield_tokens(1).unwrap(), vec!["bad"]);
        assert_eq!(t.yield_tokens(9), Err(TreeError::UnknownNode(9)));
    }

    #[test]
    fn descendants_are_strict() {
        let t = parse_sexpr("(3 (2 (2 The) (2 film)) (3 is))", fine()).unwrap();
        assert_eq!(t.descendants(t.root()).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(t.descendants(2).unwrap(), vec![0, 1]);
        assert!(t.descendants(0).unwrap().is_empty());
    }

    #[test]
    fn read_trees_reports_line() {
        let text = "(2 a)\n\n(3 (2 b)\n";
        let err = read_trees(text.as_bytes(), fine()).unwrap_err();
        assert_eq!(err, TreeError::AtLine { line: 3, source: Box::new(TreeError::Unbalanced) });
        assert!(err.to_string().starts_with("line 3:"));
    }
}
