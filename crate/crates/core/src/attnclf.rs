//! Subtree attention and the softmax classifier.
//!
//! For a target node `j` with candidate nodes `i` (strict descendants by
//! default):
//!
//! ```text
//! g(h_i, h_j) = exp(W_a2 tanh(W_a1 [h_i; h_j] + b_a1) + b_a2)
//! a_ji        = g(h_i, h_j) / Σ_i' g(h_i', h_j)
//! a_j         = Σ_i a_ji h_i
//! ```
//!
//! The classifier reads `h_j` (hidden mode), `a_j` (attention-only mode), or
//! `[a_j; h_j]` (concat mode). Nodes without candidates fall back to hidden
//! mode.

use serde::{Deserialize, Serialize};

use crate::embed::Vocabulary;
use crate::encoder::{encode_tree, EncodedTree};
use crate::graph::{softmax, Tape, Var};
use crate::model::{AttentionParams, CandidateSet, ClassifierMode, Model, ModelError};
use crate::tensor::ParamStore;
use crate::treeio::{NodeId, ParseTree};

/// Normalized attention weights over `candidates` for `target`.
pub fn attention_scores(
    tape: &mut Tape,
    store: &ParamStore,
    p: &AttentionParams,
    candidates: &[Var],
    target: Var,
) -> Result<Var, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    let mut scores = Vec::with_capacity(candidates.len());
    for &h_i in candidates {
        let pair = tape.concat(&[h_i, target])?;
        let z = tape.matvec(store, p.w1, pair)?;
        let b1 = tape.param(store, p.b1);
        let z = tape.add(z, b1)?;
        let hidden = tape.tanh(z)?;
        let s = tape.matvec(store, p.w2, hidden)?;
        let b2 = tape.param(store, p.b2);
        scores.push(tape.add(s, b2)?);
    }
    let logits = tape.concat(&scores)?;
    let g = tape.exp(logits)?;
    Ok(tape.normalize(g)?)
}

/// `Σ_i weights[i] · candidates[i]`.
pub fn attention_vector(tape: &mut Tape, candidates: &[Var], weights: Var) -> Result<Var, ModelError> {
    if candidates.is_empty() {
        return Err(ModelError::EmptyCandidates);
    }
    if weights.len() != candidates.len() {
        return Err(ModelError::LengthMismatch { weights: weights.len(), candidates: candidates.len() });
    }
    Ok(tape.weighted_sum(weights, candidates)?)
}

/// Classifier input and output for one node, recorded on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeScores {
    pub logits: Var,
    /// Candidate node ids and their weight vector, when attention ran.
    pub attention: Option<(Vec<NodeId>, Var)>,
}

pub fn candidate_nodes(tree: &ParseTree, node: NodeId, set: CandidateSet) -> Result<Vec<NodeId>, ModelError> {
    Ok(match set {
        CandidateSet::Descendants => tree.descendants(node)?,
        CandidateSet::Children => tree.node(node)?.children.clone(),
    })
}

/// Records the classifier logits of `node` with the model's classifier mode.
pub fn classify_node(
    tape: &mut Tape,
    model: &Model,
    tree: &ParseTree,
    encoded: &EncodedTree,
    node: NodeId,
) -> Result<NodeScores, ModelError> {
    let store = &model.store;
    let h = encoded.h(node).ok_or(ModelError::NotEncoded(node))?;
    let mode = model.config.classifier;
    let candidates =
        if mode.uses_attention() { candidate_nodes(tree, node, model.config.candidates)? } else { Vec::new() };
    let clf = &model.classifier;

    if candidates.is_empty() {
        let z = tape.matvec(store, clf.w_hidden, h)?;
        let b = tape.param(store, clf.b_hidden);
        return Ok(NodeScores { logits: tape.add(z, b)?, attention: None });
    }

    let attn = model.attention.as_ref().ok_or(ModelError::NoAttention)?;
    let hs =
        candidates.iter().map(|&i| encoded.h(i).ok_or(ModelError::NotEncoded(i))).collect::<Result<Vec<_>, _>>()?;
    let weights = attention_scores(tape, store, attn, &hs, h)?;
    let a = attention_vector(tape, &hs, weights)?;
    let logits = match mode {
        ClassifierMode::AttentionOnly => {
            let z = tape.matvec(store, clf.w_hidden, a)?;
            let b = tape.param(store, clf.b_hidden);
            tape.add(z, b)?
        }
        ClassifierMode::Concat => {
            let (w, b) = clf.concat.ok_or_else(|| ModelError::Config("concat classifier parameters missing".into()))?;
            let x = tape.concat(&[a, h])?;
            let z = tape.matvec(store, w, x)?;
            let b = tape.param(store, b);
            tape.add(z, b)?
        }
        ClassifierMode::Hidden => unreachable!("hidden mode has no candidates"),
    };
    Ok(NodeScores { logits, attention: Some((candidates, weights)) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeight {
    pub node_span: [usize; 2],
    pub weight: f64,
}

/// Label distribution of one node, with attention weights when computed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub node_span: [usize; 2],
    pub distribution: Vec<f64>,
    pub argmax: usize,
    pub attention: Vec<AttentionWeight>,
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) }).0
}

/// Reads a [`Prediction`] off a tape.
pub fn read_prediction(
    tape: &Tape,
    tree: &ParseTree,
    node: NodeId,
    scores: &NodeScores,
) -> Result<Prediction, ModelError> {
    let distribution = softmax(tape.value(scores.logits));
    let span = tree.node(node)?.span;
    let mut attention = Vec::new();
    if let Some((nodes, weights)) = &scores.attention {
        for (&n, &w) in nodes.iter().zip(tape.value(*weights)) {
            let s = tree.node(n)?.span;
            attention.push(AttentionWeight { node_span: [s.start, s.end], weight: w });
        }
    }
    Ok(Prediction { node_span: [span.start, span.end], argmax: argmax(&distribution), distribution, attention })
}

/// Encodes `tree` and classifies `node` on a private tape.
pub fn classify(model: &Model, tree: &ParseTree, vocab: &Vocabulary, node: NodeId) -> Result<Prediction, ModelError> {
    tree.node(node)?;
    let mut tape = Tape::new();
    let encoded = encode_tree(&mut tape, model, tree, vocab)?;
    let scores = classify_node(&mut tape, model, tree, &encoded, node)?;
    read_prediction(&tape, tree, node, &scores)
}

/// Prediction for the sentence (root) node.
pub fn predict_root(model: &Model, tree: &ParseTree, vocab: &Vocabulary) -> Result<Prediction, ModelError> {
    classify(model, tree, vocab, tree.root())
}
