//! Bottom-up node representations over a binarized tree.

use crate::embed::Vocabulary;
use crate::graph::{Tape, Var};
use crate::model::{EncoderParams, LeafCellParams, Model, ModelError, RvnnParams, TreeLstmParams};
use crate::tensor::{ParamId, ParamStore};
use crate::treeio::ParseTree;

/// Hidden state (and memory cell for Tree-LSTM) of one node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeState {
    pub h: Var,
    pub c: Option<Var>,
}

/// Per-node states, indexed by node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedTree {
    pub states: Vec<NodeState>,
}

impl EncodedTree {
    pub fn h(&self, node: usize) -> Option<Var> {
        self.states.get(node).map(|s| s.h)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

fn affine(tape: &mut Tape, store: &ParamStore, w: ParamId, b: ParamId, x: Var) -> Result<Var, ModelError> {
    let wx = tape.matvec(store, w, x)?;
    let bias = tape.param(store, b);
    Ok(tape.add(wx, bias)?)
}

/// Terminal cell: `i = σ(W_i x + b_i)`, `o = σ(W_o x + b_o)`,
/// `u = tanh(W_u x + b_u)`, `c = i ⊙ u`, `h = o ⊙ tanh(c)`.
pub fn leaf_cell(tape: &mut Tape, store: &ParamStore, p: &LeafCellParams, x: Var) -> Result<(Var, Var), ModelError> {
    let i = affine(tape, store, p.w_input, p.b_input, x)?;
    let i = tape.sigmoid(i)?;
    let o = affine(tape, store, p.w_output, p.b_output, x)?;
    let o = tape.sigmoid(o)?;
    let u = affine(tape, store, p.w_update, p.b_update, x)?;
    let u = tape.tanh(u)?;
    let c = tape.mul(i, u)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Binary Tree-LSTM composition. The left child's forget gate reads the
/// right child's hidden state and vice versa.
pub fn binary_cell(
    tape: &mut Tape,
    store: &ParamStore,
    p: &TreeLstmParams,
    left: (Var, Var),
    right: (Var, Var),
) -> Result<(Var, Var), ModelError> {
    let (h_l, c_l) = left;
    let (h_r, c_r) = right;
    let hh = tape.concat(&[h_l, h_r])?;
    let i = affine(tape, store, p.u_input, p.b_input, hh)?;
    let i = tape.sigmoid(i)?;
    let f_l = affine(tape, store, p.u_forget_left, p.b_forget_left, h_r)?;
    let f_l = tape.sigmoid(f_l)?;
    let f_r = affine(tape, store, p.u_forget_right, p.b_forget_right, h_l)?;
    let f_r = tape.sigmoid(f_r)?;
    let o = affine(tape, store, p.u_output, p.b_output, hh)?;
    let o = tape.sigmoid(o)?;
    let u = affine(tape, store, p.u_update, p.b_update, hh)?;
    let u = tape.tanh(u)?;
    let iu = tape.mul(i, u)?;
    let fl_cl = tape.mul(f_l, c_l)?;
    let fr_cr = tape.mul(f_r, c_r)?;
    let c = tape.add(iu, fl_cl)?;
    let c = tape.add(c, fr_cr)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// `h = tanh(W [h_l; h_r] + b)`.
pub fn rvnn_cell(tape: &mut Tape, store: &ParamStore, p: &RvnnParams, h_l: Var, h_r: Var) -> Result<Var, ModelError> {
    let hh = tape.concat(&[h_l, h_r])?;
    let z = affine(tape, store, p.w, p.b, hh)?;
    Ok(tape.tanh(z)?)
}

/// RvNN terminal projection `h = tanh(W_leaf x + b_leaf)`.
pub fn rvnn_leaf(tape: &mut Tape, store: &ParamStore, p: &RvnnParams, x: Var) -> Result<Var, ModelError> {
    let z = affine(tape, store, p.w_leaf, p.b_leaf, x)?;
    Ok(tape.tanh(z)?)
}

/// Post-order encoding of every node. Leaf words are looked up in `vocab`,
/// with unknown words mapped to `<unk>`.
pub fn encode_tree(
    tape: &mut Tape,
    model: &Model,
    tree: &ParseTree,
    vocab: &Vocabulary,
) -> Result<EncodedTree, ModelError> {
    let store = &model.store;
    let mut states: Vec<NodeState> = Vec::with_capacity(tree.len());
    for (id, node) in tree.nodes().iter().enumerate() {
        let state = match (node.children.as_slice(), &node.token) {
            ([], Some(token)) => {
                let x = tape.row(store, model.embedding, vocab.index_of(token));
                match &model.encoder {
                    EncoderParams::TreeLstm(p) => {
                        let (h, c) = leaf_cell(tape, store, &p.leaf, x)?;
                        NodeState { h, c: Some(c) }
                    }
                    EncoderParams::Rvnn(p) => NodeState { h: rvnn_leaf(tape, store, p, x)?, c: None },
                }
            }
            (&[l, r], _) => {
                let (sl, sr) = (states[l], states[r]);
                match &model.encoder {
                    EncoderParams::TreeLstm(p) => {
                        let left = (sl.h, sl.c.ok_or(ModelError::NotEncoded(l))?);
                        let right = (sr.h, sr.c.ok_or(ModelError::NotEncoded(r))?);
                        let (h, c) = binary_cell(tape, store, p, left, right)?;
                        NodeState { h, c: Some(c) }
                    }
                    EncoderParams::Rvnn(p) => NodeState { h: rvnn_cell(tape, store, p, sl.h, sr.h)?, c: None },
                }
            }
            _ => return Err(ModelError::NotBinary(id)),
        };
        states.push(state);
    }
    Ok(EncodedTree { states })
}
