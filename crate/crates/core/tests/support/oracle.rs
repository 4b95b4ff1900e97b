// Straight-line reference model: plain loops over parameter slices, looked up
// by name, with no tape involved.

#![allow(dead_code)]

use treesent::embed::Vocabulary;
use treesent::model::{CandidateSet, ClassifierMode, Model};
use treesent::treeio::ParseTree;

pub fn w<'a>(m: &'a Model, name: &str) -> (&'a [f64], usize, usize) {
    let id = m.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let t = m.store.get(id);
    (t.data(), t.rows(), t.cols())
}

pub fn affine(m: &Model, weight: &str, bias: &str, x: &[f64]) -> Vec<f64> {
    let (a, rows, cols) = w(m, weight);
    let (b, _, _) = w(m, bias);
    assert_eq!(cols, x.len(), "{weight}");
    (0..rows)
        .map(|r| {
            let mut s = b[r];
            for c in 0..cols {
                s += a[r * cols + c] * x[c];
            }
            s
        })
        .collect()
}

pub fn sig(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

pub fn tanh(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(f64::tanh).collect()
}

fn cat(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().chain(b).copied().collect()
}

pub fn leaf_lstm(m: &Model, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let i = sig(affine(m, "leaf.input.weight", "leaf.input.bias", x));
    let o = sig(affine(m, "leaf.output.weight", "leaf.output.bias", x));
    let u = tanh(affine(m, "leaf.update.weight", "leaf.update.bias", x));
    let c: Vec<f64> = (0..i.len()).map(|k| i[k] * u[k]).collect();
    let h = (0..c.len()).map(|k| o[k] * c[k].tanh()).collect();
    (h, c)
}

pub fn tree_lstm(m: &Model, hl: &[f64], cl: &[f64], hr: &[f64], cr: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hh = cat(hl, hr);
    let i = sig(affine(m, "compose.input.weight", "compose.input.bias", &hh));
    let fl = sig(affine(m, "compose.forget_left.weight", "compose.forget_left.bias", hr));
    let fr = sig(affine(m, "compose.forget_right.weight", "compose.forget_right.bias", hl));
    let o = sig(affine(m, "compose.output.weight", "compose.output.bias", &hh));
    let u = tanh(affine(m, "compose.update.weight", "compose.update.bias", &hh));
    let c: Vec<f64> = (0..i.len()).map(|k| i[k] * u[k] + fl[k] * cl[k] + fr[k] * cr[k]).collect();
    let h = (0..c.len()).map(|k| o[k] * c[k].tanh()).collect();
    (h, c)
}

pub fn rvnn_leaf(m: &Model, x: &[f64]) -> Vec<f64> {
    tanh(affine(m, "leaf.weight", "leaf.bias", x))
}

pub fn rvnn(m: &Model, hl: &[f64], hr: &[f64]) -> Vec<f64> {
    tanh(affine(m, "compose.weight", "compose.bias", &cat(hl, hr)))
}

pub fn is_tree_lstm(m: &Model) -> bool {
    m.store.find("compose.forget_left.weight").is_some()
}

/// Hidden state of every node, by node id.
pub fn encode(m: &Model, tree: &ParseTree, vocab: &Vocabulary) -> Vec<Vec<f64>> {
    fn go(m: &Model, tree: &ParseTree, vocab: &Vocabulary, n: usize, out: &mut Vec<Option<(Vec<f64>, Vec<f64>)>>) {
        let node = &tree.nodes()[n];
        let state = if node.children.is_empty() {
            let (emb, _, dim) = w(m, "embedding");
            let row = vocab.index_of(node.token.as_deref().unwrap());
            let x = &emb[row * dim..(row + 1) * dim];
            if is_tree_lstm(m) {
                leaf_lstm(m, x)
            } else {
                (rvnn_leaf(m, x), Vec::new())
            }
        } else {
            let (l, r) = (node.children[0], node.children[1]);
            go(m, tree, vocab, l, out);
            go(m, tree, vocab, r, out);
            let (hl, cl) = out[l].clone().unwrap();
            let (hr, cr) = out[r].clone().unwrap();
            if is_tree_lstm(m) {
                tree_lstm(m, &hl, &cl, &hr, &cr)
            } else {
                (rvnn(m, &hl, &hr), Vec::new())
            }
        };
        out[n] = Some(state);
    }
    let mut out = vec![None; tree.len()];
    go(m, tree, vocab, tree.root(), &mut out);
    out.into_iter().map(|s| s.unwrap().0).collect()
}

pub fn attention_weights(m: &Model, candidates: &[Vec<f64>], target: &[f64]) -> Vec<f64> {
    let (w2, _, _) = w(m, "attention.score.weight");
    let (b2, _, _) = w(m, "attention.score.bias");
    let g: Vec<f64> = candidates
        .iter()
        .map(|hi| {
            let hidden = tanh(affine(m, "attention.hidden.weight", "attention.hidden.bias", &cat(hi, target)));
            let s: f64 = hidden.iter().zip(w2).map(|(a, b)| a * b).sum::<f64>() + b2[0];
            s.exp()
        })
        .collect();
    let total: f64 = g.iter().sum();
    g.iter().map(|x| x / total).collect()
}

fn subtree(tree: &ParseTree, n: usize, out: &mut Vec<usize>) {
    for &c in &tree.nodes()[n].children {
        subtree(tree, c, out);
        out.push(c);
    }
}

pub fn candidates(m: &Model, tree: &ParseTree, n: usize) -> Vec<usize> {
    match m.config.candidates {
        CandidateSet::Children => tree.nodes()[n].children.clone(),
        CandidateSet::Descendants => {
            let mut out = Vec::new();
            subtree(tree, n, &mut out);
            out.sort_unstable();
            out
        }
    }
}

/// Label distribution of node `n` plus its attention weights.
pub fn classify(m: &Model, tree: &ParseTree, vocab: &Vocabulary, n: usize) -> (Vec<f64>, Vec<f64>) {
    let hs = encode(m, tree, vocab);
    let h = &hs[n];
    let cands = if m.config.classifier == ClassifierMode::Hidden { Vec::new() } else { candidates(m, tree, n) };
    let (logits, weights) = if cands.is_empty() {
        (affine(m, "classifier.weight", "classifier.bias", h), Vec::new())
    } else {
        let vecs: Vec<Vec<f64>> = cands.iter().map(|&i| hs[i].clone()).collect();
        let a_w = attention_weights(m, &vecs, h);
        let mut a = vec![0.0; h.len()];
        for (v, wt) in vecs.iter().zip(&a_w) {
            for k in 0..a.len() {
                a[k] += wt * v[k];
            }
        }
        let logits = match m.config.classifier {
            ClassifierMode::AttentionOnly => affine(m, "classifier.weight", "classifier.bias", &a),
            _ => affine(m, "classifier.concat.weight", "classifier.concat.bias", &cat(&a, h)),
        };
        (logits, a_w)
    };
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    (e.into_iter().map(|x| x / s).collect(), weights)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
