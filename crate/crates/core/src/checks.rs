//! Seeded gradient-check suites: one check per tape operation and full-model
//! checks through encoder, attention, classifier, loss and regularizer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::embed::{EmbeddingTable, Vocabulary};
use crate::gradcheck::{grad_check, GradCheckConfig};
use crate::graph::{GraphError, OpKind, Tape, Var};
use crate::lexicon::{annotate, PolarDictionary, Polarity, PolarityMap};
use crate::model::{ClassifierMode, Composition, Model, ModelConfig, ModelError};
use crate::synth::{random_tokens, random_tree, FILLER};
use crate::tensor::{ParamStore, Tensor};
use crate::train::{l2_term, sentence_loss};
use crate::treeio::{LabelKind, ParseTree};

/// Relative tolerance for single-operation checks.
pub const OP_TOLERANCE: f64 = 1e-6;
/// Relative tolerance for whole-model checks.
pub const MODEL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub worst_tensor: String,
    pub passed: bool,
}

fn summarize(name: String, report: &crate::gradcheck::GradCheckReport) -> CheckResult {
    let worst = report
        .tensors
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .map(|t| t.name.clone())
        .unwrap_or_default();
    CheckResult {
        name,
        max_rel_error: report.max_rel_error(),
        tolerance: report.tolerance,
        worst_tensor: worst,
        passed: report.passed(),
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect())
}

type OpFn = fn(&ParamStore, &mut Tape, &[f64]) -> Result<Var, GraphError>;

// Reduces a vector to a scalar through a fixed random projection, so every
// component of the op output influences the checked scalar differently.
fn project(tape: &mut Tape, v: Var, weights: &[f64]) -> Result<Var, GraphError> {
    let w = tape.constant(weights[..v.len()].to_vec());
    let p = tape.mul(v, w)?;
    tape.sum(&[p])
}

fn p(ps: &ParamStore, name: &str) -> crate::tensor::ParamId {
    ps.find(name).expect("check parameter")
}

// name, inputs as (name, value, positive-only), objective
type OpCase = (&'static str, Vec<(&'static str, Tensor, bool)>, OpFn);

/// Checks every tape operation on random inputs. `corrupt` breaks one
/// backward rule for negative-control runs.
pub fn op_checks(seed: u64, corrupt: Option<OpKind>) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cases: Vec<OpCase> = vec![
        (
            "matvec",
            vec![
                ("w", rand_tensor(&mut rng, 3, 4, -1.0, 1.0), false),
                ("x", rand_tensor(&mut rng, 4, 1, -1.0, 1.0), false),
            ],
            |ps, t, r| {
                let x = t.param(ps, p(ps, "x"));
                let y = t.matvec(ps, p(ps, "w"), x)?;
                project(t, y, r)
            },
        ),
        ("row", vec![("e", rand_tensor(&mut rng, 4, 3, -1.0, 1.0), true)], |ps, t, r| {
            let a = t.row(ps, p(ps, "e"), 2);
            let b = t.row(ps, p(ps, "e"), 0);
            let c = t.mul(a, b)?;
            project(t, c, r)
        }),
        (
            "concat",
            vec![
                ("a", rand_tensor(&mut rng, 2, 1, -1.0, 1.0), false),
                ("b", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
            ],
            |ps, t, r| {
                let a = t.param(ps, p(ps, "a"));
                let b = t.param(ps, p(ps, "b"));
                let c = t.concat(&[a, b, a])?;
                let c = t.mul(c, c)?;
                project(t, c, r)
            },
        ),
        (
            "add",
            vec![
                ("a", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
                ("b", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
            ],
            |ps, t, r| {
                let a = t.param(ps, p(ps, "a"));
                let b = t.param(ps, p(ps, "b"));
                let c = t.add(a, b)?;
                let c = t.mul(c, c)?;
                project(t, c, r)
            },
        ),
        (
            "mul",
            vec![
                ("a", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
                ("b", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
            ],
            |ps, t, r| {
                let a = t.param(ps, p(ps, "a"));
                let b = t.param(ps, p(ps, "b"));
                let c = t.mul(a, b)?;
                project(t, c, r)
            },
        ),
        ("sigmoid", vec![("a", rand_tensor(&mut rng, 4, 1, -2.0, 2.0), false)], |ps, t, r| {
            let a = t.param(ps, p(ps, "a"));
            let c = t.sigmoid(a)?;
            project(t, c, r)
        }),
        ("tanh", vec![("a", rand_tensor(&mut rng, 4, 1, -2.0, 2.0), false)], |ps, t, r| {
            let a = t.param(ps, p(ps, "a"));
            let c = t.tanh(a)?;
            project(t, c, r)
        }),
        ("exp", vec![("a", rand_tensor(&mut rng, 4, 1, -2.0, 2.0), false)], |ps, t, r| {
            let a = t.param(ps, p(ps, "a"));
            let c = t.exp(a)?;
            project(t, c, r)
        }),
        ("scale", vec![("a", rand_tensor(&mut rng, 4, 1, -2.0, 2.0), false)], |ps, t, r| {
            let a = t.param(ps, p(ps, "a"));
            let c = t.scale(a, -1.7)?;
            let c = t.mul(c, a)?;
            project(t, c, r)
        }),
        (
            "weighted_sum",
            vec![
                ("w", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
                ("v0", rand_tensor(&mut rng, 2, 1, -1.0, 1.0), false),
                ("v1", rand_tensor(&mut rng, 2, 1, -1.0, 1.0), false),
                ("v2", rand_tensor(&mut rng, 2, 1, -1.0, 1.0), false),
            ],
            |ps, t, r| {
                let w = t.param(ps, p(ps, "w"));
                let vs = [t.param(ps, p(ps, "v0")), t.param(ps, p(ps, "v1")), t.param(ps, p(ps, "v2"))];
                let c = t.weighted_sum(w, &vs)?;
                project(t, c, r)
            },
        ),
        ("normalize", vec![("a", rand_tensor(&mut rng, 4, 1, 0.5, 2.0), false)], |ps, t, r| {
            let a = t.param(ps, p(ps, "a"));
            let c = t.normalize(a)?;
            project(t, c, r)
        }),
        ("softmax_xent", vec![("z", rand_tensor(&mut rng, 5, 1, -2.0, 2.0), false)], |ps, t, _| {
            let z = t.param(ps, p(ps, "z"));
            t.softmax_cross_entropy(z, 3)
        }),
        ("squared_norm", vec![("theta", rand_tensor(&mut rng, 2, 3, -1.0, 1.0), false)], |ps, t, _| {
            Ok(t.squared_norm(ps, p(ps, "theta")))
        }),
        (
            "sum",
            vec![
                ("a", rand_tensor(&mut rng, 3, 1, -1.0, 1.0), false),
                ("b", rand_tensor(&mut rng, 2, 1, -1.0, 1.0), false),
            ],
            |ps, t, _| {
                let a = t.param(ps, p(ps, "a"));
                let b = t.param(ps, p(ps, "b"));
                let a2 = t.mul(a, a)?;
                t.sum(&[a2, b])
            },
        ),
    ];
    let projection: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let config = GradCheckConfig { tolerance: OP_TOLERANCE, corrupt, ..Default::default() };
    cases
        .into_iter()
        .map(|(name, tensors, f)| {
            let mut ps = ParamStore::new();
            for (n, t, sparse) in tensors {
                if sparse {
                    ps.add_row_sparse(n, t);
                } else {
                    ps.add(n, t);
                }
            }
            let report = grad_check(&mut ps, &config, |ps: &ParamStore, tape: &mut Tape| f(ps, tape, &projection))
                .expect("op check builds");
            summarize(format!("op/{name}"), &report)
        })
        .collect()
}

/// One random full-model instance.
pub struct ModelInstance {
    pub model: Model,
    pub vocab: Vocabulary,
    pub tree: ParseTree,
    pub lambda: f64,
}

/// Random tree of 2-9 leaves, random parameters in `[-0.5, 0.5]`, and one
/// dictionary-labeled non-root node (internal when the tree has one).
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    composition: Composition,
    classifier: ClassifierMode,
    dim: usize,
    lambda: f64,
) -> ModelInstance {
    let words = &FILLER[..6];
    let vocab = Vocabulary::build(words.iter().copied());
    let config = ModelConfig {
        composition,
        classifier,
        word_dim: dim,
        hidden_dim: dim,
        attn_dim: dim,
        num_classes: 2,
        ..Default::default()
    };
    let mut model =
        Model::new(config, EmbeddingTable::random(vocab.len(), dim, rng.gen()), rng.gen()).expect("valid config");
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    let n = rng.gen_range(2..=9);
    let tokens = random_tokens(rng, words, n);
    let label = rng.gen_range(0..2);
    let tree = random_tree(rng, &tokens, label, LabelKind::Binary);

    let root = tree.root();
    let internal: Vec<usize> = (0..tree.len()).filter(|&i| i != root && !tree.nodes()[i].is_leaf()).collect();
    let leaves: Vec<usize> = (0..tree.len()).filter(|&i| tree.nodes()[i].is_leaf()).collect();
    let target = *internal.choose(rng).or_else(|| leaves.choose(rng)).expect("tree has nodes");
    let mut dict = PolarDictionary::new();
    let polarity = if rng.gen_bool(0.5) { Polarity::Positive } else { Polarity::Negative };
    dict.insert(
        &tree.yield_tokens(target).expect("node").join(" "),
        polarity,
        PolarityMap::default_for(LabelKind::Binary),
    );
    let tree = annotate(&tree, &dict);
    ModelInstance { model, vocab, tree, lambda }
}

/// Full objective of one instance: sentence cross-entropy plus L2.
pub fn instance_objective(instance: &ModelInstance, store: &ParamStore, tape: &mut Tape) -> Result<Var, ModelError> {
    let model = Model { store: store.clone(), ..instance.model.clone() };
    let ce = sentence_loss(tape, &model, &instance.tree, &instance.vocab)?;
    let reg = l2_term(tape, &model, instance.lambda, true)?;
    Ok(tape.add(ce.loss, reg)?)
}

/// Finite-difference checks of the full objective on `instances` random
/// trees for `composition`/`classifier`, hidden size `dim`.
pub fn model_checks(
    seed: u64,
    instances: usize,
    composition: Composition,
    classifier: ClassifierMode,
    dim: usize,
    corrupt: Option<OpKind>,
) -> Vec<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let config = GradCheckConfig { tolerance: MODEL_TOLERANCE, corrupt, ..Default::default() };
    (0..instances)
        .map(|k| {
            let instance = random_instance(&mut rng, composition, classifier, dim, 1e-4);
            let mut store = instance.model.store.clone();
            let report = grad_check(&mut store, &config, |ps: &ParamStore, tape: &mut Tape| {
                instance_objective(&instance, ps, tape)
            })
            .expect("model check builds");
            let comp = match composition {
                Composition::Rvnn => "rvnn",
                Composition::TreeLstm => "treelstm",
            };
            let clf = match classifier {
                ClassifierMode::Hidden => "hidden",
                ClassifierMode::AttentionOnly => "attention_only",
                ClassifierMode::Concat => "concat",
            };
            summarize(format!("model/{comp}/{clf}/{k}/leaves={}", instance.tree.num_tokens()), &report)
        })
        .collect()
}

/// Every op check plus model checks over both encoders and all classifier
/// modes, as run by the command-line `gradcheck` command.
pub fn default_suite(seed: u64, corrupt: Option<OpKind>) -> Vec<CheckResult> {
    let mut out = op_checks(seed, corrupt);
    out.extend(model_checks(seed.wrapping_add(1), 20, Composition::TreeLstm, ClassifierMode::Concat, 8, corrupt));
    for (k, (comp, clf)) in [
        (Composition::TreeLstm, ClassifierMode::Hidden),
        (Composition::TreeLstm, ClassifierMode::AttentionOnly),
        (Composition::Rvnn, ClassifierMode::Hidden),
        (Composition::Rvnn, ClassifierMode::Concat),
    ]
    .into_iter()
    .enumerate()
    {
        out.extend(model_checks(seed.wrapping_add(2 + k as u64), 3, comp, clf, 8, corrupt));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        for r in op_checks(3, None) {
            assert!(r.passed, "{r:?}");
            assert_eq!(r.tolerance, OP_TOLERANCE);
        }
    }

    #[test]
    fn corrupting_an_op_fails_its_check() {
        for kind in OpKind::ALL {
            let results = op_checks(3, Some(kind));
            let own = results.iter().find(|r| r.name == format!("op/{}", kind.name()));
            if let Some(own) = own {
                assert!(!own.passed, "{kind:?} corruption went unnoticed");
            }
        }
    }

    #[test]
    fn default_suite_passes_and_is_deterministic() {
        let a = default_suite(11, None);
        assert!(a.iter().all(|r| r.passed), "{:?}", a.iter().filter(|r| !r.passed).collect::<Vec<_>>());
        assert_eq!(a, default_suite(11, None));
    }

    #[test]
    fn corrupted_tanh_breaks_model_checks() {
        let r = model_checks(5, 2, Composition::TreeLstm, ClassifierMode::Concat, 4, Some(OpKind::Tanh));
        assert!(r.iter().all(|r| !r.passed));
    }
}
