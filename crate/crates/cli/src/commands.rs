use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;

use treesent::attnclf::{predict_root, Prediction};
use treesent::checkpoint::{self, Checkpoint, Manifest};
use treesent::checks::{default_suite, CheckResult};
use treesent::embed::{load_embeddings, EmbeddingTable, Vocabulary};
use treesent::graph::OpKind;
use treesent::lexicon::{load_dictionary, PolarDictionary, PolarityMap};
use treesent::model::Model;
use treesent::train::{evaluate, prepare_training_trees, threads_from_env, train, EpochRecord};
use treesent::treeio::{read_trees, LabelKind, LabelScheme, ParseTree};

use crate::settings::TrainPlan;

pub const METRICS_SCHEMA: &str = "treesent.metrics/1";
pub const TRAIN_SCHEMA: &str = "treesent.train/1";
pub const EVAL_SCHEMA: &str = "treesent.eval/1";
pub const PREDICTION_SCHEMA: &str = "treesent.prediction/1";
pub const GRADCHECK_SCHEMA: &str = "treesent.gradcheck/1";

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

pub fn load_trees(path: &Path, scheme: LabelScheme) -> Result<Vec<ParseTree>> {
    let trees = read_trees(open(path)?, scheme).with_context(|| format!("reading trees from {}", path.display()))?;
    if trees.is_empty() {
        bail!("{} contains no trees", path.display());
    }
    Ok(trees)
}

fn load_dict(path: &Path, labels: LabelKind) -> Result<PolarDictionary> {
    load_dictionary(open(path)?, PolarityMap::default_for(labels))
        .with_context(|| format!("reading dictionary {}", path.display()))
}

#[derive(Serialize)]
struct MetricsLine<'a> {
    schema: &'static str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    schema: &'static str,
    checkpoint: &'a Path,
    metrics: &'a Path,
    best_epoch: usize,
    best_dev_acc: Option<f64>,
    vocab_size: usize,
    dictionary_entries: usize,
}

pub fn cmd_train(plan: TrainPlan) -> Result<()> {
    let labels = plan.labels;
    let train_trees = load_trees(&plan.train, LabelScheme::new(labels, !plan.phrase_labels))?;
    let dev_trees = match &plan.dev {
        Some(p) => load_trees(p, LabelScheme::new(labels, true))?,
        None => Vec::new(),
    };
    let dict = plan.dict.as_deref().map(|p| load_dict(p, labels)).transpose()?;

    let mut tokens: Vec<&str> = train_trees.iter().flat_map(|t| t.tokens()).collect();
    if let Some(d) = &dict {
        tokens.extend(d.tokens());
    }
    let vocab = Vocabulary::build(tokens);
    let config = &plan.config;
    let word_dim = config.model.word_dim;
    let table = match &plan.embeddings {
        Some(p) => load_embeddings(open(p)?, &vocab, word_dim, config.seed)
            .with_context(|| format!("reading embeddings {}", p.display()))?,
        None => EmbeddingTable::random(vocab.len(), word_dim, config.seed),
    };
    log::info!("vocabulary {} tokens, {} with pre-trained vectors", vocab.len(), table.pretrained_rows());
    let model = Model::new(config.model.clone(), table, config.seed)?;
    let data = prepare_training_trees(&train_trees, dict.as_ref(), config.use_dictionary);

    if let Some(parent) = plan.metrics.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut metrics =
        BufWriter::new(File::create(&plan.metrics).with_context(|| format!("creating {}", plan.metrics.display()))?);
    let mut write_err = None;
    let outcome = train(model, &vocab, &data, &dev_trees, config, threads_from_env(), |r| {
        log::info!("epoch {} loss {:.6} dev {:?}", r.epoch, r.train_loss, r.dev_acc);
        let line = serde_json::to_string(&MetricsLine { schema: METRICS_SCHEMA, record: r }).expect("serializable");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", plan.metrics.display()));
    }
    metrics.flush()?;

    let manifest = Manifest::new(config, labels, &outcome.best, &vocab, outcome.best_epoch, outcome.best_dev_acc);
    checkpoint::save(&plan.checkpoint, &manifest, &outcome.best, &vocab)?;
    let summary = TrainSummary {
        schema: TRAIN_SCHEMA,
        checkpoint: &plan.checkpoint,
        metrics: &plan.metrics,
        best_epoch: outcome.best_epoch,
        best_dev_acc: outcome.best_dev_acc,
        vocab_size: vocab.len(),
        dictionary_entries: dict.as_ref().map_or(0, |d| d.len()),
    };
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    checkpoint::load(dir).with_context(|| format!("loading checkpoint {}", dir.display()))
}

#[derive(Serialize)]
struct EvalLine {
    schema: &'static str,
    accuracy: f64,
    correct: usize,
    n: usize,
}

pub fn cmd_eval(checkpoint: &Path, test: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let trees = load_trees(test, LabelScheme::new(ck.manifest.labels, true))?;
    let acc = evaluate(&ck.model, &ck.vocab, &trees, threads_from_env())?;
    let line = EvalLine { schema: EVAL_SCHEMA, accuracy: acc.accuracy, correct: acc.correct, n: acc.n };
    println!("{}", serde_json::to_string(&line)?);
    Ok(())
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    schema: &'static str,
    sentence: usize,
    tokens: Vec<&'a str>,
    #[serde(flatten)]
    prediction: &'a Prediction,
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// One cluster per sentence. Nodes show their token (or span) and the
/// root's attention weight; the root shows its predicted class.
fn write_dot<W: Write>(out: &mut W, sentences: &[(ParseTree, Prediction)]) -> io::Result<()> {
    writeln!(out, "digraph attention {{")?;
    writeln!(out, "  node [shape=box, fontname=\"Helvetica\"];")?;
    for (s, (tree, pred)) in sentences.iter().enumerate() {
        writeln!(out, "  subgraph cluster_{s} {{")?;
        writeln!(out, "    label=\"sentence {s}\";")?;
        for (id, node) in tree.nodes().iter().enumerate() {
            let span = [node.span.start, node.span.end];
            let text = match &node.token {
                Some(t) => escape(t),
                None => format!("[{}, {})", span[0], span[1]),
            };
            let label = if id == tree.root() {
                format!("{text}\\nclass {}", pred.argmax)
            } else {
                match pred.attention.iter().find(|a| a.node_span == span) {
                    Some(a) => format!("{text}\\nw={:.4}", a.weight),
                    None => text,
                }
            };
            writeln!(out, "    s{s}n{id} [label=\"{label}\"];")?;
            for &c in &node.children {
                writeln!(out, "    s{s}n{id} -> s{s}n{c};")?;
            }
        }
        writeln!(out, "  }}")?;
    }
    writeln!(out, "}}")
}

/// Root predictions for every tree in `test`, as JSON lines on stdout.
/// With `require_attention`, checkpoints without attention are rejected.
pub fn cmd_predict(checkpoint: &Path, test: &Path, require_attention: bool, dot: Option<PathBuf>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    if require_attention && !ck.model.config.classifier.uses_attention() {
        bail!("checkpoint {} was trained without attention (classifier mode hidden)", checkpoint.display());
    }
    let trees = load_trees(test, LabelScheme::new(ck.manifest.labels, true))?;
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    let mut kept = Vec::new();
    for (i, tree) in trees.iter().enumerate() {
        let tree = tree.binarize();
        let prediction = predict_root(&ck.model, &tree, &ck.vocab)?;
        let line =
            PredictionLine { schema: PREDICTION_SCHEMA, sentence: i, tokens: tree.tokens(), prediction: &prediction };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
        if dot.is_some() {
            kept.push((tree, prediction));
        }
    }
    out.flush()?;
    if let Some(path) = dot {
        let mut f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        write_dot(&mut f, &kept)?;
        f.flush()?;
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckLine<'a> {
    schema: &'static str,
    #[serde(flatten)]
    result: &'a CheckResult,
}

#[derive(Serialize)]
struct CheckSummary {
    schema: &'static str,
    seed: u64,
    corrupt_op: Option<&'static str>,
    checks: usize,
    failed: usize,
    passed: bool,
}

/// Runs the gradient-check suite; returns whether every check passed.
pub fn cmd_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<bool> {
    let corrupt = match corrupt {
        Some(name) => Some(OpKind::from_name(name).with_context(|| {
            let names: Vec<_> = OpKind::ALL.iter().map(|k| k.name()).collect();
            format!("unknown op {name:?}; expected one of {}", names.join(", "))
        })?),
        None => None,
    };
    let results = default_suite(seed, corrupt);
    let stdout = io::stdout();
    let mut out = BufWriter::new(stdout.lock());
    for r in &results {
        writeln!(out, "{}", serde_json::to_string(&CheckLine { schema: GRADCHECK_SCHEMA, result: r })?)?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    let summary = CheckSummary {
        schema: GRADCHECK_SCHEMA,
        seed,
        corrupt_op: corrupt.map(OpKind::name),
        checks: results.len(),
        failed,
        passed: failed == 0,
    };
    writeln!(out, "{}", serde_json::to_string(&summary)?)?;
    out.flush()?;
    Ok(failed == 0)
}
