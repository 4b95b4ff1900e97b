//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion that could run failed.
//!
//! The SST sanity run needs the treebank: set `TREESENT_SST_DIR` to a
//! directory holding `train.txt` and `dev.txt` (PTB s-expressions, 5-class),
//! and optionally `TREESENT_SST_EMBEDDINGS` to a text-format vector file.

#[path = "../../core/tests/support/oracle.rs"]
mod oracle;

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use treesent::attnclf::{attention_scores, classify, predict_root};
use treesent::checks::{model_checks, random_instance, MODEL_TOLERANCE};
use treesent::embed::{load_embeddings, EmbeddingTable, Vocabulary};
use treesent::encoder::{binary_cell, rvnn_cell};
use treesent::graph::Tape;
use treesent::lexicon::{annotate, load_dictionary, PolarityMap};
use treesent::model::{ClassifierMode, Composition, EncoderParams, Model, ModelConfig};
use treesent::synth::fit_separable;
use treesent::tensor::Gradients;
use treesent::train::{evaluate, prepare_training_trees, train, OptimizerConfig, Trainer, TrainingConfig};
use treesent::treeio::{read_trees, LabelKind, LabelScheme, NodeId, ParseTree};

enum Outcome {
    Pass(String),
    Fail(String),
    /// Could not run here; reported as FAIL but does not fail the suite.
    NotRun(String),
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn trees(path: &Path, scheme: LabelScheme) -> Result<Vec<ParseTree>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(read_trees(BufReader::new(f), scheme)?)
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

// 1. Gradient integrity

fn gradient_integrity() -> Result<Outcome> {
    let start = Instant::now();
    let results = model_checks(20170801, 20, Composition::TreeLstm, ClassifierMode::Concat, 8, None);
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed = results.iter().filter(|r| !r.passed).count();
    // every instance must carry one dictionary label below the root
    let mut rng = ChaCha8Rng::seed_from_u64(20170801);
    let mut internal = 0;
    for _ in 0..20 {
        let inst = random_instance(&mut rng, Composition::TreeLstm, ClassifierMode::Concat, 8, 1e-4);
        let labeled: Vec<NodeId> =
            (0..inst.tree.len()).filter(|&i| i != inst.tree.root() && inst.tree.nodes()[i].label.is_some()).collect();
        ensure!(labeled.len() == 1, "expected one dictionary node, found {}", labeled.len());
        internal += usize::from(!inst.tree.nodes()[labeled[0]].is_leaf());
    }
    Ok(verdict(
        results.len() == 20 && failed == 0 && worst <= MODEL_TOLERANCE && secs < 60.0,
        format!(
            "20 instances, d=8, d_a=8, lambda=1e-4: max rel err {worst:.2e} (tol {MODEL_TOLERANCE:.0e}), {failed} failed, \
             {internal}/20 with an internal dictionary node, {secs:.1}s (< 60s)"
        ),
    ))
}

// 2. Cell oracle equivalence

fn random_model(composition: Composition, classifier: ClassifierMode, d: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        composition,
        classifier,
        word_dim: 3,
        hidden_dim: d,
        attn_dim: 5,
        num_classes: 5,
        ..Default::default()
    };
    let mut m = Model::new(cfg, EmbeddingTable::random(6, 3, seed), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in m.store.ids().collect::<Vec<_>>() {
        m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.8..0.8));
    }
    m
}

fn vec_of(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect()
}

fn cell_oracles() -> Result<Outcome> {
    const TOL: f64 = 1e-12;
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut note = |name, diff: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(diff);
    };
    for k in 0..100 {
        let m = random_model(Composition::TreeLstm, ClassifierMode::Hidden, 4, 1000 + k);
        let EncoderParams::TreeLstm(p) = m.encoder else { unreachable!() };
        let (hl, cl, hr, cr) = (vec_of(&mut rng, 4), vec_of(&mut rng, 4), vec_of(&mut rng, 4), vec_of(&mut rng, 4));
        let mut tape = Tape::new();
        let l = (tape.constant(hl.clone()), tape.constant(cl.clone()));
        let r = (tape.constant(hr.clone()), tape.constant(cr.clone()));
        let (h, c) = binary_cell(&mut tape, &m.store, &p, l, r)?;
        let (oh, oc) = oracle::tree_lstm(&m, &hl, &cl, &hr, &cr);
        note("binary_cell", oracle::max_abs_diff(tape.value(h), &oh).max(oracle::max_abs_diff(tape.value(c), &oc)));
    }
    for k in 0..100 {
        let m = random_model(Composition::Rvnn, ClassifierMode::Hidden, 4, 2000 + k);
        let EncoderParams::Rvnn(p) = m.encoder else { unreachable!() };
        let (hl, hr) = (vec_of(&mut rng, 4), vec_of(&mut rng, 4));
        let mut tape = Tape::new();
        let (l, r) = (tape.constant(hl.clone()), tape.constant(hr.clone()));
        let h = rvnn_cell(&mut tape, &m.store, &p, l, r)?;
        note("rvnn_cell", oracle::max_abs_diff(tape.value(h), &oracle::rvnn(&m, &hl, &hr)));
    }
    for k in 0..100 {
        let m = random_model(Composition::TreeLstm, ClassifierMode::Concat, 4, 3000 + k);
        let n = rng.gen_range(1..=8);
        let cands: Vec<Vec<f64>> = (0..n).map(|_| vec_of(&mut rng, 4)).collect();
        let target = vec_of(&mut rng, 4);
        let mut tape = Tape::new();
        let vars: Vec<_> = cands.iter().map(|c| tape.constant(c.clone())).collect();
        let t = tape.constant(target.clone());
        let w = attention_scores(&mut tape, &m.store, m.attention.as_ref().unwrap(), &vars, t)?;
        note("attention_scores", oracle::max_abs_diff(tape.value(w), &oracle::attention_weights(&m, &cands, &target)));
    }
    let modes = [ClassifierMode::Hidden, ClassifierMode::AttentionOnly, ClassifierMode::Concat];
    for k in 0..100 {
        let comp = if k % 2 == 0 { Composition::TreeLstm } else { Composition::Rvnn };
        let inst = random_instance(&mut rng, comp, modes[k % 3], 8, 0.0);
        let node = rng.gen_range(0..inst.tree.len());
        let pred = classify(&inst.model, &inst.tree, &inst.vocab, node)?;
        let (dist, weights) = oracle::classify(&inst.model, &inst.tree, &inst.vocab, node);
        let got: Vec<f64> = pred.attention.iter().map(|a| a.weight).collect();
        ensure!(got.len() == weights.len(), "classify instance {k}: attention length");
        note("classify", oracle::max_abs_diff(&pred.distribution, &dist).max(oracle::max_abs_diff(&got, &weights)));
    }
    let ok = worst.values().all(|&d| d <= TOL);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    Ok(verdict(ok, format!("100 inputs each, max abs diff: {detail} (tol 1e-12)")))
}

// 3. Distant-supervision oracle

/// Leaf tokens under `id`, by explicit recursion over children.
fn walk_yield<'a>(t: &'a ParseTree, id: NodeId, out: &mut Vec<&'a str>) {
    let n = &t.nodes()[id];
    match &n.token {
        Some(tok) => out.push(tok),
        None => n.children.iter().for_each(|&c| walk_yield(t, c, out)),
    }
}

fn distant_supervision() -> Result<Outcome> {
    let dir = fixtures().join("lexicon");
    let map = PolarityMap::default_for(LabelKind::Fine5);
    let dict = load_dictionary(BufReader::new(File::open(dir.join("dict.tsv"))?), map)?;
    let corpus = trees(&dir.join("corpus.txt"), LabelScheme::new(LabelKind::Fine5, true))?;
    ensure!(corpus.len() == 100 && dict.len() == 50, "fixture sizes {} / {}", corpus.len(), dict.len());

    let (mut mismatches, mut matched, mut nodes) = (0, 0, 0);
    let mut tagged = Vec::new();
    for t in &corpus {
        let t = t.binarize();
        let out = annotate(&t, &dict);
        for id in 0..t.len() {
            nodes += 1;
            let mut y = Vec::new();
            walk_yield(&t, id, &mut y);
            let want = if id == t.root() { t.nodes()[id].class() } else { dict.get(&y.join(" ")) };
            if id != t.root() && want.is_some() {
                matched += 1;
            }
            if out.nodes()[id].class() != want {
                mismatches += 1;
            }
        }
        tagged.push((t, out));
    }

    let vocab = Vocabulary::build(corpus.iter().flat_map(|t| t.tokens()));
    let mut differing = 0;
    for (k, classifier) in [ClassifierMode::Hidden, ClassifierMode::Concat].into_iter().enumerate() {
        let cfg =
            ModelConfig { classifier, word_dim: 8, hidden_dim: 8, attn_dim: 8, num_classes: 5, ..Default::default() };
        let m = Model::new(cfg, EmbeddingTable::random(vocab.len(), 8, k as u64), k as u64)?;
        for (plain, with_dict) in &tagged {
            if predict_root(&m, plain, &vocab)? != predict_root(&m, with_dict, &vocab)? {
                differing += 1;
            }
        }
        let plain: Vec<ParseTree> = tagged.iter().map(|p| p.0.clone()).collect();
        let with_dict: Vec<ParseTree> = tagged.iter().map(|p| p.1.clone()).collect();
        if evaluate(&m, &vocab, &plain, None)? != evaluate(&m, &vocab, &with_dict, Some(2))? {
            differing += 1;
        }
    }
    Ok(verdict(
        mismatches == 0 && matched > 0 && differing == 0,
        format!(
            "{} sentences, {} entries, {nodes} nodes, {matched} dictionary matches, {mismatches} mismatches; \
             {differing} predictions differ with/without dictionary",
            corpus.len(),
            dict.len()
        ),
    ))
}

// 4. Overfit

fn overfit() -> Result<Outcome> {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut ok = true;
    for (name, classifier) in [("-attn", ClassifierMode::Hidden), ("+attn", ClassifierMode::Concat)] {
        for use_dictionary in [false, true] {
            for (opt_name, optimizer) in
                [("adagrad", OptimizerConfig::adagrad(0.005)), ("adadelta", OptimizerConfig::adadelta())]
            {
                let r = fit_separable(7, classifier, use_dictionary, optimizer, 16, 200)?;
                ok &= r.fitted_at.is_some();
                let at = r.fitted_at.map_or("never".to_string(), |e| e.to_string());
                parts.push(format!("{name}{}/{opt_name}@{at}", if use_dictionary { "+dict" } else { "-dict" }));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(ok && secs < 120.0, format!("epochs to 100% train acc: {}; {secs:.1}s (< 120s)", parts.join(" "))))
}

// 5. Normalization and clipping

fn treesent<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Result<String> {
    let out = Command::new(env!("CARGO_BIN_EXE_treesent")).args(args).output()?;
    ensure!(out.status.success(), "treesent: {}", String::from_utf8_lossy(&out.stderr));
    Ok(String::from_utf8(out.stdout)?)
}

fn toy_train_args(ck: &Path, extra: &[&str]) -> Vec<String> {
    let toy = fixtures().join("toy");
    let path = |f: &str| toy.join(f).to_string_lossy().into_owned();
    let mut args: Vec<String> = ["train", "--train"].map(String::from).to_vec();
    args.push(path("train.txt"));
    args.extend(["--dev".into(), path("dev.txt"), "--dict".into(), path("dict.tsv"), "--checkpoint".into()]);
    args.push(ck.to_string_lossy().into_owned());
    args.extend(["--labels", "binary", "--hidden-dim", "8", "--word-dim", "8", "--seed", "11"].map(String::from));
    args.extend(extra.iter().map(|s| s.to_string()));
    args
}

fn invariants() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let ck = dir.path().join("ck");
    treesent(&toy_train_args(&ck, &["--epochs", "3"]))?;
    let ck = ck.to_str().unwrap();
    let (mut dumps, mut worst_attn, mut worst_dist) = (0, 0.0f64, 0.0f64);
    for f in ["train.txt", "dev.txt", "test.txt"] {
        let test = fixtures().join("toy").join(f);
        for line in treesent(&["dump-attention", "--checkpoint", ck, "--test", test.to_str().unwrap()])?.lines() {
            let v: Value = serde_json::from_str(line)?;
            let weights = v["attention"].as_array().ok_or_else(|| anyhow!("no attention"))?;
            if !weights.is_empty() {
                let s: f64 = weights.iter().map(|w| w["weight"].as_f64().unwrap()).sum();
                worst_attn = worst_attn.max((s - 1.0).abs());
            }
            let d: f64 = v["distribution"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
            worst_dist = worst_dist.max((d - 1.0).abs());
            dumps += 1;
        }
    }
    // every node of random instances, all modes and encoders
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for k in 0..60 {
        let comp = if k % 2 == 0 { Composition::TreeLstm } else { Composition::Rvnn };
        let modes = [ClassifierMode::Hidden, ClassifierMode::AttentionOnly, ClassifierMode::Concat];
        let inst = random_instance(&mut rng, comp, modes[k % 3], 8, 0.0);
        for node in 0..inst.tree.len() {
            let p = classify(&inst.model, &inst.tree, &inst.vocab, node)?;
            if !p.attention.is_empty() {
                worst_attn = worst_attn.max((p.attention.iter().map(|a| a.weight).sum::<f64>() - 1.0).abs());
            }
            worst_dist = worst_dist.max((p.distribution.iter().sum::<f64>() - 1.0).abs());
        }
    }

    // clipping at the default threshold, with inflated classifier weights so it fires
    let scheme = LabelScheme::new(LabelKind::Binary, true);
    let raw = trees(&fixtures().join("toy/train.txt"), scheme)?;
    let vocab = Vocabulary::build(raw.iter().flat_map(|t| t.tokens()));
    let cfg = TrainingConfig {
        model: ModelConfig { word_dim: 8, hidden_dim: 8, attn_dim: 8, num_classes: 2, ..Default::default() },
        ..Default::default()
    };
    ensure!(cfg.clip == 5.0, "default clip threshold is {}", cfg.clip);
    let mut m = Model::new(cfg.model.clone(), EmbeddingTable::random(vocab.len(), 8, 1), 1)?;
    for name in ["classifier.weight", "classifier.concat.weight"] {
        if let Some(id) = m.store.find(name) {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x *= 40.0);
        }
    }
    let data = prepare_training_trees(&raw, None, false);
    let (mut fired, mut worst_post) = (0, 0.0f64);
    let mut trainer = Trainer::new(&m, &vocab, &cfg)?;
    trainer.on_step = Some(Box::new(|g: &Gradients, c| {
        if c.clipped {
            fired += 1;
            worst_post = worst_post.max(g.global_norm());
        }
    }));
    trainer.epoch(&mut m, &data, 1)?;
    drop(trainer);

    Ok(verdict(
        worst_attn <= 1e-9 && worst_dist <= 1e-9 && fired > 0 && worst_post <= 5.0 + 1e-9,
        format!(
            "{dumps} dumped sentences + 60 random trees: |sum attn - 1| <= {worst_attn:.1e}, |sum p - 1| <= {worst_dist:.1e}; \
             clipping fired {fired}x, max post-clip norm {worst_post:.12} (<= 5 + 1e-9)"
        ),
    ))
}

// 6. Scaled SST run

fn sst() -> Result<Outcome> {
    let Some(dir) = std::env::var_os("TREESENT_SST_DIR").map(PathBuf::from) else {
        return Ok(Outcome::NotRun("not run: SST not available (set TREESENT_SST_DIR)".into()));
    };
    let start = Instant::now();
    let mut train_trees = trees(&dir.join("train.txt"), LabelScheme::new(LabelKind::Fine5, true))?;
    train_trees.truncate(500);
    let dev = trees(&dir.join("dev.txt"), LabelScheme::new(LabelKind::Fine5, true))?;
    let mut counts = [0usize; 5];
    train_trees.iter().for_each(|t| counts[t.root_label().unwrap()] += 1);
    let majority = (0..5).max_by_key(|&c| (counts[c], std::cmp::Reverse(c))).unwrap();
    let baseline = dev.iter().filter(|t| t.root_label() == Some(majority)).count() as f64 / dev.len() as f64;

    let vocab = Vocabulary::build(train_trees.iter().flat_map(|t| t.tokens()));
    let data = prepare_training_trees(&train_trees, None, false);
    let mut accs = Vec::new();
    for classifier in [ClassifierMode::Concat, ClassifierMode::Hidden] {
        let cfg = TrainingConfig {
            model: ModelConfig {
                classifier,
                word_dim: 50,
                hidden_dim: 50,
                attn_dim: 50,
                num_classes: 5,
                ..Default::default()
            },
            epochs: 10,
            ..Default::default()
        };
        let table = match std::env::var_os("TREESENT_SST_EMBEDDINGS") {
            Some(p) => load_embeddings(BufReader::new(File::open(&p)?), &vocab, 50, cfg.seed)?,
            None => EmbeddingTable::random(vocab.len(), 50, cfg.seed),
        };
        let m = Model::new(cfg.model.clone(), table, cfg.seed)?;
        let out = train(m, &vocab, &data, &dev, &cfg, None, |_| {})?;
        accs.push(out.best_dev_acc.unwrap());
    }
    let secs = start.elapsed().as_secs_f64();
    Ok(verdict(
        accs[0] > baseline && secs < 600.0,
        format!(
            "{} train / {} dev sentences, d=50, 10 epochs: concat {:.4}, hidden {:.4}, majority-class {baseline:.4}; {secs:.0}s (< 600s)",
            train_trees.len(),
            dev.len(),
            accs[0],
            accs[1]
        ),
    ))
}

// 7. Determinism

fn determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let runs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("run{i}"))).collect();
    for ck in &runs {
        treesent(&toy_train_args(ck, &["--epochs", "4", "--classifier", "concat"]))?;
    }
    let mut files: Vec<_> = fs::read_dir(&runs[0])?.map(|e| e.map(|e| e.file_name())).collect::<Result<_, _>>()?;
    files.sort();
    let mut differing = Vec::new();
    for f in &files {
        if fs::read(runs[0].join(f))? != fs::read(runs[1].join(f)).unwrap_or_default() {
            differing.push(f.to_string_lossy().into_owned());
        }
    }
    let names: Vec<_> = files.iter().map(|f| f.to_string_lossy().into_owned()).collect();
    Ok(verdict(
        differing.is_empty() && names.iter().any(|n| n == "metrics.jsonl") && names.iter().any(|n| n == "params.bin"),
        format!("two seeded runs, compared {}: {} differ", names.join(", "), differing.len()),
    ))
}

type Criterion = fn() -> Result<Outcome>;

fn main() -> ExitCode {
    // quiet the default panic message; failures are reported below
    panic::set_hook(Box::new(|_| {}));
    let criteria: [(&str, Criterion); 7] = [
        ("gradient integrity", gradient_integrity),
        ("cell oracle equivalence", cell_oracles),
        ("distant-supervision oracle", distant_supervision),
        ("overfit separable corpus", overfit),
        ("normalization and clipping", invariants),
        ("scaled SST run", sst),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = match panic::catch_unwind(AssertUnwindSafe(run)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::Fail(format!("error: {e:#}")),
            Err(p) => Outcome::Fail(format!(
                "panicked: {}",
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default()
            )),
        };
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("FAIL", d),
        };
        println!("criterion {} {name}: {tag} ({detail})", i + 1);
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
