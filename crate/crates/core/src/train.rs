//! Objective, optimizers, gradient clipping, the training loop and evaluation.
//!
//! The objective for a sentence is the summed cross-entropy over its labeled
//! nodes. Weight decay is coupled: `λθ` is added to every gradient before the
//! optimizer step, which is the gradient of `(λ/2)‖θ‖²`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attnclf::{classify_node, predict_root};
use crate::embed::Vocabulary;
use crate::encoder::encode_tree;
use crate::graph::{Tape, Var};
use crate::lexicon::{annotate, collect_loss_nodes, PolarDictionary};
use crate::model::{Model, ModelConfig, ModelError};
use crate::tensor::{Gradients, ParamId, ParamStore, Tensor};
use crate::treeio::ParseTree;

/// Environment variable capping evaluation threads.
pub const THREADS_ENV: &str = "TREESENT_THREADS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("sentence {0} has no gold root label")]
    UnlabeledRoot(usize),
    #[error("optimizer state shape mismatch for parameter {0}")]
    ShapeMismatch(String),
    #[error("invalid training configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    Adagrad { lr: f64, eps: f64 },
    Adadelta { rho: f64, eps: f64, lr: f64 },
}

impl OptimizerConfig {
    pub fn adagrad(lr: f64) -> Self {
        OptimizerConfig::Adagrad { lr, eps: 1e-8 }
    }

    pub fn adadelta() -> Self {
        OptimizerConfig::Adadelta { rho: 0.95, eps: 1e-6, lr: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Rescale the whole gradient when its L2 norm exceeds the threshold.
    GlobalNorm,
    /// Clamp each component to `[-threshold, threshold]`.
    PerElement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub model: ModelConfig,
    pub use_dictionary: bool,
    pub optimizer: OptimizerConfig,
    /// L2 coefficient λ.
    pub weight_decay: f64,
    /// Whether the L2 term covers the embedding table.
    pub decay_embeddings: bool,
    pub clip: f64,
    pub clip_mode: ClipMode,
    pub epochs: usize,
    pub seed: u64,
    /// Evaluate on the dev set every this many epochs (and after the last).
    pub eval_every: usize,
    /// Only update embedding rows read in the current step.
    pub sparse_embedding_updates: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            model: ModelConfig::default(),
            use_dictionary: true,
            optimizer: OptimizerConfig::adagrad(0.005),
            weight_decay: 1e-4,
            decay_embeddings: true,
            clip: 5.0,
            clip_mode: ClipMode::GlobalNorm,
            epochs: 10,
            seed: 0,
            eval_every: 1,
            sparse_embedding_updates: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight decay must be a finite value >= 0");
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return bad("clip threshold must be > 0");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        match self.optimizer {
            OptimizerConfig::Adagrad { lr, eps } if lr > 0.0 && eps > 0.0 => Ok(()),
            OptimizerConfig::Adadelta { rho, eps, lr } if (0.0..1.0).contains(&rho) && eps > 0.0 && lr > 0.0 => Ok(()),
            _ => bad("optimizer constants out of range"),
        }
    }
}

/// A sentence's summed cross-entropy, recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentenceLoss {
    pub loss: Var,
    /// Number of labeled nodes contributing.
    pub nodes: usize,
}

/// Summed cross-entropy over every labeled node of `tree`.
pub fn sentence_loss(
    tape: &mut Tape,
    model: &Model,
    tree: &ParseTree,
    vocab: &Vocabulary,
) -> Result<SentenceLoss, ModelError> {
    let nodes = collect_loss_nodes(tree).map_err(|_| ModelError::NoLabeledNodes)?;
    let encoded = encode_tree(tape, model, tree, vocab)?;
    let classes = model.config.num_classes;
    let mut terms = Vec::with_capacity(nodes.len());
    for &n in &nodes {
        let gold = tree.node(n)?.class().ok_or(ModelError::NoLabeledNodes)?;
        if gold >= classes {
            return Err(ModelError::LabelOutOfRange { label: gold, classes });
        }
        let scores = classify_node(tape, model, tree, &encoded, n)?;
        terms.push(tape.softmax_cross_entropy(scores.logits, gold)?);
    }
    Ok(SentenceLoss { loss: tape.sum(&terms)?, nodes: nodes.len() })
}

fn decayed_params(model: &Model, include_embeddings: bool) -> Vec<ParamId> {
    if include_embeddings {
        model.store.ids().collect()
    } else {
        model.non_embedding_params()
    }
}

/// `(λ/2) Σ ‖θ‖²` recorded on a tape.
pub fn l2_term(tape: &mut Tape, model: &Model, lambda: f64, include_embeddings: bool) -> Result<Var, ModelError> {
    let norms: Vec<Var> =
        decayed_params(model, include_embeddings).into_iter().map(|id| tape.squared_norm(&model.store, id)).collect();
    let total = tape.sum(&norms)?;
    Ok(tape.scale(total, 0.5 * lambda)?)
}

/// `(λ/2) Σ ‖θ‖²` evaluated directly.
pub fn l2_value(model: &Model, lambda: f64, include_embeddings: bool) -> f64 {
    let sq: f64 =
        decayed_params(model, include_embeddings).into_iter().map(|id| model.store.get(id).squared_norm()).sum();
    0.5 * lambda * sq
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipOutcome {
    pub norm: f64,
    pub clipped: bool,
}

/// Rescales (global norm) or clamps (per element) `grads` in place.
pub fn clip_gradients(grads: &mut Gradients, threshold: f64, mode: ClipMode) -> ClipOutcome {
    let norm = grads.global_norm();
    match mode {
        ClipMode::GlobalNorm => {
            let clipped = norm > threshold;
            if clipped {
                grads.scale(threshold / norm);
            }
            ClipOutcome { norm, clipped }
        }
        ClipMode::PerElement => {
            let clipped = grads.max_abs() > threshold;
            if clipped {
                grads.clamp(threshold);
            }
            ClipOutcome { norm, clipped }
        }
    }
}

fn check_lengths(name: &str, lens: &[usize]) -> Result<(), TrainError> {
    if lens.windows(2).all(|w| w[0] == w[1]) {
        Ok(())
    } else {
        Err(TrainError::ShapeMismatch(name.to_string()))
    }
}

/// AdaGrad: `G += g²`, `θ -= lr · g / (√G + ε)` with `g` already including decay.
pub fn adagrad_step(params: &mut [f64], grads: &[f64], lr: f64, eps: f64, accum: &mut [f64]) -> Result<(), TrainError> {
    check_lengths("adagrad", &[params.len(), grads.len(), accum.len()])?;
    for ((p, &g), a) in params.iter_mut().zip(grads).zip(accum.iter_mut()) {
        *a += g * g;
        *p -= lr * g / (a.sqrt() + eps);
    }
    Ok(())
}

/// AdaDelta:
/// `E[g²] = ρE[g²] + (1-ρ)g²`, `Δ = √(E[Δ²]+ε)/√(E[g²]+ε) · g`,
/// `E[Δ²] = ρE[Δ²] + (1-ρ)Δ²`, `θ -= lr · Δ`.
pub fn adadelta_step(
    params: &mut [f64],
    grads: &[f64],
    rho: f64,
    eps: f64,
    lr: f64,
    accum_grad: &mut [f64],
    accum_update: &mut [f64],
) -> Result<(), TrainError> {
    check_lengths("adadelta", &[params.len(), grads.len(), accum_grad.len(), accum_update.len()])?;
    for (k, p) in params.iter_mut().enumerate() {
        let g = grads[k];
        accum_grad[k] = rho * accum_grad[k] + (1.0 - rho) * g * g;
        let delta = (accum_update[k] + eps).sqrt() / (accum_grad[k] + eps).sqrt() * g;
        accum_update[k] = rho * accum_update[k] + (1.0 - rho) * delta * delta;
        *p -= lr * delta;
    }
    Ok(())
}

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, params: &ParamStore) -> Self {
        let zeros = || params.ids().map(|id| Tensor::zeros(params.get(id).rows(), params.get(id).cols())).collect();
        let second = match config {
            OptimizerConfig::Adagrad { .. } => Vec::new(),
            OptimizerConfig::Adadelta { .. } => zeros(),
        };
        Optimizer { config, first: zeros(), second }
    }

    /// One update. `decay[i]` says whether parameter `i` gets `λθ` added.
    /// With `sparse_rows`, row-sparse parameters only update touched rows.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &Gradients,
        weight_decay: f64,
        decay: &[bool],
        sparse_rows: bool,
    ) -> Result<(), TrainError> {
        let ids: Vec<ParamId> = params.ids().collect();
        if self.first.len() != ids.len() || decay.len() != ids.len() {
            return Err(TrainError::ShapeMismatch("optimizer".into()));
        }
        let mut g_buf = Vec::new();
        for id in ids {
            let i = id.index();
            let lambda = if decay[i] { weight_decay } else { 0.0 };
            let cols = params.get(id).cols();
            let rows: Vec<usize> = match grads.touched_rows(id) {
                Some(touched) if sparse_rows => touched.iter().copied().collect(),
                _ => (0..params.get(id).rows()).collect(),
            };
            for r in rows {
                let range = r * cols..(r + 1) * cols;
                let theta = &mut params.get_mut(id).data_mut()[range.clone()];
                g_buf.clear();
                g_buf.extend(grads.get(id).data()[range.clone()].iter().zip(theta.iter()).map(|(g, t)| g + lambda * t));
                match self.config {
                    OptimizerConfig::Adagrad { lr, eps } => {
                        adagrad_step(theta, &g_buf, lr, eps, &mut self.first[i].data_mut()[range])?
                    }
                    OptimizerConfig::Adadelta { rho, eps, lr } => adadelta_step(
                        theta,
                        &g_buf,
                        rho,
                        eps,
                        lr,
                        &mut self.first[i].data_mut()[range.clone()],
                        &mut self.second[i].data_mut()[range],
                    )?,
                }
            }
        }
        Ok(())
    }
}

/// Per-epoch objective record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `cross_entropy + l2`.
    pub train_loss: f64,
    /// Mean summed cross-entropy per training sentence over the epoch.
    pub cross_entropy: f64,
    /// `(λ/2)‖θ‖²` at the end of the epoch.
    pub l2: f64,
    /// Labeled nodes seen in the epoch.
    pub labeled_nodes: usize,
    pub dev_acc: Option<f64>,
    /// Steps where gradient clipping fired.
    pub clipped_steps: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best dev epoch (ties go to the earlier epoch), or
    /// the last epoch when there is no dev set.
    pub best: Model,
    pub best_epoch: usize,
    pub best_dev_acc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Binarizes trees and applies dictionary labels when enabled.
pub fn prepare_training_trees(
    trees: &[ParseTree],
    dict: Option<&PolarDictionary>,
    use_dictionary: bool,
) -> Vec<ParseTree> {
    trees
        .iter()
        .map(|t| {
            let b = t.binarize();
            match dict {
                Some(d) if use_dictionary => annotate(&b, d),
                _ => b,
            }
        })
        .collect()
}

/// Whether dataset trees are fully usable for training.
fn check_dataset(trees: &[ParseTree]) -> Result<(), TrainError> {
    if trees.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(i) = trees.iter().position(|t| t.root_label().is_none()) {
        return Err(TrainError::UnlabeledRoot(i));
    }
    Ok(())
}

/// Mean per-sentence cross-entropy plus `(λ/2)‖θ‖²`, without updating.
pub fn objective(
    model: &Model,
    vocab: &Vocabulary,
    trees: &[ParseTree],
    config: &TrainingConfig,
) -> Result<f64, TrainError> {
    check_dataset(trees)?;
    let mut total = 0.0;
    for t in trees {
        let mut tape = Tape::new();
        let l = sentence_loss(&mut tape, model, t, vocab)?;
        total += tape.scalar(l.loss);
    }
    Ok(total / trees.len() as f64 + l2_value(model, config.weight_decay, config.decay_embeddings))
}

pub type StepHook<'a> = Box<dyn FnMut(&Gradients, ClipOutcome) + 'a>;

/// Runs one epoch of per-sentence updates in `order`.
pub struct Trainer<'a> {
    pub config: &'a TrainingConfig,
    pub vocab: &'a Vocabulary,
    optimizer: Optimizer,
    grads: Gradients,
    decay: Vec<bool>,
    rng: ChaCha8Rng,
    /// Called with the post-clip gradients of every step.
    pub on_step: Option<StepHook<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(model: &Model, vocab: &'a Vocabulary, config: &'a TrainingConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let decay = model.store.ids().map(|id| config.decay_embeddings || id != model.embedding).collect();
        Ok(Trainer {
            config,
            vocab,
            optimizer: Optimizer::new(config.optimizer, &model.store),
            grads: Gradients::zeros_like(&model.store),
            decay,
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed_5eed_5eed),
            on_step: None,
        })
    }

    /// One stochastic update on a single tree; returns its cross-entropy,
    /// its labeled-node count, and the clipping outcome.
    pub fn step(&mut self, model: &mut Model, tree: &ParseTree) -> Result<(f64, usize, ClipOutcome), TrainError> {
        let mut tape = Tape::new();
        let l = sentence_loss(&mut tape, model, tree, self.vocab)?;
        self.grads.zero();
        tape.backward(l.loss, &model.store, &mut self.grads).map_err(ModelError::from)?;
        let clip = clip_gradients(&mut self.grads, self.config.clip, self.config.clip_mode);
        if let Some(cb) = self.on_step.as_mut() {
            cb(&self.grads, clip);
        }
        self.optimizer.step(
            &mut model.store,
            &self.grads,
            self.config.weight_decay,
            &self.decay,
            self.config.sparse_embedding_updates,
        )?;
        Ok((tape.scalar(l.loss), l.nodes, clip))
    }

    /// One shuffled pass. Returns the epoch record without dev accuracy.
    pub fn epoch(&mut self, model: &mut Model, trees: &[ParseTree], epoch: usize) -> Result<EpochRecord, TrainError> {
        check_dataset(trees)?;
        let mut order: Vec<usize> = (0..trees.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut ce, mut nodes, mut clipped) = (0.0, 0, 0);
        for i in order {
            let (loss, n, clip) = self.step(model, &trees[i])?;
            ce += loss;
            nodes += n;
            clipped += clip.clipped as usize;
        }
        let cross_entropy = ce / trees.len() as f64;
        let l2 = l2_value(model, self.config.weight_decay, self.config.decay_embeddings);
        Ok(EpochRecord {
            epoch,
            train_loss: cross_entropy + l2,
            cross_entropy,
            l2,
            labeled_nodes: nodes,
            dev_acc: None,
            clipped_steps: clipped,
        })
    }
}

/// Trains `model` on `train` (already binarized and, if enabled, annotated),
/// selecting the epoch with the best dev accuracy. `on_epoch` sees every record.
pub fn train<F: FnMut(&EpochRecord)>(
    mut model: Model,
    vocab: &Vocabulary,
    train: &[ParseTree],
    dev: &[ParseTree],
    config: &TrainingConfig,
    threads: Option<usize>,
    mut on_epoch: F,
) -> Result<TrainOutcome, TrainError> {
    check_dataset(train)?;
    let mut trainer = Trainer::new(&model, vocab, config)?;
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(Model, usize, f64)> = None;
    for epoch in 1..=config.epochs {
        let mut record = trainer.epoch(&mut model, train, epoch)?;
        if !dev.is_empty() && (epoch % config.eval_every == 0 || epoch == config.epochs) {
            let acc = evaluate(&model, vocab, dev, threads)?.accuracy;
            record.dev_acc = Some(acc);
            if best.as_ref().is_none_or(|(_, _, b)| acc > *b) {
                best = Some((model.clone(), epoch, acc));
            }
        }
        on_epoch(&record);
        history.push(record);
    }
    Ok(match best {
        Some((m, epoch, acc)) => TrainOutcome { best: m, best_epoch: epoch, best_dev_acc: Some(acc), history },
        None => TrainOutcome { best: model, best_epoch: config.epochs, best_dev_acc: None, history },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

/// Threads from `TREESENT_THREADS`, if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n: &usize| n > 0)
}

/// Root accuracy. Only the trees' structure, tokens and root labels are read;
/// no dictionary is involved.
pub fn evaluate(
    model: &Model,
    vocab: &Vocabulary,
    trees: &[ParseTree],
    threads: Option<usize>,
) -> Result<Accuracy, TrainError> {
    check_dataset(trees)?;
    let predict = |t: &ParseTree| -> Result<bool, TrainError> {
        let b = if t.is_binary() { None } else { Some(t.binarize()) };
        let tree = b.as_ref().unwrap_or(t);
        Ok(predict_root(model, tree, vocab)?.argmax == t.root_label().expect("checked"))
    };
    let run = || trees.par_iter().map(predict).collect::<Result<Vec<bool>, _>>();
    let hits = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?
            .install(run)?,
        None => run()?,
    };
    let correct = hits.iter().filter(|&&h| h).count();
    Ok(Accuracy { accuracy: correct as f64 / trees.len() as f64, correct, n: trees.len() })
}
