//! Seeded synthetic trees and corpora for checks, fixtures and smoke runs.

use rand::seq::SliceRandom;
use rand::Rng;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embed::{EmbeddingTable, Vocabulary};
use crate::lexicon::{PolarDictionary, Polarity, PolarityMap};
use crate::model::{ClassifierMode, Model, ModelConfig};
use crate::train::{
    evaluate, objective, prepare_training_trees, EpochRecord, OptimizerConfig, TrainError, Trainer, TrainingConfig,
};
use crate::treeio::{parse_sexpr, LabelKind, LabelScheme, ParseTree};

/// Positive and negative marker tokens of [`separable_corpus`].
pub const MARKERS: [&str; 2] = ["great", "awful"];

pub const FILLER: [&str; 12] =
    ["the", "film", "story", "actor", "plot", "was", "is", "quite", "really", "ending", "music", "scene"];

fn bracket<R: Rng + ?Sized>(rng: &mut R, tokens: &[String], out: &mut String) {
    if tokens.len() == 1 {
        out.push_str("(_ ");
        out.push_str(&tokens[0]);
        out.push(')');
        return;
    }
    let split = rng.gen_range(1..tokens.len());
    out.push_str("(_ ");
    bracket(rng, &tokens[..split], out);
    out.push(' ');
    bracket(rng, &tokens[split..], out);
    out.push(')');
}

/// Uniformly random binary bracketing over `tokens` with root label `label`
/// and no other labels.
pub fn random_tree<R: Rng + ?Sized>(rng: &mut R, tokens: &[String], label: usize, kind: LabelKind) -> ParseTree {
    assert!(!tokens.is_empty());
    let mut s = String::new();
    bracket(rng, tokens, &mut s);
    let s = format!("({label}{}", &s[2..]);
    parse_sexpr(&s, LabelScheme::new(kind, false)).expect("generated tree parses")
}

/// Random sentence of `n` tokens drawn from `words`.
pub fn random_tokens<R: Rng + ?Sized>(rng: &mut R, words: &[&str], n: usize) -> Vec<String> {
    (0..n).map(|_| words.choose(rng).expect("non-empty word list").to_string()).collect()
}

/// `n` binary-labeled sentences of 3-7 filler words plus exactly one marker:
/// `great` means positive, `awful` negative. Labels alternate so the corpus
/// is balanced.
pub fn separable_corpus<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<ParseTree> {
    (0..n)
        .map(|i| {
            let label = (i + 1) % 2;
            let marker = if label == 1 { MARKERS[0] } else { MARKERS[1] };
            let len = rng.gen_range(3..=7);
            let mut tokens = random_tokens(rng, &FILLER, len);
            let at = rng.gen_range(0..=tokens.len());
            tokens.insert(at, marker.to_string());
            random_tree(rng, &tokens, label, LabelKind::Binary)
        })
        .collect()
}

/// The two marker words as a polar dictionary.
pub fn marker_dictionary(map: PolarityMap) -> PolarDictionary {
    let mut d = PolarDictionary::new();
    d.insert(MARKERS[0], Polarity::Positive, map);
    d.insert(MARKERS[1], Polarity::Negative, map);
    d
}

/// Outcome of [`fit_separable`].
#[derive(Debug, Clone)]
pub struct FitReport {
    /// First epoch after which training accuracy was 1.0.
    pub fitted_at: Option<usize>,
    /// Objective before any update.
    pub initial_objective: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains on a 20-sentence [`separable_corpus`] until every training
/// sentence is classified correctly or `max_epochs` pass.
pub fn fit_separable(
    seed: u64,
    classifier: ClassifierMode,
    use_dictionary: bool,
    optimizer: OptimizerConfig,
    dim: usize,
    max_epochs: usize,
) -> Result<FitReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let corpus = separable_corpus(&mut rng, 20);
    let dict = marker_dictionary(PolarityMap::default_for(LabelKind::Binary));
    let vocab = Vocabulary::build(FILLER.iter().chain(MARKERS.iter()).copied());
    let config = TrainingConfig {
        model: ModelConfig {
            classifier,
            word_dim: dim,
            hidden_dim: dim,
            attn_dim: dim,
            num_classes: 2,
            ..Default::default()
        },
        use_dictionary,
        optimizer,
        epochs: max_epochs,
        seed,
        ..Default::default()
    };
    let train = prepare_training_trees(&corpus, Some(&dict), use_dictionary);
    let mut model = Model::new(config.model.clone(), EmbeddingTable::random(vocab.len(), dim, seed), seed)?;
    let initial_objective = objective(&model, &vocab, &train, &config)?;
    let mut trainer = Trainer::new(&model, &vocab, &config)?;
    let mut history = Vec::new();
    for epoch in 1..=max_epochs {
        let mut record = trainer.epoch(&mut model, &train, epoch)?;
        let acc = evaluate(&model, &vocab, &corpus, Some(1))?.accuracy;
        record.dev_acc = Some(acc);
        history.push(record);
        if acc == 1.0 {
            return Ok(FitReport { fitted_at: Some(epoch), initial_objective, history });
        }
    }
    Ok(FitReport { fitted_at: None, initial_objective, history })
}
