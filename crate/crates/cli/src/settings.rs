//! Training settings: command-line flags over a TOML file over defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use serde::Deserialize;

use treesent::model::{CandidateSet, ClassifierMode, Composition, ModelConfig};
use treesent::train::{ClipMode, OptimizerConfig, TrainingConfig};
use treesent::treeio::LabelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeArg {
    Rvnn,
    Treelstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ClassifierArg {
    Hidden,
    AttentionOnly,
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelsArg {
    Binary,
    Fine5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerArg {
    Adagrad,
    Adadelta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum ClipModeArg {
    GlobalNorm,
    PerElement,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidatesArg {
    Descendants,
    Children,
}

impl From<LabelsArg> for LabelKind {
    fn from(l: LabelsArg) -> Self {
        match l {
            LabelsArg::Binary => LabelKind::Binary,
            LabelsArg::Fine5 => LabelKind::Fine5,
        }
    }
}

/// Flags of the `train` command. Every value is optional so that a config
/// file can fill the gaps.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    /// TOML file with any of these settings (flag names with `_`).
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Training trees, one s-expression per line.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Development trees for model selection.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Polar dictionary (`surface<TAB>pos|neg`).
    #[arg(long)]
    pub dict: Option<PathBuf>,
    /// Pre-trained word vectors in text format.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Metrics file (JSON lines); defaults to `<checkpoint>/metrics.jsonl`.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    pub classifier: Option<ClassifierArg>,
    #[arg(long, value_enum)]
    pub candidates: Option<CandidatesArg>,
    /// Train without dictionary labels even if --dict is given.
    #[arg(long)]
    #[serde(default)]
    pub no_dict: bool,
    #[arg(long, value_enum)]
    pub labels: Option<LabelsArg>,
    /// Keep gold labels below the root of training trees.
    #[arg(long)]
    #[serde(default)]
    pub phrase_labels: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Learning rate (AdaGrad default 0.005, AdaDelta default 1.0).
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Leave the embedding table out of the L2 term.
    #[arg(long)]
    #[serde(default)]
    pub no_embedding_decay: bool,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long, value_enum)]
    pub clip_mode: Option<ClipModeArg>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Defaults to the hidden size.
    #[arg(long)]
    pub attn_dim: Option<usize>,
    #[arg(long)]
    pub word_dim: Option<usize>,
    #[arg(long)]
    pub forget_bias: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// AdaDelta decay.
    #[arg(long)]
    pub rho: Option<f64>,
    /// Only update embedding rows used by the current sentence.
    #[arg(long)]
    #[serde(default)]
    pub sparse_embeddings: bool,
}

macro_rules! overlay {
    ($self:ident, $file:ident; $($opt:ident),*; $($flag:ident),*) => {{
        $( $self.$opt = $self.$opt.take().or($file.$opt.take()); )*
        $( $self.$flag = $self.$flag || $file.$flag; )*
    }};
}

/// Everything `train` needs after merging.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub train: PathBuf,
    pub dev: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub labels: LabelKind,
    pub phrase_labels: bool,
    pub config: TrainingConfig,
}

impl TrainSettings {
    /// Fills unset values from `--config`, if any.
    pub fn with_file(mut self) -> Result<Self> {
        let Some(path) = self.config.clone() else { return Ok(self) };
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading config {}", path.display()))?;
        let mut file: TrainSettings =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [
            &mut file.train,
            &mut file.dev,
            &mut file.dict,
            &mut file.embeddings,
            &mut file.checkpoint,
            &mut file.metrics,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        overlay!(self, file;
            train, dev, dict, embeddings, checkpoint, metrics, mode, classifier, candidates, labels, seed, epochs,
            eval_every, lr, weight_decay, clip, clip_mode, hidden_dim, attn_dim, word_dim, forget_bias, optimizer, rho;
            no_dict, phrase_labels, no_embedding_decay, sparse_embeddings);
        Ok(self)
    }

    pub fn plan(self) -> Result<TrainPlan> {
        let d = TrainingConfig::default();
        let labels: LabelKind = self.labels.unwrap_or(LabelsArg::Fine5).into();
        let hidden_dim = self.hidden_dim.unwrap_or(d.model.hidden_dim);
        let model = ModelConfig {
            composition: match self.mode.unwrap_or(ModeArg::Treelstm) {
                ModeArg::Rvnn => Composition::Rvnn,
                ModeArg::Treelstm => Composition::TreeLstm,
            },
            classifier: match self.classifier.unwrap_or(ClassifierArg::Concat) {
                ClassifierArg::Hidden => ClassifierMode::Hidden,
                ClassifierArg::AttentionOnly => ClassifierMode::AttentionOnly,
                ClassifierArg::Concat => ClassifierMode::Concat,
            },
            candidates: match self.candidates.unwrap_or(CandidatesArg::Descendants) {
                CandidatesArg::Descendants => CandidateSet::Descendants,
                CandidatesArg::Children => CandidateSet::Children,
            },
            word_dim: self.word_dim.unwrap_or(d.model.word_dim),
            hidden_dim,
            attn_dim: self.attn_dim.unwrap_or(hidden_dim),
            num_classes: labels.num_classes(),
            forget_bias: self.forget_bias.unwrap_or(d.model.forget_bias),
        };
        let optimizer = match self.optimizer.unwrap_or(OptimizerArg::Adagrad) {
            OptimizerArg::Adagrad => OptimizerConfig::adagrad(self.lr.unwrap_or(0.005)),
            OptimizerArg::Adadelta => {
                let OptimizerConfig::Adadelta { rho, eps, lr } = OptimizerConfig::adadelta() else { unreachable!() };
                OptimizerConfig::Adadelta { rho: self.rho.unwrap_or(rho), eps, lr: self.lr.unwrap_or(lr) }
            }
        };
        let config = TrainingConfig {
            model,
            use_dictionary: !self.no_dict && self.dict.is_some(),
            optimizer,
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            decay_embeddings: !self.no_embedding_decay,
            clip: self.clip.unwrap_or(d.clip),
            clip_mode: match self.clip_mode.unwrap_or(ClipModeArg::GlobalNorm) {
                ClipModeArg::GlobalNorm => ClipMode::GlobalNorm,
                ClipModeArg::PerElement => ClipMode::PerElement,
            },
            epochs: self.epochs.unwrap_or(d.epochs),
            seed: self.seed.unwrap_or(d.seed),
            eval_every: self.eval_every.unwrap_or(d.eval_every),
            sparse_embedding_updates: self.sparse_embeddings,
        };
        config.validate()?;
        let Some(train) = self.train else { bail!("--train is required") };
        let Some(checkpoint) = self.checkpoint else { bail!("--checkpoint is required") };
        let metrics = self.metrics.unwrap_or_else(|| checkpoint.join("metrics.jsonl"));
        Ok(TrainPlan {
            train,
            dev: self.dev,
            dict: if self.no_dict { None } else { self.dict },
            embeddings: self.embeddings,
            checkpoint,
            metrics,
            labels,
            phrase_labels: self.phrase_labels,
            config,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "train = \"t.txt\"\ncheckpoint = \"ck\"\nepochs = 7\nlr = 0.1\nclassifier = \"hidden\"\n")
            .unwrap();
        let flags = TrainSettings { config: Some(cfg), epochs: Some(3), ..Default::default() };
        let plan = flags.with_file().unwrap().plan().unwrap();
        assert_eq!(plan.config.epochs, 3);
        assert_eq!(plan.config.optimizer, OptimizerConfig::adagrad(0.1));
        assert_eq!(plan.config.model.classifier, ClassifierMode::Hidden);
        assert_eq!(plan.config.weight_decay, 1e-4);
        assert_eq!(plan.train, dir.path().join("t.txt"));
        assert_eq!(plan.metrics, dir.path().join("ck").join("metrics.jsonl"));
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.toml");
        std::fs::write(&cfg, "epoch = 7\n").unwrap();
        let err = TrainSettings { config: Some(cfg), ..Default::default() }.with_file().unwrap_err();
        assert!(format!("{err:#}").contains("epoch"));
    }

    #[test]
    fn no_dict_drops_dictionary() {
        let s = TrainSettings {
            train: Some("t".into()),
            checkpoint: Some("c".into()),
            dict: Some("d".into()),
            no_dict: true,
            ..Default::default()
        };
        let plan = s.plan().unwrap();
        assert!(plan.dict.is_none());
        assert!(!plan.config.use_dictionary);
    }

    #[test]
    fn adadelta_defaults() {
        let s = TrainSettings {
            train: Some("t".into()),
            checkpoint: Some("c".into()),
            optimizer: Some(OptimizerArg::Adadelta),
            ..Default::default()
        };
        assert_eq!(s.plan().unwrap().config.optimizer, OptimizerConfig::adadelta());
    }
}
