//! Model configuration and the trainable parameter layout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::EmbeddingTable;
use crate::graph::GraphError;
use crate::tensor::{ParamId, ParamStore, Tensor};
use crate::treeio::{NodeId, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error("node {0} is not binary; binarize the tree first")]
    NotBinary(NodeId),
    #[error("attention needs at least one candidate")]
    EmptyCandidates,
    #[error("attention weights ({weights}) do not match candidates ({candidates})")]
    LengthMismatch { weights: usize, candidates: usize },
    #[error("the model has no attention parameters")]
    NoAttention,
    #[error("node {0} was not encoded")]
    NotEncoded(NodeId),
    #[error("tree has no labeled nodes")]
    NoLabeledNodes,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Composition {
    /// `h = tanh(W [h_l; h_r] + b)`.
    Rvnn,
    /// Binary Tree-LSTM with cross-conditioned forget gates.
    TreeLstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierMode {
    /// `softmax(W_s h + b_s)`.
    Hidden,
    /// `softmax(W_s a + b_s)`: the attention vector replaces the hidden state.
    AttentionOnly,
    /// `softmax(W_s' [a; h] + b_a)`.
    Concat,
}

impl ClassifierMode {
    pub fn uses_attention(self) -> bool {
        self != ClassifierMode::Hidden
    }
}

/// Which nodes a target node attends over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSet {
    /// All strict descendants, leaves included.
    Descendants,
    /// Immediate children only.
    Children,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub composition: Composition,
    pub classifier: ClassifierMode,
    pub candidates: CandidateSet,
    pub word_dim: usize,
    pub hidden_dim: usize,
    pub attn_dim: usize,
    pub num_classes: usize,
    /// Initial value of the forget-gate biases.
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            composition: Composition::TreeLstm,
            classifier: ClassifierMode::Concat,
            candidates: CandidateSet::Descendants,
            word_dim: 300,
            hidden_dim: 200,
            attn_dim: 200,
            num_classes: 5,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.word_dim == 0 || self.hidden_dim == 0 || self.attn_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::Config("at least two classes are required".into()));
        }
        if !self.forget_bias.is_finite() {
            return Err(ModelError::Config("forget bias must be finite".into()));
        }
        Ok(())
    }
}

/// Terminal-node LSTM cell: input, output and update gates read the word
/// vector; there are no forget gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeafCellParams {
    pub w_input: ParamId,
    pub b_input: ParamId,
    pub w_output: ParamId,
    pub b_output: ParamId,
    pub w_update: ParamId,
    pub b_update: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeLstmParams {
    pub leaf: LeafCellParams,
    pub u_input: ParamId,
    pub b_input: ParamId,
    pub u_forget_left: ParamId,
    pub b_forget_left: ParamId,
    pub u_forget_right: ParamId,
    pub b_forget_right: ParamId,
    pub u_output: ParamId,
    pub b_output: ParamId,
    pub u_update: ParamId,
    pub b_update: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RvnnParams {
    pub w_leaf: ParamId,
    pub b_leaf: ParamId,
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderParams {
    Rvnn(RvnnParams),
    TreeLstm(TreeLstmParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    /// `d_a x 2d`, applied to `[h_i; h_j]`.
    pub w1: ParamId,
    pub b1: ParamId,
    /// `1 x d_a`.
    pub w2: ParamId,
    /// Scalar.
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierParams {
    /// `d_l x d`. Used in hidden mode, for the attention-only input, and for
    /// leaves in attention modes.
    pub w_hidden: ParamId,
    pub b_hidden: ParamId,
    /// `d_l x 2d` and its bias; concat mode only.
    pub concat: Option<(ParamId, ParamId)>,
}

/// All trainable tensors plus their typed handles.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embedding: ParamId,
    pub encoder: EncoderParams,
    pub attention: Option<AttentionParams>,
    pub classifier: ClassifierParams,
}

struct Builder<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    bound: f64,
}

impl Builder<'_> {
    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        let t = Tensor::uniform(rows, cols, self.bound, self.rng);
        self.store.add(name, t)
    }

    fn bias(&mut self, name: &str, rows: usize, value: f64) -> ParamId {
        self.store.add(name, Tensor::filled(rows, 1, value))
    }
}

impl Model {
    /// Matrices are uniform in `[-1/sqrt(d), 1/sqrt(d)]` for hidden size `d`;
    /// forget-gate biases start at `config.forget_bias`, other biases at 0.
    pub fn new(config: ModelConfig, embeddings: EmbeddingTable, seed: u64) -> Result<Model, ModelError> {
        config.validate()?;
        if embeddings.dim() != config.word_dim {
            return Err(ModelError::Config(format!(
                "embedding dimension {} does not match word_dim {}",
                embeddings.dim(),
                config.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, dw, da, dl) = (config.hidden_dim, config.word_dim, config.attn_dim, config.num_classes);
        let mut b = Builder { store: ParamStore::new(), rng: &mut rng, bound: 1.0 / (d as f64).sqrt() };
        let embedding = b.store.add_row_sparse("embedding", embeddings.into_matrix());

        let encoder = match config.composition {
            Composition::TreeLstm => {
                let leaf = LeafCellParams {
                    w_input: b.matrix("leaf.input.weight", d, dw),
                    b_input: b.bias("leaf.input.bias", d, 0.0),
                    w_output: b.matrix("leaf.output.weight", d, dw),
                    b_output: b.bias("leaf.output.bias", d, 0.0),
                    w_update: b.matrix("leaf.update.weight", d, dw),
                    b_update: b.bias("leaf.update.bias", d, 0.0),
                };
                EncoderParams::TreeLstm(TreeLstmParams {
                    leaf,
                    u_input: b.matrix("compose.input.weight", d, 2 * d),
                    b_input: b.bias("compose.input.bias", d, 0.0),
                    u_forget_left: b.matrix("compose.forget_left.weight", d, d),
                    b_forget_left: b.bias("compose.forget_left.bias", d, config.forget_bias),
                    u_forget_right: b.matrix("compose.forget_right.weight", d, d),
                    b_forget_right: b.bias("compose.forget_right.bias", d, config.forget_bias),
                    u_output: b.matrix("compose.output.weight", d, 2 * d),
                    b_output: b.bias("compose.output.bias", d, 0.0),
                    u_update: b.matrix("compose.update.weight", d, 2 * d),
                    b_update: b.bias("compose.update.bias", d, 0.0),
                })
            }
            Composition::Rvnn => EncoderParams::Rvnn(RvnnParams {
                w_leaf: b.matrix("leaf.weight", d, dw),
                b_leaf: b.bias("leaf.bias", d, 0.0),
                w: b.matrix("compose.weight", d, 2 * d),
                b: b.bias("compose.bias", d, 0.0),
            }),
        };

        let attention = config.classifier.uses_attention().then(|| AttentionParams {
            w1: b.matrix("attention.hidden.weight", da, 2 * d),
            b1: b.bias("attention.hidden.bias", da, 0.0),
            w2: b.matrix("attention.score.weight", 1, da),
            b2: b.bias("attention.score.bias", 1, 0.0),
        });

        let classifier = ClassifierParams {
            w_hidden: b.matrix("classifier.weight", dl, d),
            b_hidden: b.bias("classifier.bias", dl, 0.0),
            concat: (config.classifier == ClassifierMode::Concat)
                .then(|| (b.matrix("classifier.concat.weight", dl, 2 * d), b.bias("classifier.concat.bias", dl, 0.0))),
        };

        Ok(Model { config, store: b.store, embedding, encoder, attention, classifier })
    }

    pub fn vocab_size(&self) -> usize {
        self.store.get(self.embedding).rows()
    }

    /// Ids of every parameter except the embedding table.
    pub fn non_embedding_params(&self) -> Vec<ParamId> {
        self.store.ids().filter(|&id| id != self.embedding).collect()
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for id in self.store.ids().collect::<Vec<_>>() {
            self.store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}
