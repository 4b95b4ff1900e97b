//! On-disk checkpoints: a directory holding `manifest.json`, a flat
//! little-endian f64 blob `params.bin` in manifest order, and `vocab.txt`.

use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingTable, Vocabulary};
use crate::model::{Model, ModelError};
use crate::train::TrainingConfig;
use crate::treeio::LabelKind;

pub const SCHEMA: &str = "treesent.checkpoint/1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint schema {0:?}")]
    Schema(String),
    #[error("vocabulary fingerprint {found} does not match manifest {expected}")]
    VocabMismatch { expected: String, found: String },
    #[error("shape mismatch for tensor {name:?}: manifest {expected:?}, model {found:?}")]
    Layout { name: String, expected: Option<[usize; 2]>, found: Option<[usize; 2]> },
    #[error("shape mismatch: params blob has {found} bytes, manifest shapes need {expected}")]
    BlobLength { expected: usize, found: usize },
    #[error(transparent)]
    Vocab(#[from] EmbedError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub config: TrainingConfig,
    pub labels: LabelKind,
    pub vocab_fingerprint: String,
    pub vocab_size: usize,
    pub seed: u64,
    pub epoch: usize,
    pub dev_accuracy: Option<f64>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model,
    pub vocab: Vocabulary,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.display().to_string(), source }
}

fn layout(model: &Model) -> Vec<TensorEntry> {
    model
        .store
        .ids()
        .map(|id| {
            let t = model.store.get(id);
            TensorEntry { name: model.store.name(id).to_string(), shape: [t.rows(), t.cols()] }
        })
        .collect()
}

impl Manifest {
    pub fn new(
        config: &TrainingConfig,
        labels: LabelKind,
        model: &Model,
        vocab: &Vocabulary,
        epoch: usize,
        dev_accuracy: Option<f64>,
    ) -> Self {
        Manifest {
            schema: SCHEMA.to_string(),
            config: TrainingConfig { model: model.config.clone(), ..config.clone() },
            labels,
            vocab_fingerprint: vocab.fingerprint(),
            vocab_size: vocab.len(),
            seed: config.seed,
            epoch,
            dev_accuracy,
            tensors: layout(model),
        }
    }
}

/// Writes `dir/{manifest.json,params.bin,vocab.txt}`, creating `dir`.
pub fn save(dir: &Path, manifest: &Manifest, model: &Model, vocab: &Vocabulary) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json).map_err(io_err(&path))?;

    let mut blob = Vec::with_capacity(model.store.num_scalars() * 8);
    for id in model.store.ids() {
        for x in model.store.get(id).data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let path = dir.join(PARAMS_FILE);
    fs::write(&path, blob).map_err(io_err(&path))?;

    let path = dir.join(VOCAB_FILE);
    let mut f = io::BufWriter::new(fs::File::create(&path).map_err(io_err(&path))?);
    for tok in vocab.tokens() {
        writeln!(f, "{tok}").map_err(io_err(&path))?;
    }
    f.flush().map_err(io_err(&path))
}

/// Loads and validates a checkpoint directory.
pub fn load(dir: &Path) -> Result<Checkpoint, CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.schema != SCHEMA {
        return Err(CheckpointError::Schema(manifest.schema));
    }

    let path = dir.join(VOCAB_FILE);
    let file = fs::File::open(&path).map_err(io_err(&path))?;
    let tokens = BufReader::new(file).lines().collect::<Result<Vec<_>, _>>().map_err(io_err(&path))?;
    let vocab = Vocabulary::from_tokens(tokens)?;
    let found = vocab.fingerprint();
    if found != manifest.vocab_fingerprint || vocab.len() != manifest.vocab_size {
        return Err(CheckpointError::VocabMismatch { expected: manifest.vocab_fingerprint.clone(), found });
    }

    let model_config = manifest.config.model.clone();
    let mut model = Model::new(model_config.clone(), EmbeddingTable::random(vocab.len(), model_config.word_dim, 0), 0)?;
    let expected = layout(&model);
    for i in 0..expected.len().max(manifest.tensors.len()) {
        let (e, m) = (expected.get(i), manifest.tensors.get(i));
        if e != m {
            return Err(CheckpointError::Layout {
                name: m.or(e).map(|t| t.name.clone()).unwrap_or_default(),
                expected: m.map(|t| t.shape),
                found: e.map(|t| t.shape),
            });
        }
    }

    let path = dir.join(PARAMS_FILE);
    let blob = fs::read(&path).map_err(io_err(&path))?;
    let need = model.store.num_scalars() * 8;
    if blob.len() != need {
        return Err(CheckpointError::BlobLength { expected: need, found: blob.len() });
    }
    let mut chunks = blob.chunks_exact(8);
    for id in model.store.ids().collect::<Vec<_>>() {
        for x in model.store.get_mut(id).data_mut() {
            let bytes: [u8; 8] = chunks.next().expect("length checked").try_into().expect("8-byte chunk");
            *x = f64::from_le_bytes(bytes);
        }
    }
    Ok(Checkpoint { manifest, model, vocab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierMode, ModelConfig};

    fn fixture() -> (TrainingConfig, Model, Vocabulary) {
        let vocab = Vocabulary::build(["good", "bad", "film"]);
        let model_cfg = ModelConfig {
            classifier: ClassifierMode::Concat,
            word_dim: 3,
            hidden_dim: 4,
            attn_dim: 2,
            num_classes: 2,
            ..Default::default()
        };
        let model = Model::new(model_cfg.clone(), EmbeddingTable::random(vocab.len(), 3, 9), 4).unwrap();
        let config = TrainingConfig { model: model_cfg, seed: 4, ..Default::default() };
        (config, model, vocab)
    }

    #[test]
    fn round_trip_is_exact() {
        let (config, model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let manifest = Manifest::new(&config, LabelKind::Binary, &model, &vocab, 3, Some(0.75));
        save(dir.path(), &manifest, &model, &vocab).unwrap();
        let ck = load(dir.path()).unwrap();
        assert_eq!(ck.model, model);
        assert_eq!(ck.vocab, vocab);
        assert_eq!(ck.manifest, manifest);
    }

    #[test]
    fn truncated_blob_names_shape_mismatch() {
        let (config, model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &Manifest::new(&config, LabelKind::Binary, &model, &vocab, 1, None), &model, &vocab).unwrap();
        let p = dir.path().join(PARAMS_FILE);
        let mut blob = fs::read(&p).unwrap();
        blob.truncate(blob.len() - 8);
        fs::write(&p, blob).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, CheckpointError::BlobLength { .. }));
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn edited_shape_is_rejected() {
        let (config, model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        let mut manifest = Manifest::new(&config, LabelKind::Binary, &model, &vocab, 1, None);
        manifest.tensors[3].shape = [7, 7];
        save(dir.path(), &manifest, &model, &vocab).unwrap();
        let err = load(dir.path()).unwrap_err();
        assert!(matches!(err, CheckpointError::Layout { .. }), "{err}");
        assert!(err.to_string().contains("shape mismatch"));
    }

    #[test]
    fn vocab_edit_is_rejected() {
        let (config, model, vocab) = fixture();
        let dir = tempfile::tempdir().unwrap();
        save(dir.path(), &Manifest::new(&config, LabelKind::Binary, &model, &vocab, 1, None), &model, &vocab).unwrap();
        fs::write(dir.path().join(VOCAB_FILE), "<unk>\nfilm\nbad\ngood\n").unwrap();
        assert!(matches!(load(dir.path()), Err(CheckpointError::VocabMismatch { .. })));
    }
}
