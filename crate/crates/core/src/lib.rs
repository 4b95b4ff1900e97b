//! Tree-structured recursive sentiment classifiers (plain RvNN and Binary
//! Tree-LSTM) with subtree attention and lexicon-based distant supervision.

pub mod attnclf;
pub mod checkpoint;
pub mod checks;
pub mod embed;
pub mod encoder;
pub mod gradcheck;
pub mod graph;
pub mod lexicon;
pub mod model;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod treeio;
