//! Spoken-word comprehension as a mapping from unfolding phonological feature
//! frames to static binary semantic-visual representations.
//!
//! - [`phonology`]: phone feature table, lexicon, unfolded frame sequences
//! - [`representations`]: binary semantic-visual targets, PCA, Hamming metrics
//! - [`gru`]: two-layer GRU, backpropagation through time, gradient checks
//! - [`trainer`]: full-batch Nesterov training and learned-word evaluation
//! - [`visual_world`]: target-absent trial construction and activation time courses

pub mod error;
pub mod gru;
pub mod phonology;
mod precise;
pub mod representations;
pub mod trainer;
pub mod visual_world;

pub use error::{Error, Result};
pub use gru::{backward, forward, forward_batch, grad_check, gru_step, init_model, loss, Checkpoint, ForwardTrace, GruModel, GruParams};
pub use phonology::{build_sequence, cohort_stats, embedded_label_pairs, encode_phone, pad_sequence, Lexicon, PhoneFeatureTable, UnfoldedSequence, VocabItem};
pub use representations::{activation, hamming_norm, RepSet, SemVisRep};
pub use trainer::{evaluate_learned, make_batch, nesterov_step, train, TrainerConfig, TrainingLog};
pub use visual_world::{build_trials, simulate_trial, ThresholdConfig, Trial};
