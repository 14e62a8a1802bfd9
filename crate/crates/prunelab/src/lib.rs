//! prunelab: a desk-scale laboratory for studying what magnitude pruning
//! does to the predictions and learned representations of small classifiers.
//!
//! The crate trains small feedforward networks with supervised and
//! supervised-contrastive objectives, sparsifies them with gradual, delayed
//! gradual, and post-training one-shot magnitude pruning, and measures the
//! damage with ensemble-disagreement exemplars, representation Q-Scores, and
//! kNN prediction-depth probes.

pub mod data;
pub mod loss;
pub mod net;
pub mod optim;
pub mod prune;
pub mod tensor;
pub mod train;
