//! Training regimes: supervised cross-entropy (Sup) and two-stage supervised
//! contrastive training (SCL), plus masked fine-tuning.
//!
//! SCL stage 1 optimizes encoder and projection head with the contrastive
//! loss over augmented multi-view batches; stage 2 freezes the encoder and
//! trains the classifier head on clean data. The projection head never leaves
//! stage 1. A pruning hook, when attached, runs once per optimizer step; for
//! Sup it manages encoder and classifier weights, for SCL the encoder only
//! (the projection head is discarded and the classifier does not exist yet).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{augment, derive_seed, AugmentationPolicy, DataError, Dataset};
use crate::loss::{cross_entropy_loss, supcon_loss, LossError};
use crate::net::{backward, forward, LayerSpec, Module, NetError, WeightStore};
use crate::optim::{cosine_lr, sgd_step, SgdState};
use crate::prune::{achieved_sparsity, PruneError, PruneHook};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config error: {0}")]
    Config(String),
    #[error("loss diverged (non-finite) at step {step}")]
    Diverged { step: u64 },
    #[error("could not draw a non-degenerate batch after {attempts} attempts")]
    DegenerateBatches { attempts: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Sup,
    Scl,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Sup => write!(f, "sup"),
            Method::Scl => write!(f, "scl"),
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sup" => Ok(Method::Sup),
            "scl" => Ok(Method::Scl),
            other => Err(format!("unknown method '{other}'")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruningKind {
    None,
    Gmp,
    DeltaGmp,
    OneShot,
}

impl fmt::Display for PruningKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PruningKind::None => write!(f, "none"),
            PruningKind::Gmp => write!(f, "gmp"),
            PruningKind::DeltaGmp => write!(f, "delta_gmp"),
            PruningKind::OneShot => write!(f, "one_shot"),
        }
    }
}

impl FromStr for PruningKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(PruningKind::None),
            "gmp" => Ok(PruningKind::Gmp),
            "delta_gmp" => Ok(PruningKind::DeltaGmp),
            "one_shot" => Ok(PruningKind::OneShot),
            other => Err(format!("unknown pruning kind '{other}'")),
        }
    }
}

/// Hyper-parameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    /// Contrastive temperature; SCL only.
    pub temperature: f64,
    pub cosine_annealing: bool,
    pub seed: u64,
    /// Representation dimension `l`: the encoder output width.
    pub representation_dim: usize,
    /// Hidden widths between the input and the representation.
    pub hidden_dims: Vec<usize>,
    /// SCL stage-2 classifier-head epochs.
    pub head_epochs: usize,
    /// SCL stage-2 classifier-head learning rate.
    pub head_lr: f32,
}

impl TrainConfig {
    /// Desk-scale supervised profile.
    pub fn desk_sup(seed: u64) -> Self {
        Self {
            method: Method::Sup,
            epochs: 30,
            batch_size: 32,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.5,
            cosine_annealing: false,
            seed,
            representation_dim: 16,
            hidden_dims: vec![32],
            head_epochs: 0,
            head_lr: 0.1,
        }
    }

    /// Desk-scale contrastive profile.
    pub fn desk_scl(seed: u64) -> Self {
        Self {
            method: Method::Scl,
            epochs: 60,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.5,
            cosine_annealing: true,
            seed,
            representation_dim: 16,
            hidden_dims: vec![32],
            head_epochs: 20,
            head_lr: 0.1,
        }
    }

    /// Full-scale supervised profile, kept for documentation.
    pub fn paper_sup(seed: u64) -> Self {
        Self {
            method: Method::Sup,
            epochs: 205,
            batch_size: 128,
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.5,
            cosine_annealing: false,
            seed,
            representation_dim: 128,
            hidden_dims: vec![256],
            head_epochs: 0,
            head_lr: 0.1,
        }
    }

    /// Full-scale contrastive profile, kept for documentation.
    pub fn paper_scl(seed: u64) -> Self {
        Self {
            method: Method::Scl,
            epochs: 500,
            batch_size: 1024,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.5,
            cosine_annealing: true,
            seed,
            representation_dim: 128,
            hidden_dims: vec![256],
            head_epochs: 100,
            head_lr: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 {
            return Err(TrainError::Config("lr must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if self.method == Method::Scl && self.temperature <= 0.0 {
            return Err(TrainError::Config("SCL needs temperature > 0".into()));
        }
        if self.representation_dim < 2 {
            return Err(TrainError::Config("representation_dim must be >= 2".into()));
        }
        Ok(())
    }
}

/// Where a trained bundle came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub seed: u64,
    /// Requested sparsity level, 0 for dense runs.
    pub sparsity: f64,
    pub pruning: PruningKind,
}

/// Trained encoder and classifier head with their masks. The projection head
/// exists only while SCL stage 1 runs; bundles used for inference never
/// carry one.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub encoder: Module,
    pub classifier: Module,
    pub provenance: Provenance,
}

impl ModelBundle {
    /// Prunable stores, labeled for mask snapshots and checkpoints.
    pub fn labeled_stores_mut(&mut self) -> Vec<(&'static str, &mut WeightStore)> {
        vec![
            ("encoder", &mut self.encoder.store),
            ("classifier", &mut self.classifier.store),
        ]
    }

    /// Achieved sparsity across encoder and classifier head.
    pub fn sparsity(&self) -> f64 {
        achieved_sparsity(&[&self.encoder.store, &self.classifier.store])
    }

    /// Representation vectors: encoder output for a `[n, d]` batch.
    pub fn representations(&self, x: &Tensor) -> Result<Tensor, NetError> {
        Ok(forward(&self.encoder, x)?.output().clone())
    }

    /// Class logits for a `[n, d]` batch.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor, NetError> {
        let h = self.representations(x)?;
        Ok(forward(&self.classifier, &h)?.output().clone())
    }

    /// Predicted classes: argmax of the logits, ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>, NetError> {
        let logits = self.logits(&x.clone())?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0usize;
                for (c, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    /// Probe activations for PD-style analysis: the output of every encoder
    /// ReLU block plus the classifier logits, in depth order.
    pub fn probe_activations(&self, x: &Tensor) -> Result<Vec<Tensor>, NetError> {
        let enc = forward(&self.encoder, x)?;
        let mut probes: Vec<Tensor> = self
            .encoder
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::Relu))
            .map(|(i, _)| enc.activations()[i].clone())
            .collect();
        let logits = forward(&self.classifier, enc.output())?;
        probes.push(logits.output().clone());
        Ok(probes)
    }

    /// Widths of the probe activations, in depth order.
    pub fn probe_dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = Vec::new();
        let mut width = self.encoder.input_dim().unwrap_or(0);
        for layer in &self.encoder.layers {
            match layer {
                LayerSpec::Affine { out_dim, .. } => width = *out_dim,
                LayerSpec::Relu => dims.push(width),
                LayerSpec::L2Norm => {}
            }
        }
        dims.push(self.classifier.output_dim().unwrap_or(0));
        dims
    }
}

/// One line of the training step log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f32,
    pub loss: f64,
    pub current_sparsity: f64,
}

fn build_encoder(input_dim: usize, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Module {
    let mut layers = Vec::new();
    let mut prev = input_dim;
    for &h in &config.hidden_dims {
        layers.push(LayerSpec::Affine {
            in_dim: prev,
            out_dim: h,
        });
        layers.push(LayerSpec::Relu);
        prev = h;
    }
    layers.push(LayerSpec::Affine {
        in_dim: prev,
        out_dim: config.representation_dim,
    });
    layers.push(LayerSpec::Relu);
    Module::with_xavier_init(layers, rng)
}

fn build_classifier(config: &TrainConfig, class_count: usize, rng: &mut ChaCha8Rng) -> Module {
    Module::with_xavier_init(
        vec![LayerSpec::Affine {
            in_dim: config.representation_dim,
            out_dim: class_count,
        }],
        rng,
    )
}

fn build_projection(config: &TrainConfig, rng: &mut ChaCha8Rng) -> Module {
    let l = config.representation_dim;
    Module::with_xavier_init(
        vec![
            LayerSpec::Affine {
                in_dim: l,
                out_dim: l,
            },
            LayerSpec::Relu,
            LayerSpec::Affine {
                in_dim: l,
                out_dim: (l / 2).max(2),
            },
            LayerSpec::L2Norm,
        ],
        rng,
    )
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

fn batch_of(dataset: &Dataset, indices: &[usize]) -> (Tensor, Vec<usize>) {
    let dim = dataset.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * dim);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let (features, label) = &dataset.samples[i];
        data.extend_from_slice(features.data());
        labels.push(*label);
    }
    (
        Tensor::new(vec![indices.len(), dim], data).expect("uniform dims"),
        labels,
    )
}

fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// End-to-end supervised training with cross-entropy.
///
/// The pruning hook, when given, runs after every optimizer step over the
/// encoder and classifier stores.
pub fn train_sup(
    dataset: &Dataset,
    config: &TrainConfig,
    mut hook: Option<&mut PruneHook>,
) -> Result<(ModelBundle, Vec<StepRecord>), TrainError> {
    if config.method != Method::Sup {
        return Err(TrainError::Config("train_sup needs method = sup".into()));
    }
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = build_encoder(dataset.feature_dim(), config, &mut rng);
    let mut classifier = build_classifier(config, dataset.class_count, &mut rng);
    let mut enc_state = SgdState::new(&encoder.store);
    let mut clf_state = SgdState::new(&classifier.store);

    let n = dataset.len();
    let total_steps = (config.epochs * batches_per_epoch(n, config.batch_size)) as u64;
    if let Some(h) = hook.as_deref_mut() {
        h.begin(total_steps);
    }

    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let lr = if config.cosine_annealing {
            cosine_lr(config.lr, epoch, config.epochs)
        } else {
            config.lr
        };
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = batch_of(dataset, chunk);
            let enc_trace = forward(&encoder, &x)?;
            let clf_trace = forward(&classifier, enc_trace.output())?;
            let (loss, dlogits) = cross_entropy_loss(clf_trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let (clf_grads, dh) = backward(&classifier, &clf_trace, &dlogits)?;
            let (enc_grads, _) = backward(&encoder, &enc_trace, &dh)?;
            sgd_step(
                &mut encoder.store,
                &mut enc_state,
                &enc_grads,
                lr,
                config.momentum,
                config.weight_decay,
            );
            sgd_step(
                &mut classifier.store,
                &mut clf_state,
                &clf_grads,
                lr,
                config.momentum,
                config.weight_decay,
            );
            if let Some(h) = hook.as_deref_mut() {
                let mut stores = [
                    ("encoder", &mut encoder.store),
                    ("classifier", &mut classifier.store),
                ];
                h.on_step(step, &mut stores)?;
            }
            log.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                current_sparsity: achieved_sparsity(&[&encoder.store, &classifier.store]),
            });
            step += 1;
        }
    }
    if let Some(h) = hook.as_deref_mut() {
        let mut stores = [
            ("encoder", &mut encoder.store),
            ("classifier", &mut classifier.store),
        ];
        h.finish(&mut stores)?;
    }

    Ok((
        ModelBundle {
            encoder,
            classifier,
            provenance: Provenance {
                method: Method::Sup,
                seed: config.seed,
                sparsity: 0.0,
                pruning: PruningKind::None,
            },
        },
        log,
    ))
}

/// Two-stage supervised contrastive training.
///
/// Stage 1: encoder + projection head minimize the contrastive loss over
/// augmented multi-view batches (the projection ends in L2 normalization, so
/// the loss sees unit vectors and gradients flow through the normalization).
/// Stage 2: the encoder freezes and the classifier head trains with
/// cross-entropy on clean data. The returned bundle has no projection head.
pub fn train_scl(
    dataset: &Dataset,
    config: &TrainConfig,
    policy: &AugmentationPolicy,
    mut hook: Option<&mut PruneHook>,
) -> Result<(ModelBundle, Vec<StepRecord>), TrainError> {
    if config.method != Method::Scl {
        return Err(TrainError::Config("train_scl needs method = scl".into()));
    }
    config.validate()?;
    policy.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut encoder = build_encoder(dataset.feature_dim(), config, &mut rng);
    let mut projection = build_projection(config, &mut rng);
    let mut classifier = build_classifier(config, dataset.class_count, &mut rng);
    let mut enc_state = SgdState::new(&encoder.store);
    let mut proj_state = SgdState::new(&projection.store);
    let mut clf_state = SgdState::new(&classifier.store);

    let n = dataset.len();
    let total_steps = (config.epochs * batches_per_epoch(n, config.batch_size)) as u64;
    if let Some(h) = hook.as_deref_mut() {
        h.begin(total_steps);
    }

    let mut log = Vec::new();
    let mut step = 0u64;

    // Stage 1: contrastive training over augmented views.
    for epoch in 0..config.epochs {
        let lr = if config.cosine_annealing {
            cosine_lr(config.lr, epoch, config.epochs)
        } else {
            config.lr
        };
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut indices: Vec<usize> = chunk.to_vec();
            let mut attempts = 0usize;
            let loss = loop {
                let (views, view_labels) =
                    view_batch(dataset, &indices, policy, config.seed, epoch)?;
                let enc_trace = forward(&encoder, &views)?;
                let proj_trace = forward(&projection, enc_trace.output())?;
                match supcon_loss(proj_trace.output(), &view_labels, config.temperature) {
                    Ok((loss, dz)) => {
                        if !loss.is_finite() {
                            return Err(TrainError::Diverged { step });
                        }
                        let (proj_grads, dh) = backward(&projection, &proj_trace, &dz)?;
                        let (enc_grads, _) = backward(&encoder, &enc_trace, &dh)?;
                        sgd_step(
                            &mut encoder.store,
                            &mut enc_state,
                            &enc_grads,
                            lr,
                            config.momentum,
                            config.weight_decay,
                        );
                        sgd_step(
                            &mut projection.store,
                            &mut proj_state,
                            &proj_grads,
                            lr,
                            config.momentum,
                            config.weight_decay,
                        );
                        break loss;
                    }
                    Err(LossError::DegenerateBatch { .. }) => {
                        attempts += 1;
                        if attempts >= 100 {
                            return Err(TrainError::DegenerateBatches { attempts });
                        }
                        indices = (0..config.batch_size.min(n))
                            .map(|_| rng.gen_range(0..n))
                            .collect();
                    }
                    Err(e) => return Err(e.into()),
                }
            };
            if let Some(h) = hook.as_deref_mut() {
                let mut stores = [("encoder", &mut encoder.store)];
                h.on_step(step, &mut stores)?;
            }
            log.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
                current_sparsity: achieved_sparsity(&[&encoder.store, &classifier.store]),
            });
            step += 1;
        }
    }
    if let Some(h) = hook.as_deref_mut() {
        let mut stores = [("encoder", &mut encoder.store)];
        h.finish(&mut stores)?;
    }

    // Stage 2: frozen encoder, supervised classifier head on clean data.
    for head_epoch in 0..config.head_epochs {
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = batch_of(dataset, chunk);
            let h = forward(&encoder, &x)?.output().clone();
            let clf_trace = forward(&classifier, &h)?;
            let (loss, dlogits) = cross_entropy_loss(clf_trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let (clf_grads, _) = backward(&classifier, &clf_trace, &dlogits)?;
            sgd_step(
                &mut classifier.store,
                &mut clf_state,
                &clf_grads,
                config.head_lr,
                config.momentum,
                config.weight_decay,
            );
            log.push(StepRecord {
                step,
                epoch: config.epochs + head_epoch,
                lr: config.head_lr,
                loss,
                current_sparsity: achieved_sparsity(&[&encoder.store, &classifier.store]),
            });
            step += 1;
        }
    }

    Ok((
        ModelBundle {
            encoder,
            classifier,
            provenance: Provenance {
                method: Method::Scl,
                seed: config.seed,
                sparsity: 0.0,
                pruning: PruningKind::None,
            },
        },
        log,
    ))
}

fn view_batch(
    dataset: &Dataset,
    indices: &[usize],
    policy: &AugmentationPolicy,
    seed: u64,
    epoch: usize,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let dim = dataset.feature_dim();
    let mut data = Vec::with_capacity(indices.len() * policy.views_per_sample * dim);
    let mut labels = Vec::with_capacity(indices.len() * policy.views_per_sample);
    for &i in indices {
        let (features, label) = &dataset.samples[i];
        let stream = derive_seed(seed.wrapping_add(0x5eed), ((epoch as u64) << 32) | i as u64);
        for view in augment(features, policy, stream)? {
            data.extend_from_slice(view.data());
            labels.push(*label);
        }
    }
    let rows = labels.len();
    Ok((Tensor::new(vec![rows, dim], data).expect("uniform dims"), labels))
}

/// Which weights fine-tuning may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    /// Every unmasked weight in encoder and classifier.
    All,
    /// Classifier head only.
    HeadOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub scope: FinetuneScope,
    pub seed: u64,
}

/// Supervised fine-tuning with masks frozen: sparsity before equals sparsity
/// after, exactly.
pub fn finetune(
    bundle: &mut ModelBundle,
    dataset: &Dataset,
    config: &FinetuneConfig,
) -> Result<Vec<StepRecord>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut enc_state = SgdState::new(&bundle.encoder.store);
    let mut clf_state = SgdState::new(&bundle.classifier.store);
    let n = dataset.len();
    let mut log = Vec::new();
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = shuffled_indices(n, &mut rng);
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = batch_of(dataset, chunk);
            let enc_trace = forward(&bundle.encoder, &x)?;
            let clf_trace = forward(&bundle.classifier, enc_trace.output())?;
            let (loss, dlogits) = cross_entropy_loss(clf_trace.output(), &labels)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let (clf_grads, dh) = backward(&bundle.classifier, &clf_trace, &dlogits)?;
            if config.scope == FinetuneScope::All {
                let (enc_grads, _) = backward(&bundle.encoder, &enc_trace, &dh)?;
                sgd_step(
                    &mut bundle.encoder.store,
                    &mut enc_state,
                    &enc_grads,
                    config.lr,
                    config.momentum,
                    config.weight_decay,
                );
            }
            sgd_step(
                &mut bundle.classifier.store,
                &mut clf_state,
                &clf_grads,
                config.lr,
                config.momentum,
                config.weight_decay,
            );
            log.push(StepRecord {
                step,
                epoch,
                lr: config.lr,
                loss,
                current_sparsity: bundle.sparsity(),
            });
            step += 1;
        }
    }
    Ok(log)
}

/// Fraction of samples the bundle classifies correctly.
pub fn accuracy(bundle: &ModelBundle, dataset: &Dataset) -> Result<f64, NetError> {
    let x = dataset.feature_matrix();
    let predictions = bundle.predict(&x)?;
    let correct = predictions
        .iter()
        .zip(dataset.labels())
        .filter(|(p, l)| **p == *l)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}
