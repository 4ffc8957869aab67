//! Mini-batch SGD over the hybrid objective, plus the gradient oracle
//! entry point for the whole model.
//!
//! Reference pooled features for the distillation anchor come from a
//! frozen snapshot of the model at initialization and are cached per
//! training sample, since neither side changes during the run. The
//! returned parameters are those of the epoch with the best validation
//! macro-F1 (first such epoch on ties).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Dataset, DataError, MultimodalPost, Sample, Split};
use crate::eval::{self, EvalError};
use crate::gradcheck::{self, GradCheckReport, ObjectiveProbe};
use crate::loss::KdReference;
use crate::model::{self, ModelDims, ModelError, ModelParams, ParamMode, ParamNodes, Variant};
use crate::params::ParamSet;
use crate::seeds;
use crate::tape::{Gradients, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("empty {0:?} split")]
    EmptySplit(Split),
    #[error("gradient for unknown parameter {0}")]
    UnknownGradient(String),
    #[error("gradient shape {grad:?} does not match parameter {name} shape {param:?}")]
    GradientShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Weight of the distillation term in the total loss.
    pub lambda: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoders: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 0.1,
            learning_rate: 0.05,
            epochs: 30,
            batch_size: 32,
            seed: 0,
            freeze_encoders: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::InvalidConfig(m));
        if self.lambda < 0.0 {
            return err(format!("lambda {} negative", self.lambda));
        }
        // lr = 0 is allowed: it trains with zero-size steps, which the
        // no-update contracts rely on
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return err(format!("learning_rate {} invalid", self.learning_rate));
        }
        if self.epochs < 1 {
            return err("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return err("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub val_macro_f1: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Parameters from the best-validation epoch.
    pub model: ModelParams,
    pub log: Vec<EpochRecord>,
    /// 1-based index of the epoch the returned parameters come from.
    pub best_epoch: usize,
}

pub fn loss_log_csv(log: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,total,ce,kd,val_macro_f1\n");
    for r in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.total, r.ce, r.kd, r.val_macro_f1
        ));
    }
    out
}

/// In-place gradient descent update; parameters without gradients (and
/// frozen tensors, which never receive gradients) stay untouched.
pub fn sgd_step(params: &mut ParamSet, grads: &Gradients, lr: f64) -> Result<(), TrainError> {
    for (name, grad) in &grads.0 {
        let current = params
            .get(name)
            .ok_or_else(|| TrainError::UnknownGradient(name.clone()))?;
        if current.shape() != grad.shape() {
            return Err(TrainError::GradientShape {
                name: name.clone(),
                param: current.shape().to_vec(),
                grad: grad.shape().to_vec(),
            });
        }
        let updated = Tensor::new(
            current.shape().to_vec(),
            current
                .data()
                .iter()
                .zip(grad.data())
                .map(|(p, g)| p - lr * g)
                .collect(),
        )
        .expect("shape preserved");
        params.set(name, updated);
    }
    Ok(())
}

struct BatchLoss {
    total: f64,
    ce: f64,
    kd: f64,
}

/// One mini-batch objective on a fresh tape: mean nll plus lambda times
/// the mean squared distance to the cached reference features.
fn batch_backward(
    model: &ModelParams,
    posts: &[&MultimodalPost],
    references: &[&Tensor],
    lambda: f64,
    mode: ParamMode,
) -> Result<(BatchLoss, Gradients), TrainError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, model, mode)?;
    let mut nlls = Vec::with_capacity(posts.len());
    let mut kds = Vec::with_capacity(posts.len());
    for (post, reference) in posts.iter().zip(references) {
        let trace = model::forward_on_tape(&mut tape, &nodes, model.variant, post)?;
        nlls.push(tape.nll(trace.probs, post.label)?);
        let anchor = tape.leaf(reference.reshaped(vec![1, reference.numel()])?);
        let diff = tape.sub(trace.pooled, anchor)?;
        kds.push(tape.sum_squares(diff));
    }
    let ce = tape.mean_of(&nlls)?;
    let kd = tape.mean_of(&kds)?;
    let total = tape.add_scaled(ce, kd, lambda)?;
    let loss = BatchLoss {
        total: tape.value(total).item(),
        ce: tape.value(ce).item(),
        kd: tape.value(kd).item(),
    };
    let grads = tape.backward(total)?;
    Ok((loss, grads))
}

pub fn train(
    model: ModelParams,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let train_samples: Vec<&Sample> = dataset.split(Split::Train);
    let val_samples: Vec<&Sample> = dataset.split(Split::Val);
    if train_samples.is_empty() {
        return Err(TrainError::EmptySplit(Split::Train));
    }
    if val_samples.is_empty() {
        return Err(TrainError::EmptySplit(Split::Val));
    }

    let snapshot = KdReference::snapshot(&model);
    let references: Vec<Tensor> = train_samples
        .iter()
        .map(|s| snapshot.pooled_feature(&s.post))
        .collect::<Result<_, _>>()?;

    let mode = if config.freeze_encoders {
        ParamMode::FreezeEncoders
    } else {
        ParamMode::Trainable
    };

    let mut model = model;
    let mut log = Vec::with_capacity(config.epochs);
    let mut best_f1 = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_params = model.clone();

    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut seeds::rng(seeds::derive_indexed(
            config.seed,
            "shuffle",
            epoch as u64,
        )));

        let (mut sum_total, mut sum_ce, mut sum_kd) = (0.0, 0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let posts: Vec<&MultimodalPost> = batch.iter().map(|&i| &train_samples[i].post).collect();
            let refs: Vec<&Tensor> = batch.iter().map(|&i| &references[i]).collect();
            let (loss, grads) = batch_backward(&model, &posts, &refs, config.lambda, mode)?;
            sgd_step(&mut model.params, &grads, config.learning_rate)?;
            let w = batch.len() as f64;
            sum_total += loss.total * w;
            sum_ce += loss.ce * w;
            sum_kd += loss.kd * w;
        }

        let n = train_samples.len() as f64;
        let val_report = eval::evaluate(&model, &val_samples)?;
        let record = EpochRecord {
            epoch,
            total: sum_total / n,
            ce: sum_ce / n,
            kd: sum_kd / n,
            val_macro_f1: val_report.macro_f1,
        };
        if record.val_macro_f1 > best_f1 {
            best_f1 = record.val_macro_f1;
            best_epoch = epoch;
            best_params = model.clone();
        }
        log.push(record);
    }

    Ok(TrainOutcome {
        model: best_params,
        log,
        best_epoch,
    })
}

// ── whole-model gradient oracle ──────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelGradCheckSettings {
    pub dims: ModelDims,
    pub variant: Variant,
    pub n_posts: usize,
    pub n_tokens: usize,
    pub n_regions: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for ModelGradCheckSettings {
    fn default() -> Self {
        ModelGradCheckSettings {
            dims: ModelDims {
                vocab_size: 20,
                d_raw: 5,
                d_text: 8,
                d_vision: 7,
                d_common: 8,
                d_context: 8,
                n_classes: 5,
            },
            variant: Variant::Full,
            n_posts: 3,
            n_tokens: 3,
            n_regions: 4,
            lambda: 0.5,
            epsilon: 1e-5,
            seed: 0,
        }
    }
}

fn random_posts(settings: &ModelGradCheckSettings) -> Vec<MultimodalPost> {
    let mut rng = seeds::rng(seeds::derive(settings.seed, "gradcheck/posts"));
    (0..settings.n_posts)
        .map(|i| MultimodalPost {
            id: format!("gradcheck-{i}"),
            tokens: (0..settings.n_tokens)
                .map(|_| rng.gen_range(1..settings.dims.vocab_size))
                .collect(),
            regions: (0..settings.n_regions)
                .map(|_| {
                    (0..settings.dims.d_raw)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect(),
            label: rng.gen_range(0..settings.dims.n_classes),
        })
        .collect()
}

/// Central-difference check of the full training objective (classification
/// plus weighted distillation) over every parameter of the model.
///
/// The snapshot anchoring the distillation term is built from a different
/// seed than the parameters under test, so that term carries gradient.
pub fn check_model_gradients(
    settings: &ModelGradCheckSettings,
) -> Result<GradCheckReport, TrainError> {
    let posts = random_posts(settings);
    let labels: Vec<usize> = posts.iter().map(|p| p.label).collect();
    let model = build_for_check(settings, "gradcheck/params");
    let snapshot_model = build_for_check(settings, "gradcheck/snapshot");
    let snapshot = KdReference::snapshot(&snapshot_model);
    let references: Vec<Tensor> = posts
        .iter()
        .map(|p| snapshot.pooled_feature(p))
        .collect::<Result<_, _>>()?;

    let objective = |params: &ParamSet| -> Result<(Tape, crate::tape::NodeId), TrainError> {
        let candidate = ModelParams {
            variant: settings.variant,
            dims: settings.dims.clone(),
            seed: settings.seed,
            params: params.clone(),
        };
        let mut tape = Tape::new();
        let nodes = ParamNodes::register(&mut tape, &candidate, ParamMode::Trainable)?;
        let mut nlls = Vec::new();
        let mut kds = Vec::new();
        for (post, (reference, &label)) in posts.iter().zip(references.iter().zip(&labels)) {
            let trace = model::forward_on_tape(&mut tape, &nodes, candidate.variant, post)?;
            nlls.push(tape.nll(trace.probs, label)?);
            let anchor = tape.leaf(reference.reshaped(vec![1, reference.numel()])?);
            let diff = tape.sub(trace.pooled, anchor)?;
            kds.push(tape.sum_squares(diff));
        }
        let ce = tape.mean_of(&nlls)?;
        let kd = tape.mean_of(&kds)?;
        let total = tape.add_scaled(ce, kd, settings.lambda)?;
        Ok((tape, total))
    };

    let (mut tape, total) = objective(&model.params)?;
    let analytic = tape.backward(total)?;

    let report = gradcheck::grad_check(
        |p| {
            let (tape, total) = objective(p).expect("objective evaluation failed");
            ObjectiveProbe {
                value: tape.value(total).item(),
                relu_inputs: tape.relu_inputs(),
            }
        },
        &model.params,
        &analytic,
        settings.epsilon,
    );
    Ok(report)
}

fn build_for_check(settings: &ModelGradCheckSettings, label: &str) -> ModelParams {
    model::build_model(
        settings.variant,
        &settings.dims,
        seeds::derive(settings.seed, label),
    )
}
