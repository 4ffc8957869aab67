//! Experiment surface: split evaluation, ablation comparison, robustness
//! sweeps, timing, and the conflicting-cue error listing.
//!
//! Evaluation may fan out across threads (COVLA_THREADS caps the worker
//! count, 0 forces sequential); predictions are per-sample deterministic
//! and reduced in sample order, so reports never depend on thread count.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Dataset, DataError, Perturbation, Sample};
use crate::metrics::{self, MetricsError, MetricsReport};
use crate::model::{self, ModelDims, ModelError, ModelParams, Variant};
use crate::seeds;
use crate::train::{self, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty evaluation split")]
    EmptySplit,
    #[error("perturbation level lists must include 0, got {0:?}")]
    MissingZeroLevel(Vec<f64>),
    #[error("ablation needs at least one seed")]
    NoSeeds,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn worker_count(n_samples: usize) -> usize {
    let configured = match std::env::var("COVLA_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) => 1,
            Ok(k) => k,
            Err(_) => 1,
        },
        Err(_) => std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
    };
    configured.clamp(1, n_samples.max(1))
}

/// Predicted label per sample, in sample order.
pub fn predictions(model: &ModelParams, samples: &[&Sample]) -> Result<Vec<usize>, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let workers = worker_count(samples.len());
    if workers == 1 {
        return samples
            .iter()
            .map(|s| Ok(model::forward(model, &s.post)?.predicted_label()))
            .collect();
    }
    let chunk_size = samples.len().div_ceil(workers);
    let chunks: Vec<&[&Sample]> = samples.chunks(chunk_size).collect();
    let results: Vec<Result<Vec<usize>, ModelError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = chunks
            .into_iter()
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|s| Ok(model::forward(model, &s.post)?.predicted_label()))
                        .collect::<Result<Vec<usize>, ModelError>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(samples.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Deterministic forward passes over a split, reduced to a metrics report.
pub fn evaluate(model: &ModelParams, samples: &[&Sample]) -> Result<MetricsReport, EvalError> {
    let preds = predictions(model, samples)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.post.label).collect();
    let confusion = metrics::confusion_matrix(&preds, &labels, model.dims.n_classes)?;
    Ok(metrics::compute_metrics(&confusion)?)
}

// ── conflicting-cue error listing ────────────────────────────────────

/// A misclassified sample the generator flagged as cross-modal conflict,
/// with its mean modality gates for inspection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConflictError {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub mean_text_gate: f64,
    pub mean_vision_gate: f64,
}

pub fn conflict_errors(
    model: &ModelParams,
    samples: &[&Sample],
) -> Result<Vec<ConflictError>, EvalError> {
    let mut out = Vec::new();
    for s in samples.iter().filter(|s| s.conflict) {
        let trace = model::forward(model, &s.post)?;
        let predicted = trace.predicted_label();
        if predicted != s.post.label {
            let mean = |t: &crate::tensor::Tensor| -> f64 {
                t.data().iter().sum::<f64>() / t.numel() as f64
            };
            out.push(ConflictError {
                id: s.post.id.clone(),
                label: s.post.label,
                predicted,
                mean_text_gate: mean(&trace.text_gate),
                mean_vision_gate: mean(&trace.vision_gate),
            });
        }
    }
    Ok(out)
}

// ── ablation suite ───────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub mean_macro_f1: f64,
    pub sd_macro_f1: f64,
    pub mean_accuracy: f64,
    pub sd_accuracy: f64,
    pub per_seed_macro_f1: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> &AblationRow {
        self.rows
            .iter()
            .find(|r| r.variant == variant)
            .expect("all variants present")
    }

    /// The headline ordering: the full model strictly beats both single
    /// -mechanism ablations on mean macro-F1.
    pub fn full_strictly_best(&self) -> bool {
        let full = self.row(Variant::Full).mean_macro_f1;
        full > self.row(Variant::NoCam).mean_macro_f1
            && full > self.row(Variant::NoCmf).mean_macro_f1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,mean_macro_f1,sd_macro_f1,mean_accuracy,sd_accuracy\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.variant, r.mean_macro_f1, r.sd_macro_f1, r.mean_accuracy, r.sd_accuracy
            ));
        }
        out
    }
}

/// Train every variant once per seed with identical configs and compare
/// on the test split.
pub fn ablation_suite(
    dataset: &Dataset,
    dims: &ModelDims,
    base_config: &TrainConfig,
    seeds: &[u64],
) -> Result<AblationTable, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::Eval(EvalError::NoSeeds));
    }
    let test = dataset.split(data::Split::Test);
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let mut f1s = Vec::with_capacity(seeds.len());
        let mut accs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let config = TrainConfig {
                seed,
                ..base_config.clone()
            };
            let outcome = train::train(model::build_model(variant, dims, seed), dataset, &config)?;
            let report = evaluate(&outcome.model, &test)?;
            f1s.push(report.macro_f1);
            accs.push(report.accuracy);
        }
        let (mean_macro_f1, sd_macro_f1) = mean_sd(&f1s);
        let (mean_accuracy, sd_accuracy) = mean_sd(&accs);
        rows.push(AblationRow {
            variant,
            mean_macro_f1,
            sd_macro_f1,
            mean_accuracy,
            sd_accuracy,
            per_seed_macro_f1: f1s,
        });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

// ── robustness sweep ─────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub kind: String,
    pub level: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurves {
    pub points: Vec<RobustnessPoint>,
}

impl RobustnessCurves {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("kind,level,macro_f1,accuracy\n");
        for p in &self.points {
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.kind, p.level, p.macro_f1, p.accuracy
            ));
        }
        out
    }

    pub fn point(&self, kind: &str, level: f64) -> Option<&RobustnessPoint> {
        self.points
            .iter()
            .find(|p| p.kind == kind && p.level == level)
    }
}

/// Evaluate under increasing perturbation levels. Level 0 of each list
/// reproduces the clean evaluation exactly.
pub fn robustness_sweep(
    model: &ModelParams,
    samples: &[&Sample],
    sigma_levels: &[f64],
    dropout_levels: &[f64],
    seed: u64,
) -> Result<RobustnessCurves, EvalError> {
    for levels in [sigma_levels, dropout_levels] {
        if !levels.contains(&0.0) {
            return Err(EvalError::MissingZeroLevel(levels.to_vec()));
        }
    }
    let mut points = Vec::new();
    let sweeps: [(&str, &[f64], fn(f64) -> Perturbation); 2] = [
        ("gaussian_visual", sigma_levels, Perturbation::GaussianVisual),
        ("token_dropout", dropout_levels, Perturbation::TokenDropout),
    ];
    for (kind, levels, make) in sweeps {
        for (level_idx, &level) in levels.iter().enumerate() {
            let perturbation = make(level);
            let stream = seeds::derive(seed, &format!("perturb/{kind}/{level_idx}"));
            let perturbed: Vec<Sample> = samples
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok(Sample {
                        post: data::perturb(
                            &s.post,
                            &perturbation,
                            seeds::derive_indexed(stream, "sample", i as u64),
                        )?,
                        split: s.split,
                        conflict: s.conflict,
                    })
                })
                .collect::<Result<_, DataError>>()?;
            let refs: Vec<&Sample> = perturbed.iter().collect();
            let report = evaluate(model, &refs)?;
            points.push(RobustnessPoint {
                kind: kind.to_string(),
                level,
                macro_f1: report.macro_f1,
                accuracy: report.accuracy,
            });
        }
    }
    Ok(RobustnessCurves { points })
}

// ── timing ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub repetitions: usize,
    pub mean_seconds_per_sample: f64,
    pub sd_seconds_per_sample: f64,
    pub mean_flops_per_sample: f64,
    pub n_samples: usize,
}

/// Analytic multiply-add count (times two) for one forward pass.
pub fn flops_per_post(dims: &ModelDims, variant: Variant, n_tokens: usize, n_regions: usize) -> u64 {
    let (t, v) = (n_tokens as u64, n_regions as u64);
    let d_raw = dims.d_raw as u64;
    let d_t = dims.d_text as u64;
    let d_v = dims.d_vision as u64;
    let d = dims.d_common as u64;
    let d_c = dims.d_context as u64;
    let c = dims.n_classes as u64;

    let mut flops = 0;
    flops += t * d_t; // position offsets
    flops += 2 * v * d_raw * d_v + 2 * v * d_v; // vision affine + relu
    flops += 2 * t * d_t * d + 2 * v * d_v * d; // shared projections
    match variant {
        Variant::NoCam => {
            flops += v * d + t * d; // mean + broadcast
        }
        _ => {
            flops += 2 * (t + v) * d; // row norms
            flops += t * v * (2 * d + 3); // cosine entries
            flops += 4 * t * v; // softmax
            flops += 2 * t * v * d; // attended mixture
        }
    }
    flops += 2 * t * (2 * d) * d_c + 2 * t * d_c; // contextual features
    if variant != Variant::NoCmf {
        flops += 2 * 2 * t * d_c + 4 * t; // gates
    }
    flops += 3 * t * d + t * d; // fusion + pooling
    flops += 2 * d * c + 4 * c; // head + softmax
    flops
}

pub fn timing_report(
    model: &ModelParams,
    samples: &[&Sample],
    repetitions: usize,
) -> Result<TimingReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let repetitions = repetitions.max(3);
    let mut per_sample = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        for s in samples {
            let _ = model::forward(model, &s.post)?;
        }
        per_sample.push(start.elapsed().as_secs_f64() / samples.len() as f64);
    }
    let (mean, sd) = mean_sd(&per_sample);
    let total_flops: u64 = samples
        .iter()
        .map(|s| flops_per_post(&model.dims, model.variant, s.post.tokens.len(), s.post.regions.len()))
        .sum();
    Ok(TimingReport {
        repetitions,
        mean_seconds_per_sample: mean,
        sd_seconds_per_sample: sd,
        mean_flops_per_sample: total_flops as f64 / samples.len() as f64,
        n_samples: samples.len(),
    })
}
