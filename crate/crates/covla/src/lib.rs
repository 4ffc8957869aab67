//! Discriminative multimodal classifier for semantic location labels.
//!
//! Text tokens and visual region descriptors are encoded by shallow
//! learnable encoders, aligned token-to-region with cosine attention,
//! fused through per-token sigmoid modality gates, and classified with a
//! softmax head. Training minimizes cross-entropy plus a squared-distance
//! anchor toward a frozen initialization snapshot. Everything runs on a
//! small float64 tensor kernel with tape-based reverse-mode gradients,
//! validated against a central-difference oracle.
//!
//! The crate also ships a seeded synthetic benchmark with controllable
//! contextual ambiguity, modality dominance, and cross-modal conflict,
//! plus the evaluation harness (metrics, ablations, robustness sweeps,
//! timing) the experiments are built on.

pub mod cam;
pub mod cmf;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod fsutil;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod params;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::{Dataset, DatasetSpec, MultimodalPost, Perturbation, Sample, Split};
pub use gradcheck::GradCheckReport;
pub use metrics::MetricsReport;
pub use model::{build_model, ForwardTrace, ModelDims, ModelParams, Variant};
pub use params::ParamSet;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{TrainConfig, TrainOutcome};
