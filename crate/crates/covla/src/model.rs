//! Model assembly: named parameters, ablation variants, the end-to-end
//! forward pass, and checkpoint serialization.
//!
//! Variants remove exactly one mechanism while keeping parameter counts
//! comparable: `no_cam` replaces the attention-weighted visual mixture by
//! the unweighted mean of the projected regions; `no_cmf` pins both
//! modality gates at 0.5.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cam::{self, CamParamNodes};
use crate::cmf::{self, CmfParamNodes};
use crate::data::MultimodalPost;
use crate::encoders;
use crate::fsutil;
use crate::params::ParamSet;
use crate::seeds;
use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("unknown model variant '{0}' (expected full, no_cam, or no_cmf)")]
    UnknownVariant(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoCam,
    NoCmf,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Full, Variant::NoCam, Variant::NoCmf];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCam => "no_cam",
            Variant::NoCmf => "no_cmf",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Variant::Full),
            "no_cam" => Ok(Variant::NoCam),
            "no_cmf" => Ok(Variant::NoCmf),
            other => Err(ModelError::UnknownVariant(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub d_raw: usize,
    pub d_text: usize,
    pub d_vision: usize,
    /// Shared alignment dimension both modalities project into.
    pub d_common: usize,
    /// Width of the contextual features feeding the gates.
    pub d_context: usize,
    pub n_classes: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            vocab_size: 120,
            d_raw: 16,
            d_text: 32,
            d_vision: 24,
            d_common: 32,
            d_context: 16,
            n_classes: 5,
        }
    }
}

pub mod names {
    pub const EMBEDDING: &str = "text_encoder.embedding";
    pub const VISION_WEIGHT: &str = "vision_encoder.weight";
    pub const VISION_BIAS: &str = "vision_encoder.bias";
    pub const TEXT_PROJECTION: &str = "cam.text_projection";
    pub const VISION_PROJECTION: &str = "cam.vision_projection";
    pub const CONTEXT_WEIGHT: &str = "cam.context_weight";
    pub const CONTEXT_BIAS: &str = "cam.context_bias";
    pub const TEXT_GATE: &str = "cmf.text_gate_weight";
    pub const VISION_GATE: &str = "cmf.vision_gate_weight";
    pub const HEAD_WEIGHT: &str = "classifier.weight";
    pub const HEAD_BIAS: &str = "classifier.bias";

    pub const ENCODER_NAMES: [&str; 3] = [EMBEDDING, VISION_WEIGHT, VISION_BIAS];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub variant: Variant,
    pub dims: ModelDims,
    pub seed: u64,
    pub params: ParamSet,
}

fn glorot_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect(),
    )
    .expect("consistent shape")
}

/// Build a freshly initialized model. Weights are Glorot-uniform, biases
/// zero; every tensor draws from its own name-derived stream so shared
/// parameters are identical across variants at the same seed.
pub fn build_model(variant: Variant, dims: &ModelDims, seed: u64) -> ModelParams {
    let mut params = ParamSet::new();
    let weight = |name: &str, rows: usize, cols: usize| {
        let mut rng = seeds::rng(seeds::derive(seed, &format!("init/{name}")));
        let t = glorot_uniform(&mut rng, rows, cols);
        (name.to_string(), t)
    };

    let entries = [
        weight(names::EMBEDDING, dims.vocab_size, dims.d_text),
        weight(names::VISION_WEIGHT, dims.d_raw, dims.d_vision),
        weight(names::TEXT_PROJECTION, dims.d_text, dims.d_common),
        weight(names::VISION_PROJECTION, dims.d_vision, dims.d_common),
        weight(names::CONTEXT_WEIGHT, 2 * dims.d_common, dims.d_context),
        weight(names::HEAD_WEIGHT, dims.d_common, dims.n_classes),
    ];
    for (name, t) in entries {
        params.insert(name, t);
    }
    params.insert(names::VISION_BIAS, Tensor::zeros(vec![dims.d_vision]));
    params.insert(names::CONTEXT_BIAS, Tensor::zeros(vec![dims.d_context]));
    params.insert(names::HEAD_BIAS, Tensor::zeros(vec![dims.n_classes]));

    if variant != Variant::NoCmf {
        for name in [names::TEXT_GATE, names::VISION_GATE] {
            let (n, t) = weight(name, dims.d_context, 1);
            params.insert(n, t);
        }
    }

    ModelParams {
        variant,
        dims: dims.clone(),
        seed,
        params,
    }
}

/// How parameters enter a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamMode {
    /// All parameters trainable.
    Trainable,
    /// Encoder parameters enter as constants; the rest train.
    FreezeEncoders,
    /// Everything enters as constants (inference, snapshots).
    Frozen,
}

/// Tape handles for one registration of a model's parameters.
pub struct ParamNodes {
    pub embedding: NodeId,
    pub vision_weight: NodeId,
    pub vision_bias: NodeId,
    pub cam: CamParamNodes,
    pub gates: Option<(NodeId, NodeId)>,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

impl ParamNodes {
    pub fn register(tape: &mut Tape, model: &ModelParams, mode: ParamMode) -> Result<Self, ModelError> {
        let mut node = |name: &str| -> Result<NodeId, ModelError> {
            let value = model
                .params
                .get(name)
                .ok_or_else(|| ModelError::MissingParam(name.to_string()))?;
            let frozen = match mode {
                ParamMode::Trainable => false,
                ParamMode::Frozen => true,
                ParamMode::FreezeEncoders => names::ENCODER_NAMES.contains(&name),
            };
            Ok(if frozen {
                tape.leaf(value.clone())
            } else {
                tape.param(name, value)
            })
        };

        let gates = if model.variant == Variant::NoCmf {
            None
        } else {
            Some((node(names::TEXT_GATE)?, node(names::VISION_GATE)?))
        };

        Ok(ParamNodes {
            embedding: node(names::EMBEDDING)?,
            vision_weight: node(names::VISION_WEIGHT)?,
            vision_bias: node(names::VISION_BIAS)?,
            cam: CamParamNodes {
                text_projection: node(names::TEXT_PROJECTION)?,
                vision_projection: node(names::VISION_PROJECTION)?,
                context_weight: node(names::CONTEXT_WEIGHT)?,
                context_bias: node(names::CONTEXT_BIAS)?,
            },
            gates,
            head_weight: node(names::HEAD_WEIGHT)?,
            head_bias: node(names::HEAD_BIAS)?,
        })
    }
}

/// Tape handles for every intermediate of one end-to-end pass.
pub struct TraceNodes {
    pub text_features: NodeId,
    pub vision_features: NodeId,
    pub projected_text: NodeId,
    pub projected_vision: NodeId,
    pub similarity: Option<NodeId>,
    pub attention: Option<NodeId>,
    pub attended_vision: NodeId,
    pub context: NodeId,
    pub text_gate: NodeId,
    pub vision_gate: NodeId,
    pub fused: NodeId,
    pub pooled: NodeId,
    pub probs: NodeId,
}

/// Every intermediate of one forward pass as plain tensors. `similarity`
/// and `attention` are absent for the mean-substitute variant; `pooled`
/// and `probs` are rank-1 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub text_features: Tensor,
    pub vision_features: Tensor,
    pub projected_text: Tensor,
    pub projected_vision: Tensor,
    pub similarity: Option<Tensor>,
    pub attention: Option<Tensor>,
    pub attended_vision: Tensor,
    pub context: Tensor,
    pub text_gate: Tensor,
    pub vision_gate: Tensor,
    pub fused: Tensor,
    pub pooled: Tensor,
    pub probs: Tensor,
}

impl ForwardTrace {
    pub fn from_tape(tape: &Tape, nodes: &TraceNodes) -> Self {
        let squeeze = |id: NodeId| Tensor::vector(tape.value(id).data().to_vec());
        ForwardTrace {
            text_features: tape.value(nodes.text_features).clone(),
            vision_features: tape.value(nodes.vision_features).clone(),
            projected_text: tape.value(nodes.projected_text).clone(),
            projected_vision: tape.value(nodes.projected_vision).clone(),
            similarity: nodes.similarity.map(|id| tape.value(id).clone()),
            attention: nodes.attention.map(|id| tape.value(id).clone()),
            attended_vision: tape.value(nodes.attended_vision).clone(),
            context: tape.value(nodes.context).clone(),
            text_gate: tape.value(nodes.text_gate).clone(),
            vision_gate: tape.value(nodes.vision_gate).clone(),
            fused: tape.value(nodes.fused).clone(),
            pooled: squeeze(nodes.pooled),
            probs: squeeze(nodes.probs),
        }
    }

    pub fn predicted_label(&self) -> usize {
        cmf::predict_label(&self.probs)
    }
}

/// End-to-end pass over one post, recording on the given tape.
pub fn forward_on_tape(
    tape: &mut Tape,
    nodes: &ParamNodes,
    variant: Variant,
    post: &MultimodalPost,
) -> Result<TraceNodes, ModelError> {
    let n_tokens = post.tokens.len();
    let regions = Tensor::from_rows(&post.regions)?;
    let regions = tape.leaf(regions);

    let text_features = encoders::encode_text_on_tape(tape, nodes.embedding, &post.tokens)?;
    let vision_features =
        encoders::encode_vision_on_tape(tape, nodes.vision_weight, nodes.vision_bias, regions)?;

    let (projected_text, projected_vision) = cam::project_common(
        tape,
        text_features,
        vision_features,
        nodes.cam.text_projection,
        nodes.cam.vision_projection,
    )?;

    let (similarity, attention, attended_vision) = match variant {
        Variant::NoCam => {
            let mean_vision = tape.mean_rows(projected_vision)?;
            let attended = tape.repeat_rows(mean_vision, n_tokens)?;
            (None, None, attended)
        }
        _ => {
            let similarity = cam::similarity_matrix(tape, projected_text, projected_vision)?;
            let attention = cam::attention_weights(tape, similarity)?;
            let attended = cam::attend_visual(tape, attention, projected_vision)?;
            (Some(similarity), Some(attention), attended)
        }
    };

    let context = cam::contextual_features(
        tape,
        projected_text,
        attended_vision,
        nodes.cam.context_weight,
        nodes.cam.context_bias,
    )?;

    let fusion = match nodes.gates {
        Some((text_gate_weight, vision_gate_weight)) => {
            let params = CmfParamNodes {
                text_gate_weight,
                vision_gate_weight,
                head_weight: nodes.head_weight,
                head_bias: nodes.head_bias,
            };
            cmf::forward(tape, context, projected_text, attended_vision, &params)?
        }
        None => {
            // fixed-gate variant: both gates pinned at 0.5
            let half = Tensor::new(vec![n_tokens, 1], vec![0.5; n_tokens]).expect("shape");
            let text_gate = tape.leaf(half.clone());
            let vision_gate = tape.leaf(half);
            cmf::forward_with_gates(
                tape,
                text_gate,
                vision_gate,
                projected_text,
                attended_vision,
                nodes.head_weight,
                nodes.head_bias,
            )?
        }
    };

    Ok(TraceNodes {
        text_features,
        vision_features,
        projected_text,
        projected_vision,
        similarity,
        attention,
        attended_vision,
        context,
        text_gate: fusion.text_gate,
        vision_gate: fusion.vision_gate,
        fused: fusion.fused,
        pooled: fusion.pooled,
        probs: fusion.probs,
    })
}

/// Inference pass over one post with fixed parameters.
pub fn forward(model: &ModelParams, post: &MultimodalPost) -> Result<ForwardTrace, ModelError> {
    let mut tape = Tape::new();
    let nodes = ParamNodes::register(&mut tape, model, ParamMode::Frozen)?;
    let trace = forward_on_tape(&mut tape, &nodes, model.variant, post)?;
    Ok(ForwardTrace::from_tape(&tape, &trace))
}

// ── checkpoints ──────────────────────────────────────────────────────

pub fn checkpoint_json(model: &ModelParams) -> Result<String, ModelError> {
    let mut s = serde_json::to_string(model)?;
    s.push('\n');
    Ok(s)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> Result<(), ModelError> {
    fsutil::atomic_write(path, checkpoint_json(model)?.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, DatasetSpec};

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab_size: 20,
            d_raw: 5,
            d_text: 8,
            d_vision: 7,
            d_common: 8,
            d_context: 8,
            n_classes: 5,
        }
    }

    fn sample_post() -> MultimodalPost {
        let spec = DatasetSpec {
            n_samples: 10,
            vocab_size: 20,
            d_raw: 5,
            n_tokens_range: (3, 3),
            n_regions_range: (4, 4),
            seed: 3,
            ..DatasetSpec::default()
        };
        generate_dataset(&spec).unwrap().dataset.samples[0].post.clone()
    }

    #[test]
    fn build_is_deterministic_per_seed() {
        let dims = tiny_dims();
        let a = build_model(Variant::Full, &dims, 42);
        let b = build_model(Variant::Full, &dims, 42);
        assert_eq!(a, b);
        let c = build_model(Variant::Full, &dims, 43);
        assert_ne!(a, c);
    }

    #[test]
    fn variants_share_initialization_of_common_params() {
        let dims = tiny_dims();
        let full = build_model(Variant::Full, &dims, 5);
        let no_cam = build_model(Variant::NoCam, &dims, 5);
        let no_cmf = build_model(Variant::NoCmf, &dims, 5);
        for name in [names::EMBEDDING, names::CONTEXT_WEIGHT, names::HEAD_WEIGHT] {
            assert_eq!(full.params.get(name), no_cam.params.get(name));
            assert_eq!(full.params.get(name), no_cmf.params.get(name));
        }
        assert!(no_cmf.params.get(names::TEXT_GATE).is_none());
        assert!(full.params.get(names::TEXT_GATE).is_some());
    }

    #[test]
    fn initialization_within_glorot_bounds_and_biases_zero() {
        let dims = tiny_dims();
        let model = build_model(Variant::Full, &dims, 1);
        let w = model.params.get(names::CONTEXT_WEIGHT).unwrap();
        let limit = (6.0 / (2 * dims.d_common + dims.d_context) as f64).sqrt();
        assert!(w.data().iter().all(|&v| v.abs() < limit));
        assert_eq!(
            model.params.get(names::HEAD_BIAS).unwrap(),
            &Tensor::zeros(vec![dims.n_classes])
        );
    }

    #[test]
    fn no_cmf_trace_has_constant_half_gates() {
        let model = build_model(Variant::NoCmf, &tiny_dims(), 2);
        let trace = forward(&model, &sample_post()).unwrap();
        assert!(trace.text_gate.data().iter().all(|&g| g == 0.5));
        assert!(trace.vision_gate.data().iter().all(|&g| g == 0.5));
        assert!(trace.similarity.is_some());
    }

    #[test]
    fn no_cam_trace_drops_attention_and_averages_regions() {
        let model = build_model(Variant::NoCam, &tiny_dims(), 2);
        let trace = forward(&model, &sample_post()).unwrap();
        assert!(trace.similarity.is_none());
        assert!(trace.attention.is_none());
        let first = trace.attended_vision.row(0).to_vec();
        for i in 1..trace.attended_vision.shape()[0] {
            assert_eq!(trace.attended_vision.row(i), first.as_slice());
        }
    }

    #[test]
    fn full_trace_is_complete_and_normalized() {
        let model = build_model(Variant::Full, &tiny_dims(), 9);
        let trace = forward(&model, &sample_post()).unwrap();
        let sum: f64 = trace.probs.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(trace.probs.shape(), &[5]);
        assert_eq!(trace.pooled.shape(), &[8]);
        assert!(trace.attention.unwrap().all_finite());
        assert!(trace.fused.all_finite());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_faithful() {
        let dir = tempfile::tempdir().unwrap();
        let model = build_model(Variant::Full, &tiny_dims(), 77);
        let path = dir.path().join("checkpoint.json");
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
        // and the serialized form itself is stable
        assert_eq!(
            checkpoint_json(&model).unwrap(),
            checkpoint_json(&loaded).unwrap()
        );
    }

    #[test]
    fn unknown_variant_string_rejected() {
        assert!("cam_only".parse::<Variant>().is_err());
        assert_eq!("no_cam".parse::<Variant>().unwrap(), Variant::NoCam);
    }
}
