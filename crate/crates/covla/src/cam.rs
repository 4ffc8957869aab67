//! Contextual alignment: project both modalities into a shared space,
//! score every text token against every visual region by cosine
//! similarity, attend over regions per token, and produce contextual
//! features from the concatenated pair.
//!
//! The shared projection exists because the raw text and vision widths
//! differ; the similarity inner product needs one dimension.

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

/// Tape handles for the parameters this module owns.
#[derive(Debug, Clone, Copy)]
pub struct CamParamNodes {
    pub text_projection: NodeId,
    pub vision_projection: NodeId,
    pub context_weight: NodeId,
    pub context_bias: NodeId,
}

/// Tape handles for every intermediate of one alignment pass.
#[derive(Debug, Clone, Copy)]
pub struct CamNodes {
    pub projected_text: NodeId,
    pub projected_vision: NodeId,
    pub similarity: NodeId,
    pub attention: NodeId,
    pub attended_vision: NodeId,
    pub context: NodeId,
}

/// All intermediates of one alignment pass as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CamTrace {
    pub projected_text: Tensor,
    pub projected_vision: Tensor,
    pub similarity: Tensor,
    pub attention: Tensor,
    pub attended_vision: Tensor,
    pub context: Tensor,
}

/// Project text and vision features into the shared alignment space.
pub fn project_common(
    tape: &mut Tape,
    text_features: NodeId,
    vision_features: NodeId,
    text_projection: NodeId,
    vision_projection: NodeId,
) -> Result<(NodeId, NodeId), TapeError> {
    let z_text = tape.matmul(text_features, text_projection)?;
    let z_vision = tape.matmul(vision_features, vision_projection)?;
    Ok((z_text, z_vision))
}

/// Pairwise cosine similarity between text rows and vision rows.
pub fn similarity_matrix(
    tape: &mut Tape,
    projected_text: NodeId,
    projected_vision: NodeId,
) -> Result<NodeId, TapeError> {
    tape.cosine_similarity(projected_text, projected_vision)
}

/// Softmax over the visual regions for each text token.
pub fn attention_weights(tape: &mut Tape, similarity: NodeId) -> Result<NodeId, TapeError> {
    tape.row_softmax(similarity)
}

/// Attention-weighted mixture of visual rows, one per text token.
pub fn attend_visual(
    tape: &mut Tape,
    attention: NodeId,
    projected_vision: NodeId,
) -> Result<NodeId, TapeError> {
    tape.matmul(attention, projected_vision)
}

/// `relu([z_text ; attended] W + b)` row-wise.
pub fn contextual_features(
    tape: &mut Tape,
    projected_text: NodeId,
    attended_vision: NodeId,
    context_weight: NodeId,
    context_bias: NodeId,
) -> Result<NodeId, TapeError> {
    let joint = tape.concat_cols(projected_text, attended_vision)?;
    let lin = tape.matmul(joint, context_weight)?;
    let shifted = tape.add_row_bias(lin, context_bias)?;
    Ok(tape.relu(shifted))
}

/// Full alignment pass, keeping every intermediate.
pub fn forward(
    tape: &mut Tape,
    text_features: NodeId,
    vision_features: NodeId,
    params: &CamParamNodes,
) -> Result<CamNodes, TapeError> {
    let (projected_text, projected_vision) = project_common(
        tape,
        text_features,
        vision_features,
        params.text_projection,
        params.vision_projection,
    )?;
    let similarity = similarity_matrix(tape, projected_text, projected_vision)?;
    let attention = attention_weights(tape, similarity)?;
    let attended_vision = attend_visual(tape, attention, projected_vision)?;
    let context = contextual_features(
        tape,
        projected_text,
        attended_vision,
        params.context_weight,
        params.context_bias,
    )?;
    Ok(CamNodes {
        projected_text,
        projected_vision,
        similarity,
        attention,
        attended_vision,
        context,
    })
}

impl CamTrace {
    pub fn from_tape(tape: &Tape, nodes: &CamNodes) -> Self {
        CamTrace {
            projected_text: tape.value(nodes.projected_text).clone(),
            projected_vision: tape.value(nodes.projected_vision).clone(),
            similarity: tape.value(nodes.similarity).clone(),
            attention: tape.value(nodes.attention).clone(),
            attended_vision: tape.value(nodes.attended_vision).clone(),
            context: tape.value(nodes.context).clone(),
        }
    }
}
