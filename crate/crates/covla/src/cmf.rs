//! Gated cross-modal fusion and the classification head.
//!
//! Each text position gets one sigmoid gate per modality, computed from
//! its contextual feature. Fusion is the gated sum of the projected text
//! row and the attended visual row; the fused rows are mean-pooled and
//! classified with a softmax layer. The two gates are independent
//! sigmoids, not a distribution over modalities.

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct CmfParamNodes {
    pub text_gate_weight: NodeId,
    pub vision_gate_weight: NodeId,
    pub head_weight: NodeId,
    pub head_bias: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct CmfNodes {
    pub text_gate: NodeId,
    pub vision_gate: NodeId,
    pub fused: NodeId,
    pub pooled: NodeId,
    pub probs: NodeId,
}

/// Intermediates of one fusion pass; `pooled` and `probs` are squeezed
/// to rank-1 vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub text_gate: Tensor,
    pub vision_gate: Tensor,
    pub fused: Tensor,
    pub pooled: Tensor,
    pub probs: Tensor,
}

/// One sigmoid gate per text position per modality.
pub fn modality_gates(
    tape: &mut Tape,
    context: NodeId,
    text_gate_weight: NodeId,
    vision_gate_weight: NodeId,
) -> Result<(NodeId, NodeId), TapeError> {
    let text_logits = tape.matmul(context, text_gate_weight)?;
    let vision_logits = tape.matmul(context, vision_gate_weight)?;
    Ok((tape.sigmoid(text_logits), tape.sigmoid(vision_logits)))
}

/// Row i of the output is `text_gate_i * z_text_i + vision_gate_i * attended_i`.
pub fn fuse(
    tape: &mut Tape,
    text_gate: NodeId,
    vision_gate: NodeId,
    projected_text: NodeId,
    attended_vision: NodeId,
) -> Result<NodeId, TapeError> {
    let gated_text = tape.scale_rows(projected_text, text_gate)?;
    let gated_vision = tape.scale_rows(attended_vision, vision_gate)?;
    tape.add(gated_text, gated_vision)
}

/// Mean over text positions; one vector per post.
pub fn pool(tape: &mut Tape, fused: NodeId) -> Result<NodeId, TapeError> {
    tape.mean_rows(fused)
}

/// Softmax classification over the pooled feature.
pub fn classify(
    tape: &mut Tape,
    pooled: NodeId,
    head_weight: NodeId,
    head_bias: NodeId,
) -> Result<NodeId, TapeError> {
    let logits = tape.matmul(pooled, head_weight)?;
    let shifted = tape.add_row_bias(logits, head_bias)?;
    tape.row_softmax(shifted)
}

/// Index of the largest probability; ties resolve to the lowest index.
pub fn predict_label(probs: &Tensor) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in probs.data().iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Full fusion pass from contextual features to class probabilities.
pub fn forward(
    tape: &mut Tape,
    context: NodeId,
    projected_text: NodeId,
    attended_vision: NodeId,
    params: &CmfParamNodes,
) -> Result<CmfNodes, TapeError> {
    let (text_gate, vision_gate) = modality_gates(
        tape,
        context,
        params.text_gate_weight,
        params.vision_gate_weight,
    )?;
    forward_with_gates(
        tape,
        text_gate,
        vision_gate,
        projected_text,
        attended_vision,
        params.head_weight,
        params.head_bias,
    )
}

/// Fusion pass with externally supplied gates (used by the fixed-gate
/// model variant).
pub fn forward_with_gates(
    tape: &mut Tape,
    text_gate: NodeId,
    vision_gate: NodeId,
    projected_text: NodeId,
    attended_vision: NodeId,
    head_weight: NodeId,
    head_bias: NodeId,
) -> Result<CmfNodes, TapeError> {
    let fused = fuse(tape, text_gate, vision_gate, projected_text, attended_vision)?;
    let pooled = pool(tape, fused)?;
    let probs = classify(tape, pooled, head_weight, head_bias)?;
    Ok(CmfNodes {
        text_gate,
        vision_gate,
        fused,
        pooled,
        probs,
    })
}

impl FusionTrace {
    pub fn from_tape(tape: &Tape, nodes: &CmfNodes) -> Self {
        let pooled2 = tape.value(nodes.pooled);
        let probs2 = tape.value(nodes.probs);
        FusionTrace {
            text_gate: tape.value(nodes.text_gate).clone(),
            vision_gate: tape.value(nodes.vision_gate).clone(),
            fused: tape.value(nodes.fused).clone(),
            pooled: Tensor::vector(pooled2.data().to_vec()),
            probs: Tensor::vector(probs2.data().to_vec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_gate_weights_give_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let ctx = tape.leaf(rand_tensor(&mut rng, vec![3, 4]));
        let wt = tape.leaf(Tensor::zeros(vec![4, 1]));
        let wv = tape.leaf(Tensor::zeros(vec![4, 1]));
        let (gt, gv) = modality_gates(&mut tape, ctx, wt, wv).unwrap();
        assert!(tape.value(gt).data().iter().all(|&g| g == 0.5));
        assert!(tape.value(gv).data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn zero_context_gives_half_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let ctx = tape.leaf(Tensor::zeros(vec![2, 4]));
        let wt = tape.leaf(rand_tensor(&mut rng, vec![4, 1]));
        let wv = tape.leaf(rand_tensor(&mut rng, vec![4, 1]));
        let (gt, gv) = modality_gates(&mut tape, ctx, wt, wv).unwrap();
        assert!(tape.value(gt).data().iter().all(|&g| g == 0.5));
        assert!(tape.value(gv).data().iter().all(|&g| g == 0.5));
    }

    #[test]
    fn gate_closed_form() {
        // sigmoid on logits [0, ln 3] -> [0.5, 0.75]
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::new(vec![2, 1], vec![0.0, 3.0f64.ln()]).unwrap());
        let g = tape.sigmoid(logits);
        assert!((tape.value(g).data()[0] - 0.5).abs() < 1e-15);
        assert!((tape.value(g).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fusion_limits() {
        let zt = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let hv = Tensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();

        // text-only limit: inject gates directly
        let mut tape = Tape::new();
        let gt = tape.leaf(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let gv = tape.leaf(Tensor::new(vec![2, 1], vec![0.0, 0.0]).unwrap());
        let ztn = tape.leaf(zt.clone());
        let hvn = tape.leaf(hv.clone());
        let f = fuse(&mut tape, gt, gv, ztn, hvn).unwrap();
        assert_eq!(tape.value(f), &zt);

        // agreement case: equal inputs under half/half gates
        let mut tape = Tape::new();
        let gt = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        let gv = tape.leaf(Tensor::new(vec![2, 1], vec![0.5, 0.5]).unwrap());
        let ztn = tape.leaf(zt.clone());
        let ztn2 = tape.leaf(zt.clone());
        let f = fuse(&mut tape, gt, gv, ztn, ztn2).unwrap();
        assert_eq!(tape.value(f), &zt);
    }

    #[test]
    fn fusion_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let zt = rand_tensor(&mut rng, vec![3, 4]);
        let hv = rand_tensor(&mut rng, vec![3, 4]);
        let gt = rand_tensor(&mut rng, vec![3, 1]).map(|v| 1.0 / (1.0 + (-v).exp()));
        let gv = rand_tensor(&mut rng, vec![3, 1]).map(|v| 1.0 / (1.0 + (-v).exp()));

        let mut tape = Tape::new();
        let gtn = tape.leaf(gt.clone());
        let gvn = tape.leaf(gv.clone());
        let ztn = tape.leaf(zt.clone());
        let hvn = tape.leaf(hv.clone());
        let f = fuse(&mut tape, gtn, gvn, ztn, hvn).unwrap();

        for i in 0..3 {
            for k in 0..4 {
                let expect =
                    gt.data()[i] * zt.data()[i * 4 + k] + gv.data()[i] * hv.data()[i * 4 + k];
                let got = tape.value(f).data()[i * 4 + k];
                assert!((got - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fusion_is_linear_in_features_for_fixed_gates() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let zt = rand_tensor(&mut rng, vec![3, 4]);
        let hv = rand_tensor(&mut rng, vec![3, 4]);
        let gates = rand_tensor(&mut rng, vec![3, 1]).map(|v| 1.0 / (1.0 + (-v).exp()));
        let scale = 2.75;

        let run = |zt: &Tensor, hv: &Tensor| -> Tensor {
            let mut tape = Tape::new();
            let gt = tape.leaf(gates.clone());
            let gv = tape.leaf(gates.clone());
            let a = tape.leaf(zt.clone());
            let b = tape.leaf(hv.clone());
            let f = fuse(&mut tape, gt, gv, a, b).unwrap();
            tape.value(f).clone()
        };

        let base = run(&zt, &hv);
        let scaled = run(&zt.map(|v| v * scale), &hv.map(|v| v * scale));
        assert!(scaled.max_abs_diff(&base.map(|v| v * scale)) < 1e-12);
    }

    #[test]
    fn pool_reduces_rows() {
        let mut tape = Tape::new();
        let single = tape.leaf(Tensor::new(vec![1, 3], vec![4.0, 5.0, 6.0]).unwrap());
        let p = pool(&mut tape, single).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0, 5.0, 6.0]);

        let mut tape = Tape::new();
        let twin = tape.leaf(Tensor::new(vec![2, 2], vec![7.0, 8.0, 7.0, 8.0]).unwrap());
        let p = pool(&mut tape, twin).unwrap();
        assert_eq!(tape.value(p).data(), &[7.0, 8.0]);

        let mut tape = Tape::new();
        let rows = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 3.0, 3.0, 5.0]).unwrap());
        let p = pool(&mut tape, rows).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 4.0]);
    }

    #[test]
    fn zero_head_gives_uniform_distribution() {
        let mut tape = Tape::new();
        let pooled = tape.leaf(Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let w = tape.leaf(Tensor::zeros(vec![3, 5]));
        let b = tape.leaf(Tensor::zeros(vec![5]));
        let y = classify(&mut tape, pooled, w, b).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn head_bias_closed_form() {
        let mut tape = Tape::new();
        let pooled = tape.leaf(Tensor::new(vec![1, 2], vec![0.7, -0.7]).unwrap());
        let w = tape.leaf(Tensor::zeros(vec![2, 2]));
        let b = tape.leaf(Tensor::new(vec![2], vec![0.0, 3.0f64.ln()]).unwrap());
        let y = classify(&mut tape, pooled, w, b).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn logit_shift_leaves_prediction_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pooled = rand_tensor(&mut rng, vec![1, 3]);
        let w = rand_tensor(&mut rng, vec![3, 4]);
        let b = rand_tensor(&mut rng, vec![4]);
        let shifted_b = b.map(|v| v + 11.5);

        let run = |bias: &Tensor| -> (Tensor, usize) {
            let mut tape = Tape::new();
            let p = tape.leaf(pooled.clone());
            let wn = tape.leaf(w.clone());
            let bn = tape.leaf(bias.clone());
            let y = classify(&mut tape, p, wn, bn).unwrap();
            let probs = tape.value(y).clone();
            let label = predict_label(&probs);
            (probs, label)
        };
        let (y1, l1) = run(&b);
        let (y2, l2) = run(&shifted_b);
        assert_eq!(l1, l2);
        assert!(y1.max_abs_diff(&y2) < 1e-12);
    }

    #[test]
    fn predict_label_argmax_and_ties() {
        assert_eq!(predict_label(&Tensor::vector(vec![0.1, 0.7, 0.2])), 1);
        assert_eq!(predict_label(&Tensor::vector(vec![0.5, 0.5])), 0);
        assert_eq!(predict_label(&Tensor::vector(vec![0.2; 5])), 0);
    }

    #[test]
    fn gates_stay_inside_unit_interval_and_probs_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let n_t = rng.gen_range(1..5);
            let ctx = rand_tensor(&mut rng, vec![n_t, 6]);
            let zt = rand_tensor(&mut rng, vec![n_t, 4]);
            let hv = rand_tensor(&mut rng, vec![n_t, 4]);
            let mut tape = Tape::new();
            let params = CmfParamNodes {
                text_gate_weight: tape.leaf(rand_tensor(&mut rng, vec![6, 1])),
                vision_gate_weight: tape.leaf(rand_tensor(&mut rng, vec![6, 1])),
                head_weight: tape.leaf(rand_tensor(&mut rng, vec![4, 5])),
                head_bias: tape.leaf(rand_tensor(&mut rng, vec![5])),
            };
            let ctxn = tape.leaf(ctx);
            let ztn = tape.leaf(zt);
            let hvn = tape.leaf(hv);
            let nodes = forward(&mut tape, ctxn, ztn, hvn, &params).unwrap();
            let trace = FusionTrace::from_tape(&tape, &nodes);
            assert!(trace.text_gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
            assert!(trace.vision_gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
            let sum: f64 = trace.probs.data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(trace.probs.data().iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn full_cmf_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, ObjectiveProbe};
        use crate::params::ParamSet;

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ctx = rand_tensor(&mut rng, vec![3, 4]);
        let zt = rand_tensor(&mut rng, vec![3, 5]);
        let hv = rand_tensor(&mut rng, vec![3, 5]);
        let mut params = ParamSet::new();
        params.insert("text_gate_weight", rand_tensor(&mut rng, vec![4, 1]));
        params.insert("vision_gate_weight", rand_tensor(&mut rng, vec![4, 1]));
        params.insert("head_weight", rand_tensor(&mut rng, vec![5, 3]));
        params.insert("head_bias", rand_tensor(&mut rng, vec![3]));

        let build = |p: &ParamSet| -> (Tape, crate::tape::NodeId) {
            let mut tape = Tape::new();
            let nodes = CmfParamNodes {
                text_gate_weight: tape.param("text_gate_weight", p.get("text_gate_weight").unwrap()),
                vision_gate_weight: tape.param("vision_gate_weight", p.get("vision_gate_weight").unwrap()),
                head_weight: tape.param("head_weight", p.get("head_weight").unwrap()),
                head_bias: tape.param("head_bias", p.get("head_bias").unwrap()),
            };
            let ctxn = tape.leaf(ctx.clone());
            let ztn = tape.leaf(zt.clone());
            let hvn = tape.leaf(hv.clone());
            let out = forward(&mut tape, ctxn, ztn, hvn, &nodes).unwrap();
            let loss = tape.nll(out.probs, 1).unwrap();
            (tape, loss)
        };

        let (mut tape, loss) = build(&params);
        let analytic = tape.backward(loss).unwrap();
        let report = grad_check(
            |p| {
                let (tape, loss) = build(p);
                ObjectiveProbe {
                    value: tape.value(loss).item(),
                    relu_inputs: tape.relu_inputs(),
                }
            },
            &params,
            &analytic,
            1e-5,
        );
        assert!(report.max_rel_error < 1e-4, "err {}", report.max_rel_error);
    }
}
