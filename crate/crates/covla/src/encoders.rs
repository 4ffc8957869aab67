//! Toy frozen-style encoders standing in for pretrained backbone features.
//!
//! Text: embedding lookup plus fixed sinusoidal position offsets.
//! Vision: learnable affine map over raw descriptors followed by relu.
//! Both are deliberately shallow; the interesting machinery lives in the
//! alignment and fusion modules downstream.

use crate::tape::{NodeId, Tape, TapeError};
use crate::tensor::Tensor;

/// Fixed sinusoidal position offsets, one row per position.
pub fn position_encoding(n_positions: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n_positions * d];
    for pos in 0..n_positions {
        for j in 0..d {
            let exponent = (j - j % 2) as f64 / d as f64;
            let angle = pos as f64 / 10_000f64.powf(exponent);
            data[pos * d + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![n_positions, d], data).expect("consistent shape")
}

/// Token features: one row per token, `table[token] + position_offset`.
pub fn encode_text_on_tape(
    tape: &mut Tape,
    embedding: NodeId,
    tokens: &[usize],
) -> Result<NodeId, TapeError> {
    let (_, d) = tape.value(embedding).dims2("encode_text")?;
    let looked_up = tape.embed_lookup(embedding, tokens)?;
    let offsets = tape.leaf(position_encoding(tokens.len(), d));
    tape.add(looked_up, offsets)
}

/// Region features: `relu(R W + b)` over raw descriptors stacked row-wise.
pub fn encode_vision_on_tape(
    tape: &mut Tape,
    weight: NodeId,
    bias: NodeId,
    regions: NodeId,
) -> Result<NodeId, TapeError> {
    let projected = tape.matmul(regions, weight)?;
    let shifted = tape.add_row_bias(projected, bias)?;
    Ok(tape.relu(shifted))
}

/// Stateless convenience wrapper over the taped text encoder.
pub fn encode_text(tokens: &[usize], embedding: &Tensor) -> Result<Tensor, TapeError> {
    let mut tape = Tape::new();
    let table = tape.leaf(embedding.clone());
    let out = encode_text_on_tape(&mut tape, table, tokens)?;
    Ok(tape.value(out).clone())
}

/// Stateless convenience wrapper over the taped vision encoder.
pub fn encode_vision(
    regions: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
) -> Result<Tensor, TapeError> {
    let mut tape = Tape::new();
    let r = tape.leaf(regions.clone());
    let w = tape.leaf(weight.clone());
    let b = tape.leaf(bias.clone());
    let out = encode_vision_on_tape(&mut tape, w, b, r)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_table_leaves_position_offsets() {
        let table = Tensor::zeros(vec![6, 4]);
        let h = encode_text(&[3], &table).unwrap();
        let expected = position_encoding(1, 4);
        assert_eq!(h, expected);
    }

    #[test]
    fn same_token_at_different_positions_differs() {
        let table = Tensor::new(vec![4, 3], (0..12).map(|i| i as f64).collect()).unwrap();
        let h = encode_text(&[2, 2], &table).unwrap();
        assert_ne!(h.row(0), h.row(1));
    }

    #[test]
    fn embedding_gradient_counts_token_occurrences() {
        // loss = sum(h_text); each table row's gradient row is (count, ...)
        let table0 = Tensor::new(vec![4, 2], vec![0.1; 8]).unwrap();
        let tokens = [1usize, 3, 1, 1];
        let mut tape = Tape::new();
        let table = tape.param("embedding", &table0);
        let h = encode_text_on_tape(&mut tape, table, &tokens).unwrap();
        let ones = tape.leaf(Tensor::new(vec![2, 1], vec![1.0; 2]).unwrap());
        let rowsum = tape.matmul(h, ones).unwrap();
        let s = tape.mean_rows(rowsum).unwrap();
        let scaled = tape.reshape(s, vec![]).unwrap();
        let grads = tape.backward(scaled).unwrap();
        let g = grads.get("embedding").unwrap();
        // mean over 4 tokens, so each occurrence contributes 1/4
        let expect = [0.0, 0.0, 0.75, 0.75, 0.0, 0.0, 0.25, 0.25];
        for (a, e) in g.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12, "{a} vs {e}");
        }
    }

    #[test]
    fn zero_vision_params_give_zero_features() {
        let regions = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 1.0]).unwrap();
        let h = encode_vision(&regions, &Tensor::zeros(vec![3, 4]), &Tensor::zeros(vec![4])).unwrap();
        assert_eq!(h, Tensor::zeros(vec![2, 4]));
    }

    #[test]
    fn identity_map_passes_nonnegative_input_through() {
        let regions = Tensor::new(vec![2, 2], vec![1.0, 2.0, 0.0, 3.0]).unwrap();
        let eye = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let h = encode_vision(&regions, &eye, &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(h, regions);
    }

    #[test]
    fn out_of_vocab_rejected() {
        let table = Tensor::zeros(vec![4, 2]);
        assert!(encode_text(&[4], &table).is_err());
    }

    #[test]
    fn vision_affine_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, ObjectiveProbe};
        use crate::params::ParamSet;
        use rand::{Rng, SeedableRng};

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut rand_t = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let regions = rand_t(vec![3, 4]);
        let mut params = ParamSet::new();
        params.insert("weight", rand_t(vec![4, 5]));
        params.insert("bias", rand_t(vec![5]));

        let build = |p: &ParamSet| -> (Tape, crate::tape::NodeId) {
            let mut tape = Tape::new();
            let w = tape.param("weight", p.get("weight").unwrap());
            let b = tape.param("bias", p.get("bias").unwrap());
            let r = tape.leaf(regions.clone());
            let h = encode_vision_on_tape(&mut tape, w, b, r).unwrap();
            let loss = tape.sum_squares(h);
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
