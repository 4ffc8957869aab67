//! Dense float64 tensors in row-major order, plus the small set of
//! numeric kernels the whole model is composed from.
//!
//! Tensors are immutable values once constructed: every kernel allocates
//! its output. At the scale this crate targets (tens of tokens, a handful
//! of visual regions) copies are cheaper than the bookkeeping for views.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects a rank-{expected} tensor, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Dense tensor: a shape and a flat row-major buffer of f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Build a rank-2 tensor from rows; all rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(TensorError::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![rows.len(), cols],
                    rhs: vec![r.len()],
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on shape {:?}", self.shape);
        self.data[0]
    }

    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::BadRank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, c) = (self.shape[0], self.shape[1]);
        &self.data[i * c..(i + 1) * c]
    }

    /// Same data under a new shape; total element count must not change.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor, TensorError> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Maximum absolute difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.shape.to_vec(),
        rhs: rhs.shape.to_vec(),
    }
}

/// Standard matrix product of an m-by-k and a k-by-n tensor.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(shape_err("matmul", a, b));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor, TensorError> {
    let (m, n) = a.dims2("transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Row-wise softmax with per-row max subtraction.
pub fn row_softmax(m: &Tensor) -> Result<Tensor, TensorError> {
    let (r, c) = m.dims2("row_softmax")?;
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &m.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Elementwise logistic function, saturation-safe at large |x|.
pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| {
        if v >= 0.0 {
            1.0 / (1.0 + (-v).exp())
        } else {
            let e = v.exp();
            e / (1.0 + e)
        }
    })
}

/// Elementwise max(0, x). The subgradient at exactly 0 is taken as 0.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Row-wise concatenation: rows of the output are `[a_i ; b_i]`.
pub fn concat_cols(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let (ra, ca) = a.dims2("concat_cols")?;
    let (rb, cb) = b.dims2("concat_cols")?;
    if ra != rb {
        return Err(shape_err("concat_cols", a, b));
    }
    let mut out = Vec::with_capacity(ra * (ca + cb));
    for i in 0..ra {
        out.extend_from_slice(&a.data[i * ca..(i + 1) * ca]);
        out.extend_from_slice(&b.data[i * cb..(i + 1) * cb]);
    }
    Tensor::new(vec![ra, ca + cb], out)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(shape_err("add", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    if a.shape != b.shape {
        return Err(shape_err("sub", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape.clone(), data)
}

/// Add a length-c bias vector to every row of an r-by-c tensor.
pub fn add_row_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor, TensorError> {
    let (r, c) = x.dims2("add_row_bias")?;
    if bias.shape != [c] {
        return Err(shape_err("add_row_bias", x, bias));
    }
    let mut out = x.data.clone();
    for i in 0..r {
        for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Pairwise cosine similarity between the rows of `u` (p-by-d) and the
/// rows of `v` (q-by-d). A row with norm below 1e-12 yields 0 against
/// everything (neutral similarity instead of NaN).
pub const COSINE_NORM_FLOOR: f64 = 1e-12;

pub fn cosine_similarity(u: &Tensor, v: &Tensor) -> Result<Tensor, TensorError> {
    let (p, d) = u.dims2("cosine_similarity")?;
    let (q, d2) = v.dims2("cosine_similarity")?;
    if d != d2 {
        return Err(shape_err("cosine_similarity", u, v));
    }
    let norms = |t: &Tensor, n: usize| -> Vec<f64> {
        (0..n)
            .map(|i| t.data[i * d..(i + 1) * d].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    };
    let un = norms(u, p);
    let vn = norms(v, q);
    let mut out = vec![0.0; p * q];
    for i in 0..p {
        if un[i] < COSINE_NORM_FLOOR {
            continue;
        }
        let urow = &u.data[i * d..(i + 1) * d];
        for j in 0..q {
            if vn[j] < COSINE_NORM_FLOOR {
                continue;
            }
            let vrow = &v.data[j * d..(j + 1) * d];
            let dot: f64 = urow.iter().zip(vrow).map(|(x, y)| x * y).sum();
            out[i * q + j] = dot / (un[i] * vn[j]);
        }
    }
    Tensor::new(vec![p, q], out)
}

/// Multiply row i of `x` (n-by-d) by the scalar `s_i` (n-by-1).
pub fn scale_rows(x: &Tensor, s: &Tensor) -> Result<Tensor, TensorError> {
    let (n, d) = x.dims2("scale_rows")?;
    let (ns, cs) = s.dims2("scale_rows")?;
    if ns != n || cs != 1 {
        return Err(shape_err("scale_rows", x, s));
    }
    let mut out = x.data.clone();
    for i in 0..n {
        let si = s.data[i];
        for o in out[i * d..(i + 1) * d].iter_mut() {
            *o *= si;
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Arithmetic mean over rows: n-by-d down to 1-by-d.
pub fn mean_rows(x: &Tensor) -> Result<Tensor, TensorError> {
    let (n, d) = x.dims2("mean_rows")?;
    let mut out = vec![0.0; d];
    for i in 0..n {
        for (o, &v) in out.iter_mut().zip(&x.data[i * d..(i + 1) * d]) {
            *o += v;
        }
    }
    let inv = 1.0 / n as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Tensor::new(vec![1, d], out)
}

/// Tile a 1-by-d row n times into an n-by-d tensor.
pub fn repeat_rows(x: &Tensor, n: usize) -> Result<Tensor, TensorError> {
    let (r, d) = x.dims2("repeat_rows")?;
    if r != 1 {
        return Err(TensorError::BadRank {
            op: "repeat_rows",
            expected: 2,
            shape: x.shape.clone(),
        });
    }
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        out.extend_from_slice(&x.data);
    }
    Tensor::new(vec![n, d], out)
}

/// Relative Frobenius distance, with a floor on the denominator.
pub fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape);
    let num: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let den: f64 = a.data.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t2(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let eye = t2(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&eye, &b).unwrap(), b);
    }

    #[test]
    fn matmul_zero() {
        let z = Tensor::zeros(vec![2, 2]);
        let b = t2(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(matmul(&z, &b).unwrap(), Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn matmul_hand_computed() {
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = t2(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let expect = t2(&[vec![19.0, 22.0], vec![43.0, 50.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), expect);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "missing shapes in: {msg}");
    }

    #[test]
    fn softmax_uniform_logits() {
        let m = t2(&[vec![0.0, 0.0, 0.0]]);
        let s = row_softmax(&m).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance_exact_for_integer_shift() {
        let m = t2(&[vec![1.0, 2.0, -3.0]]);
        let shifted = m.map(|v| v + 7.0);
        assert_eq!(row_softmax(&m).unwrap(), row_softmax(&shifted).unwrap());
    }

    #[test]
    fn softmax_closed_form() {
        let m = t2(&[vec![0.0, 3.0f64.ln()]]);
        let s = row_softmax(&m).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_symmetry_point_and_closed_form() {
        let s = sigmoid(&Tensor::vector(vec![0.0, 3.0f64.ln()]));
        assert_eq!(s.data()[0], 0.5);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let s = sigmoid(&Tensor::vector(vec![40.0, -40.0]));
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
        assert!(s.all_finite());
    }

    #[test]
    fn relu_basics() {
        let r = relu(&Tensor::vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        let all_neg = relu(&Tensor::vector(vec![-3.0, -0.5]));
        assert_eq!(all_neg.data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_rows_side_by_side() {
        let a = t2(&[vec![1.0]]);
        let b = t2(&[vec![2.0]]);
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c.shape(), &[1, 2]);
        assert_eq!(c.data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_zero_width_is_identity() {
        let a = t2(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::new(vec![2, 0], vec![]).unwrap();
        let c = concat_cols(&a, &b).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn concat_row_count_mismatch() {
        let a = Tensor::zeros(vec![2, 1]);
        let b = Tensor::zeros(vec![3, 1]);
        assert!(concat_cols(&a, &b).is_err());
    }

    #[test]
    fn cosine_self_orthogonal_and_closed_form() {
        let u = t2(&[vec![1.0, 0.0]]);
        let v = t2(&[vec![1.0, 0.0], vec![0.0, 5.0], vec![1.0, 1.0]]);
        let s = cosine_similarity(&u, &v).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-15);
        assert!(s.data()[1].abs() < 1e-15);
        assert!((s.data()[2] - 1.0 / 2.0f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn cosine_zero_norm_guard() {
        let u = t2(&[vec![0.0, 0.0]]);
        let v = t2(&[vec![1.0, 2.0]]);
        let s = cosine_similarity(&u, &v).unwrap();
        assert_eq!(s.data()[0], 0.0);
    }

    #[test]
    fn mean_and_repeat_rows() {
        let x = t2(&[vec![1.0, 3.0], vec![3.0, 5.0]]);
        let m = mean_rows(&x).unwrap();
        assert_eq!(m.data(), &[2.0, 4.0]);
        let r = repeat_rows(&m, 3).unwrap();
        assert_eq!(r.shape(), &[3, 2]);
        assert_eq!(r.row(2), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_associativity_on_random_chains() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (m, k, n, p) = (
                rng.gen_range(1..6),
                rng.gen_range(1..6),
                rng.gen_range(1..6),
                rng.gen_range(1..6),
            );
            let rand_t = |rng: &mut rand_chacha::ChaCha8Rng, r: usize, c: usize| {
                Tensor::new(
                    vec![r, c],
                    (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            };
            let a = rand_t(&mut rng, m, k);
            let b = rand_t(&mut rng, k, n);
            let c = rand_t(&mut rng, n, p);
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            assert!(rel_frobenius(&left, &right) < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in proptest::collection::vec(
            proptest::collection::vec(-30.0f64..30.0, 1..6), 1..5)) {
            let cols = rows[0].len();
            let rows: Vec<Vec<f64>> = rows.into_iter().map(|mut r| { r.resize(cols, 0.0); r }).collect();
            let m = Tensor::from_rows(&rows).unwrap();
            let s = row_softmax(&m).unwrap();
            for i in 0..rows.len() {
                let sum: f64 = s.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(s.row(i).iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn softmax_shift_invariance_within_tolerance(
            row in proptest::collection::vec(-20.0f64..20.0, 1..8),
            shift in -50.0f64..50.0,
        ) {
            let m = Tensor::from_rows(&[row.clone()]).unwrap();
            let shifted = m.map(|v| v + shift);
            let a = row_softmax(&m).unwrap();
            let b = row_softmax(&shifted).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn sigmoid_complement_identity(xs in proptest::collection::vec(-40.0f64..40.0, 1..10)) {
            let x = Tensor::vector(xs.clone());
            let neg = x.map(|v| -v);
            let a = sigmoid(&x);
            let b = sigmoid(&neg);
            for (p, q) in a.data().iter().zip(b.data()) {
                prop_assert!((p + q - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariance(
            u in proptest::collection::vec(-5.0f64..5.0, 3),
            v in proptest::collection::vec(-5.0f64..5.0, 3),
            c in 0.01f64..100.0,
        ) {
            let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            prop_assume!(norm(&u) > 1e-6 && norm(&v) > 1e-6);
            let zu = Tensor::from_rows(&[u.clone()]).unwrap();
            let zu_scaled = zu.map(|x| x * c);
            let zv = Tensor::from_rows(&[v.clone()]).unwrap();
            let s1 = cosine_similarity(&zu, &zv).unwrap();
            let s2 = cosine_similarity(&zu_scaled, &zv).unwrap();
            prop_assert!((s1.data()[0] - s2.data()[0]).abs() < 1e-12);
        }
    }
}
