//! Exact softmax attention and its Nyström approximation.
//!
//! Both are written against the differentiation [`Tape`]; the free functions
//! at the bottom wrap them for direct use on plain matrices.

use ndarray::{Array1, Array2};
use rand::RngCore;

use crate::tape::{Tape, Var};

/// Default Newton–Schulz iteration count for the landmark pseudo-inverse.
pub const PINV_ITERATIONS: usize = 6;

/// The class-token row of one head's attention, kept for α extraction.
#[derive(Clone, Debug)]
pub enum ClassRow {
    /// Row 0 of the softmaxed attention matrix.
    Exact(Array1<f64>),
    /// Row 0 of each Nyström factor: `k1[0,:]`, `pinv(k2)`, `k3`.
    Nystrom {
        query_landmarks: Array1<f64>,
        pinv: Array2<f64>,
        landmark_keys: Array2<f64>,
    },
}

impl ClassRow {
    /// The (approximate) attention weights of token 0 over the whole sequence.
    pub fn reconstruct(&self) -> Array1<f64> {
        match self {
            ClassRow::Exact(row) => row.clone(),
            ClassRow::Nystrom {
                query_landmarks,
                pinv,
                landmark_keys,
            } => query_landmarks.dot(pinv).dot(landmark_keys),
        }
    }
}

/// Inverted-dropout mask; `None` when dropout is inactive.
pub(crate) fn dropout_mask(
    dim: (usize, usize),
    probability: f64,
    rng: Option<&mut dyn RngCore>,
) -> Option<Array2<f64>> {
    use rand::Rng;
    let rng = rng?;
    if probability <= 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - probability);
    Some(Array2::from_shape_simple_fn(dim, || {
        if rng.random::<f64>() < probability {
            0.0
        } else {
            keep
        }
    }))
}

/// `softmax(q kᵀ · scale) · v` on the tape.
pub(crate) fn exact_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    scale: f64,
    dropout: Option<Array2<f64>>,
) -> (Var, Var) {
    let kt = tape.transpose(k);
    let logits = tape.matmul(q, kt);
    let logits = tape.scale(logits, scale);
    let attn = tape.softmax_rows(logits);
    let weights = match dropout {
        Some(mask) => tape.mul_const(attn, mask),
        None => attn,
    };
    (tape.matmul(weights, v), attn)
}

/// Averaging matrix that maps a zero-padded sequence onto `landmarks` segment means.
pub fn landmark_matrix(seq_len: usize, landmarks: usize) -> Array2<f64> {
    let segment = seq_len.div_ceil(landmarks);
    let mut m = Array2::zeros((landmarks, seq_len));
    for j in 0..landmarks {
        for i in (j * segment)..((j + 1) * segment).min(seq_len) {
            m[[j, i]] = 1.0 / segment as f64;
        }
    }
    m
}

/// Newton–Schulz pseudo-inverse with a fixed number of iterations.
pub(crate) fn pinv_on_tape(tape: &mut Tape, k: Var, iterations: usize) -> Var {
    let mut z = tape.pinv_init(k);
    for _ in 0..iterations {
        let kz = tape.matmul(k, z);
        let inner = tape.shifted_scale(kz, 7.0, -1.0);
        let inner = tape.matmul(kz, inner);
        let inner = tape.shifted_scale(inner, 15.0, -1.0);
        let inner = tape.matmul(kz, inner);
        let inner = tape.shifted_scale(inner, 13.0, -1.0);
        let next = tape.matmul(z, inner);
        z = tape.scale(next, 0.25);
    }
    z
}

pub(crate) struct NystromNodes {
    pub output: Var,
    pub query_landmarks: Var,
    pub pinv: Var,
    pub landmark_keys: Var,
}

/// Nyström-approximated attention on the tape.
///
/// With at least as many landmarks as tokens every token is its own landmark.
/// Dropout, when given, applies to the `softmax(q k̃ᵀ)` factor.
pub(crate) fn nystrom_on_tape(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    landmarks: usize,
    scale: f64,
    pinv_iterations: usize,
    dropout: Option<Array2<f64>>,
) -> NystromNodes {
    let seq_len = tape.value(q).nrows();
    let (q_land, k_land) = if landmarks >= seq_len {
        (q, k)
    } else {
        let avg = landmark_matrix(seq_len, landmarks);
        (tape.const_matmul(avg.clone(), q), tape.const_matmul(avg, k))
    };
    let softmax_of = |tape: &mut Tape, a: Var, b: Var| {
        let bt = tape.transpose(b);
        let logits = tape.matmul(a, bt);
        let logits = tape.scale(logits, scale);
        tape.softmax_rows(logits)
    };
    let query_landmarks = softmax_of(tape, q, k_land);
    let landmark_gram = softmax_of(tape, q_land, k_land);
    let landmark_keys = softmax_of(tape, q_land, k);
    let pinv = pinv_on_tape(tape, landmark_gram, pinv_iterations);

    let kv = tape.matmul(landmark_keys, v);
    let mixed = tape.matmul(pinv, kv);
    let left = match dropout {
        Some(mask) => tape.mul_const(query_landmarks, mask),
        None => query_landmarks,
    };
    let output = tape.matmul(left, mixed);
    NystromNodes {
        output,
        query_landmarks,
        pinv,
        landmark_keys,
    }
}

/// Exact softmax attention; returns the outputs and the attention matrix.
pub fn exact_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let (out, attn) = exact_on_tape(&mut tape, q, k, v, scale, None);
    (tape.value(out).clone(), tape.value(attn).clone())
}

/// The three Nyström factors; `reconstruct` rebuilds the approximate attention matrix.
#[derive(Clone, Debug)]
pub struct NystromFactors {
    pub query_landmarks: Array2<f64>,
    pub pinv: Array2<f64>,
    pub landmark_keys: Array2<f64>,
}

impl NystromFactors {
    pub fn reconstruct(&self) -> Array2<f64> {
        self.query_landmarks.dot(&self.pinv).dot(&self.landmark_keys)
    }

    /// Approximate attention weights of token 0.
    pub fn class_row(&self) -> Array1<f64> {
        ClassRow::Nystrom {
            query_landmarks: self.query_landmarks.row(0).to_owned(),
            pinv: self.pinv.clone(),
            landmark_keys: self.landmark_keys.clone(),
        }
        .reconstruct()
    }
}

/// Nyström attention with the default pseudo-inverse iteration count.
pub fn nystrom_attention(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    landmarks: usize,
    scale: f64,
) -> (Array2<f64>, NystromFactors) {
    nystrom_attention_with(q, k, v, landmarks, scale, PINV_ITERATIONS)
}

pub fn nystrom_attention_with(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    landmarks: usize,
    scale: f64,
    pinv_iterations: usize,
) -> (Array2<f64>, NystromFactors) {
    assert!(landmarks >= 1, "at least one landmark");
    let mut tape = Tape::new();
    let (q, k, v) = (
        tape.constant(q.clone()),
        tape.constant(k.clone()),
        tape.constant(v.clone()),
    );
    let nodes = nystrom_on_tape(&mut tape, q, k, v, landmarks, scale, pinv_iterations, None);
    let factors = NystromFactors {
        query_landmarks: tape.value(nodes.query_landmarks).clone(),
        pinv: tape.value(nodes.pinv).clone(),
        landmark_keys: tape.value(nodes.landmark_keys).clone(),
    };
    (tape.value(nodes.output).clone(), factors)
}

/// Turns a (head-averaged) class-token row over `N + 1` tokens into α over the
/// `N` instances: drop the self weight, clamp negatives, renormalize.
pub fn extract_attention(class_row: &Array1<f64>) -> Vec<f64> {
    let instances: Vec<f64> = class_row.iter().skip(1).map(|v| v.max(0.0)).collect();
    let total: f64 = instances.iter().sum();
    if total > 0.0 && total.is_finite() {
        instances.into_iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / instances.len() as f64; instances.len()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(&mut rng))
    }

    #[test]
    fn equal_keys_give_uniform_rows() {
        let q = random(3, 4, 1);
        let k = Array2::from_elem((5, 4), 0.7);
        let (_, attn) = exact_attention(&q, &k, &random(5, 2, 2), 0.5);
        for v in attn.iter() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_logit_saturates() {
        let q = Array2::from_elem((1, 1), 1.0);
        let k = array![[0.0], [1e4], [0.0]];
        let (_, attn) = exact_attention(&q, &k, &random(3, 2, 0), 1.0);
        assert!((attn[[0, 1]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_matches_double_loop() {
        let (q, k, v) = (random(4, 8, 3), random(4, 8, 4), random(4, 8, 5));
        let scale = 1.0 / 8f64.sqrt();
        let (out, _) = exact_attention(&q, &k, &v, scale);
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| (0..8).map(|d| q[[i, d]] * k[[j, d]]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::MIN, f64::max);
            let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            for d in 0..8 {
                let expected: f64 = (0..4).map(|j| weights[j] / total * v[[j, d]]).sum();
                assert!((out[[i, d]] - expected).abs() < 1e-12);
            }
        }
    }

    /// Enough Newton–Schulz iterations for the pseudo-inverse to converge on
    /// these sizes; the default count deliberately stops short of that.
    const CONVERGED: usize = 20;

    #[test]
    fn default_iterations_regularize_the_inverse() {
        let scale = 1.0 / 8f64.sqrt();
        let (q, k, v) = (random(17, 8, 10), random(17, 8, 11), random(17, 8, 12));
        let (exact, _) = exact_attention(&q, &k, &v, scale);
        let err = |iterations| {
            let (approx, _) = nystrom_attention_with(&q, &k, &v, 17, scale, iterations);
            (&exact - &approx).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v))
        };
        assert!(err(PINV_ITERATIONS) > 1e-3);
        assert!(err(PINV_ITERATIONS) < 1e-1);
        assert!(err(CONVERGED) < 1e-6);
    }

    #[test]
    fn nystrom_is_linear_in_values() {
        let (q, k) = (random(10, 4, 6), random(10, 4, 7));
        let (out, _) = nystrom_attention(&q, &k, &Array2::zeros((10, 3)), 3, 0.5);
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_queries_and_keys_average_values() {
        let q = Array2::from_elem((9, 4), 0.3);
        let k = Array2::from_elem((9, 4), -0.2);
        let v = random(9, 3, 8);
        let (out, _) = nystrom_attention_with(&q, &k, &v, 4, 0.5, CONVERGED);
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-6, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn full_landmarks_reproduce_exact() {
        let scale = 1.0 / 8f64.sqrt();
        for seq in [1, 2, 5, 17, 32] {
            let (q, k, v) = (random(seq, 8, 10), random(seq, 8, 11), random(seq, 8, 12));
            let (exact, attn) = exact_attention(&q, &k, &v, scale);
            let (approx, factors) = nystrom_attention_with(&q, &k, &v, seq, scale, CONVERGED);
            let err = (&exact - &approx).mapv(f64::abs).fold(0.0f64, |m, v| m.max(*v));
            assert!(err < 1e-3, "seq {seq}: output error {err}");
            let row_err = (&attn.row(0) - &factors.class_row())
                .mapv(f64::abs)
                .fold(0.0f64, |m, v| m.max(*v));
            assert!(row_err < 1e-3, "seq {seq}: class row error {row_err}");
        }
    }

    #[test]
    fn landmark_matrix_pads_with_zeros() {
        let m = landmark_matrix(5, 2);
        // segments of 3: rows 0..3 and 3..5 (+1 zero pad row)
        assert_eq!(m.row(0).to_vec(), vec![1.0 / 3.0; 3].into_iter().chain([0.0, 0.0]).collect::<Vec<_>>());
        assert_eq!(m.row(1).to_vec(), vec![0.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0]);
    }

    #[test]
    fn class_row_renormalization() {
        let alpha = extract_attention(&array![0.5, 0.3, 0.2]);
        assert!((alpha[0] - 0.6).abs() < 1e-12);
        assert!((alpha[1] - 0.4).abs() < 1e-12);
        let uniform = extract_attention(&Array1::from_elem(5, 0.2));
        assert!(uniform.iter().all(|a| (a - 0.25).abs() < 1e-12));
        let clamped = extract_attention(&array![0.2, -0.1, 0.9]);
        assert_eq!(clamped, vec![0.0, 1.0]);
    }
}
