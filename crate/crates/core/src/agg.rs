//! Permutation-invariant pooling of instance features into one bag feature,
//! and the bag-level classifier.
//!
//! Mean and max pooling are parameter-free. Attention pooling scores each
//! instance with `score . tanh(hidden . b_i)`, softmax-normalizes the scores
//! and returns the weighted instance sum, so the bag feature stays in the
//! instance feature space.

use crate::data::ModelParams;
use crate::error::{Error, Result};
use crate::matrix::{softmax, Matrix};
use crate::tape::{Tape, ValueId};

/// Pooling choice. `hidden` is the width of the attention MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregatorKind {
    Mean,
    Max,
    Attention { hidden: usize },
}

pub const DEFAULT_ATTENTION_HIDDEN: usize = 128;

impl AggregatorKind {
    pub fn attention() -> Self {
        AggregatorKind::Attention {
            hidden: DEFAULT_ATTENTION_HIDDEN,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            AggregatorKind::Mean => "mean",
            AggregatorKind::Max => "max",
            AggregatorKind::Attention { .. } => "attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(AggregatorKind::Mean),
            "max" => Ok(AggregatorKind::Max),
            "attention" => Ok(AggregatorKind::attention()),
            other => Err(Error::InvalidArgument(format!(
                "unknown aggregator '{other}'"
            ))),
        }
    }
}

/// Borrowed attention weights.
#[derive(Clone, Copy)]
pub struct AttentionWeights<'a> {
    /// m x d.
    pub hidden: &'a Matrix,
    /// m x 1.
    pub score: &'a Matrix,
}

impl ModelParams {
    pub fn attention_weights(&self) -> Option<AttentionWeights<'_>> {
        match (&self.attn_hidden, &self.attn_score) {
            (Some(h), Some(s)) => Some(AttentionWeights { hidden: h, score: s }),
            _ => None,
        }
    }
}

/// Pools an n x d instance matrix into a d-vector. Attention pooling also
/// returns the per-instance weights (non-negative, summing to one).
///
/// Summation runs in ascending instance order, so results are reproducible
/// bit for bit on one platform.
pub fn pool(
    instances: &Matrix,
    kind: &AggregatorKind,
    attn: Option<AttentionWeights>,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let (n, d) = instances.shape();
    match kind {
        AggregatorKind::Mean => {
            if attn.is_some() {
                return Err(Error::InvalidArgument(
                    "mean pooling takes no parameters".into(),
                ));
            }
            let mut out = vec![0.0; d];
            for i in 0..n {
                for (o, &v) in out.iter_mut().zip(instances.row(i)) {
                    *o += v;
                }
            }
            for o in &mut out {
                *o /= n as f64;
            }
            Ok((out, None))
        }
        AggregatorKind::Max => {
            if attn.is_some() {
                return Err(Error::InvalidArgument(
                    "max pooling takes no parameters".into(),
                ));
            }
            // element-wise maximum is order-independent; no index is kept,
            // so ties cannot leak instance order
            let mut out = instances.row(0).to_vec();
            for i in 1..n {
                for (o, &v) in out.iter_mut().zip(instances.row(i)) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
            Ok((out, None))
        }
        AggregatorKind::Attention { hidden } => {
            let weights = attn.ok_or_else(|| {
                Error::InvalidArgument("attention pooling needs parameters".into())
            })?;
            if weights.hidden.shape() != (*hidden, d) || weights.score.shape() != (*hidden, 1) {
                return Err(Error::DimMismatch(format!(
                    "attention weights {}x{} / {}x{} for d={d}, m={hidden}",
                    weights.hidden.rows(),
                    weights.hidden.cols(),
                    weights.score.rows(),
                    weights.score.cols()
                )));
            }
            let mut tape = Tape::new();
            let x = tape.input(instances.clone())?;
            let h = tape.input(weights.hidden.clone())?;
            let s = tape.input(weights.score.clone())?;
            let (bag, weights) = attention_pool_on(&mut tape, x, h, s)?;
            Ok((
                tape.value(bag).as_slice().to_vec(),
                Some(tape.value(weights).as_slice().to_vec()),
            ))
        }
    }
}

/// Records attention pooling on a tape. Returns the bag feature (d x 1) and
/// the attention weights (1 x n).
pub fn attention_pool_on(
    tape: &mut Tape,
    instances: ValueId,
    hidden: ValueId,
    score: ValueId,
) -> Result<(ValueId, ValueId)> {
    let xt = tape.transpose(instances)?; // d x n
    let pre = tape.matmul(hidden, xt)?; // m x n
    let act = tape.tanh(pre)?;
    let st = tape.transpose(score)?; // 1 x m
    let logits = tape.matmul(st, act)?; // 1 x n
    let weights = tape.softmax(logits)?;
    let pooled = tape.matmul(weights, instances)?; // 1 x d
    let bag = tape.transpose(pooled)?; // d x 1
    Ok((bag, weights))
}

/// Records the classifier on a tape: sigmoid probability (1 x 1) when the
/// weight matrix has a single row, softmax probabilities (C x 1) otherwise.
pub fn classifier_on(
    tape: &mut Tape,
    input: ValueId,
    weight: ValueId,
    bias: ValueId,
) -> Result<ValueId> {
    let logits = tape.matmul(weight, input)?;
    let logits = tape.add(logits, bias)?;
    if tape.value(weight).rows() == 1 {
        tape.sigmoid(logits)
    } else {
        tape.softmax(logits)
    }
}

/// Plain classifier evaluation. Binary weights (one row) yield the positive
/// class probability as a single entry; multi-class weights yield softmax
/// probabilities over all classes.
pub fn classify(input: &[f64], weight: &Matrix, bias: &Matrix) -> Result<Vec<f64>> {
    if weight.cols() != input.len() {
        return Err(Error::DimMismatch(format!(
            "classifier expects width {}, input has {}",
            weight.cols(),
            input.len()
        )));
    }
    if bias.shape() != (weight.rows(), 1) {
        return Err(Error::DimMismatch(format!(
            "classifier bias {}x{} for {} outputs",
            bias.rows(),
            bias.cols(),
            weight.rows()
        )));
    }
    let mut logits = Vec::with_capacity(weight.rows());
    for r in 0..weight.rows() {
        let dot: f64 = weight.row(r).iter().zip(input).map(|(w, x)| w * x).sum();
        logits.push(dot + bias.get(r, 0));
    }
    if weight.rows() == 1 {
        Ok(vec![crate::matrix::sigmoid(logits[0])])
    } else {
        softmax(&logits)
    }
}

/// Full baseline forward pass: pool, then classify the bag feature.
pub fn baseline_forward(instances: &Matrix, params: &ModelParams) -> Result<Vec<f64>> {
    let kind = params.agg;
    let (bag, _) = pool(instances, &kind, params.attention_weights())?;
    classify(&bag, &params.clf_weight, &params.clf_bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn attn_weights(d: usize, m: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = Matrix::from_fn(m, d, |_, _| rng.random_range(-1.0..1.0));
        let score = Matrix::from_fn(m, 1, |_, _| rng.random_range(-1.0..1.0));
        (hidden, score)
    }

    #[test]
    fn single_instance_pools_to_itself() {
        let inst = Matrix::from_vec(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let (hidden, score) = attn_weights(3, 4, 0);
        for kind in [
            AggregatorKind::Mean,
            AggregatorKind::Max,
            AggregatorKind::Attention { hidden: 4 },
        ] {
            let attn = match kind {
                AggregatorKind::Attention { .. } => Some(AttentionWeights {
                    hidden: &hidden,
                    score: &score,
                }),
                _ => None,
            };
            let (bag, w) = pool(&inst, &kind, attn).unwrap();
            assert_eq!(bag, vec![0.5, -1.0, 2.0], "{kind:?}");
            if let Some(w) = w {
                assert_eq!(w, vec![1.0]);
            }
        }
    }

    #[test]
    fn mean_and_max_on_axis_vectors() {
        let inst = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let (mean, _) = pool(&inst, &AggregatorKind::Mean, None).unwrap();
        assert_eq!(mean, vec![0.5, 0.5]);
        let (max, _) = pool(&inst, &AggregatorKind::Max, None).unwrap();
        assert_eq!(max, vec![1.0, 1.0]);
    }

    #[test]
    fn attention_weights_form_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = Matrix::from_fn(7, 5, |_, _| rng.random_range(-2.0..2.0));
        let (hidden, score) = attn_weights(5, 6, 4);
        let (_, w) = pool(
            &inst,
            &AggregatorKind::Attention { hidden: 6 },
            Some(AttentionWeights {
                hidden: &hidden,
                score: &score,
            }),
        )
        .unwrap();
        let w = w.unwrap();
        assert!(w.iter().all(|&a| a >= 0.0));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn attention_over_identical_instances_is_mean() {
        let row = vec![0.7, -0.2, 1.4];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let inst = Matrix::from_vec(5, 3, data).unwrap();
        let (hidden, score) = attn_weights(3, 4, 9);
        let (bag, w) = pool(
            &inst,
            &AggregatorKind::Attention { hidden: 4 },
            Some(AttentionWeights {
                hidden: &hidden,
                score: &score,
            }),
        )
        .unwrap();
        let (mean, _) = pool(&inst, &AggregatorKind::Mean, None).unwrap();
        for (a, b) in bag.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
        for &a in &w.unwrap() {
            assert!((a - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 9;
        let inst = Matrix::from_fn(n, 4, |_, _| rng.random_range(-3.0..3.0));
        // reversal is an arbitrary nontrivial permutation
        let perm: Vec<usize> = (0..n).rev().collect();
        let mut permuted = Matrix::zeros(n, 4);
        for (to, &from) in perm.iter().enumerate() {
            for c in 0..4 {
                permuted.set(to, c, inst.get(from, c));
            }
        }
        let (hidden, score) = attn_weights(4, 5, 12);
        let attn = AttentionWeights {
            hidden: &hidden,
            score: &score,
        };
        let (a, _) = pool(&inst, &AggregatorKind::Attention { hidden: 5 }, Some(attn)).unwrap();
        let (b, _) = pool(&permuted, &AggregatorKind::Attention { hidden: 5 }, Some(attn)).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        let (ma, _) = pool(&inst, &AggregatorKind::Max, None).unwrap();
        let (mb, _) = pool(&permuted, &AggregatorKind::Max, None).unwrap();
        assert_eq!(ma, mb); // bit-exact for max
    }

    #[test]
    fn classify_zero_weights_gives_half() {
        let p = classify(&[1.0, -2.0, 3.0], &Matrix::zeros(1, 3), &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(p, vec![0.5]);
    }

    #[test]
    fn classify_logit_ln3_gives_three_quarters() {
        let w = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let b = Matrix::from_vec(1, 1, vec![0.0]).unwrap();
        let p = classify(&[3.0f64.ln()], &w, &b).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn classify_multiclass_equal_logits_is_uniform() {
        let p = classify(&[0.4, 0.6], &Matrix::zeros(3, 2), &Matrix::zeros(3, 1)).unwrap();
        for &v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn classify_width_mismatch_is_error() {
        assert!(classify(&[1.0], &Matrix::zeros(1, 3), &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn attention_without_params_is_error() {
        let inst = Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(pool(&inst, &AggregatorKind::Attention { hidden: 3 }, None).is_err());
    }
}
