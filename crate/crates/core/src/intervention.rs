//! Backdoor-adjusted prediction head.
//!
//! The bag feature and the dictionary strata are projected into a joint
//! space; scaled dot products give an attention distribution over strata;
//! the prior-tilted stratum combination is merged with the bag feature and
//! classified in a single forward pass. The prior enters relative to
//! uniform (`K * P(c_i)`), so a uniform prior leaves the attention
//! combination at full scale instead of shrinking it by 1/K; see
//! [`backdoor_combine`]. [`explicit_backdoor_forward`] keeps the
//! pre-approximation form, one classifier pass per stratum with probability
//! averaging under the prior, as a reference mode for diagnostics.

use crate::agg::{attention_pool_on, classifier_on, classify, pool};
use crate::data::{ConfounderDictionary, ModelParams};
use crate::error::{Error, Result};
use crate::matrix::{softmax, Matrix};
use crate::tape::{Tape, ValueId};

/// How the stratum combination is merged with the bag feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combinator {
    /// Vector concatenation; doubles the classifier input width.
    Concat,
    /// Element-wise addition.
    Add,
    /// Element-wise subtraction.
    Sub,
}

impl Combinator {
    pub fn as_str(&self) -> &'static str {
        match self {
            Combinator::Concat => "concat",
            Combinator::Add => "add",
            Combinator::Sub => "sub",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Combinator::Concat),
            "add" => Ok(Combinator::Add),
            "sub" => Ok(Combinator::Sub),
            other => Err(Error::InvalidArgument(format!(
                "unknown combinator '{other}'"
            ))),
        }
    }

    /// Classifier input width for feature dimension `d`.
    pub fn width(&self, d: usize) -> usize {
        match self {
            Combinator::Concat => 2 * d,
            _ => d,
        }
    }
}

/// Records the adjustment head on a tape. `bag_feature` is d x 1, `strata`
/// K x d. Returns the combined classifier input and the stratum attention
/// (1 x K).
pub fn intervention_head_on(
    tape: &mut Tape,
    bag_feature: ValueId,
    strata: ValueId,
    proj_bag: ValueId,
    proj_dict: ValueId,
    prior: &[f64],
    combinator: Combinator,
) -> Result<(ValueId, ValueId)> {
    let joint_dim = tape.value(proj_bag).rows();
    let k = tape.value(strata).rows();
    if prior.len() != k {
        return Err(Error::DimMismatch(format!(
            "prior length {} for K={k}",
            prior.len()
        )));
    }

    let projected_bag = tape.matmul(proj_bag, bag_feature)?; // l x 1
    let strata_t = tape.transpose(strata)?; // d x K
    let projected_strata = tape.matmul(proj_dict, strata_t)?; // l x K
    let bag_row = tape.transpose(projected_bag)?; // 1 x l
    let scores = tape.matmul(bag_row, projected_strata)?; // 1 x K
    let scaled = tape.scale(scores, 1.0 / (joint_dim as f64).sqrt())?;
    let alpha = tape.softmax(scaled)?;

    // prior relative to uniform: K * P(c_i), a no-op for the uniform prior
    let tilt: Vec<f64> = prior.iter().map(|p| p * k as f64).collect();
    let prior_row = tape.input(Matrix::from_vec(1, k, tilt)?)?;
    let weighted = tape.mul(alpha, prior_row)?;
    let combo_row = tape.matmul(weighted, strata)?; // 1 x d
    let combo = tape.transpose(combo_row)?; // d x 1

    let combined = match combinator {
        Combinator::Concat => tape.concat_rows(bag_feature, combo)?,
        Combinator::Add => tape.add(bag_feature, combo)?,
        Combinator::Sub => tape.sub(bag_feature, combo)?,
    };
    Ok((combined, alpha))
}

/// Attention of a bag feature over the dictionary strata:
/// `softmax(projected_bag . projected_strata / sqrt(l))`.
pub fn confounder_attention(
    bag_feature: &[f64],
    dict: &ConfounderDictionary,
    proj_bag: &Matrix,
    proj_dict: &Matrix,
) -> Result<Vec<f64>> {
    let d = bag_feature.len();
    if proj_bag.shape() != proj_dict.shape() || proj_bag.cols() != d || dict.dim() != d {
        return Err(Error::DimMismatch(format!(
            "projections {}x{} / {}x{}, bag dim {d}, dictionary dim {}",
            proj_bag.rows(),
            proj_bag.cols(),
            proj_dict.rows(),
            proj_dict.cols(),
            dict.dim()
        )));
    }
    let joint_dim = proj_bag.rows();
    let scale = 1.0 / (joint_dim as f64).sqrt();

    let mut projected = vec![0.0; joint_dim];
    for (j, p) in projected.iter_mut().enumerate() {
        *p = proj_bag.row(j).iter().zip(bag_feature).map(|(w, x)| w * x).sum();
    }
    let mut logits = Vec::with_capacity(dict.k());
    for i in 0..dict.k() {
        let stratum = dict.strata.row(i);
        let mut dot = 0.0;
        for (j, &q) in projected.iter().enumerate() {
            let r: f64 = proj_dict.row(j).iter().zip(stratum).map(|(w, c)| w * c).sum();
            dot += q * r;
        }
        logits.push(dot * scale);
    }
    softmax(&logits)
}

/// Prior-tilted stratum combination merged with the bag feature:
/// `v = sum_i alpha_i * (K * P(c_i)) * c_i`, then concat/add/sub. Under the
/// default uniform prior this is the plain attention combination
/// `sum_i alpha_i c_i`; shrinking it by 1/K instead would leave the head too
/// small to influence the classifier within the fixed training budget.
pub fn backdoor_combine(
    bag_feature: &[f64],
    alpha: &[f64],
    dict: &ConfounderDictionary,
    combinator: Combinator,
) -> Result<Vec<f64>> {
    let d = bag_feature.len();
    if dict.dim() != d {
        return Err(Error::DimMismatch(format!(
            "bag dim {d} vs dictionary dim {}",
            dict.dim()
        )));
    }
    if alpha.len() != dict.k() {
        return Err(Error::DimMismatch(format!(
            "attention length {} for K={}",
            alpha.len(),
            dict.k()
        )));
    }
    let mut combo = vec![0.0; d];
    for i in 0..dict.k() {
        let w = alpha[i] * dict.prior[i] * dict.k() as f64;

        for (v, &c) in combo.iter_mut().zip(dict.strata.row(i)) {
            *v += w * c;
        }
    }
    Ok(match combinator {
        Combinator::Concat => {
            let mut out = bag_feature.to_vec();
            out.extend_from_slice(&combo);
            out
        }
        Combinator::Add => bag_feature.iter().zip(&combo).map(|(b, v)| b + v).collect(),
        Combinator::Sub => bag_feature.iter().zip(&combo).map(|(b, v)| b - v).collect(),
    })
}

fn intervention_parts<'a>(
    params: &'a ModelParams,
    dict: &ConfounderDictionary,
) -> Result<(&'a Matrix, &'a Matrix, Combinator)> {
    let (proj_bag, proj_dict) = match (&params.proj_bag, &params.proj_dict) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(Error::InvalidArgument(
                "checkpoint has no interventional head".into(),
            ))
        }
    };
    let combinator = params
        .combinator
        .ok_or_else(|| Error::InvalidArgument("checkpoint has no combinator".into()))?;
    if dict.dim() != params.feature_dim {
        return Err(Error::DimMismatch(format!(
            "dictionary dim {} vs model dim {}",
            dict.dim(),
            params.feature_dim
        )));
    }
    Ok((proj_bag, proj_dict, combinator))
}

/// Single-pass adjusted prediction: pool, attend over strata, combine,
/// classify.
pub fn interventional_forward(
    instances: &Matrix,
    params: &ModelParams,
    dict: &ConfounderDictionary,
) -> Result<Vec<f64>> {
    let (proj_bag, proj_dict, combinator) = intervention_parts(params, dict)?;
    let mut tape = Tape::new();
    let bag_feature = match params.agg {
        crate::agg::AggregatorKind::Attention { .. } => {
            let weights = params.attention_weights().ok_or_else(|| {
                Error::InvalidArgument("attention aggregator needs weights".into())
            })?;
            let x = tape.input(instances.clone())?;
            let h = tape.input(weights.hidden.clone())?;
            let s = tape.input(weights.score.clone())?;
            attention_pool_on(&mut tape, x, h, s)?.0
        }
        kind => {
            let (pooled, _) = pool(instances, &kind, None)?;
            tape.input(Matrix::column(&pooled)?)?
        }
    };
    let strata = tape.input(dict.strata.clone())?;
    let pb = tape.input(proj_bag.clone())?;
    let pd = tape.input(proj_dict.clone())?;
    let (combined, _) = intervention_head_on(
        &mut tape,
        bag_feature,
        strata,
        pb,
        pd,
        &dict.prior,
        combinator,
    )?;
    let w = tape.input(params.clf_weight.clone())?;
    let b = tape.input(params.clf_bias.clone())?;
    let probs = classifier_on(&mut tape, combined, w, b)?;
    Ok(tape.value(probs).as_slice().to_vec())
}

/// Reference mode: one classifier pass per stratum with `alpha_i * c_i`
/// merged in, probabilities averaged under the prior. Matches
/// [`interventional_forward`] exactly at K=1; the gap between the two is the
/// approximation error of moving the stratum average inside the classifier.
pub fn explicit_backdoor_forward(
    instances: &Matrix,
    params: &ModelParams,
    dict: &ConfounderDictionary,
) -> Result<Vec<f64>> {
    let (proj_bag, proj_dict, combinator) = intervention_parts(params, dict)?;
    let (bag_feature, _) = pool(instances, &params.agg, params.attention_weights())?;
    let alpha = confounder_attention(&bag_feature, dict, proj_bag, proj_dict)?;

    let mut acc: Option<Vec<f64>> = None;
    for i in 0..dict.k() {
        let stratum = dict.strata.row(i);
        let input: Vec<f64> = match combinator {
            Combinator::Concat => bag_feature
                .iter()
                .copied()
                .chain(stratum.iter().map(|&c| alpha[i] * c))
                .collect(),
            Combinator::Add => bag_feature
                .iter()
                .zip(stratum)
                .map(|(b, &c)| b + alpha[i] * c)
                .collect(),
            Combinator::Sub => bag_feature
                .iter()
                .zip(stratum)
                .map(|(b, &c)| b - alpha[i] * c)
                .collect(),
        };
        let probs = classify(&input, &params.clf_weight, &params.clf_bias)?;
        match &mut acc {
            None => acc = Some(probs.iter().map(|p| p * dict.prior[i]).collect()),
            Some(acc) => {
                for (a, p) in acc.iter_mut().zip(&probs) {
                    *a += p * dict.prior[i];
                }
            }
        }
    }
    Ok(acc.expect("dictionary has at least one stratum"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agg::AggregatorKind;
    use crate::data::BuildMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dict_from(strata: Matrix) -> ConfounderDictionary {
        let k = strata.rows();
        ConfounderDictionary::new(
            strata,
            ConfounderDictionary::uniform_prior(k),
            BuildMode::Mean,
            true,
            String::new(),
        )
        .unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identical_strata_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 5;
        let row: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut data = Vec::new();
        for _ in 0..4 {
            data.extend_from_slice(&row);
        }
        let dict = dict_from(Matrix::from_vec(4, d, data).unwrap());
        let bag: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p1 = random_matrix(&mut rng, 3, d);
        let p2 = random_matrix(&mut rng, 3, d);
        let alpha = confounder_attention(&bag, &dict, &p1, &p2).unwrap();
        for &a in &alpha {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_stratum_attention_is_one() {
        let dict = dict_from(Matrix::from_vec(1, 3, vec![0.4, -0.2, 1.0]).unwrap());
        let alpha = confounder_attention(
            &[1.0, 2.0, 3.0],
            &dict,
            &Matrix::identity(3),
            &Matrix::identity(3),
        )
        .unwrap();
        assert_eq!(alpha, vec![1.0]);
    }

    /// With identity projections, bag equal to the first stratum, and
    /// orthogonal equal-norm strata, the first attention weight is the
    /// strict maximum with the closed-form value
    /// e^(|c1|^2/sqrt(l)) / (e^(|c1|^2/sqrt(l)) + (K-1)).
    #[test]
    fn orthogonal_strata_attention_matches_closed_form() {
        let d = 4;
        let scale = 1.3;
        let mut strata = Matrix::zeros(d, d);
        for i in 0..d {
            strata.set(i, i, scale);
        }
        let dict = dict_from(strata);
        let bag = {
            let mut b = vec![0.0; d];
            b[0] = scale;
            b
        };
        let alpha =
            confounder_attention(&bag, &dict, &Matrix::identity(d), &Matrix::identity(d)).unwrap();
        let norm_sq = scale * scale;
        let top = (norm_sq / (d as f64).sqrt()).exp();
        let expected = top / (top + (d as f64 - 1.0));
        assert!((alpha[0] - expected).abs() < 1e-12);
        for &a in &alpha[1..] {
            assert!(alpha[0] > a);
        }
    }

    #[test]
    fn combine_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (k, d) = (6, 4);
        let dict = dict_from(random_matrix(&mut rng, k, d));
        let bag: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|v| v / total).collect();

        let got = backdoor_combine(&bag, &alpha, &dict, Combinator::Concat).unwrap();
        // term-by-term reference summation
        let mut expected = vec![0.0; d];
        for i in 0..k {
            for j in 0..d {
                expected[j] += alpha[i] * dict.strata.get(i, j) * dict.prior[i] * k as f64;
            }
        }
        for j in 0..d {
            assert!((got[j] - bag[j]).abs() < 1e-15);
            assert!((got[d + j] - expected[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_stratum_combination_is_that_stratum() {
        let dict = dict_from(Matrix::from_vec(1, 2, vec![0.7, -0.3]).unwrap());
        let out = backdoor_combine(&[1.0, 2.0], &[1.0], &dict, Combinator::Concat).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 0.7, -0.3]);
    }

    #[test]
    fn one_hot_attention_picks_single_stratum() {
        let strata = Matrix::from_vec(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let dict = dict_from(strata);
        let out = backdoor_combine(&[0.0, 0.0], &[0.0, 0.0, 1.0, 0.0], &dict, Combinator::Add)
            .unwrap();
        // a one-hot lookup under the uniform prior returns that stratum
        assert!((out[0] - 5.0).abs() < 1e-15);
        assert!((out[1] - 6.0).abs() < 1e-15);
    }

    #[test]
    fn non_uniform_prior_tilts_relative_to_uniform() {
        let strata = Matrix::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let dict = ConfounderDictionary::new(
            strata,
            vec![0.75, 0.25],
            BuildMode::Mean,
            true,
            String::new(),
        )
        .unwrap();
        let out = backdoor_combine(&[0.0], &[0.5, 0.5], &dict, Combinator::Add).unwrap();
        // 0.5*1.5 + 0.5*0.5 = 1.0
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    fn test_params(
        rng: &mut ChaCha8Rng,
        d: usize,
        m: usize,
        joint: usize,
        combinator: Combinator,
    ) -> ModelParams {
        ModelParams {
            agg: AggregatorKind::Attention { hidden: m },
            attn_hidden: Some(random_matrix(rng, m, d)),
            attn_score: Some(random_matrix(rng, m, 1)),
            clf_weight: random_matrix(rng, 1, combinator.width(d)),
            clf_bias: random_matrix(rng, 1, 1),
            proj_bag: Some(random_matrix(rng, joint, d)),
            proj_dict: Some(random_matrix(rng, joint, d)),
            combinator: Some(combinator),
            feature_dim: d,
            num_classes: 2,
        }
    }

    /// The tape-built forward must equal an independently composed plain
    /// path to near machine precision.
    #[test]
    fn forward_matches_independent_plain_path() {
        for (case, comb) in [Combinator::Concat, Combinator::Add, Combinator::Sub]
            .into_iter()
            .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + case as u64);
            let (d, m, joint, k, n) = (5, 4, 3, 4, 7);
            let params = test_params(&mut rng, d, m, joint, comb);
            let dict = dict_from(random_matrix(&mut rng, k, d));
            let instances = random_matrix(&mut rng, n, d);

            let fast = interventional_forward(&instances, &params, &dict).unwrap();

            let (bag, _) = pool(&instances, &params.agg, params.attention_weights()).unwrap();
            let alpha = confounder_attention(
                &bag,
                &dict,
                params.proj_bag.as_ref().unwrap(),
                params.proj_dict.as_ref().unwrap(),
            )
            .unwrap();
            let combined = backdoor_combine(&bag, &alpha, &dict, comb).unwrap();
            let slow = classify(&combined, &params.clf_weight, &params.clf_bias).unwrap();

            assert!((fast[0] - slow[0]).abs() < 1e-12, "{comb:?}");
        }
    }

    #[test]
    fn zero_strata_reduce_to_baseline_with_zero_extra_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (d, m, joint) = (4, 3, 2);
        let mut params = test_params(&mut rng, d, m, joint, Combinator::Concat);
        let dict = dict_from(Matrix::zeros(3, d));
        let instances = random_matrix(&mut rng, 5, d);

        let adjusted = interventional_forward(&instances, &params, &dict).unwrap();

        // baseline classifier = first d columns of the widened classifier
        let base_w = Matrix::from_vec(1, d, params.clf_weight.as_slice()[..d].to_vec()).unwrap();
        params.proj_bag = None;
        params.proj_dict = None;
        params.combinator = None;
        params.clf_weight = base_w;
        let baseline = crate::agg::baseline_forward(&instances, &params).unwrap();
        assert!((adjusted[0] - baseline[0]).abs() < 1e-12);
    }

    #[test]
    fn forward_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (d, n) = (4, 8);
        let params = test_params(&mut rng, d, 3, 2, Combinator::Concat);
        let dict = dict_from(random_matrix(&mut rng, 3, d));
        let instances = random_matrix(&mut rng, n, d);
        let mut reversed = Matrix::zeros(n, d);
        for i in 0..n {
            for j in 0..d {
                reversed.set(i, j, instances.get(n - 1 - i, j));
            }
        }
        let a = interventional_forward(&instances, &params, &dict).unwrap();
        let b = interventional_forward(&reversed, &params, &dict).unwrap();
        assert!((a[0] - b[0]).abs() < 1e-9);
    }

    #[test]
    fn explicit_form_equals_single_pass_at_k1() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let d = 4;
        let params = test_params(&mut rng, d, 3, 2, Combinator::Concat);
        let dict = dict_from(random_matrix(&mut rng, 1, d));
        let instances = random_matrix(&mut rng, 6, d);
        let fast = interventional_forward(&instances, &params, &dict).unwrap();
        let explicit = explicit_backdoor_forward(&instances, &params, &dict).unwrap();
        assert!((fast[0] - explicit[0]).abs() < 1e-12);
    }

    /// No fixed tolerance: the gap between the averaged and single-pass
    /// forms is a diagnostic, not a contract.
    #[test]
    fn explicit_vs_single_pass_gap_is_a_sane_probability_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let d = 5;
        let params = test_params(&mut rng, d, 4, 3, Combinator::Concat);
        let dict = dict_from(random_matrix(&mut rng, 6, d));
        let instances = random_matrix(&mut rng, 9, d);
        let fast = interventional_forward(&instances, &params, &dict).unwrap();
        let explicit = explicit_backdoor_forward(&instances, &params, &dict).unwrap();
        let gap = (fast[0] - explicit[0]).abs();
        assert!(fast[0] > 0.0 && fast[0] < 1.0);
        assert!(explicit[0] > 0.0 && explicit[0] < 1.0);
        assert!(gap < 1.0);
        println!("single-pass vs averaged gap: {gap:.3e}");
    }
}
