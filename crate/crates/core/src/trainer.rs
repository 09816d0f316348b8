//! Training loops for the baseline aggregator stage and the interventional
//! stage, plus evaluation and the finite-difference gradient audit.
//!
//! Training is seed-deterministic end to end: weight initialization, the
//! per-epoch bag order, and every update run in a fixed order, so identical
//! (dataset, config, seed) triples produce byte-identical checkpoints.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agg::{attention_pool_on, classifier_on, pool, AggregatorKind};
use crate::confounders::knn_classify;
use crate::data::{ConfounderDictionary, Dataset, ModelParams};
use crate::error::{Error, Result};
use crate::intervention::{intervention_head_on, interventional_forward, Combinator};
use crate::matrix::Matrix;
use crate::metrics::{auc, confusion_metrics, ConfusionMetrics};
use crate::tape::{finite_diff_check, Tape, ValueId};

const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Adam { beta1: f64, beta2: f64, epsilon: f64 },
    Sgd,
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::adam(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

/// Interventional-stage options on top of [`TrainConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct Stage3Options {
    pub combinator: Combinator,
    /// Requested joint-space dimension; clamped to the feature dimension.
    pub joint_dim: usize,
    pub learnable_dict: bool,
}

impl Default for Stage3Options {
    fn default() -> Self {
        Self {
            combinator: Combinator::Concat,
            joint_dim: 128,
            learnable_dict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_auc: Option<f64>,
}

/// Mean binary cross-entropy with predictions clamped away from 0 and 1, so
/// the result is always finite.
pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimMismatch(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidArgument("no predictions".into()));
    }
    let mut total = 0.0;
    for (&p, &y) in predictions.iter().zip(labels) {
        let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(total / predictions.len() as f64)
}

// ---------------------------------------------------------------------------
// architecture: tensor layout shared by training, eval and gradient checks
// ---------------------------------------------------------------------------

/// Describes one trainable graph: one aggregator plus classifier, optionally
/// extended with the adjustment head. The tensor vector layout is
/// `[attn_hidden, attn_score]? clf_weight, clf_bias [, proj_bag, proj_dict]
/// [, strata]` — strata appear only in learnable-dictionary mode.
#[derive(Debug, Clone)]
struct Arch {
    kind: AggregatorKind,
    feature_dim: usize,
    num_classes: usize,
    head: Option<HeadArch>,
}

#[derive(Debug, Clone)]
struct HeadArch {
    combinator: Combinator,
    joint_dim: usize,
    prior: Vec<f64>,
    /// `Some` while strata are frozen constants; `None` when they are the
    /// trailing trainable tensor.
    frozen_strata: Option<Matrix>,
}

impl Arch {
    fn classifier_width(&self) -> usize {
        match &self.head {
            Some(head) => head.combinator.width(self.feature_dim),
            None => self.feature_dim,
        }
    }

    fn classifier_rows(&self) -> usize {
        if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        }
    }

    fn init_tensors(&self, rng: &mut ChaCha8Rng) -> Vec<Matrix> {
        let mut tensors = Vec::new();
        if let AggregatorKind::Attention { hidden } = self.kind {
            tensors.push(xavier(rng, hidden, self.feature_dim));
            tensors.push(xavier(rng, hidden, 1));
        }
        // The linear head starts at zero: at the pinned learning rate a
        // random start leaves nuisance-direction weights that never wash
        // out within the epoch budget.
        tensors.push(Matrix::zeros(self.classifier_rows(), self.classifier_width()));
        tensors.push(Matrix::zeros(self.classifier_rows(), 1));
        if let Some(head) = &self.head {
            tensors.push(xavier(rng, head.joint_dim, self.feature_dim));
            tensors.push(xavier(rng, head.joint_dim, self.feature_dim));
        }
        tensors
    }

    /// Builds the per-bag loss. `params` follow the layout above; instances
    /// enter as constants.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        params: &[ValueId],
        instances: &Matrix,
        label: usize,
    ) -> Result<ValueId> {
        let mut cursor = 0;
        let bag_feature = match self.kind {
            AggregatorKind::Attention { .. } => {
                let x = tape.input(instances.clone())?;
                let (feature, _) =
                    attention_pool_on(tape, x, params[cursor], params[cursor + 1])?;
                cursor += 2;
                feature
            }
            kind => {
                let (pooled, _) = pool(instances, &kind, None)?;
                tape.input(Matrix::column(&pooled)?)?
            }
        };
        let clf_w = params[cursor];
        let clf_b = params[cursor + 1];
        cursor += 2;

        let clf_input = match &self.head {
            None => bag_feature,
            Some(head) => {
                let proj_bag = params[cursor];
                let proj_dict = params[cursor + 1];
                cursor += 2;
                let strata = match &head.frozen_strata {
                    Some(frozen) => tape.input(frozen.clone())?,
                    None => {
                        let id = params[cursor];
                        cursor += 1;
                        id
                    }
                };
                let (combined, _) = intervention_head_on(
                    tape,
                    bag_feature,
                    strata,
                    proj_bag,
                    proj_dict,
                    &head.prior,
                    head.combinator,
                )?;
                combined
            }
        };
        debug_assert_eq!(cursor, params.len());

        let probs = classifier_on(tape, clf_input, clf_w, clf_b)?;
        if self.num_classes == 2 {
            bce_on_tape(tape, probs, label as f64)
        } else {
            let mut one_hot = vec![0.0; self.num_classes];
            one_hot[label] = 1.0;
            let pick = tape.input(Matrix::from_vec(1, self.num_classes, one_hot)?)?;
            let p = tape.matmul(pick, probs)?;
            let p = tape.clamp(p, PROB_EPS, 1.0 - PROB_EPS)?;
            let lp = tape.ln(p)?;
            tape.scale(lp, -1.0)
        }
    }

    fn assemble(&self, tensors: &[Matrix], dict: Option<&ConfounderDictionary>) -> ModelParams {
        let mut cursor = 0;
        let (attn_hidden, attn_score) = match self.kind {
            AggregatorKind::Attention { .. } => {
                cursor += 2;
                (Some(tensors[0].clone()), Some(tensors[1].clone()))
            }
            _ => (None, None),
        };
        let clf_weight = tensors[cursor].clone();
        let clf_bias = tensors[cursor + 1].clone();
        cursor += 2;
        let (proj_bag, proj_dict, combinator) = match &self.head {
            Some(head) => {
                let pair = (
                    Some(tensors[cursor].clone()),
                    Some(tensors[cursor + 1].clone()),
                );
                (pair.0, pair.1, Some(head.combinator))
            }
            None => (None, None, None),
        };
        let _ = dict;
        ModelParams {
            agg: self.kind,
            attn_hidden,
            attn_score,
            clf_weight,
            clf_bias,
            proj_bag,
            proj_dict,
            combinator,
            feature_dim: self.feature_dim,
            num_classes: self.num_classes,
        }
    }
}

fn bce_on_tape(tape: &mut Tape, prob: ValueId, label: f64) -> Result<ValueId> {
    let p = tape.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)?;
    let ln_p = tape.ln(p)?;
    let pos = tape.scale(ln_p, -label)?;
    let neg_p = tape.scale(p, -1.0)?;
    let one_minus = tape.add_scalar(neg_p, 1.0)?;
    let ln_q = tape.ln(one_minus)?;
    let neg = tape.scale(ln_q, -(1.0 - label))?;
    tape.add(pos, neg)
}

/// Glorot-style uniform init: U(+-sqrt(6/(fan_in+fan_out))).
fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    weight_decay: f64,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    fn new(cfg: &TrainConfig, tensors: &[Matrix]) -> Self {
        Self {
            kind: cfg.optimizer,
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            step: 0,
            first_moment: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
            second_moment: tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    fn apply(&mut self, tensors: &mut [Matrix], grads: &[Matrix]) {
        self.step += 1;
        for (i, tensor) in tensors.iter_mut().enumerate() {
            let data = tensor.as_mut_slice();
            let grad = grads[i].as_slice();
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in data.iter_mut().zip(grad) {
                        let g = g + self.weight_decay * *w;
                        *w -= self.learning_rate * g;
                    }
                }
                OptimizerKind::Adam {
                    beta1,
                    beta2,
                    epsilon,
                } => {
                    let bias1 = 1.0 - beta1.powi(self.step as i32);
                    let bias2 = 1.0 - beta2.powi(self.step as i32);
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    for (j, (w, &g)) in data.iter_mut().zip(grad).enumerate() {
                        let g = g + self.weight_decay * *w;
                        m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                        let m_hat = m[j] / bias1;
                        let v_hat = v[j] / bias2;
                        *w -= self.learning_rate * m_hat / (v_hat.sqrt() + epsilon);
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// training loops
// ---------------------------------------------------------------------------

fn run_training(
    dataset: &Dataset,
    arch: &Arch,
    cfg: &TrainConfig,
    dict: Option<&ConfounderDictionary>,
) -> Result<(Vec<Matrix>, Vec<EpochStats>)> {
    cfg.validate()?;
    dataset.validate()?;

    let learnable = arch
        .head
        .as_ref()
        .is_some_and(|h| h.frozen_strata.is_none());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut tensors = arch.init_tensors(&mut rng);
    if learnable {
        // learnable-dictionary mode: strata trail the tensor list
        let dict = dict.expect("learnable head always has a dictionary");
        tensors.push(dict.strata.clone());
    }
    let mut optimizer = Optimizer::new(cfg, &tensors);
    let mut train_indices: Vec<usize> = dataset
        .bags
        .iter()
        .enumerate()
        .filter(|(_, b)| b.split == crate::data::Split::Train)
        .map(|(i, _)| i)
        .collect();
    if train_indices.is_empty() {
        return Err(Error::InvalidDataset("train split is empty".into()));
    }

    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        train_indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for &bag_idx in &train_indices {
            let bag = &dataset.bags[bag_idx];
            let step = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let ids: Vec<ValueId> = tensors
                    .iter()
                    .map(|t| tape.input(t.clone()))
                    .collect::<Result<_>>()?;
                let loss = arch.loss_on_tape(&mut tape, &ids, &bag.instances, bag.label)?;
                let loss_value = tape.scalar(loss)?;
                let grads = tape.backward(loss)?;
                let grad_mats: Vec<Matrix> =
                    ids.iter().map(|&id| grads.get(id).clone()).collect();
                optimizer.apply(&mut tensors, &grad_mats);
                Ok(loss_value)
            })();
            match step {
                Ok(value) => loss_sum += value,
                Err(Error::NonFinite(reason)) => {
                    return Err(Error::Diverged { epoch, reason });
                }
                Err(other) => return Err(other),
            }
        }

        let (test_accuracy, test_auc) = epoch_test_metrics(dataset, arch, &tensors, dict)?;
        trace.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_indices.len() as f64,
            test_accuracy,
            test_auc,
        });
    }
    Ok((tensors, trace))
}

fn dict_from_tensors(
    arch: &Arch,
    tensors: &[Matrix],
    base: &ConfounderDictionary,
) -> ConfounderDictionary {
    let mut dict = base.clone();
    if arch
        .head
        .as_ref()
        .is_some_and(|h| h.frozen_strata.is_none())
    {
        dict.strata = tensors[tensors.len() - 1].clone();
        dict.frozen = false;
    }
    dict
}

fn epoch_test_metrics(
    dataset: &Dataset,
    arch: &Arch,
    tensors: &[Matrix],
    dict: Option<&ConfounderDictionary>,
) -> Result<(Option<f64>, Option<f64>)> {
    if dataset.test_bags().next().is_none() {
        return Ok((None, None));
    }
    let params = arch.assemble(tensors, dict);
    let eval_dict = dict.map(|d| dict_from_tensors(arch, tensors, d));
    let outcome = evaluate(dataset, &params, eval_dict.as_ref())?;
    Ok((Some(outcome.accuracy), outcome.auc))
}

/// Trains an aggregator + classifier on the train split (the baseline
/// stage). Returns the checkpoint and the per-epoch trace.
pub fn train_stage2(
    dataset: &Dataset,
    kind: &AggregatorKind,
    cfg: &TrainConfig,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    let arch = Arch {
        kind: *kind,
        feature_dim: dataset.feature_dim,
        num_classes: dataset.num_classes,
        head: None,
    };
    let (tensors, trace) = run_training(dataset, &arch, cfg, None)?;
    Ok((arch.assemble(&tensors, None), trace))
}

/// Baseline training continued for `epochs + extra_epochs`; the control that
/// answers whether longer training alone reproduces the adjusted model's
/// gains.
pub fn train_longer_control(
    dataset: &Dataset,
    kind: &AggregatorKind,
    cfg: &TrainConfig,
    extra_epochs: usize,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    let extended = TrainConfig {
        epochs: cfg.epochs + extra_epochs,
        ..cfg.clone()
    };
    train_stage2(dataset, kind, &extended)
}

/// Interventional training: fresh aggregator, classifier and projections over
/// a built dictionary. Frozen dictionaries are never written to; learnable
/// mode returns the updated dictionary with `frozen = false`.
pub fn train_stage3(
    dataset: &Dataset,
    dict: &ConfounderDictionary,
    kind: &AggregatorKind,
    cfg: &TrainConfig,
    opts: &Stage3Options,
) -> Result<(ModelParams, ConfounderDictionary, Vec<EpochStats>)> {
    dict.validate()?;
    if dict.dim() != dataset.feature_dim {
        return Err(Error::DimMismatch(format!(
            "dictionary dim {} vs dataset dim {}",
            dict.dim(),
            dataset.feature_dim
        )));
    }
    if opts.joint_dim == 0 {
        return Err(Error::InvalidArgument("joint dimension must be >= 1".into()));
    }
    let joint_dim = if opts.joint_dim > dataset.feature_dim {
        log::warn!(
            "joint dimension {} clamped to feature dimension {}",
            opts.joint_dim,
            dataset.feature_dim
        );
        dataset.feature_dim
    } else {
        opts.joint_dim
    };
    let learnable = opts.learnable_dict || !dict.frozen;

    let arch = Arch {
        kind: *kind,
        feature_dim: dataset.feature_dim,
        num_classes: dataset.num_classes,
        head: Some(HeadArch {
            combinator: opts.combinator,
            joint_dim,
            prior: dict.prior.clone(),
            frozen_strata: if learnable {
                None
            } else {
                Some(dict.strata.clone())
            },
        }),
    };
    let (tensors, trace) = run_training(dataset, &arch, cfg, Some(dict))?;
    let out_dict = dict_from_tensors(&arch, &tensors, dict);
    Ok((arch.assemble(&tensors, Some(dict)), out_dict, trace))
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub accuracy: f64,
    /// Present for binary tasks when both classes appear in the test split.
    pub auc: Option<f64>,
    pub confusion: ConfusionMetrics,
    pub predictions: Vec<usize>,
    /// Positive-class probabilities (binary) or decision margins.
    pub scores: Vec<f64>,
    pub labels: Vec<usize>,
}

fn outcome_from_scores(
    predictions: Vec<usize>,
    scores: Vec<f64>,
    labels: Vec<usize>,
    num_classes: usize,
) -> Result<EvalOutcome> {
    let confusion = confusion_metrics(&predictions, &labels, num_classes)?;
    let both_present = labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1);
    let auc_value = if num_classes == 2 && both_present {
        Some(auc(&scores, &labels)?)
    } else {
        None
    };
    Ok(EvalOutcome {
        accuracy: confusion.accuracy,
        auc: auc_value,
        confusion,
        predictions,
        scores,
        labels,
    })
}

/// Evaluates a checkpoint on the test split. Interventional checkpoints need
/// their dictionary.
pub fn evaluate(
    dataset: &Dataset,
    params: &ModelParams,
    dict: Option<&ConfounderDictionary>,
) -> Result<EvalOutcome> {
    params.validate()?;
    let mut predictions = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in dataset.test_bags() {
        let probs = match (params.has_intervention(), dict) {
            (true, Some(dict)) => interventional_forward(&bag.instances, params, dict)?,
            (true, None) => {
                return Err(Error::InvalidArgument(
                    "interventional checkpoint needs its dictionary".into(),
                ))
            }
            (false, _) => crate::agg::baseline_forward(&bag.instances, params)?,
        };
        let (pred, score) = decide(&probs);
        predictions.push(pred);
        scores.push(score);
        labels.push(bag.label);
    }
    if predictions.is_empty() {
        return Err(Error::InvalidDataset("test split is empty".into()));
    }
    outcome_from_scores(predictions, scores, labels, params.num_classes)
}

/// Class decision from classifier output; binary threshold is 0.5.
fn decide(probs: &[f64]) -> (usize, f64) {
    if probs.len() == 1 {
        let p = probs[0];
        (usize::from(p >= 0.5), p)
    } else {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        (best, probs.get(1).copied().unwrap_or(probs[best]))
    }
}

/// Treats a class-specific dictionary as a nearest-stratum classifier over
/// pooled bag features. Binary scores are the distance margin between the
/// nearest strata of the two classes.
pub fn evaluate_knn(
    dataset: &Dataset,
    params: &ModelParams,
    dict: &ConfounderDictionary,
) -> Result<EvalOutcome> {
    let mut predictions = Vec::new();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for bag in dataset.test_bags() {
        let (feature, _) = pool(&bag.instances, &params.agg, params.attention_weights())?;
        predictions.push(knn_classify(&feature, dict)?);
        labels.push(bag.label);
        if dataset.num_classes == 2 {
            let mut best = [f64::INFINITY; 2];
            for i in 0..dict.k() {
                let class = dict.stratum_class(i)?;
                let dist = crate::matrix::euclidean_sq(&feature, dict.strata.row(i));
                if dist < best[class] {
                    best[class] = dist;
                }
            }
            scores.push(best[0] - best[1]);
        } else {
            scores.push(0.0);
        }
    }
    if predictions.is_empty() {
        return Err(Error::InvalidDataset("test split is empty".into()));
    }
    outcome_from_scores(predictions, scores, labels, dataset.num_classes)
}

/// Writes a per-epoch TSV trace: `epoch`, `train_loss`, `test_acc`,
/// `test_auc`.
pub fn write_trace(stats: &[EpochStats], path: &std::path::Path) -> Result<()> {
    let mut text = String::from("epoch\ttrain_loss\ttest_acc\ttest_auc\n");
    for s in stats {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "na".into());
        text.push_str(&format!(
            "{}\t{:.6}\t{}\t{}\n",
            s.epoch,
            s.train_loss,
            fmt(s.test_accuracy),
            fmt(s.test_auc)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gradient audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub cases: usize,
    pub max_rel_err: f64,
    pub worst_case: String,
}

/// Audits analytic gradients of randomly drawn training graphs against
/// central finite differences. Covers both stages, every combinator, frozen
/// and learnable dictionaries, and non-attention aggregators.
pub fn gradient_check_suite(seed: u64, cases: usize) -> Result<GradCheckReport> {
    let mut max_rel_err = 0.0f64;
    let mut worst_case = String::new();
    for case in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(case as u64);

        let d = rng.random_range(1..=8usize);
        let n = rng.random_range(1..=5usize);
        let hidden = rng.random_range(1..=4usize);
        let k = rng.random_range(1..=4usize);
        let joint = rng.random_range(1..=4usize).min(d);
        let num_classes = if case % 7 == 6 { 3 } else { 2 };
        let combinator = [Combinator::Concat, Combinator::Add, Combinator::Sub][case % 3];
        let learnable = case % 2 == 1;
        let kind = match case % 5 {
            3 => AggregatorKind::Max,
            4 => AggregatorKind::Mean,
            _ => AggregatorKind::Attention { hidden },
        };
        let stage2_only = case % 5 == 2;
        let label = rng.random_range(0..num_classes);
        let instances = Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let strata = Matrix::from_fn(k, d, |_, _| rng.random_range(-1.0..1.0));

        let arch = Arch {
            kind,
            feature_dim: d,
            num_classes,
            head: if stage2_only {
                None
            } else {
                Some(HeadArch {
                    combinator,
                    joint_dim: joint,
                    prior: ConfounderDictionary::uniform_prior(k),
                    frozen_strata: if learnable { None } else { Some(strata.clone()) },
                })
            },
        };
        let mut params = arch.init_tensors(&mut rng);
        if !stage2_only && learnable {
            params.push(strata.clone());
        }
        // nonzero bias exercises its gradient path too
        for tensor in params.iter_mut() {
            if tensor.len() == 1 {
                tensor.set(0, 0, rng.random_range(-0.5..0.5));
            }
        }

        // h = 1e-4: large enough that rounding noise in the central
        // difference stays below the truncation term on coordinates whose
        // gradients are themselves ~1e-5
        let err = finite_diff_check(
            |tape, ids| arch.loss_on_tape(tape, ids, &instances, label),
            &params,
            1e-4,
        )?;
        if err > max_rel_err {
            max_rel_err = err;
            worst_case = format!(
                "case {case}: d={d} n={n} k={k} l={joint} {} {} {}",
                kind.as_str(),
                combinator.as_str(),
                if stage2_only {
                    "stage2"
                } else if learnable {
                    "learnable"
                } else {
                    "frozen"
                }
            );
        }
    }
    Ok(GradCheckReport {
        cases,
        max_rel_err,
        worst_case,
    })
}
