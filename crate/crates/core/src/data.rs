//! Core dataset types: bags of instance features, datasets, confounder
//! dictionaries, and model parameters.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Dataset split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split '{other}'"))),
        }
    }
}

/// A labeled set of instance feature vectors.
///
/// `context_id` records the hidden context stratum a bag was generated under.
/// It exists for diagnostics and harness checks only; no model reads it, and
/// blind loading zeroes it out.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub bag_id: String,
    /// n x d instance features, one row per instance.
    pub instances: Matrix,
    /// 0-based class index.
    pub label: usize,
    pub context_id: u32,
    pub split: Split,
}

impl Bag {
    pub fn num_instances(&self) -> usize {
        self.instances.rows()
    }
}

/// A collection of bags sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub feature_dim: usize,
    pub num_classes: usize,
    /// Where the features came from: generator config hash or ingest path.
    pub provenance: String,
}

impl Dataset {
    pub fn new(
        bags: Vec<Bag>,
        feature_dim: usize,
        num_classes: usize,
        provenance: String,
    ) -> Result<Self> {
        let ds = Self {
            bags,
            feature_dim,
            num_classes,
            provenance,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bags.is_empty() {
            return Err(Error::InvalidDataset("dataset has no bags".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidDataset(format!(
                "need at least 2 classes, got {}",
                self.num_classes
            )));
        }
        let mut train_seen = vec![false; self.num_classes];
        for bag in &self.bags {
            if bag.num_instances() == 0 {
                return Err(Error::InvalidDataset(format!(
                    "bag '{}' has no instances",
                    bag.bag_id
                )));
            }
            if bag.instances.cols() != self.feature_dim {
                return Err(Error::InvalidDataset(format!(
                    "bag '{}' has feature dimension {}, dataset says {}",
                    bag.bag_id,
                    bag.instances.cols(),
                    self.feature_dim
                )));
            }
            if bag.label >= self.num_classes {
                return Err(Error::InvalidDataset(format!(
                    "bag '{}' has label {} but only {} classes exist",
                    bag.bag_id, bag.label, self.num_classes
                )));
            }
            if bag.split == Split::Train {
                train_seen[bag.label] = true;
            }
        }
        if let Some(missing) = train_seen.iter().position(|seen| !seen) {
            return Err(Error::InvalidDataset(format!(
                "train split has no bag of class {missing}"
            )));
        }
        Ok(())
    }

    pub fn train_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.split == Split::Train)
    }

    pub fn test_bags(&self) -> impl Iterator<Item = &Bag> {
        self.bags.iter().filter(|b| b.split == Split::Test)
    }

    /// Zeroes every context id. Trainers only ever see blinded data; the
    /// context is harness-side information.
    pub fn blind(&mut self) {
        for bag in &mut self.bags {
            bag.context_id = 0;
        }
    }
}

/// How a confounder dictionary's bag features were produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildMode {
    /// Bag features from a trained attention aggregator.
    Attention,
    /// Mean-pooled bag features; skips aggregator training entirely.
    Mean,
    /// Max-pooled bag features.
    Max,
    /// Cluster raw instance features, treating each instance as a bag of one.
    Instance,
    /// Separate clustering per class, strata ordered class-major.
    ClassSpecific { num_classes: usize },
}

impl BuildMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            BuildMode::Attention => "attention",
            BuildMode::Mean => "mean",
            BuildMode::Max => "max",
            BuildMode::Instance => "instance",
            BuildMode::ClassSpecific { .. } => "class_specific",
        }
    }
}

/// K stratum vectors approximating the values of the hidden bag context,
/// plus the prior used to weight them during adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfounderDictionary {
    /// K x d, one stratum per row.
    pub strata: Matrix,
    /// Mixing prior over strata; non-negative, sums to one.
    pub prior: Vec<f64>,
    pub build_mode: BuildMode,
    /// Strata stay fixed during interventional training unless this is false.
    pub frozen: bool,
    /// Hash of the inputs the dictionary was built from.
    pub source_hash: String,
}

impl ConfounderDictionary {
    pub fn new(
        strata: Matrix,
        prior: Vec<f64>,
        build_mode: BuildMode,
        frozen: bool,
        source_hash: String,
    ) -> Result<Self> {
        let dict = Self {
            strata,
            prior,
            build_mode,
            frozen,
            source_hash,
        };
        dict.validate()?;
        Ok(dict)
    }

    /// Uniform prior of 1/K.
    pub fn uniform_prior(k: usize) -> Vec<f64> {
        vec![1.0 / k as f64; k]
    }

    pub fn k(&self) -> usize {
        self.strata.rows()
    }

    pub fn dim(&self) -> usize {
        self.strata.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.strata.rows();
        if k == 0 {
            return Err(Error::InvalidArgument("dictionary must have K >= 1".into()));
        }
        if self.prior.len() != k {
            return Err(Error::DimMismatch(format!(
                "prior length {} but K = {k}",
                self.prior.len()
            )));
        }
        if self.prior.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("prior entries must be >= 0".into()));
        }
        let total: f64 = self.prior.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "prior sums to {total}, expected 1"
            )));
        }
        if let BuildMode::ClassSpecific { num_classes } = self.build_mode {
            if num_classes == 0 || k % num_classes != 0 {
                return Err(Error::InvalidArgument(format!(
                    "class-specific dictionary needs K divisible by {num_classes}, got K={k}"
                )));
            }
        }
        Ok(())
    }

    /// Class owning stratum row `i` of a class-specific dictionary.
    pub fn stratum_class(&self, i: usize) -> Result<usize> {
        match self.build_mode {
            BuildMode::ClassSpecific { num_classes } => Ok(i / (self.k() / num_classes)),
            _ => Err(Error::InvalidArgument(
                "stratum-class lookup requires a class-specific dictionary".into(),
            )),
        }
    }
}

/// All trainable tensors for one aggregator + classifier, with the optional
/// projection pair of the interventional head.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub agg: crate::agg::AggregatorKind,
    /// Attention hidden transform, m x d.
    pub attn_hidden: Option<Matrix>,
    /// Attention scoring vector, m x 1.
    pub attn_score: Option<Matrix>,
    /// Classifier weights: 1 x width for binary, C x width otherwise.
    pub clf_weight: Matrix,
    /// Classifier bias, rows x 1.
    pub clf_bias: Matrix,
    /// Projection of the bag feature into the joint space, l x d.
    pub proj_bag: Option<Matrix>,
    /// Projection of the dictionary into the joint space, l x d.
    pub proj_dict: Option<Matrix>,
    pub combinator: Option<crate::intervention::Combinator>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelParams {
    pub fn has_intervention(&self) -> bool {
        self.proj_bag.is_some()
    }

    /// Joint-space dimension of the interventional head, if present.
    pub fn joint_dim(&self) -> Option<usize> {
        self.proj_bag.as_ref().map(|m| m.rows())
    }

    /// Expected classifier input width for the stored combinator.
    pub fn classifier_width(&self) -> usize {
        match self.combinator {
            Some(crate::intervention::Combinator::Concat) => 2 * self.feature_dim,
            _ => self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::agg::AggregatorKind;
        let d = self.feature_dim;
        match self.agg {
            AggregatorKind::Attention { hidden } => {
                let v = self.attn_hidden.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("attention aggregator needs hidden weights".into())
                })?;
                let w = self.attn_score.as_ref().ok_or_else(|| {
                    Error::InvalidArgument("attention aggregator needs score weights".into())
                })?;
                if v.shape() != (hidden, d) || w.shape() != (hidden, 1) {
                    return Err(Error::DimMismatch(format!(
                        "attention weights {}x{} / {}x{}, expected {hidden}x{d} / {hidden}x1",
                        v.rows(),
                        v.cols(),
                        w.rows(),
                        w.cols()
                    )));
                }
            }
            _ => {
                if self.attn_hidden.is_some() || self.attn_score.is_some() {
                    return Err(Error::InvalidArgument(
                        "non-attention aggregator carries attention weights".into(),
                    ));
                }
            }
        }
        if self.proj_bag.is_some() != self.proj_dict.is_some() {
            return Err(Error::InvalidArgument(
                "projection matrices must come as a pair".into(),
            ));
        }
        if let (Some(p1), Some(p2)) = (&self.proj_bag, &self.proj_dict) {
            if p1.shape() != p2.shape() || p1.cols() != d {
                return Err(Error::DimMismatch(format!(
                    "projections {}x{} / {}x{}, expected l x {d}",
                    p1.rows(),
                    p1.cols(),
                    p2.rows(),
                    p2.cols()
                )));
            }
            if self.combinator.is_none() {
                return Err(Error::InvalidArgument(
                    "interventional head needs a combinator".into(),
                ));
            }
        }
        let width = if self.has_intervention() {
            self.classifier_width()
        } else {
            d
        };
        let out_rows = if self.num_classes == 2 {
            1
        } else {
            self.num_classes
        };
        if self.clf_weight.shape() != (out_rows, width) {
            return Err(Error::DimMismatch(format!(
                "classifier weight {}x{}, expected {out_rows}x{width}",
                self.clf_weight.rows(),
                self.clf_weight.cols()
            )));
        }
        if self.clf_bias.shape() != (out_rows, 1) {
            return Err(Error::DimMismatch(format!(
                "classifier bias {}x{}, expected {out_rows}x1",
                self.clf_bias.rows(),
                self.clf_bias.cols()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(id: &str, label: usize, split: Split) -> Bag {
        Bag {
            bag_id: id.into(),
            instances: Matrix::from_vec(2, 3, vec![0.0; 6]).unwrap(),
            label,
            context_id: 7,
            split,
        }
    }

    #[test]
    fn dataset_requires_every_class_in_train() {
        let bags = vec![bag("a", 0, Split::Train), bag("b", 1, Split::Test)];
        let err = Dataset::new(bags, 3, 2, "test".into()).unwrap_err();
        assert!(err.to_string().contains("class 1"));
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(Dataset::new(vec![], 3, 2, "test".into()).is_err());
    }

    #[test]
    fn blind_zeroes_context() {
        let bags = vec![bag("a", 0, Split::Train), bag("b", 1, Split::Train)];
        let mut ds = Dataset::new(bags, 3, 2, "test".into()).unwrap();
        ds.blind();
        assert!(ds.bags.iter().all(|b| b.context_id == 0));
    }

    #[test]
    fn dictionary_prior_must_sum_to_one() {
        let strata = Matrix::zeros(2, 3);
        let err = ConfounderDictionary::new(
            strata,
            vec![0.7, 0.7],
            BuildMode::Mean,
            true,
            String::new(),
        )
        .unwrap_err();
        assert!(err.to_string().contains("sums"));
    }

    #[test]
    fn class_specific_k_must_divide() {
        let strata = Matrix::zeros(3, 2);
        assert!(ConfounderDictionary::new(
            strata,
            ConfounderDictionary::uniform_prior(3),
            BuildMode::ClassSpecific { num_classes: 2 },
            true,
            String::new(),
        )
        .is_err());
    }

    #[test]
    fn stratum_class_mapping() {
        let dict = ConfounderDictionary::new(
            Matrix::zeros(4, 2),
            ConfounderDictionary::uniform_prior(4),
            BuildMode::ClassSpecific { num_classes: 2 },
            true,
            String::new(),
        )
        .unwrap();
        assert_eq!(dict.stratum_class(0).unwrap(), 0);
        assert_eq!(dict.stratum_class(1).unwrap(), 0);
        assert_eq!(dict.stratum_class(2).unwrap(), 1);
        assert_eq!(dict.stratum_class(3).unwrap(), 1);
    }
}
