//! Seeded generator of confounded bag datasets.
//!
//! Each bag carries a hidden context that shifts every instance by a fixed
//! context direction, while the label is determined solely by the presence
//! of key instances shifted along a class direction. Context directions are
//! orthogonal to class directions, so context carries zero class-causal
//! signal; a sampling bias couples context and label anyway, with separate
//! strengths per split. That reproduces the situation where a model can
//! score well by reading the context during training and then fails once
//! the context-label coupling changes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Bag, Dataset, Split};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::store::fnv1a64;

/// Generator configuration. Defaults are the benchmark used by the
/// acceptance runs.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub feature_dim: usize,
    pub num_classes: usize,
    pub num_contexts: usize,
    /// Context-label coupling on the train split, in [0.5, 1]. At 0.5 the
    /// context is uniform regardless of label (independent); at 1.0 every
    /// bag lands in the context its label prefers. With two contexts this
    /// coincides with the probability of drawing the preferred context.
    pub bias_train: f64,
    /// Same for the test split.
    pub bias_test: f64,
    /// Range of the key-instance fraction per positive bag.
    pub key_fraction: (f64, f64),
    /// Inclusive range of instances per bag.
    pub bag_size: (usize, usize),
    /// Magnitude of the additive context direction.
    pub context_strength: f64,
    /// Magnitude of the key-instance mean shift.
    pub signal_strength: f64,
    /// Expected Euclidean norm of the per-instance noise (isotropic with
    /// covariance `noise_sigma^2 / d * I`), so noise, signal and context
    /// strengths share one scale regardless of the feature dimension.
    pub noise_sigma: f64,
    pub train_bags: usize,
    pub test_bags: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            num_classes: 2,
            num_contexts: 4,
            bias_train: 0.95,
            bias_test: 0.5,
            key_fraction: (0.05, 0.2),
            bag_size: (20, 100),
            context_strength: 1.0,
            signal_strength: 1.0,
            noise_sigma: 1.0,
            train_bags: 200,
            test_bags: 200,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let (n_min, n_max) = self.bag_size;
        let (f_min, f_max) = self.key_fraction;
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.num_contexts < 2 {
            return Err(Error::InvalidArgument("need at least 2 contexts".into()));
        }
        if self.feature_dim < self.num_classes + self.num_contexts {
            return Err(Error::InvalidArgument(format!(
                "feature_dim {} too small to orthogonalize {} class + {} context directions",
                self.feature_dim, self.num_classes, self.num_contexts
            )));
        }
        for (name, p) in [("bias_train", self.bias_train), ("bias_test", self.bias_test)] {
            if !(0.5..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!(
                    "{name}={p} outside [0.5, 1]"
                )));
            }
        }
        if !(0.0..=1.0).contains(&f_min) || !(0.0..=1.0).contains(&f_max) || f_min > f_max {
            return Err(Error::InvalidArgument(format!(
                "key_fraction range ({f_min}, {f_max}) invalid"
            )));
        }
        if n_min < 1 || n_min > n_max {
            return Err(Error::InvalidArgument(format!(
                "bag_size range ({n_min}, {n_max}) invalid"
            )));
        }
        if f_min * (n_min as f64) < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "key_fraction {f_min} times minimum bag size {n_min} is below one key \
                 instance; positive bags would lose their defining instance"
            )));
        }
        if self.context_strength < 0.0 || self.signal_strength < 0.0 || self.noise_sigma < 0.0 {
            return Err(Error::InvalidArgument(
                "strengths and noise must be non-negative".into(),
            ));
        }
        if self.train_bags == 0 {
            return Err(Error::InvalidArgument("train_bags must be positive".into()));
        }
        Ok(())
    }

    /// Stable identifier of this configuration, used as dataset provenance.
    pub fn provenance(&self) -> String {
        let canon = format!(
            "d={};classes={};contexts={};bias_train={};bias_test={};key={:?};size={:?};\
             gamma={};signal={};sigma={};train={};test={};seed={}",
            self.feature_dim,
            self.num_classes,
            self.num_contexts,
            self.bias_train,
            self.bias_test,
            self.key_fraction,
            self.bag_size,
            self.context_strength,
            self.signal_strength,
            self.noise_sigma,
            self.train_bags,
            self.test_bags,
            self.seed
        );
        format!("synth:{:016x}", fnv1a64(canon.as_bytes()))
    }
}

/// Per-bag generation record; the dataset itself never exposes which
/// instances are keys.
#[derive(Debug, Clone, Copy)]
pub struct BagDetail {
    pub key_count: usize,
}

// Stream reserved for drawing the direction vectors.
const DIRECTION_STREAM: u64 = u64::MAX;

fn bag_rng(seed: u64, global_index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(global_index);
    rng
}

/// Unit class directions and unit context directions, mutually orthogonal.
/// Degenerate draws are redone until elimination is stable.
pub fn class_context_directions(config: &GenConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let d = config.feature_dim;
    let total = config.num_classes + config.num_contexts;
    let mut rng = bag_rng(config.seed, DIRECTION_STREAM);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(total);
    while basis.len() < total {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        for prev in &basis {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // near-parallel draw, try again
        }
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    let contexts = basis.split_off(config.num_classes);
    (basis, contexts)
}

fn sample_context(rng: &mut ChaCha8Rng, label: usize, bias: f64, num_contexts: usize) -> u32 {
    let preferred = label % num_contexts;
    // bias 0.5 -> uniform over all contexts, bias 1.0 -> always preferred
    let k = num_contexts as f64;
    let p_preferred = 1.0 / k + (2.0 * bias - 1.0) * (1.0 - 1.0 / k);
    if rng.random::<f64>() < p_preferred {
        preferred as u32
    } else {
        // uniform over the remaining contexts
        let r = rng.random_range(0..num_contexts - 1);
        (if r >= preferred { r + 1 } else { r }) as u32
    }
}

/// Generates a dataset along with per-bag key counts.
pub fn generate_detailed(config: &GenConfig) -> Result<(Dataset, Vec<BagDetail>)> {
    config.validate()?;
    let (class_dirs, context_dirs) = class_context_directions(config);
    let d = config.feature_dim;
    let total = config.train_bags + config.test_bags;
    let mut bags = Vec::with_capacity(total);
    let mut details = Vec::with_capacity(total);

    for global in 0..total {
        let split = if global < config.train_bags {
            Split::Train
        } else {
            Split::Test
        };
        let bias = match split {
            Split::Train => config.bias_train,
            Split::Test => config.bias_test,
        };
        let local = match split {
            Split::Train => global,
            Split::Test => global - config.train_bags,
        };
        // independent substream per bag: output does not depend on the order
        // bags are generated in
        let mut rng = bag_rng(config.seed, global as u64);

        let n = rng.random_range(config.bag_size.0..=config.bag_size.1);
        let label = rng.random_range(0..config.num_classes);
        let context = sample_context(&mut rng, label, bias, config.num_contexts);
        let key_fraction = rng.random_range(config.key_fraction.0..=config.key_fraction.1);
        // a bag is positive exactly when it holds at least one key instance
        let key_count = if label == 0 {
            0
        } else {
            ((key_fraction * n as f64).round() as usize).clamp(1, n)
        };

        let class_dir = &class_dirs[label];
        let context_dir = &context_dirs[context as usize];
        let noise_scale = config.noise_sigma / (d as f64).sqrt();
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let is_key = i < key_count;
            for j in 0..d {
                let signal = if is_key {
                    config.signal_strength * class_dir[j]
                } else {
                    0.0
                };
                let noise: f64 = rng.sample(StandardNormal);
                data.push(signal + noise_scale * noise + config.context_strength * context_dir[j]);
            }
        }

        bags.push(Bag {
            bag_id: format!("{}_{local:05}", split.as_str()),
            instances: Matrix::from_vec(n, d, data)?,
            label,
            context_id: context,
            split,
        });
        details.push(BagDetail { key_count });
    }

    let dataset = Dataset::new(bags, d, config.num_classes, config.provenance())?;
    Ok((dataset, details))
}

/// Generates a dataset. Fully deterministic given the config.
pub fn generate(config: &GenConfig) -> Result<Dataset> {
    Ok(generate_detailed(config)?.0)
}

/// Dataset diagnostics: label/context contingency counts, per-context
/// instance means, and key-instance rates when generation details are
/// available.
#[derive(Debug, Clone)]
pub struct Summary {
    pub total_bags: usize,
    pub num_classes: usize,
    pub num_contexts: usize,
    /// `contingency[class][context]`, train and test combined.
    pub contingency: Vec<Vec<usize>>,
    /// Mean instance vector per context.
    pub per_context_means: Vec<Vec<f64>>,
    /// Instances per context.
    pub per_context_instances: Vec<usize>,
    /// Mean key-instance fraction per class, if details were supplied.
    pub key_rates: Option<Vec<f64>>,
}

pub fn summarize(dataset: &Dataset, details: Option<&[BagDetail]>) -> Result<Summary> {
    dataset.validate()?;
    if let Some(d) = details {
        if d.len() != dataset.bags.len() {
            return Err(Error::InvalidArgument(format!(
                "{} details for {} bags",
                d.len(),
                dataset.bags.len()
            )));
        }
    }
    let num_contexts = dataset
        .bags
        .iter()
        .map(|b| b.context_id as usize + 1)
        .max()
        .unwrap_or(1);
    let mut contingency = vec![vec![0usize; num_contexts]; dataset.num_classes];
    let mut means = vec![vec![0.0; dataset.feature_dim]; num_contexts];
    let mut counts = vec![0usize; num_contexts];
    for bag in &dataset.bags {
        let ctx = bag.context_id as usize;
        contingency[bag.label][ctx] += 1;
        for i in 0..bag.num_instances() {
            for (m, &v) in means[ctx].iter_mut().zip(bag.instances.row(i)) {
                *m += v;
            }
        }
        counts[ctx] += bag.num_instances();
    }
    for (mean, &count) in means.iter_mut().zip(&counts) {
        if count > 0 {
            for m in mean.iter_mut() {
                *m /= count as f64;
            }
        }
    }
    let key_rates = details.map(|details| {
        let mut frac = vec![0.0; dataset.num_classes];
        let mut per_class = vec![0usize; dataset.num_classes];
        for (bag, det) in dataset.bags.iter().zip(details) {
            frac[bag.label] += det.key_count as f64 / bag.num_instances() as f64;
            per_class[bag.label] += 1;
        }
        for (f, &c) in frac.iter_mut().zip(&per_class) {
            if c > 0 {
                *f /= c as f64;
            }
        }
        frac
    });
    Ok(Summary {
        total_bags: dataset.bags.len(),
        num_classes: dataset.num_classes,
        num_contexts,
        contingency,
        per_context_means: means,
        per_context_instances: counts,
        key_rates,
    })
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "bags: {}", self.total_bags)?;
        writeln!(f, "label x context counts:")?;
        for (label, row) in self.contingency.iter().enumerate() {
            write!(f, "  class {label}:")?;
            for count in row {
                write!(f, " {count:6}")?;
            }
            writeln!(f)?;
        }
        if let Some(rates) = &self.key_rates {
            write!(f, "mean key fraction per class:")?;
            for r in rates {
                write!(f, " {r:.3}")?;
            }
            writeln!(f)?;
        }
        for (ctx, count) in self.per_context_instances.iter().enumerate() {
            let norm: f64 = self.per_context_means[ctx]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            writeln!(f, "context {ctx}: {count} instances, mean norm {norm:.3}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> GenConfig {
        GenConfig {
            feature_dim: 8,
            num_contexts: 2,
            bag_size: (4, 8),
            key_fraction: (0.25, 0.5),
            train_bags: 30,
            test_bags: 10,
            ..GenConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = tiny_config();
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn positive_iff_key_instance_present() {
        let (ds, details) = generate_detailed(&tiny_config()).unwrap();
        for (bag, det) in ds.bags.iter().zip(&details) {
            assert_eq!(bag.label > 0, det.key_count >= 1, "bag {}", bag.bag_id);
        }
    }

    #[test]
    fn directions_are_orthonormal() {
        let config = GenConfig::default();
        let (classes, contexts) = class_context_directions(&config);
        assert_eq!(classes.len(), 2);
        assert_eq!(contexts.len(), 4);
        let all: Vec<&Vec<f64>> = classes.iter().chain(&contexts).collect();
        for (i, a) in all.iter().enumerate() {
            for (j, b) in all.iter().enumerate() {
                let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9, "pair ({i},{j}) dot {dot}");
            }
        }
    }

    #[test]
    fn full_bias_with_two_contexts_forces_diagonal_contingency() {
        let config = GenConfig {
            bias_train: 1.0,
            bias_test: 1.0,
            ..tiny_config()
        };
        let ds = generate(&config).unwrap();
        for bag in &ds.bags {
            assert_eq!(bag.context_id as usize, bag.label % config.num_contexts);
        }
        let summary = summarize(&ds, None).unwrap();
        assert_eq!(summary.contingency[0][1], 0);
        assert_eq!(summary.contingency[1][0], 0);
    }

    #[test]
    fn unbiased_two_context_sampling_decouples_label_and_context() {
        // 10^4 bags; the preferred-context rate must sit within 3 sigma of 1/2
        let config = GenConfig {
            feature_dim: 4,
            num_contexts: 2,
            bias_train: 0.5,
            bias_test: 0.5,
            bag_size: (2, 3),
            key_fraction: (0.5, 0.5),
            train_bags: 10_000,
            test_bags: 0,
            ..GenConfig::default()
        };
        let ds = generate(&config).unwrap();
        let preferred = ds
            .bags
            .iter()
            .filter(|b| b.context_id as usize == b.label % 2)
            .count() as f64;
        let n = ds.bags.len() as f64;
        let rate = preferred / n;
        let three_sigma = 3.0 * 0.5 / n.sqrt();
        assert!(
            (rate - 0.5).abs() < three_sigma,
            "preferred-context rate {rate} deviates from 0.5"
        );
    }

    #[test]
    fn zero_context_strength_equalizes_context_means() {
        let config = GenConfig {
            feature_dim: 6,
            num_contexts: 2,
            context_strength: 0.0,
            signal_strength: 0.0,
            bag_size: (50, 50),
            key_fraction: (0.1, 0.1),
            train_bags: 400,
            test_bags: 0,
            ..GenConfig::default()
        };
        let ds = generate(&config).unwrap();
        let summary = summarize(&ds, None).unwrap();
        // ~10^4 instances per context, sigma=1: the mean standard error is
        // about 0.01 per coordinate
        for j in 0..config.feature_dim {
            let diff =
                (summary.per_context_means[0][j] - summary.per_context_means[1][j]).abs();
            assert!(diff < 0.1, "coordinate {j} differs by {diff}");
        }
    }

    #[test]
    fn summary_counts_cover_the_dataset() {
        let (ds, details) = generate_detailed(&tiny_config()).unwrap();
        let summary = summarize(&ds, Some(&details)).unwrap();
        let total: usize = summary.contingency.iter().flatten().sum();
        assert_eq!(total, ds.bags.len());
        let rates = summary.key_rates.unwrap();
        assert_eq!(rates[0], 0.0);
        assert!(rates[1] >= 0.25 && rates[1] <= 0.5);
    }

    #[test]
    fn sub_unit_key_requirement_is_rejected() {
        let config = GenConfig {
            key_fraction: (0.01, 0.2),
            bag_size: (20, 50),
            ..GenConfig::default()
        };
        assert!(config.validate().is_err());
    }
}
