//! Confounder-dictionary construction: k-means over bag (or instance)
//! features, class-agnostic or class-specific, from one or several datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::agg::{pool, AggregatorKind, AttentionWeights};
use crate::data::{BuildMode, ConfounderDictionary, Dataset};
use crate::error::{Error, Result};
use crate::matrix::{euclidean_sq, Matrix};
use crate::store::fnv1a64;

pub const KMEANS_MAX_ITER: usize = 300;
pub const KMEANS_TOL: f64 = 1e-6;
// Lloyd's algorithm only finds a local optimum from one start; restarting
// from seeded substreams and keeping the lowest inertia makes tiny instances
// land on the global optimum in practice.
const KMEANS_RESTARTS: u64 = 10;

#[derive(Debug, Clone)]
pub struct KmeansResult {
    /// k x d centroids; exact means of their final clusters.
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared distances to the assigned centroid.
    pub inertia: f64,
    pub iterations: usize,
}

fn nearest_centroid(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for c in 0..centroids.rows() {
        let dist = euclidean_sq(point, centroids.row(c));
        if dist < best_dist {
            best_dist = dist;
            best = c;
        }
    }
    (best, best_dist)
}

fn kmeans_pp_init(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let p = points.rows();
    let mut chosen: Vec<usize> = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..p));
    let mut dist = vec![0.0f64; p];
    while chosen.len() < k {
        let mut total = 0.0;
        for (i, slot) in dist.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for &c in &chosen {
                best = best.min(euclidean_sq(points.row(i), points.row(c)));
            }
            *slot = best;
            total += best;
        }
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = p - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            // all remaining mass is on duplicates of chosen points
            (0..p).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
    }
    let d = points.cols();
    Matrix::from_fn(k, d, |r, c| points.get(chosen[r], c))
}

fn lloyd(points: &Matrix, k: usize, rng: &mut ChaCha8Rng, max_iter: usize, tol: f64) -> KmeansResult {
    let (p, d) = points.shape();
    let mut centroids = kmeans_pp_init(points, k, rng);
    let mut assignments = vec![0usize; p];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;

    for _ in 0..max_iter {
        iterations += 1;

        // assignment step; may run over points in any order, results are
        // order-independent
        let mut inertia = 0.0;
        for i in 0..p {
            let (best, dist) = nearest_centroid(points.row(i), &centroids);
            assignments[i] = best;
            inertia += dist;
        }
        debug_assert!(
            inertia <= prev_inertia + 1e-9 * (1.0 + prev_inertia.abs()),
            "inertia rose from {prev_inertia} to {inertia}"
        );
        prev_inertia = inertia;

        // re-seed clusters that lost all members to the point farthest from
        // its nearest centroid
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        let mut moved: Vec<usize> = Vec::new();
        for cluster in 0..k {
            if counts[cluster] > 0 {
                continue;
            }
            let mut farthest = None;
            let mut farthest_dist = -1.0;
            for i in 0..p {
                if moved.contains(&i) || counts[assignments[i]] <= 1 {
                    continue;
                }
                let dist = euclidean_sq(points.row(i), centroids.row(assignments[i]));
                if dist > farthest_dist {
                    farthest_dist = dist;
                    farthest = Some(i);
                }
            }
            if let Some(i) = farthest {
                counts[assignments[i]] -= 1;
                counts[cluster] += 1;
                assignments[i] = cluster;
                moved.push(i);
            }
        }

        // update step: reduce in fixed point-index order for determinism
        let mut sums = Matrix::zeros(k, d);
        for (i, &a) in assignments.iter().enumerate() {
            for j in 0..d {
                sums.set(a, j, sums.get(a, j) + points.get(i, j));
            }
        }
        for cluster in 0..k {
            debug_assert!(counts[cluster] > 0);
            for j in 0..d {
                sums.set(cluster, j, sums.get(cluster, j) / counts[cluster] as f64);
            }
        }

        let mut shift: f64 = 0.0;
        for cluster in 0..k {
            shift = shift.max(euclidean_sq(centroids.row(cluster), sums.row(cluster)).sqrt());
        }
        centroids = sums;
        if shift < tol {
            break;
        }
    }

    // The returned centroids are the exact means of the returned clusters
    // (repair included); reassigning here could empty a repaired cluster on
    // ties, so inertia is measured over the stored assignments.
    let mut inertia = 0.0;
    for (i, &a) in assignments.iter().enumerate() {
        inertia += euclidean_sq(points.row(i), centroids.row(a));
    }
    KmeansResult {
        centroids,
        assignments,
        inertia,
        iterations,
    }
}

/// Lloyd's algorithm with seeded k-means++ restarts. Stops when the largest
/// centroid movement drops below `tol` or after `max_iter` sweeps.
pub fn kmeans(points: &Matrix, k: usize, seed: u64, max_iter: usize, tol: f64) -> Result<KmeansResult> {
    let p = points.rows();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if p < k {
        return Err(Error::InvalidArgument(format!(
            "{p} points cannot form {k} clusters"
        )));
    }
    let mut best: Option<KmeansResult> = None;
    for restart in 0..KMEANS_RESTARTS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(restart);
        let result = lloyd(points, k, &mut rng, max_iter, tol);
        if best.as_ref().map_or(true, |b| result.inertia < b.inertia) {
            best = Some(result);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn pooled_features<'a>(
    bags: &[&'a crate::data::Bag],
    kind: &AggregatorKind,
    attn: Option<AttentionWeights>,
) -> Result<Matrix> {
    let d = bags[0].instances.cols();
    let mut data = Vec::with_capacity(bags.len() * d);
    for bag in bags {
        let (feature, _) = pool(&bag.instances, kind, attn)?;
        data.extend_from_slice(&feature);
    }
    Matrix::from_vec(bags.len(), d, data)
}

/// Builds a confounder dictionary by clustering features of the train bags
/// of one or more datasets.
///
/// * `Attention` pools each bag with the supplied trained aggregator.
/// * `Mean` / `Max` pool non-parametrically, skipping aggregator training.
/// * `Instance` clusters every raw instance feature.
/// * `ClassSpecific` pools with the supplied aggregator and runs a separate
///   clustering per class (K must divide evenly).
///
/// Strata are the cluster means; the prior is uniform 1/K; the dictionary
/// comes out frozen.
pub fn build_dictionary(
    datasets: &[&Dataset],
    mode: BuildMode,
    k: usize,
    kind: &AggregatorKind,
    attn: Option<AttentionWeights>,
    seed: u64,
) -> Result<ConfounderDictionary> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("no datasets supplied".into()));
    }
    let d = datasets[0].feature_dim;
    for ds in datasets {
        ds.validate()?;
        if ds.feature_dim != d {
            return Err(Error::DimMismatch(format!(
                "datasets disagree on feature dimension: {d} vs {}",
                ds.feature_dim
            )));
        }
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let train_bags: Vec<&crate::data::Bag> =
        datasets.iter().flat_map(|ds| ds.train_bags()).collect();
    if train_bags.is_empty() {
        return Err(Error::InvalidDataset("no train bags to cluster".into()));
    }

    let strata = match mode {
        BuildMode::Attention => {
            if !matches!(kind, AggregatorKind::Attention { .. }) || attn.is_none() {
                return Err(Error::InvalidArgument(
                    "attention mode needs a trained attention aggregator".into(),
                ));
            }
            let features = pooled_features(&train_bags, kind, attn)?;
            kmeans(&features, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?.centroids
        }
        BuildMode::Mean => {
            let features = pooled_features(&train_bags, &AggregatorKind::Mean, None)?;
            kmeans(&features, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?.centroids
        }
        BuildMode::Max => {
            let features = pooled_features(&train_bags, &AggregatorKind::Max, None)?;
            kmeans(&features, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?.centroids
        }
        BuildMode::Instance => {
            let total: usize = train_bags.iter().map(|b| b.num_instances()).sum();
            let mut data = Vec::with_capacity(total * d);
            for bag in &train_bags {
                data.extend_from_slice(bag.instances.as_slice());
            }
            let points = Matrix::from_vec(total, d, data)?;
            kmeans(&points, k, seed, KMEANS_MAX_ITER, KMEANS_TOL)?.centroids
        }
        BuildMode::ClassSpecific { num_classes } => {
            let max_classes = datasets.iter().map(|ds| ds.num_classes).max().unwrap();
            if num_classes != max_classes {
                return Err(Error::InvalidArgument(format!(
                    "class-specific mode says {num_classes} classes, datasets have {max_classes}"
                )));
            }
            if k % num_classes != 0 {
                return Err(Error::InvalidArgument(format!(
                    "K={k} is not divisible by {num_classes} classes"
                )));
            }
            let per_class = k / num_classes;
            let mut data = Vec::with_capacity(k * d);
            for class in 0..num_classes {
                let class_bags: Vec<&crate::data::Bag> = train_bags
                    .iter()
                    .copied()
                    .filter(|b| b.label == class)
                    .collect();
                if class_bags.is_empty() {
                    return Err(Error::InvalidDataset(format!(
                        "class {class} has no train bags to cluster"
                    )));
                }
                let features = pooled_features(&class_bags, kind, attn)?;
                let result = kmeans(
                    &features,
                    per_class,
                    seed.wrapping_add(class as u64),
                    KMEANS_MAX_ITER,
                    KMEANS_TOL,
                )?;
                data.extend_from_slice(result.centroids.as_slice());
            }
            Matrix::from_vec(k, d, data)?
        }
    };

    let mut hash_input = format!("mode={};k={k};seed={seed}", mode.as_str());
    for ds in datasets {
        hash_input.push_str(&format!(";{}:{}", ds.provenance, ds.bags.len()));
    }
    ConfounderDictionary::new(
        strata,
        ConfounderDictionary::uniform_prior(k),
        mode,
        true,
        format!("{:016x}", fnv1a64(hash_input.as_bytes())),
    )
}

/// Nearest-stratum classification against a class-specific dictionary.
/// Distance ties resolve to the lowest class index.
pub fn knn_classify(bag_feature: &[f64], dict: &ConfounderDictionary) -> Result<usize> {
    if !matches!(dict.build_mode, BuildMode::ClassSpecific { .. }) {
        return Err(Error::InvalidArgument(
            "nearest-stratum classification needs a class-specific dictionary".into(),
        ));
    }
    if bag_feature.len() != dict.dim() {
        return Err(Error::DimMismatch(format!(
            "feature length {} vs dictionary dim {}",
            bag_feature.len(),
            dict.dim()
        )));
    }
    let mut best = 0usize;
    let mut best_dist = f64::INFINITY;
    // strata are class-major, so strict < keeps the lowest class on ties
    for i in 0..dict.k() {
        let dist = euclidean_sq(bag_feature, dict.strata.row(i));
        if dist < best_dist {
            best_dist = dist;
            best = i;
        }
    }
    dict.stratum_class(best)
}
