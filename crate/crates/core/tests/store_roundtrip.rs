//! Persistence contracts: round-trips at 32-bit precision, byte-determinism,
//! and rejection of malformed files.

use deconfound_mil::agg::AggregatorKind;
use deconfound_mil::data::{Bag, BuildMode, ConfounderDictionary, Dataset, ModelParams, Split};
use deconfound_mil::intervention::Combinator;
use deconfound_mil::matrix::Matrix;
use deconfound_mil::store::*;
use deconfound_mil::synth::{generate, GenConfig};

fn sample_dataset() -> Dataset {
    generate(&GenConfig {
        feature_dim: 8,
        num_contexts: 2,
        bag_size: (2, 5),
        key_fraction: (0.5, 0.8),
        train_bags: 12,
        test_bags: 6,
        seed: 42,
        ..GenConfig::default()
    })
    .unwrap()
}

fn narrowed(ds: &Dataset) -> Dataset {
    let mut out = ds.clone();
    for bag in &mut out.bags {
        let data: Vec<f64> = bag
            .instances
            .as_slice()
            .iter()
            .map(|&v| (v as f32) as f64)
            .collect();
        bag.instances =
            Matrix::from_vec(bag.instances.rows(), bag.instances.cols(), data).unwrap();
    }
    out
}

#[test]
fn feature_store_round_trips_at_f32_precision() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    write_feature_store(&ds, dir.path()).unwrap();
    let loaded = read_feature_store(dir.path()).unwrap();
    assert_eq!(loaded, narrowed(&ds));
    assert_eq!(loaded.provenance, ds.provenance);
}

#[test]
fn writes_are_byte_deterministic() {
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    write_feature_store(&ds, da.path()).unwrap();
    write_feature_store(&ds, db.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(da.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    assert!(!names.is_empty());
    for name in names {
        let a = std::fs::read(da.path().join(&name)).unwrap();
        let b = std::fs::read(db.path().join(&name)).unwrap();
        assert_eq!(a, b, "{name:?} differs");
    }
}

#[test]
fn rewriting_a_loaded_store_is_byte_identical() {
    // f64 -> f32 is idempotent after the first narrowing
    let da = tempfile::tempdir().unwrap();
    let db = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    write_feature_store(&ds, da.path()).unwrap();
    let loaded = read_feature_store(da.path()).unwrap();
    write_feature_store(&loaded, db.path()).unwrap();
    let read = |d: &std::path::Path, n: &str| std::fs::read(d.join(n)).unwrap();
    assert_eq!(
        read(da.path(), "manifest.tsv"),
        read(db.path(), "manifest.tsv")
    );
    let first = format!("{}.bagf32", ds.bags[0].bag_id);
    assert_eq!(read(da.path(), &first), read(db.path(), &first));
}

#[test]
fn truncated_bag_file_error_names_the_bag() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    write_feature_store(&ds, dir.path()).unwrap();
    let victim = dir.path().join(format!("{}.bagf32", ds.bags[2].bag_id));
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    let err = read_feature_store(dir.path()).unwrap_err().to_string();
    assert!(err.contains(&ds.bags[2].bag_id), "error was: {err}");
}

#[test]
fn trailing_garbage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    write_feature_store(&ds, dir.path()).unwrap();
    let victim = dir.path().join(format!("{}.bagf32", ds.bags[0].bag_id));
    let mut bytes = std::fs::read(&victim).unwrap();
    bytes.extend_from_slice(&[0, 0, 0, 0]);
    std::fs::write(&victim, bytes).unwrap();
    assert!(read_feature_store(dir.path()).is_err());
}

#[test]
fn dimension_mismatch_across_bags_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    write_feature_store(&ds, dir.path()).unwrap();
    // rewrite one bag with a different d but a consistent payload
    let victim = dir.path().join(format!("{}.bagf32", ds.bags[1].bag_id));
    let n = ds.bags[1].instances.rows() as u32;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"BAGF");
    bytes.extend_from_slice(&n.to_le_bytes());
    bytes.extend_from_slice(&4u32.to_le_bytes());
    for _ in 0..(n * 4) {
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
    }
    std::fs::write(&victim, bytes).unwrap();
    let err = read_feature_store(dir.path()).unwrap_err().to_string();
    assert!(err.contains("dimension"), "error was: {err}");
}

#[test]
fn blind_loading_zeroes_contexts() {
    let dir = tempfile::tempdir().unwrap();
    let ds = sample_dataset();
    assert!(ds.bags.iter().any(|b| b.context_id != 0));
    write_feature_store(&ds, dir.path()).unwrap();
    let blind = read_feature_store_blind(dir.path()).unwrap();
    assert!(blind.bags.iter().all(|b| b.context_id == 0));
}

fn sample_dict() -> ConfounderDictionary {
    ConfounderDictionary::new(
        Matrix::from_fn(3, 4, |r, c| (r * 4 + c) as f64 / 7.0 - 0.5),
        ConfounderDictionary::uniform_prior(3),
        BuildMode::ClassSpecific { num_classes: 3 },
        true,
        "abc123".into(),
    )
    .unwrap()
}

#[test]
fn dictionary_round_trip_is_bitwise_at_f32() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.cdf32");
    let dict = sample_dict();
    save_dictionary(&dict, &path).unwrap();
    let loaded = load_dictionary(&path).unwrap();
    assert_eq!(loaded.build_mode, dict.build_mode);
    assert_eq!(loaded.frozen, dict.frozen);
    assert_eq!(loaded.source_hash, dict.source_hash);
    assert_eq!(loaded.prior.len(), 3);
    // second save is byte-identical
    let path2 = dir.path().join("dict2.cdf32");
    save_dictionary(&loaded, &path2).unwrap();
    assert_eq!(
        std::fs::read(&path).unwrap(),
        std::fs::read(&path2).unwrap()
    );
}

#[test]
fn zero_k_dictionary_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.cdf32");
    let mut bytes = Vec::new();
    bytes.extend_from_slice(b"CDIC");
    bytes.extend_from_slice(&0u32.to_le_bytes());
    bytes.extend_from_slice(&4u32.to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let err = load_dictionary(&path).unwrap_err().to_string();
    assert!(err.contains("K=0"), "error was: {err}");
}

#[test]
fn corrupted_dictionary_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dict.cdf32");
    save_dictionary(&sample_dict(), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[16] ^= 0x40; // flip a bit inside the prior block
    std::fs::write(&path, bytes).unwrap();
    let err = load_dictionary(&path).unwrap_err().to_string();
    assert!(err.contains("checksum"), "error was: {err}");
}

fn sample_params(with_head: bool) -> ModelParams {
    let d = 5;
    let width = if with_head { 2 * d } else { d };
    ModelParams {
        agg: AggregatorKind::Attention { hidden: 3 },
        attn_hidden: Some(Matrix::from_fn(3, d, |r, c| (r + c) as f64 * 0.1)),
        attn_score: Some(Matrix::from_fn(3, 1, |r, _| r as f64 - 1.0)),
        clf_weight: Matrix::from_fn(1, width, |_, c| c as f64 * 0.01 - 0.02),
        clf_bias: Matrix::from_vec(1, 1, vec![0.125]).unwrap(),
        proj_bag: with_head.then(|| Matrix::from_fn(2, d, |r, c| (r * d + c) as f64 * 0.05)),
        proj_dict: with_head.then(|| Matrix::from_fn(2, d, |r, c| (r + c) as f64 * -0.03)),
        combinator: with_head.then_some(Combinator::Concat),
        feature_dim: d,
        num_classes: 2,
    }
}

#[test]
fn checkpoint_round_trips_for_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    for (name, with_head) in [("base.ckpt", false), ("head.ckpt", true)] {
        let path = dir.path().join(name);
        let params = sample_params(with_head);
        save_params(&params, &path).unwrap();
        let loaded = load_params(&path).unwrap();
        // all sample values are exactly representable in f32
        assert_eq!(loaded, params, "{name}");
    }
}

#[test]
fn corrupted_checkpoint_fails_the_checksum() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_params(&sample_params(true), &path).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    let middle = bytes.len() / 2;
    bytes[middle] ^= 0x01;
    std::fs::write(&path, bytes).unwrap();
    let err = load_params(&path).unwrap_err().to_string();
    assert!(err.contains("checksum"), "error was: {err}");
}
