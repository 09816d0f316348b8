//! Flat `key=value` configuration files for the generator and the benchmark
//! driver. Blank lines and `#` comments are ignored; unknown keys are
//! errors.

use std::collections::BTreeMap;
use std::path::Path;

use deconfound_mil::synth::GenConfig;
use deconfound_mil::{Error, Result};

fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("line {}: expected key=value, got '{line}'", lineno + 1))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn take<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    slot: &mut T,
) -> Result<()> {
    if let Some(value) = map.remove(key) {
        *slot = value
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad value for {key}: '{value}'")))?;
    }
    Ok(())
}

/// Applies generator keys from `map` onto `config`, removing the keys it
/// consumes.
fn apply_gen_keys(map: &mut BTreeMap<String, String>, config: &mut GenConfig) -> Result<()> {
    take(map, "feature_dim", &mut config.feature_dim)?;
    take(map, "num_classes", &mut config.num_classes)?;
    take(map, "num_contexts", &mut config.num_contexts)?;
    take(map, "bias_train", &mut config.bias_train)?;
    take(map, "bias_test", &mut config.bias_test)?;
    take(map, "key_fraction_min", &mut config.key_fraction.0)?;
    take(map, "key_fraction_max", &mut config.key_fraction.1)?;
    take(map, "bag_size_min", &mut config.bag_size.0)?;
    take(map, "bag_size_max", &mut config.bag_size.1)?;
    take(map, "context_strength", &mut config.context_strength)?;
    take(map, "signal_strength", &mut config.signal_strength)?;
    take(map, "noise_sigma", &mut config.noise_sigma)?;
    take(map, "train_bags", &mut config.train_bags)?;
    take(map, "test_bags", &mut config.test_bags)?;
    take(map, "seed", &mut config.seed)?;
    Ok(())
}

fn reject_unknown(map: BTreeMap<String, String>) -> Result<()> {
    if let Some(key) = map.into_keys().next() {
        return Err(Error::InvalidArgument(format!("unknown config key '{key}'")));
    }
    Ok(())
}

/// Generator config file: generator keys only.
pub fn load_gen_config(path: &Path, base: GenConfig) -> Result<GenConfig> {
    let mut map = parse_pairs(&std::fs::read_to_string(path)?)?;
    let mut config = base;
    apply_gen_keys(&mut map, &mut config)?;
    reject_unknown(map)?;
    Ok(config)
}

/// Everything the benchmark driver runs per seed.
#[derive(Debug, Clone)]
pub struct BenchConfig {
    /// Biased benchmark generator; the unbiased control copies it with both
    /// bias levels at 0.5.
    pub gen: GenConfig,
    pub epochs: usize,
    pub learning_rate: f64,
    pub dict_k: usize,
    pub joint_dim: usize,
    /// Additional epochs for the longer-baseline control.
    pub more_epochs: usize,
    pub k_sweep: Vec<usize>,
    pub l_sweep: Vec<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::default(),
            epochs: 50,
            learning_rate: 1e-4,
            dict_k: 8,
            joint_dim: 128,
            more_epochs: 50,
            k_sweep: vec![2, 4, 16],
            l_sweep: vec![8, 16],
        }
    }
}

/// Benchmark config file: generator keys plus driver keys.
pub fn load_bench_config(path: &Path) -> Result<BenchConfig> {
    let mut map = parse_pairs(&std::fs::read_to_string(path)?)?;
    let mut config = BenchConfig::default();
    apply_gen_keys(&mut map, &mut config.gen)?;
    take(&mut map, "epochs", &mut config.epochs)?;
    take(&mut map, "learning_rate", &mut config.learning_rate)?;
    take(&mut map, "dict_k", &mut config.dict_k)?;
    take(&mut map, "joint_dim", &mut config.joint_dim)?;
    take(&mut map, "more_epochs", &mut config.more_epochs)?;
    reject_unknown(map)?;
    Ok(config)
}
