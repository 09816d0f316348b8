//! The full benchmark: baseline, adjusted training, the longer-baseline
//! control, dictionary-size and joint-dimension sweeps, combinator variants,
//! and non-parametric dictionaries, over a list of seeds.
//!
//! Every cell is deterministic given its seed, artifacts land under
//! `<out>/seed<N>/`, and the aggregated CSV is written in one canonical
//! order, so reruns produce byte-identical output regardless of scheduling.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use deconfound_mil::agg::AggregatorKind;
use deconfound_mil::confounders::build_dictionary;
use deconfound_mil::data::{BuildMode, Dataset};
use deconfound_mil::intervention::Combinator;
use deconfound_mil::metrics::{MetricsReport, CSV_HEADER};
use deconfound_mil::store::{save_dictionary, save_params, write_feature_store};
use deconfound_mil::synth::{generate, GenConfig};
use deconfound_mil::trainer::{
    evaluate, train_longer_control, train_stage2, train_stage3, write_trace, EvalOutcome,
    Stage3Options, TrainConfig,
};
use deconfound_mil::{Error, Result};

use crate::config::BenchConfig;

pub struct RunAllOutcome {
    pub rows: Vec<MetricsReport>,
    /// One entry per failed cell; partial results are still written.
    pub failures: Vec<String>,
    pub csv_path: PathBuf,
}

fn report(
    method: &str,
    seed: u64,
    dataset: &Dataset,
    outcome: &EvalOutcome,
    k: Option<usize>,
    l: Option<usize>,
    combinator: Option<Combinator>,
) -> MetricsReport {
    MetricsReport {
        run_id: format!("{method}-s{seed}"),
        method: method.to_string(),
        extractor_tag: dataset.provenance.clone(),
        k,
        l,
        combinator: combinator.map(|c| c.as_str().to_string()),
        precision: outcome.confusion.macro_precision,
        recall: outcome.confusion.macro_recall,
        accuracy: outcome.accuracy,
        auc: outcome.auc,
        seed: seed.to_string(),
    }
}

struct Stage3Cell {
    method: &'static str,
    suffix: String,
    dict_file: String,
    combinator: Combinator,
    joint_dim: usize,
}

fn run_seed(config: &BenchConfig, seed: u64, seed_dir: &Path) -> Result<Vec<MetricsReport>> {
    std::fs::create_dir_all(seed_dir)?;
    let kind = AggregatorKind::attention();
    let train_cfg = TrainConfig {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        seed,
        ..TrainConfig::default()
    };

    let biased_config = GenConfig {
        seed,
        ..config.gen.clone()
    };
    let unbiased_config = GenConfig {
        bias_train: 0.5,
        bias_test: 0.5,
        ..biased_config.clone()
    };
    let biased = generate(&biased_config)?;
    let unbiased = generate(&unbiased_config)?;
    write_feature_store(&biased, &seed_dir.join("biased"))?;
    write_feature_store(&unbiased, &seed_dir.join("unbiased"))?;

    let mut rows = Vec::new();

    // baseline aggregator on the biased benchmark
    let (baseline, trace) = train_stage2(&biased, &kind, &train_cfg)?;
    save_params(&baseline, &seed_dir.join("stage2_attention.ckpt"))?;
    write_trace(&trace, &seed_dir.join("stage2_attention.trace.tsv"))?;
    let outcome = evaluate(&biased, &baseline, None)?;
    rows.push(report("attention-baseline", seed, &biased, &outcome, None, None, None));

    // capacity control: identical recipe on the unconfounded dataset
    let (unbiased_params, trace) = train_stage2(&unbiased, &kind, &train_cfg)?;
    save_params(&unbiased_params, &seed_dir.join("stage2_attention_unbiased.ckpt"))?;
    write_trace(&trace, &seed_dir.join("stage2_attention_unbiased.trace.tsv"))?;
    let outcome = evaluate(&unbiased, &unbiased_params, None)?;
    rows.push(report(
        "attention-baseline-unbiased",
        seed,
        &unbiased,
        &outcome,
        None,
        None,
        None,
    ));

    // does a longer baseline close the gap by itself?
    let (longer, trace) = train_longer_control(&biased, &kind, &train_cfg, config.more_epochs)?;
    save_params(&longer, &seed_dir.join("stage2_attention_more.ckpt"))?;
    write_trace(&trace, &seed_dir.join("stage2_attention_more.trace.tsv"))?;
    let outcome = evaluate(&biased, &longer, None)?;
    rows.push(report(
        "attention-baseline-more-epochs",
        seed,
        &biased,
        &outcome,
        None,
        None,
        None,
    ));

    // dictionaries
    let attn_weights = baseline.attention_weights();
    let mut dict_ks = vec![config.dict_k];
    dict_ks.extend(config.k_sweep.iter().copied().filter(|k| *k != config.dict_k));
    for &k in &dict_ks {
        let dict = build_dictionary(&[&biased], BuildMode::Attention, k, &kind, attn_weights, seed)?;
        save_dictionary(&dict, &seed_dir.join(format!("dict_attention_k{k}.cdf32")))?;
    }
    for mode in [BuildMode::Mean, BuildMode::Max, BuildMode::Instance] {
        let dict = build_dictionary(&[&biased], mode, config.dict_k, &kind, None, seed)?;
        save_dictionary(
            &dict,
            &seed_dir.join(format!("dict_{}_k{}.cdf32", mode.as_str(), config.dict_k)),
        )?;
    }

    // adjusted-training cells
    let mut cells = vec![Stage3Cell {
        method: "attention-ibmil",
        suffix: "default".into(),
        dict_file: format!("dict_attention_k{}.cdf32", config.dict_k),
        combinator: Combinator::Concat,
        joint_dim: config.joint_dim,
    }];
    for &k in &config.k_sweep {
        cells.push(Stage3Cell {
            method: match k {
                2 => "attention-ibmil-k2",
                4 => "attention-ibmil-k4",
                16 => "attention-ibmil-k16",
                _ => "attention-ibmil-ksweep",
            },
            suffix: format!("k{k}"),
            dict_file: format!("dict_attention_k{k}.cdf32"),
            combinator: Combinator::Concat,
            joint_dim: config.joint_dim,
        });
    }
    for &l in &config.l_sweep {
        cells.push(Stage3Cell {
            method: match l {
                8 => "attention-ibmil-l8",
                16 => "attention-ibmil-l16",
                _ => "attention-ibmil-lsweep",
            },
            suffix: format!("l{l}"),
            dict_file: format!("dict_attention_k{}.cdf32", config.dict_k),
            combinator: Combinator::Concat,
            joint_dim: l,
        });
    }
    for comb in [Combinator::Add, Combinator::Sub] {
        cells.push(Stage3Cell {
            method: match comb {
                Combinator::Add => "attention-ibmil-add",
                _ => "attention-ibmil-sub",
            },
            suffix: comb.as_str().into(),
            dict_file: format!("dict_attention_k{}.cdf32", config.dict_k),
            combinator: comb,
            joint_dim: config.joint_dim,
        });
    }
    for mode in ["mean", "max", "instance"] {
        cells.push(Stage3Cell {
            method: match mode {
                "mean" => "attention-ibmil-dict-mean",
                "max" => "attention-ibmil-dict-max",
                _ => "attention-ibmil-dict-instance",
            },
            suffix: format!("dict_{mode}"),
            dict_file: format!("dict_{mode}_k{}.cdf32", config.dict_k),
            combinator: Combinator::Concat,
            joint_dim: config.joint_dim,
        });
    }

    let cell_rows: Vec<MetricsReport> = cells
        .par_iter()
        .map(|cell| -> Result<MetricsReport> {
            let dict = deconfound_mil::store::load_dictionary(&seed_dir.join(&cell.dict_file))?;
            let opts = Stage3Options {
                combinator: cell.combinator,
                joint_dim: cell.joint_dim,
                learnable_dict: false,
            };
            let (params, dict_out, trace) =
                train_stage3(&biased, &dict, &kind, &train_cfg, &opts)?;
            save_params(&params, &seed_dir.join(format!("ibmil_{}.ckpt", cell.suffix)))?;
            write_trace(&trace, &seed_dir.join(format!("ibmil_{}.trace.tsv", cell.suffix)))?;
            let outcome = evaluate(&biased, &params, Some(&dict_out))?;
            Ok(report(
                cell.method,
                seed,
                &biased,
                &outcome,
                Some(dict.k()),
                params.joint_dim(),
                Some(cell.combinator),
            ))
        })
        .collect::<Result<_>>()?;
    rows.extend(cell_rows);
    Ok(rows)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

fn aggregate_rows(rows: &[MetricsReport]) -> Vec<MetricsReport> {
    let mut methods: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    methods.sort_unstable();
    methods.dedup();

    let mut out = Vec::new();
    for method in methods {
        let group: Vec<&MetricsReport> = rows.iter().filter(|r| r.method == method).collect();
        let col = |f: &dyn Fn(&MetricsReport) -> f64| -> Vec<f64> {
            group.iter().map(|r| f(r)).collect()
        };
        let (p_mean, p_std) = mean_std(&col(&|r| r.precision));
        let (r_mean, r_std) = mean_std(&col(&|r| r.recall));
        let (a_mean, a_std) = mean_std(&col(&|r| r.accuracy));
        let aucs: Vec<f64> = group.iter().filter_map(|r| r.auc).collect();
        let auc_stats = if aucs.len() == group.len() {
            Some(mean_std(&aucs))
        } else {
            None
        };
        let template = group[0];
        for (tag, precision, recall, accuracy, auc) in [
            ("mean", p_mean, r_mean, a_mean, auc_stats.map(|s| s.0)),
            ("std", p_std, r_std, a_std, auc_stats.map(|s| s.1)),
        ] {
            out.push(MetricsReport {
                run_id: format!("{method}-{tag}"),
                method: method.to_string(),
                extractor_tag: template.extractor_tag.clone(),
                k: template.k,
                l: template.l,
                combinator: template.combinator.clone(),
                precision,
                recall,
                accuracy,
                auc,
                seed: tag.to_string(),
            });
        }
    }
    out
}

pub fn run_all(config: &BenchConfig, seeds: &[u64], out_dir: &Path) -> Result<RunAllOutcome> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("no seeds given".into()));
    }
    std::fs::create_dir_all(out_dir)?;

    let results: Vec<(u64, Result<Vec<MetricsReport>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let seed_dir = out_dir.join(format!("seed{seed}"));
            (seed, run_seed(config, seed, &seed_dir))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (seed, result) in results {
        match result {
            Ok(seed_rows) => rows.extend(seed_rows),
            Err(err) => failures.push(format!("seed {seed}: {err}")),
        }
    }

    // canonical order: per-seed rows by (method, seed), then aggregates
    rows.sort_by(|a, b| {
        (a.method.as_str(), a.seed.parse::<u64>().unwrap_or(0))
            .cmp(&(b.method.as_str(), b.seed.parse::<u64>().unwrap_or(0)))
    });
    let aggregates = aggregate_rows(&rows);
    rows.extend(aggregates);

    let csv_path = out_dir.join("results.csv");
    let mut text = String::from(CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&row.to_csv_row());
        text.push('\n');
    }
    std::fs::write(&csv_path, text)?;

    Ok(RunAllOutcome {
        rows,
        failures,
        csv_path,
    })
}
