//! Command-line pipeline: generate confounded bag benchmarks, train
//! aggregators, build confounder dictionaries, run backdoor-adjusted
//! training, evaluate checkpoints, audit gradients, and drive the full
//! benchmark matrix.

mod config;
mod runall;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deconfound_mil::agg::AggregatorKind;
use deconfound_mil::confounders::build_dictionary;
use deconfound_mil::data::{BuildMode, Dataset};
use deconfound_mil::intervention::Combinator;
use deconfound_mil::metrics::{MetricsReport, CSV_HEADER};
use deconfound_mil::store::{
    load_dictionary, load_params, read_feature_store_blind, save_dictionary,
    save_params, write_feature_store,
};
use deconfound_mil::synth::{generate_detailed, summarize, GenConfig};
use deconfound_mil::trainer::{
    evaluate, evaluate_knn, gradient_check_suite, train_stage2, train_stage3, write_trace,
    EvalOutcome, OptimizerKind, Stage3Options, TrainConfig,
};
use deconfound_mil::{Error, Result};

#[derive(Parser)]
#[command(
    name = "deconfound-mil",
    version,
    about = "Confounded-bag benchmarks and backdoor-adjusted multi-instance training"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic confounded feature store.
    Gen(GenArgs),
    /// Train a baseline aggregator + classifier.
    TrainAgg(TrainAggArgs),
    /// Cluster bag features into a confounder dictionary.
    BuildDict(BuildDictArgs),
    /// Train the backdoor-adjusted model over a dictionary.
    TrainIbmil(TrainIbmilArgs),
    /// Evaluate a checkpoint (or a class-specific dictionary as KNN).
    Eval(EvalArgs),
    /// Audit analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Run the full benchmark matrix over a list of seeds.
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Flat key=value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    num_contexts: Option<usize>,
    #[arg(long)]
    bias_train: Option<f64>,
    #[arg(long)]
    bias_test: Option<f64>,
    #[arg(long)]
    key_fraction_min: Option<f64>,
    #[arg(long)]
    key_fraction_max: Option<f64>,
    #[arg(long)]
    bag_size_min: Option<usize>,
    #[arg(long)]
    bag_size_max: Option<usize>,
    #[arg(long)]
    context_strength: Option<f64>,
    #[arg(long)]
    signal_strength: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    train_bags: Option<usize>,
    #[arg(long)]
    test_bags: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainFlags {
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// adam or sgd.
    #[arg(long, default_value = "adam")]
    optimizer: String,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl TrainFlags {
    fn to_config(&self) -> Result<TrainConfig> {
        let optimizer = match self.optimizer.as_str() {
            "adam" => OptimizerKind::adam(),
            "sgd" => OptimizerKind::Sgd,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown optimizer '{other}'"
                )))
            }
        };
        Ok(TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            optimizer,
            weight_decay: self.weight_decay,
            seed: self.seed,
        })
    }
}

#[derive(Args)]
struct TrainAggArgs {
    #[arg(long)]
    data: PathBuf,
    /// mean, max, or attention.
    #[arg(long, default_value = "attention")]
    agg: String,
    /// Attention hidden width.
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    /// Checkpoint output; the epoch trace lands next to it as
    /// <out>.trace.tsv unless --trace overrides.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct BuildDictArgs {
    /// Feature store; repeat to pool the train bags of several stores.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    /// attention, mean, max, instance, or class-specific.
    #[arg(long)]
    mode: String,
    #[arg(long)]
    k: usize,
    /// Trained aggregator checkpoint (required for attention and
    /// class-specific modes).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainIbmilArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// concat, add, or sub.
    #[arg(long, default_value = "concat")]
    combinator: String,
    /// Joint projection dimension.
    #[arg(long, default_value_t = 128)]
    l: usize,
    /// Update dictionary strata during training instead of freezing them.
    #[arg(long)]
    learnable_dict: bool,
    /// mean, max, or attention.
    #[arg(long, default_value = "attention")]
    agg: String,
    #[arg(long, default_value_t = 128)]
    hidden: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Where to write the updated dictionary in learnable mode.
    #[arg(long)]
    dict_out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Treat the class-specific dictionary as a nearest-stratum classifier.
    #[arg(long)]
    knn: bool,
    /// CSV output (header + one row).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "eval")]
    run_id: String,
    #[arg(long)]
    method: Option<String>,
    #[arg(long, default_value = "0")]
    seed: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    cases: usize,
}

#[derive(Args)]
struct RunAllArgs {
    /// Flat key=value config (generator + driver keys); defaults are the
    /// standard benchmark.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seed list, e.g. 0,1,2,3,4.
    #[arg(long)]
    seeds: String,
    #[arg(long)]
    out: PathBuf,
}

fn parse_agg(name: &str, hidden: usize) -> Result<AggregatorKind> {
    Ok(match AggregatorKind::parse(name)? {
        AggregatorKind::Attention { .. } => AggregatorKind::Attention { hidden },
        other => other,
    })
}

fn load_data_blind(path: &PathBuf) -> Result<Dataset> {
    // training and evaluation never see context ids
    read_feature_store_blind(path)
}

fn write_report(report: &MetricsReport, path: &PathBuf) -> Result<()> {
    std::fs::write(path, format!("{CSV_HEADER}\n{}\n", report.to_csv_row()))?;
    println!("{CSV_HEADER}");
    println!("{}", report.to_csv_row());
    Ok(())
}

fn print_outcome(outcome: &EvalOutcome) {
    let auc = outcome
        .auc
        .map(|a| format!("{a:.4}"))
        .unwrap_or_else(|| "n/a".into());
    println!(
        "accuracy {:.4}  macro-precision {:.4}  macro-recall {:.4}  auc {auc}",
        outcome.accuracy, outcome.confusion.macro_precision, outcome.confusion.macro_recall
    );
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => config::load_gen_config(path, GenConfig::default())?,
        None => GenConfig::default(),
    };
    macro_rules! merge {
        ($($field:ident => $slot:expr),* $(,)?) => {
            $(if let Some(v) = args.$field { $slot = v; })*
        };
    }
    merge!(
        feature_dim => config.feature_dim,
        num_classes => config.num_classes,
        num_contexts => config.num_contexts,
        bias_train => config.bias_train,
        bias_test => config.bias_test,
        key_fraction_min => config.key_fraction.0,
        key_fraction_max => config.key_fraction.1,
        bag_size_min => config.bag_size.0,
        bag_size_max => config.bag_size.1,
        context_strength => config.context_strength,
        signal_strength => config.signal_strength,
        noise_sigma => config.noise_sigma,
        train_bags => config.train_bags,
        test_bags => config.test_bags,
        seed => config.seed,
    );

    let (dataset, details) = generate_detailed(&config)?;
    write_feature_store(&dataset, &args.out)?;
    println!(
        "wrote {} bags (d={}) to {}",
        dataset.bags.len(),
        dataset.feature_dim,
        args.out.display()
    );
    print!("{}", summarize(&dataset, Some(&details))?);
    Ok(())
}

fn cmd_train_agg(args: TrainAggArgs) -> Result<()> {
    let dataset = load_data_blind(&args.data)?;
    let kind = parse_agg(&args.agg, args.hidden)?;
    let cfg = args.train.to_config()?;
    let (params, trace) = train_stage2(&dataset, &kind, &cfg)?;
    save_params(&params, &args.out)?;
    let trace_path = args
        .trace
        .unwrap_or_else(|| args.out.with_extension("ckpt.trace.tsv"));
    write_trace(&trace, &trace_path)?;
    println!("saved checkpoint to {}", args.out.display());
    if let Some(last) = trace.last() {
        if let Some(acc) = last.test_accuracy {
            println!("final epoch: train loss {:.4}, test accuracy {acc:.4}", last.train_loss);
        }
    }
    Ok(())
}

fn cmd_build_dict(args: BuildDictArgs) -> Result<()> {
    let datasets: Vec<Dataset> = args
        .data
        .iter()
        .map(load_data_blind)
        .collect::<Result<_>>()?;
    let dataset_refs: Vec<&Dataset> = datasets.iter().collect();
    let num_classes = datasets.iter().map(|d| d.num_classes).max().unwrap_or(2);
    let mode = match args.mode.as_str() {
        "attention" => BuildMode::Attention,
        "mean" => BuildMode::Mean,
        "max" => BuildMode::Max,
        "instance" => BuildMode::Instance,
        "class-specific" => BuildMode::ClassSpecific { num_classes },
        other => {
            return Err(Error::InvalidArgument(format!(
                "unknown dictionary mode '{other}'"
            )))
        }
    };
    let params = args.ckpt.as_ref().map(|p| load_params(p)).transpose()?;
    let (kind, attn) = match &params {
        Some(p) => (p.agg, p.attention_weights()),
        None => (AggregatorKind::Mean, None),
    };
    let dict = build_dictionary(&dataset_refs, mode, args.k, &kind, attn, args.seed)?;
    save_dictionary(&dict, &args.out)?;
    println!(
        "built {} dictionary with K={} (d={}) at {}",
        dict.build_mode.as_str(),
        dict.k(),
        dict.dim(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_ibmil(args: TrainIbmilArgs) -> Result<()> {
    let dataset = load_data_blind(&args.data)?;
    let dict = load_dictionary(&args.dict)?;
    let kind = parse_agg(&args.agg, args.hidden)?;
    let cfg = args.train.to_config()?;
    let opts = Stage3Options {
        combinator: Combinator::parse(&args.combinator)?,
        joint_dim: args.l,
        learnable_dict: args.learnable_dict,
    };
    let (params, dict_out, trace) = train_stage3(&dataset, &dict, &kind, &cfg, &opts)?;
    save_params(&params, &args.out)?;
    let trace_path = args
        .trace
        .unwrap_or_else(|| args.out.with_extension("ckpt.trace.tsv"));
    write_trace(&trace, &trace_path)?;
    if let Some(dict_path) = &args.dict_out {
        save_dictionary(&dict_out, dict_path)?;
    }
    println!("saved checkpoint to {}", args.out.display());
    if let Some(last) = trace.last() {
        if let Some(acc) = last.test_accuracy {
            println!("final epoch: train loss {:.4}, test accuracy {acc:.4}", last.train_loss);
        }
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = load_data_blind(&args.data)?;
    let params = load_params(&args.ckpt)?;
    let dict = args.dict.as_ref().map(|p| load_dictionary(p)).transpose()?;

    let (outcome, method, k, l, combinator) = if args.knn {
        let dict = dict.as_ref().ok_or_else(|| {
            Error::InvalidArgument("--knn needs a class-specific --dict".into())
        })?;
        (
            evaluate_knn(&dataset, &params, dict)?,
            "knn".to_string(),
            Some(dict.k()),
            None,
            None,
        )
    } else {
        let outcome = evaluate(&dataset, &params, dict.as_ref())?;
        let method = if params.has_intervention() {
            format!("{}-ibmil", params.agg.as_str())
        } else {
            format!("{}-baseline", params.agg.as_str())
        };
        (
            outcome,
            method,
            dict.as_ref().map(|d| d.k()),
            params.joint_dim(),
            params.combinator.map(|c| c.as_str().to_string()),
        )
    };
    print_outcome(&outcome);

    let report = MetricsReport {
        run_id: args.run_id.clone(),
        method: args.method.clone().unwrap_or(method),
        extractor_tag: dataset.provenance.clone(),
        k,
        l,
        combinator,
        precision: outcome.confusion.macro_precision,
        recall: outcome.confusion.macro_recall,
        accuracy: outcome.accuracy,
        auc: outcome.auc,
        seed: args.seed.clone(),
    };
    write_report(&report, &args.out)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let report = gradient_check_suite(args.seed, args.cases)?;
    println!(
        "max relative error {:.3e} over {} cases ({})",
        report.max_rel_err, report.cases, report.worst_case
    );
    if report.max_rel_err >= 1e-4 {
        println!("FAIL: gradient error at or above 1e-4");
        Ok(ExitCode::from(1))
    } else {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    }
}

fn cmd_run_all(args: RunAllArgs) -> Result<ExitCode> {
    if let Ok(threads) = std::env::var("DECONFOUND_MIL_THREADS") {
        let n: usize = threads.parse().map_err(|_| {
            Error::InvalidArgument(format!("DECONFOUND_MIL_THREADS='{threads}' is not a number"))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    }
    let config = match &args.config {
        Some(path) => config::load_bench_config(path)?,
        None => config::BenchConfig::default(),
    };
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad seed '{s}'")))
        })
        .collect::<Result<_>>()?;

    let outcome = runall::run_all(&config, &seeds, &args.out)?;
    println!("wrote {} rows to {}", outcome.rows.len(), outcome.csv_path.display());
    for row in outcome.rows.iter().filter(|r| r.seed == "mean") {
        println!(
            "{:35} accuracy {:.4}  auc {}",
            row.method,
            row.accuracy,
            row.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "n/a".into())
        );
    }
    if outcome.failures.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        for failure in &outcome.failures {
            eprintln!("FAILED: {failure}");
        }
        Ok(ExitCode::from(1))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args).map(|()| ExitCode::SUCCESS),
        Command::TrainAgg(args) => cmd_train_agg(args).map(|()| ExitCode::SUCCESS),
        Command::BuildDict(args) => cmd_build_dict(args).map(|()| ExitCode::SUCCESS),
        Command::TrainIbmil(args) => cmd_train_ibmil(args).map(|()| ExitCode::SUCCESS),
        Command::Eval(args) => cmd_eval(args).map(|()| ExitCode::SUCCESS),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::RunAll(args) => cmd_run_all(args),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}
