//! Command-line harness: data generation, training, evaluation, the
//! four-way comparison, and the gradient self-check.
//!
//! Exit codes: 0 success, 1 usage error, 2 configuration error,
//! 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use pfl_lstr::checkpoint::{load_checkpoint, save_checkpoint};
use pfl_lstr::compare::{compare, export_report, ReportFormat, Variant};
use pfl_lstr::config::RunConfig;
use pfl_lstr::federation::{derive_seed, run_training};
use pfl_lstr::gradcheck::{check_random_model, toy_config};
use pfl_lstr::metrics::evaluate;
use pfl_lstr::synth::{generate_client_dataset_with, load_dataset, save_dataset};

const EXIT_USAGE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(
    name = "pfl-lstr",
    version,
    about = "Personalized federated LSTR simulation"
)]
struct Cli {
    /// TOML run configuration; defaults to the built-in standard benchmark.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Overrides the configured run seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Output file (or directory, for `train`).
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Writes synthetic per-client dataset files.
    GenData(GenDataArgs),
    /// Runs the split-representation federated training.
    Train(TrainArgs),
    /// Evaluates a checkpoint on a dataset file.
    Eval(EvalArgs),
    /// Trains the selected variants and exports the comparison.
    Compare(CompareArgs),
    /// Checks autodiff gradients against finite differences.
    GradCheck(GradCheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Number of clients (defaults to the configured population).
    #[arg(long)]
    clients: Option<usize>,

    /// Sequences per client.
    #[arg(long)]
    sequences: Option<usize>,

    /// Output directory for client_<i>.txt files.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,

    /// Per-client false-positive rates, comma separated, cycled.
    #[arg(long, value_delimiter = ',')]
    fp_rates: Vec<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of client_<i>.txt dataset files; when absent the
    /// configured synthetic population is generated in-process.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,

    /// Dataset file with a nonempty test split.
    #[arg(long, value_name = "FILE")]
    data: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    /// Subset of pfl-lstr,fedavg,local,pfl-lstr-2cams.
    #[arg(long, value_delimiter = ',')]
    variants: Vec<String>,

    /// Comparison seeds.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1u64, 2, 3])]
    seeds: Vec<u64>,

    /// Export format: csv or json-lines.
    #[arg(long, default_value = "csv")]
    format: String,
}

#[derive(Args)]
struct GradCheckArgs {
    /// Toy model instances to check.
    #[arg(long, default_value_t = 1)]
    instances: usize,

    /// Sampled parameter coordinates per instance.
    #[arg(long, default_value_t = 150)]
    coords: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let config = match load_config(cli.config.as_deref(), cli.seed) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };

    let result = match &cli.command {
        Command::GenData(args) => cmd_gen_data(&config, args),
        Command::Train(args) => cmd_train(&config, args, cli.out.as_deref()),
        Command::Eval(args) => cmd_eval(&config, args, cli.out.as_deref()),
        Command::Compare(args) => cmd_compare(&config, args, cli.out.as_deref()),
        Command::GradCheck(args) => cmd_grad_check(&config, args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<RunConfig> {
    let mut config = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::standard(),
    };
    if let Some(seed) = seed {
        config.federation.seed = seed;
    }
    Ok(config)
}

fn cmd_gen_data(config: &RunConfig, args: &GenDataArgs) -> anyhow::Result<ExitCode> {
    let mut data = config.data.clone();
    if let Some(clients) = args.clients {
        data.clients = clients;
    }
    if let Some(sequences) = args.sequences {
        data.sequences = sequences;
    }
    if !args.fp_rates.is_empty() {
        data.fp_rates = args.fp_rates.clone();
    }
    let mut config = config.clone();
    config.data = data;
    config.validate()?;
    let spec = config.to_benchmark_spec();
    let seed = config.federation.seed;

    std::fs::create_dir_all(&args.out_dir)?;
    for style in &spec.styles {
        let ds = generate_client_dataset_with(
            style,
            spec.sequences_per_client,
            derive_seed(seed, style.id as u64),
            &spec.synth,
        )?;
        let ds = pfl_lstr::synth::split_train_test(
            &ds,
            spec.train_ratio,
            derive_seed(seed, 0xABCD + style.id as u64),
        )?;
        let path = args.out_dir.join(format!("client_{}.txt", style.id));
        save_dataset(&ds, &path)?;
        println!(
            "wrote {} ({} sequences, fp_rate {:.2})",
            path.display(),
            ds.len(),
            style.false_positive_rate
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn load_data_dir(dir: &Path) -> anyhow::Result<Vec<pfl_lstr::synth::ClientDataset>> {
    let mut datasets = Vec::new();
    for id in 0.. {
        let path = dir.join(format!("client_{id}.txt"));
        if !path.exists() {
            break;
        }
        datasets.push(load_dataset(&path)?);
    }
    anyhow::ensure!(
        !datasets.is_empty(),
        "no client_<i>.txt files in {}",
        dir.display()
    );
    Ok(datasets)
}

fn cmd_train(config: &RunConfig, args: &TrainArgs, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let spec = config.to_benchmark_spec();
    let datasets = match &args.data_dir {
        Some(dir) => load_data_dir(dir)?,
        None => pfl_lstr::compare::benchmark_datasets(&spec, spec.setup.federation.seed)?,
    };
    let result = run_training(datasets, &spec.setup)?;

    match out {
        None => print!("{}", result.log.to_jsonl()),
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("log.jsonl"), result.log.to_jsonl())?;
            save_checkpoint(&result.server.encoder, &dir.join("encoder.pfll"))?;
            for client in &result.clients {
                let omega = result.personalized(client.id)?;
                save_checkpoint(
                    &omega.params,
                    &dir.join(format!("client_{}.pfll", client.id)),
                )?;
            }
            println!(
                "trained {} rounds over {} clients; artifacts in {}",
                spec.setup.federation.rounds,
                result.clients.len(),
                dir.display()
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(config: &RunConfig, args: &EvalArgs, out: Option<&Path>) -> anyhow::Result<ExitCode> {
    let spec = config.to_benchmark_spec();
    let params = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.data)?;
    let report = evaluate(&params, &spec.setup.model, &spec.setup.memory, &dataset)?;

    let summary = serde_json::json!({
        "samples": report.samples,
        "confusion": report.confusion,
        "precision": report.precisions(),
        "macro_precision": report.macro_precision(),
        "false_positive_rate": report.false_positive_rate(),
    });
    let text = serde_json::to_string_pretty(&summary)?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, text)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_compare(
    config: &RunConfig,
    args: &CompareArgs,
    out: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let variants: Vec<Variant> = if args.variants.is_empty() {
        Variant::ALL.to_vec()
    } else {
        args.variants
            .iter()
            .map(|name| {
                Variant::from_name(name).ok_or_else(|| anyhow::anyhow!("unknown variant {name:?}"))
            })
            .collect::<anyhow::Result<_>>()?
    };
    let format = ReportFormat::from_name(&args.format)
        .ok_or_else(|| anyhow::anyhow!("unknown format {:?}", args.format))?;

    let spec = config.to_benchmark_spec();
    let table = compare(&spec, &variants, &args.seeds)?;
    print!("{table}");
    if let Some(path) = out {
        export_report(&table, path, format)?;
        println!("report written to {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_grad_check(config: &RunConfig, args: &GradCheckArgs) -> anyhow::Result<ExitCode> {
    let seed = config.federation.seed;
    let mut worst = 0.0f64;
    for i in 0..args.instances.max(1) {
        let report = check_random_model(&toy_config(), derive_seed(seed, i as u64), args.coords)?;
        worst = worst.max(report.max_rel_error);
        println!(
            "instance {i}: max relative error {:.3e} over {} coordinates ({} parameter values)",
            report.max_rel_error, report.coords_checked, report.param_values
        );
    }
    println!("max relative error: {worst:.3e}");
    if worst > 1e-3 {
        eprintln!("gradient check FAILED (tolerance 1e-3)");
        return Ok(ExitCode::from(EXIT_RUNTIME));
    }
    Ok(ExitCode::SUCCESS)
}
