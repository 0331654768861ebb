//! The `fedjam` binary: dataset synthesis, partitioning, federated and
//! centralized training, standalone evaluation, and run comparison.
//!
//! Exit codes: 0 success, 2 configuration/validation error, 3 IO or file
//! format error. All randomness flows from explicit `--seed` flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::dataset::{
    partition_dirichlet, partition_iid, split_train_test, Dataset, PartitionMap, PartitionMode,
};
use crate::error::{Error, Result};
use crate::fed::{run_centralized, run_fedavg, FedConfig, RoundRecord};
use crate::metrics::{evaluate, format_sig6, write_confusion, write_curves, RunSummary};
use crate::nn::io::{load_params, save_params};
use crate::nn::{CnnConfig, ModelParams, TrainConfig};
use crate::siggen::JammerClass;

#[derive(Parser)]
#[command(name = "fedjam", version, about = "Federated jammer-classifier training simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a balanced spectrogram dataset (FJAM file)
    Gen(GenArgs),
    /// Split a dataset and shard the training set across clients
    Partition(PartitionArgs),
    /// Run FedAvg over a partitioned dataset
    TrainFed(TrainFedArgs),
    /// Train the centralized baseline
    TrainCentral(TrainCentralArgs),
    /// Evaluate an FJWT weight file against an FJAM dataset
    Eval(EvalArgs),
    /// Merge run.json summaries into one comparison table
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// TOML config file; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(path) => RunConfig::load(path),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Records per class
    #[arg(long)]
    per_class: Option<usize>,
    /// Square image side in pixels
    #[arg(long)]
    img: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// JSR draw range in dB, e.g. 20..40
    #[arg(long, value_parser = parse_range)]
    jsr_db: Option<(f64, f64)>,
    /// Output FJAM path
    #[arg(long)]
    out: PathBuf,
    /// Also dump the first record of each class as PGM next to the output
    #[arg(long)]
    debug_pgm: bool,
}

fn parse_range(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once("..")
        .ok_or_else(|| format!("expected LO..HI, got `{s}`"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("bad low bound: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("bad high bound: {e}"))?;
    Ok((lo, hi))
}

#[derive(Args)]
struct PartitionArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input FJAM dataset
    #[arg(long)]
    data: PathBuf,
    /// Number of clients M
    #[arg(long)]
    clients: Option<usize>,
    /// iid or dirichlet
    #[arg(long)]
    mode: Option<String>,
    /// Dirichlet concentration
    #[arg(long)]
    beta: Option<f64>,
    /// Partition seed
    #[arg(long)]
    seed: Option<u64>,
    /// Held-out test fraction
    #[arg(long)]
    test_fraction: Option<f64>,
    /// Train/test split seed (shared across partitions of one dataset)
    #[arg(long)]
    split_seed: Option<u64>,
    /// Output partition JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainFedArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    /// Partition JSON from `fedjam partition`
    #[arg(long)]
    parts: PathBuf,
    /// Communication rounds T
    #[arg(long)]
    rounds: Option<usize>,
    /// Local epochs E per round
    #[arg(long)]
    local_epochs: Option<usize>,
    /// SGD learning rate
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cap on parallel client jobs (FEDJAM_JOBS is the env fallback)
    #[arg(long)]
    jobs: Option<usize>,
    /// Write a global FJWT checkpoint every K rounds
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Run directory for all outputs
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TrainCentralArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// FJWT weights
    #[arg(long)]
    weights: PathBuf,
    /// FJAM dataset
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only records not assigned by this partition (the test split)
    #[arg(long)]
    parts: Option<PathBuf>,
    /// Rederive a train/test split and evaluate its test side
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    split_seed: Option<u64>,
    /// Write the confusion matrix CSV here
    #[arg(long)]
    confusion_out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// run.json files or run directories containing one
    runs: Vec<PathBuf>,
    /// Also write the table as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the `fedjam` binary.
pub fn cli_main() {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Command::Gen(args) => cmd_gen(args),
        Command::Partition(args) => cmd_partition(args),
        Command::TrainFed(args) => cmd_train_fed(args),
        Command::TrainCentral(args) => cmd_train_central(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Report(args) => cmd_report(args),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

fn configure_jobs(jobs: Option<usize>) -> Result<()> {
    let jobs = match jobs {
        Some(j) => Some(j),
        None => match std::env::var("FEDJAM_JOBS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                Error::config(format!("FEDJAM_JOBS must be a positive integer, got `{v}`"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::config("jobs must be at least 1"));
        }
        // Ignore the error if a pool already exists (e.g. repeated calls in
        // one process); results do not depend on the worker count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    Ok(())
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(n) = args.per_class {
        cfg.gen.per_class = n;
    }
    if let Some(side) = args.img {
        cfg.render.out_h = side;
        cfg.render.out_w = side;
    }
    if let Some(seed) = args.seed {
        cfg.gen.seed = seed;
    }
    if let Some((lo, hi)) = args.jsr_db {
        cfg.gen.jsr_lo = lo;
        cfg.gen.jsr_hi = hi;
    }
    let gen = cfg.gen_config();
    let records = crate::siggen::generate_dataset(&gen)?;
    let dataset = Dataset::from_spectrograms(&records, JammerClass::COUNT as u8)?;
    dataset.save(&args.out)?;

    if args.debug_pgm {
        for class in JammerClass::ALL {
            if let Some(rec) = records.iter().find(|r| r.label == class) {
                let path = args.out.with_extension(format!("{}.pgm", class.name()));
                crate::siggen::write_pgm(&path, rec.height, rec.width, &rec.pixels)?;
            }
        }
    }

    println!(
        "wrote {} records ({}x{}) to {}",
        dataset.len(),
        dataset.height(),
        dataset.width(),
        args.out.display()
    );
    for (class, count) in JammerClass::ALL.iter().zip(dataset.class_counts()) {
        println!("  {class}: {count}");
    }
    println!("sha256 {}", sha256_file(&args.out)?);
    Ok(())
}

fn cmd_partition(args: PartitionArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(m) = args.clients {
        cfg.partition.clients = m;
    }
    if let Some(mode) = &args.mode {
        cfg.partition.mode = mode.clone();
    }
    if let Some(beta) = args.beta {
        cfg.partition.beta = beta;
    }
    if let Some(seed) = args.seed {
        cfg.partition.seed = seed;
    }
    if let Some(f) = args.test_fraction {
        cfg.split.test_fraction = f;
    }
    if let Some(seed) = args.split_seed {
        cfg.split.seed = seed;
    }

    let dataset = Dataset::load(&args.data)?;
    let (train, test) = split_train_test(
        dataset.labels(),
        dataset.num_classes(),
        cfg.split.test_fraction,
        cfg.split.seed,
    )?;
    let map = match cfg.partition.mode.as_str() {
        "iid" => partition_iid(dataset.labels(), &train, cfg.partition.clients, cfg.partition.seed)?,
        "dirichlet" => partition_dirichlet(
            dataset.labels(),
            &train,
            cfg.partition.clients,
            cfg.partition.beta,
            cfg.partition.seed,
        )?,
        other => return Err(Error::config(format!("unknown partition mode `{other}`"))),
    };
    map.save(&args.out)?;

    println!(
        "split {} records into {} train / {} test; {} clients ({})",
        dataset.len(),
        train.len(),
        test.len(),
        map.num_clients,
        cfg.partition.mode
    );
    println!("client | {}", JammerClass::ALL.map(|c| format!("{c:>6}")).join(" "));
    for (client, row) in map
        .class_histogram(dataset.labels(), dataset.num_classes())
        .iter()
        .enumerate()
    {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        println!("{client:>6} | {}", cells.join(" "));
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

#[derive(Serialize)]
struct ManifestInput {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    inputs: Vec<ManifestInput>,
    seed: u64,
}

fn write_manifest(dir: &Path, command: &str, inputs: &[&Path], seed: u64) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            Ok(ManifestInput {
                path: p.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command: command.to_string(),
        inputs,
        seed,
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(0, format!("manifest serialization failed: {e}")))?;
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(path, e))
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Common tail of a training run: curves, confusion, weights, summary.
#[allow(clippy::too_many_arguments)]
fn write_run_outputs(
    out_dir: &Path,
    cfg: &RunConfig,
    records: &[RoundRecord],
    params: &ModelParams,
    cnn: &CnnConfig,
    data: &Dataset,
    test_idx: &[usize],
    summary: RunSummary,
) -> Result<()> {
    cfg.save(&out_dir.join("resolved.toml"))?;
    write_curves(records, &out_dir.join("curves.csv"))?;
    let eval = evaluate(params, cnn, data, test_idx)?;
    let names = JammerClass::ALL.map(|c| c.name());
    write_confusion(&eval.confusion, &names, &out_dir.join("confusion.csv"))?;
    save_params(&out_dir.join("final.fjwt"), params)?;
    summary.save(&out_dir.join("run.json"))?;
    Ok(())
}

fn cmd_train_fed(args: TrainFedArgs) -> Result<()> {
    configure_jobs(args.jobs)?;
    let mut cfg = args.config.load()?;
    if let Some(r) = args.rounds {
        cfg.fed.rounds = r;
    }
    if let Some(e) = args.local_epochs {
        cfg.fed.local_epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch {
        cfg.train.batch_size = b;
    }
    if let Some(k) = args.eval_every {
        cfg.fed.eval_every = k;
    }
    if let Some(seed) = args.seed {
        cfg.fed.seed = seed;
    }

    let dataset = Dataset::load(&args.data)?;
    let parts = PartitionMap::load(&args.parts)?;
    let test_idx = parts.unassigned(dataset.len());
    let cnn = cfg.cnn_for(dataset.height(), dataset.width());
    let fed = FedConfig {
        num_clients: parts.num_clients,
        rounds: cfg.fed.rounds,
        local_epochs: cfg.fed.local_epochs,
        train: TrainConfig {
            learning_rate: cfg.train.learning_rate,
            batch_size: cfg.train.batch_size,
            ..TrainConfig::default()
        },
        eval_every: cfg.fed.eval_every,
        seed: cfg.fed.seed,
    };
    cfg.partition.clients = parts.num_clients;
    cfg.cnn = cnn;

    prepare_out_dir(&args.out_dir)?;
    let checkpoint_every = args.checkpoint_every.unwrap_or(0);
    let out_dir = args.out_dir.clone();
    let (params, records) = run_fedavg(
        &dataset,
        &parts,
        &test_idx,
        &cnn,
        &fed,
        |round, model, record| {
            if checkpoint_every > 0 && round % checkpoint_every == 0 {
                save_params(&out_dir.join(format!("checkpoint_{round:05}.fjwt")), model)?;
            }
            if let Some(r) = record {
                println!(
                    "round {:>4}: accuracy {} loss {}",
                    r.round,
                    format_sig6(r.global_test_accuracy),
                    format_sig6(r.global_test_loss)
                );
            }
            Ok(())
        },
    )?;

    let (setting, beta) = match parts.mode {
        PartitionMode::Iid => ("fedavg-iid", None),
        PartitionMode::Dirichlet { beta } => ("fedavg-dirichlet", Some(beta)),
    };
    let eval = evaluate(&params, &cnn, &dataset, &test_idx)?;
    let summary = RunSummary {
        setting: setting.to_string(),
        num_clients: Some(parts.num_clients),
        beta,
        rounds: fed.rounds,
        final_accuracy: eval.accuracy,
        per_class_recall: eval.confusion.recalls_or_zero(),
    };
    write_run_outputs(
        &args.out_dir,
        &cfg,
        &records,
        &params,
        &cnn,
        &dataset,
        &test_idx,
        summary,
    )?;
    write_manifest(
        &args.out_dir,
        "train-fed",
        &[args.data.as_path(), args.parts.as_path()],
        fed.seed,
    )?;
    println!(
        "final accuracy {} after {} rounds; outputs in {}",
        format_sig6(eval.accuracy),
        fed.rounds,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_train_central(args: TrainCentralArgs) -> Result<()> {
    configure_jobs(args.jobs)?;
    let mut cfg = args.config.load()?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(b) = args.batch {
        cfg.train.batch_size = b;
    }
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(f) = args.test_fraction {
        cfg.split.test_fraction = f;
    }
    if let Some(seed) = args.split_seed {
        cfg.split.seed = seed;
    }

    let dataset = Dataset::load(&args.data)?;
    let (train_idx, test_idx) = split_train_test(
        dataset.labels(),
        dataset.num_classes(),
        cfg.split.test_fraction,
        cfg.split.seed,
    )?;
    let cnn = cfg.cnn_for(dataset.height(), dataset.width());
    cfg.cnn = cnn;

    prepare_out_dir(&args.out_dir)?;
    let (params, records) = run_centralized(&dataset, &train_idx, &test_idx, &cnn, &cfg.train)?;
    for r in &records {
        println!(
            "epoch {:>4}: accuracy {} loss {}",
            r.round,
            format_sig6(r.global_test_accuracy),
            format_sig6(r.global_test_loss)
        );
    }
    let eval = evaluate(&params, &cnn, &dataset, &test_idx)?;
    let summary = RunSummary {
        setting: "centralized".to_string(),
        num_clients: None,
        beta: None,
        rounds: cfg.train.epochs,
        final_accuracy: eval.accuracy,
        per_class_recall: eval.confusion.recalls_or_zero(),
    };
    write_run_outputs(
        &args.out_dir,
        &cfg,
        &records,
        &params,
        &cnn,
        &dataset,
        &test_idx,
        summary,
    )?;
    write_manifest(&args.out_dir, "train-central", &[args.data.as_path()], cfg.train.seed)?;
    println!(
        "final accuracy {} after {} epochs; outputs in {}",
        format_sig6(eval.accuracy),
        cfg.train.epochs,
        args.out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let dataset = Dataset::load(&args.data)?;
    let cnn = CnnConfig {
        input_h: dataset.height(),
        input_w: dataset.width(),
        ..CnnConfig::default()
    };
    let params = load_params(&args.weights, &cnn)?;
    let idx: Vec<usize> = if let Some(parts_path) = &args.parts {
        let parts = PartitionMap::load(parts_path)?;
        parts.unassigned(dataset.len())
    } else if let Some(fraction) = args.test_fraction {
        let (_, test) = split_train_test(
            dataset.labels(),
            dataset.num_classes(),
            fraction,
            args.split_seed.unwrap_or(0),
        )?;
        test
    } else {
        (0..dataset.len()).collect()
    };
    let eval = evaluate(&params, &cnn, &dataset, &idx)?;
    println!("records evaluated: {}", idx.len());
    println!("accuracy {}", format_sig6(eval.accuracy));
    println!("mean loss {}", format_sig6(eval.mean_loss));
    for class in JammerClass::ALL {
        match eval.confusion.recall(class.code() as usize) {
            Some(r) => println!("  recall {class}: {}", format_sig6(r)),
            None => println!("  recall {class}: n/a (no test records)"),
        }
    }
    if let Some(path) = &args.confusion_out {
        let names = JammerClass::ALL.map(|c| c.name());
        write_confusion(&eval.confusion, &names, path)?;
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    if args.runs.is_empty() {
        return Err(Error::config("report needs at least one run.json or run directory"));
    }
    let mut rows = Vec::new();
    for path in &args.runs {
        let file = if path.is_dir() { path.join("run.json") } else { path.clone() };
        rows.push((file.display().to_string(), RunSummary::load(&file)?));
    }
    println!(
        "{:<28} {:>4} {:>6} {:>7} {:>10}",
        "setting", "M", "beta", "rounds", "accuracy"
    );
    let mut csv = String::from("setting,M,beta,rounds,final_accuracy\n");
    for (_, s) in &rows {
        let m = s.num_clients.map_or("-".to_string(), |m| m.to_string());
        let beta = s.beta.map_or("-".to_string(), |b| b.to_string());
        println!(
            "{:<28} {:>4} {:>6} {:>7} {:>10}",
            s.setting,
            m,
            beta,
            s.rounds,
            format_sig6(s.final_accuracy)
        );
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            s.setting,
            s.num_clients.map_or(String::new(), |m| m.to_string()),
            s.beta.map_or(String::new(), |b| b.to_string()),
            s.rounds,
            format_sig6(s.final_accuracy)
        ));
    }
    if let Some(out) = &args.out {
        std::fs::write(out, csv).map_err(|e| Error::io(out, e))?;
    }
    Ok(())
}
