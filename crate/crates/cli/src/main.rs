mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use complab::config::CONFIG_KEYS;
use complab::data::{read_features_path, read_labels_path, write_features_path, write_labels_path};
use complab::eval::{group_pair_quality, neighbor_pair_quality, retrieval_eval, RetrievalSet};
use complab::synth::SYNTH_KEYS;
use complab::{
    generate, pseudo_labels, read_checkpoint_info, Ablation, Dataset, Error, MetricsReport, Result,
    SynthConfig, TrainConfig, Trainer,
};
use log::info;

use manifest::{stage_output_dir, ExperimentManifest};

fn key_help(title: &str, keys: &[(&str, &str)]) -> String {
    let width = keys.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = format!("{title}:\n");
    for (k, d) in keys {
        out.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    out
}

#[derive(Parser)]
#[command(
    name = "complab",
    version,
    about = "Complementary pseudo-label domain adaptation experiments"
)]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, env = "COMPLAB_THREADS", global = true)]
    threads: Option<usize>,
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate paired synthetic source/target domains.
    #[command(after_long_help = key_help("Generator config keys (TOML file or --set)", SYNTH_KEYS))]
    Synth(SynthArgs),
    /// Train on a labeled source and an unlabeled target domain.
    #[command(after_long_help = key_help("Training config keys (TOML file or --set)", CONFIG_KEYS))]
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint's best model on a labeled dataset.
    Eval(EvalArgs),
    /// Pseudo labels of a checkpoint on a dataset, with quality when truth is given.
    Labels(LabelsArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// TOML file of generator keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    occl_rate: Option<f64>,
    #[arg(long)]
    occl_frac: Option<f64>,
    /// Override one key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Write binary feature files.
    #[arg(long)]
    binary: bool,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Re-run the experiment recorded in a manifest.
    #[arg(long, conflicts_with_all = ["source", "source_labels", "target", "target_truth", "config"])]
    manifest: Option<PathBuf>,
    /// Source features, text or binary.
    #[arg(long, required_unless_present = "manifest")]
    source: Option<PathBuf>,
    /// Source labels CSV (`sample_id,identity,camera`).
    #[arg(long, required_unless_present = "manifest")]
    source_labels: Option<PathBuf>,
    /// Target features, text or binary.
    #[arg(long, required_unless_present = "manifest")]
    target: Option<PathBuf>,
    /// Target ground truth; enables pseudo-label quality and validation mAP.
    #[arg(long)]
    target_truth: Option<PathBuf>,
    /// Output directory; must not exist or be empty.
    #[arg(long)]
    out: PathBuf,
    /// TOML file of training keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings under the config file: `desk` or `reference`.
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Loss subset: `n`, `ns`, `nt`, `nst` or `st`.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Share of the non-validation target used for adaptation, in (0,1].
    #[arg(long)]
    target_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Override one key, as `key=value`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(clap::Args)]
struct LabelsArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    features: PathBuf,
    /// Ground-truth labels; adds neighbor and group pair quality.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Partition CSV `sample_id,group_id`.
    #[arg(long)]
    out: PathBuf,
}

fn existing(path: &Path) -> Result<&Path> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Data(format!("{} not found", path.display())))
    }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Applies a TOML file and `key=value` overrides on top of `base`.
fn layered_table(base: String, file: Option<&Path>, sets: &[String]) -> Result<toml::Table> {
    let mut table: toml::Table = base.parse().map_err(|e| config_error(format!("{e}")))?;
    if let Some(path) = file {
        let text = fs::read_to_string(existing(path)?)?;
        let over: toml::Table = text
            .parse()
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        table.extend(over);
    }
    for s in sets {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| config_error(format!("--set expects key=value, got {s:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let value = format!("{k} = {v}")
            .parse::<toml::Table>()
            .or_else(|_| format!("{k} = {}", toml::Value::String(v.into())).parse())
            .map_err(|e| config_error(format!("--set {s}: {e}")))?;
        table.extend(value);
    }
    Ok(table)
}

fn set_key(table: &mut toml::Table, key: &str, value: Option<toml::Value>) {
    if let Some(v) = value {
        table.insert(key.into(), v);
    }
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let mut table = layered_table(
        SynthConfig::default().to_toml_string(),
        args.config.as_deref(),
        &args.sets,
    )?;
    set_key(
        &mut table,
        "seed",
        args.seed.map(|s| toml::Value::Integer(s as i64)),
    );
    set_key(
        &mut table,
        "occl_rate",
        args.occl_rate.map(toml::Value::Float),
    );
    set_key(
        &mut table,
        "occl_frac",
        args.occl_frac.map(toml::Value::Float),
    );
    let config = SynthConfig::from_toml_str(&table.to_string())?;
    let domains = generate(&config)?;
    fs::create_dir_all(&args.out)?;
    let ext = if args.binary { "bin" } else { "txt" };
    let out = |name: &str| args.out.join(name);
    write_features_path(
        &out(&format!("source.{ext}")),
        &domains.source.features,
        args.binary,
    )?;
    write_labels_path(
        &out("source_labels.csv"),
        domains.source.labels.as_deref().unwrap_or(&[]),
    )?;
    write_features_path(
        &out(&format!("target.{ext}")),
        &domains.target.features,
        args.binary,
    )?;
    write_labels_path(
        &out("target_truth.csv"),
        domains.target.labels.as_deref().unwrap_or(&[]),
    )?;
    fs::write(out("synth.toml"), config.to_toml_string())?;
    println!(
        "wrote {} source and {} target samples to {}",
        domains.source.len(),
        domains.target.len(),
        args.out.display()
    );
    Ok(())
}

fn train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let base = match args.preset.as_str() {
        "desk" => TrainConfig::desk(),
        "reference" => TrainConfig::default(),
        other => {
            return Err(config_error(format!(
                "unknown preset {other:?} (desk|reference)"
            )))
        }
    };
    let mut table = layered_table(base.to_toml_string(), args.config.as_deref(), &args.sets)?;
    set_key(
        &mut table,
        "ablation",
        args.ablation.map(|a| toml::Value::String(a.to_string())),
    );
    set_key(
        &mut table,
        "target_fraction",
        args.target_fraction.map(toml::Value::Float),
    );
    set_key(
        &mut table,
        "seed",
        args.seed.map(|s| toml::Value::Integer(s as i64)),
    );
    set_key(
        &mut table,
        "epochs",
        args.epochs.map(|e| toml::Value::Integer(e as i64)),
    );
    TrainConfig::from_toml_str(&table.to_string())
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let manifest = match &args.manifest {
        Some(path) => ExperimentManifest::load(existing(path)?)?.rerun(&args.out),
        None => ExperimentManifest::new(
            args.config.clone(),
            train_config(args)?,
            args.source.clone().expect("required by clap"),
            args.source_labels.clone().expect("required by clap"),
            args.target.clone().expect("required by clap"),
            args.target_truth.clone(),
            args.out.clone(),
        )?,
    };
    let source = Dataset::load(&manifest.source, Some(&manifest.source_labels))?;
    let target = Dataset::load(&manifest.target, manifest.target_truth.as_deref())?;
    let mut trainer = Trainer::new(&source, &target, manifest.config.clone())?;

    stage_output_dir(&args.out, |dir| {
        manifest.write(&dir.join("manifest.json"))?;
        fs::write(dir.join("config.toml"), manifest.config.to_toml_string())?;
        Ok(())
    })?;
    info!("run {} in {}", manifest.run_id, args.out.display());

    let mut history = BufWriter::new(File::create(args.out.join("history.jsonl"))?);
    while !trainer.is_done() {
        let record = trainer.run_epoch()?;
        serde_json::to_writer(&mut history, record)?;
        writeln!(history)?;
        history.flush()?;
    }
    trainer.save(&args.out.join("checkpoint.cmpt"))?;
    let summary = trainer.into_summary();
    let best = summary.best.as_ref();
    println!(
        "{}",
        serde_json::json!({
            "run_id": manifest.run_id,
            "epochs": summary.history.len(),
            "best_epoch": best.map(|b| b.epoch),
            "best_map": best.map(|b| b.map),
        })
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let info = read_checkpoint_info(existing(&args.checkpoint)?)?;
    let data = Dataset::load(existing(&args.features)?, Some(existing(&args.labels)?))?;
    let embeddings: Vec<Vec<f64>> = data
        .features
        .iter()
        .map(|x| info.model.embed(x))
        .collect::<Result<_>>()?;
    let labels = data.identities().expect("labels loaded");
    let ids: Vec<usize> = (0..data.len()).collect();
    let set = RetrievalSet::new(&embeddings, &labels, &ids)?;
    let report = MetricsReport::from_retrieval(&retrieval_eval(&set, &set));
    if let Some(path) = &args.csv {
        report.write_csv(BufWriter::new(File::create(path)?))?;
    }
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

fn cmd_labels(args: &LabelsArgs) -> Result<()> {
    let info = read_checkpoint_info(existing(&args.checkpoint)?)?;
    let features = read_features_path(existing(&args.features)?)?;
    let truth = args
        .truth
        .as_deref()
        .map(|p| existing(p).and_then(read_labels_path))
        .transpose()?
        .map(|l| l.iter().map(|s| s.identity).collect::<Vec<_>>());
    let (memory, partition) = pseudo_labels(&info, &features)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    partition.write_csv(&mut w)?;
    w.flush()?;
    let mut report = serde_json::json!({
        "samples": partition.len(),
        "groups": partition.num_groups(),
        "max_group_size": partition.max_group_size(),
    });
    if let Some(truth) = truth {
        if truth.len() != features.len() {
            return Err(Error::Data(format!(
                "{} truth labels for {} samples",
                truth.len(),
                features.len()
            )));
        }
        report["neighbor"] = serde_json::to_value(neighbor_pair_quality(memory.sets(), &truth)?)?;
        report["group"] = serde_json::to_value(group_pair_quality(&partition, &truth)?)?;
    }
    println!("{report}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Labels(a) => cmd_labels(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
