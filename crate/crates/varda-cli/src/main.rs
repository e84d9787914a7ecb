//! Command-line front end: dataset generation, training, evaluation, and the
//! self-check suite.
//!
//! Every run writes a manifest recording the resolved configuration, the
//! dataset content hash, and a deterministic run id; output files carry that
//! id so results can be traced back to their exact inputs. Exit codes: 0
//! success, 1 failed checks or runtime errors, 2 usage or configuration
//! errors, 3 numerical abort during training.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use varda::config::{
    self, dataset_content_sha, read_checkpoint, run_id, write_run_manifest, RunManifest,
};
use varda::data::{apply_spec, generate, load_dataset, save_dataset, Dataset, SynthSpec};
use varda::loss::DiscrepancyMode;
use varda::metrics::{evaluate, report_to_csv, report_to_table};
use varda::nets::{Domain, NetConfig};
use varda::train::{apply_config, train, TrainConfig, TrainError};
use varda::verify;
use varda::Real;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "varda", version, about = "Two-domain variational segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic two-domain dataset directory.
    Gen(GenArgs),
    /// Train the two-branch model on a dataset directory.
    Train(TrainArgs),
    /// Score a checkpoint against a labeled dataset split.
    Eval(EvalArgs),
    /// Run the numerical self-checks and report pass/fail per check.
    Verify,
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Generation spec file (`key = value`); defaults apply when omitted.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Overrides the spec's base seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DiscModeArg {
    Sliced,
    Full,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory produced by `gen`.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for manifest, loss CSV, and checkpoints.
    #[arg(long)]
    out: PathBuf,
    /// Training config file (`key = value`); flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Source ELBO weight.
    #[arg(long)]
    alpha1: Option<Real>,
    /// Target ELBO weight.
    #[arg(long)]
    alpha2: Option<Real>,
    /// Latent discrepancy weight.
    #[arg(long)]
    alpha3: Option<Real>,
    /// Weight on the conditional-entropy term inside the target bound.
    #[arg(long)]
    entropy_weight: Option<Real>,
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Convolution layers across the decoder trunk (0, 3, 7, or 11).
    #[arg(long)]
    decoder_depth: Option<usize>,
    /// Drop label/prediction conditioning from the decoders.
    #[arg(long)]
    weak: bool,
    #[arg(long, value_enum)]
    disc_mode: Option<DiscModeArg>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<Real>,
    /// Resume from this checkpoint instead of initializing fresh parameters.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Source,
    TargetTrain,
    TargetTest,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderArg {
    Source,
    Target,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to score against.
    #[arg(long)]
    data: PathBuf,
    /// Labeled split to evaluate (target-train has no labels).
    #[arg(long, value_enum, default_value = "target-test")]
    split: SplitArg,
    /// Encoder branch to run the images through. Defaults to the branch
    /// matching the split's domain.
    #[arg(long, value_enum)]
    encoder: Option<EncoderArg>,
    /// Write the metrics CSV here (printed to stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Gen(args) => exit_on(cmd_gen(&args)),
        Command::Train(args) => exit_on(cmd_train(&args)),
        Command::Eval(args) => exit_on(cmd_eval(&args)),
        Command::Verify => cmd_verify(),
    }
}

/// Error paths print to stderr and map onto the exit-code contract.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn usage(err: impl Display) -> CliError {
        CliError { code: EXIT_USAGE, message: err.to_string() }
    }

    fn failure(err: impl Display) -> CliError {
        CliError { code: EXIT_FAILURE, message: err.to_string() }
    }
}

fn exit_on(result: Result<(), CliError>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn read_config_file(path: &Path) -> Result<Vec<config::KvEntry>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read {}: {e}", path.display())))?;
    config::parse_kv(&text)
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn write_manifest_file(dir: &Path, manifest: &RunManifest) -> Result<PathBuf, CliError> {
    let path = dir.join("run_manifest.txt");
    write_run_manifest(&path, manifest).map_err(CliError::failure)?;
    Ok(path)
}

fn cmd_gen(args: &GenArgs) -> Result<(), CliError> {
    let mut spec = SynthSpec::default();
    if let Some(path) = &args.spec {
        let entries = read_config_file(path)?;
        apply_spec(&entries, &mut spec)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate().map_err(CliError::usage)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::failure(format!("cannot create {}: {e}", args.out.display())))?;
    let dataset = generate(&spec).map_err(CliError::failure)?;
    save_dataset(&args.out, &dataset).map_err(CliError::failure)?;
    let sha = dataset_content_sha(&args.out).map_err(CliError::failure)?;

    let resolved = spec.resolved_text();
    let manifest = RunManifest {
        id: run_id(&resolved, &sha),
        command: "gen".into(),
        dataset_sha: sha.clone(),
        resolved_config: resolved,
        started_unix: unix_now(),
    };
    write_manifest_file(&args.out, &manifest)?;

    println!(
        "wrote {} source / {} target-train / {} target-test images to {}",
        dataset.source.len(),
        dataset.target_train.len(),
        dataset.target_test.len(),
        args.out.display()
    );
    println!("dataset sha256 {sha}");
    Ok(())
}

/// Layered configuration: defaults, then the config file, then flags.
fn resolve_train_config(args: &TrainArgs) -> Result<(TrainConfig, NetConfig), CliError> {
    let mut cfg = TrainConfig::default();
    let mut net = NetConfig::default();
    if let Some(path) = &args.config {
        let entries = read_config_file(path)?;
        apply_config(&entries, &mut cfg, &mut net)
            .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.alpha1 {
        cfg.weights.alpha1 = v;
    }
    if let Some(v) = args.alpha2 {
        cfg.weights.alpha2 = v;
    }
    if let Some(v) = args.alpha3 {
        cfg.weights.alpha3 = v;
    }
    if let Some(v) = args.entropy_weight {
        cfg.weights.entropy = v;
    }
    if let Some(v) = args.latent_dim {
        net.latent_dim = v;
    }
    if let Some(v) = args.decoder_depth {
        net.decoder_convs = v;
    }
    if args.weak {
        net.label_conditioned = false;
    }
    if let Some(v) = args.disc_mode {
        cfg.mode = match v {
            DiscModeArg::Sliced => DiscrepancyMode::Sliced,
            DiscModeArg::Full => DiscrepancyMode::Full,
        };
    }
    if let Some(v) = args.iters {
        cfg.iterations = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    cfg.resume_from = args.resume.clone();
    Ok((cfg, net))
}

/// The network's data-facing dimensions must agree with the dataset; a
/// config that says otherwise is reported, not silently overridden.
fn reconcile_net_with_data(net: &mut NetConfig, data: &Dataset) -> Result<(), CliError> {
    let defaults = NetConfig::default();
    let checks = [
        ("image_hw", &mut net.image_hw, data.image_hw(), defaults.image_hw),
        ("num_classes", &mut net.num_classes, data.num_classes(), defaults.num_classes),
    ];
    for (name, field, from_data, default) in checks {
        if *field == default {
            *field = from_data;
        } else if *field != from_data {
            return Err(CliError::usage(format!(
                "config sets {name} = {field} but the dataset has {from_data}"
            )));
        }
    }
    let channels = data.source.first().map_or(1, |r| r.image.shape()[0]);
    net.in_channels = channels;
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), CliError> {
    let (mut cfg, mut net) = resolve_train_config(args)?;
    let dataset = load_dataset(&args.data).map_err(CliError::failure)?;
    reconcile_net_with_data(&mut net, &dataset)?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::failure(format!("cannot create {}: {e}", args.out.display())))?;
    let sha = dataset_content_sha(&args.data).map_err(CliError::failure)?;
    let resolved = cfg.resolved_text(&net);
    let id = run_id(&resolved, &sha);
    cfg.run_id = Some(id.clone());
    cfg.log_path = Some(args.out.join("loss.csv"));
    cfg.checkpoint_path = Some(args.out.join("checkpoint.vck"));
    if cfg.checkpoint_every.is_none() {
        cfg.checkpoint_every = Some(500.min(cfg.iterations.max(1)));
    }

    let manifest = RunManifest {
        id: id.clone(),
        command: "train".into(),
        dataset_sha: sha,
        resolved_config: resolved,
        started_unix: unix_now(),
    };
    let manifest_path = write_manifest_file(&args.out, &manifest)?;
    println!("run {id} (manifest {})", manifest_path.display());

    let started = Instant::now();
    let outcome = train(&cfg, &net, &dataset).map_err(|e| match e {
        TrainError::NumericalAbort { .. } => {
            CliError { code: EXIT_NUMERICAL, message: e.to_string() }
        }
        TrainError::BadConfig(_) => CliError::usage(e),
        other => CliError::failure(other),
    })?;

    let last = outcome.rows.last().map_or(String::from("no iterations ran"), |row| {
        format!(
            "final losses: seg {:.4}, target {:.4}, discrepancy {:.4}, total {:.4}",
            row.breakdown.seg_loss,
            row.breakdown.target_loss,
            row.breakdown.discrepancy,
            row.breakdown.total
        )
    });
    println!(
        "{} iterations in {:.0} s{}",
        outcome.completed,
        started.elapsed().as_secs_f64(),
        if outcome.early_stopped { " (stopped early)" } else { "" }
    );
    println!("{last}");
    println!("checkpoint {}", args.out.join("checkpoint.vck").display());
    println!("loss log {}", args.out.join("loss.csv").display());
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let checkpoint = read_checkpoint(&args.checkpoint).map_err(CliError::failure)?;
    let dataset = load_dataset(&args.data).map_err(CliError::failure)?;

    let (split_name, items, split_domain) = match args.split {
        SplitArg::Source => ("source", &dataset.source, Domain::Source),
        SplitArg::TargetTrain => ("target-train", &dataset.target_train, Domain::Target),
        SplitArg::TargetTest => ("target-test", &dataset.target_test, Domain::Target),
    };
    let encoder = match args.encoder {
        Some(EncoderArg::Source) => Domain::Source,
        Some(EncoderArg::Target) => Domain::Target,
        None => split_domain,
    };

    let net = &checkpoint.meta.net;
    if net.image_hw != dataset.image_hw() || net.num_classes != dataset.num_classes() {
        return Err(CliError::usage(format!(
            "checkpoint was trained for {}x{} images with {} classes, dataset has {}x{} with {}",
            net.image_hw,
            net.image_hw,
            net.num_classes,
            dataset.image_hw(),
            dataset.image_hw(),
            dataset.num_classes()
        )));
    }

    let report = evaluate(&checkpoint.params, net, encoder, items).map_err(CliError::failure)?;

    let run = if checkpoint.meta.run_id.is_empty() { "-" } else { &checkpoint.meta.run_id };
    println!(
        "checkpoint {} (run {run}, iteration {}), split {split_name}, {:?} encoder",
        args.checkpoint.display(),
        checkpoint.meta.iter,
        encoder
    );
    print!("{}", report_to_table(&report));

    let csv = format!("# run {run}\n{}", report_to_csv(&report));
    match &args.out {
        Some(path) => {
            fs::write(path, &csv)
                .map_err(|e| CliError::failure(format!("cannot write {}: {e}", path.display())))?;
            println!("metrics csv {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_verify() -> ExitCode {
    let results = verify::run_all();
    let mut failed = 0;
    for r in &results {
        println!("{}", r.line());
        failed += usize::from(!r.passed);
    }
    let total: f64 = results.iter().map(|r| r.seconds).sum();
    println!("{} checks, {} failed, {total:.1} s", results.len(), failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_FAILURE)
    }
}
