use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gradleak::ablation::{run_sweep, SweepAxis, SweepConfig, SweepInputs};
use gradleak::attack::{apply_defense, capture_gradients, AttackConfig, DefenseTarget};
use gradleak::io::{
    execute_attack, load_dataset, load_images, load_prior, load_victim, replay, report_run, save_capture,
    save_dataset, save_images, save_prior, save_victim, DatasetSpec, Generator, RunInputs, RunManifest,
    ToyDataset,
};
use gradleak::models::{pretrain_prior, train_victim, PriorConfig, TrainConfig, VitConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_CONTRACT: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

/// Gradient inversion attacks on a small Vision Transformer.
#[derive(Parser)]
#[command(name = "gradleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled toy image dataset.
    SynthData(SynthArgs),
    /// Train the victim ViT on a dataset.
    TrainVictim(TrainVictimArgs),
    /// Pretrain the CNN image prior and record its batch-norm statistics.
    TrainPrior(TrainPriorArgs),
    /// Record the victim's gradients on a batch, optionally noised.
    Capture(CaptureArgs),
    /// Reconstruct a batch from a capture into a run directory.
    Attack(AttackArgs),
    /// Run one ablation or trend sweep.
    Sweep(SweepArgs),
    /// Score a run directory against the original images.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_parser = parse_str::<Generator>)]
    gen: Generator,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    size: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainVictimArgs {
    #[arg(long, required_unless_present = "print_default_config")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_default_config")]
    out: Option<PathBuf>,
    /// Training configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture (JSON); image size, channels and classes default to the dataset's.
    #[arg(long)]
    arch: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Args)]
struct TrainPriorArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CaptureArgs {
    #[arg(long)]
    victim: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated dataset indices.
    #[arg(long, value_delimiter = ',', required = true)]
    batch_indices: Vec<usize>,
    #[arg(long, default_value_t = 0.0)]
    defense_sigma: f64,
    #[arg(long, default_value = "all", value_parser = parse_str::<DefenseTarget>)]
    defense_target: DefenseTarget,
    /// Seed of the defense noise.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Capture archive; the original batch goes next to it as
    /// `<stem>.originals.gvt`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, required_unless_present_any = ["manifest", "print_default_config"])]
    capture: Option<PathBuf>,
    #[arg(long, required_unless_present_any = ["manifest", "print_default_config"])]
    victim: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Attack configuration (JSON); defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replay the run a manifest describes instead.
    #[arg(long, conflicts_with_all = ["capture", "victim", "prior", "config", "seed"])]
    manifest: Option<PathBuf>,
    /// Run directory.
    #[arg(long, required_unless_present = "print_default_config")]
    out: Option<PathBuf>,
    /// Replaces the configured seeds with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_parser = parse_str::<SweepAxis>, required_unless_present = "print_default_config")]
    axis: Option<SweepAxis>,
    #[arg(long, default_value_t = 5)]
    trials: usize,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_default_config")]
    victim: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Dataset the batches and the identification gallery come from.
    #[arg(long, required_unless_present = "print_default_config")]
    data: Option<PathBuf>,
    #[arg(long, required_unless_present = "print_default_config")]
    out: Option<PathBuf>,
    /// Replaces the sweep's base seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_default_config: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Archive of the original batch (as written by `capture`).
    #[arg(long)]
    images: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Prior for feature distance and identification; defaults to the run's.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Dataset directory used as the identification gallery.
    #[arg(long)]
    gallery: Option<PathBuf>,
}

fn parse_str<T: std::str::FromStr<Err = gradleak::Error>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: gradleak::Error| e.to_string())
}

/// Strict JSON: unknown keys are rejected by the config types.
fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| gradleak::Error::contract(format!("config {}: {e}", p.display())).into())
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = DatasetSpec {
        generator: a.gen,
        count: a.n,
        image_size: a.size,
        channels: a.channels,
        num_classes: a.classes,
        seed: a.seed,
    };
    let ds = ToyDataset::generate(&spec)?;
    save_dataset(&a.out, &ds)?;
    eprintln!("wrote {} images to {}", ds.len(), a.out.display());
    Ok(())
}

fn train_victim_cmd(a: TrainVictimArgs) -> Result<()> {
    if a.print_default_config {
        return print_json(&TrainConfig::default());
    }
    let (data, out) = (a.data.unwrap(), a.out.unwrap());
    let mut cfg: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let ds = load_dataset(&data)?;
    let arch = match &a.arch {
        Some(p) => serde_json::from_slice(&std::fs::read(p)?)
            .map_err(|e| gradleak::Error::contract(format!("architecture {}: {e}", p.display())))?,
        None => VitConfig {
            image_size: ds.spec.image_size,
            channels: ds.spec.channels,
            num_classes: ds.spec.num_classes,
            ..VitConfig::default()
        },
    };
    let (params, report) = train_victim(&arch, &ds.images, &ds.labels, &cfg)?;
    save_victim(&out, &params)?;
    eprintln!("train accuracy {:.3}, final epoch loss {:.4}", report.train_accuracy, report.epoch_loss.last().unwrap_or(&f64::NAN));
    Ok(())
}

fn train_prior_cmd(a: TrainPriorArgs) -> Result<()> {
    let ds = load_dataset(&a.data)?;
    let cfg = PriorConfig {
        image_size: ds.spec.image_size,
        channels: ds.spec.channels,
        num_classes: ds.spec.num_classes,
        ..PriorConfig::default()
    };
    let (prior, report) = pretrain_prior(&cfg, &ds.images, &ds.labels, a.epochs, a.batch_size, a.seed)?;
    save_prior(&a.out, &prior)?;
    eprintln!("final epoch loss {:.4}", report.epoch_loss.last().unwrap_or(&f64::NAN));
    Ok(())
}

fn originals_path(capture: &Path) -> PathBuf {
    capture.with_extension("originals.gvt")
}

fn capture_cmd(a: CaptureArgs) -> Result<()> {
    let victim = load_victim(&a.victim)?;
    let ds = load_dataset(&a.data)?;
    if let Some(&bad) = a.batch_indices.iter().find(|&&i| i >= ds.len()) {
        return Err(gradleak::Error::contract(format!("batch index {bad} outside dataset of {}", ds.len())).into());
    }
    let (x, labels) = ds.batch(&a.batch_indices)?;
    let mut capture = capture_gradients(&victim, &x, &labels)?;
    if a.defense_sigma > 0.0 || a.defense_target != DefenseTarget::All {
        capture = apply_defense(&capture, &victim.config, a.defense_sigma, a.defense_target, a.seed)?;
    }
    save_capture(&a.out, &capture)?;
    save_images(originals_path(&a.out), &x)?;
    eprintln!("captured {} gradients for a batch of {}", capture.grads.len(), capture.batch_size);
    Ok(())
}

fn attack_cmd(a: AttackArgs) -> Result<u8> {
    if a.print_default_config {
        print_json(&AttackConfig::default())?;
        return Ok(0);
    }
    let out = a.out.unwrap();
    let (manifest, result) = match &a.manifest {
        Some(m) => replay(&RunManifest::read(m)?, &out)?,
        None => {
            let mut cfg: AttackConfig = read_config(a.config.as_deref())?;
            if let Some(s) = a.seed {
                cfg.seeds = vec![s];
            }
            let inputs = RunInputs::hash(a.capture.as_deref().unwrap(), a.victim.as_deref().unwrap(), a.prior.as_deref())?;
            execute_attack(inputs, &cfg, &out)?
        }
    };
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    eprintln!("labels {:?}, {:.1}s, run directory {}", manifest.labels, manifest.wall_s, out.display());
    if let Some((seed, msg)) = manifest.failures.iter().next() {
        eprintln!("error: seed {seed}: {msg}");
        return Ok(EXIT_NUMERIC);
    }
    Ok(0)
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    if a.print_default_config {
        return print_json(&SweepConfig::default());
    }
    let mut cfg: SweepConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let victim = load_victim(a.victim.as_ref().unwrap())?;
    let prior = a.prior.as_ref().map(load_prior).transpose()?;
    let ds = load_dataset(a.data.as_ref().unwrap())?;
    let inputs = SweepInputs { victim: &victim, prior: prior.as_ref(), dataset: &ds };
    let report = run_sweep(&inputs, a.axis.unwrap(), &cfg, a.trials)?;
    let out = a.out.unwrap();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("sweep.csv"), report.csv())?;
    std::fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
    for s in &report.summary {
        let psnr = s.psnr.map_or("n/a".to_string(), |m| format!("{:.2} +- {:.2}", m.mean, m.std));
        eprintln!("{:<18} psnr {psnr}  failures {}/{}", s.variant, s.failures, s.trials);
    }
    Ok(())
}

fn report_cmd(a: ReportArgs) -> Result<()> {
    let originals = load_images(&a.images)?;
    let prior_path = match a.prior {
        Some(p) => Some(p),
        None => RunManifest::read(a.run.join("manifest.json"))?.inputs.prior.map(|f| f.path),
    };
    let prior = prior_path.as_ref().map(load_prior).transpose()?;
    let gallery = a.gallery.as_ref().map(|g| load_dataset(g).map(|d| d.images)).transpose()?;
    let report = report_run(&a.run, &originals, prior.as_ref(), gallery.as_ref())?;
    match a.format {
        Format::Json => print_json(&report)?,
        Format::Csv => print!("{}", std::fs::read_to_string(a.run.join("metrics.csv"))?),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::SynthData(a) => synth(a)?,
        Command::TrainVictim(a) => train_victim_cmd(a)?,
        Command::TrainPrior(a) => train_prior_cmd(a)?,
        Command::Capture(a) => capture_cmd(a)?,
        Command::Attack(a) => return attack_cmd(a),
        Command::Sweep(a) => sweep_cmd(a)?,
        Command::Report(a) => report_cmd(a)?,
    }
    Ok(0)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<gradleak::Error>() {
        Some(gradleak::Error::Numeric { .. }) => EXIT_NUMERIC,
        Some(gradleak::Error::Io(_)) | None => EXIT_FAILURE,
        Some(_) => EXIT_CONTRACT,
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("GRADLEAK_THREADS") else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).with_context(|| format!("GRADLEAK_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
