use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hapnet_core::datagen::TauFamily;
use hapnet_core::model::AblationMode;
use hapnet_core::report::write_report_csvs;
use hapnet_core::{
    ablation_suite_modes, evaluate, generate, split, Checkpoint, Dataset, EvalReport, HapError,
    HapNet, RunConfig, Split, SyntheticConfig,
};

/// Hierarchical capsule regression for multi-event effect prediction.
#[derive(Debug, Parser)]
#[command(name = "hapnet", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/valid/test tags.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split and write a JSON report.
    Eval(EvalArgs),
    /// Train every ablation mode for several seeds.
    Ablate(AblateArgs),
    /// Export an evaluation report as CSV tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Number of events (3, 6 or 9).
    #[arg(long)]
    events: usize,
    /// Defaults to 1000, 200 and 100 for 3, 6 and 9 events.
    #[arg(long)]
    subjects_per_cluster: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Covariate dimension.
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    noise_std: Option<f64>,
    #[arg(long)]
    modifier_scale: Option<f64>,
    /// Outcome functions: trigonometric or linear.
    #[arg(long, default_value = "trigonometric", value_parser = parse_tau)]
    tau: TauFamily,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Flat `key = value` file with model and training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    /// full, no-paaa or no-recon; overrides the config file.
    #[arg(long)]
    ablation: Option<AblationMode>,
    /// Overrides both seeds of the config file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch training log as JSON.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    /// Comma-separated subset of modes; all three by default.
    #[arg(long, value_delimiter = ',')]
    modes: Vec<AblationMode>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    eval: PathBuf,
    #[arg(long)]
    out_csv: PathBuf,
}

fn parse_tau(s: &str) -> Result<TauFamily, String> {
    match s {
        "trigonometric" => Ok(TauFamily::Trigonometric),
        "linear" => Ok(TauFamily::Linear),
        other => Err(format!("unknown tau family `{other}`")),
    }
}

/// Config file (or defaults) with the dataset's dimensions filled in where
/// the file leaves them unset.
fn run_config(path: Option<&Path>, dataset: &Dataset) -> hapnet_core::Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if !cfg.explicit.contains("d") {
        cfg.model.d = dataset.d;
    }
    if !cfg.explicit.contains("n_e") {
        cfg.model.n_e = dataset.n_e;
    }
    cfg.model.validate()?;
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> hapnet_core::Result<()> {
    let preset = SyntheticConfig::preset(a.events);
    let cfg = SyntheticConfig {
        n_e: a.events,
        subjects_per_cluster: a
            .subjects_per_cluster
            .unwrap_or(preset.subjects_per_cluster),
        seed: a.seed,
        d: a.d.unwrap_or(preset.d),
        noise_std: a.noise_std.unwrap_or(preset.noise_std),
        modifier_scale: a.modifier_scale.unwrap_or(preset.modifier_scale),
        tau: a.tau,
    };
    let ds = split(&generate(&cfg)?, a.seed)?;
    ds.save(&a.out)?;
    println!(
        "wrote {} records ({} train, {} valid, {} test) to {}",
        ds.len(),
        ds.split_len(Split::Train),
        ds.split_len(Split::Valid),
        ds.split_len(Split::Test),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> hapnet_core::Result<()> {
    let ds = Dataset::load(&a.data)?;
    let mut cfg = run_config(a.config.as_deref(), &ds)?;
    if let Some(mode) = a.ablation {
        cfg.train.ablation = mode;
    }
    if let Some(seed) = a.seed {
        cfg.model.seed = seed;
        cfg.train.seed = seed;
    }
    let out = hapnet_core::train(&ds, &cfg.model, &cfg.train)?;
    for e in &out.log.epochs {
        eprintln!(
            "epoch {:>3}  loss {:.6}  mse {:.6}  valid_mape {:.4}",
            e.epoch, e.train_loss, e.train_mse, e.valid_mape
        );
    }
    out.model.to_checkpoint(cfg.train.ablation).save(&a.out)?;
    if let Some(path) = a.log {
        std::fs::write(path, serde_json::to_string_pretty(&out.log)? + "\n")?;
    }
    println!(
        "best valid MAPE {:.4} at epoch {}; checkpoint {}",
        out.log.best_valid_mape,
        out.log
            .best_epoch
            .map_or("0 (initial)".to_string(), |e| e.to_string()),
        a.out.display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> hapnet_core::Result<()> {
    let ds = Dataset::load(&a.data)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let model = HapNet::from_checkpoint(&ckpt)?;
    let report = evaluate(&model, ckpt.ablation, &ds, a.split)?;
    report.save(&a.report)?;
    println!(
        "{} on {}: MAPE {:.4} ± {:.4} over {} records",
        report.model, a.split, report.mape_mean, report.mape_stderr, report.total.count
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> hapnet_core::Result<()> {
    let ds = Dataset::load(&a.data)?;
    let cfg = run_config(a.config.as_deref(), &ds)?;
    let modes = if a.modes.is_empty() {
        AblationMode::ALL.to_vec()
    } else {
        a.modes
    };
    let table = ablation_suite_modes(&ds, &cfg.model, &cfg.train, &a.seeds, &modes, Some(&a.out))?;
    print!("{}", table.to_text());
    Ok(())
}

fn report(a: ReportArgs) -> hapnet_core::Result<()> {
    let r = EvalReport::load(&a.eval)?;
    for p in write_report_csvs(&r, &a.out_csv)? {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &HapError) -> u8 {
    if e.is_validation() {
        1
    } else {
        2
    }
}
