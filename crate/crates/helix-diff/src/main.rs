//! Command-line entry points: train, generate, check, fixtures.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use helix_diff::backbone::Model;
use helix_diff::check::run_all;
use helix_diff::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use helix_diff::config::RunConfig;
use helix_diff::data::{load_dataset, read_mask, read_ppm};
use helix_diff::data::fixtures::make_synthetic_fixtures;
use helix_diff::generate::{generate, GenerateRequest};
use helix_diff::schedule::make_linear_schedule;
use helix_diff::train::{loss_csv, prepare_dataset, train};
use helix_diff::Result;

#[derive(Parser)]
#[command(
    name = "helix-diff",
    about = "Joint anomaly image + annotation mask diffusion",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a loss log.
    Train(TrainArgs),
    /// Sample image/mask pairs from a trained checkpoint.
    Generate(GenerateArgs),
    /// Run the invariant suite and print one PASS/FAIL line per check.
    Check(CheckArgs),
    /// Write a synthetic fixture dataset.
    Fixtures(FixturesArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value configuration file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Placement preset: default, tab7-1..tab7-4, none.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Extra `key=value` overrides for any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(preset) = &self.preset {
            cfg.preset = preset.clone();
        }
        if let Some(dataset) = &self.dataset {
            cfg.dataset = dataset.clone();
        }
        for kv in &self.sets {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                helix_diff::Error::Config(format!("--set expects KEY=VALUE, got '{kv}'"))
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Output checkpoint path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    save_every: Option<usize>,
    /// Print the loss every N steps (0 = quiet).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    prompt: String,
    #[arg(short = 'n', long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value = "out")]
    outdir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Optional binary control mask (PGM) steering the anomaly layout.
    #[arg(long)]
    control: Option<PathBuf>,
    /// Use this PPM as the reference image instead of dataset round-robin.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Dataset root for reference selection (defaults to the checkpoint's).
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Replace the grouped convolutions with ordinary ones; the decoupling
    /// check must FAIL under this switch (negative control).
    #[arg(long, hide = true)]
    debug_entangle: bool,
}

#[derive(Args)]
struct FixturesArgs {
    #[arg(long, default_value = "fixtures")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    count: usize,
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.batch {
        cfg.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = &args.loss_csv {
        cfg.loss_csv = v.clone();
    }
    if let Some(v) = args.save_every {
        cfg.save_every = v;
    }
    cfg.validate()?;

    let (samples, report) = load_dataset(&cfg.dataset, cfg.k)?;
    for line in &report.lines {
        eprintln!("{line}");
    }
    let prompts: Vec<String> = samples.iter().map(|s| s.prompt.clone()).collect();
    let mut model = Model::new(cfg.backbone(), cfg.placement()?, &prompts, cfg.seed, false)?;
    cfg.vocab_tokens = model.vocab.token_list();
    let config_text = cfg.to_text();

    let schedule = make_linear_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;
    let prepared = prepare_dataset(&samples, &model)?;

    let save_every = cfg.save_every;
    let ckpt_path = cfg.checkpoint.clone();
    let snapshot = config_text.clone();
    let log_every = args.log_every;
    let report = train(&mut model, &prepared, &cfg, &schedule, |step, loss, m| {
        if log_every > 0 && (step + 1) % log_every == 0 {
            eprintln!("step {:>6}  loss {loss:.6}", step + 1);
        }
        if save_every > 0 && (step + 1) % save_every == 0 {
            save_checkpoint(&ckpt_path, &Checkpoint::from_model(snapshot.clone(), m))?;
        }
        Ok(())
    })?;

    std::fs::write(&cfg.loss_csv, loss_csv(&report.loss_log))
        .map_err(|e| helix_diff::Error::io(cfg.loss_csv.display().to_string(), e))?;
    save_checkpoint(&cfg.checkpoint, &Checkpoint::from_model(config_text, &model))?;
    match report.final_loss() {
        Some(loss) => eprintln!(
            "trained {} steps, final loss {loss:.6}; checkpoint at {}",
            cfg.steps,
            cfg.checkpoint.display()
        ),
        None => eprintln!(
            "no steps requested; wrote initialization checkpoint to {}",
            cfg.checkpoint.display()
        ),
    }
    Ok(())
}

fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let model = ckpt.instantiate()?;
    let cfg = ckpt.config()?;
    let schedule = make_linear_schedule(cfg.t_steps, cfg.beta_start, cfg.beta_end)?;

    let dataset_root = args.dataset.clone().unwrap_or_else(|| cfg.dataset.clone());
    let reference = match &args.reference {
        Some(path) => Some(read_ppm(path)?),
        None => None,
    };
    let samples = if reference.is_none() {
        let (samples, report) = load_dataset(&dataset_root, cfg.k)?;
        for line in &report.lines {
            eprintln!("{line}");
        }
        samples
    } else {
        Vec::new()
    };
    let control = match &args.control {
        Some(path) => Some(read_mask(path)?),
        None => None,
    };

    let req = GenerateRequest {
        prompt: &args.prompt,
        n: args.count,
        outdir: &args.outdir,
        seed: args.seed.unwrap_or(cfg.seed),
        control: control.as_ref(),
        reference: reference.as_ref(),
    };
    let written = generate(&model, &schedule, &samples, &req)?;
    for (img, mask) in &written {
        println!("{} {}", img.display(), mask.display());
    }
    Ok(())
}

fn cmd_check(args: &CheckArgs) -> ExitCode {
    let results = run_all(args.seed, args.debug_entangle);
    let mut failures = 0u8;
    for r in &results {
        println!("{}", r.line());
        if !r.pass {
            failures = failures.saturating_add(1);
        }
    }
    ExitCode::from(failures)
}

fn cmd_fixtures(args: &FixturesArgs) -> Result<()> {
    make_synthetic_fixtures(&args.out, args.seed, args.count)?;
    eprintln!(
        "wrote {} fixture samples under {}",
        args.count,
        args.out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Generate(args) => cmd_generate(args),
        Command::Check(args) => return cmd_check(args),
        Command::Fixtures(args) => cmd_fixtures(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
