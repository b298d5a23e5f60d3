use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use paglab_cli::commands;
use paglab_cli::config::{RunConfig, PRESETS};

#[derive(Parser)]
#[command(name = "paglab", version, about = "Perceptually aligned gradient experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Start from a named preset (see `paglab presets`).
    #[arg(long)]
    preset: Option<String>,
    /// key=value config file applied after the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single key; repeatable and applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// toy, csv:PATH or images:PATH
    #[arg(long)]
    dataset: Option<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct RepsArgs {
    /// one-image, class-mean, nearest-neighbor or rigd
    #[arg(long)]
    scheme: Option<String>,
    /// Nearest-neighbor pool size per class.
    #[arg(long)]
    pool: Option<usize>,
    /// Teacher checkpoint for rigd targets.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Precomputed representative store.
    #[arg(long)]
    reps: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a representative store for a dataset.
    MakeReps {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reps: RepsArgs,
    },
    /// Train a model and evaluate it.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reps: RepsArgs,
        /// vanilla, pag or adversarial
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Clean and robust accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Rasterize the decision regions of a 2-D checkpoint.
    ExportBoundary {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate once per lambda value.
    SweepLambda {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        reps: RepsArgs,
        /// Comma-separated lambda values.
        #[arg(long)]
        lambdas: Option<String>,
    },
    /// List the built-in presets.
    Presets,
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = match &common.preset {
        Some(p) => RunConfig::preset(p)?,
        None => RunConfig::default(),
    };
    if let Some(path) = &common.config {
        cfg.merge_file(path)?;
    }
    if let Some(s) = common.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(d) = &common.dataset {
        cfg.set("dataset", d)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for s in &common.sets {
        cfg.assign(s)?;
    }
    Ok(cfg)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn reps_flags(r: &RepsArgs) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("scheme", r.scheme.clone()),
        ("pool", r.pool.map(|p| p.to_string())),
        ("teacher", path_str(&r.teacher)),
        ("reps", path_str(&r.reps)),
    ]
}

fn run(cli: Cli) -> Result<()> {
    let (common, cfg) = match &cli.command {
        Command::Presets => {
            for (name, text) in PRESETS {
                println!("{name}: {}", text.trim().replace('\n', " "));
            }
            return Ok(());
        }
        Command::MakeReps { common, reps } => (common, resolve(common, &reps_flags(reps))?),
        Command::Train {
            common,
            reps,
            regime,
            lambda,
            epochs,
        } => {
            let mut flags = reps_flags(reps);
            flags.push(("regime", regime.clone()));
            flags.push(("lambda", lambda.map(|l| l.to_string())));
            flags.push(("epochs", epochs.map(|e| e.to_string())));
            (common, resolve(common, &flags)?)
        }
        Command::Eval { common, checkpoint } | Command::ExportBoundary { common, checkpoint } => {
            (common, resolve(common, &[("checkpoint", path_str(checkpoint))])?)
        }
        Command::SweepLambda { common, reps, lambdas } => {
            let mut flags = reps_flags(reps);
            flags.push(("lambdas", lambdas.clone()));
            (common, resolve(common, &flags)?)
        }
    };
    if common.dry_run {
        print!("{}", cfg.to_text());
        return Ok(());
    }
    let out = &common.out;
    match cli.command {
        Command::MakeReps { .. } => {
            let s = commands::make_reps(&cfg, out)?;
            println!(
                "scheme={} samples={} classes={} dim={} -> {}",
                s.store.scheme,
                s.store.samples(),
                s.store.classes(),
                s.store.dim(),
                s.path.display()
            );
        }
        Command::Train { .. } => {
            let s = commands::train(&cfg, out)?;
            let last = s.outcome.log.last();
            println!(
                "regime={} epochs={} final_loss={:.6} clean_acc={:.4} robust_acc={:.4} -> {}",
                cfg.get("regime"),
                s.outcome.log.len(),
                last.map_or(f64::NAN, |r| r.train_loss),
                s.eval.clean_acc,
                s.eval.robust_acc,
                s.checkpoint.display()
            );
        }
        Command::Eval { .. } => {
            let r = commands::eval(&cfg, out)?;
            println!("clean_acc={:.4} robust_acc={:.4}", r.clean_acc, r.robust_acc);
        }
        Command::ExportBoundary { .. } => {
            let m = commands::export_boundary(&cfg, out)?;
            match m.overall {
                Some(v) => println!("mean margin {v:.4} -> {}", out.join("boundary.ppm").display()),
                None => println!("no boundary inside the grid -> {}", out.join("boundary.ppm").display()),
            }
        }
        Command::SweepLambda { .. } => {
            for r in commands::sweep_lambda(&cfg, out)? {
                println!("lambda={} clean_acc={:.4} robust_acc={:.4}", r.lambda, r.clean_acc, r.robust_acc);
            }
        }
        Command::Presets => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
