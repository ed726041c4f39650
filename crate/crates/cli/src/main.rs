//! `ftmix`: craft, evaluate and report transferable targeted attacks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ftmix_core::desk::DeskConfig;
use ftmix_core::error::{Error, Result};
use ftmix_core::harness::{AblationGrid, AblationKind};
use ftmix_core::run::{
    cmd_ablate, cmd_attack, cmd_evaluate, cmd_prepare_desk, cmd_report, default_grid, RunConfig, DESK_PRESET,
    PAPER_PRESET,
};

/// Accelerator selection; only the CPU backend exists.
const DEVICE_ENV: &str = "FTMIX_DEVICE";

#[derive(Parser)]
#[command(name = "ftmix", version, about = "Transferable targeted adversarial attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Craft adversarial examples on every configured surrogate.
    Attack {
        #[command(flatten)]
        run: RunArgs,
        /// Evaluate on the configured targets right after crafting.
        #[arg(long)]
        evaluate: bool,
    },
    /// Evaluate a finished attack run on target models.
    Evaluate {
        run_dir: PathBuf,
        /// Comma-separated target names; the run's targets when omitted.
        #[arg(long, value_delimiter = ',')]
        targets: Vec<String>,
    },
    /// Sweep one hyperparameter and write its table and plot.
    Ablate {
        /// iterations, beta, p-alpha or ensemble.
        kind: String,
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated sweep values; p-alpha takes `--values` for p and `--alphas`.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        alphas: Vec<f64>,
    },
    /// Train the desk model zoo and write its registry and evaluation set.
    PrepareDesk {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        train_size: Option<usize>,
        #[arg(long)]
        test_size: Option<usize>,
        #[arg(long)]
        eval_size: Option<usize>,
        /// Required training accuracy of every model.
        #[arg(long)]
        min_accuracy: Option<f64>,
        /// Comma-separated subset of architectures.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
    },
    /// Summarize runs into a cost/success scatter and a combined matrix.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration: paper or desk.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    attack: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// desk or full.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_images: Option<usize>,
    /// Override any configuration key, e.g. `params.beta=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(a) = &self.attack {
            overrides.push(format!("attack={}", quote(a)));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("params.seed={s}"));
        }
        if let Some(m) = &self.mode {
            overrides.push(format!("mode={}", quote(m)));
        }
        if let Some(n) = self.max_images {
            overrides.push(format!("max_images={n}"));
        }
        let mut cfg = match (&self.config, self.preset.as_deref()) {
            (Some(path), _) => RunConfig::load(path, &overrides)?,
            (None, Some("paper")) => RunConfig::from_toml_with(PAPER_PRESET, None, &overrides)?,
            (None, Some("desk") | None) => RunConfig::from_toml_with(DESK_PRESET, None, &overrides)?,
            (None, Some(other)) => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

fn grid(kind: AblationKind, values: &[f64], alphas: &[f64], iterations: usize) -> Result<AblationGrid> {
    if values.is_empty() {
        return Ok(default_grid(kind, iterations));
    }
    let counts = || -> Result<Vec<usize>> {
        values
            .iter()
            .map(|&v| {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(Error::config("values", format!("{v} is not a positive integer")))
                }
            })
            .collect()
    };
    Ok(match kind {
        AblationKind::Iterations => AblationGrid::Iterations(counts()?),
        AblationKind::EnsembleSize => AblationGrid::Ensemble(counts()?),
        AblationKind::BetaSweep => AblationGrid::Beta(values.to_vec()),
        AblationKind::PAlphaGrid => {
            let alpha_max = if alphas.is_empty() { vec![0.75] } else { alphas.to_vec() };
            AblationGrid::PAlpha {
                p: values.to_vec(),
                alpha_max,
            }
        }
    })
}

fn check_device() {
    if let Ok(d) = std::env::var(DEVICE_ENV) {
        if !d.eq_ignore_ascii_case("cpu") {
            log::warn!("{DEVICE_ENV}={d} is not available; using cpu");
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_device();
    match cli.command {
        Command::Attack { run, evaluate } => {
            let cfg = run.load()?;
            let s = cmd_attack(&cfg)?;
            for c in &s.crafted {
                println!(
                    "{} on {}: {} images, {:.3} s/image -> {}",
                    s.attack,
                    c.surrogate,
                    s.images,
                    c.per_image_seconds,
                    cfg.output_dir.join(&c.file).display()
                );
            }
            if evaluate {
                print_matrix(&cmd_evaluate(&cfg.output_dir, &[])?);
            }
        }
        Command::Evaluate { run_dir, targets } => print_matrix(&cmd_evaluate(&run_dir, &targets)?),
        Command::Ablate {
            kind,
            run,
            values,
            alphas,
        } => {
            let cfg = run.load()?;
            let kind: AblationKind = kind.parse()?;
            let g = grid(kind, &values, &alphas, cfg.params.iterations)?;
            let t = cmd_ablate(&cfg, &g)?;
            for r in &t.rows {
                println!(
                    "{:?} white-box {} black-box {}",
                    r.params,
                    fmt(r.white_box),
                    fmt(r.black_box_mean)
                );
            }
            println!("written to {}", cfg.output_dir.display());
        }
        Command::PrepareDesk {
            out_dir,
            seed,
            epochs,
            train_size,
            test_size,
            eval_size,
            min_accuracy,
            models,
        } => {
            let mut c = DeskConfig {
                seed,
                ..Default::default()
            };
            if let Some(e) = epochs {
                c.epochs = e;
            }
            if let Some(n) = train_size {
                c.train_size = n;
            }
            if let Some(n) = test_size {
                c.test_size = n;
            }
            if let Some(n) = eval_size {
                c.eval_size = n;
            }
            if let Some(a) = min_accuracy {
                c.min_accuracy = a;
            }
            if !models.is_empty() {
                c.models = Some(models);
            }
            let r = cmd_prepare_desk(&c, &out_dir)?;
            for m in &r.models {
                println!("{}: train {:.4} test {:.4}", m.name, m.train_accuracy, m.test_accuracy);
            }
            for (a, b, d) in &r.disagreement {
                println!("disagreement {a} / {b}: {d:.4}");
            }
            println!("registry: {}", out_dir.join("registry.json").display());
        }
        Command::Report { runs, out } => {
            for p in cmd_report(&runs, &out)? {
                println!(
                    "{}/{} ({}): {:.4} at {:.3} s/image",
                    p.run, p.attack, p.surrogate, p.success, p.per_image_seconds
                );
            }
            println!("written to {}", out.display());
        }
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into())
}

fn print_matrix(r: &ftmix_core::harness::TransferReport) {
    for c in &r.cells {
        println!(
            "{} {} -> {}: {}{}",
            c.attack,
            c.surrogate,
            c.target,
            fmt(c.success),
            c.error.as_deref().map(|e| format!(" ({e})")).unwrap_or_default()
        );
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
