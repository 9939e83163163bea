use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use eit_cli::commands;
use eit_cli::config::parse_value;
use eit_cli::pipeline::pipeline;
use eit_cli::{RunConfig, RunDir};
use eit_core::Error;
use serde_json::Value;

#[derive(Parser)]
#[command(name = "eit", version, about = "Transformer ensembles for retinal image grading")]
struct Cli {
    /// Model size preset: desk or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores). 1 gives bit-reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// File of `key = value` lines with JSON values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for all artifacts.
    #[arg(long, global = true, default_value = "run")]
    out: PathBuf,
    /// Extra config override, repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Synth {
        #[arg(long)]
        n_per_class: Option<usize>,
    },
    /// Train one or more variants.
    Train {
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint of the distillation teacher.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Metric report for a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Class probabilities of one or more checkpoints.
    Predict {
        #[arg(long, required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Combine stored predictions by weighted mean or majority vote.
    Ensemble {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_delimiter = ',', conflicts_with = "vote", required_unless_present = "vote")]
        alpha: Vec<f64>,
        #[arg(long)]
        vote: bool,
    },
    /// Search ensemble weights on a simplex lattice.
    Gridsearch {
        #[arg(long)]
        preds: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Grad-CAM overlay for one image.
    Gradcam {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Target class; defaults to the predicted one.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Accuracy against attention head count.
    SweepHeads {
        #[arg(long, value_delimiter = ',')]
        heads: Vec<usize>,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Data, four members, predictions, weight search, ensemble and metrics.
    Pipeline {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(m) => Failure::Usage(m),
            other => Failure::Runtime(other),
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn overrides(cli: &Cli) -> Result<Vec<(String, Value)>, Failure> {
    let mut out: Vec<(String, Value)> = Vec::new();
    for item in &cli.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        out.push((k.trim().to_string(), parse_value(v.trim())));
    }
    if let Some(p) = &cli.preset {
        out.push(("preset".into(), Value::from(p.clone())));
    }
    if let Some(s) = cli.seed {
        out.push(("seed".into(), Value::from(s)));
    }
    if let Some(t) = cli.threads {
        out.push(("threads".into(), Value::from(t)));
    }
    let path = |p: &PathBuf| Value::from(p.to_string_lossy().into_owned());
    let mut push_opt = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            out.push((key.to_string(), v));
        }
    };
    match &cli.command {
        Command::Synth { n_per_class } => push_opt("n_per_class", n_per_class.map(Value::from)),
        Command::Train {
            variant, data, epochs, ..
        } => {
            if !variant.is_empty() {
                push_opt("variants", Some(Value::from(variant.clone())));
            }
            push_opt("data", data.as_ref().map(path));
            push_opt("epochs", epochs.map(Value::from));
        }
        Command::Eval { data, .. } | Command::Predict { data, .. } => push_opt("data", data.as_ref().map(path)),
        Command::Ensemble { alpha, .. } => {
            if !alpha.is_empty() {
                push_opt("alpha", Some(Value::from(alpha.clone())));
            }
        }
        Command::Gridsearch { step, .. } => push_opt("grid_step", step.map(Value::from)),
        Command::Gradcam { .. } => {}
        Command::SweepHeads {
            heads,
            variant,
            data,
            epochs,
        } => {
            if !heads.is_empty() {
                push_opt("sweep_heads", Some(Value::from(heads.clone())));
            }
            push_opt("variants", variant.as_ref().map(|v| Value::from(vec![v.clone()])));
            push_opt("data", data.as_ref().map(path));
            push_opt("epochs", epochs.map(Value::from));
        }
        Command::Pipeline {
            data,
            n_per_class,
            epochs,
        } => {
            push_opt("data", data.as_ref().map(path));
            push_opt("n_per_class", n_per_class.map(Value::from));
            push_opt("epochs", epochs.map(Value::from));
        }
    }
    Ok(out)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Synth { .. } => "synth",
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Predict { .. } => "predict",
        Command::Ensemble { .. } => "ensemble",
        Command::Gridsearch { .. } => "gridsearch",
        Command::Gradcam { .. } => "gradcam",
        Command::SweepHeads { .. } => "sweep-heads",
        Command::Pipeline { .. } => "pipeline",
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides(&cli)?)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| Failure::Runtime(Error::State(e.to_string())))?;
    }
    let name = command_name(&cli.command);
    log::info!("eit {name}: {}", serde_json::to_string(&cfg).expect("config serializes"));
    let mut dir = RunDir::create(&cli.out, name, &cfg)?;
    match &cli.command {
        Command::Synth { .. } => commands::synth(&cfg, &mut dir)?,
        Command::Train { teacher, .. } => commands::train_cmd(&cfg, &mut dir, teacher.as_deref())?,
        Command::Eval { ckpt, split, .. } => {
            let r = commands::eval(&cfg, &mut dir, ckpt, split)?;
            println!("accuracy {:.2}% kappa {:.4}", 100.0 * r.summary.accuracy, r.kappa);
        }
        Command::Predict { ckpt, split, .. } => {
            let p = commands::predict(&cfg, &mut dir, ckpt, split)?;
            println!("{} samples × {} models", p.n_samples(), p.n_models());
        }
        Command::Ensemble { preds, labels, vote, .. } => {
            commands::ensemble(&cfg, &mut dir, preds, labels, *vote)?;
        }
        Command::Gridsearch { preds, labels, .. } => {
            let r = commands::gridsearch(&cfg, &mut dir, preds, labels)?;
            println!(
                "alpha {} accuracy {:.2}%",
                eit_core::ensemble::format_alpha(&r.alpha),
                100.0 * r.accuracy
            );
        }
        Command::Gradcam { ckpt, image, class } => {
            commands::gradcam(&cfg, &mut dir, ckpt, image, *class)?;
        }
        Command::SweepHeads { .. } => {
            commands::sweep_heads(&cfg, &mut dir)?;
        }
        Command::Pipeline { .. } => {
            let out = pipeline(&cfg, &mut dir)?;
            println!(
                "EiT_wm {:.2}% EiT_mv {:.2}%",
                100.0 * out.weighted_mean.summary.accuracy,
                100.0 * out.majority_vote.summary.accuracy
            );
        }
    }
    let manifest = dir.finish()?;
    println!("wrote {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage message={}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: kind=usage message={}", one_line(&m));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: kind={} message={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
