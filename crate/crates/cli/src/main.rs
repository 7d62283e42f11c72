use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use layerlab::grpo::RatioMode;
use layerlab_cli::commands::{self, EvalOpts, PretrainOpts, ScoreOpts, TrainOpts};
use layerlab_cli::config::{JudgeKind, PromptTemplate, RunConfig};
use layerlab_cli::CliError;

#[derive(Parser)]
#[command(
    name = "layerlab",
    version,
    about = "RL fine-tuning of a layer-decomposition flow model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat TOML config file; every key is optional.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    canvas: Option<usize>,
    /// Override any config key, e.g. `--set group-size=8`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base velocity network on toy scenes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        /// Overwrite an existing base checkpoint.
        #[arg(long)]
        force: bool,
        /// Continue from an existing base checkpoint.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
    },
    /// GRPO fine-tuning of the adapters.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        /// Use the Phase-1 score as the reward.
        #[arg(long)]
        no_calibration: bool,
        #[arg(long, value_enum)]
        ratio_mode: Option<RatioModeArg>,
        #[arg(long, value_enum)]
        prompt_template: Option<PromptTemplate>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate a checkpoint on the fixed held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Full checkpoint; defaults to the base checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Adapter checkpoint to apply.
        #[arg(long)]
        adapters: Option<PathBuf>,
        #[arg(long, short)]
        n: Option<usize>,
        #[arg(long)]
        dump_png: Option<PathBuf>,
        /// Report name inside `<out_dir>/eval/`.
        #[arg(long, default_value = "report")]
        tag: String,
    },
    /// Score a group of decompositions (directories of layer PNGs).
    Score {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        stacks: Vec<PathBuf>,
        /// Toy scene providing the input and ground truth.
        #[arg(long)]
        scene_seed: Option<u64>,
        #[arg(long, value_enum)]
        judge: Option<JudgeKind>,
        #[arg(long)]
        no_calibration: bool,
    },
    /// Build a labelled comparison grid from composite PNGs.
    Grid {
        #[arg(required = true)]
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 64)]
        cell: usize,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Render a metrics log or plot CSV to SVG with ±1σ bands.
    Plot {
        /// `metrics.jsonl` or a CSV emitted by a previous plot.
        input: PathBuf,
        #[arg(long, default_value = "plot.svg")]
        svg: PathBuf,
        #[arg(long, default_value = "plot.csv")]
        csv: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum RatioModeArg {
    SumRescale,
    SpatialMean,
}

fn toml_value(raw: &str) -> toml::Value {
    let parsed: Result<toml::Table, _> = toml::from_str(&format!("v = {raw}"));
    parsed
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Loads the config file and applies overrides before validation.
fn load_config(common: &Common, extra: Vec<(&str, toml::Value)>) -> Result<RunConfig, CliError> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut table: toml::Table =
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv}")))?;
        table.insert(k.trim().replace('-', "_"), toml_value(v.trim()));
    }
    if let Some(d) = &common.out_dir {
        table.insert(
            "out_dir".into(),
            toml::Value::String(d.display().to_string()),
        );
    }
    if let Some(s) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(c) = common.canvas {
        table.insert("canvas".into(), toml::Value::Integer(c as i64));
    }
    for (k, v) in extra {
        table.insert(k.into(), v);
    }
    RunConfig::parse(&toml::to_string(&table).map_err(|e| CliError::Config(e.to_string()))?)
}

fn enum_value<T: serde::Serialize>(v: T) -> toml::Value {
    toml::Value::try_from(v).expect("enum serialises")
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain {
            common,
            steps,
            force,
            resume,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = steps {
                extra.push(("pretrain_steps", toml::Value::Integer(s as i64)));
            }
            let cfg = load_config(&common, extra)?;
            let path = commands::pretrain(&cfg, PretrainOpts { force, resume })?;
            println!("{}", path.display());
        }
        Command::Train {
            common,
            rounds,
            judge,
            no_calibration,
            ratio_mode,
            prompt_template,
            lr,
        } => {
            let mut extra = Vec::new();
            if let Some(j) = judge {
                extra.push(("judge", enum_value(j)));
            }
            if no_calibration {
                extra.push(("calibration", toml::Value::Boolean(false)));
            }
            if let Some(m) = ratio_mode {
                let m = match m {
                    RatioModeArg::SumRescale => RatioMode::SumRescale,
                    RatioModeArg::SpatialMean => RatioMode::SpatialMean,
                };
                extra.push(("ratio_mode", enum_value(m)));
            }
            if let Some(p) = prompt_template {
                extra.push(("prompt_template", enum_value(p)));
            }
            if let Some(lr) = lr {
                extra.push(("lr", toml::Value::Float(lr)));
            }
            let cfg = load_config(&common, extra)?;
            let summary = commands::train(&cfg, &TrainOpts { rounds })?;
            println!("{}", summary.metrics_path.display());
        }
        Command::Eval {
            common,
            checkpoint,
            adapters,
            n,
            dump_png,
            tag,
        } => {
            let cfg = load_config(&common, Vec::new())?;
            let report = commands::eval(
                &cfg,
                &EvalOpts {
                    checkpoint,
                    adapters,
                    n,
                    dump_png,
                    tag,
                },
            )?;
            let agg: serde_json::Map<String, serde_json::Value> = report
                .aggregate()
                .into_iter()
                .map(|(k, s)| {
                    (
                        k.to_string(),
                        serde_json::to_value(s).expect("summary serialises"),
                    )
                })
                .collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&agg).expect("aggregate serialises")
            );
        }
        Command::Score {
            common,
            stacks,
            scene_seed,
            judge,
            no_calibration,
        } => {
            let mut extra = Vec::new();
            if let Some(j) = judge {
                extra.push(("judge", enum_value(j)));
            }
            if no_calibration {
                extra.push(("calibration", toml::Value::Boolean(false)));
            }
            let cfg = load_config(&common, extra)?;
            let report = commands::score(&cfg, &ScoreOpts { stacks, scene_seed })?;
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serialises")
            );
        }
        Command::Grid { images, cell, out } => commands::grid(&images, cell, &out)?,
        Command::Plot { input, svg, csv } => commands::plot_cmd(&input, &svg, &csv)?,
    }
    Ok(())
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
