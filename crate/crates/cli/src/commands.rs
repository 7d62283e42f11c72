//! The subcommands. Each takes a validated [`RunConfig`] plus its own
//! options and writes its artifacts into the run directory.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use layerlab::grpo::{ConditionSource, GrpoError, ToyConditions, Trainer};
use layerlab::layers::{generate_scene, LayerStack, RgbImage, SceneSample};
use layerlab::metrics::{evaluate_policy, held_out_scenes, EvalReport};
use layerlab::numerics::Checkpoint;
use layerlab::policy::{Condition, ToySceneSource, VelocityNet, ADAPTER_PREFIX};
use layerlab::reward::{
    build_grid, score_group, GroupReport, Judge, OracleJudge, OracleMode, RemoteJudge, SampleView,
};

use crate::config::{JudgeKind, RunConfig};
use crate::plot;
use crate::rundir::{snapshot, JsonLines, RunLock};
use crate::CliError;

const PRETRAIN_STEP: &str = "pretrain_step";
const ROUND: &str = "round";

#[derive(Debug, Clone, Copy, Default)]
pub struct PretrainOpts {
    pub force: bool,
    pub resume: bool,
}

/// Pretrains the base network by flow matching on toy scenes. Writes the
/// base checkpoint and `pretrain_loss.csv`; returns the checkpoint path.
pub fn pretrain(cfg: &RunConfig, opts: PretrainOpts) -> Result<PathBuf, CliError> {
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let seeds = snapshot(&cfg.out_dir, "pretrain", cfg)?;
    let path = cfg.base_checkpoint_path();
    let loss_path = cfg.out_dir.join("pretrain_loss.csv");

    let (mut net, start) = if path.exists() && opts.resume {
        let ck = Checkpoint::load(&path)?;
        let net = VelocityNet::from_checkpoint(&ck)?;
        if net.config != cfg.net_config() {
            return Err(CliError::Config(
                "checkpoint network does not match the config".into(),
            ));
        }
        (
            net,
            ck.counters.get(PRETRAIN_STEP).copied().unwrap_or(0) as usize,
        )
    } else if path.exists() && !opts.force {
        return Err(CliError::Exists(path));
    } else {
        std::fs::write(&loss_path, "step,loss\n")?;
        (VelocityNet::init(cfg.net_config(), seeds.net_init)?, 0)
    };
    if !loss_path.exists() {
        std::fs::write(&loss_path, "step,loss\n")?;
    }

    let offset = start as u64;
    let mut source = ToySceneSource::new(
        cfg.canvas,
        cfg.canvas,
        cfg.min_layers,
        cfg.max_layers,
        seeds.pretrain_scenes.wrapping_add(offset),
    );
    let mut pcfg = cfg.pretrain_config();
    pcfg.seed = pcfg.seed.wrapping_add(offset);
    let mut rows = String::new();
    let losses = layerlab::policy::pretrain(&mut net, &mut source, &pcfg, |step, loss| {
        if step % 100 == 0 {
            log::info!("pretrain step {} loss {loss:.5}", start + step);
        }
    })?;
    for (i, l) in losses.iter().enumerate() {
        rows.push_str(&format!("{},{l}\n", start + i));
    }
    let mut f = std::fs::OpenOptions::new().append(true).open(&loss_path)?;
    std::io::Write::write_all(&mut f, rows.as_bytes())?;

    let mut ck = net.to_checkpoint()?;
    ck.counters
        .insert(PRETRAIN_STEP.into(), (start + losses.len()) as u64);
    ck.save(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOpts {
    pub rounds: Option<usize>,
}

fn make_judge(cfg: &RunConfig) -> Result<Box<dyn Judge>, CliError> {
    Ok(match cfg.judge {
        JudgeKind::Oracle => Box::new(OracleJudge::new(OracleMode::Normal)),
        JudgeKind::OracleCompressed => Box::new(OracleJudge::new(OracleMode::CompressThenRank)),
        JudgeKind::Remote => Box::new(RemoteJudge::new(cfg.endpoint()?)),
    })
}

fn load_base(cfg: &RunConfig) -> Result<VelocityNet, CliError> {
    let path = cfg.base_checkpoint_path();
    if !path.exists() {
        return Err(CliError::Input(format!(
            "base checkpoint {} not found; run pretrain first",
            path.display()
        )));
    }
    let net = VelocityNet::from_checkpoint(&Checkpoint::load(&path)?)?;
    if net.config.layer_dim != 4 * cfg.canvas * cfg.canvas {
        return Err(CliError::Config(format!(
            "base checkpoint was trained for a different canvas (layer_dim {})",
            net.config.layer_dim
        )));
    }
    Ok(net)
}

fn adapter_checkpoint(net: &VelocityNet, round: usize) -> Result<Checkpoint, CliError> {
    let mut ck = Checkpoint::new(net.adapter_params());
    ck.counters.insert(ROUND.into(), round as u64);
    ck.meta.insert(
        "net_config".into(),
        serde_json::to_string(&net.config).expect("config serialises"),
    );
    Ok(ck)
}

fn eval_row(round: usize, report: &EvalReport) -> Value {
    let agg: serde_json::Map<String, Value> = report
        .aggregate()
        .into_iter()
        .map(|(k, s)| (k.to_string(), serde_json::to_value(s).expect("summary")))
        .collect();
    json!({ "kind": "eval", "round": round, "aggregate": agg })
}

/// Toy conditions tagged with the configured conditioning prompt.
struct Prompted {
    inner: ToyConditions,
    prompt: Option<String>,
}

impl ConditionSource for Prompted {
    fn next_condition(&mut self) -> Result<(Condition, Option<SceneSample>), GrpoError> {
        let (mut c, s) = self.inner.next_condition()?;
        c.prompt = self.prompt.clone();
        Ok((c, s))
    }
}

#[derive(Serialize)]
struct TranscriptRecord<'a> {
    round: usize,
    report: &'a GroupReport,
}

/// Summary of a finished training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub rounds: usize,
    pub metrics_path: PathBuf,
    pub adapters_path: PathBuf,
}

/// GRPO on the adapters. Writes `metrics.jsonl` (eval rows and one row per
/// round), `transcripts.jsonl`, periodic `adapters_rNNNN.ckpt` and
/// `adapters_final.ckpt`.
pub fn train(cfg: &RunConfig, opts: &TrainOpts) -> Result<TrainSummary, CliError> {
    let _lock = RunLock::acquire(&cfg.out_dir)?;
    let seeds = snapshot(&cfg.out_dir, "train", cfg)?;
    let rounds = opts.rounds.unwrap_or(cfg.rounds);
    let mut net = load_base(cfg)?;
    net.reset_adapters(seeds.adapters)?;
    let judge = make_judge(cfg)?;
    let mut trainer = Trainer::new(
        net,
        cfg.grpo_config(),
        cfg.scoring_config()?,
        cfg.canvas,
        cfg.canvas,
        seeds.sampler,
    )?;
    let mut source = Prompted {
        inner: ToyConditions::new(
            cfg.canvas,
            cfg.canvas,
            cfg.min_layers,
            cfg.max_layers,
            seeds.conditions,
        ),
        prompt: cfg.prompt_template.map(|p| p.text().to_string()),
    };
    let scenes = held_out_scenes(
        cfg.eval_scenes,
        seeds.eval_scenes,
        cfg.canvas,
        cfg.canvas,
        cfg.min_layers,
        cfg.max_layers,
    )?;

    let metrics_path = cfg.out_dir.join("metrics.jsonl");
    let mut metrics = JsonLines::create(&metrics_path)?;
    let mut transcripts = JsonLines::create(&cfg.out_dir.join("transcripts.jsonl"))?;
    let evaluate = |net: &VelocityNet| -> Result<EvalReport, CliError> {
        let (report, _) = evaluate_policy(
            net,
            &scenes,
            cfg.eval_sampler(),
            true,
            seeds.eval_noise,
            &cfg.bad_layer_config(),
            cfg.match_direction,
        )?;
        Ok(report)
    };
    metrics.write(&eval_row(0, &evaluate(&trainer.net)?))?;

    for r in 0..rounds {
        let out = match trainer.train_round(&mut source, judge.as_ref()) {
            Ok(out) => out,
            Err(e) => {
                let err = CliError::from(e);
                std::fs::write(cfg.out_dir.join("abort.txt"), format!("round {r}: {err}\n"))?;
                return Err(err);
            }
        };
        let mut row = serde_json::to_value(&out.metrics).expect("metrics serialise");
        row.as_object_mut()
            .expect("object")
            .insert("kind".into(), json!("round"));
        metrics.write(&row)?;
        transcripts.write(&TranscriptRecord {
            round: r,
            report: &out.report,
        })?;
        log::info!(
            "round {r} reward {:.4} ± {:.4} clip {:.3} kl {:.5}",
            out.metrics.reward_mean,
            out.metrics.reward_std,
            out.metrics.clip_frac,
            out.metrics.kl
        );
        let done = r + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            adapter_checkpoint(&trainer.net, done)?
                .save(cfg.out_dir.join(format!("adapters_r{done:04}.ckpt")))?;
        }
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 {
            metrics.write(&eval_row(done, &evaluate(&trainer.net)?))?;
        }
    }
    let adapters_path = cfg.out_dir.join("adapters_final.ckpt");
    adapter_checkpoint(&trainer.net, rounds)?.save(&adapters_path)?;
    Ok(TrainSummary {
        rounds,
        metrics_path,
        adapters_path,
    })
}

#[derive(Debug, Clone, Default)]
pub struct EvalOpts {
    /// Full checkpoint; defaults to the configured base checkpoint.
    pub checkpoint: Option<PathBuf>,
    /// Adapter checkpoint applied on top.
    pub adapters: Option<PathBuf>,
    /// Number of held-out scenes; defaults to `eval_scenes`.
    pub n: Option<usize>,
    /// Directory for PNG dumps of every decomposition.
    pub dump_png: Option<PathBuf>,
    /// Name of the report files inside `<out_dir>/eval/`.
    pub tag: String,
}

/// Evaluates a checkpoint on the held-out set; writes
/// `<out_dir>/eval/<tag>.jsonl` and `.csv` and returns the report.
pub fn eval(cfg: &RunConfig, opts: &EvalOpts) -> Result<EvalReport, CliError> {
    let n = opts.n.unwrap_or(cfg.eval_scenes);
    if n == 0 {
        return Err(CliError::Config("eval needs at least one scene".into()));
    }
    let seeds = crate::rundir::Seeds::derive(cfg);
    let ck_path = opts
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.base_checkpoint_path());
    let mut net = VelocityNet::from_checkpoint(&Checkpoint::load(&ck_path)?)?;
    if let Some(a) = &opts.adapters {
        net.load_adapters(&Checkpoint::load(a)?)?;
    }
    if net.config.layer_dim != 4 * cfg.canvas * cfg.canvas {
        return Err(CliError::Config(
            "checkpoint was trained for a different canvas".into(),
        ));
    }
    let scenes = held_out_scenes(
        n,
        seeds.eval_scenes,
        cfg.canvas,
        cfg.canvas,
        cfg.min_layers,
        cfg.max_layers,
    )?;
    let (report, stacks) = evaluate_policy(
        &net,
        &scenes,
        cfg.eval_sampler(),
        true,
        seeds.eval_noise,
        &cfg.bad_layer_config(),
        cfg.match_direction,
    )?;
    let dir = cfg.out_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{}.jsonl", opts.tag)), report.to_jsonl())?;
    std::fs::write(dir.join(format!("{}.csv", opts.tag)), report.to_csv())?;
    if let Some(png_dir) = &opts.dump_png {
        for (k, (stack, scene)) in stacks.iter().zip(&scenes).enumerate() {
            let d = png_dir.join(format!("scene_{k:03}"));
            stack.save_pngs(&d)?;
            scene.composite.save_png(d.join("input.png"))?;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default)]
pub struct ScoreOpts {
    /// Directories of `layer_k.png` stacks forming one group.
    pub stacks: Vec<PathBuf>,
    /// Toy scene supplying the input composite and ground truth.
    pub scene_seed: Option<u64>,
}

/// Scores a group of stacks with the configured judge.
pub fn score(cfg: &RunConfig, opts: &ScoreOpts) -> Result<GroupReport, CliError> {
    if opts.stacks.is_empty() {
        return Err(CliError::Input(
            "score needs at least one stack directory".into(),
        ));
    }
    let stacks = opts
        .stacks
        .iter()
        .map(LayerStack::load_pngs)
        .collect::<Result<Vec<_>, _>>()?;
    let (l, w, h) = (stacks[0].len(), stacks[0].width(), stacks[0].height());
    if stacks
        .iter()
        .any(|s| (s.len(), s.width(), s.height()) != (l, w, h))
    {
        return Err(CliError::Input(
            "all stacks in a group must share layer count and size".into(),
        ));
    }
    let scene = opts
        .scene_seed
        .map(|seed| generate_scene(seed, l, w, h))
        .transpose()?;
    let input = match &scene {
        Some(s) => s.composite.clone(),
        None => {
            let p = opts.stacks[0].join("composite.png");
            RgbImage::load_png(&p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))?
        }
    };
    let views: Vec<SampleView<'_>> = stacks
        .iter()
        .map(|s| SampleView {
            composite: &input,
            stack: s,
            scene: scene.as_ref().map(|x| &x.scene),
        })
        .collect();
    let judge = make_judge(cfg)?;
    Ok(score_group(judge.as_ref(), &views, &cfg.scoring_config()?)?)
}

/// Builds the labelled comparison grid from composite images.
pub fn grid(images: &[PathBuf], cell: usize, out: &Path) -> Result<(), CliError> {
    if images.is_empty() {
        return Err(CliError::Input("grid needs at least one image".into()));
    }
    let imgs = images
        .iter()
        .map(|p| {
            RgbImage::load_png(p).map_err(|e| CliError::Input(format!("{}: {e}", p.display())))
        })
        .collect::<Result<Vec<_>, _>>()?;
    build_grid(&imgs, cell)?.save_png(out)?;
    Ok(())
}

/// Renders a metrics log (JSON lines) or a previously emitted CSV to SVG
/// and CSV.
pub fn plot_cmd(input: &Path, svg_out: &Path, csv_out: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(input)?;
    let series = if input.extension().is_some_and(|e| e == "csv") {
        plot::from_csv(&text)?
    } else {
        plot::series_from_log(&text)?
    };
    std::fs::write(svg_out, plot::to_svg(&series))?;
    std::fs::write(csv_out, plot::to_csv(&series))?;
    Ok(())
}

/// Whether a checkpoint holds only adapter tensors.
pub fn is_adapter_checkpoint(ck: &Checkpoint) -> bool {
    ck.params.names().all(|n| n.starts_with(ADAPTER_PREFIX))
}
