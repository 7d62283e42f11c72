//! The run configuration: one flat TOML table holding every tunable, with
//! validation against the preconditions of the core modules.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use layerlab::grpo::{GrpoConfig, RatioMode};
use layerlab::layers::{MAX_LAYERS, MIN_LAYERS};
use layerlab::metrics::{BadLayerConfig, MatchDirection};
use layerlab::numerics::AdamWConfig;
use layerlab::policy::{NetConfig, PretrainConfig, Sampler};
use layerlab::reward::{JudgeEndpoint, PromptTemplates, RewardSource, ScoringConfig, MIN_CELL};

use crate::CliError;

/// Which judge scores the groups during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum JudgeKind {
    /// Ground-truth oracle, continuous Phase-2 quality.
    Oracle,
    /// Ground-truth oracle that compresses Phase 1 and ranks in Phase 2.
    OracleCompressed,
    /// An OpenAI-compatible chat endpoint.
    Remote,
}

/// The fixed conditioning prompts of the text-conditioning ablation. The toy
/// network has no text encoder, so the choice is recorded with the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PromptTemplate {
    Basic,
    Detailed,
}

impl PromptTemplate {
    pub fn text(self) -> &'static str {
        match self {
            PromptTemplate::Basic => "a clean, well composed image.",
            PromptTemplate::Detailed => {
                "a high quality image with multiple distinct objects clearly separated from a clean background, \
                 sharp edges, vivid colors, balanced lighting, well-defined foreground elements against a coherent \
                 backdrop, professional composition with clear depth layers."
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Base checkpoint used by `train`; defaults to `<out_dir>/base.ckpt`.
    pub base_checkpoint: Option<PathBuf>,

    pub canvas: usize,
    pub min_layers: usize,
    pub max_layers: usize,

    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,

    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,

    pub rounds: usize,
    pub group_size: usize,
    pub train_steps: usize,
    pub eval_steps: usize,
    pub noise_level: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
    pub adv_clip: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub ratio_mode: RatioMode,
    pub scale_floor: f64,
    pub post_scale: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,

    pub eval_every: usize,
    pub eval_scenes: usize,
    pub eval_seed: u64,
    pub blank_thresh: f64,
    pub glaze_band: f64,
    pub match_direction: MatchDirection,

    pub judge: JudgeKind,
    pub calibration: bool,
    pub max_retries: usize,
    pub grid_cell: usize,
    /// Directory holding `system.txt`, `phase1.txt`, `phase2.txt`; the
    /// built-in templates are used when unset.
    pub reward_prompts: Option<PathBuf>,
    pub prompt_template: Option<PromptTemplate>,
    pub judge_url: Option<String>,
    pub judge_model: Option<String>,
    pub judge_timeout: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let grpo = GrpoConfig::default();
        let bad = BadLayerConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            base_checkpoint: None,
            canvas: 16,
            min_layers: MIN_LAYERS,
            max_layers: MAX_LAYERS,
            hidden_width: 256,
            hidden_layers: 3,
            adapter_rank: 4,
            adapter_alpha: 4.0,
            pretrain_steps: 5000,
            pretrain_batch: 32,
            pretrain_lr: 1e-3,
            rounds: 200,
            group_size: grpo.group_size,
            train_steps: grpo.train_steps,
            eval_steps: 50,
            noise_level: grpo.noise_level,
            t_min: grpo.t_clamp.0,
            t_max: grpo.t_clamp.1,
            clip_eps: grpo.clip_eps,
            kl_beta: grpo.kl_beta,
            adv_eps: grpo.adv_eps,
            adv_clip: grpo.adv_clip,
            epochs: grpo.epochs,
            minibatches: grpo.minibatches,
            ratio_mode: grpo.ratio_mode,
            scale_floor: grpo.scale_floor,
            post_scale: grpo.post_scale,
            // 1e-5 barely moves the toy adapters in 200 rounds.
            lr: 1e-3,
            weight_decay: grpo.optimizer.weight_decay,
            grad_clip: grpo.optimizer.max_grad_norm,
            checkpoint_every: 50,
            eval_every: 50,
            eval_scenes: 64,
            eval_seed: 1_000_000,
            blank_thresh: bad.blank_frac,
            glaze_band: bad.glaze_band,
            match_direction: MatchDirection::PredToGt,
            judge: JudgeKind::Oracle,
            calibration: true,
            max_retries: 3,
            grid_cell: 64,
            reward_prompts: None,
            prompt_template: None,
            judge_url: None,
            judge_model: None,
            judge_timeout: 60.0,
        }
    }
}

fn fail(msg: impl Into<String>) -> Result<(), CliError> {
    Err(CliError::Config(msg.into()))
}

fn unit_open(name: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0 && v < 1.0) {
        return fail(format!("{name} must lie in (0, 1), got {v}"));
    }
    Ok(())
}

fn positive(name: &str, v: f64) -> Result<(), CliError> {
    if !(v > 0.0 && v.is_finite()) {
        return fail(format!("{name} must be positive and finite, got {v}"));
    }
    Ok(())
}

fn at_least_one(name: &str, v: usize) -> Result<(), CliError> {
    if v == 0 {
        return fail(format!("{name} must be at least 1"));
    }
    Ok(())
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.canvas < 8 {
            return fail(format!("canvas must be at least 8, got {}", self.canvas));
        }
        if !(MIN_LAYERS <= self.min_layers
            && self.min_layers <= self.max_layers
            && self.max_layers <= MAX_LAYERS)
        {
            return fail(format!(
                "layer range {}..={} must lie within {MIN_LAYERS}..={MAX_LAYERS}",
                self.min_layers, self.max_layers
            ));
        }
        at_least_one("hidden_width", self.hidden_width)?;
        at_least_one("hidden_layers", self.hidden_layers)?;
        at_least_one("adapter_rank", self.adapter_rank)?;
        positive("adapter_alpha", self.adapter_alpha)?;
        at_least_one("pretrain_batch", self.pretrain_batch)?;
        positive("pretrain_lr", self.pretrain_lr)?;
        at_least_one("group_size", self.group_size)?;
        at_least_one("train_steps", self.train_steps)?;
        at_least_one("eval_steps", self.eval_steps)?;
        if !(self.noise_level >= 0.0 && self.noise_level.is_finite()) {
            return fail(format!(
                "noise_level must be non-negative, got {}",
                self.noise_level
            ));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return fail(format!(
                "need 0 < t_min < t_max < 1, got {} and {}",
                self.t_min, self.t_max
            ));
        }
        unit_open("clip_eps", self.clip_eps)?;
        if !(self.kl_beta >= 0.0 && self.kl_beta.is_finite()) {
            return fail(format!(
                "kl_beta must be non-negative, got {}",
                self.kl_beta
            ));
        }
        positive("adv_eps", self.adv_eps)?;
        positive("adv_clip", self.adv_clip)?;
        at_least_one("epochs", self.epochs)?;
        if self.minibatches == 0 || self.minibatches > self.group_size {
            return fail(format!("minibatches must lie in 1..={}", self.group_size));
        }
        positive("scale_floor", self.scale_floor)?;
        positive("post_scale", self.post_scale)?;
        positive("lr", self.lr)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            ));
        }
        positive("grad_clip", self.grad_clip)?;
        at_least_one("eval_scenes", self.eval_scenes)?;
        unit_open("blank_thresh", self.blank_thresh)?;
        unit_open("glaze_band", self.glaze_band)?;
        if self.grid_cell < MIN_CELL {
            return fail(format!(
                "grid_cell must be at least {MIN_CELL}, got {}",
                self.grid_cell
            ));
        }
        positive("judge_timeout", self.judge_timeout)?;
        if self.judge == JudgeKind::Remote
            && (self.judge_url.is_none() || self.judge_model.is_none())
        {
            return fail("the remote judge needs judge_url and judge_model");
        }
        Ok(())
    }

    pub fn base_checkpoint_path(&self) -> PathBuf {
        self.base_checkpoint
            .clone()
            .unwrap_or_else(|| self.out_dir.join("base.ckpt"))
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            min_layers: self.min_layers,
            max_layers: self.max_layers,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            adapter_rank: self.adapter_rank,
            adapter_alpha: self.adapter_alpha,
            ..NetConfig::for_canvas(self.canvas, self.canvas)
        }
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            optimizer: AdamWConfig {
                lr: self.pretrain_lr,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn grpo_config(&self) -> GrpoConfig {
        GrpoConfig {
            group_size: self.group_size,
            clip_eps: self.clip_eps,
            kl_beta: self.kl_beta,
            adv_eps: self.adv_eps,
            adv_clip: self.adv_clip,
            epochs: self.epochs,
            ratio_mode: self.ratio_mode,
            minibatches: self.minibatches,
            scale_floor: self.scale_floor,
            post_scale: self.post_scale,
            train_steps: self.train_steps,
            noise_level: self.noise_level,
            t_clamp: (self.t_min, self.t_max),
            optimizer: AdamWConfig {
                lr: self.lr,
                weight_decay: self.weight_decay,
                max_grad_norm: self.grad_clip,
                ..AdamWConfig::default()
            },
        }
    }

    pub fn bad_layer_config(&self) -> BadLayerConfig {
        BadLayerConfig {
            blank_frac: self.blank_thresh,
            glaze_band: self.glaze_band,
            ..BadLayerConfig::default()
        }
    }

    pub fn eval_sampler(&self) -> Sampler {
        Sampler::Ode {
            steps: self.eval_steps,
        }
    }

    pub fn scoring_config(&self) -> Result<ScoringConfig, CliError> {
        let templates = match &self.reward_prompts {
            Some(dir) => PromptTemplates::load_dir(dir)
                .map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?,
            None => PromptTemplates::default(),
        };
        Ok(ScoringConfig {
            max_retries: self.max_retries,
            calibrate: self.calibration,
            reward: if self.calibration {
                RewardSource::Calibrated
            } else {
                RewardSource::Individual
            },
            cell: self.grid_cell,
            templates,
        })
    }

    pub fn endpoint(&self) -> Result<JudgeEndpoint, CliError> {
        match (&self.judge_url, &self.judge_model) {
            (Some(url), Some(model)) => Ok(JudgeEndpoint {
                base_url: url.clone(),
                model: model.clone(),
                timeout_secs: self.judge_timeout,
            }),
            _ => Err(CliError::Config(
                "the remote judge needs judge_url and judge_model".into(),
            )),
        }
    }
}
