//! Group-relative policy optimisation of the adapters: group rollouts under
//! the SDE sampler, within-group advantages, per-step centred importance
//! ratios, the clipped surrogate with `1/Δt` weighting and a KL penalty
//! against the adapter-free reference.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::flow::{
    build_schedule, log_prob_rows, next_states_at, sample_sde, sde_mean_var, states_at, FlowError,
    NoiseSchedule, Trajectory, DEFAULT_T_CLAMP,
};
use crate::layers::{generate_scene, unpack, LayerError, LayerStack, SceneSample};
use crate::numerics::{AdamW, AdamWConfig, NumericsError, StepReport, Tape, Tensor, Var};
use crate::policy::{Condition, PolicyError, Trainable, VelocityNet};
use crate::reward::{score_group, GroupReport, Judge, RewardError, SampleView, ScoringConfig};

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("empty group")]
    EmptyGroup,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("zero-dimensional log-probabilities")]
    ZeroDim,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("advantages are not set")]
    MissingAdvantages,
    #[error("non-finite importance ratio at step {step}")]
    NonFiniteRatio { step: usize },
    #[error("non-finite state in trajectory {trajectory} at step {step}")]
    NonFiniteRollout { trajectory: usize, step: usize },
    #[error("round aborted, judge failed: {0}")]
    Judge(#[from] RewardError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Layers(#[from] LayerError),
}

/// How per-element log-probability differences are reduced to one log-ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    /// Sum, then divide by `√D`.
    #[default]
    SumRescale,
    /// Mean over elements (divide the sum by `D`).
    SpatialMean,
}

impl RatioMode {
    pub fn divisor(self, d: usize) -> f64 {
        match self {
            RatioMode::SumRescale => (d as f64).sqrt(),
            RatioMode::SpatialMean => d as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
    pub adv_clip: f64,
    pub epochs: usize,
    pub ratio_mode: RatioMode,
    pub minibatches: usize,
    pub scale_floor: f64,
    /// Multiplies centred log-ratios before exponentiation.
    pub post_scale: f64,
    pub train_steps: usize,
    pub noise_level: f64,
    pub t_clamp: (f64, f64),
    pub optimizer: AdamWConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_eps: 0.2,
            kl_beta: 1e-3,
            adv_eps: 1e-4,
            adv_clip: 5.0,
            epochs: 1,
            ratio_mode: RatioMode::SumRescale,
            minibatches: 2,
            scale_floor: 1e-6,
            post_scale: 1.0,
            train_steps: 8,
            noise_level: 0.7,
            t_clamp: DEFAULT_T_CLAMP,
            optimizer: AdamWConfig {
                lr: 1e-5,
                ..AdamWConfig::default()
            },
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Config(m.into()));
        if self.group_size == 0 {
            return bad("group_size must be ≥ 1");
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad("clip_eps must lie in (0, 1)");
        }
        if !(self.adv_eps > 0.0) {
            return bad("adv_eps must be positive");
        }
        if !(self.adv_clip > 0.0) {
            return bad("adv_clip must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1");
        }
        if self.minibatches == 0 || self.minibatches > self.group_size {
            return bad("minibatches must lie in [1, group_size]");
        }
        if !(self.scale_floor > 0.0) || !(self.post_scale > 0.0) || !(self.kl_beta >= 0.0) {
            return bad("scale_floor and post_scale must be positive, kl_beta non-negative");
        }
        if self.train_steps == 0 {
            return bad("train_steps must be ≥ 1");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, GrpoError> {
        Ok(build_schedule(
            self.train_steps,
            self.noise_level,
            self.t_clamp,
        )?)
    }
}

/// Population mean and standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Within-group advantages `clip((r − r̄)/(σ_r + ν), −c, c)`.
pub fn advantages(rewards: &[f64], nu: f64, c_adv: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::Config("non-finite reward".into()));
    }
    // The rounded mean of identical values can differ from them in the last
    // bit, so a constant group is zeroed explicitly.
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let (mean, std) = mean_std(rewards);
    Ok(rewards
        .iter()
        .map(|r| ((r - mean) / (std + nu)).clamp(-c_adv, c_adv))
        .collect())
}

/// `(Σℓ_new − Σℓ_old)/√D` or `/D` depending on `mode`.
pub fn normalized_log_ratio(
    l_new: &[f64],
    l_old: &[f64],
    mode: RatioMode,
) -> Result<f64, GrpoError> {
    if l_new.len() != l_old.len() {
        return Err(GrpoError::Length(format!(
            "{} vs {}",
            l_new.len(),
            l_old.len()
        )));
    }
    if l_new.is_empty() {
        return Err(GrpoError::ZeroDim);
    }
    let diff: f64 = l_new.iter().sum::<f64>() - l_old.iter().sum::<f64>();
    Ok(diff / mode.divisor(l_new.len()))
}

/// `(x − μ)/max(s, floor)` with group mean and population std; all-equal
/// input gives zeros.
pub fn center_per_step(raw: &[f64], floor: f64) -> Vec<f64> {
    if raw.is_empty() {
        return Vec::new();
    }
    if raw.iter().all(|&v| v == raw[0]) {
        return vec![0.0; raw.len()];
    }
    let (mean, std) = mean_std(raw);
    let s = std.max(floor);
    raw.iter().map(|v| (v - mean) / s).collect()
}

/// One condition with its `G` stored trajectories and, once scored, the
/// rewards and advantages.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub cond: Condition,
    pub schedule: NoiseSchedule,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Option<Vec<f64>>,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub advantages: Option<Vec<f64>>,
}

impl GroupRollout {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Records every reward and derives the advantages.
    pub fn set_rewards(&mut self, rewards: Vec<f64>, cfg: &GrpoConfig) -> Result<(), GrpoError> {
        if rewards.len() != self.len() {
            return Err(GrpoError::Length(format!(
                "{} rewards for {} trajectories",
                rewards.len(),
                self.len()
            )));
        }
        let adv = advantages(&rewards, cfg.adv_eps, cfg.adv_clip)?;
        (self.reward_mean, self.reward_std) = mean_std(&rewards);
        self.rewards = Some(rewards);
        self.advantages = Some(adv);
        Ok(())
    }

    /// Final samples decoded into layer stacks.
    pub fn stacks(&self, width: usize, height: usize) -> Result<Vec<LayerStack>, GrpoError> {
        self.trajectories
            .iter()
            .map(|t| {
                Ok(unpack(
                    &t.final_sample,
                    self.cond.num_layers,
                    width,
                    height,
                )?)
            })
            .collect()
    }
}

fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
}

/// Samples `g` SDE trajectories for one condition from a fixed policy,
/// storing states, means, noises and behaviour log-probabilities.
pub fn collect_group(
    net: &VelocityNet,
    cond: &Condition,
    schedule: &NoiseSchedule,
    g: usize,
    rng: &mut impl Rng,
) -> Result<GroupRollout, GrpoError> {
    if g == 0 {
        return Err(GrpoError::EmptyGroup);
    }
    let d = net.dim_for(cond.num_layers);
    let x1 = normal_matrix(rng, g, d);
    let policy = net.field(cond, true, Trainable::Nothing);
    let trajectories =
        sample_sde(&policy, &x1, schedule, |_| normal_matrix(rng, g, d)).map_err(|e| match e {
            FlowError::NonFinite { row, step } => GrpoError::NonFiniteRollout {
                trajectory: row,
                step,
            },
            other => other.into(),
        })?;
    for (k, t) in trajectories.iter().enumerate() {
        if let Some(step) = t
            .steps
            .iter()
            .position(|s| s.mean.iter().any(|v| !v.is_finite()))
        {
            return Err(GrpoError::NonFiniteRollout {
                trajectory: k,
                step,
            });
        }
    }
    Ok(GroupRollout {
        cond: cond.clone(),
        schedule: schedule.clone(),
        trajectories,
        rewards: None,
        reward_mean: f64::NAN,
        reward_std: f64::NAN,
        advantages: None,
    })
}

/// Diagnostics gathered while building the surrogate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    /// Mean importance ratio over every term.
    pub ratio_mean: f64,
    /// Fraction of terms with `|ρ − 1| > ε_c`.
    pub clip_frac: f64,
    /// Mean normalised KL estimate.
    pub kl: f64,
    /// Population std of the raw log-ratios across the minibatch, per step.
    pub ratio_std_per_step: Vec<f64>,
    /// Mean raw log-ratio magnitude over every term.
    pub raw_abs_mean: f64,
    pub raw_abs_max: f64,
}

/// The clipped surrogate over trajectories `members` of `rollout`, replayed
/// under the current adapters.
pub fn surrogate_loss<'t>(
    tape: &'t Tape,
    net: &VelocityNet,
    rollout: &GroupRollout,
    members: &[usize],
    cfg: &GrpoConfig,
) -> Result<(Var<'t>, LossStats), GrpoError> {
    let adv_all = rollout
        .advantages
        .as_ref()
        .ok_or(GrpoError::MissingAdvantages)?;
    if members.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let trajs: Vec<&Trajectory> = members.iter().map(|&k| &rollout.trajectories[k]).collect();
    let d = trajs[0].dim();
    if d == 0 {
        return Err(GrpoError::ZeroDim);
    }
    let divisor = cfg.ratio_mode.divisor(d);
    let kl_divisor = RatioMode::SumRescale.divisor(d);
    let adv = tape.constant(Tensor::vector(
        members.iter().map(|&k| adv_all[k]).collect(),
    ));
    let cond = [&rollout.cond];
    let steps = rollout.schedule.len();
    let terms = (members.len() * steps) as f64;

    let mut total: Option<Var<'t>> = None;
    let mut stats = LossStats::default();
    let (mut ratio_sum, mut clipped, mut kl_sum, mut raw_abs) = (0.0, 0usize, 0.0, 0.0);
    for (i, step) in rollout.schedule.steps.iter().enumerate() {
        let x = states_at(&trajs, i);
        let x_next = next_states_at(&trajs, i);
        let t = vec![step.t; members.len()];

        let v_new = net.forward(tape, &x, &t, &cond, true, Trainable::Adapters)?;
        let lp_new = log_prob_rows(tape, &x_next, sde_mean_var(tape, &x, v_new, step)?, step);
        let lp_old = tape.constant(Tensor::vector(
            trajs.iter().map(|tr| tr.steps[i].log_prob).collect(),
        ));
        let v_ref = net.forward(tape, &x, &t, &cond, false, Trainable::Nothing)?;
        let lp_ref = log_prob_rows(tape, &x_next, sde_mean_var(tape, &x, v_ref, step)?, step);

        let raw = (lp_new - lp_old).scale(1.0 / divisor);
        let centred = raw.standardize(cfg.scale_floor).scale(cfg.post_scale);
        let ratio = centred.exp();
        let ratio_val = ratio.value();
        if !ratio_val.all_finite() {
            return Err(GrpoError::NonFiniteRatio { step: i });
        }
        let unclipped = ratio * adv;
        let clipped_term = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
        let policy_term = unclipped.minimum(clipped_term).scale(-1.0 / step.dt).sum();
        let kl = (lp_new - lp_ref).scale(1.0 / kl_divisor);
        let step_loss = policy_term + kl.sum().scale(cfg.kl_beta);
        total = Some(match total {
            Some(acc) => acc + step_loss,
            None => step_loss,
        });

        let raw_val = raw.value();
        stats.ratio_std_per_step.push(mean_std(raw_val.data()).1);
        raw_abs += raw_val.data().iter().map(|v| v.abs()).sum::<f64>();
        stats.raw_abs_max = raw_val
            .data()
            .iter()
            .fold(stats.raw_abs_max, |m, v| m.max(v.abs()));
        ratio_sum += ratio_val.sum();
        clipped += ratio_val
            .data()
            .iter()
            .filter(|r| (*r - 1.0).abs() > cfg.clip_eps)
            .count();
        kl_sum += kl.value().sum();
    }
    stats.ratio_mean = ratio_sum / terms;
    stats.clip_frac = clipped as f64 / terms;
    stats.kl = kl_sum / terms;
    stats.raw_abs_mean = raw_abs / terms;
    let loss = total
        .expect("schedule has at least one step")
        .scale(1.0 / terms);
    Ok((loss, stats))
}

/// Supplies the condition for each round, with ground truth when known.
pub trait ConditionSource {
    fn next_condition(&mut self) -> Result<(Condition, Option<SceneSample>), GrpoError>;
}

/// Fresh toy scenes with a uniformly drawn layer count.
pub struct ToyConditions {
    pub width: usize,
    pub height: usize,
    pub min_layers: usize,
    pub max_layers: usize,
    rng: ChaCha8Rng,
}

impl ToyConditions {
    pub fn new(
        width: usize,
        height: usize,
        min_layers: usize,
        max_layers: usize,
        seed: u64,
    ) -> Self {
        Self {
            width,
            height,
            min_layers,
            max_layers,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl ConditionSource for ToyConditions {
    fn next_condition(&mut self) -> Result<(Condition, Option<SceneSample>), GrpoError> {
        let l = self.rng.random_range(self.min_layers..=self.max_layers);
        let s = generate_scene(self.rng.random(), l, self.width, self.height)?;
        Ok((Condition::new(&s.composite, l), Some(s)))
    }
}

/// One record of the per-round metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub num_layers: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Mean normalised Phase-1 score of the group.
    pub phase1_mean: f64,
    pub phase2_fallback: bool,
    pub ratio_mean: f64,
    pub clip_frac: f64,
    pub kl: f64,
    pub loss: f64,
    pub grad_norm: f64,
    pub ratio_std_per_step: Vec<f64>,
}

/// Mutable training state: the network, optimizer and sampling RNG.
pub struct Trainer {
    pub net: VelocityNet,
    pub opt: AdamW,
    pub cfg: GrpoConfig,
    pub scoring: ScoringConfig,
    pub schedule: NoiseSchedule,
    pub rng: ChaCha8Rng,
    pub round: usize,
    pub width: usize,
    pub height: usize,
}

/// Everything a round produced besides its metrics, for logging.
pub struct RoundOutput {
    pub metrics: RoundMetrics,
    pub report: GroupReport,
}

impl Trainer {
    pub fn new(
        net: VelocityNet,
        cfg: GrpoConfig,
        scoring: ScoringConfig,
        width: usize,
        height: usize,
        seed: u64,
    ) -> Result<Self, GrpoError> {
        cfg.validate()?;
        if net.config.layer_dim != 4 * width * height {
            return Err(GrpoError::Config(format!(
                "network layer_dim {} does not fit a {width}x{height} canvas",
                net.config.layer_dim
            )));
        }
        let schedule = cfg.schedule()?;
        Ok(Self {
            net,
            opt: AdamW::new(cfg.optimizer),
            scoring,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            round: 0,
            cfg,
            width,
            height,
        })
    }

    /// Generate, score and train on one group.
    pub fn train_round(
        &mut self,
        source: &mut dyn ConditionSource,
        judge: &dyn Judge,
    ) -> Result<RoundOutput, GrpoError> {
        let (cond, scene) = source.next_condition()?;
        let mut rollout = collect_group(
            &self.net,
            &cond,
            &self.schedule,
            self.cfg.group_size,
            &mut self.rng,
        )?;

        let stacks = rollout.stacks(self.width, self.height)?;
        let fallback_input;
        let input = match &scene {
            Some(s) => &s.composite,
            None => {
                fallback_input = crate::layers::RgbImage {
                    width: self.width,
                    height: self.height,
                    data: cond.composite.iter().map(|v| (v + 1.0) / 2.0).collect(),
                };
                &fallback_input
            }
        };
        let views: Vec<SampleView<'_>> = stacks
            .iter()
            .map(|st| SampleView {
                composite: input,
                stack: st,
                scene: scene.as_ref().map(|s| &s.scene),
            })
            .collect();
        let report = score_group(judge, &views, &self.scoring)?;
        rollout.set_rewards(report.rewards.clone(), &self.cfg)?;

        let mut order: Vec<usize> = (0..rollout.len()).collect();
        let (mut loss_sum, mut n_updates, mut last_report) = (
            0.0,
            0usize,
            StepReport {
                grad_norm: 0.0,
                clip_scale: 1.0,
            },
        );
        let mut agg = LossStats::default();
        for _ in 0..self.cfg.epochs {
            order.shuffle(&mut self.rng);
            let per = rollout.len().div_ceil(self.cfg.minibatches);
            for members in order.chunks(per) {
                let tape = Tape::new();
                let (loss, stats) = surrogate_loss(&tape, &self.net, &rollout, members, &self.cfg)?;
                let grads = tape.backward(loss)?;
                last_report = self.opt.step(&mut self.net.params, &grads)?;
                loss_sum += loss.value().item();
                n_updates += 1;
                agg.ratio_mean += stats.ratio_mean;
                agg.clip_frac += stats.clip_frac;
                agg.kl += stats.kl;
                if agg.ratio_std_per_step.is_empty() {
                    agg.ratio_std_per_step = vec![0.0; stats.ratio_std_per_step.len()];
                }
                for (a, s) in agg
                    .ratio_std_per_step
                    .iter_mut()
                    .zip(&stats.ratio_std_per_step)
                {
                    *a += s;
                }
            }
        }
        let k = n_updates as f64;
        let metrics = RoundMetrics {
            round: self.round,
            num_layers: cond.num_layers,
            reward_mean: rollout.reward_mean,
            reward_std: rollout.reward_std,
            phase1_mean: mean_std(&report.r_ind).0,
            phase2_fallback: report.phase2_fallback,
            ratio_mean: agg.ratio_mean / k,
            clip_frac: agg.clip_frac / k,
            kl: agg.kl / k,
            loss: loss_sum / k,
            grad_norm: last_report.grad_norm,
            ratio_std_per_step: agg.ratio_std_per_step.iter().map(|v| v / k).collect(),
        };
        self.round += 1;
        Ok(RoundOutput { metrics, report })
    }
}
