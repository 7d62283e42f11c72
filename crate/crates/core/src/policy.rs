//! The velocity network: an MLP over the packed layer vector, conditioned on
//! the composite image, the requested layer count and the timestep, with
//! low-rank adapters that can be switched off to recover the frozen reference.
//!
//! The input and output are sized for `max_layers`; a stack with fewer layers
//! uses only the leading rows of the input weights and the leading columns of
//! the output weights, which is the same as zero-padding the input and masking
//! the unused output layers.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::flow::{
    build_schedule, fm_loss, sample_ode, sample_sde, FlowError, VelocityField, DEFAULT_T_CLAMP,
};
use crate::layers::{pack, LayerError, LayerStack, RgbImage};
use crate::numerics::{
    AdamW, AdamWConfig, Checkpoint, NumericsError, ParamStore, Tape, Tensor, Var,
};

pub const BASE_PREFIX: &str = "base.";
pub const ADAPTER_PREFIX: &str = "adapter.";
const TIME_FEATURES: usize = 8;
/// Lower bound on the time used to turn the clean-data prediction into a
/// velocity, keeping the implied velocity bounded near the data end.
pub const DATA_HEAD_T_FLOOR: f64 = 0.05;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("x_t holds {got} values per row but the condition asks for {expected}")]
    LayerMismatch { expected: usize, got: usize },
    #[error("invalid condition: {0}")]
    Condition(String),
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("pretraining diverged at step {step}")]
    Diverged { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Layers(#[from] LayerError),
}

/// Sizes of the velocity network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Values per layer (`4·H·W` for RGBA rasters).
    pub layer_dim: usize,
    pub min_layers: usize,
    pub max_layers: usize,
    /// Length of the flattened composite raster in the condition.
    pub cond_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl NetConfig {
    /// The toy configuration for a `width × height` canvas.
    pub fn for_canvas(width: usize, height: usize) -> Self {
        Self {
            layer_dim: 4 * width * height,
            min_layers: crate::layers::MIN_LAYERS,
            max_layers: crate::layers::MAX_LAYERS,
            cond_dim: 3 * width * height,
            hidden_width: 256,
            hidden_layers: 3,
            adapter_rank: 4,
            adapter_alpha: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        let bad = |m: &str| Err(PolicyError::Config(m.into()));
        if self.layer_dim == 0 || self.hidden_width == 0 || self.hidden_layers == 0 {
            return bad("layer_dim, hidden_width and hidden_layers must be positive");
        }
        if self.min_layers == 0 || self.min_layers > self.max_layers {
            return bad("need 1 ≤ min_layers ≤ max_layers");
        }
        if self.adapter_rank == 0 || !(self.adapter_alpha > 0.0) {
            return bad("adapter rank and alpha must be positive");
        }
        Ok(())
    }

    fn cond_input(&self) -> usize {
        self.cond_dim + self.max_layers + TIME_FEATURES
    }

    fn adapter_scale(&self) -> f64 {
        self.adapter_alpha / self.adapter_rank as f64
    }

    /// Names of the linear maps carrying adapters, in forward order.
    fn adapted_linears(&self) -> Vec<String> {
        let mut v = vec!["in_x".to_string()];
        v.extend((1..self.hidden_layers).map(|i| format!("h{i}")));
        v.push("out".into());
        v
    }
}

/// What the network is conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// Composite raster flattened channel-major, in the model range `[−1, 1]`.
    pub composite: Vec<f64>,
    pub num_layers: usize,
    pub prompt: Option<String>,
}

impl Condition {
    pub fn new(composite: &RgbImage, num_layers: usize) -> Self {
        Self {
            composite: composite.to_model_range(),
            num_layers,
            prompt: None,
        }
    }
}

/// Which parameters are tracked on the tape during a forward pass; the rest
/// enter as constants and receive no gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Sinusoidal embedding of a time in `[0, 1]`.
pub fn time_features(t: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    for j in 0..TIME_FEATURES / 2 {
        let w = PI * (1u32 << j) as f64;
        f[2 * j] = (w * t).sin();
        f[2 * j + 1] = (w * t).cos();
    }
    f
}

/// The velocity MLP with its adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityNet {
    pub config: NetConfig,
    pub params: ParamStore,
}

fn gaussian(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect::<Vec<f64>>();
    Tensor::new(shape.to_vec(), data).expect("shape and length agree")
}

impl VelocityNet {
    /// Fresh base weights and adapters (`up` zero, so adapters start inert).
    pub fn init(config: NetConfig, seed: u64) -> Result<Self, PolicyError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let x_in = config.max_layers * config.layer_dim;
        let h = config.hidden_width;
        let out = config.max_layers * config.layer_dim;
        let half = std::f64::consts::FRAC_1_SQRT_2;

        params.insert(
            "base.in_x.weight",
            gaussian(&mut rng, &[x_in, h], half / (x_in as f64).sqrt()),
        );
        params.insert("base.in_x.bias", Tensor::zeros(&[h]));
        let c_in = config.cond_input();
        params.insert(
            "base.in_cond.weight",
            gaussian(&mut rng, &[c_in, h], half / (c_in as f64).sqrt()),
        );
        for i in 1..config.hidden_layers {
            params.insert(
                format!("base.h{i}.weight"),
                gaussian(&mut rng, &[h, h], 1.0 / (h as f64).sqrt()),
            );
            params.insert(format!("base.h{i}.bias"), Tensor::zeros(&[h]));
        }
        params.insert(
            "base.out.weight",
            gaussian(&mut rng, &[h, out], 1.0 / (h as f64).sqrt()),
        );
        params.insert("base.out.bias", Tensor::zeros(&[out]));

        let mut net = Self { config, params };
        net.reset_adapters(seed ^ 0xada9_7e25)?;
        Ok(net)
    }

    /// Re-draws adapter `down` matrices and zeroes every `up` matrix.
    pub fn reset_adapters(&mut self, seed: u64) -> Result<(), PolicyError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = self.config.adapter_rank;
        for name in self.config.adapted_linears() {
            let w = self.params.arc(&format!("base.{name}.weight"));
            let (fan_in, fan_out) = w.as_matrix_dims();
            self.params.insert(
                format!("adapter.{name}.down"),
                gaussian(&mut rng, &[fan_in, r], 1.0 / (fan_in as f64).sqrt()),
            );
            self.params
                .insert(format!("adapter.{name}.up"), Tensor::zeros(&[r, fan_out]));
        }
        Ok(())
    }

    pub fn base_params(&self) -> ParamStore {
        self.params.with_prefix(BASE_PREFIX)
    }

    pub fn adapter_params(&self) -> ParamStore {
        self.params.with_prefix(ADAPTER_PREFIX)
    }

    /// Values per row of `x_t` for a stack of `num_layers`.
    pub fn dim_for(&self, num_layers: usize) -> usize {
        num_layers * self.config.layer_dim
    }

    fn check_condition(&self, cond: &Condition) -> Result<(), PolicyError> {
        let c = &self.config;
        if !(c.min_layers..=c.max_layers).contains(&cond.num_layers) {
            return Err(PolicyError::Condition(format!(
                "L = {} outside [{}, {}]",
                cond.num_layers, c.min_layers, c.max_layers
            )));
        }
        if cond.composite.len() != c.cond_dim {
            return Err(PolicyError::Condition(format!(
                "composite has {} values, expected {}",
                cond.composite.len(),
                c.cond_dim
            )));
        }
        Ok(())
    }

    /// Velocity for every row of `x_t` (`[m, L·layer_dim]`).
    ///
    /// `conds` holds one condition per row or a single condition shared by
    /// all rows; `t` likewise holds one time per row.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        x_t: &Tensor,
        t: &[f64],
        conds: &[&Condition],
        adapters: bool,
        trainable: Trainable,
    ) -> Result<Var<'t>, PolicyError> {
        let (m, width) = x_t.as_matrix_dims();
        let first = conds
            .first()
            .ok_or_else(|| PolicyError::Condition("no condition given".into()))?;
        if conds.len() != 1 && conds.len() != m {
            return Err(PolicyError::Condition(format!(
                "{} conditions for {m} rows",
                conds.len()
            )));
        }
        if t.len() != m {
            return Err(PolicyError::Condition(format!(
                "{} times for {m} rows",
                t.len()
            )));
        }
        for c in conds {
            self.check_condition(c)?;
            if c.num_layers != first.num_layers {
                return Err(PolicyError::Condition(
                    "mixed layer counts in one batch".into(),
                ));
            }
        }
        let expected = self.dim_for(first.num_layers);
        if width != expected {
            return Err(PolicyError::LayerMismatch {
                expected,
                got: width,
            });
        }

        let cfg = &self.config;
        let get = |name: &str| -> Var<'t> {
            let arc = self.params.arc(name);
            let tracked = match trainable {
                Trainable::Nothing => false,
                Trainable::Base => name.starts_with(BASE_PREFIX),
                Trainable::Adapters => name.starts_with(ADAPTER_PREFIX),
            };
            if tracked {
                tape.param(name, arc)
            } else {
                tape.constant_arc(arc)
            }
        };
        let linear = |x: Var<'t>, name: &str, n_out: usize, adapted: bool| -> Var<'t> {
            let y = x
                .matmul_block(get(&format!("base.{name}.weight")), n_out)
                .add_bias(get(&format!("base.{name}.bias")));
            if adapted && adapters {
                let down = get(&format!("adapter.{name}.down"));
                let up = get(&format!("adapter.{name}.up"));
                y + x
                    .matmul_block(down, cfg.adapter_rank)
                    .matmul_block(up, n_out)
                    .scale(cfg.adapter_scale())
            } else {
                y
            }
        };

        // The condition is shared across rows in sampling and replay, so its
        // embedding is computed once and broadcast as a bias.
        let shared = conds.len() == 1 && t.iter().all(|&v| v == t[0]);
        let cond_rows = if shared { 1 } else { m };
        let mut c_in = Vec::with_capacity(cond_rows * cfg.cond_input());
        for r in 0..cond_rows {
            let c = conds[if conds.len() == 1 { 0 } else { r }];
            c_in.extend_from_slice(&c.composite);
            c_in.extend((0..cfg.max_layers).map(|l| if l + 1 == c.num_layers { 1.0 } else { 0.0 }));
            c_in.extend_from_slice(&time_features(t[r]));
        }
        let c_in = tape.constant(Tensor::matrix(cond_rows, cfg.cond_input(), c_in));
        let cond_embed = c_in.matmul(get("base.in_cond.weight"));

        let x = tape.constant(x_t.clone());
        let mut h = linear(x, "in_x", cfg.hidden_width, true);
        h = if shared {
            h.add_bias(cond_embed)
        } else {
            h + cond_embed
        };
        h = h.silu();
        for i in 1..cfg.hidden_layers {
            h = linear(h, &format!("h{i}"), cfg.hidden_width, true).silu();
        }

        // The head predicts the clean layers and the velocity is recovered
        // as (x_t - x0) / t. Predicting v directly would need a gain of 1/t
        // on x_t, which a narrow hidden layer cannot carry.
        let x0 = linear(h, "out", expected, true);
        let inv_t: Vec<f64> = t
            .iter()
            .flat_map(|&ti| std::iter::repeat_n(1.0 / ti.max(DATA_HEAD_T_FLOOR), expected))
            .collect();
        Ok((x - x0) * tape.constant(Tensor::matrix(m, expected, inv_t)))
    }

    /// Binds a condition so the network can drive the flow samplers.
    pub fn field<'a>(
        &'a self,
        cond: &'a Condition,
        adapters: bool,
        trainable: Trainable,
    ) -> Policy<'a> {
        Policy {
            net: self,
            conds: vec![cond],
            adapters,
            trainable,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint, PolicyError> {
        let mut ck = Checkpoint::new(self.params.clone());
        let cfg = serde_json::to_string(&self.config)
            .map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        ck.meta.insert("net_config".into(), cfg);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        let cfg = ck
            .meta
            .get("net_config")
            .ok_or_else(|| PolicyError::Checkpoint("missing net_config".into()))?;
        let config: NetConfig =
            serde_json::from_str(cfg).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let reference = Self::init(config.clone(), 0)?;
        for (name, t) in reference.params.iter() {
            let got = ck
                .params
                .get(name)
                .ok_or_else(|| PolicyError::Checkpoint(format!("missing {name}")))?;
            if got.shape() != t.shape() {
                return Err(PolicyError::Checkpoint(format!(
                    "{name}: shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            params: ck.params.clone(),
        })
    }

    /// Replaces adapters with those stored in `ck` (e.g. an adapter-only file).
    pub fn load_adapters(&mut self, ck: &Checkpoint) -> Result<(), PolicyError> {
        let adapters = ck.params.with_prefix(ADAPTER_PREFIX);
        for (name, t) in adapters.iter() {
            let cur = self
                .params
                .get(name)
                .ok_or_else(|| PolicyError::Checkpoint(format!("unknown adapter {name}")))?;
            if cur.shape() != t.shape() {
                return Err(PolicyError::Checkpoint(format!("{name}: shape mismatch")));
            }
        }
        self.params.merge(&adapters);
        Ok(())
    }
}

/// A network bound to conditions, usable as a [`VelocityField`].
pub struct Policy<'a> {
    pub net: &'a VelocityNet,
    pub conds: Vec<&'a Condition>,
    pub adapters: bool,
    pub trainable: Trainable,
}

impl VelocityField for Policy<'_> {
    fn velocity<'t>(&self, tape: &'t Tape, x_t: &Tensor, t: &[f64]) -> Result<Var<'t>, FlowError> {
        self.net
            .forward(tape, x_t, t, &self.conds, self.adapters, self.trainable)
            .map_err(|e| match e {
                PolicyError::Flow(f) => f,
                PolicyError::Numerics(n) => FlowError::Numerics(n),
                other => FlowError::Model(other.to_string()),
            })
    }
}

/// Sampler used to draw decompositions from a trained network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Deterministic Euler ODE.
    Ode { steps: usize },
    /// The marginal-preserving SDE used during training.
    Sde { steps: usize, noise_level: f64 },
}

/// One packed decomposition per condition; all conditions must share a layer
/// count so they can run as a single batch.
pub fn sample_decompositions(
    net: &VelocityNet,
    conds: &[&Condition],
    sampler: Sampler,
    adapters: bool,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<f64>>, PolicyError> {
    let first = conds
        .first()
        .ok_or_else(|| PolicyError::Condition("no condition given".into()))?;
    let (m, d) = (conds.len(), net.dim_for(first.num_layers));
    let gauss = |rng: &mut dyn rand::RngCore| {
        Tensor::matrix(
            m,
            d,
            (0..m * d)
                .map(|_| StandardNormal.sample(&mut *rng))
                .collect(),
        )
    };
    let x1 = gauss(rng);
    let policy = Policy {
        net,
        conds: conds.to_vec(),
        adapters,
        trainable: Trainable::Nothing,
    };
    let x0 = match sampler {
        Sampler::Ode { steps } => {
            sample_ode(&policy, &x1, &build_schedule(steps, 0.0, DEFAULT_T_CLAMP)?)?
        }
        Sampler::Sde { steps, noise_level } => {
            let schedule = build_schedule(steps, noise_level, DEFAULT_T_CLAMP)?;
            let trajs = sample_sde(&policy, &x1, &schedule, |_| gauss(rng))?;
            let data = trajs.into_iter().flat_map(|t| t.final_sample).collect();
            Tensor::matrix(m, d, data)
        }
    };
    Ok((0..m).map(|r| x0.row(r).to_vec()).collect())
}

/// Yields training pairs for pretraining.
pub trait SceneSource {
    /// `batch` pairs that all share one layer count.
    fn sample_batch(&mut self, batch: usize) -> Result<Vec<(Condition, LayerStack)>, PolicyError>;
}

/// Random toy scenes with a layer count drawn uniformly per batch.
pub struct ToySceneSource {
    pub width: usize,
    pub height: usize,
    pub min_layers: usize,
    pub max_layers: usize,
    rng: ChaCha8Rng,
}

impl ToySceneSource {
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

impl SceneSource for ToySceneSource {
    fn sample_batch(&mut self, batch: usize) -> Result<Vec<(Condition, LayerStack)>, PolicyError> {
        let l = self.rng.random_range(self.min_layers..=self.max_layers);
        (0..batch)
            .map(|_| {
                let s =
                    crate::layers::generate_scene(self.rng.random(), l, self.width, self.height)?;
                Ok((Condition::new(&s.composite, l), s.stack))
            })
            .collect()
    }
}

/// The same scene every time.
pub struct FixedScene {
    pub cond: Condition,
    pub stack: LayerStack,
}

impl SceneSource for FixedScene {
    fn sample_batch(&mut self, batch: usize) -> Result<Vec<(Condition, LayerStack)>, PolicyError> {
        Ok(vec![(self.cond.clone(), self.stack.clone()); batch])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch_size: 32,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

/// Flow-matching regression of the base weights on packed ground-truth
/// stacks; adapters are left untouched. Returns the loss at every step.
///
/// `on_step(step, loss)` is called after each update.
pub fn pretrain(
    net: &mut VelocityNet,
    source: &mut dyn SceneSource,
    config: &PretrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>, PolicyError> {
    let mut opt = AdamW::new(config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = source.sample_batch(config.batch_size)?;
        let l = batch[0].0.num_layers;
        let d = net.dim_for(l);
        let mut x0 = Vec::with_capacity(batch.len() * d);
        for (_, stack) in &batch {
            x0.extend(pack(stack));
        }
        if x0.len() != batch.len() * d {
            return Err(PolicyError::LayerMismatch {
                expected: batch.len() * d,
                got: x0.len(),
            });
        }
        let x0 = Tensor::matrix(batch.len(), d, x0);
        let x1 = Tensor::matrix(
            batch.len(),
            d,
            (0..batch.len() * d)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect(),
        );
        let t: Vec<f64> = (0..batch.len()).map(|_| rng.random::<f64>()).collect();
        let conds: Vec<&Condition> = batch.iter().map(|(c, _)| c).collect();

        let tape = Tape::new();
        let policy = Policy {
            net,
            conds,
            adapters: false,
            trainable: Trainable::Base,
        };
        let loss = fm_loss(&tape, &policy, &x0, &x1, &t)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(PolicyError::Diverged { step });
        }
        let grads = tape.backward(loss).map_err(|e| match e {
            NumericsError::NonFinite { .. } => PolicyError::Diverged { step },
            other => other.into(),
        })?;
        opt.step(&mut net.params, &grads)?;
        losses.push(value);
        on_step(step, value);
    }
    Ok(losses)
}
