//! Held-out evaluation metrics: bad-layer counts, distribution evenness,
//! background quality, SSIM and best-match per-layer L1.

use serde::{Deserialize, Serialize};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::layers::{
    composite, generate_scene, unpack, LayerError, LayerStack, RgbImage, RgbaLayer, SceneSample,
};
use crate::policy::{sample_decompositions, Condition, PolicyError, Sampler, VelocityNet};
use crate::reward::{oracle_score, white_composite, RewardError};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("image {0}x{1} is smaller than the {2}x{2} window")]
    TooSmall(usize, usize, usize),
    #[error("size mismatch: {0}")]
    Size(String),
    #[error("nothing to match")]
    Empty,
    #[error(transparent)]
    Layers(#[from] LayerError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Thresholds for classifying bad layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BadLayerConfig {
    /// A layer whose alpha mass is below this fraction of the pixel count is
    /// blank.
    pub blank_frac: f64,
    /// A layer whose mid-band alpha fraction exceeds this is glazed.
    pub glaze_band: f64,
    /// The mid band of alpha values `(lo, hi)`.
    pub mid_band: (f64, f64),
    /// Alpha above which a pixel counts as part of the layer's support when
    /// measuring the mid-band fraction.
    pub support: f64,
}

impl Default for BadLayerConfig {
    fn default() -> Self {
        Self {
            blank_frac: 0.01,
            glaze_band: 0.6,
            mid_band: (0.2, 0.8),
            support: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerDefect {
    Blank,
    Glaze,
}

/// Classifies one foreground layer; blank takes precedence over glaze.
pub fn layer_defect(layer: &RgbaLayer, cfg: &BadLayerConfig) -> Option<LayerDefect> {
    let n = layer.pixels() as f64;
    if layer.alpha_mass() < cfg.blank_frac * n {
        return Some(LayerDefect::Blank);
    }
    let support = layer.alpha().iter().filter(|&&a| a > cfg.support).count();
    let mid = layer
        .alpha()
        .iter()
        .filter(|&&a| a > cfg.mid_band.0 && a < cfg.mid_band.1)
        .count();
    (support > 0 && mid as f64 / support as f64 > cfg.glaze_band).then_some(LayerDefect::Glaze)
}

/// Foreground layers that are blank or glazed, each counted once.
pub fn bad_layer_count(stack: &LayerStack, cfg: &BadLayerConfig) -> usize {
    stack
        .foreground()
        .iter()
        .filter(|l| layer_defect(l, cfg).is_some())
        .count()
}

/// Normalised entropy of a mass vector; 1 for a single entry, 0 when every
/// mass is zero.
pub fn normalized_entropy(masses: &[f64]) -> f64 {
    let total: f64 = masses.iter().sum();
    if !(total > 0.0) {
        return 0.0;
    }
    if masses.len() == 1 {
        return 1.0;
    }
    let h: f64 = masses
        .iter()
        .filter(|&&m| m > 0.0)
        .map(|&m| {
            let p = m / total;
            -p * p.ln()
        })
        .sum();
    (h / (masses.len() as f64).ln()).clamp(0.0, 1.0)
}

/// Evenness of alpha mass across foreground layers.
pub fn distribution_evenness(stack: &LayerStack) -> f64 {
    let masses: Vec<f64> = stack
        .foreground()
        .iter()
        .map(RgbaLayer::alpha_mass)
        .collect();
    if masses.iter().all(|&m| m == 0.0) {
        log::warn!("distribution_evenness: every foreground layer is empty");
    }
    normalized_entropy(&masses)
}

/// `1 − mean|pred − truth|`, clamped to `[0, 1]`.
pub fn layer0_quality(pred: &RgbImage, truth: &RgbImage) -> Result<f64, MetricsError> {
    if pred.data.len() != truth.data.len() {
        return Err(MetricsError::Size(
            "layer 0 and background differ in size".into(),
        ));
    }
    Ok((1.0 - pred.mean_abs_diff(truth)).clamp(0.0, 1.0))
}

pub const SSIM_WINDOW: usize = 7;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Summed-area table with a zero first row and column.
fn integral(v: &[f64], w: usize, h: usize) -> Vec<f64> {
    let mut s = vec![0.0; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += v[y * w + x];
            s[(y + 1) * (w + 1) + x + 1] = s[y * (w + 1) + x + 1] + row;
        }
    }
    s
}

fn box_sum(s: &[f64], w: usize, x: usize, y: usize, k: usize) -> f64 {
    let st = w + 1;
    s[(y + k) * st + x + k] - s[y * st + x + k] - s[(y + k) * st + x] + s[y * st + x]
}

/// Mean structural similarity over every 7×7 window and channel, with
/// uniform window weights, unbiased local (co)variances and the usual
/// constants for a unit dynamic range.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(MetricsError::Size(format!(
            "{}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let (w, h, k) = (a.width, a.height, SSIM_WINDOW);
    if w < k || h < k {
        return Err(MetricsError::TooSmall(w, h, k));
    }
    let n = (k * k) as f64;
    let cov_norm = n / (n - 1.0);
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        let (x, y) = (a.channel(c), b.channel(c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (sx, sy, sxx, syy, sxy) = (
            integral(x, w, h),
            integral(y, w, h),
            integral(&xx, w, h),
            integral(&yy, w, h),
            integral(&xy, w, h),
        );
        for oy in 0..=h - k {
            for ox in 0..=w - k {
                let mx = box_sum(&sx, w, ox, oy, k) / n;
                let my = box_sum(&sy, w, ox, oy, k) / n;
                let vx = cov_norm * (box_sum(&sxx, w, ox, oy, k) / n - mx * mx);
                let vy = cov_norm * (box_sum(&syy, w, ox, oy, k) / n - my * my);
                let cxy = cov_norm * (box_sum(&sxy, w, ox, oy, k) / n - mx * my);
                let num = (2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2);
                let den = (mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2);
                total += num / den;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Which side of the comparison picks its closest counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchDirection {
    /// Every predicted layer is scored against its closest ground-truth layer.
    #[default]
    PredToGt,
    /// Every ground-truth layer is scored against its closest prediction.
    GtToPred,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestMatch {
    pub mean: f64,
    /// One value per slot on the matching side, in that side's order.
    pub per_slot: Vec<f64>,
}

/// Per-layer L1 against the closest counterpart on already white-composited
/// layers.
pub fn best_match_l1(
    pred: &[RgbImage],
    gt: &[RgbImage],
    direction: MatchDirection,
) -> Result<BestMatch, MetricsError> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricsError::Empty);
    }
    let size = pred[0].data.len();
    if pred.iter().chain(gt).any(|l| l.data.len() != size) {
        return Err(MetricsError::Size("layers differ in size".into()));
    }
    let (from, to) = match direction {
        MatchDirection::PredToGt => (pred, gt),
        MatchDirection::GtToPred => (gt, pred),
    };
    let per_slot: Vec<f64> = from
        .iter()
        .map(|f| {
            to.iter()
                .map(|t| f.mean_abs_diff(t))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    let mean = per_slot.iter().sum::<f64>() / per_slot.len() as f64;
    Ok(BestMatch { mean, per_slot })
}

/// [`best_match_l1`] on two stacks, white-compositing every layer first.
pub fn best_match_stacks(
    pred: &LayerStack,
    gt: &LayerStack,
    direction: MatchDirection,
) -> Result<BestMatch, MetricsError> {
    let white = |s: &LayerStack| -> Result<Vec<RgbImage>, MetricsError> {
        s.layers()
            .iter()
            .map(|l| white_composite(l).map_err(|e| MetricsError::Size(e.to_string())))
            .collect()
    };
    best_match_l1(&white(pred)?, &white(gt)?, direction)
}

/// Mean L1 between same-index white-composited layers.
pub fn fixed_index_l1(pred: &[RgbImage], gt: &[RgbImage]) -> Result<f64, MetricsError> {
    if pred.is_empty() || pred.len() != gt.len() {
        return Err(MetricsError::Size(
            "fixed-index matching needs equal, non-zero layer counts".into(),
        ));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| p.mean_abs_diff(g))
        .sum::<f64>()
        / pred.len() as f64)
}

/// All metrics for one predicted decomposition of a held-out scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub scene_seed: u64,
    pub num_layers: usize,
    pub bad_layers: usize,
    pub blank_layers: usize,
    pub glaze_layers: usize,
    pub distrib: f64,
    pub layer0_quality: f64,
    /// SSIM between the recomposited prediction and the input composite.
    pub ssim: f64,
    pub best_match_l1: f64,
    pub best_match_slots: Vec<f64>,
    /// Normalised oracle rubric total of the prediction.
    pub oracle_reward: f64,
}

pub fn evaluate_stack(
    pred: &LayerStack,
    truth: &SceneSample,
    cfg: &BadLayerConfig,
    direction: MatchDirection,
) -> Result<EvalRecord, MetricsError> {
    let defects: Vec<Option<LayerDefect>> = pred
        .foreground()
        .iter()
        .map(|l| layer_defect(l, cfg))
        .collect();
    let blank = defects
        .iter()
        .filter(|d| **d == Some(LayerDefect::Blank))
        .count();
    let glaze = defects
        .iter()
        .filter(|d| **d == Some(LayerDefect::Glaze))
        .count();
    let bm = best_match_stacks(pred, &truth.stack, direction)?;
    Ok(EvalRecord {
        scene_seed: truth.scene.seed,
        num_layers: pred.len(),
        bad_layers: blank + glaze,
        blank_layers: blank,
        glaze_layers: glaze,
        distrib: distribution_evenness(pred),
        layer0_quality: layer0_quality(&pred.background().rgb(), &truth.scene.true_background())?,
        ssim: ssim(&composite(pred)?, &truth.composite)?,
        best_match_l1: bm.mean,
        best_match_slots: bm.per_slot,
        oracle_reward: oracle_score(pred, &truth.scene)?.normalized(),
    })
}

/// A fixed held-out set: scene `k` has seed `base_seed + k` and layer count
/// cycling through `min_layers..=max_layers`.
pub fn held_out_scenes(
    n: usize,
    base_seed: u64,
    width: usize,
    height: usize,
    min_layers: usize,
    max_layers: usize,
) -> Result<Vec<SceneSample>, MetricsError> {
    let span = max_layers + 1 - min_layers;
    (0..n)
        .map(|k| {
            Ok(generate_scene(
                base_seed + k as u64,
                min_layers + k % span,
                width,
                height,
            )?)
        })
        .collect()
}

/// Decomposes every held-out composite with `net` and scores the results.
/// Scenes sharing a layer count are sampled as one batch; records and stacks
/// come back in scene order.
pub fn evaluate_policy(
    net: &VelocityNet,
    scenes: &[SceneSample],
    sampler: Sampler,
    adapters: bool,
    seed: u64,
    cfg: &BadLayerConfig,
    direction: MatchDirection,
) -> Result<(EvalReport, Vec<LayerStack>), MetricsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conds: Vec<Condition> = scenes
        .iter()
        .map(|s| Condition::new(&s.composite, s.stack.len()))
        .collect();
    let mut stacks: Vec<Option<LayerStack>> = vec![None; scenes.len()];
    let mut counts: Vec<usize> = scenes.iter().map(|s| s.stack.len()).collect();
    counts.sort_unstable();
    counts.dedup();
    for l in counts {
        let idx: Vec<usize> = (0..scenes.len())
            .filter(|&k| scenes[k].stack.len() == l)
            .collect();
        let batch: Vec<&Condition> = idx.iter().map(|&k| &conds[k]).collect();
        let samples = sample_decompositions(net, &batch, sampler, adapters, &mut rng)?;
        for (&k, x) in idx.iter().zip(samples) {
            let s = &scenes[k];
            stacks[k] = Some(unpack(&x, l, s.scene.width, s.scene.height)?);
        }
    }
    let stacks: Vec<LayerStack> = stacks
        .into_iter()
        .map(|s| s.expect("every scene sampled"))
        .collect();
    let records = stacks
        .iter()
        .zip(scenes)
        .map(|(p, s)| evaluate_stack(p, s, cfg, direction))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((EvalReport { records }, stacks))
}

/// Mean, population std and count of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

/// Per-scene records plus an aggregate per metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    const COLUMNS: [&'static str; 8] = [
        "bad_layers",
        "blank_layers",
        "glaze_layers",
        "distrib",
        "layer0_quality",
        "ssim",
        "best_match_l1",
        "oracle_reward",
    ];

    fn column(r: &EvalRecord, name: &str) -> f64 {
        match name {
            "bad_layers" => r.bad_layers as f64,
            "blank_layers" => r.blank_layers as f64,
            "glaze_layers" => r.glaze_layers as f64,
            "distrib" => r.distrib,
            "layer0_quality" => r.layer0_quality,
            "ssim" => r.ssim,
            "best_match_l1" => r.best_match_l1,
            "oracle_reward" => r.oracle_reward,
            _ => unreachable!("unknown column {name}"),
        }
    }

    pub fn summary(&self, metric: &str) -> Summary {
        let v: Vec<f64> = self
            .records
            .iter()
            .map(|r| Self::column(r, metric))
            .collect();
        Summary::of(&v)
    }

    pub fn aggregate(&self) -> Vec<(&'static str, Summary)> {
        Self::COLUMNS
            .iter()
            .map(|&c| (c, self.summary(c)))
            .collect()
    }

    /// One JSON object per scene, then one aggregate object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialise"));
            out.push('\n');
        }
        let agg: serde_json::Map<String, serde_json::Value> = self
            .aggregate()
            .into_iter()
            .map(|(k, s)| {
                (
                    k.to_string(),
                    serde_json::to_value(s).expect("summary serialises"),
                )
            })
            .collect();
        out.push_str(&serde_json::json!({ "aggregate": agg }).to_string());
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("scene_seed,num_layers,{}\n", Self::COLUMNS.join(","));
        for r in &self.records {
            let vals: Vec<String> = Self::COLUMNS
                .iter()
                .map(|c| format!("{}", Self::column(r, c)))
                .collect();
            out.push_str(&format!(
                "{},{},{}\n",
                r.scene_seed,
                r.num_layers,
                vals.join(",")
            ));
        }
        out
    }
}
