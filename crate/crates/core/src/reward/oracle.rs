//! A programmatic judge that scores decompositions against the known
//! ground truth of a toy scene.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::layers::{LayerStack, ToyScene};
use crate::metrics::normalized_entropy;

use super::{Judge, RewardError, RgbImage, RubricScore, SampleView};

/// Alpha mass below this fraction of the pixel count marks a layer as empty.
const CONTENT_FRAC: f64 = 0.01;
/// Distance from 0 or 1 within which an alpha value counts as clean.
const CLEAN_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    /// Phase 1 reports the quantised rubric; Phase 2 reports the continuous
    /// quality of each sample.
    #[default]
    Normal,
    /// Phase 1 squeezes every sample into a narrow band; Phase 2 reports the
    /// rank of each sample's true quality.
    CompressThenRank,
}

fn check(stack: &LayerStack, scene: &ToyScene) -> Result<(), RewardError> {
    if stack.len() != scene.num_layers() {
        return Err(RewardError::Oracle(format!(
            "stack has {} layers, scene has {}",
            stack.len(),
            scene.num_layers()
        )));
    }
    if (stack.width(), stack.height()) != (scene.width, scene.height) {
        return Err(RewardError::Oracle("stack and scene differ in size".into()));
    }
    Ok(())
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for i in 0..=p.len() {
            let mut q = p.clone();
            q.insert(i, n - 1);
            out.push(q);
        }
    }
    out
}

/// Soft IoU `Σ min(a, b) / Σ max(a, b)`; 0 when both are empty.
fn soft_iou(a: &[f64], b: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += x.min(*y);
        den += x.max(*y);
    }
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// The five criteria in `[0, 1]`, in rubric order.
pub fn oracle_criteria(stack: &LayerStack, scene: &ToyScene) -> Result<[f64; 5], RewardError> {
    check(stack, scene)?;
    let fg = stack.foreground();
    let n = (scene.width * scene.height) as f64;
    let masses: Vec<f64> = fg.iter().map(|l| l.alpha_mass()).collect();

    let content =
        masses.iter().filter(|&&m| m >= CONTENT_FRAC * n).count() as f64 / fg.len() as f64;
    let distribution = normalized_entropy(&masses);
    let (clean, total) = fg
        .iter()
        .flat_map(|l| l.alpha())
        .fold((0usize, 0usize), |(c, t), &a| {
            (
                c + usize::from(a <= CLEAN_TOL || a >= 1.0 - CLEAN_TOL),
                t + 1,
            )
        });
    let cleanliness = clean as f64 / total as f64;
    let background = 1.0
        - stack
            .background()
            .rgb()
            .mean_abs_diff(&scene.true_background())
            .clamp(0.0, 1.0);

    let shapes = scene.shape_masks();
    let iou: Vec<Vec<f64>> = shapes
        .iter()
        .map(|m| fg.iter().map(|l| soft_iou(m, l.alpha())).collect())
        .collect();
    let separation = permutations(fg.len())
        .iter()
        .map(|p| p.iter().enumerate().map(|(s, &l)| iou[s][l]).sum::<f64>() / shapes.len() as f64)
        .fold(0.0, f64::max);

    Ok([separation, cleanliness, background, distribution, content])
}

fn quantize(v: f64) -> u8 {
    (v * 5.0 + 0.5).floor().clamp(0.0, 5.0) as u8
}

/// Criteria quantised to the 0–5 scale.
pub fn oracle_score(stack: &LayerStack, scene: &ToyScene) -> Result<RubricScore, RewardError> {
    RubricScore::from_criteria(oracle_criteria(stack, scene)?.map(quantize))
}

/// Mean of the unquantised criteria.
pub fn true_quality(stack: &LayerStack, scene: &ToyScene) -> Result<f64, RewardError> {
    Ok(oracle_criteria(stack, scene)?.iter().sum::<f64>() / 5.0)
}

/// Deterministic stand-in for a vision-language judge; needs the ground
/// truth of every sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleJudge {
    pub mode: OracleMode,
    /// Lower edge of the compressed Phase-1 band (normalised score).
    pub band_base: f64,
    /// Width of the compressed Phase-1 band.
    pub band_width: f64,
}

impl Default for OracleJudge {
    fn default() -> Self {
        Self {
            mode: OracleMode::Normal,
            band_base: 0.70,
            band_width: 0.05,
        }
    }
}

impl OracleJudge {
    pub fn new(mode: OracleMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    fn scene<'a>(sample: &SampleView<'a>) -> Result<&'a ToyScene, RewardError> {
        sample
            .scene
            .ok_or_else(|| RewardError::Oracle("sample has no ground truth".into()))
    }

    /// A rubric whose total encodes `band_base + band_width·q`.
    fn compressed(&self, q: f64) -> Result<RubricScore, RewardError> {
        let total = (25.0 * (self.band_base + self.band_width * q.clamp(0.0, 1.0)))
            .round()
            .clamp(0.0, 25.0) as u8;
        let mut c = [total / 5; 5];
        for slot in c.iter_mut().take((total % 5) as usize) {
            *slot += 1;
        }
        RubricScore::from_criteria(c)
    }
}

/// Average ranks scaled to `[0, 1]`; ties share their mean rank.
pub(crate) fn rank_scores(values: &[f64]) -> Vec<f64> {
    let g = values.len();
    if g == 1 {
        return vec![0.5];
    }
    let mut order: Vec<usize> = (0..g).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; g];
    let mut i = 0;
    while i < g {
        let mut j = i;
        while j + 1 < g && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &order[i..=j] {
            ranks[k] = r / (g - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

impl Judge for OracleJudge {
    fn phase1(
        &self,
        _system: &str,
        _prompt: &str,
        sample: &SampleView<'_>,
        _attempt: usize,
    ) -> Result<String, RewardError> {
        let scene = Self::scene(sample)?;
        let score = match self.mode {
            OracleMode::Normal => oracle_score(sample.stack, scene)?,
            OracleMode::CompressThenRank => self.compressed(true_quality(sample.stack, scene)?)?,
        };
        Ok(score.to_json())
    }

    fn phase2(
        &self,
        _system: &str,
        _prompt: &str,
        _grid: &RgbImage,
        group: &[SampleView<'_>],
        _attempt: usize,
    ) -> Result<String, RewardError> {
        let q = group
            .iter()
            .map(|s| true_quality(s.stack, Self::scene(s)?))
            .collect::<Result<Vec<f64>, _>>()?;
        let scores = match self.mode {
            OracleMode::Normal => q,
            OracleMode::CompressThenRank => rank_scores(&q),
        };
        Ok(scores
            .iter()
            .map(|v| format!("{v:.6}"))
            .collect::<Vec<_>>()
            .join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{generate_scene, RgbaLayer};
    use crate::reward::{parse_calibration, parse_rubric};

    fn replace_foreground(stack: &LayerStack, fg: Vec<RgbaLayer>) -> LayerStack {
        let mut layers = vec![stack.background().clone()];
        layers.extend(fg);
        LayerStack::new(layers).unwrap()
    }

    #[test]
    fn ground_truth_scores_high() {
        for seed in 0..100 {
            for l in 2..=5 {
                let s = generate_scene(seed, l, 16, 16).unwrap();
                let score = oracle_score(&s.stack, &s.scene).unwrap();
                assert!(
                    score.criteria().iter().all(|&c| c >= 4),
                    "seed {seed} L {l}: {score:?}"
                );
            }
        }
    }

    #[test]
    fn blank_layers_have_no_content() {
        let s = generate_scene(4, 4, 16, 16).unwrap();
        let blank = replace_foreground(&s.stack, vec![RgbaLayer::transparent(16, 16); 3]);
        assert_eq!(oracle_score(&blank, &s.scene).unwrap().content_validity, 0);
    }

    #[test]
    fn everything_on_one_layer_is_poorly_distributed() {
        let s = generate_scene(6, 4, 16, 16).unwrap();
        let mut merged = RgbaLayer::transparent(16, 16);
        for l in s.stack.foreground() {
            for (m, a) in merged.alpha_mut().iter_mut().zip(l.alpha()) {
                *m = m.max(*a);
            }
        }
        let one = replace_foreground(
            &s.stack,
            vec![
                merged,
                RgbaLayer::transparent(16, 16),
                RgbaLayer::transparent(16, 16),
            ],
        );
        assert!(oracle_score(&one, &s.scene).unwrap().feature_distribution <= 1);
    }

    #[test]
    fn permuting_foreground_keeps_every_criterion() {
        let s = generate_scene(8, 5, 16, 16).unwrap();
        let mut fg = s.stack.foreground().to_vec();
        fg.reverse();
        let perm = replace_foreground(&s.stack, fg);
        assert_eq!(
            oracle_criteria(&perm, &s.scene).unwrap(),
            oracle_criteria(&s.stack, &s.scene).unwrap()
        );
    }

    #[test]
    fn layer_count_mismatch_is_an_error() {
        let s = generate_scene(1, 3, 16, 16).unwrap();
        let other = generate_scene(1, 4, 16, 16).unwrap();
        assert!(oracle_score(&other.stack, &s.scene).is_err());
    }

    #[test]
    fn replies_pass_the_validators() {
        let s = generate_scene(2, 3, 16, 16).unwrap();
        let view = SampleView {
            composite: &s.composite,
            stack: &s.stack,
            scene: Some(&s.scene),
        };
        for mode in [OracleMode::Normal, OracleMode::CompressThenRank] {
            let j = OracleJudge::new(mode);
            let r = parse_rubric(&j.phase1("", "", &view, 0).unwrap()).unwrap();
            if mode == OracleMode::CompressThenRank {
                assert!((0.70..=0.76).contains(&r.normalized()));
            }
            let grid = RgbImage::filled(1, 1, [1.0; 3]);
            let cal =
                parse_calibration(&j.phase2("", "", &grid, &[view, view], 0).unwrap(), 2).unwrap();
            assert_eq!(cal.len(), 2);
        }
        let no_truth = SampleView {
            scene: None,
            ..view
        };
        assert!(OracleJudge::default().phase1("", "", &no_truth, 0).is_err());
    }

    #[test]
    fn ranks_handle_ties() {
        assert_eq!(
            rank_scores(&[0.3, 0.1, 0.3, 0.9]),
            vec![1.5 / 3.0, 0.0, 1.5 / 3.0, 1.0]
        );
        assert_eq!(rank_scores(&[0.2]), vec![0.5]);
    }
}
