//! Two-phase judging of layer decompositions: per-sample rubric scoring,
//! then relative re-scoring of the whole group on a labelled grid.
//!
//! Judges return raw reply text; every reply, including the programmatic
//! oracle's, goes through the same validators and retry/fallback policy.

mod grid;
mod oracle;
mod prompts;
mod remote;

pub use grid::{build_grid, grid_dims, GridLayout, MIN_CELL};
pub use oracle::{oracle_criteria, oracle_score, true_quality, OracleJudge, OracleMode};
pub use prompts::{scores_csv, PromptTemplates};
pub use remote::{JudgeEndpoint, RemoteJudge, API_KEY_ENV};

use serde::{Deserialize, Serialize};

use crate::layers::{composite, LayerError, LayerStack, RgbImage, RgbaLayer, ToyScene};

#[derive(Debug, thiserror::Error)]
pub enum RewardError {
    #[error("malformed judge reply: {0}")]
    Malformed(String),
    #[error("judge gave no valid reply after {attempts} attempts: {last}")]
    Exhausted { attempts: usize, last: String },
    #[error("judge request failed: {0}")]
    Transport(String),
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("grid: {0}")]
    Grid(String),
    #[error("template: {0}")]
    Template(String),
    #[error(transparent)]
    Layers(#[from] LayerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Layer colour over solid white: `rgb·α + (1 − α)`.
pub fn white_composite(layer: &RgbaLayer) -> Result<RgbImage, RewardError> {
    let n = layer.pixels();
    let alpha = layer.alpha();
    if let Some(&a) = alpha.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(LayerError::AlphaRange(a).into());
    }
    let mut data = Vec::with_capacity(3 * n);
    for c in 0..3 {
        data.extend(
            layer
                .channel(c)
                .iter()
                .zip(alpha)
                .map(|(v, a)| v * a + (1.0 - a)),
        );
    }
    Ok(RgbImage {
        width: layer.width,
        height: layer.height,
        data,
    })
}

/// Five-criterion rubric, each criterion an integer in `0..=5`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricScore {
    pub semantic_separation: u8,
    pub alpha_cleanliness: u8,
    pub background_inpainting: u8,
    pub feature_distribution: u8,
    pub content_validity: u8,
    pub total: u8,
}

pub const CRITERIA: [&str; 5] = [
    "semantic_separation",
    "alpha_cleanliness",
    "background_inpainting",
    "feature_distribution",
    "content_validity",
];

impl RubricScore {
    /// Builds a score from the five criteria in [`CRITERIA`] order.
    pub fn from_criteria(c: [u8; 5]) -> Result<Self, RewardError> {
        if let Some(v) = c.iter().find(|&&v| v > 5) {
            return Err(RewardError::Malformed(format!("criterion {v} outside 0–5")));
        }
        Ok(Self {
            semantic_separation: c[0],
            alpha_cleanliness: c[1],
            background_inpainting: c[2],
            feature_distribution: c[3],
            content_validity: c[4],
            total: c.iter().sum(),
        })
    }

    pub fn criteria(&self) -> [u8; 5] {
        [
            self.semantic_separation,
            self.alpha_cleanliness,
            self.background_inpainting,
            self.feature_distribution,
            self.content_validity,
        ]
    }

    /// `total / 25`.
    pub fn normalized(&self) -> f64 {
        self.total as f64 / 25.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain struct serialises")
    }
}

/// Parses and validates a Phase-1 reply: a JSON object (optionally inside a
/// code fence or surrounded by prose) with every criterion an integer in
/// `0..=5` and `total` equal to their sum.
pub fn parse_rubric(reply: &str) -> Result<RubricScore, RewardError> {
    let bad = |m: String| RewardError::Malformed(m);
    let (start, end) = match (reply.find('{'), reply.rfind('}')) {
        (Some(s), Some(e)) if s < e => (s, e),
        _ => return Err(bad("no JSON object".into())),
    };
    let value: serde_json::Value =
        serde_json::from_str(&reply[start..=end]).map_err(|e| bad(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| bad("not an object".into()))?;
    let int = |key: &str, max: f64| -> Result<u8, RewardError> {
        let v = obj.get(key).ok_or_else(|| bad(format!("missing {key}")))?;
        let x = v
            .as_f64()
            .ok_or_else(|| bad(format!("{key} is not a number")))?;
        if x.fract() != 0.0 || !(0.0..=max).contains(&x) {
            return Err(bad(format!("{key} = {x} outside 0–{max}")));
        }
        Ok(x as u8)
    };
    let mut c = [0u8; 5];
    for (slot, key) in c.iter_mut().zip(CRITERIA) {
        *slot = int(key, 5.0)?;
    }
    let total = int("total", 25.0)?;
    let score = RubricScore::from_criteria(c)?;
    if score.total != total {
        return Err(bad(format!(
            "total {total} ≠ criterion sum {}",
            score.total
        )));
    }
    Ok(score)
}

/// Parses a Phase-2 reply: exactly `g` comma-separated decimals in `[0, 1]`.
pub fn parse_calibration(reply: &str, g: usize) -> Result<Vec<f64>, RewardError> {
    let parts: Vec<&str> = reply.trim().split(',').map(str::trim).collect();
    if parts.len() != g {
        return Err(RewardError::Malformed(format!(
            "{} values, expected {g}",
            parts.len()
        )));
    }
    parts
        .iter()
        .map(|p| {
            let v: f64 = p
                .parse()
                .map_err(|_| RewardError::Malformed(format!("not a number: {p:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(RewardError::Malformed(format!("{v} outside [0, 1]")));
            }
            Ok(v)
        })
        .collect()
}

/// One decomposition as shown to a judge.
#[derive(Debug, Clone, Copy)]
pub struct SampleView<'a> {
    /// The input image that was decomposed.
    pub composite: &'a RgbImage,
    pub stack: &'a LayerStack,
    /// Ground truth, when known.
    pub scene: Option<&'a ToyScene>,
}

/// A source of judge replies. Implementations return raw text; validation
/// and retries happen in [`score_group`].
pub trait Judge {
    fn phase1(
        &self,
        system: &str,
        prompt: &str,
        sample: &SampleView<'_>,
        attempt: usize,
    ) -> Result<String, RewardError>;

    fn phase2(
        &self,
        system: &str,
        prompt: &str,
        grid: &RgbImage,
        group: &[SampleView<'_>],
        attempt: usize,
    ) -> Result<String, RewardError>;
}

/// Which score becomes the training reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// The Phase-2 calibrated score.
    #[default]
    Calibrated,
    /// The Phase-1 normalised rubric total.
    Individual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub max_retries: usize,
    /// Run Phase 2; when off the reward is the Phase-1 score.
    pub calibrate: bool,
    pub reward: RewardSource,
    pub cell: usize,
    pub templates: PromptTemplates,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            calibrate: true,
            reward: RewardSource::Calibrated,
            cell: 64,
            templates: PromptTemplates::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub phase: u8,
    pub sample: Option<usize>,
    pub attempt: usize,
    pub prompt: String,
    pub response: Option<String>,
    pub error: Option<String>,
}

/// Everything scoring produced for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub phase1: Vec<RubricScore>,
    /// Normalised Phase-1 scores.
    pub r_ind: Vec<f64>,
    /// Phase-2 scores; `None` when calibration is disabled.
    pub r_cal: Option<Vec<f64>>,
    /// Set when Phase 2 never produced a valid reply and Phase-1 scores were
    /// used in its place.
    pub phase2_fallback: bool,
    /// The training reward per sample.
    pub rewards: Vec<f64>,
    #[serde(skip)]
    pub grid: Option<RgbImage>,
    pub transcript: Vec<TranscriptEntry>,
}

fn with_retries<T>(
    max_retries: usize,
    transcript: &mut Vec<TranscriptEntry>,
    phase: u8,
    sample: Option<usize>,
    prompt: &str,
    mut ask: impl FnMut(usize) -> Result<String, RewardError>,
    parse: impl Fn(&str) -> Result<T, RewardError>,
) -> Result<T, RewardError> {
    let mut last = String::new();
    for attempt in 0..=max_retries {
        let entry = |response: Option<String>, error: Option<String>| TranscriptEntry {
            phase,
            sample,
            attempt,
            prompt: if attempt == 0 {
                prompt.to_string()
            } else {
                String::new()
            },
            response,
            error,
        };
        match ask(attempt) {
            Ok(reply) => match parse(&reply) {
                Ok(v) => {
                    transcript.push(entry(Some(reply), None));
                    return Ok(v);
                }
                Err(e) => {
                    last = e.to_string();
                    transcript.push(entry(Some(reply), Some(last.clone())));
                }
            },
            Err(e) => {
                last = e.to_string();
                transcript.push(entry(None, Some(last.clone())));
            }
        }
    }
    Err(RewardError::Exhausted {
        attempts: max_retries + 1,
        last,
    })
}

/// Scores a group: Phase 1 per sample (an exhausted sample aborts the
/// group), then Phase 2 on the grid of recomposited predictions (an
/// exhausted Phase 2 falls back to the Phase-1 scores).
pub fn score_group(
    judge: &dyn Judge,
    group: &[SampleView<'_>],
    cfg: &ScoringConfig,
) -> Result<GroupReport, RewardError> {
    if group.is_empty() {
        return Err(RewardError::Grid("empty group".into()));
    }
    let mut transcript = Vec::new();
    let system = &cfg.templates.system;
    let mut phase1 = Vec::with_capacity(group.len());
    for (i, sample) in group.iter().enumerate() {
        let prompt = cfg.templates.phase1_prompt(sample.stack.len());
        let score = with_retries(
            cfg.max_retries,
            &mut transcript,
            1,
            Some(i),
            &prompt,
            |a| judge.phase1(system, &prompt, sample, a),
            parse_rubric,
        )?;
        phase1.push(score);
    }
    let r_ind: Vec<f64> = phase1.iter().map(RubricScore::normalized).collect();

    let (r_cal, grid, fallback) = if cfg.calibrate {
        let recomposited = group
            .iter()
            .map(|s| composite(s.stack))
            .collect::<Result<Vec<_>, _>>()?;
        let grid = build_grid(&recomposited, cfg.cell)?;
        let prompt = cfg.templates.phase2_prompt(&r_ind);
        let g = group.len();
        match with_retries(
            cfg.max_retries,
            &mut transcript,
            2,
            None,
            &prompt,
            |a| judge.phase2(system, &prompt, &grid, group, a),
            |reply| parse_calibration(reply, g),
        ) {
            Ok(v) => (Some(v), Some(grid), false),
            Err(e) => {
                log::warn!("phase 2 fell back to phase-1 scores: {e}");
                (Some(r_ind.clone()), Some(grid), true)
            }
        }
    } else {
        (None, None, false)
    };

    let rewards = match (cfg.reward, &r_cal) {
        (RewardSource::Calibrated, Some(cal)) => cal.clone(),
        _ => r_ind.clone(),
    };
    Ok(GroupReport {
        phase1,
        r_ind,
        r_cal,
        phase2_fallback: fallback,
        rewards,
        grid,
        transcript,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::RefCell;

    #[test]
    fn white_composite_cases() {
        let mut l = RgbaLayer::transparent(1, 1);
        assert_eq!(white_composite(&l).unwrap().data, vec![1.0; 3]);
        l.data = vec![0.2, 0.4, 0.6, 1.0];
        assert_eq!(white_composite(&l).unwrap().data, vec![0.2, 0.4, 0.6]);
        l.data = vec![0.0, 0.0, 0.0, 0.5];
        assert_eq!(white_composite(&l).unwrap().data, vec![0.5; 3]);
        l.data = vec![0.0, 0.0, 0.0, 1.5];
        assert!(white_composite(&l).is_err());
    }

    #[test]
    fn rubric_parsing() {
        let all5 = r#"{"semantic_separation":5, "alpha_cleanliness":5, "background_inpainting":5, "feature_distribution":5, "content_validity":5, "total":25}"#;
        let s = parse_rubric(all5).unwrap();
        assert_eq!(s.total, 25);
        assert_eq!(s.normalized(), 1.0);

        let mixed = "```json\n{\"semantic_separation\":3, \"alpha_cleanliness\":4, \"background_inpainting\":2, \"feature_distribution\":5, \"content_validity\":1, \"total\":15}\n```";
        let s = parse_rubric(mixed).unwrap();
        assert_eq!(s.criteria(), [3, 4, 2, 5, 1]);
        assert!((s.normalized() - 0.6).abs() < 1e-15);

        for bad in [
            r#"{"semantic_separation":3, "alpha_cleanliness":4, "background_inpainting":2, "feature_distribution":5, "content_validity":1, "total":16}"#,
            r#"{"semantic_separation":6, "alpha_cleanliness":4, "background_inpainting":2, "feature_distribution":5, "content_validity":1, "total":18}"#,
            r#"{"semantic_separation":2.5, "alpha_cleanliness":4, "background_inpainting":2, "feature_distribution":5, "content_validity":1, "total":14.5}"#,
            r#"{"alpha_cleanliness":4, "background_inpainting":2, "feature_distribution":5, "content_validity":1, "total":12}"#,
            "all fives",
            "",
        ] {
            assert!(parse_rubric(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn calibration_parsing() {
        assert_eq!(
            parse_calibration("0.82, 0.91, 0.38, 0.45", 4).unwrap(),
            vec![0.82, 0.91, 0.38, 0.45]
        );
        assert!(parse_calibration("0.82, 0.91, 0.38", 4).is_err());
        assert!(parse_calibration("0.82, 1.91, 0.38, 0.1", 4).is_err());
        assert!(parse_calibration("0.82, x, 0.38, 0.1", 4).is_err());
        assert!(parse_calibration("NaN, 0.1, 0.38, 0.1", 4).is_err());
    }

    /// Replays canned replies in order.
    struct Scripted {
        p1: RefCell<Vec<String>>,
        p2: RefCell<Vec<String>>,
    }

    impl Scripted {
        fn new(p1: &[&str], p2: &[&str]) -> Self {
            let rev = |v: &[&str]| RefCell::new(v.iter().rev().map(|s| s.to_string()).collect());
            Self {
                p1: rev(p1),
                p2: rev(p2),
            }
        }
    }

    impl Judge for Scripted {
        fn phase1(
            &self,
            _: &str,
            _: &str,
            _: &SampleView<'_>,
            _: usize,
        ) -> Result<String, RewardError> {
            self.p1
                .borrow_mut()
                .pop()
                .ok_or_else(|| RewardError::Transport("script exhausted".into()))
        }
        fn phase2(
            &self,
            _: &str,
            _: &str,
            _: &RgbImage,
            _: &[SampleView<'_>],
            _: usize,
        ) -> Result<String, RewardError> {
            self.p2
                .borrow_mut()
                .pop()
                .ok_or_else(|| RewardError::Transport("script exhausted".into()))
        }
    }

    const GOOD: &str = r#"{"semantic_separation":3, "alpha_cleanliness":4, "background_inpainting":2, "feature_distribution":5, "content_validity":1, "total":15}"#;

    fn two_samples() -> Vec<crate::layers::SceneSample> {
        vec![
            crate::layers::generate_scene(1, 2, 16, 16).unwrap(),
            crate::layers::generate_scene(2, 2, 16, 16).unwrap(),
        ]
    }

    fn views(s: &[crate::layers::SceneSample]) -> Vec<SampleView<'_>> {
        s.iter()
            .map(|x| SampleView {
                composite: &x.composite,
                stack: &x.stack,
                scene: Some(&x.scene),
            })
            .collect()
    }

    #[test]
    fn malformed_replies_are_retried_then_accepted() {
        let samples = two_samples();
        let judge = Scripted::new(&["nonsense", GOOD, GOOD], &["0.1", "0.3, 0.9"]);
        let rep = score_group(&judge, &views(&samples), &ScoringConfig::default()).unwrap();
        assert_eq!(rep.r_ind, vec![0.6, 0.6]);
        assert_eq!(rep.r_cal, Some(vec![0.3, 0.9]));
        assert_eq!(rep.rewards, vec![0.3, 0.9]);
        assert!(!rep.phase2_fallback);
        assert_eq!(rep.transcript.len(), 5);
    }

    #[test]
    fn phase2_falls_back_and_phase1_aborts() {
        let samples = two_samples();
        let judge = Scripted::new(&[GOOD, GOOD], &["a", "b", "c", "d"]);
        let rep = score_group(&judge, &views(&samples), &ScoringConfig::default()).unwrap();
        assert!(rep.phase2_fallback);
        assert_eq!(rep.rewards, rep.r_ind);

        let judge = Scripted::new(&["x", "x", "x", "x"], &[]);
        assert!(matches!(
            score_group(&judge, &views(&samples), &ScoringConfig::default()),
            Err(RewardError::Exhausted { attempts: 4, .. })
        ));
    }

    #[test]
    fn calibration_disabled_uses_phase1() {
        let samples = two_samples();
        let judge = Scripted::new(&[GOOD, GOOD], &[]);
        let cfg = ScoringConfig {
            calibrate: false,
            ..Default::default()
        };
        let rep = score_group(&judge, &views(&samples), &cfg).unwrap();
        assert_eq!(rep.r_cal, None);
        assert_eq!(rep.rewards, rep.r_ind);
    }
}
