//! Judge prompt templates with `{placeholder}` substitution.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RewardError;

pub const DEFAULT_SYSTEM: &str = include_str!("prompts/system.txt");
pub const DEFAULT_PHASE1: &str = include_str!("prompts/phase1.txt");
pub const DEFAULT_PHASE2: &str = include_str!("prompts/phase2.txt");

const PHASE1_KEYS: &[&str] = &["num_layers"];
const PHASE2_KEYS: &[&str] = &["G", "Gm1", "scores_csv"];

/// The three judge prompts. Only the named placeholders are substituted, so
/// literal braces (such as the JSON shape in the Phase-1 text) pass through.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub system: String,
    pub phase1: String,
    pub phase2: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: DEFAULT_SYSTEM.trim_end().into(),
            phase1: DEFAULT_PHASE1.trim_end().into(),
            phase2: DEFAULT_PHASE2.trim_end().into(),
        }
    }
}

impl PromptTemplates {
    /// Loads `system.txt`, `phase1.txt` and `phase2.txt` from `dir`, falling
    /// back to the built-in text for any file that is absent.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, RewardError> {
        let dir = dir.as_ref();
        let read = |name: &str, default: &str| -> Result<String, RewardError> {
            let p = dir.join(name);
            if p.exists() {
                Ok(std::fs::read_to_string(p)?.trim_end().to_string())
            } else {
                Ok(default.trim_end().to_string())
            }
        };
        let t = Self {
            system: read("system.txt", DEFAULT_SYSTEM)?,
            phase1: read("phase1.txt", DEFAULT_PHASE1)?,
            phase2: read("phase2.txt", DEFAULT_PHASE2)?,
        };
        t.validate()?;
        Ok(t)
    }

    /// Writes the templates as editable files.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<(), RewardError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("system.txt"), &self.system)?;
        std::fs::write(dir.join("phase1.txt"), &self.phase1)?;
        std::fs::write(dir.join("phase2.txt"), &self.phase2)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        for (text, keys, which) in [
            (&self.phase1, PHASE1_KEYS, "phase1"),
            (&self.phase2, PHASE2_KEYS, "phase2"),
        ] {
            for k in keys {
                if !text.contains(&format!("{{{k}}}")) {
                    return Err(RewardError::Template(format!(
                        "{which} template lacks {{{k}}}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn phase1_prompt(&self, num_layers: usize) -> String {
        fill(&self.phase1, &[("num_layers", num_layers.to_string())])
    }

    pub fn phase2_prompt(&self, phase1_scores: &[f64]) -> String {
        let g = phase1_scores.len();
        fill(
            &self.phase2,
            &[
                ("G", g.to_string()),
                ("Gm1", g.saturating_sub(1).to_string()),
                ("scores_csv", scores_csv(phase1_scores)),
            ],
        )
    }
}

/// Comma-separated scores with two decimals.
pub fn scores_csv(scores: &[f64]) -> String {
    scores
        .iter()
        .map(|s| format!("{s:.2}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn fill(template: &str, values: &[(&str, String)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_every_placeholder() {
        PromptTemplates::default().validate().unwrap();
    }

    #[test]
    fn substitution_keeps_json_braces() {
        let t = PromptTemplates::default();
        let p1 = t.phase1_prompt(4);
        assert!(p1.starts_with("Score this 4-layer decomposition."));
        assert!(p1.contains("{\"semantic_separation\":X"));
        let p2 = t.phase2_prompt(&[0.72, 0.6, 0.88]);
        assert!(p2.contains("shows 3 layer-decomposition samples"));
        assert!(p2.contains("labeled 0-2"));
        assert!(p2.contains("Initial individual scores: 0.72, 0.60, 0.88"));
        assert!(!p2.contains('{'));
    }

    #[test]
    fn missing_placeholder_is_rejected() {
        let t = PromptTemplates {
            phase2: "no placeholders".into(),
            ..Default::default()
        };
        assert!(matches!(t.validate(), Err(RewardError::Template(_))));
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = PromptTemplates {
            system: "custom".into(),
            ..Default::default()
        };
        t.save_dir(dir.path()).unwrap();
        assert_eq!(PromptTemplates::load_dir(dir.path()).unwrap(), t);
    }
}
