//! Client for an OpenAI-compatible chat-completions endpoint acting as the
//! judge. Images travel as base-64 PNG data URLs.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::layers::{encode_png, RgbImage};

use super::{white_composite, Judge, RewardError, SampleView};

/// Environment variable holding the endpoint credential.
pub const API_KEY_ENV: &str = "JUDGE_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeEndpoint {
    /// Base address, e.g. `https://host/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub timeout_secs: f64,
}

pub struct RemoteJudge {
    endpoint: JudgeEndpoint,
    api_key: Option<String>,
    agent: ureq::Agent,
}

fn data_url(img: &RgbImage) -> Result<Value, RewardError> {
    let png = encode_png(img)?;
    let b64 = base64::engine::general_purpose::STANDARD.encode(png);
    Ok(
        json!({ "type": "image_url", "image_url": { "url": format!("data:image/png;base64,{b64}") } }),
    )
}

impl RemoteJudge {
    /// Reads the credential from [`API_KEY_ENV`] if set.
    pub fn new(endpoint: JudgeEndpoint) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::with_key(endpoint, api_key)
    }

    pub fn with_key(endpoint: JudgeEndpoint, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(
                endpoint.timeout_secs.max(0.001),
            )))
            .build()
            .into();
        Self {
            endpoint,
            api_key,
            agent,
        }
    }

    fn url(&self) -> String {
        format!(
            "{}/chat/completions",
            self.endpoint.base_url.trim_end_matches('/')
        )
    }

    /// Sends one chat request and returns the first choice's text.
    pub fn chat(
        &self,
        system: &str,
        prompt: &str,
        images: &[&RgbImage],
    ) -> Result<String, RewardError> {
        let mut content = images
            .iter()
            .map(|i| data_url(i))
            .collect::<Result<Vec<Value>, _>>()?;
        content.push(json!({ "type": "text", "text": prompt }));
        let body = json!({
            "model": self.endpoint.model,
            "temperature": 0.0,
            "messages": [
                { "role": "system", "content": system },
                { "role": "user", "content": content },
            ],
        });
        let mut req = self
            .agent
            .post(self.url())
            .header("Content-Type", "application/json");
        if let Some(k) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| RewardError::Transport(e.to_string()))?;
        let v: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| RewardError::Transport(e.to_string()))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| {
                RewardError::Transport("response lacks choices[0].message.content".into())
            })
    }
}

impl Judge for RemoteJudge {
    fn phase1(
        &self,
        system: &str,
        prompt: &str,
        sample: &SampleView<'_>,
        _attempt: usize,
    ) -> Result<String, RewardError> {
        let layers = sample
            .stack
            .layers()
            .iter()
            .map(white_composite)
            .collect::<Result<Vec<_>, _>>()?;
        let mut images = vec![sample.composite];
        images.extend(layers.iter());
        self.chat(system, prompt, &images)
    }

    fn phase2(
        &self,
        system: &str,
        prompt: &str,
        grid: &RgbImage,
        _group: &[SampleView<'_>],
        _attempt: usize,
    ) -> Result<String, RewardError> {
        self.chat(system, prompt, &[grid])
    }
}
