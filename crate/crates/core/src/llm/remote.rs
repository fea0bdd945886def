//! OpenAI-compatible chat-completions adapter.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    whitespace_tokens, ChatBackend, ChatMessage, Completion, GatewayError, SamplingParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptError {
    pub retryable: bool,
    pub message: String,
}

impl AttemptError {
    pub fn retryable(message: impl Into<String>) -> Self {
        AttemptError {
            retryable: true,
            message: message.into(),
        }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        AttemptError {
            retryable: false,
            message: message.into(),
        }
    }
}

/// Runs `op` up to `policy.attempts` times, doubling the pause between tries.
/// `op` receives the 1-based attempt number.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    mut op: impl FnMut(u32) -> Result<T, AttemptError>,
) -> Result<T, GatewayError> {
    let attempts = policy.attempts.max(1);
    let mut delay = Duration::from_millis(policy.base_delay_ms);
    let mut attempt = 1;
    loop {
        match op(attempt) {
            Ok(value) => return Ok(value),
            Err(err) if !err.retryable || attempt >= attempts => {
                return Err(GatewayError::Transport {
                    attempts: attempt,
                    message: err.message,
                })
            }
            Err(err) => {
                log::warn!("attempt {attempt}/{attempts} failed: {}", err.message);
                std::thread::sleep(delay);
                delay *= 2;
                attempt += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60,
            retry: RetryPolicy::default(),
        }
    }
}

pub struct RemoteBackend {
    config: RemoteConfig,
    api_key: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Result<Self, GatewayError> {
        let api_key = std::env::var(&config.api_key_env).map_err(|_| {
            GatewayError::Config(format!(
                "environment variable {} is not set",
                config.api_key_env
            ))
        })?;
        Ok(RemoteBackend::with_key(config, api_key))
    }

    pub fn with_key(config: RemoteConfig, api_key: String) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteBackend {
            config,
            api_key,
            agent,
        }
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<ChatResponse, AttemptError> {
        let mut response = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| AttemptError::retryable(e.to_string()))?;
        let status = response.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(AttemptError::retryable(format!("HTTP {status}")));
        }
        if status >= 400 {
            let detail = response.body_mut().read_to_string().unwrap_or_default();
            return Err(AttemptError::fatal(format!("HTTP {status}: {detail}")));
        }
        response
            .body_mut()
            .read_json::<ChatResponse>()
            .map_err(|e| AttemptError::fatal(format!("bad response body: {e}")))
    }
}

impl ChatBackend for RemoteBackend {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        let body = json!({
            "model": self.config.model,
            "messages": messages
                .iter()
                .map(|m| json!({"role": m.role.as_str(), "content": m.content}))
                .collect::<Vec<_>>(),
            "temperature": params.temperature(),
            "n": params.n(),
        });
        let response = with_retry(&self.config.retry, |_| self.attempt(&body))?;
        let texts: Vec<String> = response
            .choices
            .into_iter()
            .map(|c| c.message.content.unwrap_or_default())
            .collect();
        Ok(split_usage(texts, response.usage))
    }
}

/// Prompt tokens go to the first choice. Completion tokens are split in
/// proportion to whitespace length, remainder on the first choice.
fn split_usage(texts: Vec<String>, usage: Option<Usage>) -> Vec<Completion> {
    let Some(usage) = usage else {
        return texts
            .into_iter()
            .map(|text| Completion {
                completion_tokens: whitespace_tokens(&text),
                prompt_tokens: 0,
                text,
            })
            .collect();
    };
    let weights: Vec<u64> = texts.iter().map(|t| whitespace_tokens(t).max(1)).collect();
    let total_weight: u64 = weights.iter().sum::<u64>().max(1);
    let mut shares: Vec<u64> = weights
        .iter()
        .map(|w| usage.completion_tokens * w / total_weight)
        .collect();
    let assigned: u64 = shares.iter().sum();
    if let Some(first) = shares.first_mut() {
        *first += usage.completion_tokens - assigned;
    }
    texts
        .into_iter()
        .zip(shares)
        .enumerate()
        .map(|(i, (text, completion_tokens))| Completion {
            text,
            prompt_tokens: if i == 0 { usage.prompt_tokens } else { 0 },
            completion_tokens,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            attempts: 3,
            base_delay_ms: 1,
        }
    }

    #[test]
    fn two_failures_then_success() {
        let mut calls = 0;
        let out = with_retry(&fast(), |_| {
            calls += 1;
            if calls < 3 {
                Err(AttemptError::retryable("boom"))
            } else {
                Ok(calls)
            }
        });
        assert_eq!(out.unwrap(), 3);
    }

    #[test]
    fn three_failures_is_transport_error() {
        let mut calls = 0;
        let out: Result<(), _> = with_retry(&fast(), |_| {
            calls += 1;
            Err(AttemptError::retryable("boom"))
        });
        assert_eq!(calls, 3);
        assert_eq!(
            out.unwrap_err(),
            GatewayError::Transport {
                attempts: 3,
                message: "boom".into()
            }
        );
    }

    #[test]
    fn fatal_errors_do_not_retry() {
        let mut calls = 0;
        let out: Result<(), _> = with_retry(&fast(), |_| {
            calls += 1;
            Err(AttemptError::fatal("HTTP 401"))
        });
        assert_eq!(calls, 1);
        assert!(matches!(
            out,
            Err(GatewayError::Transport { attempts: 1, .. })
        ));
    }

    #[test]
    fn usage_split_is_additive() {
        let texts = vec!["a b c".to_string(), "d".to_string(), "e f".to_string()];
        let out = split_usage(
            texts,
            Some(Usage {
                prompt_tokens: 40,
                completion_tokens: 13,
            }),
        );
        assert_eq!(out.iter().map(|c| c.prompt_tokens).sum::<u64>(), 40);
        assert_eq!(out.iter().map(|c| c.completion_tokens).sum::<u64>(), 13);
    }

    #[test]
    fn missing_key_env_is_config_error() {
        let config = RemoteConfig {
            api_key_env: "HOPQA_TEST_KEY_THAT_IS_NEVER_SET".into(),
            ..RemoteConfig::default()
        };
        assert!(matches!(
            RemoteBackend::new(config),
            Err(GatewayError::Config(_))
        ));
    }
}
