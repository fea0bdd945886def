//! Chat-completion gateway.
//!
//! One synchronous, n-sample interface over three kinds of backend: a remote
//! OpenAI-style HTTP endpoint, a replay cassette and a scripted mock. The
//! recording wrapper turns any backend into a cassette producer.

mod cassette;
mod mock;
mod remote;

pub use cassette::{CassetteRecord, RecordingBackend, ReplayBackend};
pub use mock::{FnBackend, ScriptedBackend};
pub use remote::{with_retry, AttemptError, RemoteBackend, RemoteConfig, RetryPolicy};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid sampling parameters: {0}")]
    InvalidParams(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("CassetteMismatch at record {seq}: {reason}")]
    CassetteMismatch { seq: usize, reason: String },
    #[error("backend returned {got} completions, expected {expected}")]
    WrongChoiceCount { expected: usize, got: usize },
    #[error("scripted backend has no step left after {0} call(s)")]
    ScriptExhausted(usize),
    #[error("cassette sink write failed: {0}")]
    Sink(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Temperature in `[0, 2]` and a positive choice count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    temperature: f64,
    n: usize,
}

impl SamplingParams {
    pub fn new(temperature: f64, n: usize) -> Result<Self, GatewayError> {
        if !(0.0..=2.0).contains(&temperature) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature {temperature} outside [0, 2]"
            )));
        }
        if n == 0 {
            return Err(GatewayError::InvalidParams("n must be positive".into()));
        }
        Ok(SamplingParams { temperature, n })
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Completion {
    pub fn total_tokens(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

pub trait ChatBackend: Send {
    /// Returns `params.n()` completions for the conversation.
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Box<B> {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        (**self).complete(messages, params)
    }
}

fn validate_messages(messages: &[ChatMessage]) -> Result<(), GatewayError> {
    let first = messages
        .first()
        .ok_or_else(|| GatewayError::InvalidRequest("no messages".into()))?;
    if first.role != Role::System {
        return Err(GatewayError::InvalidRequest(
            "first message must have the system role".into(),
        ));
    }
    if let Some(pos) = messages.iter().position(|m| m.content.is_empty()) {
        return Err(GatewayError::InvalidRequest(format!(
            "message {pos} has empty content"
        )));
    }
    Ok(())
}

/// Validated entry point used by the engine.
pub fn generate(
    backend: &mut dyn ChatBackend,
    messages: &[ChatMessage],
    params: &SamplingParams,
) -> Result<Vec<Completion>, GatewayError> {
    validate_messages(messages)?;
    let completions = backend.complete(messages, params)?;
    if completions.len() != params.n() {
        return Err(GatewayError::WrongChoiceCount {
            expected: params.n(),
            got: completions.len(),
        });
    }
    Ok(completions)
}

/// Stable SHA-256 over the ordered message contents, the temperature rounded
/// to two decimals and the choice count.
pub fn request_digest(messages: &[ChatMessage], params: &SamplingParams) -> String {
    let mut hasher = Sha256::new();
    for message in messages {
        hasher.update((message.content.len() as u64).to_le_bytes());
        hasher.update(message.content.as_bytes());
    }
    hasher.update(format!("{:.2}", params.temperature()).as_bytes());
    hasher.update((params.n() as u64).to_le_bytes());
    hex::encode(hasher.finalize())
}

pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Token counts for backends without usage data. The prompt is billed once
/// per request, on the first choice.
pub fn approximate_usage(messages: &[ChatMessage], texts: Vec<String>) -> Vec<Completion> {
    let prompt: u64 = messages.iter().map(|m| whitespace_tokens(&m.content)).sum();
    texts
        .into_iter()
        .enumerate()
        .map(|(i, text)| Completion {
            prompt_tokens: if i == 0 { prompt } else { 0 },
            completion_tokens: whitespace_tokens(&text),
            text,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conversation() -> Vec<ChatMessage> {
        vec![
            ChatMessage::system("be brief"),
            ChatMessage::user("Question: why"),
        ]
    }

    #[test]
    fn params_bounds() {
        assert!(SamplingParams::new(2.1, 1).is_err());
        assert!(SamplingParams::new(-0.1, 1).is_err());
        assert!(SamplingParams::new(0.2, 0).is_err());
        assert!(SamplingParams::new(2.0, 5).is_ok());
    }

    #[test]
    fn digest_tracks_temperature_and_n() {
        let msgs = conversation();
        let base = request_digest(&msgs, &SamplingParams::new(0.2, 5).unwrap());
        assert_eq!(
            base,
            request_digest(&msgs, &SamplingParams::new(0.2000001, 5).unwrap())
        );
        assert_ne!(
            base,
            request_digest(&msgs, &SamplingParams::new(1.0, 5).unwrap())
        );
        assert_ne!(
            base,
            request_digest(&msgs, &SamplingParams::new(0.2, 4).unwrap())
        );
        let mut other = msgs.clone();
        other[1].content.push('?');
        assert_ne!(
            base,
            request_digest(&other, &SamplingParams::new(0.2, 5).unwrap())
        );
    }

    #[test]
    fn digest_is_not_fooled_by_concatenation() {
        let p = SamplingParams::new(0.2, 1).unwrap();
        let a = vec![ChatMessage::system("ab"), ChatMessage::user("c")];
        let b = vec![ChatMessage::system("a"), ChatMessage::user("bc")];
        assert_ne!(request_digest(&a, &p), request_digest(&b, &p));
    }

    #[test]
    fn generate_rejects_missing_system_message() {
        let mut backend = ScriptedBackend::fixed(vec!["x".into()]);
        let params = SamplingParams::new(0.2, 1).unwrap();
        let err = generate(&mut backend, &[ChatMessage::user("hi")], &params).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidRequest(_)));
        assert!(matches!(
            generate(&mut backend, &[], &params),
            Err(GatewayError::InvalidRequest(_))
        ));
    }

    #[test]
    fn generate_checks_choice_count() {
        let mut backend =
            FnBackend::new(|_: &[ChatMessage], _: &SamplingParams| vec!["only".to_string()]);
        let params = SamplingParams::new(0.2, 3).unwrap();
        assert_eq!(
            generate(&mut backend, &conversation(), &params).unwrap_err(),
            GatewayError::WrongChoiceCount {
                expected: 3,
                got: 1
            }
        );
    }

    #[test]
    fn approximate_usage_bills_prompt_once() {
        let usage = approximate_usage(&conversation(), vec!["a b".into(), "c".into()]);
        assert_eq!(usage[0].prompt_tokens, 4);
        assert_eq!(usage[1].prompt_tokens, 0);
        assert_eq!(usage[0].completion_tokens, 2);
        assert_eq!(usage[1].completion_tokens, 1);
    }
}
