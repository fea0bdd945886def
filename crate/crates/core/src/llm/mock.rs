use super::{
    approximate_usage, ChatBackend, ChatMessage, Completion, GatewayError, SamplingParams,
};

/// Plays back a fixed script of completion batches, one batch per call.
///
/// A batch shorter than the requested `n` is cycled to fill it and a longer
/// one is truncated. With `repeat_last` the final batch is served forever.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    steps: Vec<Vec<String>>,
    cursor: usize,
    repeat_last: bool,
}

impl ScriptedBackend {
    pub fn new(steps: Vec<Vec<String>>) -> Self {
        ScriptedBackend {
            steps,
            cursor: 0,
            repeat_last: false,
        }
    }

    /// The same batch on every call.
    pub fn fixed(texts: Vec<String>) -> Self {
        ScriptedBackend::new(vec![texts]).repeat_last()
    }

    pub fn repeat_last(mut self) -> Self {
        self.repeat_last = true;
        self
    }

    pub fn calls(&self) -> usize {
        self.cursor
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        let step = match self.steps.get(self.cursor) {
            Some(step) => step,
            None if self.repeat_last && !self.steps.is_empty() => {
                self.steps.last().expect("non-empty")
            }
            None => return Err(GatewayError::ScriptExhausted(self.cursor)),
        };
        if step.is_empty() {
            return Err(GatewayError::InvalidRequest(format!(
                "script step {} is empty",
                self.cursor
            )));
        }
        let texts: Vec<String> = step.iter().cycle().take(params.n()).cloned().collect();
        self.cursor += 1;
        Ok(approximate_usage(messages, texts))
    }
}

/// Closure-driven backend; handy when a test needs to look at each prompt.
pub struct FnBackend<F> {
    respond: F,
}

impl<F> FnBackend<F>
where
    F: FnMut(&[ChatMessage], &SamplingParams) -> Vec<String> + Send,
{
    pub fn new(respond: F) -> Self {
        FnBackend { respond }
    }
}

impl<F> ChatBackend for FnBackend<F>
where
    F: FnMut(&[ChatMessage], &SamplingParams) -> Vec<String> + Send,
{
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        let texts = (self.respond)(messages, params);
        Ok(approximate_usage(messages, texts))
    }
}
