//! The iterative reasoning loop.
//!
//! Every iteration prompts the model with the evidence gathered so far and
//! the question, nothing else. The plan assessor then either accepts an
//! answer, picks the best fresh query (whose top unseen document joins the
//! evidence) or, when every query is a repeat, raises the temperature for
//! the next iteration. After `max_iterations` the answer is forced.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assessor::{self, AssessorError, Decision, PlanSet};
use crate::config::{ConfigError, EngineConfig};
use crate::llm::{self, request_digest, ChatBackend, Completion, GatewayError, SamplingParams};
use crate::prompting::{
    build_prompt, parse_planning, Action, ExemplarSet, Planning, PromptError, PromptKind,
    ANALYSIS_TAG, ANSWER_TAG, SEARCH_TAG,
};
use crate::retriever::{select_new_evidence, tokenize, Corpus, Document, RetrieverError};
use crate::scorer::{predict_score, RelevanceModel, ScorerError};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Retriever(#[from] RetrieverError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Assessor(#[from] AssessorError),
    #[error("document pool is empty")]
    EmptyPool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub question: String,
    pub evidence: Vec<Document>,
    pub executed_queries: Vec<String>,
    pub t: usize,
    pub temperature: f64,
}

impl SessionState {
    pub fn new(question: &str, config: &EngineConfig) -> Self {
        SessionState {
            question: question.to_owned(),
            evidence: Vec::new(),
            executed_queries: Vec::new(),
            t: 0,
            temperature: config.initial_temperature,
        }
    }

    fn evidence_ids(&self) -> HashSet<String> {
        self.evidence.iter().map(|d| d.id.clone()).collect()
    }
}

pub fn escalate_temperature(mut state: SessionState, config: &EngineConfig) -> SessionState {
    state.temperature = config.escalated(state.temperature);
    state
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub analysis: String,
    pub action: String,
    pub kind: String,
}

impl From<&Planning> for PlanRecord {
    fn from(p: &Planning) -> Self {
        PlanRecord {
            analysis: p.analysis.clone(),
            action: p.action.text().to_owned(),
            kind: if p.action.is_search() {
                "search"
            } else {
                "answer"
            }
            .to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionKind {
    AnswerChosen,
    QueryChosen,
    EscalateTemperature,
    /// No usable plan in the batch; sampled again at a higher temperature.
    Resample,
    /// The chosen query found no document outside the evidence.
    Exhausted,
    ForcibleAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub temperature: f64,
    pub prompt_kind: PromptKind,
    pub prompt_digest: String,
    pub plans: Vec<PlanRecord>,
    pub malformed: usize,
    pub decision: DecisionKind,
    pub filtered_queries: Vec<String>,
    pub scores: Vec<f64>,
    pub selected: Option<String>,
    pub evidence_added: Option<String>,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionResult {
    pub question: String,
    pub answer: String,
    pub reasoning: String,
    pub evidence: Vec<Document>,
    pub executed_queries: Vec<String>,
    pub forcible: bool,
    /// Iteration index at which the answer was produced.
    pub iterations_used: usize,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl SessionResult {
    pub fn token_cost(&self) -> u64 {
        self.prompt_tokens + self.completion_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum TraceLine {
    Iteration(IterationRecord),
    Result(SessionResult),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub result: SessionResult,
    pub trace: Vec<IterationRecord>,
}

impl SessionOutcome {
    /// Every search plan the model proposed during reasoning, in order.
    pub fn candidate_queries(&self) -> impl Iterator<Item = &str> {
        self.trace
            .iter()
            .filter(|r| r.decision != DecisionKind::ForcibleAnswer)
            .flat_map(|r| r.plans.iter())
            .filter(|p| p.kind == "search")
            .map(|p| p.action.as_str())
    }

    pub fn write_trace<W: Write>(&self, mut sink: W) -> std::io::Result<()> {
        for record in &self.trace {
            serde_json::to_writer(&mut sink, &TraceLine::Iteration(record.clone()))?;
            sink.write_all(b"\n")?;
        }
        serde_json::to_writer(&mut sink, &TraceLine::Result(self.result.clone()))?;
        sink.write_all(b"\n")?;
        sink.flush()
    }
}

pub struct Engine<'a> {
    pub config: &'a EngineConfig,
    pub exemplars: &'a ExemplarSet,
    pub relevance: &'a dyn RelevanceModel,
}

struct Sample {
    plans: Vec<Planning>,
    malformed: usize,
    digest: String,
    prompt_tokens: u64,
    completion_tokens: u64,
}

enum Step {
    Continue,
    Finished(Planning),
    Force,
}

impl<'a> Engine<'a> {
    pub fn new(
        config: &'a EngineConfig,
        exemplars: &'a ExemplarSet,
        relevance: &'a dyn RelevanceModel,
    ) -> Self {
        Engine {
            config,
            exemplars,
            relevance,
        }
    }

    pub fn run_session(
        &self,
        question: &str,
        pool: &Corpus,
        backend: &mut dyn ChatBackend,
    ) -> Result<SessionOutcome, EngineError> {
        self.config.validate()?;
        if pool.is_empty() {
            return Err(EngineError::EmptyPool);
        }
        let mut state = SessionState::new(question, self.config);
        let mut trace = Vec::new();
        let mut tokens = (0u64, 0u64);

        while state.t < self.config.max_iterations {
            match self.iterate(&mut state, pool, backend, &mut trace, &mut tokens)? {
                Step::Continue => {}
                Step::Finished(plan) => {
                    let result = self.finish(state, plan, false, tokens);
                    return Ok(SessionOutcome { result, trace });
                }
                Step::Force => break,
            }
        }

        let plan = self.force_answer(&state, backend, &mut trace, &mut tokens)?;
        let result = self.finish(state, plan, true, tokens);
        Ok(SessionOutcome { result, trace })
    }

    fn finish(
        &self,
        state: SessionState,
        plan: Planning,
        forcible: bool,
        tokens: (u64, u64),
    ) -> SessionResult {
        SessionResult {
            question: state.question,
            answer: plan.action.text().to_owned(),
            reasoning: plan.analysis,
            evidence: state.evidence,
            executed_queries: state.executed_queries,
            forcible,
            iterations_used: state.t,
            prompt_tokens: tokens.0,
            completion_tokens: tokens.1,
        }
    }

    fn sample(
        &self,
        kind: PromptKind,
        state: &SessionState,
        n: usize,
        backend: &mut dyn ChatBackend,
    ) -> Result<(Sample, Vec<Completion>), EngineError> {
        let messages = build_prompt(kind, &state.evidence, &state.question, self.exemplars)?;
        let params = SamplingParams::new(state.temperature, n)?;
        let completions = llm::generate(backend, &messages, &params)?;
        let mut plans = Vec::with_capacity(completions.len());
        let mut malformed = 0;
        for completion in &completions {
            match parse_planning(&completion.text) {
                // a query with no searchable term cannot be executed
                Ok(p) if p.query().is_some_and(|q| tokenize(q).is_empty()) => malformed += 1,
                Ok(p) => plans.push(p),
                Err(_) => malformed += 1,
            }
        }
        let sample = Sample {
            plans,
            malformed,
            digest: request_digest(&messages, &params),
            prompt_tokens: completions.iter().map(|c| c.prompt_tokens).sum(),
            completion_tokens: completions.iter().map(|c| c.completion_tokens).sum(),
        };
        Ok((sample, completions))
    }

    fn record(
        &self,
        state: &SessionState,
        kind: PromptKind,
        sample: &Sample,
        decision: DecisionKind,
    ) -> IterationRecord {
        IterationRecord {
            t: state.t,
            temperature: state.temperature,
            prompt_kind: kind,
            prompt_digest: sample.digest.clone(),
            plans: sample.plans.iter().map(PlanRecord::from).collect(),
            malformed: sample.malformed,
            decision,
            filtered_queries: Vec::new(),
            scores: Vec::new(),
            selected: None,
            evidence_added: None,
            prompt_tokens: sample.prompt_tokens,
            completion_tokens: sample.completion_tokens,
        }
    }

    fn score_query(&self, query: &str, pool: &Corpus) -> Result<f64, ScorerError> {
        Ok(predict_score(query, pool.documents(), self.relevance)?.value)
    }

    fn iterate(
        &self,
        state: &mut SessionState,
        pool: &Corpus,
        backend: &mut dyn ChatBackend,
        trace: &mut Vec<IterationRecord>,
        tokens: &mut (u64, u64),
    ) -> Result<Step, EngineError> {
        let kind = PromptKind::for_iteration(state.t);
        let mut resampled = false;
        loop {
            let (sample, _) = self.sample(kind, state, self.config.choices, backend)?;
            tokens.0 += sample.prompt_tokens;
            tokens.1 += sample.completion_tokens;

            let decision = if sample.plans.is_empty() {
                Err(AssessorError::NoViablePlan)
            } else {
                let plans = PlanSet::new(state.t, sample.plans.clone());
                assessor::assess(
                    &plans,
                    &state.executed_queries,
                    self.config.theta,
                    self.config.eps,
                    |q| self.score_query(q, pool),
                )?
            };

            let decision = match decision {
                Ok(d) => d,
                Err(AssessorError::NoViablePlan) => {
                    trace.push(self.record(state, kind, &sample, DecisionKind::Resample));
                    if resampled {
                        return Ok(Step::Force);
                    }
                    resampled = true;
                    *state = escalate_temperature(state.clone(), self.config);
                    continue;
                }
                Err(other) => return Err(other.into()),
            };

            return Ok(match decision {
                Decision::AnswerChosen(plan) => {
                    trace.push(self.record(state, kind, &sample, DecisionKind::AnswerChosen));
                    Step::Finished(plan)
                }
                Decision::EscalateTemperature { .. } => {
                    trace.push(self.record(
                        state,
                        kind,
                        &sample,
                        DecisionKind::EscalateTemperature,
                    ));
                    *state = escalate_temperature(state.clone(), self.config);
                    state.t += 1;
                    Step::Continue
                }
                Decision::QueryChosen {
                    plan,
                    filtered,
                    scores,
                } => {
                    let query = plan.action.text().to_owned();
                    let ranked = pool.rank(&query)?;
                    let mut rec = self.record(state, kind, &sample, DecisionKind::QueryChosen);
                    rec.filtered_queries = filtered
                        .iter()
                        .map(|p| p.action.text().to_owned())
                        .collect();
                    rec.scores = scores;
                    rec.selected = Some(query.clone());
                    match select_new_evidence(&ranked, &state.evidence_ids()) {
                        Ok(id) => {
                            let doc = pool.get(id).expect("ranked ids come from the pool").clone();
                            rec.evidence_added = Some(doc.id.clone());
                            trace.push(rec);
                            state.evidence.push(doc);
                            state.executed_queries.push(query);
                            state.t += 1;
                            Step::Continue
                        }
                        Err(RetrieverError::Exhausted) => {
                            rec.decision = DecisionKind::Exhausted;
                            trace.push(rec);
                            Step::Force
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            });
        }
    }

    fn force_answer(
        &self,
        state: &SessionState,
        backend: &mut dyn ChatBackend,
        trace: &mut Vec<IterationRecord>,
        tokens: &mut (u64, u64),
    ) -> Result<Planning, EngineError> {
        let kind = PromptKind::ForcibleAnswer;
        let (sample, completions) =
            self.sample(kind, state, self.config.forcible_choices, backend)?;
        tokens.0 += sample.prompt_tokens;
        tokens.1 += sample.completion_tokens;
        let mut rec = self.record(state, kind, &sample, DecisionKind::ForcibleAnswer);

        let plan = sample
            .plans
            .iter()
            .find(|p| !p.action.is_search())
            .cloned()
            .unwrap_or_else(|| salvage_answer(&completions[0].text));
        rec.selected = Some(plan.action.text().to_owned());
        trace.push(rec);
        Ok(plan)
    }
}

/// Best-effort answer from an output that broke the format.
fn salvage_answer(raw: &str) -> Planning {
    let tail = raw
        .rfind(ANSWER_TAG)
        .map(|i| &raw[i + ANSWER_TAG.len()..])
        .unwrap_or(raw);
    let cleaned = tail
        .replace(ANALYSIS_TAG, " ")
        .replace(SEARCH_TAG, " ")
        .replace(ANSWER_TAG, " ");
    Planning {
        analysis: String::new(),
        action: Action::Answer(cleaned.split_whitespace().collect::<Vec<_>>().join(" ")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ScriptedBackend;
    use crate::scorer::LexicalRelevance;

    fn pool() -> Corpus {
        let docs = vec![
            Document::new("d1", "Alpha", "alpha is the first letter").unwrap(),
            Document::new("d2", "Beta", "beta follows alpha").unwrap(),
            Document::new("d3", "Gamma", "gamma is third").unwrap(),
        ];
        Corpus::from_documents(docs).unwrap()
    }

    fn strings(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn run(steps: Vec<Vec<String>>, config: &EngineConfig) -> SessionOutcome {
        let exemplars = ExemplarSet::builtin();
        let engine = Engine::new(config, &exemplars, &LexicalRelevance);
        let mut backend = ScriptedBackend::new(steps).repeat_last();
        engine
            .run_session("What comes after alpha?", &pool(), &mut backend)
            .unwrap()
    }

    #[test]
    fn answers_once_vote_passes() {
        let config = EngineConfig::default();
        let out = run(
            vec![
                strings(&["[Search] alpha letter"]),
                strings(&[
                    "[Analysis] Beta follows alpha. [Answer] beta",
                    "[Analysis] x [Answer] beta",
                    "[Analysis] x [Answer] beta",
                    "[Analysis] x [Answer] beta",
                    "[Analysis] x [Search] beta letter",
                ]),
            ],
            &config,
        );
        assert_eq!(out.result.answer, "beta");
        assert_eq!(out.result.reasoning, "Beta follows alpha.");
        assert_eq!(out.result.iterations_used, 1);
        assert_eq!(out.result.evidence.len(), 1);
        assert!(!out.result.forcible);
        assert_eq!(out.trace.len(), 2);
    }

    #[test]
    fn repeated_query_escalates_until_forced() {
        let config = EngineConfig::default();
        let out = run(
            vec![
                strings(&["[Search] alpha letter"]),
                strings(&["[Analysis] again [Search] alpha letter"]),
            ],
            &config,
        );
        assert!(out.result.forcible);
        assert_eq!(out.result.iterations_used, 6);
        assert_eq!(out.result.evidence.len(), 1);
        let escalations: Vec<_> = out
            .trace
            .iter()
            .filter(|r| r.decision == DecisionKind::EscalateTemperature)
            .collect();
        assert_eq!(escalations.len(), 5);
        assert_eq!(escalations[0].temperature, 0.2);
        assert!(escalations[1..].iter().all(|r| r.temperature == 1.0));
        assert_eq!(
            out.trace.last().unwrap().decision,
            DecisionKind::ForcibleAnswer
        );
    }

    #[test]
    fn all_malformed_resamples_then_forces() {
        let config = EngineConfig::default();
        let out = run(vec![strings(&["no tags here"])], &config);
        assert!(out.result.forcible);
        assert_eq!(out.result.iterations_used, 0);
        let kinds: Vec<_> = out.trace.iter().map(|r| r.decision).collect();
        assert_eq!(
            kinds,
            [
                DecisionKind::Resample,
                DecisionKind::Resample,
                DecisionKind::ForcibleAnswer
            ]
        );
        assert_eq!(out.trace[1].temperature, 1.0);
        // the forced output had no tags either
        assert_eq!(out.result.answer, "no tags here");
    }

    #[test]
    fn exhausted_pool_forces_answer() {
        let config = EngineConfig {
            max_iterations: 10,
            ..Default::default()
        };
        let steps = vec![
            strings(&["[Search] alpha first letter"]),
            strings(&["[Analysis] a [Search] beta second symbol"]),
            strings(&["[Analysis] b [Search] gamma third sign"]),
            strings(&["[Analysis] c [Search] delta fourth glyph"]),
            strings(&["[Analysis] d [Answer] beta"]),
        ];
        let out = run(steps, &config);
        assert!(out.result.forcible);
        assert_eq!(out.result.evidence.len(), 3);
        assert_eq!(out.trace[3].decision, DecisionKind::Exhausted);
        assert_eq!(out.result.answer, "beta");
    }

    #[test]
    fn token_cost_is_sum_of_calls() {
        let config = EngineConfig::default();
        let out = run(
            vec![
                strings(&["[Search] alpha letter"]),
                strings(&["[Analysis] a [Answer] beta"]),
            ],
            &config,
        );
        let per_call: u64 = out
            .trace
            .iter()
            .map(|r| r.prompt_tokens + r.completion_tokens)
            .sum();
        assert_eq!(out.result.token_cost(), per_call);
        assert!(per_call > 0);
    }

    #[test]
    fn salvage_strips_tags() {
        assert_eq!(
            salvage_answer("[Analysis] r [Answer]  Paris ")
                .action
                .text(),
            "Paris"
        );
        assert_eq!(salvage_answer("[Search] Paris").action.text(), "Paris");
    }

    #[test]
    fn escalate_only_touches_temperature() {
        let config = EngineConfig::default();
        let state = SessionState::new("q", &config);
        let next = escalate_temperature(state.clone(), &config);
        assert_eq!(next.temperature, 1.0);
        assert_eq!(
            SessionState {
                temperature: 0.2,
                ..next
            },
            state
        );
    }
}
