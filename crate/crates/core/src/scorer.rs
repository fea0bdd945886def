//! Query-quality scoring.
//!
//! A query is good when few documents in the pool look relevant to it: the
//! predicted score is the reciprocal of the number of documents a relevance
//! model marks positive, mirroring the reciprocal rank of the first gold
//! document used as supervision.

use std::collections::{BTreeSet, HashSet};
use std::io::{BufRead, Write};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{with_retry, AttemptError, RetryPolicy};
use crate::retriever::{tokenize, Document, RankedList};

/// Sums at or below this are treated as zero by the training score.
pub const DEGENERATE_SUM: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScorerError {
    #[error("relevance model failed: {0}")]
    RelevanceFailure(String),
    #[error("relevance sum {0:e} is too close to zero")]
    DegenerateSum(f64),
    #[error("no gold document appears in the ranking for {query:?}")]
    GoldNotFound { query: String },
    #[error("gold document set is empty")]
    EmptyGold,
    #[error("document pool is empty")]
    EmptyPool,
    #[error("training data line {line}: {reason}")]
    Format { line: usize, reason: String },
}

pub trait RelevanceModel: Send + Sync {
    /// Relevance of `document` to `query`, in `[0, 1]`.
    fn relevance(&self, query: &str, document: &Document) -> Result<f64, ScorerError>;

    fn relevance_batch(
        &self,
        query: &str,
        documents: &[Document],
    ) -> Result<Vec<f64>, ScorerError> {
        documents.iter().map(|d| self.relevance(query, d)).collect()
    }
}

/// Fraction of distinct query terms that occur in the document.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalRelevance;

pub fn lexical_relevance(query: &str, document: &Document) -> f64 {
    let query_terms: BTreeSet<String> = tokenize(query).into_iter().collect();
    if query_terms.is_empty() {
        return 0.0;
    }
    let doc_terms: HashSet<String> = tokenize(&document.indexed_text()).into_iter().collect();
    let shared = query_terms
        .iter()
        .filter(|t| doc_terms.contains(*t))
        .count();
    shared as f64 / query_terms.len() as f64
}

impl RelevanceModel for LexicalRelevance {
    fn relevance(&self, query: &str, document: &Document) -> Result<f64, ScorerError> {
        Ok(lexical_relevance(query, document))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteRelevanceConfig {
    pub url: String,
    pub timeout_secs: u64,
    #[serde(default)]
    pub retry: RetryPolicy,
}

impl Default for RemoteRelevanceConfig {
    fn default() -> Self {
        RemoteRelevanceConfig {
            url: "http://127.0.0.1:8600/score".into(),
            timeout_secs: 30,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RelevanceRequest<'a> {
    pub query: &'a str,
    pub documents: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct RelevanceResponse {
    pub scores: Vec<f64>,
}

/// Client for an external scoring service speaking
/// `{"query", "documents"} -> {"scores"}` over HTTP POST.
pub struct RemoteRelevance {
    config: RemoteRelevanceConfig,
    agent: ureq::Agent,
}

impl RemoteRelevance {
    pub fn new(config: RemoteRelevanceConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(config.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        RemoteRelevance { config, agent }
    }

    /// Wire form of a document: `Title: text`.
    pub fn document_text(document: &Document) -> String {
        format!("{}: {}", document.title.trim(), document.text.trim())
    }
}

impl RelevanceModel for RemoteRelevance {
    fn relevance(&self, query: &str, document: &Document) -> Result<f64, ScorerError> {
        Ok(self.relevance_batch(query, std::slice::from_ref(document))?[0])
    }

    fn relevance_batch(
        &self,
        query: &str,
        documents: &[Document],
    ) -> Result<Vec<f64>, ScorerError> {
        let request = RelevanceRequest {
            query,
            documents: documents
                .iter()
                .map(RemoteRelevance::document_text)
                .collect(),
        };
        let response = with_retry(&self.config.retry, |_| {
            let mut resp = self
                .agent
                .post(&self.config.url)
                .send_json(&request)
                .map_err(|e| AttemptError::retryable(e.to_string()))?;
            let status = resp.status().as_u16();
            if status >= 500 || status == 429 {
                return Err(AttemptError::retryable(format!("HTTP {status}")));
            }
            if status >= 400 {
                let detail = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(AttemptError::fatal(format!("HTTP {status}: {detail}")));
            }
            resp.body_mut()
                .read_json::<RelevanceResponse>()
                .map_err(|e| AttemptError::fatal(format!("bad response body: {e}")))
        })
        .map_err(|e| ScorerError::RelevanceFailure(e.to_string()))?;
        if response.scores.len() != documents.len() {
            return Err(ScorerError::RelevanceFailure(format!(
                "{} scores for {} documents",
                response.scores.len(),
                documents.len()
            )));
        }
        check_range(&response.scores)?;
        Ok(response.scores)
    }
}

fn check_range(scores: &[f64]) -> Result<(), ScorerError> {
    match scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        Some(bad) => Err(ScorerError::RelevanceFailure(format!(
            "relevance {bad} outside [0, 1]"
        ))),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QueryScore {
    pub value: f64,
    pub positives: usize,
}

impl QueryScore {
    /// Documents strictly above 0.5 are positive; with none the score is 0.
    pub fn from_relevances(relevances: &[f64]) -> Self {
        let positives = relevances.iter().filter(|&&s| s > 0.5).count();
        let value = if positives == 0 {
            0.0
        } else {
            1.0 / positives as f64
        };
        QueryScore { value, positives }
    }
}

pub fn predict_score(
    query: &str,
    pool: &[Document],
    model: &dyn RelevanceModel,
) -> Result<QueryScore, ScorerError> {
    if pool.is_empty() {
        return Err(ScorerError::EmptyPool);
    }
    let relevances = model.relevance_batch(query, pool)?;
    if relevances.len() != pool.len() {
        return Err(ScorerError::RelevanceFailure(format!(
            "{} relevances for {} documents",
            relevances.len(),
            pool.len()
        )));
    }
    check_range(&relevances)?;
    Ok(QueryScore::from_relevances(&relevances))
}

/// Reciprocal of the summed relevances, the regression target's counterpart
/// during training.
pub fn train_score(relevances: &[f64]) -> Result<f64, ScorerError> {
    let sum: f64 = relevances.iter().sum();
    if sum <= DEGENERATE_SUM {
        return Err(ScorerError::DegenerateSum(sum));
    }
    Ok(1.0 / sum)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub query: String,
    pub doc_ids: Vec<String>,
    pub labels: Vec<bool>,
    pub gold_score: f64,
}

impl TrainingExample {
    /// Rank of the first gold document (= number of positive labels).
    pub fn gold_rank(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Labels every document up to and including the first gold one as positive;
/// the gold score is `1 / rank`.
pub fn label_query(
    query: &str,
    ranked: &RankedList,
    gold_ids: &HashSet<String>,
) -> Result<TrainingExample, ScorerError> {
    if gold_ids.is_empty() {
        return Err(ScorerError::EmptyGold);
    }
    let g = ranked
        .first_rank_where(|id| gold_ids.contains(id))
        .ok_or_else(|| ScorerError::GoldNotFound {
            query: query.to_owned(),
        })?;
    Ok(TrainingExample {
        query: query.to_owned(),
        doc_ids: ranked.ids().map(str::to_owned).collect(),
        labels: (1..=ranked.entries.len()).map(|j| j <= g).collect(),
        gold_score: 1.0 / g as f64,
    })
}

pub fn write_training_data<W: Write>(
    examples: &[TrainingExample],
    mut sink: W,
) -> std::io::Result<()> {
    for example in examples {
        serde_json::to_writer(&mut sink, example)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()
}

pub fn read_training_data<R: BufRead>(source: R) -> Result<Vec<TrainingExample>, ScorerError> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line.map_err(|e| ScorerError::Format {
            line: idx + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| ScorerError::Format {
                line: idx + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(out)
}
