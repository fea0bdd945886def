//! Dataset ingestion and answer / supporting-fact metrics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::engine::SessionResult;
use crate::llm::{self, ChatBackend, ChatMessage, GatewayError, SamplingParams};
use crate::retriever::{Corpus, Document, RetrieverError};

#[derive(Debug, Error)]
pub enum EvaluationError {
    #[error("dataset is not a JSON array: {0}")]
    NotAnArray(String),
    #[error("instance {id}: {reason}")]
    InvalidInstance { id: String, reason: String },
    #[error("no result for instance {0}")]
    MissingResult(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("failed to read dataset: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MHQAInstance {
    #[serde(rename = "_id")]
    pub id: String,
    pub question: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
    pub context: Vec<(String, Vec<String>)>,
    pub supporting_facts: Vec<(String, usize)>,
}

impl MHQAInstance {
    fn validate(&self) -> Result<(), String> {
        if self.question.trim().is_empty() {
            return Err("empty question".into());
        }
        let sentences: HashMap<&str, usize> = self
            .context
            .iter()
            .map(|(title, sents)| (title.as_str(), sents.len()))
            .collect();
        for (title, idx) in &self.supporting_facts {
            match sentences.get(title.as_str()) {
                None => return Err(format!("supporting fact title {title:?} not in context")),
                Some(&n) if *idx >= n => {
                    return Err(format!(
                        "supporting fact {title:?} sentence {idx} out of range ({n} sentences)"
                    ))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    /// Distinct supporting-fact titles.
    pub fn gold_titles(&self) -> BTreeSet<String> {
        self.supporting_facts
            .iter()
            .map(|(t, _)| t.clone())
            .collect()
    }

    /// Context paragraphs as documents keyed by title. A repeated title keeps
    /// its first paragraph; a paragraph without text is indexed by its title.
    pub fn documents(&self) -> Result<Vec<Document>, RetrieverError> {
        let mut seen = BTreeSet::new();
        let mut docs = Vec::with_capacity(self.context.len());
        for (title, sentences) in &self.context {
            if !seen.insert(title.as_str()) {
                continue;
            }
            let text = sentences
                .iter()
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            let text = if text.is_empty() { title.clone() } else { text };
            docs.push(Document::new(title.clone(), title.clone(), text)?);
        }
        Ok(docs)
    }

    pub fn pool(&self) -> Result<Corpus, RetrieverError> {
        Corpus::from_documents(self.documents()?)
    }
}

/// Union of every instance's documents, first occurrence of a title winning.
pub fn full_corpus(instances: &[MHQAInstance]) -> Result<Corpus, RetrieverError> {
    let mut seen = BTreeSet::new();
    let mut docs = Vec::new();
    for instance in instances {
        for doc in instance.documents()? {
            if seen.insert(doc.id.clone()) {
                docs.push(doc);
            }
        }
    }
    Corpus::from_documents(docs)
}

pub fn parse_dataset(text: &str) -> Result<Vec<MHQAInstance>, EvaluationError> {
    let values: Vec<Value> =
        serde_json::from_str(text).map_err(|e| EvaluationError::NotAnArray(e.to_string()))?;
    values
        .into_iter()
        .enumerate()
        .map(|(pos, value)| {
            let id = value
                .get("_id")
                .and_then(Value::as_str)
                .map(str::to_owned)
                .unwrap_or_else(|| format!("#{pos}"));
            let instance: MHQAInstance =
                serde_json::from_value(value).map_err(|e| EvaluationError::InvalidInstance {
                    id: id.clone(),
                    reason: e.to_string(),
                })?;
            instance
                .validate()
                .map_err(|reason| EvaluationError::InvalidInstance { id, reason })?;
            Ok(instance)
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<MHQAInstance>, EvaluationError> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    parse_dataset(&text)
}

/// Lowercase, strip ASCII punctuation, drop the articles a/an/the and
/// collapse whitespace.
pub fn normalize_answer(text: &str) -> String {
    let lowered: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    let mut out = String::with_capacity(lowered.len());
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut String| {
        if !matches!(word.as_str(), "a" | "an" | "the") {
            out.push_str(word);
        } else {
            out.push(' ');
        }
        word.clear();
    };
    for c in lowered.chars() {
        if c.is_alphanumeric() || c == '_' {
            word.push(c);
        } else {
            flush(&mut word, &mut out);
            out.push(c);
        }
    }
    flush(&mut word, &mut out);
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnswerMetrics {
    pub em: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub cover_em: f64,
}

fn prf(tp: f64, predicted: f64, gold: f64) -> (f64, f64, f64) {
    if tp == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let p = tp / predicted;
    let r = tp / gold;
    (p, r, 2.0 * p * r / (p + r))
}

pub fn answer_metrics(prediction: &str, gold: &str) -> AnswerMetrics {
    let pred = normalize_answer(prediction);
    let gold_n = normalize_answer(gold);
    let em = if pred == gold_n { 1.0 } else { 0.0 };
    let cover_em = if pred.contains(gold_n.as_str()) {
        1.0
    } else {
        0.0
    };

    let special = ["yes", "no", "noanswer"];
    let (precision, recall, f1) = if pred == gold_n {
        (1.0, 1.0, 1.0)
    } else if special.contains(&pred.as_str()) || special.contains(&gold_n.as_str()) {
        (0.0, 0.0, 0.0)
    } else {
        let pred_tokens: Vec<&str> = pred.split_whitespace().collect();
        let gold_tokens: Vec<&str> = gold_n.split_whitespace().collect();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &gold_tokens {
            *counts.entry(t).or_default() += 1;
        }
        let mut same = 0usize;
        for t in &pred_tokens {
            if let Some(c) = counts.get_mut(t) {
                if *c > 0 {
                    *c -= 1;
                    same += 1;
                }
            }
        }
        prf(
            same as f64,
            pred_tokens.len() as f64,
            gold_tokens.len() as f64,
        )
    };
    AnswerMetrics {
        em,
        f1,
        precision,
        recall,
        cover_em,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportMetrics {
    pub sp_em: f64,
    pub sp_f1: f64,
    pub sp_prec: f64,
    pub sp_recall: f64,
}

pub fn support_metrics(predicted: &BTreeSet<String>, gold: &BTreeSet<String>) -> SupportMetrics {
    let tp = predicted.intersection(gold).count() as f64;
    let (sp_prec, sp_recall, sp_f1) = prf(tp, predicted.len() as f64, gold.len() as f64);
    SupportMetrics {
        sp_em: if predicted == gold { 1.0 } else { 0.0 },
        sp_f1,
        sp_prec,
        sp_recall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointMetrics {
    pub joint_em: f64,
    pub joint_f1: f64,
    pub joint_prec: f64,
    pub joint_recall: f64,
}

pub fn joint_metrics(answer: &AnswerMetrics, support: &SupportMetrics) -> JointMetrics {
    let joint_prec = answer.precision * support.sp_prec;
    let joint_recall = answer.recall * support.sp_recall;
    let joint_f1 = if joint_prec + joint_recall > 0.0 {
        2.0 * joint_prec * joint_recall / (joint_prec + joint_recall)
    } else {
        0.0
    };
    JointMetrics {
        joint_em: answer.em * support.sp_em,
        joint_f1,
        joint_prec,
        joint_recall,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub id: String,
    pub prediction: String,
    pub gold: String,
    #[serde(flatten)]
    pub answer: AnswerMetrics,
    #[serde(flatten)]
    pub support: SupportMetrics,
    #[serde(flatten)]
    pub joint: JointMetrics,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerColumns {
    #[serde(rename = "Cover-EM")]
    pub cover_em: f64,
    #[serde(rename = "EM")]
    pub em: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "Precision")]
    pub precision: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetColumns {
    #[serde(rename = "EM")]
    pub em: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "Prec")]
    pub prec: f64,
    #[serde(rename = "Recall")]
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostColumns {
    #[serde(rename = "Avg Token")]
    pub avg_token: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    #[serde(rename = "Answer")]
    pub answer: AnswerColumns,
    #[serde(rename = "Supporting Facts")]
    pub supporting_facts: SetColumns,
    #[serde(rename = "Joint")]
    pub joint: SetColumns,
    #[serde(rename = "Cost")]
    pub cost: CostColumns,
}

impl Aggregate {
    /// One-line summary using the report's column names.
    pub fn summary_line(&self) -> String {
        format!(
            "Cover-EM {:.4} | EM {:.4} | F1 {:.4} | Precision {:.4} | Recall {:.4} | \
             SP EM {:.4} | SP F1 {:.4} | Joint EM {:.4} | Joint F1 {:.4} | Avg Token {:.1}",
            self.answer.cover_em,
            self.answer.em,
            self.answer.f1,
            self.answer.precision,
            self.answer.recall,
            self.supporting_facts.em,
            self.supporting_facts.f1,
            self.joint.em,
            self.joint.f1,
            self.cost.avg_token
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub instances: usize,
    pub limit: Option<usize>,
    pub aggregate: Aggregate,
    pub per_instance: Vec<InstanceMetrics>,
    /// Judged accuracy, only when a judge was supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub judged_accuracy: Option<f64>,
}

pub fn score_instance(instance: &MHQAInstance, result: &SessionResult) -> InstanceMetrics {
    let answer = answer_metrics(&result.answer, &instance.gold_answer);
    let predicted: BTreeSet<String> = result.evidence.iter().map(|d| d.title.clone()).collect();
    let support = support_metrics(&predicted, &instance.gold_titles());
    InstanceMetrics {
        id: instance.id.clone(),
        prediction: result.answer.clone(),
        gold: instance.gold_answer.clone(),
        answer,
        support,
        joint: joint_metrics(&answer, &support),
        tokens: result.token_cost(),
    }
}

pub fn evaluate_run(
    dataset: &[MHQAInstance],
    results: &BTreeMap<String, SessionResult>,
    limit: Option<usize>,
) -> Result<MetricReport, EvaluationError> {
    if dataset.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    let per_instance = dataset
        .iter()
        .map(|instance| {
            results
                .get(&instance.id)
                .map(|r| score_instance(instance, r))
                .ok_or_else(|| EvaluationError::MissingResult(instance.id.clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = per_instance.len() as f64;
    let mean = |f: &dyn Fn(&InstanceMetrics) -> f64| per_instance.iter().map(f).sum::<f64>() / n;
    let aggregate = Aggregate {
        answer: AnswerColumns {
            cover_em: mean(&|m| m.answer.cover_em),
            em: mean(&|m| m.answer.em),
            f1: mean(&|m| m.answer.f1),
            precision: mean(&|m| m.answer.precision),
            recall: mean(&|m| m.answer.recall),
        },
        supporting_facts: SetColumns {
            em: mean(&|m| m.support.sp_em),
            f1: mean(&|m| m.support.sp_f1),
            prec: mean(&|m| m.support.sp_prec),
            recall: mean(&|m| m.support.sp_recall),
        },
        joint: SetColumns {
            em: mean(&|m| m.joint.joint_em),
            f1: mean(&|m| m.joint.joint_f1),
            prec: mean(&|m| m.joint.joint_prec),
            recall: mean(&|m| m.joint.joint_recall),
        },
        cost: CostColumns {
            avg_token: mean(&|m| m.tokens as f64),
        },
    };
    Ok(MetricReport {
        instances: per_instance.len(),
        limit,
        aggregate,
        per_instance,
        judged_accuracy: None,
    })
}

/// Decides whether a prediction answers the question as well as the gold.
pub trait AnswerJudge {
    fn judge(&mut self, question: &str, prediction: &str, gold: &str)
        -> Result<bool, GatewayError>;
}

/// Asks a chat model for a yes/no verdict at temperature 0.
pub struct LlmJudge<B> {
    backend: B,
}

impl<B: ChatBackend> LlmJudge<B> {
    pub fn new(backend: B) -> Self {
        LlmJudge { backend }
    }
}

impl<B: ChatBackend> AnswerJudge for LlmJudge<B> {
    fn judge(
        &mut self,
        question: &str,
        prediction: &str,
        gold: &str,
    ) -> Result<bool, GatewayError> {
        let messages = [
            ChatMessage::system(
                "You grade answers. Reply with exactly one word: yes if the prediction \
                 means the same as the reference answer for the question, otherwise no.",
            ),
            ChatMessage::user(format!(
                "Question: {question}\nReference: {gold}\nPrediction: {prediction}"
            )),
        ];
        let params = SamplingParams::new(0.0, 1)?;
        let reply = llm::generate(&mut self.backend, &messages, &params)?;
        Ok(reply[0].text.trim().to_lowercase().starts_with("yes"))
    }
}

/// Fraction of instances the judge accepts.
pub fn judged_accuracy(
    dataset: &[MHQAInstance],
    results: &BTreeMap<String, SessionResult>,
    judge: &mut dyn AnswerJudge,
) -> Result<f64, EvaluationError> {
    if dataset.is_empty() {
        return Err(EvaluationError::EmptyDataset);
    }
    let mut accepted = 0usize;
    for instance in dataset {
        let result = results
            .get(&instance.id)
            .ok_or_else(|| EvaluationError::MissingResult(instance.id.clone()))?;
        let ok = judge
            .judge(&instance.question, &result.answer, &instance.gold_answer)
            .map_err(|e| EvaluationError::InvalidInstance {
                id: instance.id.clone(),
                reason: e.to_string(),
            })?;
        accepted += usize::from(ok);
    }
    Ok(accepted as f64 / dataset.len() as f64)
}
