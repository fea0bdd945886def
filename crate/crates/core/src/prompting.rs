//! Prompt construction and planning parser.
//!
//! A prompt is built from the evidence documents and the question only.
//! Nothing from earlier iterations (analyses, executed queries) is accepted
//! as input, so it cannot leak into the conversation.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatMessage, Role};
use crate::retriever::Document;

const BUILTIN_EXEMPLARS: &str = include_str!("../assets/exemplars.txt");

pub const ANALYSIS_TAG: &str = "[Analysis]";
pub const SEARCH_TAG: &str = "[Search]";
pub const ANSWER_TAG: &str = "[Answer]";

const FORCIBLE_SYSTEM: &str = "You are given problems requiring multi-step searching and reasoning with related contexts. \
Searching is no longer possible, so you must give the answer now using the context and your best judgement. \
Don't answer with uncertainty. Lines only start with '[Analysis]' or '[Answer]'. An '[Answer]' line is mandatory.";

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("malformed planning: {0}")]
    MalformedPlanning(String),
    #[error("invalid exemplar asset at line {line}: {reason}")]
    Asset { line: usize, reason: String },
    #[error("{0}")]
    Precondition(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    First,
    Followup,
    ForcibleAnswer,
}

impl PromptKind {
    /// `First` exactly when nothing has been retrieved yet (t = 0).
    pub fn for_iteration(t: usize) -> Self {
        if t == 0 {
            PromptKind::First
        } else {
            PromptKind::Followup
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "text", rename_all = "snake_case")]
pub enum Action {
    Search(String),
    Answer(String),
}

impl Action {
    pub fn text(&self) -> &str {
        match self {
            Action::Search(t) | Action::Answer(t) => t,
        }
    }

    pub fn is_search(&self) -> bool {
        matches!(self, Action::Search(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Planning {
    pub analysis: String,
    pub action: Action,
}

impl Planning {
    pub fn search(analysis: impl Into<String>, query: impl Into<String>) -> Self {
        Planning {
            analysis: analysis.into(),
            action: Action::Search(query.into()),
        }
    }

    pub fn answer(analysis: impl Into<String>, answer: impl Into<String>) -> Self {
        Planning {
            analysis: analysis.into(),
            action: Action::Answer(answer.into()),
        }
    }

    pub fn query(&self) -> Option<&str> {
        match &self.action {
            Action::Search(q) => Some(q),
            Action::Answer(_) => None,
        }
    }
}

/// Exemplar-style rendering; a plan without analysis renders as a bare action line.
impl fmt::Display for Planning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.analysis.is_empty() {
            writeln!(f, "{ANALYSIS_TAG} {}", self.analysis)?;
        }
        match &self.action {
            Action::Search(q) => write!(f, "{SEARCH_TAG} {q}"),
            Action::Answer(a) => write!(f, "{ANSWER_TAG} {a}"),
        }
    }
}

/// Parses one model output. Tags are case-sensitive and exactly one action
/// tag must be present.
pub fn parse_planning(raw: &str) -> Result<Planning, PromptError> {
    let searches: Vec<usize> = raw.match_indices(SEARCH_TAG).map(|(i, _)| i).collect();
    let answers: Vec<usize> = raw.match_indices(ANSWER_TAG).map(|(i, _)| i).collect();
    let (pos, tag_len, is_search) = match (searches.as_slice(), answers.as_slice()) {
        ([], []) => return Err(malformed("no [Search] or [Answer] tag")),
        ([p], []) => (*p, SEARCH_TAG.len(), true),
        ([], [p]) => (*p, ANSWER_TAG.len(), false),
        (s, a) if !s.is_empty() && !a.is_empty() => {
            return Err(malformed("both [Search] and [Answer] present"))
        }
        _ => return Err(malformed("repeated action tag")),
    };

    let action = raw[pos + tag_len..].trim();
    if action.is_empty() {
        return Err(malformed("empty action text"));
    }
    if action.contains(ANALYSIS_TAG) {
        return Err(malformed("[Analysis] after the action tag"));
    }

    let preamble = &raw[..pos];
    let analysis = match preamble
        .match_indices(ANALYSIS_TAG)
        .collect::<Vec<_>>()
        .as_slice()
    {
        [] => preamble.trim(),
        [(i, _)] => preamble[i + ANALYSIS_TAG.len()..].trim(),
        _ => return Err(malformed("repeated [Analysis] tag")),
    };

    let action = action.to_owned();
    Ok(Planning {
        analysis: analysis.to_owned(),
        action: if is_search {
            Action::Search(action)
        } else {
            Action::Answer(action)
        },
    })
}

fn malformed(reason: &str) -> PromptError {
    PromptError::MalformedPlanning(reason.to_owned())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarBlock {
    pub system: String,
    pub pairs: Vec<(String, String)>,
}

/// Few-shot conversations for the first and the later iterations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExemplarSet {
    first: ExemplarBlock,
    followup: ExemplarBlock,
}

impl ExemplarSet {
    pub fn builtin() -> Self {
        ExemplarSet::parse(BUILTIN_EXEMPLARS).expect("bundled exemplar asset is valid")
    }

    pub fn builtin_source() -> &'static str {
        BUILTIN_EXEMPLARS
    }

    /// Parses the `@@ <kind> <role>` block format. Every assistant turn must
    /// itself be a valid planning.
    pub fn parse(source: &str) -> Result<Self, PromptError> {
        let mut blocks: Vec<(usize, &str, Role, Vec<&str>)> = Vec::new();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            if line.starts_with("#!") {
                continue;
            }
            if let Some(header) = line.strip_prefix("@@ ") {
                let mut parts = header.split_whitespace();
                let kind = parts.next().unwrap_or_default();
                let role = match parts.next() {
                    Some("system") => Role::System,
                    Some("user") => Role::User,
                    Some("assistant") => Role::Assistant,
                    other => {
                        return Err(PromptError::Asset {
                            line: line_no,
                            reason: format!("unknown role {other:?}"),
                        })
                    }
                };
                blocks.push((line_no, kind, role, Vec::new()));
            } else if let Some(block) = blocks.last_mut() {
                block.3.push(line);
            } else if !line.trim().is_empty() {
                return Err(PromptError::Asset {
                    line: line_no,
                    reason: "text before the first block".into(),
                });
            }
        }

        let mut first = None;
        let mut followup = None;
        let mut current: Option<(&str, ExemplarBlock)> = None;
        let mut pending_user: Option<String> = None;
        for (line_no, kind, role, lines) in blocks {
            let body = lines.join("\n").trim_end().to_owned();
            let asset_err = |reason: String| PromptError::Asset {
                line: line_no,
                reason,
            };
            match role {
                Role::System => {
                    if pending_user.is_some() {
                        return Err(asset_err("user turn without an assistant reply".into()));
                    }
                    if let Some((k, block)) = current.take() {
                        store(k, block, &mut first, &mut followup).map_err(asset_err)?;
                    }
                    current = Some((
                        kind,
                        ExemplarBlock {
                            system: body,
                            pairs: Vec::new(),
                        },
                    ));
                }
                Role::User | Role::Assistant => {
                    let Some((k, block)) = current.as_mut() else {
                        return Err(asset_err("turn before any system block".into()));
                    };
                    if *k != kind {
                        return Err(asset_err(format!("{kind} turn inside a {k} block")));
                    }
                    if role == Role::User {
                        if pending_user.replace(body).is_some() {
                            return Err(asset_err("two user turns in a row".into()));
                        }
                    } else {
                        let user = pending_user.take().ok_or_else(|| {
                            asset_err("assistant turn without a user turn".into())
                        })?;
                        parse_planning(&body).map_err(|e| {
                            asset_err(format!("assistant turn does not parse: {e}"))
                        })?;
                        block.pairs.push((user, body));
                    }
                }
            }
        }
        if pending_user.is_some() {
            return Err(PromptError::Asset {
                line: source.lines().count(),
                reason: "trailing user turn".into(),
            });
        }
        if let Some((k, block)) = current.take() {
            store(k, block, &mut first, &mut followup).map_err(|reason| PromptError::Asset {
                line: source.lines().count(),
                reason,
            })?;
        }
        match (first, followup) {
            (Some(first), Some(followup)) => Ok(ExemplarSet { first, followup }),
            _ => Err(PromptError::Asset {
                line: source.lines().count(),
                reason: "both a first and a followup block are required".into(),
            }),
        }
    }

    pub fn block(&self, kind: PromptKind) -> &ExemplarBlock {
        match kind {
            PromptKind::First => &self.first,
            PromptKind::Followup | PromptKind::ForcibleAnswer => &self.followup,
        }
    }

    pub fn system(&self, kind: PromptKind) -> &str {
        match kind {
            PromptKind::ForcibleAnswer => FORCIBLE_SYSTEM,
            _ => &self.block(kind).system,
        }
    }

    /// Exemplar pairs used for `kind`. The forcible prompt keeps only the
    /// followup exemplars that end in an answer.
    pub fn pairs(&self, kind: PromptKind) -> Vec<&(String, String)> {
        let pairs = &self.block(kind).pairs;
        match kind {
            PromptKind::ForcibleAnswer => pairs
                .iter()
                .filter(|(_, a)| matches!(parse_planning(a), Ok(p) if !p.action.is_search()))
                .collect(),
            _ => pairs.iter().collect(),
        }
    }
}

fn store(
    kind: &str,
    block: ExemplarBlock,
    first: &mut Option<ExemplarBlock>,
    followup: &mut Option<ExemplarBlock>,
) -> Result<(), String> {
    let slot = match kind {
        "first" => first,
        "followup" => followup,
        other => return Err(format!("unknown exemplar kind {other:?}")),
    };
    if slot.replace(block).is_some() {
        return Err(format!("duplicate {kind} block"));
    }
    Ok(())
}

/// Evidence as `Title: text` entries joined by single spaces, in insertion order.
pub fn render_context(evidence: &[Document]) -> String {
    evidence
        .iter()
        .map(|d| format!("{}: {}", d.title.trim(), d.text.trim()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn first_user_message(question: &str) -> String {
    format!(
        "To solve this multi-hop problem: {} What specific information should I search from wiki at first step? Search for one target at first.",
        question.trim()
    )
}

pub fn followup_user_message(evidence: &[Document], question: &str) -> String {
    format!(
        "Context:\n{}\nQuestion:\n{}",
        render_context(evidence),
        question.trim()
    )
}

pub fn build_prompt(
    kind: PromptKind,
    evidence: &[Document],
    question: &str,
    exemplars: &ExemplarSet,
) -> Result<Vec<ChatMessage>, PromptError> {
    if question.trim().is_empty() {
        return Err(PromptError::Precondition("question must not be empty"));
    }
    if kind == PromptKind::First && !evidence.is_empty() {
        return Err(PromptError::Precondition(
            "the first-iteration prompt takes no evidence",
        ));
    }
    let mut messages = vec![ChatMessage::system(exemplars.system(kind))];
    for (user, assistant) in exemplars.pairs(kind) {
        messages.push(ChatMessage::user(user.as_str()));
        messages.push(ChatMessage::assistant(assistant.as_str()));
    }
    messages.push(ChatMessage::user(match kind {
        PromptKind::First => first_user_message(question),
        PromptKind::Followup | PromptKind::ForcibleAnswer => {
            followup_user_message(evidence, question)
        }
    }));
    Ok(messages)
}
