//! Lexical retrieval over a fixed document corpus.
//!
//! Documents are indexed once at load time into an inverted index of
//! `term -> (document, term frequency)` postings and ranked with Okapi BM25.
//! Every ranking covers the whole corpus, zero-score documents included, so
//! the evidence selector can always walk past documents already seen.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

#[derive(Debug, Error, PartialEq)]
pub enum RetrieverError {
    #[error("malformed corpus record at line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("document {id:?} has an empty {field}")]
    EmptyField { id: String, field: &'static str },
    #[error("query has no searchable terms")]
    EmptyQuery,
    #[error("every ranked document is already in the evidence set")]
    Exhausted,
    #[error("index snapshot does not match the documents: {0}")]
    InconsistentSnapshot(String),
    #[error("failed to read corpus: {0}")]
    Io(String),
}

/// Lowercases, drops ASCII punctuation and splits on whitespace.
///
/// Shared by the retriever, the query filter and the lexical relevance model
/// so that all three agree on what a term is.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .filter(|c| !c.is_ascii_punctuation())
        .collect();
    cleaned.split_whitespace().map(str::to_owned).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub title: String,
    pub text: String,
}

impl Document {
    pub fn new(
        id: impl Into<String>,
        title: impl Into<String>,
        text: impl Into<String>,
    ) -> Result<Self, RetrieverError> {
        let doc = Document {
            id: id.into(),
            title: title.into(),
            text: text.into(),
        };
        doc.validate()?;
        Ok(doc)
    }

    fn validate(&self) -> Result<(), RetrieverError> {
        for (field, value) in [
            ("id", &self.id),
            ("title", &self.title),
            ("text", &self.text),
        ] {
            if value.trim().is_empty() {
                return Err(RetrieverError::EmptyField {
                    id: self.id.clone(),
                    field,
                });
            }
        }
        Ok(())
    }

    /// Title and body, the text that is indexed.
    pub fn indexed_text(&self) -> String {
        format!("{} {}", self.title, self.text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Posting {
    pub doc: usize,
    pub tf: u32,
}

/// Serializable view of the inverted index, keyed by document id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSnapshot {
    pub postings: BTreeMap<String, Vec<(String, u32)>>,
    pub doc_lengths: Vec<u32>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    documents: Vec<Document>,
    positions: HashMap<String, usize>,
    index: BTreeMap<String, Vec<Posting>>,
    doc_lengths: Vec<u32>,
    avg_len: f64,
}

#[derive(Deserialize)]
struct CorpusRecord {
    id: String,
    title: String,
    text: String,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self, RetrieverError> {
        let mut positions = HashMap::with_capacity(documents.len());
        for (pos, doc) in documents.iter().enumerate() {
            doc.validate()?;
            if positions.insert(doc.id.clone(), pos).is_some() {
                return Err(RetrieverError::DuplicateId(doc.id.clone()));
            }
        }
        let (index, doc_lengths) = build_index(&documents);
        let avg_len = average(&doc_lengths);
        Ok(Corpus {
            documents,
            positions,
            index,
            doc_lengths,
            avg_len,
        })
    }

    /// Reads the line-delimited corpus format, one `{id, title, text}` object
    /// per non-blank line.
    pub fn load<R: BufRead>(source: R) -> Result<Self, RetrieverError> {
        let mut documents = Vec::new();
        let mut seen = HashSet::new();
        for (idx, line) in source.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| RetrieverError::Io(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CorpusRecord =
                serde_json::from_str(&line).map_err(|e| RetrieverError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                })?;
            let doc = Document::new(record.id, record.title, record.text).map_err(|e| {
                RetrieverError::MalformedRecord {
                    line: line_no,
                    reason: e.to_string(),
                }
            })?;
            if !seen.insert(doc.id.clone()) {
                return Err(RetrieverError::DuplicateId(doc.id));
            }
            documents.push(doc);
        }
        Corpus::from_documents(documents)
    }

    pub fn load_path(path: &std::path::Path) -> Result<Self, RetrieverError> {
        let file = std::fs::File::open(path)
            .map_err(|e| RetrieverError::Io(format!("{}: {e}", path.display())))?;
        Corpus::load(std::io::BufReader::new(file))
    }

    /// Rebuilds a corpus from its documents and a previously exported index,
    /// rejecting snapshots that disagree with a fresh build.
    pub fn from_snapshot(
        documents: Vec<Document>,
        snapshot: &IndexSnapshot,
    ) -> Result<Self, RetrieverError> {
        let mut corpus = Corpus::from_documents(documents)?;
        let mut index: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (term, postings) in &snapshot.postings {
            let mut resolved = Vec::with_capacity(postings.len());
            for (id, tf) in postings {
                let doc = *corpus.positions.get(id).ok_or_else(|| {
                    RetrieverError::InconsistentSnapshot(format!("unknown document {id:?}"))
                })?;
                resolved.push(Posting { doc, tf: *tf });
            }
            index.insert(term.clone(), resolved);
        }
        if index != corpus.index || snapshot.doc_lengths != corpus.doc_lengths {
            return Err(RetrieverError::InconsistentSnapshot(
                "postings differ from a rebuild".into(),
            ));
        }
        corpus.index = index;
        corpus.doc_lengths = snapshot.doc_lengths.clone();
        corpus.avg_len = average(&corpus.doc_lengths);
        Ok(corpus)
    }

    pub fn snapshot(&self) -> IndexSnapshot {
        let postings = self
            .index
            .iter()
            .map(|(term, list)| {
                let list = list
                    .iter()
                    .map(|p| (self.documents[p.doc].id.clone(), p.tf))
                    .collect();
                (term.clone(), list)
            })
            .collect();
        IndexSnapshot {
            postings,
            doc_lengths: self.doc_lengths.clone(),
        }
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Document> {
        self.positions.get(id).map(|&pos| &self.documents[pos])
    }

    pub fn average_length(&self) -> f64 {
        self.avg_len
    }

    pub fn postings(&self, term: &str) -> &[Posting] {
        self.index.get(term).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Scores every document with BM25 and returns them best first.
    ///
    /// Each distinct query term contributes once. The IDF form
    /// `ln(1 + (N - df + 0.5) / (df + 0.5))` keeps all scores non-negative.
    pub fn rank(&self, query: &str) -> Result<RankedList, RetrieverError> {
        let mut terms = tokenize(query);
        if terms.is_empty() {
            return Err(RetrieverError::EmptyQuery);
        }
        terms.sort();
        terms.dedup();

        let n = self.documents.len() as f64;
        let mut scores = vec![0.0f64; self.documents.len()];
        for term in &terms {
            let postings = self.postings(term);
            if postings.is_empty() {
                continue;
            }
            let df = postings.len() as f64;
            let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
            for posting in postings {
                let tf = f64::from(posting.tf);
                let len = f64::from(self.doc_lengths[posting.doc]);
                let norm = BM25_K1 * (1.0 - BM25_B + BM25_B * len / self.avg_len);
                scores[posting.doc] += idf * tf * (BM25_K1 + 1.0) / (tf + norm);
            }
        }

        let mut entries: Vec<RankedEntry> = self
            .documents
            .iter()
            .zip(scores)
            .map(|(doc, score)| RankedEntry {
                doc_id: doc.id.clone(),
                score,
            })
            .collect();
        entries.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        Ok(RankedList {
            query: query.to_owned(),
            entries,
        })
    }
}

fn build_index(documents: &[Document]) -> (BTreeMap<String, Vec<Posting>>, Vec<u32>) {
    let mut index: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
    let mut lengths = Vec::with_capacity(documents.len());
    for (pos, doc) in documents.iter().enumerate() {
        let tokens = tokenize(&doc.indexed_text());
        lengths.push(tokens.len() as u32);
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for token in tokens {
            *counts.entry(token).or_default() += 1;
        }
        for (term, tf) in counts {
            index
                .entry(term)
                .or_default()
                .push(Posting { doc: pos, tf });
        }
    }
    (index, lengths)
}

fn average(lengths: &[u32]) -> f64 {
    if lengths.is_empty() {
        return 0.0;
    }
    lengths.iter().map(|&l| f64::from(l)).sum::<f64>() / lengths.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub doc_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.doc_id.as_str())
    }

    /// 1-based rank of the first entry whose id satisfies `pred`.
    pub fn first_rank_where(&self, mut pred: impl FnMut(&str) -> bool) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| pred(&e.doc_id))
            .map(|p| p + 1)
    }
}

/// Highest-ranked document that is not yet part of the evidence.
pub fn select_new_evidence<'a>(
    ranked: &'a RankedList,
    evidence: &HashSet<String>,
) -> Result<&'a str, RetrieverError> {
    ranked
        .ids()
        .find(|id| !evidence.contains(*id))
        .ok_or(RetrieverError::Exhausted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[(&str, &str)]) -> Corpus {
        let docs = docs
            .iter()
            .map(|(id, text)| Document::new(*id, format!("t{id}"), *text).unwrap())
            .collect();
        Corpus::from_documents(docs).unwrap()
    }

    #[test]
    fn tokenizer_lowercases_and_strips_punctuation() {
        assert_eq!(
            tokenize("Richmond's  FATHER, (1639)!"),
            vec!["richmonds", "father", "1639"]
        );
        assert!(tokenize(" .,;").is_empty());
    }

    #[test]
    fn loads_three_lines() {
        let src = concat!(
            r#"{"id":"d1","title":"A","text":"alpha beta"}"#,
            "\n",
            r#"{"id":"d2","title":"B","text":"gamma delta"}"#,
            "\n",
            r#"{"id":"d3","title":"C","text":"alpha"}"#,
            "\n"
        );
        let corpus = Corpus::load(src.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.get("d2").unwrap().title, "B");
    }

    #[test]
    fn missing_field_reports_line() {
        let src = concat!(
            r#"{"id":"d1","title":"A","text":"alpha beta"}"#,
            "\n",
            r#"{"id":"d2","title":"B"}"#,
            "\n"
        );
        match Corpus::load(src.as_bytes()) {
            Err(RetrieverError::MalformedRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let src = concat!(
            r#"{"id":"d1","title":"A","text":"alpha"}"#,
            "\n",
            r#"{"id":"d1","title":"B","text":"beta"}"#,
        );
        assert_eq!(
            Corpus::load(src.as_bytes()).unwrap_err(),
            RetrieverError::DuplicateId("d1".into())
        );
    }

    #[test]
    fn blank_title_rejected() {
        assert!(matches!(
            Document::new("d1", "  ", "x"),
            Err(RetrieverError::EmptyField { field: "title", .. })
        ));
    }

    #[test]
    fn gamma_ranks_its_document_first() {
        let c = corpus(&[("d1", "alpha beta"), ("d2", "gamma delta"), ("d3", "alpha")]);
        let ranked = c.rank("gamma").unwrap();
        assert_eq!(ranked.entries[0].doc_id, "d2");
        assert!(ranked.entries[0].score > 0.0);
        assert_eq!(ranked.entries.len(), 3);
    }

    #[test]
    fn unmatched_query_falls_back_to_id_order() {
        let c = corpus(&[("d3", "alpha"), ("d1", "beta"), ("d2", "gamma")]);
        let ranked = c.rank("omega").unwrap();
        let ids: Vec<_> = ranked.ids().collect();
        assert_eq!(ids, ["d1", "d2", "d3"]);
        assert!(ranked.entries.iter().all(|e| e.score == 0.0));
    }

    #[test]
    fn empty_query_rejected() {
        let c = corpus(&[("d1", "alpha")]);
        assert_eq!(c.rank("").unwrap_err(), RetrieverError::EmptyQuery);
        assert_eq!(c.rank("?!").unwrap_err(), RetrieverError::EmptyQuery);
    }

    fn ranked(ids: &[&str]) -> RankedList {
        RankedList {
            query: "q".into(),
            entries: ids
                .iter()
                .map(|id| RankedEntry {
                    doc_id: (*id).into(),
                    score: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn selects_first_unseen() {
        let list = ranked(&["d1", "d2"]);
        let seen: HashSet<String> = ["d1".to_string()].into();
        assert_eq!(select_new_evidence(&list, &seen).unwrap(), "d2");
        assert_eq!(select_new_evidence(&list, &HashSet::new()).unwrap(), "d1");
    }

    #[test]
    fn exhausted_when_all_seen() {
        let list = ranked(&["d1"]);
        let seen: HashSet<String> = ["d1".to_string()].into();
        assert_eq!(
            select_new_evidence(&list, &seen).unwrap_err(),
            RetrieverError::Exhausted
        );
    }

    #[test]
    fn snapshot_round_trip() {
        let c = corpus(&[("d1", "alpha beta alpha"), ("d2", "beta gamma")]);
        let json = serde_json::to_string(&c.snapshot()).unwrap();
        let snap: IndexSnapshot = serde_json::from_str(&json).unwrap();
        let reloaded = Corpus::from_snapshot(c.documents().to_vec(), &snap).unwrap();
        assert_eq!(reloaded.rank("alpha").unwrap(), c.rank("alpha").unwrap());
    }

    #[test]
    fn tampered_snapshot_rejected() {
        let c = corpus(&[("d1", "alpha beta"), ("d2", "beta")]);
        let mut snap = c.snapshot();
        snap.postings.get_mut("beta").unwrap()[0].1 = 7;
        assert!(matches!(
            Corpus::from_snapshot(c.documents().to_vec(), &snap),
            Err(RetrieverError::InconsistentSnapshot(_))
        ));
    }
}
