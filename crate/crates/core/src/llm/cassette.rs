//! Line-delimited cassettes: `{seq, digest, completions}` per call.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    approximate_usage, request_digest, ChatBackend, ChatMessage, Completion, GatewayError,
    SamplingParams,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CassetteRecord {
    pub seq: usize,
    pub digest: String,
    pub completions: Vec<String>,
}

/// Serves recorded completions strictly in call order.
#[derive(Debug, Clone)]
pub struct ReplayBackend {
    records: Vec<CassetteRecord>,
    cursor: usize,
}

impl ReplayBackend {
    pub fn new(records: Vec<CassetteRecord>) -> Result<Self, GatewayError> {
        for (pos, record) in records.iter().enumerate() {
            if record.seq != pos {
                return Err(GatewayError::CassetteMismatch {
                    seq: pos,
                    reason: format!("record out of order (seq {})", record.seq),
                });
            }
        }
        Ok(ReplayBackend { records, cursor: 0 })
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, GatewayError> {
        let mut records = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::CassetteMismatch {
                seq: records.len(),
                reason: format!("unreadable cassette: {e}"),
            })?;
            if line.trim().is_empty() {
                continue;
            }
            let record: CassetteRecord =
                serde_json::from_str(&line).map_err(|e| GatewayError::CassetteMismatch {
                    seq: records.len(),
                    reason: format!("unreadable cassette line {}: {e}", idx + 1),
                })?;
            records.push(record);
        }
        ReplayBackend::new(records)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::File::open(path).map_err(|e| GatewayError::CassetteMismatch {
            seq: 0,
            reason: format!("unreadable cassette {}: {e}", path.display()),
        })?;
        ReplayBackend::from_reader(std::io::BufReader::new(file))
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.cursor
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        let seq = self.cursor;
        let record = self
            .records
            .get(seq)
            .ok_or_else(|| GatewayError::CassetteMismatch {
                seq,
                reason: format!("cassette exhausted after {} record(s)", self.records.len()),
            })?;
        let digest = request_digest(messages, params);
        if digest != record.digest {
            return Err(GatewayError::CassetteMismatch {
                seq,
                reason: format!(
                    "request digest {digest} differs from recorded {}",
                    record.digest
                ),
            });
        }
        if record.completions.len() != params.n() {
            return Err(GatewayError::CassetteMismatch {
                seq,
                reason: format!(
                    "recorded {} completions, request asks for {}",
                    record.completions.len(),
                    params.n()
                ),
            });
        }
        self.cursor += 1;
        Ok(approximate_usage(messages, record.completions.clone()))
    }
}

/// Wraps a live backend and appends every exchange to a cassette sink.
pub struct RecordingBackend<B, W> {
    inner: B,
    sink: W,
    seq: usize,
}

impl<B: ChatBackend, W: Write + Send> RecordingBackend<B, W> {
    pub fn new(inner: B, sink: W) -> Self {
        RecordingBackend {
            inner,
            sink,
            seq: 0,
        }
    }

    pub fn recorded(&self) -> usize {
        self.seq
    }

    pub fn into_parts(self) -> (B, W) {
        (self.inner, self.sink)
    }
}

impl<B: ChatBackend, W: Write + Send> ChatBackend for RecordingBackend<B, W> {
    fn complete(
        &mut self,
        messages: &[ChatMessage],
        params: &SamplingParams,
    ) -> Result<Vec<Completion>, GatewayError> {
        let completions = self.inner.complete(messages, params)?;
        let record = CassetteRecord {
            seq: self.seq,
            digest: request_digest(messages, params),
            completions: completions.iter().map(|c| c.text.clone()).collect(),
        };
        let mut line =
            serde_json::to_string(&record).map_err(|e| GatewayError::Sink(e.to_string()))?;
        line.push('\n');
        self.sink
            .write_all(line.as_bytes())
            .and_then(|_| self.sink.flush())
            .map_err(|e| GatewayError::Sink(e.to_string()))?;
        self.seq += 1;
        Ok(completions)
    }
}
