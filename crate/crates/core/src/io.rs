//! JSONL trajectory records.
//!
//! A record is either a serialized [`Trajectory`] or, in raw mode,
//! `{"query": ..., "raw": ...}` holding tagged rollout text.

use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::protocol::{ParseError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RecordFormat {
    #[default]
    Json,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawRecord {
    #[serde(default)]
    pub query: String,
    pub raw: String,
}

#[derive(Debug, thiserror::Error)]
pub enum RecordError {
    #[error("not a trajectory record: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Parse(#[from] ParseError),
}

pub fn parse_record(line: &str, format: RecordFormat) -> Result<Trajectory, RecordError> {
    match format {
        RecordFormat::Json => Ok(serde_json::from_str(line)?),
        RecordFormat::Raw => {
            let record: RawRecord = serde_json::from_str(line)?;
            Ok(Trajectory::from_raw(record.query, &record.raw)?)
        }
    }
}

/// One input line and its parse outcome.
#[derive(Debug)]
pub struct Record {
    /// 1-based line number.
    pub line: usize,
    pub text: String,
    pub parsed: Result<Trajectory, RecordError>,
}

/// Reads every non-blank line.
pub fn read_records<R: BufRead>(input: R, format: RecordFormat) -> std::io::Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let text = line?;
        if text.trim().is_empty() {
            continue;
        }
        let parsed = parse_record(&text, format);
        out.push(Record { line: i + 1, text, parsed });
    }
    Ok(out)
}
