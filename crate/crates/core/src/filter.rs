//! Two-stage rejection filter for startup trajectories.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{parse_record, RecordError, RecordFormat};
use crate::protocol::Trajectory;
use crate::validation::{check_format, check_steps, FormatFailure, FormatVerdict};

pub const MIN_STEPS: usize = 3;
pub const MAX_STEPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthReason {
    None,
    TooShort,
    TooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage1Failure {
    /// A step contract failed one or more predicates.
    Step { step: usize, failed: Vec<String> },
    /// The rollout text is malformed or the answer is missing.
    Format(FormatFailure),
    /// The record could not be read as a trajectory at all.
    Unreadable { message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub accepted: bool,
    pub stage1_failures: Vec<Stage1Failure>,
    pub stage2_reason: LengthReason,
}

impl FilterReport {
    fn new(stage1_failures: Vec<Stage1Failure>, stage2_reason: LengthReason) -> FilterReport {
        FilterReport {
            accepted: stage1_failures.is_empty() && stage2_reason == LengthReason::None,
            stage1_failures,
            stage2_reason,
        }
    }

    fn unparsed(err: &RecordError) -> FilterReport {
        let failures = match err {
            RecordError::Parse(e) => FormatVerdict::from_parse_error(e)
                .failures
                .into_iter()
                .map(Stage1Failure::Format)
                .collect(),
            RecordError::Json(e) => vec![Stage1Failure::Unreadable { message: e.to_string() }],
        };
        FilterReport::new(failures, LengthReason::None)
    }
}

pub fn length_reason(steps: usize) -> LengthReason {
    if steps < MIN_STEPS {
        LengthReason::TooShort
    } else if steps > MAX_STEPS {
        LengthReason::TooLong
    } else {
        LengthReason::None
    }
}

/// Stage 1: every step from 2 on passes its contract checks and the rollout
/// is well-formed with a terminal answer. Stage 2: 3 <= T <= 10.
pub fn filter_trajectory(t: &Trajectory) -> FilterReport {
    let mut failures: Vec<Stage1Failure> = check_steps(t)
        .into_iter()
        .filter(|(_, v)| !v.passed)
        .map(|(step, v)| Stage1Failure::Step {
            step,
            failed: v.failed_checks().into_iter().map(str::to_owned).collect(),
        })
        .collect();
    failures.extend(check_format(t).failures.into_iter().map(Stage1Failure::Format));
    FilterReport::new(failures, length_reason(t.len()))
}

/// A rejected record's report, tagged with its input line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRecord {
    pub line: usize,
    #[serde(flatten)]
    pub report: FilterReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FilterSummary {
    pub total: usize,
    pub accepted: usize,
    pub rejected: usize,
}

/// Partitions a JSONL stream. Accepted lines are copied verbatim to
/// `accepted`; each rejected line yields one report in `reports`. Input
/// order is kept in both outputs.
pub fn filter_corpus<R: BufRead, A: Write, W: Write>(
    input: R,
    format: RecordFormat,
    mut accepted: A,
    mut reports: W,
) -> std::io::Result<FilterSummary> {
    let mut lines = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push((i + 1, line));
        }
    }
    let verdicts: Vec<FilterReport> = lines
        .par_iter()
        .map(|(_, text)| match parse_record(text, format) {
            Ok(t) => filter_trajectory(&t),
            Err(e) => FilterReport::unparsed(&e),
        })
        .collect();
    let mut summary = FilterSummary {
        total: lines.len(),
        ..FilterSummary::default()
    };
    for ((line, text), report) in lines.into_iter().zip(verdicts) {
        if report.accepted {
            summary.accepted += 1;
            writeln!(accepted, "{text}")?;
        } else {
            summary.rejected += 1;
            serde_json::to_writer(&mut reports, &RejectedRecord { line, report })?;
            writeln!(reports)?;
        }
    }
    accepted.flush()?;
    reports.flush()?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Contract, ErrorKind, Granularity, ProxyResponse, RefId, ReferenceItem, Source, Step, Tool, ToolCall};
    use crate::rewards::reward_cite_rollout;

    fn response() -> ProxyResponse {
        ProxyResponse {
            items: (1..=2)
                .map(|i| ReferenceItem {
                    id: RefId(i),
                    source: Source::LocalSearch,
                    granularity: Granularity::Chunk,
                    title: None,
                    url: None,
                    content: format!("chunk {i}"),
                })
                .collect(),
        }
    }

    fn rollout(t_len: usize) -> Trajectory {
        let steps = (1..=t_len)
            .map(|i| {
                let last = i == t_len;
                Step {
                    index: i,
                    think: format!("step {i}"),
                    contract: (i > 1).then(|| Contract::yes(&[1])),
                    tool_call: (!last).then(|| ToolCall::new(Tool::LocalSearch, &[("query", "q")])),
                    tool_response: (!last).then(response),
                }
            })
            .collect();
        Trajectory::new("q", steps, Some("a".into()))
    }

    #[test]
    fn length_boundaries() {
        for (t, ok) in [(2, false), (3, true), (10, true), (11, false)] {
            let r = filter_trajectory(&rollout(t));
            assert_eq!(r.accepted, ok, "T={t}");
            assert!(r.stage1_failures.is_empty());
        }
        assert_eq!(filter_trajectory(&rollout(2)).stage2_reason, LengthReason::TooShort);
        assert_eq!(filter_trajectory(&rollout(11)).stage2_reason, LengthReason::TooLong);
    }

    #[test]
    fn stage1_lists_the_failure() {
        let mut t = rollout(5);
        t.steps[2].contract = Some(Contract {
            helpful: crate::protocol::Helpful::No,
            refs: crate::protocol::Refs::ids(vec![RefId(1)]).unwrap(),
        });
        let r = filter_trajectory(&t);
        assert!(!r.accepted);
        assert_eq!(r.stage2_reason, LengthReason::None);
        assert_eq!(
            r.stage1_failures,
            vec![Stage1Failure::Step {
                step: 3,
                failed: vec!["consistency_ok".into()]
            }]
        );
    }

    #[test]
    fn missing_answer_is_stage1() {
        let mut t = rollout(4);
        t.answer = None;
        let r = filter_trajectory(&t);
        assert!(r.stage1_failures.iter().any(|f| matches!(f, Stage1Failure::Format(ff) if ff.kind == ErrorKind::MissingAnswer)));
    }

    #[test]
    fn accepted_implies_full_cite_reward() {
        for n in 3..=10 {
            let t = rollout(n);
            assert!(filter_trajectory(&t).accepted);
            assert_eq!(reward_cite_rollout(&t), 1.0);
        }
    }

    #[test]
    fn corpus_partition() {
        let mut input = String::new();
        let mut expected_accept = String::new();
        for n in [1, 3, 4, 11, 6] {
            let line = serde_json::to_string(&rollout(n)).unwrap();
            if (3..=10).contains(&n) {
                expected_accept.push_str(&line);
                expected_accept.push('\n');
            }
            input.push_str(&line);
            input.push('\n');
        }
        input.push_str("not json\n");
        let (mut acc, mut rep) = (Vec::new(), Vec::new());
        let s = filter_corpus(input.as_bytes(), RecordFormat::Json, &mut acc, &mut rep).unwrap();
        assert_eq!(s, FilterSummary { total: 6, accepted: 3, rejected: 3 });
        assert_eq!(String::from_utf8(acc).unwrap(), expected_accept);
        let reports: Vec<RejectedRecord> = String::from_utf8(rep)
            .unwrap()
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(reports.iter().map(|r| r.line).collect::<Vec<_>>(), vec![1, 4, 6]);
        assert!(matches!(reports[2].report.stage1_failures[0], Stage1Failure::Unreadable { .. }));
    }

    #[test]
    fn empty_input() {
        let (mut acc, mut rep) = (Vec::new(), Vec::new());
        let s = filter_corpus("".as_bytes(), RecordFormat::Raw, &mut acc, &mut rep).unwrap();
        assert_eq!(s.total, 0);
        assert!(acc.is_empty() && rep.is_empty());
    }
}
