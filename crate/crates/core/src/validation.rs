//! Step-contract predicates and trajectory format checks.

use serde::{Deserialize, Serialize};

use crate::protocol::{parse_trajectory, ErrorKind, Helpful, ProxyResponse, Refs, Step, Tag, Tool, Trajectory};

/// Outcome of the three step-contract predicates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepVerdict {
    pub parse_ok: bool,
    pub consistency_ok: bool,
    pub ids_valid: bool,
    pub passed: bool,
}

impl StepVerdict {
    pub fn new(parse_ok: bool, consistency_ok: bool, ids_valid: bool) -> StepVerdict {
        StepVerdict {
            parse_ok,
            consistency_ok,
            ids_valid,
            passed: parse_ok && consistency_ok && ids_valid,
        }
    }

    /// Names of the predicates that failed.
    pub fn failed_checks(&self) -> Vec<&'static str> {
        [
            (self.parse_ok, "parse_ok"),
            (self.consistency_ok, "consistency_ok"),
            (self.ids_valid, "ids_valid"),
        ]
        .into_iter()
        .filter(|(ok, _)| !ok)
        .map(|(_, name)| name)
        .collect()
    }
}

/// Evaluates a step (index >= 2) against the response its contract cites.
pub fn check_step(step: &Step, prior_response: Option<&ProxyResponse>) -> StepVerdict {
    let Some(contract) = &step.contract else {
        return StepVerdict::new(false, false, false);
    };
    let parse_ok = !crate::protocol::contains_tag(&step.think)
        && step.tool_call.is_some() == step.tool_response.is_some();
    let consistency_ok = match contract.helpful {
        Helpful::No => contract.refs.is_null(),
        Helpful::Yes => !contract.refs.is_null(),
    };
    let ids_valid = match (&contract.refs, prior_response) {
        (Refs::Null, _) => true,
        (Refs::Ids(_), None) => false,
        (Refs::Ids(ids), Some(response)) => ids.iter().all(|id| response.contains(*id)),
    };
    StepVerdict::new(parse_ok, consistency_ok, ids_valid)
}

/// Verdicts for steps 2..=T in order.
pub fn check_steps(t: &Trajectory) -> Vec<(usize, StepVerdict)> {
    t.steps
        .iter()
        .skip(1)
        .map(|step| (step.index, check_step(step, t.prior_response(step.index))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatFailure {
    pub step: usize,
    pub tag: Tag,
    pub kind: ErrorKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormatVerdict {
    pub valid: bool,
    pub failures: Vec<FormatFailure>,
    /// Non-fatal findings, such as tool arguments outside the declared schema.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl FormatVerdict {
    fn from_failures(failures: Vec<FormatFailure>, warnings: Vec<String>) -> FormatVerdict {
        FormatVerdict {
            valid: failures.is_empty(),
            failures,
            warnings,
        }
    }

    /// Format verdict for rollout text that could not be parsed.
    pub fn from_parse_error(err: &crate::protocol::ParseError) -> FormatVerdict {
        FormatVerdict::from_failures(
            vec![FormatFailure {
                step: err.step.unwrap_or(0),
                tag: err.tag.unwrap_or(Tag::Think),
                kind: err.kind,
            }],
            Vec::new(),
        )
    }
}

fn embedded_tag_kind(text: &str) -> Option<ErrorKind> {
    text.match_indices('<').find_map(|(i, _)| {
        crate::protocol::tag_shape(text, i).map(|(name, _, _)| {
            if Tag::from_name(name).is_some() {
                ErrorKind::OutOfOrder
            } else {
                ErrorKind::UnknownTag
            }
        })
    })
}

/// Syntactic validity of the whole rollout; valid only if it ends in an answer.
pub fn check_format(t: &Trajectory) -> FormatVerdict {
    let mut failures = Vec::new();
    let mut warnings = Vec::new();
    let mut fail = |step: usize, tag: Tag, kind: ErrorKind| failures.push(FormatFailure { step, tag, kind });

    if let Some(raw) = &t.raw_text {
        if let Err(err) = parse_trajectory(raw) {
            let v = FormatVerdict::from_parse_error(&err);
            return v;
        }
    }
    if t.steps.is_empty() {
        fail(0, Tag::Think, ErrorKind::OutOfOrder);
    }

    let last = t.steps.len();
    for (i, step) in t.steps.iter().enumerate() {
        let index = i + 1;
        if step.index != index {
            fail(index, Tag::Think, ErrorKind::IndexGap);
        }
        if let Some(kind) = embedded_tag_kind(&step.think) {
            fail(index, Tag::Think, kind);
        }
        if index >= 2 && step.contract.is_none() {
            fail(index, Tag::Think, ErrorKind::MissingContract);
        }
        match &step.tool_call {
            Some(call) => {
                if let Tool::Other(_) = call.tool {
                    fail(index, Tag::ToolCall, ErrorKind::UnknownTool);
                } else if !call.missing_keys().is_empty() {
                    fail(index, Tag::ToolCall, ErrorKind::BadArguments);
                }
                for key in call.unknown_keys() {
                    warnings.push(format!("step {index}: {} argument `{key}` is not in the schema", call.tool));
                }
                if step.tool_response.is_none() {
                    fail(index, Tag::ToolResponse, ErrorKind::MissingResponse);
                }
                if index == last && t.answer.is_some() {
                    fail(index, Tag::Answer, ErrorKind::OutOfOrder);
                }
            }
            None => {
                if step.tool_response.is_some() {
                    fail(index, Tag::ToolResponse, ErrorKind::UnexpectedResponse);
                }
                if index < last {
                    fail(index, Tag::ToolCall, ErrorKind::MissingToolCall);
                }
            }
        }
        if let Some(response) = &step.tool_response {
            let mut seen = std::collections::BTreeSet::new();
            for item in &response.items {
                if !seen.insert(item.id) {
                    fail(index, Tag::ToolResponse, ErrorKind::DuplicateId);
                }
                if item.source.granularity() != item.granularity {
                    fail(index, Tag::ToolResponse, ErrorKind::GranularityMismatch);
                }
            }
        }
    }
    match &t.answer {
        None => fail(last, Tag::Answer, ErrorKind::MissingAnswer),
        Some(answer) => {
            if let Some(kind) = embedded_tag_kind(answer) {
                fail(last, Tag::Answer, kind);
            }
        }
    }
    FormatVerdict::from_failures(failures, warnings)
}

/// Format verdict straight from rollout text.
pub fn check_format_raw(query: &str, raw: &str) -> FormatVerdict {
    match Trajectory::from_raw(query, raw) {
        Ok(t) => check_format(&t),
        Err(err) => FormatVerdict::from_parse_error(&err),
    }
}
