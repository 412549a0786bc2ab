//! Helpfulness-probability and judge oracles.
//!
//! The reward code only sees the two traits. `stub` implementations are
//! deterministic lexical models; `remote` implementations forward each query
//! to an external service over a one-request-one-response JSON exchange.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::protocol::{ProxyResponse, ReferenceItem, Step};
use crate::registry::{self, Registry, RegistryError, Settings};
use crate::text;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("oracle unreachable: {0}")]
    Unreachable(String),
    #[error("oracle protocol error: {0}")]
    Protocol(String),
    #[error("oracle returned {value}, outside {expected}")]
    OutOfRange { value: f64, expected: &'static str },
}

/// What the helpfulness oracle sees when asked for p(yes) at a contract position.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct HelpfulnessContext<'a> {
    pub question: &'a str,
    /// Index of the step whose contract is being probed.
    pub step_index: usize,
    /// Steps preceding the probed step.
    pub prefix: &'a [Step],
    /// Candidate evidence (real or perturbed) the verdict conditions on.
    pub response: &'a ProxyResponse,
}

/// Probability of the `yes` verdict given the evidence.
pub trait HelpfulnessOracle: Send + Sync {
    fn p_yes(&self, ctx: &HelpfulnessContext<'_>) -> Result<f64, OracleError>;
}

/// Three-point score of whether `answer` follows from `evidence`.
pub trait JudgeOracle: Send + Sync {
    fn judge(&self, question: &str, answer: &str, evidence: &[ReferenceItem]) -> Result<f64, OracleError>;
}

/// Queries `oracle` and rejects values outside [0, 1].
pub fn checked_p_yes(oracle: &dyn HelpfulnessOracle, ctx: &HelpfulnessContext<'_>) -> Result<f64, OracleError> {
    let value = oracle.p_yes(ctx)?;
    if value.is_finite() && (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(OracleError::OutOfRange {
            value,
            expected: "[0, 1]",
        })
    }
}

/// Queries `judge` and rejects anything off the {0, 0.5, 1} scale.
pub fn checked_judge(judge: &dyn JudgeOracle, question: &str, answer: &str, evidence: &[ReferenceItem]) -> Result<f64, OracleError> {
    let value = judge.judge(question, answer, evidence)?;
    if value == 0.0 || value == 0.5 || value == 1.0 {
        Ok(value)
    } else {
        Err(OracleError::OutOfRange {
            value,
            expected: "{0, 0.5, 1}",
        })
    }
}

/// Lexical stand-in for a grounded model's p(yes).
///
/// `p = base + (ceiling - base) * overlap`, where `overlap` is the fraction of
/// question terms found anywhere in the response. Responses with fewer than
/// `min_informative_terms` distinct terms (e.g. blanked evidence) score `floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapOracle {
    pub floor: f64,
    pub base: f64,
    pub ceiling: f64,
    pub min_informative_terms: usize,
}

impl Default for OverlapOracle {
    fn default() -> Self {
        OverlapOracle {
            floor: 0.02,
            base: 0.1,
            ceiling: 0.95,
            min_informative_terms: 2,
        }
    }
}

impl OverlapOracle {
    pub fn probability(&self, question: &str, response: &ProxyResponse) -> f64 {
        let evidence: BTreeSet<String> = response
            .items
            .iter()
            .flat_map(|item| text::terms(&item.content))
            .collect();
        if evidence.len() < self.min_informative_terms {
            return self.floor;
        }
        let overlap = text::overlap_fraction(&text::terms(question), &evidence);
        self.base + (self.ceiling - self.base) * overlap
    }
}

impl HelpfulnessOracle for OverlapOracle {
    fn p_yes(&self, ctx: &HelpfulnessContext<'_>) -> Result<f64, OracleError> {
        Ok(self.probability(ctx.question, ctx.response))
    }
}

/// Returns the same probability for every query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantOracle(pub f64);

impl HelpfulnessOracle for ConstantOracle {
    fn p_yes(&self, _ctx: &HelpfulnessContext<'_>) -> Result<f64, OracleError> {
        Ok(self.0)
    }
}

/// Lexical judge: 1 when every answer token occurs in the evidence, 0.5 when
/// some do, 0 when none do or the evidence is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapJudge;

impl JudgeOracle for OverlapJudge {
    fn judge(&self, _question: &str, answer: &str, evidence: &[ReferenceItem]) -> Result<f64, OracleError> {
        let answer_tokens: BTreeSet<String> = text::tokens(answer).into_iter().collect();
        if evidence.is_empty() || answer_tokens.is_empty() {
            return Ok(0.0);
        }
        let evidence_tokens: BTreeSet<String> =
            evidence.iter().flat_map(|item| text::tokens(&item.content)).collect();
        let hits = answer_tokens.iter().filter(|t| evidence_tokens.contains(*t)).count();
        Ok(if hits == answer_tokens.len() {
            1.0
        } else if hits > 0 {
            0.5
        } else {
            0.0
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConstantJudge(pub f64);

impl JudgeOracle for ConstantJudge {
    fn judge(&self, _question: &str, _answer: &str, _evidence: &[ReferenceItem]) -> Result<f64, OracleError> {
        Ok(self.0)
    }
}

/// Wire request sent to a remote oracle or judge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRequest {
    pub kind: RequestKind,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<Vec<ReferenceItem>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Helpfulness,
    Judge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleResponse {
    pub value: f64,
}

/// Client for an oracle service reachable over TCP.
///
/// Each query opens a connection, writes one JSON request followed by a
/// newline, and reads one JSON response line `{"value": ...}`.
#[derive(Debug, Clone)]
pub struct RemoteOracle {
    pub addr: String,
    pub timeout: Duration,
}

impl RemoteOracle {
    pub fn new(addr: impl Into<String>) -> RemoteOracle {
        RemoteOracle {
            addr: addr.into(),
            timeout: Duration::from_secs(30),
        }
    }

    pub fn exchange(&self, request: &OracleRequest) -> Result<f64, OracleError> {
        let mut stream = TcpStream::connect(&self.addr).map_err(|e| OracleError::Unreachable(format!("{}: {e}", self.addr)))?;
        stream.set_read_timeout(Some(self.timeout)).ok();
        stream.set_write_timeout(Some(self.timeout)).ok();
        let mut line = serde_json::to_string(request).map_err(|e| OracleError::Protocol(e.to_string()))?;
        line.push('\n');
        stream
            .write_all(line.as_bytes())
            .and_then(|_| stream.flush())
            .map_err(|e| OracleError::Unreachable(e.to_string()))?;
        let mut reply = String::new();
        BufReader::new(stream)
            .read_line(&mut reply)
            .map_err(|e| OracleError::Unreachable(e.to_string()))?;
        if reply.trim().is_empty() {
            return Err(OracleError::Protocol("empty response".into()));
        }
        let response: OracleResponse = serde_json::from_str(reply.trim()).map_err(|e| OracleError::Protocol(e.to_string()))?;
        Ok(response.value)
    }
}

impl HelpfulnessOracle for RemoteOracle {
    fn p_yes(&self, ctx: &HelpfulnessContext<'_>) -> Result<f64, OracleError> {
        let context = serde_json::json!({
            "step_index": ctx.step_index,
            "prefix": ctx.prefix,
            "response": ctx.response,
        });
        self.exchange(&OracleRequest {
            kind: RequestKind::Helpfulness,
            question: ctx.question.to_owned(),
            answer: None,
            context: Some(context),
            evidence: None,
        })
    }
}

impl JudgeOracle for RemoteOracle {
    fn judge(&self, question: &str, answer: &str, evidence: &[ReferenceItem]) -> Result<f64, OracleError> {
        self.exchange(&OracleRequest {
            kind: RequestKind::Judge,
            question: question.to_owned(),
            answer: Some(answer.to_owned()),
            context: None,
            evidence: Some(evidence.to_vec()),
        })
    }
}

/// Helpfulness oracles by name: `stub` (settings `floor`, `base`, `ceiling`), `remote` (setting `addr`).
pub fn helpfulness_registry() -> Registry<dyn HelpfulnessOracle> {
    let mut reg: Registry<dyn HelpfulnessOracle> = Registry::new("helpfulness oracle");
    reg.register("stub", |s: &Settings| {
        let d = OverlapOracle::default();
        Ok(Box::new(OverlapOracle {
            floor: registry::parsed("helpfulness oracle", "stub", s, "floor", d.floor)?,
            base: registry::parsed("helpfulness oracle", "stub", s, "base", d.base)?,
            ceiling: registry::parsed("helpfulness oracle", "stub", s, "ceiling", d.ceiling)?,
            min_informative_terms: d.min_informative_terms,
        }))
    });
    reg.register("remote", |s: &Settings| {
        let addr = registry::required("helpfulness oracle", "remote", s, "addr")?;
        Ok(Box::new(RemoteOracle::new(addr)))
    });
    reg
}

/// Judges by name: `stub`, `remote` (setting `addr`).
pub fn judge_registry() -> Registry<dyn JudgeOracle> {
    let mut reg: Registry<dyn JudgeOracle> = Registry::new("judge");
    reg.register("stub", |_: &Settings| Ok(Box::new(OverlapJudge)));
    reg.register("remote", |s: &Settings| -> Result<Box<dyn JudgeOracle>, RegistryError> {
        let addr = registry::required("judge", "remote", s, "addr")?;
        Ok(Box::new(RemoteOracle::new(addr)))
    });
    reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Granularity, RefId, Source};
    use std::net::TcpListener;
    use std::thread;

    fn item(id: u32, content: &str) -> ReferenceItem {
        ReferenceItem {
            id: RefId(id),
            source: Source::LocalSearch,
            granularity: Granularity::Chunk,
            title: None,
            url: None,
            content: content.into(),
        }
    }

    fn ctx<'a>(question: &'a str, response: &'a ProxyResponse) -> HelpfulnessContext<'a> {
        HelpfulnessContext {
            question,
            step_index: 2,
            prefix: &[],
            response,
        }
    }

    #[test]
    fn overlap_oracle_is_monotone_in_overlap() {
        let o = OverlapOracle::default();
        let q = "capital of France";
        let none = ProxyResponse { items: vec![item(1, "Bananas grow in tropical climates.")] };
        let half = ProxyResponse { items: vec![item(1, "France is in Europe.")] };
        let full = ProxyResponse { items: vec![item(1, "Paris is the capital of France.")] };
        let (p0, p1, p2) = (o.probability(q, &none), o.probability(q, &half), o.probability(q, &full));
        assert!(p0 < p1 && p1 < p2);
        assert_eq!(p0, o.base);
        assert_eq!(p2, o.ceiling);
    }

    #[test]
    fn blanked_evidence_hits_floor() {
        let o = OverlapOracle::default();
        let blank = ProxyResponse { items: vec![item(1, "content"), item(2, "content")] };
        assert_eq!(o.probability("capital of France", &blank), o.floor);
        assert_eq!(o.probability("capital of France", &ProxyResponse::default()), o.floor);
    }

    #[test]
    fn judge_scale() {
        let ev = [item(1, "Paris is the capital of France.")];
        assert_eq!(OverlapJudge.judge("q", "Paris", &ev).unwrap(), 1.0);
        assert_eq!(OverlapJudge.judge("q", "Paris Texas", &ev).unwrap(), 0.5);
        assert_eq!(OverlapJudge.judge("q", "London", &ev).unwrap(), 0.0);
        assert_eq!(OverlapJudge.judge("q", "Paris", &[]).unwrap(), 0.0);
    }

    #[test]
    fn out_of_scale_values_are_errors() {
        assert!(matches!(checked_judge(&ConstantJudge(0.7), "q", "a", &[]), Err(OracleError::OutOfRange { .. })));
        assert_eq!(checked_judge(&ConstantJudge(0.5), "q", "a", &[]).unwrap(), 0.5);
        let r = ProxyResponse::default();
        assert!(checked_p_yes(&ConstantOracle(1.2), &ctx("q", &r)).is_err());
        assert!(checked_p_yes(&ConstantOracle(f64::NAN), &ctx("q", &r)).is_err());
    }

    fn serve_once(reply: &'static str) -> (String, thread::JoinHandle<OracleRequest>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let handle = thread::spawn(move || {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let mut out = stream;
            out.write_all(reply.as_bytes()).unwrap();
            serde_json::from_str(line.trim()).unwrap()
        });
        (addr, handle)
    }

    #[test]
    fn remote_helpfulness_round_trip() {
        let (addr, handle) = serve_once("{\"value\": 0.25}\n");
        let r = ProxyResponse { items: vec![item(1, "x")] };
        let v = RemoteOracle::new(addr).p_yes(&ctx("why?", &r)).unwrap();
        assert_eq!(v, 0.25);
        let req = handle.join().unwrap();
        assert_eq!(req.kind, RequestKind::Helpfulness);
        assert_eq!(req.question, "why?");
        assert_eq!(req.context.unwrap()["step_index"], 2);
    }

    #[test]
    fn remote_judge_round_trip() {
        let (addr, handle) = serve_once("{\"value\": 1}\n");
        let v = RemoteOracle::new(addr).judge("q", "a", &[item(3, "e")]).unwrap();
        assert_eq!(v, 1.0);
        let req = handle.join().unwrap();
        assert_eq!(req.kind, RequestKind::Judge);
        assert_eq!(req.answer.as_deref(), Some("a"));
        assert_eq!(req.evidence.unwrap()[0].id, RefId(3));
    }

    #[test]
    fn remote_garbage_is_protocol_error() {
        let (addr, _h) = serve_once("not json\n");
        assert!(matches!(RemoteOracle::new(addr).judge("q", "a", &[]), Err(OracleError::Protocol(_))));
    }

    #[test]
    fn unreachable_remote() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        assert!(matches!(RemoteOracle::new(addr).judge("q", "a", &[]), Err(OracleError::Unreachable(_))));
    }

    #[test]
    fn registries_resolve_names() {
        let mut s = Settings::new();
        assert!(helpfulness_registry().build("stub", &s).is_ok());
        assert!(helpfulness_registry().build("remote", &s).is_err());
        s.insert("addr".into(), "127.0.0.1:1".into());
        assert!(judge_registry().build("remote", &s).is_ok());
        assert!(judge_registry().build("gpt", &s).is_err());
    }
}
