use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use super::{
    Contract, Granularity, Helpful, Layout, ProxyResponse, RefId, ReferenceItem, Refs, Source, Span,
    Step, StepLayout, Tag, Tool, ToolCall, Trajectory,
};

/// Defect categories shared by the parser and the format validator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// An element was opened and not closed before the next tag or end of text.
    Unclosed,
    MalformedContract,
    UnknownTag,
    OutOfOrder,
    /// Non-whitespace text between elements.
    StrayText,
    MalformedToolCall,
    MalformedResponse,
    MissingContract,
    MissingToolCall,
    MissingResponse,
    UnexpectedResponse,
    MissingAnswer,
    UnknownTool,
    BadArguments,
    GranularityMismatch,
    DuplicateId,
    IndexGap,
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{kind} at byte {offset}{}: {message}", step_suffix(*.step, *.tag))]
pub struct ParseError {
    /// First offending byte offset.
    pub offset: usize,
    pub kind: ErrorKind,
    /// Step being parsed when the error occurred (1-based).
    pub step: Option<usize>,
    pub tag: Option<Tag>,
    pub message: String,
}

fn step_suffix(step: Option<usize>, tag: Option<Tag>) -> String {
    match (step, tag) {
        (Some(s), Some(t)) => format!(" (step {s}, <{t}>)"),
        (Some(s), None) => format!(" (step {s})"),
        (None, Some(t)) => format!(" (<{t}>)"),
        (None, None) => String::new(),
    }
}

#[derive(Debug, Clone, Copy)]
struct TagToken {
    tag: Tag,
    closing: bool,
    start: usize,
    end: usize,
}

impl TagToken {
    fn is_open(&self, tag: Tag) -> bool {
        !self.closing && self.tag == tag
    }

    fn is_close(&self, tag: Tag) -> bool {
        self.closing && self.tag == tag
    }
}

/// Returns `(name, closing, end)` when a tag-shaped token `<name>` or `</name>` starts at `at`.
pub(crate) fn tag_shape(raw: &str, at: usize) -> Option<(&str, bool, usize)> {
    let bytes = raw.as_bytes();
    if bytes.get(at) != Some(&b'<') {
        return None;
    }
    let mut i = at + 1;
    let closing = bytes.get(i) == Some(&b'/');
    if closing {
        i += 1;
    }
    let name_start = i;
    match bytes.get(i) {
        Some(b) if b.is_ascii_alphabetic() || *b == b'_' => i += 1,
        _ => return None,
    }
    while let Some(b) = bytes.get(i) {
        if b.is_ascii_alphanumeric() || *b == b'_' {
            i += 1;
        } else {
            break;
        }
    }
    if bytes.get(i) != Some(&b'>') {
        return None;
    }
    Some((&raw[name_start..i], closing, i + 1))
}

/// True when `text` contains anything the parser would read as a tag.
pub(crate) fn contains_tag(text: &str) -> bool {
    text.match_indices('<').any(|(i, _)| tag_shape(text, i).is_some())
}

struct Parser<'a> {
    raw: &'a str,
    pos: usize,
    step: usize,
}

impl<'a> Parser<'a> {
    fn error(&self, offset: usize, kind: ErrorKind, tag: Option<Tag>, message: impl Into<String>) -> ParseError {
        ParseError {
            offset,
            kind,
            step: (self.step > 0).then_some(self.step),
            tag,
            message: message.into(),
        }
    }

    /// Next tag token at or after `pos`, without consuming it.
    fn peek_tag(&self) -> Result<Option<TagToken>, ParseError> {
        let mut from = self.pos;
        while let Some(rel) = self.raw[from..].find('<') {
            let at = from + rel;
            if let Some((name, closing, end)) = tag_shape(self.raw, at) {
                return match Tag::from_name(name) {
                    Some(tag) => Ok(Some(TagToken { tag, closing, start: at, end })),
                    None => Err(self.error(at, ErrorKind::UnknownTag, None, format!("unknown tag <{}{name}>", if closing { "/" } else { "" }))),
                };
            }
            from = at + 1;
        }
        Ok(None)
    }

    /// Requires only whitespace between `pos` and `until`.
    fn expect_blank(&self, until: usize) -> Result<(), ParseError> {
        let gap = &self.raw[self.pos..until];
        match gap.find(|c: char| !c.is_whitespace()) {
            None => Ok(()),
            Some(i) => Err(self.error(self.pos + i, ErrorKind::StrayText, None, "text outside of any element")),
        }
    }

    /// Reads the body of an element whose opening tag was just consumed.
    fn element_body(&mut self, open: TagToken) -> Result<Span, ParseError> {
        match self.peek_tag()? {
            Some(tok) if tok.is_close(open.tag) => {
                let body = Span::new(self.pos, tok.start);
                self.pos = tok.end;
                Ok(body)
            }
            Some(tok) => Err(self.error(
                tok.start,
                ErrorKind::Unclosed,
                Some(open.tag),
                format!("<{}> not closed before <{}{}>", open.tag, if tok.closing { "/" } else { "" }, tok.tag),
            )),
            None => Err(self.error(open.start, ErrorKind::Unclosed, Some(open.tag), format!("<{}> never closed", open.tag))),
        }
    }

    fn expect_open(&mut self, tag: Tag, kind: ErrorKind) -> Result<TagToken, ParseError> {
        match self.peek_tag()? {
            Some(tok) if tok.is_open(tag) => {
                self.expect_blank(tok.start)?;
                self.pos = tok.end;
                Ok(tok)
            }
            Some(tok) => Err(self.error(tok.start, kind, Some(tag), format!("expected <{tag}>"))),
            None => Err(self.error(self.raw.len(), kind, Some(tag), format!("expected <{tag}>"))),
        }
    }

    fn parse(mut self) -> Result<Trajectory, ParseError> {
        let mut steps = Vec::new();
        let mut layouts = Vec::new();
        let mut answer = None;
        let mut answer_span = None;

        loop {
            let Some(tok) = self.peek_tag()? else {
                self.expect_blank(self.raw.len())?;
                break;
            };
            self.expect_blank(tok.start)?;
            if answer.is_some() {
                return Err(self.error(tok.start, ErrorKind::OutOfOrder, Some(tok.tag), "element after <answer>"));
            }
            if !tok.is_open(Tag::Think) {
                self.step = steps.len() + 1;
                return Err(self.error(tok.start, ErrorKind::OutOfOrder, Some(tok.tag), "step must start with <think>"));
            }
            self.step = steps.len() + 1;
            self.pos = tok.end;
            let (think, contract, think_span, contract_span) = self.think_block(tok)?;
            if self.step >= 2 && contract.is_none() {
                return Err(self.error(
                    tok.start,
                    ErrorKind::MalformedContract,
                    Some(Tag::Think),
                    format!("<think> of step {} must begin with the <helpful>/<ref> contract", self.step),
                ));
            }
            let mut step = Step {
                index: self.step,
                think,
                contract,
                tool_call: None,
                tool_response: None,
            };
            let mut layout = StepLayout {
                think: think_span,
                contract: contract_span,
                ..StepLayout::default()
            };

            let next = self.peek_tag()?;
            match next {
                Some(t) if t.is_open(Tag::ToolCall) => {
                    self.expect_blank(t.start)?;
                    self.pos = t.end;
                    let body = self.element_body(t)?;
                    let (call, call_span) = self.tool_call(body)?;
                    let open = self.expect_open(Tag::ToolResponse, ErrorKind::OutOfOrder)?;
                    let body = self.element_body(open)?;
                    let (response, contents) = self.tool_response(body)?;
                    step.tool_call = Some(call);
                    step.tool_response = Some(response);
                    layout.tool_call = Some(call_span);
                    layout.tool_response = Some(Span::new(open.start, self.pos));
                    layout.item_contents = contents;
                }
                Some(t) if t.is_open(Tag::Answer) => {
                    self.expect_blank(t.start)?;
                    self.pos = t.end;
                    let body = self.element_body(t)?;
                    let span = trim_span(self.raw, body);
                    answer = Some(span.slice(self.raw).to_owned());
                    answer_span = Some(span);
                }
                Some(t) => {
                    return Err(self.error(t.start, ErrorKind::OutOfOrder, Some(t.tag), "expected <tool_call> or <answer> after </think>"));
                }
                None => {
                    self.expect_blank(self.raw.len())?;
                    return Err(self.error(self.raw.len(), ErrorKind::OutOfOrder, None, "step ends without <tool_call> or <answer>"));
                }
            }
            steps.push(step);
            layouts.push(layout);
        }

        if steps.is_empty() {
            return Err(ParseError {
                offset: 0,
                kind: ErrorKind::OutOfOrder,
                step: None,
                tag: Some(Tag::Think),
                message: "no steps".into(),
            });
        }
        Ok(Trajectory {
            query: String::new(),
            steps,
            answer,
            raw_text: Some(self.raw.to_owned()),
            layout: Some(Layout {
                steps: layouts,
                answer: answer_span,
            }),
        })
    }

    fn think_block(&mut self, open: TagToken) -> Result<(String, Option<Contract>, Span, Option<Span>), ParseError> {
        let mut contract = None;
        let mut contract_span = None;
        if let Some(tok) = self.peek_tag()? {
            if tok.is_open(Tag::Helpful) && self.raw[self.pos..tok.start].trim().is_empty() {
                self.pos = tok.end;
                let helpful_body = self.element_body(tok)?;
                let helpful = match helpful_body.slice(self.raw).trim() {
                    "yes" => Helpful::Yes,
                    "no" => Helpful::No,
                    other => {
                        return Err(self.error(helpful_body.start, ErrorKind::MalformedContract, Some(Tag::Helpful), format!("helpful must be `yes` or `no`, got `{other}`")));
                    }
                };
                let ref_open = self.expect_open(Tag::Ref, ErrorKind::MalformedContract)?;
                let ref_body = self.element_body(ref_open)?;
                let refs = self.refs(ref_body)?;
                contract = Some(Contract { helpful, refs });
                contract_span = Some(Span::new(tok.start, self.pos));
            }
        }
        match self.peek_tag()? {
            Some(tok) if tok.is_close(Tag::Think) => {
                let span = trim_span(self.raw, Span::new(self.pos, tok.start));
                self.pos = tok.end;
                Ok((span.slice(self.raw).to_owned(), contract, span, contract_span))
            }
            Some(tok) if matches!(tok.tag, Tag::Helpful | Tag::Ref) => Err(self.error(
                tok.start,
                ErrorKind::MalformedContract,
                Some(tok.tag),
                "the contract must open the <think> block",
            )),
            Some(tok) => Err(self.error(tok.start, ErrorKind::Unclosed, Some(Tag::Think), format!("<think> not closed before <{}{}>", if tok.closing { "/" } else { "" }, tok.tag))),
            None => Err(self.error(open.start, ErrorKind::Unclosed, Some(Tag::Think), "<think> never closed")),
        }
    }

    fn refs(&self, body: Span) -> Result<Refs, ParseError> {
        let text = body.slice(self.raw).trim();
        let malformed = |msg: String| self.error(body.start, ErrorKind::MalformedContract, Some(Tag::Ref), msg);
        if text == "null" {
            return Ok(Refs::Null);
        }
        if text.is_empty() {
            return Err(malformed("empty <ref>; use `null`".into()));
        }
        let ids = text
            .split(',')
            .map(|part| {
                let part = part.trim();
                part.parse::<u32>()
                    .map(RefId)
                    .map_err(|_| malformed(format!("`{part}` is not a reference id")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Refs::ids(ids).map_err(|e| malformed(e.to_string()))
    }

    fn tool_call(&self, body: Span) -> Result<(ToolCall, Span), ParseError> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Payload {
            name: String,
            #[serde(default)]
            arguments: BTreeMap<String, serde_json::Value>,
        }
        let span = trim_span(self.raw, body);
        let malformed = |msg: String| self.error(span.start, ErrorKind::MalformedToolCall, Some(Tag::ToolCall), msg);
        let payload: Payload = serde_json::from_str(span.slice(self.raw)).map_err(|e| malformed(e.to_string()))?;
        let mut arguments = BTreeMap::new();
        for (key, value) in payload.arguments {
            match value {
                serde_json::Value::String(s) => {
                    arguments.insert(key, s);
                }
                other => return Err(malformed(format!("argument `{key}` must be text, got {other}"))),
            }
        }
        Ok((
            ToolCall {
                tool: Tool::from(payload.name),
                arguments,
            },
            span,
        ))
    }

    fn tool_response(&self, body: Span) -> Result<(ProxyResponse, Vec<Span>), ParseError> {
        let text = body.slice(self.raw);
        let base = text.as_ptr() as usize;
        let malformed = |msg: String| self.error(body.start, ErrorKind::MalformedResponse, Some(Tag::ToolResponse), msg);
        let raw_items: Vec<BTreeMap<String, &RawValue>> =
            serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;

        let mut items = Vec::with_capacity(raw_items.len());
        let mut spans = Vec::with_capacity(raw_items.len());
        for fields in raw_items {
            let field = |key: &str| fields.get(key).map(|v| v.get());
            if let Some(unknown) = fields.keys().find(|k| !matches!(k.as_str(), "id" | "source" | "granularity" | "title" | "url" | "content")) {
                return Err(malformed(format!("unknown item field `{unknown}`")));
            }
            fn decode<T: serde::de::DeserializeOwned>(raw: Option<&str>, key: &str) -> Result<T, String> {
                let raw = raw.ok_or_else(|| format!("item missing `{key}`"))?;
                serde_json::from_str(raw).map_err(|e| format!("item field `{key}`: {e}"))
            }
            let optional = |key: &str| -> Result<Option<String>, String> {
                match field(key) {
                    None => Ok(None),
                    Some(raw) => serde_json::from_str(raw).map_err(|e| format!("item field `{key}`: {e}")),
                }
            };
            let id: RefId = decode(field("id"), "id").map_err(malformed)?;
            let source: Source = decode(field("source"), "source").map_err(malformed)?;
            let granularity: Granularity = decode(field("granularity"), "granularity").map_err(malformed)?;
            let title = optional("title").map_err(malformed)?;
            let url = optional("url").map_err(malformed)?;
            let content_raw = fields.get("content").ok_or_else(|| malformed("item missing `content`".into()))?.get();
            let content: String = serde_json::from_str(content_raw).map_err(|e| malformed(format!("item field `content`: {e}")))?;
            let start = body.start + (content_raw.as_ptr() as usize - base);
            // Inside of the string literal, quotes excluded.
            spans.push(Span::new(start + 1, start + content_raw.len() - 1));
            items.push(ReferenceItem {
                id,
                source,
                granularity,
                title,
                url,
                content,
            });
        }
        Ok((ProxyResponse { items }, spans))
    }
}

fn trim_span(raw: &str, span: Span) -> Span {
    let text = span.slice(raw);
    let lead = text.len() - text.trim_start().len();
    let trimmed = text.trim();
    Span::new(span.start + lead, span.start + lead + trimmed.len())
}

/// Parses tagged rollout text. The returned trajectory has an empty query,
/// keeps `raw` as its `raw_text` and records element offsets in its layout.
pub fn parse_trajectory(raw: &str) -> Result<Trajectory, ParseError> {
    Parser { raw, pos: 0, step: 0 }.parse()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SEARCH: &str = r#"<tool_call>{"name":"web_search","arguments":{"query":"capital of France"}}</tool_call>"#;
    const RESPONSE: &str = r#"<tool_response>[{"id":1,"source":"web_search","granularity":"page","title":"France","content":"Paris is the capital of France."},{"id":2,"source":"web_search","granularity":"page","content":"Lyon is a city."}]</tool_response>"#;

    fn two_step(contract: &str) -> String {
        format!("<think>plan</think>\n{SEARCH}\n{RESPONSE}\n<think>{contract}\nfound it</think>\n<answer>Paris</answer>")
    }

    #[test]
    fn minimal_one_step() {
        let t = parse_trajectory("<think>easy</think><answer>42</answer>").unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t.answer.as_deref(), Some("42"));
        assert!(t.steps[0].contract.is_none());
    }

    #[test]
    fn two_steps_with_contract() {
        let t = parse_trajectory(&two_step("<helpful>yes</helpful><ref>1</ref>")).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.steps[1].contract, Some(Contract::yes(&[1])));
        assert_eq!(t.steps[0].tool_call.as_ref().unwrap().tool, Tool::WebSearch);
        assert_eq!(t.steps[0].tool_response.as_ref().unwrap().items.len(), 2);
        assert_eq!(t.steps[1].think, "found it");
    }

    #[test]
    fn missing_contract_at_step_two() {
        let err = parse_trajectory(&two_step("")).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MalformedContract);
        assert_eq!(err.step, Some(2));
    }

    #[test]
    fn contract_after_text_is_rejected() {
        let raw = format!("<think>plan</think>{SEARCH}{RESPONSE}<think>so <helpful>yes</helpful><ref>1</ref></think><answer>x</answer>");
        let err = parse_trajectory(&raw).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MalformedContract);
    }

    #[test]
    fn null_marker_and_empty_ref() {
        let t = parse_trajectory(&two_step("<helpful>no</helpful><ref>null</ref>")).unwrap();
        assert_eq!(t.steps[1].contract, Some(Contract::no()));
        let err = parse_trajectory(&two_step("<helpful>no</helpful><ref></ref>")).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MalformedContract);
        assert_eq!(err.tag, Some(Tag::Ref));
    }

    #[test]
    fn helpful_is_case_sensitive() {
        let err = parse_trajectory(&two_step("<helpful>Yes</helpful><ref>1</ref>")).unwrap_err();
        assert_eq!(err.kind, ErrorKind::MalformedContract);
    }

    #[test]
    fn duplicate_and_non_numeric_refs() {
        for refs in ["1,1", "1,x", "1,,2"] {
            let raw = two_step(&format!("<helpful>yes</helpful><ref>{refs}</ref>"));
            assert_eq!(parse_trajectory(&raw).unwrap_err().kind, ErrorKind::MalformedContract, "{refs}");
        }
        let t = parse_trajectory(&two_step("<helpful>yes</helpful><ref> 2 , 1 </ref>")).unwrap();
        assert_eq!(t.steps[1].contract, Some(Contract::yes(&[2, 1])));
    }

    #[test]
    fn unknown_tag() {
        let err = parse_trajectory("<think>a</think><search>q</search>").unwrap_err();
        assert_eq!(err.kind, ErrorKind::UnknownTag);
        assert_eq!(err.offset, 16);
    }

    #[test]
    fn unclosed_tool_response() {
        let raw = two_step("<helpful>yes</helpful><ref>1</ref>").replace("</tool_response>", "");
        let err = parse_trajectory(&raw).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Unclosed);
        assert_eq!(err.tag, Some(Tag::ToolResponse));
        assert_eq!(err.step, Some(1));
    }

    #[test]
    fn out_of_order_and_stray_text() {
        assert_eq!(parse_trajectory("<answer>x</answer>").unwrap_err().kind, ErrorKind::OutOfOrder);
        assert_eq!(parse_trajectory("<think>a</think><think>b</think><answer>x</answer>").unwrap_err().kind, ErrorKind::OutOfOrder);
        assert_eq!(parse_trajectory("<think>a</think><answer>x</answer><think>b</think>").unwrap_err().kind, ErrorKind::OutOfOrder);
        assert_eq!(parse_trajectory("hello <think>a</think><answer>x</answer>").unwrap_err().kind, ErrorKind::StrayText);
        assert_eq!(parse_trajectory(&format!("<think>a</think>{SEARCH}<answer>x</answer>")).unwrap_err().kind, ErrorKind::OutOfOrder);
        assert_eq!(parse_trajectory("").unwrap_err().kind, ErrorKind::OutOfOrder);
    }

    #[test]
    fn trajectory_without_answer_parses() {
        let raw = format!("<think>plan</think>{SEARCH}{RESPONSE}");
        let t = parse_trajectory(&raw).unwrap();
        assert_eq!(t.len(), 1);
        assert!(t.answer.is_none());
    }

    #[test]
    fn malformed_payloads() {
        let bad_call = "<think>a</think><tool_call>{not json}</tool_call><tool_response>[]</tool_response>";
        assert_eq!(parse_trajectory(bad_call).unwrap_err().kind, ErrorKind::MalformedToolCall);
        let numeric_arg = r#"<think>a</think><tool_call>{"name":"web_search","arguments":{"query":3}}</tool_call><tool_response>[]</tool_response>"#;
        assert_eq!(parse_trajectory(numeric_arg).unwrap_err().kind, ErrorKind::MalformedToolCall);
        let bad_resp = r#"<think>a</think><tool_call>{"name":"web_search","arguments":{"query":"q"}}</tool_call><tool_response>[{"id":1}]</tool_response>"#;
        assert_eq!(parse_trajectory(bad_resp).unwrap_err().kind, ErrorKind::MalformedResponse);
    }

    #[test]
    fn unknown_tool_and_keys_are_preserved() {
        let raw = r#"<think>a</think><tool_call>{"name":"calculator","arguments":{"expr":"1+1"}}</tool_call><tool_response>[]</tool_response>"#;
        let t = parse_trajectory(raw).unwrap();
        assert_eq!(t.steps[0].tool_call.as_ref().unwrap().tool, Tool::Other("calculator".into()));
        let raw = r#"<think>a</think><tool_call>{"name":"web_search","arguments":{"query":"q","lang":"en"}}</tool_call><tool_response>[]</tool_response>"#;
        let t = parse_trajectory(raw).unwrap();
        assert_eq!(t.steps[0].tool_call.as_ref().unwrap().unknown_keys(), vec!["lang"]);
    }

    #[test]
    fn offsets_slice_back_to_surface_text() {
        let raw = two_step("<helpful>yes</helpful><ref>1</ref>");
        let t = parse_trajectory(&raw).unwrap();
        let layout = t.layout.as_ref().unwrap();
        assert_eq!(layout.steps[0].think.slice(&raw), "plan");
        assert_eq!(layout.steps[1].contract.unwrap().slice(&raw), "<helpful>yes</helpful><ref>1</ref>");
        assert_eq!(layout.steps[0].item_contents[0].slice(&raw), "Paris is the capital of France.");
        assert_eq!(layout.answer.unwrap().slice(&raw), "Paris");
        let resp = layout.steps[0].tool_response.unwrap().slice(&raw);
        assert!(resp.starts_with("<tool_response>") && resp.ends_with("</tool_response>"));
    }

    #[test]
    fn angle_brackets_in_free_text() {
        let t = parse_trajectory("<think>is 1 < 2? yes</think><answer>a <b</answer>").unwrap();
        assert_eq!(t.steps[0].think, "is 1 < 2? yes");
        assert_eq!(t.answer.as_deref(), Some("a <b"));
    }
}
