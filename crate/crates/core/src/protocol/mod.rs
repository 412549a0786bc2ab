//! Trajectory data model and the tagged interaction text format.
//!
//! A rollout is a sequence of reason/act/observe steps:
//!
//! ```text
//! <think>plan</think>
//! <tool_call>{"name":"web_search","arguments":{"query":"..."}}</tool_call>
//! <tool_response>[{"id":1,"source":"web_search","granularity":"page","content":"..."}]</tool_response>
//! <think><helpful>yes</helpful><ref>1</ref>
//! reasoning</think>
//! <answer>...</answer>
//! ```
//!
//! From step 2 onward every `<think>` block opens with the contract
//! `<helpful>yes|no</helpful><ref>id1,id2,...|null</ref>`.

mod parse;
mod serialize;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use parse::{parse_trajectory, ErrorKind, ParseError};
pub(crate) use parse::{contains_tag, tag_shape};
pub use serialize::serialize_trajectory;

/// Element tags of the interaction grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Think,
    Helpful,
    Ref,
    ToolCall,
    ToolResponse,
    Answer,
}

impl Tag {
    pub const ALL: [Tag; 6] = [
        Tag::Think,
        Tag::Helpful,
        Tag::Ref,
        Tag::ToolCall,
        Tag::ToolResponse,
        Tag::Answer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tag::Think => "think",
            Tag::Helpful => "helpful",
            Tag::Ref => "ref",
            Tag::ToolCall => "tool_call",
            Tag::ToolResponse => "tool_response",
            Tag::Answer => "answer",
        }
    }

    pub fn from_name(name: &str) -> Option<Tag> {
        Tag::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Environment-assigned reference identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefId(pub u32);

impl fmt::Display for RefId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Helpful {
    Yes,
    No,
}

impl Helpful {
    pub fn as_str(self) -> &'static str {
        match self {
            Helpful::Yes => "yes",
            Helpful::No => "no",
        }
    }
}

/// Citation list of a contract: the null marker or a non-empty, duplicate-free id list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Option<Vec<RefId>>", into = "Option<Vec<RefId>>")]
pub enum Refs {
    Null,
    Ids(Vec<RefId>),
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RefsError {
    #[error("empty citation list; use the null marker")]
    Empty,
    #[error("duplicate cited id {0}")]
    Duplicate(RefId),
}

impl Refs {
    pub fn ids(ids: Vec<RefId>) -> Result<Refs, RefsError> {
        if ids.is_empty() {
            return Err(RefsError::Empty);
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(*id) {
                return Err(RefsError::Duplicate(*id));
            }
        }
        Ok(Refs::Ids(ids))
    }

    pub fn is_null(&self) -> bool {
        matches!(self, Refs::Null)
    }

    /// Cited ids; empty for the null marker.
    pub fn as_slice(&self) -> &[RefId] {
        match self {
            Refs::Null => &[],
            Refs::Ids(ids) => ids,
        }
    }

    pub fn contains(&self, id: RefId) -> bool {
        self.as_slice().contains(&id)
    }
}

impl TryFrom<Option<Vec<RefId>>> for Refs {
    type Error = RefsError;

    fn try_from(value: Option<Vec<RefId>>) -> Result<Self, Self::Error> {
        match value {
            None => Ok(Refs::Null),
            Some(ids) => Refs::ids(ids),
        }
    }
}

impl From<Refs> for Option<Vec<RefId>> {
    fn from(refs: Refs) -> Self {
        match refs {
            Refs::Null => None,
            Refs::Ids(ids) => Some(ids),
        }
    }
}

/// The verdict and citation declaration that opens a `<think>` block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contract {
    pub helpful: Helpful,
    pub refs: Refs,
}

impl Contract {
    pub fn yes(ids: &[u32]) -> Contract {
        Contract {
            helpful: Helpful::Yes,
            refs: Refs::ids(ids.iter().copied().map(RefId).collect()).expect("valid id list"),
        }
    }

    pub fn no() -> Contract {
        Contract {
            helpful: Helpful::No,
            refs: Refs::Null,
        }
    }
}

/// Retrieval proxies an agent may call. Names outside the registered four are
/// kept as `Other` so foreign logs still load; validation flags them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub enum Tool {
    WebSearch,
    Browser,
    LocalSearch,
    KgSearch,
    Other(String),
}

impl Tool {
    pub const REGISTERED: [Tool; 4] = [Tool::WebSearch, Tool::Browser, Tool::LocalSearch, Tool::KgSearch];

    pub fn name(&self) -> &str {
        match self {
            Tool::WebSearch => "web_search",
            Tool::Browser => "browser",
            Tool::LocalSearch => "local_search",
            Tool::KgSearch => "kg_search",
            Tool::Other(name) => name,
        }
    }

    pub fn source(&self) -> Option<Source> {
        match self {
            Tool::WebSearch => Some(Source::WebSearch),
            Tool::Browser => Some(Source::Browser),
            Tool::LocalSearch => Some(Source::LocalSearch),
            Tool::KgSearch => Some(Source::KgSearch),
            Tool::Other(_) => None,
        }
    }

    /// Required and optional argument keys.
    pub fn argument_schema(&self) -> (&'static [&'static str], &'static [&'static str]) {
        match self {
            Tool::WebSearch | Tool::LocalSearch | Tool::KgSearch => (&["query"], &[]),
            Tool::Browser => (&["url"], &["query"]),
            Tool::Other(_) => (&[], &[]),
        }
    }
}

impl From<String> for Tool {
    fn from(name: String) -> Self {
        match name.as_str() {
            "web_search" => Tool::WebSearch,
            "browser" => Tool::Browser,
            "local_search" => Tool::LocalSearch,
            "kg_search" | "KG_search" => Tool::KgSearch,
            _ => Tool::Other(name),
        }
    }
}

impl From<Tool> for String {
    fn from(tool: Tool) -> Self {
        tool.name().to_owned()
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Structured call payload, serialized as JSON inside `<tool_call>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCall {
    pub tool: Tool,
    pub arguments: BTreeMap<String, String>,
}

impl ToolCall {
    pub fn new(tool: Tool, args: &[(&str, &str)]) -> ToolCall {
        ToolCall {
            tool,
            arguments: args.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    pub fn argument(&self, key: &str) -> Option<&str> {
        self.arguments.get(key).map(String::as_str)
    }

    /// Argument keys outside the tool's declared schema. They are preserved, only reported.
    pub fn unknown_keys(&self) -> Vec<&str> {
        let (required, optional) = self.tool.argument_schema();
        if matches!(self.tool, Tool::Other(_)) {
            return Vec::new();
        }
        self.arguments
            .keys()
            .map(String::as_str)
            .filter(|k| !required.contains(k) && !optional.contains(k))
            .collect()
    }

    pub fn missing_keys(&self) -> Vec<&'static str> {
        let (required, _) = self.tool.argument_schema();
        required
            .iter()
            .copied()
            .filter(|k| !self.arguments.contains_key(*k))
            .collect()
    }
}

/// Which proxy produced a reference item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    WebSearch,
    Browser,
    LocalSearch,
    KgSearch,
}

impl Source {
    /// Web search returns whole pages; every other proxy returns chunks.
    pub fn granularity(self) -> Granularity {
        match self {
            Source::WebSearch => Granularity::Page,
            _ => Granularity::Chunk,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Page,
    Chunk,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReferenceItem {
    pub id: RefId,
    pub source: Source,
    pub granularity: Granularity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
    pub content: String,
}

/// Normalized proxy output. Items carry consecutive ids starting at 1.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ProxyResponse {
    pub items: Vec<ReferenceItem>,
}

impl ProxyResponse {
    pub fn get(&self, id: RefId) -> Option<&ReferenceItem> {
        self.items.iter().find(|item| item.id == id)
    }

    pub fn contains(&self, id: RefId) -> bool {
        self.get(id).is_some()
    }

    pub fn ids(&self) -> impl Iterator<Item = RefId> + '_ {
        self.items.iter().map(|item| item.id)
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// One reason/act/observe turn.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    pub index: usize,
    pub think: String,
    #[serde(default)]
    pub contract: Option<Contract>,
    #[serde(default)]
    pub tool_call: Option<ToolCall>,
    #[serde(default)]
    pub tool_response: Option<ProxyResponse>,
}

/// Half-open byte range into the raw rollout text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Span {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn slice<'a>(&self, text: &'a str) -> &'a str {
        &text[self.start..self.end]
    }
}

/// Byte offsets of the elements of one parsed step.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepLayout {
    /// Free reasoning text (trimmed) inside `<think>`.
    pub think: Span,
    /// From `<helpful>` through `</ref>`.
    pub contract: Option<Span>,
    /// JSON payload (trimmed) inside `<tool_call>`.
    pub tool_call: Option<Span>,
    /// Whole `<tool_response>...</tool_response>` element, tags included.
    pub tool_response: Option<Span>,
    /// Inside of each item's `content` string literal, in item order.
    pub item_contents: Vec<Span>,
}

impl Default for Span {
    fn default() -> Self {
        Span::new(0, 0)
    }
}

/// Element offsets recorded by the parser.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Layout {
    pub steps: Vec<StepLayout>,
    /// Answer text (trimmed) inside `<answer>`.
    pub answer: Option<Span>,
}

/// A complete rollout from query to (optional) answer.
///
/// Equality is structural: `raw_text` and the parsed layout are not compared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub query: String,
    pub steps: Vec<Step>,
    #[serde(default)]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_text: Option<String>,
    #[serde(skip)]
    pub layout: Option<Layout>,
}

impl PartialEq for Trajectory {
    fn eq(&self, other: &Self) -> bool {
        self.query == other.query && self.steps == other.steps && self.answer == other.answer
    }
}

impl Trajectory {
    pub fn new(query: impl Into<String>, steps: Vec<Step>, answer: Option<String>) -> Trajectory {
        Trajectory {
            query: query.into(),
            steps,
            answer,
            raw_text: None,
            layout: None,
        }
    }

    /// Number of steps, T.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Step by 1-based index.
    pub fn step(&self, index: usize) -> Option<&Step> {
        index.checked_sub(1).and_then(|i| self.steps.get(i))
    }

    /// The response a step's contract refers to: the previous step's tool response.
    pub fn prior_response(&self, index: usize) -> Option<&ProxyResponse> {
        index
            .checked_sub(1)
            .and_then(|i| self.step(i))
            .and_then(|s| s.tool_response.as_ref())
    }

    /// Returns a copy whose `raw_text` and layout come from the canonical serialization.
    pub fn with_canonical_source(&self) -> Trajectory {
        let raw = serialize_trajectory(self);
        match Trajectory::from_raw(&self.query, &raw) {
            Ok(parsed) => parsed,
            Err(_) => {
                let mut copy = self.clone();
                copy.raw_text = Some(raw);
                copy.layout = None;
                copy
            }
        }
    }

    /// Layout for `raw_text`, re-parsing when it was not retained.
    pub fn resolve_layout(&self) -> Option<Result<Layout, ParseError>> {
        let raw = self.raw_text.as_ref()?;
        if let Some(layout) = &self.layout {
            return Some(Ok(layout.clone()));
        }
        Some(parse_trajectory(raw).map(|t| t.layout.unwrap_or_default()))
    }

    /// Parses tagged rollout text and attaches the question it answers.
    pub fn from_raw(query: impl Into<String>, raw: &str) -> Result<Trajectory, ParseError> {
        let mut t = parse_trajectory(raw)?;
        t.query = query.into();
        Ok(t)
    }
}
