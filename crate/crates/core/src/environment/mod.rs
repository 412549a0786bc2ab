//! Deterministic mock retrieval proxies over file-backed corpora.
//!
//! Four proxies share one response schema: web search (page granularity),
//! browser, local search and knowledge graph (chunk granularity). Each is a
//! [`Proxy`] registered by tool name; an [`Environment`] dispatches tool
//! calls to the enabled ones and assigns item ids 1..k.

mod proxies;
pub mod simulate;

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::protocol::{ProxyResponse, Tool, ToolCall, Trajectory};
use crate::registry::{Registry, Settings};

pub use proxies::{browse, kg_search, local_search, render_neighborhood, render_triple, web_search, BrowserProxy, KgSearchProxy, LocalSearchProxy, WebSearchProxy};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("no {0} documents in the corpus")]
    EmptyCorpus(&'static str),
    #[error("query is empty")]
    EmptyQuery,
    #[error("unknown url `{0}`")]
    UnknownUrl(String),
    #[error("missing argument `{0}`")]
    MissingArgument(&'static str),
    #[error("tool `{0}` is not available")]
    ToolUnavailable(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("invalid proxy config: {0}")]
    InvalidConfig(String),
    #[error("{path}: line {line}: {source}")]
    Json {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which proxies serve a document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    /// Served by web search and the browser.
    #[serde(alias = "web_search", alias = "browser")]
    Web,
    /// Served by local search.
    #[serde(alias = "local_search")]
    Local,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub title: String,
    #[serde(default)]
    pub url: Option<String>,
    pub body: String,
    pub source: CorpusSource,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Triple {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Triple {
        Triple {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

/// Immutable document and triple store behind the proxies.
#[derive(Debug, Clone)]
pub struct Corpus {
    entries: Vec<CorpusEntry>,
    triples: Vec<Triple>,
    chunk_sentences: usize,
}

impl Corpus {
    pub const DEFAULT_CHUNK_SENTENCES: usize = 2;

    pub fn new(entries: Vec<CorpusEntry>, triples: Vec<Triple>, chunk_sentences: usize) -> Result<Corpus, EnvError> {
        if chunk_sentences == 0 {
            return Err(EnvError::InvalidCorpus("chunk size must be at least one sentence".into()));
        }
        let mut ids = BTreeSet::new();
        for entry in &entries {
            if !ids.insert(entry.id.as_str()) {
                return Err(EnvError::InvalidCorpus(format!("duplicate doc id `{}`", entry.id)));
            }
            if entry.body.trim().is_empty() {
                return Err(EnvError::InvalidCorpus(format!("doc `{}` has an empty body", entry.id)));
            }
        }
        Ok(Corpus {
            entries,
            triples,
            chunk_sentences,
        })
    }

    /// Loads a corpus JSONL file and an optional triple JSONL file.
    pub fn load(corpus: &Path, kg: Option<&Path>, chunk_sentences: usize) -> Result<Corpus, EnvError> {
        let entries = read_jsonl(corpus)?;
        let triples = match kg {
            Some(path) => read_jsonl(path)?,
            None => Vec::new(),
        };
        Corpus::new(entries, triples, chunk_sentences)
    }

    pub fn entries(&self) -> &[CorpusEntry] {
        &self.entries
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn chunk_sentences(&self) -> usize {
        self.chunk_sentences
    }

    pub fn by_source(&self, source: CorpusSource) -> impl Iterator<Item = &CorpusEntry> {
        self.entries.iter().filter(move |e| e.source == source)
    }

    pub fn by_url(&self, url: &str) -> Option<&CorpusEntry> {
        self.entries.iter().find(|e| e.url.as_deref() == Some(url))
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EnvError> {
    let file = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| EnvError::Json {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub top_k: usize,
    pub enabled: BTreeSet<String>,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            top_k: 5,
            enabled: Tool::REGISTERED.iter().map(|t| t.name().to_owned()).collect(),
        }
    }
}

impl ProxyConfig {
    pub fn new(top_k: usize, enabled: impl IntoIterator<Item = String>) -> Result<ProxyConfig, EnvError> {
        if top_k == 0 {
            return Err(EnvError::InvalidConfig("top_k must be at least 1".into()));
        }
        Ok(ProxyConfig {
            top_k,
            enabled: enabled.into_iter().collect(),
        })
    }

    pub fn with_top_k(top_k: usize) -> Result<ProxyConfig, EnvError> {
        ProxyConfig::new(top_k, ProxyConfig::default().enabled)
    }
}

/// A retrieval proxy answering structured tool calls.
pub trait Proxy: Send + Sync {
    fn tool(&self) -> Tool;

    fn call(&self, call: &ToolCall, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError>;
}

/// The four built-in proxies, keyed by tool name.
pub fn proxy_registry() -> Registry<dyn Proxy> {
    let mut reg: Registry<dyn Proxy> = Registry::new("proxy");
    reg.register("web_search", |_: &Settings| Ok(Box::new(WebSearchProxy)));
    reg.register("browser", |_: &Settings| Ok(Box::new(BrowserProxy)));
    reg.register("local_search", |_: &Settings| Ok(Box::new(LocalSearchProxy)));
    reg.register("kg_search", |_: &Settings| Ok(Box::new(KgSearchProxy)));
    reg
}

/// Corpus, config and the enabled proxies.
pub struct Environment {
    corpus: Corpus,
    cfg: ProxyConfig,
    proxies: BTreeMap<String, Box<dyn Proxy>>,
    blank_token: Option<String>,
}

impl Environment {
    pub fn new(corpus: Corpus, cfg: ProxyConfig) -> Result<Environment, EnvError> {
        Environment::with_registry(corpus, cfg, &proxy_registry())
    }

    pub fn with_registry(corpus: Corpus, cfg: ProxyConfig, registry: &Registry<dyn Proxy>) -> Result<Environment, EnvError> {
        let mut proxies = BTreeMap::new();
        for name in &cfg.enabled {
            let proxy = registry
                .build(name, &Settings::new())
                .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
            proxies.insert(name.clone(), proxy);
        }
        Ok(Environment {
            corpus,
            cfg,
            proxies,
            blank_token: None,
        })
    }

    /// Replaces every returned item's content with `token` (extreme ablation).
    pub fn blanked(mut self, token: impl Into<String>) -> Environment {
        self.blank_token = Some(token.into());
        self
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.cfg
    }

    pub fn enabled_tools(&self) -> Vec<Tool> {
        self.proxies.values().map(|p| p.tool()).collect()
    }

    pub fn execute(&self, call: &ToolCall) -> Result<ProxyResponse, EnvError> {
        let proxy = self
            .proxies
            .get(call.tool.name())
            .ok_or_else(|| EnvError::ToolUnavailable(call.tool.name().to_owned()))?;
        let mut response = proxy.call(call, &self.corpus, &self.cfg)?;
        if let Some(token) = &self.blank_token {
            for item in &mut response.items {
                item.content = token.clone();
            }
        }
        Ok(response)
    }
}

/// Copy of `t` with every reference item's content replaced by `token`.
/// Ids, titles, urls and structure are kept.
pub fn blank_responses(t: &Trajectory, token: &str) -> Trajectory {
    let mut blanked = t.clone();
    for step in &mut blanked.steps {
        if let Some(response) = &mut step.tool_response {
            for item in &mut response.items {
                item.content = token.to_owned();
            }
        }
    }
    if t.raw_text.is_some() {
        blanked.with_canonical_source()
    } else {
        blanked.layout = None;
        blanked
    }
}
