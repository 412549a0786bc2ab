use std::collections::BTreeSet;

use crate::protocol::{ProxyResponse, RefId, ReferenceItem, Source, Tool, ToolCall};
use crate::text;

use super::{Corpus, CorpusEntry, CorpusSource, EnvError, Proxy, ProxyConfig, Triple};

pub struct WebSearchProxy;
pub struct BrowserProxy;
pub struct LocalSearchProxy;
pub struct KgSearchProxy;

fn arg<'a>(call: &'a ToolCall, key: &'static str) -> Result<&'a str, EnvError> {
    call.argument(key).ok_or(EnvError::MissingArgument(key))
}

impl Proxy for WebSearchProxy {
    fn tool(&self) -> Tool {
        Tool::WebSearch
    }

    fn call(&self, call: &ToolCall, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
        web_search(arg(call, "query")?, corpus, cfg)
    }
}

impl Proxy for BrowserProxy {
    fn tool(&self) -> Tool {
        Tool::Browser
    }

    fn call(&self, call: &ToolCall, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
        browse(arg(call, "url")?, call.argument("query").unwrap_or(""), corpus, cfg)
    }
}

impl Proxy for LocalSearchProxy {
    fn tool(&self) -> Tool {
        Tool::LocalSearch
    }

    fn call(&self, call: &ToolCall, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
        local_search(arg(call, "query")?, corpus, cfg)
    }
}

impl Proxy for KgSearchProxy {
    fn tool(&self) -> Tool {
        Tool::KgSearch
    }

    fn call(&self, call: &ToolCall, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
        kg_search(arg(call, "query")?, corpus, cfg)
    }
}

// Sentence-window chunks of `body` as byte ranges.
fn chunks(body: &str, size: usize) -> Vec<(usize, usize)> {
    text::sentence_spans(body)
        .chunks(size)
        .map(|w| (w[0].0, w[w.len() - 1].1))
        .collect()
}

fn number(items: Vec<(Source, Option<String>, Option<String>, String)>) -> ProxyResponse {
    ProxyResponse {
        items: items
            .into_iter()
            .enumerate()
            .map(|(i, (source, title, url, content))| ReferenceItem {
                id: RefId(i as u32 + 1),
                source,
                granularity: source.granularity(),
                title,
                url,
                content,
            })
            .collect(),
    }
}

fn query_terms(query: &str) -> Result<BTreeSet<String>, EnvError> {
    if query.trim().is_empty() {
        return Err(EnvError::EmptyQuery);
    }
    Ok(text::terms(query))
}

/// Earliest window with the highest overlap; the first window when none overlap.
fn best_window<'a>(body: &'a str, size: usize, q: &BTreeSet<String>) -> &'a str {
    let mut best = None;
    let mut best_score = 0.0;
    for (s, e) in chunks(body, size) {
        let score = text::overlap_fraction(q, &text::terms(&body[s..e]));
        if best.is_none() || score > best_score {
            best = Some((s, e));
            best_score = score;
        }
    }
    let (s, e) = best.unwrap_or((0, body.len()));
    &body[s..e]
}

/// Page-level ranking over web entries by title and body overlap.
pub fn web_search(query: &str, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
    let q = query_terms(query)?;
    let mut scored: Vec<(f64, &CorpusEntry)> = corpus
        .by_source(CorpusSource::Web)
        .map(|e| {
            let mut terms = text::terms(&e.title);
            terms.extend(text::terms(&e.body));
            (text::overlap_fraction(&q, &terms), e)
        })
        .collect();
    if scored.is_empty() {
        return Err(EnvError::EmptyCorpus("web"));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)));
    Ok(number(
        scored
            .into_iter()
            .take(cfg.top_k)
            .map(|(_, e)| {
                let snippet = best_window(&e.body, corpus.chunk_sentences(), &q);
                (Source::WebSearch, Some(e.title.clone()), e.url.clone(), snippet.to_owned())
            })
            .collect(),
    ))
}

/// Ranked verbatim chunks of the document at `url`. An empty query keeps
/// document order.
pub fn browse(url: &str, query: &str, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
    let doc = corpus.by_url(url).ok_or_else(|| EnvError::UnknownUrl(url.to_owned()))?;
    let q = text::terms(query);
    let mut scored: Vec<(f64, usize, &str)> = chunks(&doc.body, corpus.chunk_sentences())
        .into_iter()
        .enumerate()
        .map(|(i, (s, e))| {
            let chunk = &doc.body[s..e];
            (text::overlap_fraction(&q, &text::terms(chunk)), i, chunk)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(number(
        scored
            .into_iter()
            .take(cfg.top_k)
            .map(|(_, _, chunk)| (Source::Browser, Some(doc.title.clone()), doc.url.clone(), chunk.to_owned()))
            .collect(),
    ))
}

/// Chunk-level ranking over local entries; ties by doc id, then chunk position.
pub fn local_search(query: &str, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
    let q = query_terms(query)?;
    let mut scored: Vec<(f64, &CorpusEntry, usize, &str)> = Vec::new();
    let mut any = false;
    for e in corpus.by_source(CorpusSource::Local) {
        any = true;
        for (i, (s, end)) in chunks(&e.body, corpus.chunk_sentences()).into_iter().enumerate() {
            let chunk = &e.body[s..end];
            scored.push((text::overlap_fraction(&q, &text::terms(chunk)), e, i, chunk));
        }
    }
    if !any {
        return Err(EnvError::EmptyCorpus("local"));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.id.cmp(&b.1.id)).then(a.2.cmp(&b.2)));
    Ok(number(
        scored
            .into_iter()
            .take(cfg.top_k)
            .map(|(_, e, _, chunk)| (Source::LocalSearch, Some(e.title.clone()), e.url.clone(), chunk.to_owned()))
            .collect(),
    ))
}

/// Sentence rendering of one triple.
pub fn render_triple(t: &Triple) -> String {
    format!("The {} of {} is {}.", t.predicate, t.subject, t.object)
}

/// Summary of an entity's one-hop neighborhood: its sorted triples, rendered.
pub fn render_neighborhood(entity: &str, triples: &[Triple]) -> String {
    let hop: BTreeSet<&Triple> = triples
        .iter()
        .filter(|t| t.subject == entity || t.object == entity)
        .collect();
    let facts: Vec<String> = hop.into_iter().map(render_triple).collect();
    format!("{entity}: {}", facts.join(" "))
}

/// Matches entities by exact name, then normalized name, then by mention
/// inside a longer query; the first non-empty tier wins.
pub fn kg_search(input: &str, corpus: &Corpus, cfg: &ProxyConfig) -> Result<ProxyResponse, EnvError> {
    if input.trim().is_empty() {
        return Err(EnvError::EmptyQuery);
    }
    let triples = corpus.triples();
    if triples.is_empty() {
        return Err(EnvError::EmptyCorpus("knowledge graph"));
    }
    let entities: BTreeSet<&str> = triples
        .iter()
        .flat_map(|t| [t.subject.as_str(), t.object.as_str()])
        .collect();
    let needle = input.trim();
    let mut matched: Vec<&str> = entities.iter().copied().filter(|e| *e == needle).collect();
    if matched.is_empty() {
        let norm = text::normalize(needle);
        matched = entities.iter().copied().filter(|e| text::normalize(e) == norm).collect();
    }
    if matched.is_empty() {
        let query_tokens = text::tokens(needle);
        matched = entities
            .iter()
            .copied()
            .filter(|e| {
                let et = text::tokens(e);
                !et.is_empty() && et.iter().any(|t| !text::is_stopword(t)) && query_tokens.windows(et.len()).any(|w| w == et.as_slice())
            })
            .collect();
    }
    Ok(number(
        matched
            .into_iter()
            .take(cfg.top_k)
            .map(|e| (Source::KgSearch, Some(e.to_owned()), None, render_neighborhood(e, triples)))
            .collect(),
    ))
}
