//! Tool-call ratios and reward distribution reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::protocol::{Tool, Trajectory};
use crate::rewards::RewardBreakdown;

pub const OTHER: &str = "other";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AnalyticsError {
    #[error("nothing to summarize")]
    EmptySet,
    #[error("{labels} labels for {items} items")]
    LabelMismatch { labels: usize, items: usize },
}

/// Raw per-tool call counts. Merging is associative and commutative.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ToolCounts(pub BTreeMap<String, u64>);

impl ToolCounts {
    pub fn add(&mut self, tool: &Tool, n: u64) {
        let key = match tool {
            Tool::Other(name) => {
                log::warn!("counting unregistered tool `{name}` as {OTHER}");
                OTHER
            }
            known => known.name(),
        };
        *self.0.entry(key.to_owned()).or_default() += n;
    }

    pub fn add_trajectory(&mut self, t: &Trajectory) {
        for call in t.steps.iter().filter_map(|s| s.tool_call.as_ref()) {
            self.add(&call.tool, 1);
        }
    }

    pub fn merge(&mut self, other: &ToolCounts) {
        for (k, v) in &other.0 {
            *self.0.entry(k.clone()).or_default() += v;
        }
    }

    pub fn total(&self) -> u64 {
        self.0.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallStats {
    pub counts: BTreeMap<String, u64>,
    /// Percent of all calls, rounded to two decimals.
    pub ratios: BTreeMap<String, f64>,
    pub total: u64,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

impl ToolCallStats {
    /// The four registered tools always appear; `other` only when seen.
    pub fn from_counts(counts: &ToolCounts) -> Result<ToolCallStats, AnalyticsError> {
        let total = counts.total();
        if total == 0 {
            return Err(AnalyticsError::EmptySet);
        }
        let mut all: BTreeMap<String, u64> = Tool::REGISTERED.iter().map(|t| (t.name().to_owned(), 0)).collect();
        for (k, v) in &counts.0 {
            *all.entry(k.clone()).or_default() += v;
        }
        let ratios = all
            .iter()
            .map(|(k, v)| (k.clone(), round2(*v as f64 / total as f64 * 100.0)))
            .collect();
        Ok(ToolCallStats { counts: all, ratios, total })
    }

    pub fn ratio(&self, tool: &str) -> f64 {
        self.ratios.get(tool).copied().unwrap_or(0.0)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{:<14} {:>8} {:>8}\n", "tool", "calls", "ratio%");
        for (tool, count) in &self.counts {
            let _ = writeln!(out, "{:<14} {:>8} {:>8.2}", tool, count, self.ratio(tool));
        }
        let _ = writeln!(out, "{:<14} {:>8}", "total", self.total);
        out
    }
}

pub fn tool_call_ratios<'a>(ts: impl IntoIterator<Item = &'a Trajectory>) -> Result<ToolCallStats, AnalyticsError> {
    let mut counts = ToolCounts::default();
    for t in ts {
        counts.add_trajectory(t);
    }
    ToolCallStats::from_counts(&counts)
}

pub const HISTOGRAM_BINS: usize = 10;

/// Equal-width bins over [-1, 1]; the last bin is closed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    fn of(values: &[f64]) -> Histogram {
        let (lo, hi) = (-1.0, 1.0);
        let mut counts = vec![0; HISTOGRAM_BINS];
        let width = (hi - lo) / HISTOGRAM_BINS as f64;
        for v in values {
            let bin = (((v - lo) / width).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
            counts[bin] += 1;
        }
        Histogram { lo, hi, counts }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentSummary {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub histogram: Histogram,
}

impl ComponentSummary {
    fn of(values: &[f64]) -> Option<ComponentSummary> {
        if values.is_empty() {
            return None;
        }
        Some(ComponentSummary {
            n: values.len(),
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            histogram: Histogram::of(values),
        })
    }
}

pub const COMPONENTS: [&str; 6] = ["cite", "pt", "ac", "ans_f1", "a", "final"];

fn component(b: &RewardBreakdown, name: &str) -> Option<f64> {
    match name {
        "cite" => Some(b.cite),
        "pt" => b.pt,
        "ac" => b.ac,
        "ans_f1" => Some(b.ans_f1),
        "a" => Some(b.a),
        "final" => Some(b.final_reward),
        _ => None,
    }
}

/// Per-component summaries. Optional components count only where present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub format_valid: usize,
    pub components: BTreeMap<String, ComponentSummary>,
}

impl GroupSummary {
    fn of(bs: &[&RewardBreakdown]) -> GroupSummary {
        let components = COMPONENTS
            .iter()
            .filter_map(|name| {
                let values: Vec<f64> = bs.iter().filter_map(|b| component(b, name)).collect();
                ComponentSummary::of(&values).map(|s| (name.to_string(), s))
            })
            .collect();
        GroupSummary {
            n: bs.len(),
            format_valid: bs.iter().filter(|b| b.format_valid).count(),
            components,
        }
    }

    pub fn mean(&self, component: &str) -> Option<f64> {
        self.components.get(component).map(|c| c.mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReport {
    pub overall: GroupSummary,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub groups: BTreeMap<String, GroupSummary>,
}

/// Summarizes breakdowns, grouped by `labels` when given (one per breakdown).
pub fn reward_report(breakdowns: &[RewardBreakdown], labels: Option<&[String]>) -> Result<RewardReport, AnalyticsError> {
    if breakdowns.is_empty() {
        return Err(AnalyticsError::EmptySet);
    }
    let mut groups = BTreeMap::new();
    if let Some(labels) = labels {
        if labels.len() != breakdowns.len() {
            return Err(AnalyticsError::LabelMismatch {
                labels: labels.len(),
                items: breakdowns.len(),
            });
        }
        let mut by_label: BTreeMap<&str, Vec<&RewardBreakdown>> = BTreeMap::new();
        for (label, b) in labels.iter().zip(breakdowns) {
            by_label.entry(label).or_default().push(b);
        }
        groups = by_label
            .into_iter()
            .map(|(label, bs)| (label.to_owned(), GroupSummary::of(&bs)))
            .collect();
    }
    let all: Vec<&RewardBreakdown> = breakdowns.iter().collect();
    Ok(RewardReport {
        overall: GroupSummary::of(&all),
        groups,
    })
}

impl RewardReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = |name: &str, g: &GroupSummary| {
            let _ = writeln!(out, "[{name}] n={} format_valid={}", g.n, g.format_valid);
            let _ = writeln!(out, "  {:<8} {:>5} {:>8} {:>8} {:>8}", "reward", "n", "mean", "min", "max");
            for name in COMPONENTS {
                if let Some(c) = g.components.get(name) {
                    let _ = writeln!(out, "  {:<8} {:>5} {:>8.4} {:>8.4} {:>8.4}", name, c.n, c.mean, c.min, c.max);
                }
            }
        };
        section("all", &self.overall);
        for (label, g) in &self.groups {
            section(label, g);
        }
        out
    }
}
