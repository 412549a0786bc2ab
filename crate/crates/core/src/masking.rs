//! Loss-mask spans for selective unmasking of cited evidence.
//!
//! Agent-written text is trained on. Tool responses are masked, except the
//! content of items the following step cites.

use serde::{Deserialize, Serialize};

use crate::protocol::{parse_trajectory, Layout, ParseError, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Train,
    Mask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub end: usize,
    pub kind: MaskKind,
}

#[derive(Debug, thiserror::Error)]
pub enum MaskError {
    #[error("trajectory has no raw text to take offsets from")]
    MissingOffsets,
    #[error("raw text does not parse: {0}")]
    Parse(#[from] ParseError),
}

/// Byte spans tiling `raw_text`, sorted, with adjacent equal kinds merged.
pub fn compute_masks(t: &Trajectory) -> Result<Vec<MaskSpan>, MaskError> {
    let raw = t.raw_text.as_deref().ok_or(MaskError::MissingOffsets)?;
    // Offsets only describe the steps they were parsed from, so a trajectory
    // without a cached layout is re-read from its raw text.
    let parsed;
    let (source, layout): (&Trajectory, &Layout) = match &t.layout {
        Some(layout) => (t, layout),
        None => {
            parsed = parse_trajectory(raw)?;
            (&parsed, parsed.layout.as_ref().ok_or(MaskError::MissingOffsets)?)
        }
    };

    let mut marks: Vec<(usize, usize, MaskKind)> = Vec::new();
    for (i, (step, step_layout)) in source.steps.iter().zip(&layout.steps).enumerate() {
        let (Some(region), Some(response)) = (step_layout.tool_response, &step.tool_response) else {
            continue;
        };
        let cited = source.steps.get(i + 1).and_then(|next| next.contract.as_ref()).map(|c| &c.refs);
        let mut cursor = region.start;
        for (item, content) in response.items.iter().zip(&step_layout.item_contents) {
            if cited.is_some_and(|refs| refs.contains(item.id)) {
                marks.push((cursor, content.start, MaskKind::Mask));
                marks.push((content.start, content.end, MaskKind::Train));
                cursor = content.end;
            }
        }
        marks.push((cursor, region.end, MaskKind::Mask));
    }

    let mut spans: Vec<MaskSpan> = Vec::new();
    let mut push = |start: usize, end: usize, kind: MaskKind| {
        if start >= end {
            return;
        }
        match spans.last_mut() {
            Some(last) if last.kind == kind && last.end == start => last.end = end,
            _ => spans.push(MaskSpan { start, end, kind }),
        }
    };
    let mut cursor = 0;
    for (start, end, kind) in marks {
        push(cursor, start, MaskKind::Train);
        push(start, end, kind);
        cursor = end;
    }
    push(cursor, raw.len(), MaskKind::Train);
    Ok(spans)
}

/// Concatenated text of the spans of one kind.
pub fn text_of_kind(raw: &str, spans: &[MaskSpan], kind: MaskKind) -> String {
    spans
        .iter()
        .filter(|s| s.kind == kind)
        .map(|s| &raw[s.start..s.end])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{Contract, Granularity, ProxyResponse, RefId, ReferenceItem, Source, Step, Tool, ToolCall};

    fn response(n: u32) -> ProxyResponse {
        ProxyResponse {
            items: (1..=n)
                .map(|i| ReferenceItem {
                    id: RefId(i),
                    source: Source::Browser,
                    granularity: Granularity::Chunk,
                    title: Some(format!("title {i}")),
                    url: None,
                    content: format!("passage number {i}"),
                })
                .collect(),
        }
    }

    fn two_step(contract: Contract) -> Trajectory {
        let steps = vec![
            Step { index: 1, think: "look".into(), contract: None, tool_call: Some(ToolCall::new(Tool::Browser, &[("url", "u")])), tool_response: Some(response(5)) },
            Step { index: 2, think: "done".into(), contract: Some(contract), tool_call: None, tool_response: None },
        ];
        Trajectory::new("q", steps, Some("a".into())).with_canonical_source()
    }

    fn assert_tiles(raw: &str, spans: &[MaskSpan]) {
        let mut cursor = 0;
        for s in spans {
            assert_eq!(s.start, cursor);
            assert!(s.end > s.start);
            cursor = s.end;
        }
        assert_eq!(cursor, raw.len());
        let joined: String = spans.iter().map(|s| &raw[s.start..s.end]).collect();
        assert_eq!(joined, raw);
    }

    #[test]
    fn cited_items_are_trained() {
        let t = two_step(Contract::yes(&[1, 3]));
        let raw = t.raw_text.as_deref().unwrap();
        let spans = compute_masks(&t).unwrap();
        assert_tiles(raw, &spans);
        let train = text_of_kind(raw, &spans, MaskKind::Train);
        let masked = text_of_kind(raw, &spans, MaskKind::Mask);
        assert!(train.contains("passage number 1") && train.contains("passage number 3"));
        for i in [2, 4, 5] {
            assert!(masked.contains(&format!("passage number {i}")));
        }
        assert!(masked.contains("title 1"));
        assert!(train.contains("<think>") && train.contains("<answer>a</answer>"));
    }

    #[test]
    fn null_refs_mask_everything() {
        let t = two_step(Contract::no());
        let raw = t.raw_text.as_deref().unwrap();
        let spans = compute_masks(&t).unwrap();
        assert_tiles(raw, &spans);
        assert!(!text_of_kind(raw, &spans, MaskKind::Train).contains("passage"));
        let mut no_layout = t.clone();
        no_layout.layout = None;
        assert_eq!(compute_masks(&no_layout).unwrap(), spans);
    }

    #[test]
    fn missing_offsets() {
        let t = Trajectory::new("q", vec![], None);
        assert!(matches!(compute_masks(&t), Err(MaskError::MissingOffsets)));
    }
}
