use std::collections::BTreeMap;

use serde::Serialize;

use super::{Contract, ProxyResponse, Refs, Step, ToolCall, Trajectory};

#[derive(Serialize)]
struct Payload<'a> {
    name: &'a str,
    arguments: &'a BTreeMap<String, String>,
}

// `<` only occurs inside JSON strings, so escaping it keeps payloads free of tag tokens.
fn json_text<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value)
        .expect("protocol values serialize to JSON")
        .replace('<', "\\u003c")
}

pub(crate) fn contract_text(contract: &Contract) -> String {
    let refs = match &contract.refs {
        Refs::Null => "null".to_owned(),
        Refs::Ids(ids) => ids.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(","),
    };
    format!("<helpful>{}</helpful><ref>{refs}</ref>", contract.helpful.as_str())
}

pub(crate) fn tool_call_text(call: &ToolCall) -> String {
    json_text(&Payload {
        name: call.tool.name(),
        arguments: &call.arguments,
    })
}

pub(crate) fn response_text(response: &ProxyResponse) -> String {
    json_text(&response.items)
}

fn write_step(out: &mut String, step: &Step) {
    out.push_str("<think>");
    if let Some(contract) = &step.contract {
        out.push_str(&contract_text(contract));
        if !step.think.is_empty() {
            out.push('\n');
        }
    }
    out.push_str(&step.think);
    out.push_str("</think>\n");
    if let Some(call) = &step.tool_call {
        out.push_str("<tool_call>");
        out.push_str(&tool_call_text(call));
        out.push_str("</tool_call>\n");
        out.push_str("<tool_response>");
        out.push_str(&response_text(step.tool_response.as_ref().unwrap_or(&ProxyResponse::default())));
        out.push_str("</tool_response>\n");
    }
}

/// Canonical tagged text for a trajectory. The query is not part of the rollout text.
pub fn serialize_trajectory(t: &Trajectory) -> String {
    let mut out = String::new();
    for step in &t.steps {
        write_step(&mut out, step);
    }
    if let Some(answer) = &t.answer {
        out.push_str("<answer>");
        out.push_str(answer);
        out.push_str("</answer>\n");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{parse_trajectory, Contract, Granularity, RefId, ReferenceItem, Source, Tool};

    fn one_step() -> Trajectory {
        Trajectory::new(
            "q",
            vec![Step {
                index: 1,
                think: "direct".into(),
                contract: None,
                tool_call: None,
                tool_response: None,
            }],
            Some("yes".into()),
        )
    }

    #[test]
    fn single_step_has_one_think_and_one_answer() {
        let text = serialize_trajectory(&one_step());
        assert_eq!(text.matches("<think>").count(), 1);
        assert_eq!(text.matches("<answer>").count(), 1);
    }

    #[test]
    fn null_marker_rendering() {
        assert_eq!(contract_text(&Contract::no()), "<helpful>no</helpful><ref>null</ref>");
        assert_eq!(contract_text(&Contract::yes(&[1, 3])), "<helpful>yes</helpful><ref>1,3</ref>");
    }

    #[test]
    fn content_with_tags_is_escaped() {
        let mut t = one_step();
        t.steps[0].tool_call = Some(ToolCall::new(Tool::WebSearch, &[("query", "<b>x</b>")]));
        t.steps[0].tool_response = Some(ProxyResponse {
            items: vec![ReferenceItem {
                id: RefId(1),
                source: Source::WebSearch,
                granularity: Granularity::Page,
                title: None,
                url: None,
                content: "see </tool_response> here".into(),
            }],
        });
        t.answer = None;
        let text = serialize_trajectory(&t);
        let back = parse_trajectory(&text).unwrap();
        assert_eq!(back.steps, t.steps);
    }
}
