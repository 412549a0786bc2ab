//! Seeded generators of well-formed trajectories for tests and benchmarks.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::protocol::{Contract, Helpful, ProxyResponse, RefId, ReferenceItem, Refs, Source, Step, Tool, ToolCall, Trajectory};

const SUBJECTS: &[&str] = &["Orvane", "Kelmira", "Dastow", "Virel", "Quonta", "Belshire", "Tamsk", "Ulvero"];
const RELATIONS: &[&str] = &["capital", "founder", "currency", "anthem", "harbor", "emblem"];
const OBJECTS: &[&str] = &["Sarnet", "Plovik", "Ederwin", "Mossgate", "Yarrow", "Ticon", "Halvard", "Grenmouth"];
const OFF_TOPIC: &[&str] = &[
    "Cyclists prefer gravel routes after heavy rain.",
    "Pottery glazes crack when kilns cool too quickly.",
    "Migrating geese rest on shallow lakes overnight.",
    "Chess clocks were standardized for tournament play.",
    "Bread dough rises faster in warm kitchens.",
    "Lighthouse keepers logged weather every few hours.",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixtureConfig {
    pub min_steps: usize,
    pub max_steps: usize,
    pub max_items: usize,
    /// Chance that a contract breaks consistency or cites an absent id.
    pub fault_rate: f64,
    /// Chance that an item states the fact rather than filler.
    pub relevant_rate: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            min_steps: 1,
            max_steps: 8,
            max_items: 5,
            fault_rate: 0.25,
            relevant_rate: 0.4,
        }
    }
}

impl FixtureConfig {
    /// Every step contract passes.
    pub fn clean(min_steps: usize, max_steps: usize) -> FixtureConfig {
        FixtureConfig {
            min_steps,
            max_steps,
            fault_rate: 0.0,
            ..FixtureConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub trajectory: Trajectory,
    pub gold: String,
}

struct Fact {
    question: String,
    sentence: String,
    answer: String,
}

fn fact<R: Rng>(rng: &mut R) -> Fact {
    let subject = SUBJECTS.choose(rng).unwrap();
    let relation = RELATIONS.choose(rng).unwrap();
    let object = OBJECTS.choose(rng).unwrap();
    Fact {
        question: format!("What is the {relation} of {subject}?"),
        sentence: format!("The {relation} of {subject} is {object}."),
        answer: object.to_string(),
    }
}

fn tool_call<R: Rng>(rng: &mut R, tool: &Tool, question: &str) -> ToolCall {
    match tool {
        Tool::Browser => ToolCall::new(Tool::Browser, &[("url", &format!("https://fixture.example/{}", rng.gen_range(0..100)))]),
        other => ToolCall::new(other.clone(), &[("query", question)]),
    }
}

fn item(id: u32, source: Source, content: String) -> ReferenceItem {
    ReferenceItem {
        id: RefId(id),
        source,
        granularity: source.granularity(),
        title: Some(format!("Result {id}")),
        url: (source != Source::KgSearch).then(|| format!("https://fixture.example/{id}")),
        content,
    }
}

/// Response with `n` items; `relevant` picks which items state the fact.
pub fn response_with(source: Source, fact_sentence: &str, relevant: &[bool]) -> ProxyResponse {
    ProxyResponse {
        items: relevant
            .iter()
            .enumerate()
            .map(|(i, rel)| {
                let content = if *rel {
                    format!("{fact_sentence} Records confirm this.")
                } else {
                    OFF_TOPIC[i % OFF_TOPIC.len()].to_owned()
                };
                item(i as u32 + 1, source, content)
            })
            .collect(),
    }
}

fn contract<R: Rng>(rng: &mut R, prior: &ProxyResponse, relevant: &[bool], fault_rate: f64) -> Contract {
    if rng.gen_bool(fault_rate) {
        return match rng.gen_range(0..3) {
            0 => Contract {
                helpful: Helpful::Yes,
                refs: Refs::Null,
            },
            1 => Contract {
                helpful: Helpful::No,
                refs: Refs::ids(vec![RefId(1)]).unwrap(),
            },
            _ => Contract::yes(&[prior.items.len() as u32 + 1 + rng.gen_range(0..3)]),
        };
    }
    let cited: Vec<u32> = prior
        .items
        .iter()
        .zip(relevant)
        .filter(|(_, rel)| **rel)
        .map(|(i, _)| i.id.0)
        .collect();
    if cited.is_empty() || rng.gen_bool(0.1) {
        Contract::no()
    } else {
        Contract::yes(&cited)
    }
}

/// A well-formed rollout with a terminal answer. Contracts cite the items
/// that state the fact unless a fault is injected.
pub fn random_fixture<R: Rng>(rng: &mut R, cfg: &FixtureConfig) -> Fixture {
    let f = fact(rng);
    let t_len = rng.gen_range(cfg.min_steps..=cfg.max_steps);
    let mut steps: Vec<Step> = Vec::with_capacity(t_len);
    let mut prior: Option<(ProxyResponse, Vec<bool>)> = None;
    for index in 1..=t_len {
        let contract = match (&prior, index) {
            (_, 1) => rng.gen_bool(0.5).then(Contract::no),
            (Some((resp, rel)), _) => Some(contract(rng, resp, rel, cfg.fault_rate)),
            (None, _) => Some(Contract::no()),
        };
        let mut step = Step {
            index,
            think: format!("Reasoning for step {index}."),
            contract,
            tool_call: None,
            tool_response: None,
        };
        if index < t_len {
            let tool = Tool::REGISTERED.choose(rng).unwrap().clone();
            let source = tool.source().unwrap();
            let n = rng.gen_range(0..=cfg.max_items);
            let relevant: Vec<bool> = (0..n).map(|_| rng.gen_bool(cfg.relevant_rate)).collect();
            let response = response_with(source, &f.sentence, &relevant);
            step.tool_call = Some(tool_call(rng, &tool, &f.question));
            step.tool_response = Some(response.clone());
            prior = Some((response, relevant));
        }
        steps.push(step);
    }
    let answer = match rng.gen_range(0..3) {
        0 => f.answer.clone(),
        1 => format!("{} perhaps", f.answer),
        _ => OBJECTS.choose(rng).unwrap().to_string(),
    };
    Fixture {
        trajectory: Trajectory::new(f.question, steps, Some(answer)).with_canonical_source(),
        gold: f.answer,
    }
}

/// Two-step rollout whose step 2 says yes and cites exactly the items that
/// state the fact; the other items are off-topic.
pub fn grounded_yes_fixture<R: Rng>(rng: &mut R) -> Fixture {
    let f = fact(rng);
    let n = rng.gen_range(1..=5);
    let mut relevant: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
    let k = rng.gen_range(0..n);
    relevant[k] = true;
    two_step(rng, f, &relevant, |resp, rel| {
        let ids: Vec<u32> = resp.items.iter().zip(rel).filter(|(_, r)| **r).map(|(i, _)| i.id.0).collect();
        Contract::yes(&ids)
    })
}

/// Two-step rollout whose step 2 says no about a response with no item
/// stating the fact.
pub fn off_topic_no_fixture<R: Rng>(rng: &mut R) -> Fixture {
    let f = fact(rng);
    let n = rng.gen_range(1..=5);
    two_step(rng, f, &vec![false; n], |_, _| Contract::no())
}

fn two_step<R: Rng>(rng: &mut R, f: Fact, relevant: &[bool], make: impl Fn(&ProxyResponse, &[bool]) -> Contract) -> Fixture {
    let tool = Tool::REGISTERED.choose(rng).unwrap().clone();
    let response = response_with(tool.source().unwrap(), &f.sentence, relevant);
    let contract = make(&response, relevant);
    let steps = vec![
        Step {
            index: 1,
            think: "Look it up.".into(),
            contract: None,
            tool_call: Some(tool_call(rng, &tool, &f.question)),
            tool_response: Some(response),
        },
        Step {
            index: 2,
            think: "Answer from the evidence.".into(),
            contract: Some(contract),
            tool_call: None,
            tool_response: None,
        },
    ];
    Fixture {
        trajectory: Trajectory::new(f.question, steps, Some(f.answer.clone())).with_canonical_source(),
        gold: f.answer,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validation::{check_format, check_steps};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fixtures_are_well_formed() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let f = random_fixture(&mut rng, &FixtureConfig::default());
            assert!(check_format(&f.trajectory).valid, "{:?}", check_format(&f.trajectory));
            assert!(f.trajectory.layout.is_some());
        }
    }

    #[test]
    fn clean_fixtures_pass_every_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let f = random_fixture(&mut rng, &FixtureConfig::clean(3, 10));
            assert!(check_steps(&f.trajectory).iter().all(|(_, v)| v.passed));
        }
    }
}
