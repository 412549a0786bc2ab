//! Synthetic worlds, scripted policies and an episode runner.
//!
//! A world is a set of facts "The {relation} of {subject} is {object}."
//! scattered over web pages, local documents and the triple store, with
//! one task per fact. Policies drive the environment one step at a time.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::protocol::{Contract, ProxyResponse, RefId, Refs, Helpful, Step, Tool, ToolCall, Trajectory};
use crate::registry::{parsed, Registry, RegistryError, Settings};
use crate::text;

use super::{Corpus, CorpusEntry, CorpusSource, Environment, Triple};

const SYLLABLES: &[&str] = &[
    "ka", "lo", "mer", "vin", "tas", "dor", "quo", "ris", "bel", "zan", "tor", "ish", "ve", "nor", "pel", "sku", "dra", "fen",
    "gol", "jir",
];

const RELATIONS: &[&str] = &["capital", "founder", "currency", "anthem", "emblem", "patron", "harbor", "motto"];

const FILLER: &[&str] = &[
    "Travel guides list several walking routes nearby.",
    "Seasonal markets open in spring and close in late autumn.",
    "Older maps disagree on the exact borders.",
    "Local archives hold letters from early surveyors.",
    "Visitors often arrive by the coastal railway.",
];

/// A question with its gold answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorldConfig {
    pub subjects: usize,
    pub relations_per_subject: usize,
    pub chunk_sentences: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            subjects: 24,
            relations_per_subject: 3,
            chunk_sentences: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct World {
    pub corpus: Corpus,
    pub tasks: Vec<Task>,
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn fresh_name(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    loop {
        let n = rng.gen_range(2..=3);
        let raw: String = (0..n).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
        if text::is_stopword(&raw) || !used.insert(raw.clone()) {
            continue;
        }
        return capitalize(&raw);
    }
}

pub fn fact_sentence(relation: &str, subject: &str, object: &str) -> String {
    format!("The {relation} of {subject} is {object}.")
}

pub fn question_for(relation: &str, subject: &str) -> String {
    format!("What is the {relation} of {subject}?")
}

impl World {
    /// Deterministic world for `seed`. Each fact lives on the subject's web
    /// page (half of them), in a local document, or only in the triple store.
    pub fn generate(seed: u64, cfg: WorldConfig) -> World {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut used = BTreeSet::new();
        let per = cfg.relations_per_subject.clamp(1, RELATIONS.len());
        let mut entries = Vec::new();
        let mut triples = Vec::new();
        let mut tasks = Vec::new();
        for s in 0..cfg.subjects {
            let subject = fresh_name(&mut rng, &mut used);
            let mut relations: Vec<&str> = RELATIONS.to_vec();
            relations.shuffle(&mut rng);
            let mut web = vec![format!("{subject} is a region in the northern atlas.")];
            let mut local = vec![format!("Field notes about {subject} follow.")];
            for relation in relations.into_iter().take(per) {
                let object = fresh_name(&mut rng, &mut used);
                let sentence = fact_sentence(relation, &subject, &object);
                match rng.gen_range(0..4) {
                    0 | 1 => web.push(sentence),
                    2 => local.push(sentence),
                    _ => triples.push(Triple::new(&subject, relation, &object)),
                }
                tasks.push(Task {
                    question: question_for(relation, &subject),
                    answer: object,
                });
            }
            for _ in 0..2 {
                web.push(FILLER.choose(&mut rng).unwrap().to_string());
            }
            // Links between subjects give the graph multi-entity neighborhoods.
            if s > 0 {
                let prior = entries
                    .iter()
                    .filter(|e: &&CorpusEntry| e.source == CorpusSource::Web)
                    .map(|e| e.title.clone())
                    .collect::<Vec<_>>();
                if let Some(neighbor) = prior.choose(&mut rng) {
                    triples.push(Triple::new(&subject, "neighbor", neighbor));
                }
            }
            let slug = subject.to_lowercase();
            entries.push(CorpusEntry {
                id: format!("web-{s:03}"),
                title: subject.clone(),
                url: Some(format!("https://atlas.example/{slug}")),
                body: web.join(" "),
                source: CorpusSource::Web,
            });
            entries.push(CorpusEntry {
                id: format!("local-{s:03}"),
                title: format!("{subject} notes"),
                url: None,
                body: local.join(" "),
                source: CorpusSource::Local,
            });
        }
        let corpus = Corpus::new(entries, triples, cfg.chunk_sentences).expect("generated corpus is valid");
        World { corpus, tasks }
    }
}

/// What a policy sees before acting: the question and the steps so far.
pub struct Observation<'a> {
    pub question: &'a str,
    pub steps: &'a [Step],
}

impl Observation<'_> {
    pub fn step_index(&self) -> usize {
        self.steps.len() + 1
    }

    pub fn last_response(&self) -> Option<&ProxyResponse> {
        self.steps.last().and_then(|s| s.tool_response.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Call {
        think: String,
        contract: Option<Contract>,
        call: ToolCall,
    },
    Answer {
        think: String,
        contract: Option<Contract>,
        answer: String,
    },
}

pub trait Policy: Send {
    fn act(&mut self, obs: &Observation<'_>) -> Action;
}

/// Scripted policies by name: `grounded` and `hacking`. `hacking` reads the
/// `seed` and `max_calls` settings.
pub fn policy_registry() -> Registry<dyn Policy> {
    let mut reg: Registry<dyn Policy> = Registry::new("policy");
    reg.register("grounded", |_: &Settings| Ok(Box::new(GroundedPolicy)));
    reg.register("hacking", |s: &Settings| -> Result<Box<dyn Policy>, RegistryError> {
        let seed = parsed("policy", "hacking", s, "seed", 0u64)?;
        let max_calls = parsed("policy", "hacking", s, "max_calls", 4usize)?;
        Ok(Box::new(HackingPolicy::new(seed, max_calls)))
    });
    reg
}

/// Splits "What is the {relation} of {subject}?" into its parts.
fn parse_question(question: &str) -> Option<(String, String)> {
    let rest = question.trim().strip_prefix("What is the ")?;
    let rest = rest.strip_suffix('?').unwrap_or(rest);
    let (relation, subject) = rest.split_once(" of ")?;
    Some((relation.to_owned(), subject.to_owned()))
}

fn extract_answer(question: &str, response: &ProxyResponse, cited: &[RefId]) -> Option<String> {
    let (relation, subject) = parse_question(question)?;
    let prefix = format!("The {relation} of {subject} is ");
    cited.iter().filter_map(|id| response.get(*id)).find_map(|item| {
        let at = item.content.find(&prefix)?;
        let tail = &item.content[at + prefix.len()..];
        let end = tail.find('.').unwrap_or(tail.len());
        Some(tail[..end].trim().to_owned()).filter(|a| !a.is_empty())
    })
}

/// Cites only items in the last response that carry every question term,
/// answers only from cited text, and moves on to the next tool otherwise.
pub struct GroundedPolicy;

impl GroundedPolicy {
    const PLAN: [Tool; 3] = [Tool::WebSearch, Tool::LocalSearch, Tool::KgSearch];

    fn judge(question: &str, response: Option<&ProxyResponse>) -> (Contract, Vec<RefId>) {
        let q = text::terms(question);
        let cited: Vec<RefId> = response
            .map(|r| {
                r.items
                    .iter()
                    .filter(|i| !q.is_empty() && text::overlap_fraction(&q, &text::terms(&i.content)) == 1.0)
                    .map(|i| i.id)
                    .take(3)
                    .collect()
            })
            .unwrap_or_default();
        let contract = if cited.is_empty() {
            Contract::no()
        } else {
            Contract {
                helpful: Helpful::Yes,
                refs: Refs::ids(cited.clone()).expect("distinct ids"),
            }
        };
        (contract, cited)
    }
}

impl Policy for GroundedPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Action {
        let index = obs.step_index();
        let (contract, cited) = if index == 1 {
            (None, Vec::new())
        } else {
            let (c, ids) = GroundedPolicy::judge(obs.question, obs.last_response());
            (Some(c), ids)
        };
        let found = obs.last_response().and_then(|r| extract_answer(obs.question, r, &cited));
        if let Some(answer) = found {
            return Action::Answer {
                think: format!("The cited passage states the answer: {answer}."),
                contract,
                answer,
            };
        }
        match GroundedPolicy::PLAN.get(index - 1) {
            Some(tool) => Action::Call {
                think: if index == 1 {
                    "Search for the fact directly.".to_owned()
                } else {
                    format!("No retrieved passage states it; try {}.", tool.name())
                },
                contract,
                call: ToolCall::new(tool.clone(), &[("query", obs.question)]),
            },
            None => Action::Answer {
                think: "None of the sources state the fact.".to_owned(),
                contract,
                answer: "unknown".to_owned(),
            },
        }
    }
}

/// Calls web search repeatedly, cites ids it never inspected, sometimes
/// contradicts its own verdict, and answers with a made-up name.
pub struct HackingPolicy {
    rng: ChaCha8Rng,
    calls: usize,
}

impl HackingPolicy {
    pub fn new(seed: u64, max_calls: usize) -> HackingPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let calls = rng.gen_range(1..=max_calls.max(1));
        HackingPolicy { rng, calls }
    }

    fn contract(&mut self) -> Contract {
        let n = self.rng.gen_range(1..=2);
        let ids = rand::seq::index::sample(&mut self.rng, 8, n)
            .into_iter()
            .map(|i| RefId(i as u32 + 1))
            .collect();
        let refs = Refs::ids(ids).expect("sampled ids are distinct");
        let helpful = if self.rng.gen_bool(0.25) { Helpful::No } else { Helpful::Yes };
        Contract { helpful, refs }
    }

    fn invented_name(&mut self) -> String {
        let mut used = BTreeSet::new();
        fresh_name(&mut self.rng, &mut used)
    }
}

impl Policy for HackingPolicy {
    fn act(&mut self, obs: &Observation<'_>) -> Action {
        let index = obs.step_index();
        let contract = (index > 1).then(|| self.contract());
        if index > self.calls {
            let answer = self.invented_name();
            return Action::Answer {
                think: format!("The sources clearly confirm it is {answer}."),
                contract,
                answer,
            };
        }
        let query = if index == 1 {
            obs.question.to_owned()
        } else {
            format!("{} {}", obs.question, index)
        };
        Action::Call {
            think: "Searching again to be thorough.".to_owned(),
            contract,
            call: ToolCall::new(Tool::WebSearch, &[("query", &query)]),
        }
    }
}

/// Runs one episode. Proxy errors come back to the policy as empty
/// responses. Stops after `max_steps` even without an answer.
pub fn run_episode(env: &Environment, policy: &mut dyn Policy, question: &str, max_steps: usize) -> Trajectory {
    let mut steps: Vec<Step> = Vec::new();
    let mut answer = None;
    while steps.len() < max_steps {
        let action = policy.act(&Observation { question, steps: &steps });
        let index = steps.len() + 1;
        match action {
            Action::Call { think, contract, call } => {
                let response = env.execute(&call).unwrap_or_else(|e| {
                    log::debug!("step {index}: {e}");
                    ProxyResponse::default()
                });
                steps.push(Step {
                    index,
                    think,
                    contract,
                    tool_call: Some(call),
                    tool_response: Some(response),
                });
            }
            Action::Answer { think, contract, answer: a } => {
                steps.push(Step {
                    index,
                    think,
                    contract,
                    tool_call: None,
                    tool_response: None,
                });
                answer = Some(a);
                break;
            }
        }
    }
    Trajectory::new(question, steps, answer).with_canonical_source()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub index: usize,
    pub seed: u64,
    pub task: Task,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimConfig {
    pub episodes: usize,
    pub seed: u64,
    pub max_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            episodes: 100,
            seed: 0,
            max_steps: 10,
        }
    }
}

/// Runs `cfg.episodes` episodes of the named policy. Episode `i` draws its
/// task and policy seed from `cfg.seed + i`.
pub fn simulate(
    env: &Environment,
    tasks: &[Task],
    registry: &Registry<dyn Policy>,
    policy: &str,
    settings: &Settings,
    cfg: &SimConfig,
) -> Result<Vec<Episode>, RegistryError> {
    registry.build(policy, settings)?;
    if tasks.is_empty() {
        return Ok(Vec::new());
    }
    (0..cfg.episodes)
        .map(|i| {
            let seed = cfg.seed.wrapping_add(i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let task = tasks[rng.gen_range(0..tasks.len())].clone();
            let mut s = settings.clone();
            s.entry("seed".into()).or_insert_with(|| rng.gen::<u64>().to_string());
            let mut p = registry.build(policy, &s)?;
            let trajectory = run_episode(env, p.as_mut(), &task.question, cfg.max_steps);
            Ok(Episode { index: i, seed, task, trajectory })
        })
        .collect()
}
