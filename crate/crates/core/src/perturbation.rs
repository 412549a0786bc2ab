//! Reference-linked evidence perturbations.
//!
//! A step that declared `helpful=yes` has its cited items replaced by
//! topic-unrelated text; a step that declared `helpful=no` gets one returned
//! item swapped for a query-relevant lure. The helpfulness oracle is queried on
//! the real and perturbed response and the signed change is recorded. All
//! perturbations operate on copies; the trajectory is never modified.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::oracle::{checked_p_yes, HelpfulnessContext, HelpfulnessOracle, OracleError};
use crate::protocol::{Helpful, ProxyResponse, RefId, ReferenceItem, Step, Trajectory};
use crate::registry::{Registry, Settings};
use crate::text;
use crate::validation::check_step;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PerturbError {
    #[error("perturber failed: {0}")]
    Generator(String),
    #[error("perturbation precondition violated at step {step}: {reason}")]
    Precondition { step: usize, reason: String },
}

/// Produces replacement evidence text.
pub trait Perturber: Send + Sync {
    /// Topic-unrelated replacements, one per input item, in order.
    fn degrade(&self, items: &[ReferenceItem], question: &str, seed: u64) -> Result<Vec<String>, PerturbError>;

    /// A plausible, query-relevant replacement for `target`.
    fn lure(&self, target: &ReferenceItem, question: &str, seed: u64) -> Result<String, PerturbError>;
}

const OFF_TOPIC_POOL: &[&str] = &[
    "Sourdough bread relies on wild yeast and lactic bacteria to rise slowly overnight.",
    "Octopuses have three hearts and blue blood rich in copper-based hemocyanin.",
    "Regular tire rotation evens out tread wear on front-wheel-drive cars.",
    "Bamboo is a grass; some species grow nearly a meter in a single day.",
    "Origami cranes are folded from a single square sheet without cutting.",
    "Lighthouse keepers once trimmed lamp wicks every few hours through the night.",
    "Honeybees communicate flower locations through a figure-eight waggle dance.",
    "Cast-iron skillets need seasoning with thin layers of polymerized oil.",
    "Marathon runners often taper training mileage in the final weeks before racing.",
    "Glaciers carve U-shaped valleys as compacted ice creeps downhill.",
    "Chess clocks limit thinking time so games finish within a scheduled session.",
    "Coral reefs form from calcium carbonate skeletons built by tiny polyps.",
];

const LURE_TEMPLATES: &[&str] = &[
    "Several recent summaries state that {terms} are directly connected, and this is widely cited as the answer.",
    "An overview of {terms} reports the relevant fact plainly, according to commonly shared sources.",
    "Background notes on {terms} describe exactly what the question asks about.",
];

/// Built-in perturber: degrades with a fixed pool of off-topic paragraphs and
/// builds lures from the question's salient terms.
#[derive(Debug, Clone)]
pub struct PoolPerturber {
    pool: Vec<String>,
}

impl Default for PoolPerturber {
    fn default() -> Self {
        PoolPerturber {
            pool: OFF_TOPIC_POOL.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl PoolPerturber {
    pub fn with_pool(pool: Vec<String>) -> PoolPerturber {
        PoolPerturber { pool }
    }
}

impl Perturber for PoolPerturber {
    fn degrade(&self, items: &[ReferenceItem], question: &str, seed: u64) -> Result<Vec<String>, PerturbError> {
        let question_terms = text::terms(question);
        let unrelated: Vec<&String> = self
            .pool
            .iter()
            .filter(|p| text::terms(p).is_disjoint(&question_terms))
            .collect();
        if unrelated.is_empty() {
            return Err(PerturbError::Generator("no pool paragraph is unrelated to the question".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        items
            .iter()
            .map(|item| {
                let start = rng.gen_range(0..unrelated.len());
                (0..unrelated.len())
                    .map(|k| unrelated[(start + k) % unrelated.len()])
                    .find(|p| **p != item.content)
                    .cloned()
                    .ok_or_else(|| PerturbError::Generator("pool has no replacement distinct from the original".into()))
            })
            .collect()
    }

    fn lure(&self, target: &ReferenceItem, question: &str, seed: u64) -> Result<String, PerturbError> {
        let mut seen = std::collections::BTreeSet::new();
        let salient: Vec<String> = text::tokens(question)
            .into_iter()
            .filter(|t| !text::is_stopword(t) && seen.insert(t.clone()))
            .collect();
        let terms = if salient.is_empty() {
            question.trim().to_owned()
        } else {
            salient.join(" ")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let template = LURE_TEMPLATES[rng.gen_range(0..LURE_TEMPLATES.len())];
        let lure = template.replace("{terms}", &terms);
        if lure == target.content {
            Ok(format!("{lure} (summary)"))
        } else {
            Ok(lure)
        }
    }
}

/// Perturbers by name: `pool`.
pub fn perturber_registry() -> Registry<dyn Perturber> {
    let mut reg: Registry<dyn Perturber> = Registry::new("perturber");
    reg.register("pool", |_: &Settings| Ok(Box::new(PoolPerturber::default())));
    reg
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbationCase {
    YesDegrade,
    NoLure,
}

impl PerturbationCase {
    /// Direction of the expected probability change: degrading support should
    /// lower p(yes), a lure should raise it.
    pub fn sign(self) -> f64 {
        match self {
            PerturbationCase::YesDegrade => -1.0,
            PerturbationCase::NoLure => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRecord {
    pub step_index: usize,
    pub case: PerturbationCase,
    pub replaced_ids: Vec<RefId>,
    pub q_before: f64,
    pub q_after: f64,
    pub signed_delta: f64,
}

impl PerturbationRecord {
    pub fn new(step_index: usize, case: PerturbationCase, replaced_ids: Vec<RefId>, q_before: f64, q_after: f64) -> Self {
        PerturbationRecord {
            step_index,
            case,
            replaced_ids,
            q_before,
            q_after,
            // Adding zero turns a negative zero into a positive one.
            signed_delta: case.sign() * (q_after - q_before) + 0.0,
        }
    }
}

/// Replaces the content of every item cited by a `helpful=yes` step.
pub fn perturb_yes(step: &Step, prior: &ProxyResponse, perturber: &dyn Perturber, question: &str, seed: u64) -> Result<ProxyResponse, PerturbError> {
    let violated = |reason: &str| PerturbError::Precondition {
        step: step.index,
        reason: reason.to_owned(),
    };
    let contract = step.contract.as_ref().ok_or_else(|| violated("step has no contract"))?;
    if contract.helpful != Helpful::Yes || contract.refs.is_null() {
        return Err(violated("degradation needs helpful=yes with citations"));
    }
    let cited: Vec<ReferenceItem> = contract
        .refs
        .as_slice()
        .iter()
        .map(|id| prior.get(*id).cloned().ok_or_else(|| violated(&format!("cited id {id} is not in the response"))))
        .collect::<Result<_, _>>()?;
    let replacements = perturber.degrade(&cited, question, seed)?;
    if replacements.len() != cited.len() {
        return Err(PerturbError::Generator(format!(
            "degrade returned {} replacements for {} items",
            replacements.len(),
            cited.len()
        )));
    }
    let mut perturbed = prior.clone();
    for (item, replacement) in cited.iter().zip(replacements) {
        if let Some(slot) = perturbed.items.iter_mut().find(|i| i.id == item.id) {
            slot.content = replacement;
        }
    }
    Ok(perturbed)
}

/// Replaces one uniformly chosen item of the response with a semantic lure.
pub fn perturb_no(step: &Step, prior: &ProxyResponse, perturber: &dyn Perturber, question: &str, seed: u64) -> Result<(ProxyResponse, RefId), PerturbError> {
    let violated = |reason: &str| PerturbError::Precondition {
        step: step.index,
        reason: reason.to_owned(),
    };
    match &step.contract {
        Some(c) if c.helpful == Helpful::No => {}
        _ => return Err(violated("lure injection needs helpful=no")),
    }
    if prior.is_empty() {
        return Err(violated("response has no items to replace"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = rng.gen_range(0..prior.items.len());
    let target = &prior.items[pick];
    let lure = perturber.lure(target, question, seed)?;
    let mut perturbed = prior.clone();
    perturbed.items[pick].content = lure;
    Ok((perturbed, target.id))
}

/// Steps in 2..=T whose contract passes all three predicates.
pub fn passing_steps(t: &Trajectory) -> Vec<usize> {
    t.steps
        .iter()
        .skip(1)
        .filter(|s| check_step(s, t.prior_response(s.index)).passed)
        .map(|s| s.index)
        .collect()
}

/// Uniform sample of `b` passing steps, without replacement, in sampled order.
pub fn select_perturb_steps(t: &Trajectory, b: usize, seed: u64) -> Vec<usize> {
    let population = passing_steps(t);
    let b = b.min(population.len());
    if b == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, population.len(), b)
        .into_iter()
        .map(|i| population[i])
        .collect()
}

/// Seed used for the perturbation of one step, derived from the rollout seed.
pub fn step_seed(seed: u64, step_index: usize) -> u64 {
    seed ^ (step_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ProbeError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
}

/// Perturbs the evidence behind one step and measures the oracle's response.
///
/// Returns the record together with the perturbed response. A `helpful=no`
/// step whose prior response is empty has nothing to replace; it yields a
/// zero delta without a perturbed copy.
pub fn probe_step(
    t: &Trajectory,
    step_index: usize,
    oracle: &dyn HelpfulnessOracle,
    perturber: &dyn Perturber,
    seed: u64,
) -> Result<(PerturbationRecord, Option<ProxyResponse>), ProbeError> {
    let step = t.step(step_index).ok_or_else(|| PerturbError::Precondition {
        step: step_index,
        reason: "no such step".into(),
    })?;
    let contract = step.contract.as_ref().ok_or_else(|| PerturbError::Precondition {
        step: step_index,
        reason: "step has no contract".into(),
    })?;
    let empty = ProxyResponse::default();
    let prior = t.prior_response(step_index).unwrap_or(&empty);
    let prefix = &t.steps[..step_index - 1];
    let ask = |response: &ProxyResponse| {
        checked_p_yes(
            oracle,
            &HelpfulnessContext {
                question: &t.query,
                step_index,
                prefix,
                response,
            },
        )
    };
    let q_before = ask(prior)?;
    match contract.helpful {
        Helpful::Yes => {
            let perturbed = perturb_yes(step, prior, perturber, &t.query, seed)?;
            let q_after = ask(&perturbed)?;
            let ids = contract.refs.as_slice().to_vec();
            Ok((PerturbationRecord::new(step_index, PerturbationCase::YesDegrade, ids, q_before, q_after), Some(perturbed)))
        }
        Helpful::No if prior.is_empty() => Ok((PerturbationRecord::new(step_index, PerturbationCase::NoLure, Vec::new(), q_before, q_before), None)),
        Helpful::No => {
            let (perturbed, id) = perturb_no(step, prior, perturber, &t.query, seed)?;
            let q_after = ask(&perturbed)?;
            Ok((PerturbationRecord::new(step_index, PerturbationCase::NoLure, vec![id], q_before, q_after), Some(perturbed)))
        }
    }
}
