//! Rollout rewards: citation, perturbation sensitivity, answer-citation
//! alignment, answer F1, and the combined scalar.

mod f1;

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::oracle::{checked_judge, HelpfulnessOracle, JudgeOracle, OracleError};
use crate::perturbation::{self, PerturbError, PerturbationRecord, Perturber, ProbeError};
use crate::protocol::{Helpful, ReferenceItem, Step, Trajectory};
use crate::validation::{check_format, check_step};

pub use f1::reward_ans_f1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Perturber(#[from] PerturbError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("trajectory has no answer")]
    MissingAnswer,
}

impl From<ProbeError> for RewardError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Oracle(e) => RewardError::Oracle(e),
            ProbeError::Perturb(e) => RewardError::Perturber(e),
        }
    }
}

/// Per-step and rollout-level reward values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// +1 / -1 for steps 2..=T, in order.
    pub cite_steps: Vec<f64>,
    pub cite: f64,
    /// Absent when no step could be perturbed; counts as 0 in `final`.
    pub pt: Option<f64>,
    /// Absent only when the rollout has no answer.
    pub ac: Option<f64>,
    pub ans_f1: f64,
    pub a: f64,
    #[serde(rename = "final")]
    pub final_reward: f64,
    pub format_valid: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<PerturbationRecord>,
}

impl RewardBreakdown {
    /// Assembles the derived fields from the component rewards.
    pub fn compose(cite_steps: Vec<f64>, pt: Option<f64>, ac: Option<f64>, ans_f1: f64, format_valid: bool) -> RewardBreakdown {
        let cite = mean_or_zero(&cite_steps);
        let a = (ac.unwrap_or(0.0) + ans_f1) / 2.0;
        let final_reward = if format_valid {
            (cite + pt.unwrap_or(0.0) + a) / 3.0
        } else {
            -1.0
        };
        RewardBreakdown {
            cite_steps,
            cite,
            pt,
            ac,
            ans_f1,
            a,
            final_reward,
            format_valid,
            perturbations: Vec::new(),
        }
    }
}

fn mean_or_zero(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// +1 when the step passes all three contract predicates, -1 otherwise.
pub fn reward_cite_step(step: &Step, prior: Option<&crate::protocol::ProxyResponse>) -> f64 {
    if check_step(step, prior).passed {
        1.0
    } else {
        -1.0
    }
}

/// Step citation rewards for steps 2..=T.
pub fn cite_step_rewards(t: &Trajectory) -> Vec<f64> {
    t.steps
        .iter()
        .skip(1)
        .map(|s| reward_cite_step(s, t.prior_response(s.index)))
        .collect()
}

/// Mean step citation reward over steps 2..=T; 0 for single-step rollouts.
pub fn reward_cite_rollout(t: &Trajectory) -> f64 {
    mean_or_zero(&cite_step_rewards(t))
}

/// B = min(T - 1, b_max, number of passing steps).
pub fn perturbation_budget(t: &Trajectory, b_max: usize) -> usize {
    let passing = cite_step_rewards(t).iter().filter(|r| **r == 1.0).count();
    t.len().saturating_sub(1).min(b_max).min(passing)
}

/// Probes B sampled passing steps and returns their records in sampled order.
pub fn perturbation_records(
    t: &Trajectory,
    b_max: usize,
    oracle: &dyn HelpfulnessOracle,
    perturber: &dyn Perturber,
    seed: u64,
) -> Result<Vec<PerturbationRecord>, RewardError> {
    let budget = perturbation_budget(t, b_max);
    perturbation::select_perturb_steps(t, budget, seed)
        .into_iter()
        .map(|index| {
            perturbation::probe_step(t, index, oracle, perturber, perturbation::step_seed(seed, index))
                .map(|(record, _)| record)
                .map_err(RewardError::from)
        })
        .collect()
}

/// Mean signed sensitivity over the sampled steps; `None` when B = 0.
pub fn reward_pt(
    t: &Trajectory,
    b_max: usize,
    oracle: &dyn HelpfulnessOracle,
    perturber: &dyn Perturber,
    seed: u64,
) -> Result<Option<f64>, RewardError> {
    let records = perturbation_records(t, b_max, oracle, perturber, seed)?;
    Ok(mean_of_records(&records))
}

fn mean_of_records(records: &[PerturbationRecord]) -> Option<f64> {
    if records.is_empty() {
        None
    } else {
        Some(records.iter().map(|r| r.signed_delta).sum::<f64>() / records.len() as f64)
    }
}

/// Items cited by `helpful=yes` steps, resolved against the response each
/// step refers to. Duplicates (same source, id and content) are dropped.
pub fn evidence_set(t: &Trajectory) -> Vec<ReferenceItem> {
    let mut seen = HashSet::new();
    let mut evidence = Vec::new();
    for step in t.steps.iter().skip(1) {
        let Some(contract) = &step.contract else { continue };
        if contract.helpful != Helpful::Yes {
            continue;
        }
        let Some(prior) = t.prior_response(step.index) else { continue };
        for id in contract.refs.as_slice() {
            if let Some(item) = prior.get(*id) {
                if seen.insert((item.source, item.id, item.content.clone())) {
                    evidence.push(item.clone());
                }
            }
        }
    }
    evidence
}

/// Judge score of the answer against the cited evidence; 0 for single-step
/// rollouts or when no step passes the citation checks.
pub fn reward_ac(t: &Trajectory, judge: &dyn JudgeOracle) -> Result<f64, RewardError> {
    let answer = t.answer.as_deref().ok_or(RewardError::MissingAnswer)?;
    if t.len() <= 1 || !cite_step_rewards(t).contains(&1.0) {
        return Ok(0.0);
    }
    Ok(checked_judge(judge, &t.query, answer, &evidence_set(t))?)
}

/// Combined reward; -1 whenever the rollout format is invalid.
pub fn reward_final(t: &Trajectory, parts: &RewardBreakdown) -> f64 {
    if check_format(t).valid {
        (parts.cite + parts.pt.unwrap_or(0.0) + parts.a) / 3.0
    } else {
        -1.0
    }
}

/// Oracles and settings used to score rollouts.
#[derive(Clone, Copy)]
pub struct Scorer<'a> {
    pub oracle: &'a dyn HelpfulnessOracle,
    pub judge: &'a dyn JudgeOracle,
    pub perturber: &'a dyn Perturber,
    pub b_max: usize,
    pub seed: u64,
}

impl<'a> Scorer<'a> {
    /// Full breakdown for one rollout. Oracles are not consulted when the
    /// format is invalid, since the final reward is then fixed at -1.
    pub fn score(&self, t: &Trajectory, gold: &str) -> Result<RewardBreakdown, RewardError> {
        let format_valid = check_format(t).valid;
        let cite_steps = cite_step_rewards(t);
        let ans_f1 = match &t.answer {
            Some(answer) => reward_ans_f1(answer, gold)?,
            None => {
                reward_ans_f1("", gold)?;
                0.0
            }
        };
        if !format_valid {
            return Ok(RewardBreakdown::compose(cite_steps, None, None, ans_f1, false));
        }
        let records = perturbation_records(t, self.b_max, self.oracle, self.perturber, self.seed)?;
        let ac = reward_ac(t, self.judge)?;
        let mut breakdown = RewardBreakdown::compose(cite_steps, mean_of_records(&records), Some(ac), ans_f1, true);
        breakdown.perturbations = records;
        Ok(breakdown)
    }

    /// Scores rollouts in parallel; output order follows input order.
    pub fn score_batch(&self, rollouts: &[(Trajectory, String)]) -> Vec<Result<RewardBreakdown, RewardError>> {
        rollouts.par_iter().map(|(t, gold)| self.score(t, gold)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{ConstantJudge, ConstantOracle, OverlapJudge, OverlapOracle};
    use crate::perturbation::PoolPerturber;
    use crate::protocol::{Contract, Granularity, ProxyResponse, RefId, Source, Tool, ToolCall};

    fn response(contents: &[&str]) -> ProxyResponse {
        ProxyResponse {
            items: contents
                .iter()
                .enumerate()
                .map(|(i, c)| ReferenceItem {
                    id: RefId(i as u32 + 1),
                    source: Source::LocalSearch,
                    granularity: Granularity::Chunk,
                    title: None,
                    url: None,
                    content: c.to_string(),
                })
                .collect(),
        }
    }

    const DOCS: [&str; 3] = [
        "Paris is the capital of France.",
        "Bananas are yellow.",
        "France borders Spain.",
    ];

    /// Rollout with one search step per contract plus an answering step.
    fn rollout(contracts: &[Contract], answer: Option<&str>) -> Trajectory {
        let mut steps = Vec::new();
        for i in 0..=contracts.len() {
            let last = i == contracts.len();
            steps.push(Step {
                index: i + 1,
                think: "reason".into(),
                contract: i.checked_sub(1).map(|k| contracts[k].clone()),
                tool_call: (!last).then(|| ToolCall::new(Tool::LocalSearch, &[("query", "capital of France")])),
                tool_response: (!last).then(|| response(&DOCS)),
            });
        }
        Trajectory::new("What is the capital of France?", steps, answer.map(String::from))
    }

    fn single_step(answer: &str) -> Trajectory {
        Trajectory::new(
            "What is the capital of France?",
            vec![Step {
                index: 1,
                think: "I know this".into(),
                contract: None,
                tool_call: None,
                tool_response: None,
            }],
            Some(answer.into()),
        )
    }

    #[test]
    fn cite_rollout_means() {
        assert_eq!(reward_cite_rollout(&single_step("Paris")), 0.0);
        let t = rollout(&[Contract::yes(&[1]), Contract::yes(&[1, 3])], Some("Paris"));
        assert_eq!(t.len(), 3);
        assert_eq!(reward_cite_rollout(&t), 1.0);
        let t = rollout(&[Contract::yes(&[1]), Contract::yes(&[9]), Contract::no()], Some("Paris"));
        assert_eq!(cite_step_rewards(&t), vec![1.0, -1.0, 1.0]);
        assert!((reward_cite_rollout(&t) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn budget() {
        let t = rollout(&[Contract::yes(&[1]), Contract::yes(&[9]), Contract::no(), Contract::yes(&[2])], Some("x"));
        assert_eq!(t.len(), 5);
        assert_eq!(perturbation_budget(&t, 1), 1);
        assert_eq!(perturbation_budget(&single_step("x"), 3), 0);
        let t = rollout(&[Contract::yes(&[1]), Contract::no()], Some("x"));
        assert_eq!(perturbation_budget(&t, 2), 2);
    }

    #[test]
    fn pt_yes_and_no_cases() {
        let t = rollout(&[Contract::yes(&[1]), Contract::no()], Some("Paris"));
        let records = perturbation_records(&t, 2, &OverlapOracle::default(), &PoolPerturber::default(), 4).unwrap();
        assert_eq!(records.len(), 2);
        for r in &records {
            match r.case {
                perturbation::PerturbationCase::YesDegrade => assert!(r.q_after < r.q_before),
                perturbation::PerturbationCase::NoLure => assert!(r.q_after >= r.q_before),
            }
        }
        let pt = reward_pt(&t, 2, &OverlapOracle::default(), &PoolPerturber::default(), 4).unwrap().unwrap();
        let mean = records.iter().map(|r| r.signed_delta).sum::<f64>() / 2.0;
        assert!((pt - mean).abs() < 1e-15);
    }

    #[test]
    fn pt_absent_without_budget() {
        assert_eq!(reward_pt(&single_step("x"), 1, &ConstantOracle(0.5), &PoolPerturber::default(), 0).unwrap(), None);
        let t = rollout(&[Contract::yes(&[9])], Some("x"));
        assert_eq!(reward_pt(&t, 1, &ConstantOracle(0.5), &PoolPerturber::default(), 0).unwrap(), None);
    }

    #[test]
    fn pt_rejects_out_of_range_oracle() {
        let t = rollout(&[Contract::yes(&[1])], Some("x"));
        assert!(matches!(reward_pt(&t, 1, &ConstantOracle(2.0), &PoolPerturber::default(), 0), Err(RewardError::Oracle(_))));
    }

    #[test]
    fn ac_gates() {
        assert_eq!(reward_ac(&single_step("Paris"), &ConstantJudge(1.0)).unwrap(), 0.0);
        let failing = rollout(&[Contract::yes(&[9])], Some("Paris"));
        assert_eq!(reward_ac(&failing, &ConstantJudge(1.0)).unwrap(), 0.0);
        let t = rollout(&[Contract::yes(&[1])], Some("Paris"));
        assert_eq!(reward_ac(&t, &ConstantJudge(0.5)).unwrap(), 0.5);
        assert_eq!(reward_ac(&t, &OverlapJudge).unwrap(), 1.0);
        assert!(reward_ac(&t, &ConstantJudge(0.3)).is_err());
    }

    #[test]
    fn evidence_union_dedups() {
        let t = rollout(&[Contract::yes(&[1, 3]), Contract::yes(&[1]), Contract::no()], Some("Paris"));
        let ev = evidence_set(&t);
        let ids: Vec<u32> = ev.iter().map(|i| i.id.0).collect();
        assert_eq!(ids, vec![1, 3]);
    }

    #[test]
    fn final_arithmetic() {
        let b = RewardBreakdown::compose(vec![1.0], Some(0.7), Some(0.6), 1.0, true);
        assert!((b.a - 0.8).abs() < 1e-15);
        assert!((b.final_reward - 2.5 / 3.0).abs() < 1e-12);
        let t = rollout(&[Contract::yes(&[1])], Some("Paris"));
        assert!((reward_final(&t, &b) - 2.5 / 3.0).abs() < 1e-12);
        let broken = rollout(&[Contract::yes(&[1])], None);
        assert_eq!(reward_final(&broken, &b), -1.0);
    }

    #[test]
    fn single_step_composition() {
        let t = single_step("Paris France");
        let scorer = Scorer {
            oracle: &OverlapOracle::default(),
            judge: &ConstantJudge(1.0),
            perturber: &PoolPerturber::default(),
            b_max: 1,
            seed: 0,
        };
        let b = scorer.score(&t, "Paris").unwrap();
        // F1: P = 1/2, R = 1 -> 2/3; a = (0 + 2/3) / 2; final = a / 3.
        assert_eq!(b.cite, 0.0);
        assert_eq!(b.pt, None);
        assert_eq!(b.ac, Some(0.0));
        assert!((b.a - 1.0 / 3.0).abs() < 1e-12);
        assert!((b.final_reward - 1.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_format_gate_ignores_oracles() {
        let t = rollout(&[Contract::yes(&[1])], None);
        let scorer = Scorer {
            oracle: &ConstantOracle(5.0),
            judge: &ConstantJudge(7.0),
            perturber: &PoolPerturber::default(),
            b_max: 3,
            seed: 0,
        };
        let b = scorer.score(&t, "Paris").unwrap();
        assert_eq!(b.final_reward, -1.0);
        assert!(!b.format_valid);
    }

    #[test]
    fn empty_gold_is_error() {
        let scorer = Scorer {
            oracle: &OverlapOracle::default(),
            judge: &OverlapJudge,
            perturber: &PoolPerturber::default(),
            b_max: 1,
            seed: 0,
        };
        assert!(matches!(scorer.score(&single_step("x"), ""), Err(RewardError::Config(_))));
    }

    #[test]
    fn batch_matches_sequential() {
        let scorer = Scorer {
            oracle: &OverlapOracle::default(),
            judge: &OverlapJudge,
            perturber: &PoolPerturber::default(),
            b_max: 2,
            seed: 17,
        };
        let items: Vec<(Trajectory, String)> = vec![
            (rollout(&[Contract::yes(&[1]), Contract::no()], Some("Paris")), "Paris".into()),
            (single_step("Lyon"), "Paris".into()),
            (rollout(&[Contract::yes(&[2])], Some("Bananas")), "Paris".into()),
        ];
        let batch = scorer.score_batch(&items);
        for ((t, g), b) in items.iter().zip(batch) {
            assert_eq!(b.unwrap(), scorer.score(t, g).unwrap());
        }
    }
}
