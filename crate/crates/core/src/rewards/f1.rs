use std::collections::HashMap;

use crate::text;

use super::RewardError;

/// Token-level F1 between a predicted and a gold answer after normalization.
pub fn reward_ans_f1(predicted: &str, gold: &str) -> Result<f64, RewardError> {
    let gold_tokens = text::tokens(gold);
    if gold_tokens.is_empty() {
        return Err(RewardError::Config("gold answer is empty after normalization".into()));
    }
    let pred_tokens = text::tokens(predicted);
    if pred_tokens.is_empty() {
        return Ok(0.0);
    }
    let mut gold_counts: HashMap<&str, usize> = HashMap::new();
    for t in &gold_tokens {
        *gold_counts.entry(t.as_str()).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &pred_tokens {
        if let Some(n) = gold_counts.get_mut(t.as_str()) {
            if *n > 0 {
                *n -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return Ok(0.0);
    }
    let precision = common as f64 / pred_tokens.len() as f64;
    let recall = common as f64 / gold_tokens.len() as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}
