//! Evidence-grounded rollout contract for retrieval agents.

pub mod analytics;
pub mod environment;
pub mod filter;
pub mod fixtures;
pub mod io;
pub mod masking;
pub mod oracle;
pub mod perturbation;
pub mod protocol;
pub mod registry;
pub mod rewards;
pub mod text;
pub mod validation;
