//! The access decision engine: a feed-forward network scoring the four
//! operations for a (user, resource) pair, a threshold, and priority rules
//! layered on top.

mod bits;
mod model;
mod policy;
mod rules;
mod train;

pub use bits::{binary_repr, InputEncoding};
pub use model::{DecisionModel, Gradients, Layer, Sample, DEFAULT_DIMS, MODEL_MAGIC, MODEL_VERSION};
pub use policy::{generate_dataset, Dataset, Row, SyntheticPolicy};
pub use rules::{
    apply_priority_rules, format_rules, parse_rules, validate_rules, Effect, Match, PriorityRule,
    RuleOutcome, RulesError,
};
pub use train::{decision_accuracy, train, EpochMetrics, TrainParams, TrainReport};

use thiserror::Error;

use crate::crypto::{self, Digest};
use crate::types::OPERATION_COUNT;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("value {value} does not fit in {width} bits")]
    Encoding { value: u64, width: u32 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("labels must be 0 or 1, got {0}")]
    InvalidLabel(f64),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("model file format: {0}")]
    Format(String),
    #[error("model file io: {0}")]
    Io(String),
}

/// Per-operation verdict after the rule overlay.
#[derive(Debug, Clone, PartialEq)]
pub struct AccessDecision {
    pub access_list: [bool; OPERATION_COUNT],
    pub model_scores: [f64; OPERATION_COUNT],
    pub overridden: [bool; OPERATION_COUNT],
}

/// Booleans from scores: `score >= threshold`.
pub fn threshold_scores(scores: &[f64; OPERATION_COUNT], threshold: f64) -> [bool; OPERATION_COUNT] {
    scores.map(|s| s >= threshold)
}

pub fn predict_access(
    model: &DecisionModel,
    encoding: InputEncoding,
    user_index: u64,
    resource_id: u64,
    threshold: f64,
) -> Result<[bool; OPERATION_COUNT], EngineError> {
    let input = encoding.encode(user_index, resource_id)?;
    Ok(threshold_scores(&model.forward(&input)?, threshold))
}

/// A model bound to its input encoding and threshold, identified by the
/// SHA-256 of its serialized weights.
#[derive(Debug, Clone)]
pub struct DecisionEngine {
    model: DecisionModel,
    encoding: InputEncoding,
    threshold: f64,
    fingerprint: Digest,
}

impl DecisionEngine {
    pub fn new(model: DecisionModel, encoding: InputEncoding) -> Result<Self, EngineError> {
        if model.input_dim() != encoding.width() {
            return Err(EngineError::Shape {
                expected: encoding.width(),
                got: model.input_dim(),
            });
        }
        let fingerprint = crypto::hash(&model.to_bytes());
        Ok(Self {
            model,
            encoding,
            threshold: DEFAULT_THRESHOLD,
            fingerprint,
        })
    }

    pub fn model(&self) -> &DecisionModel {
        &self.model
    }

    pub fn encoding(&self) -> InputEncoding {
        self.encoding
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn fingerprint(&self) -> Digest {
        self.fingerprint
    }

    pub fn scores(&self, user_index: u64, resource_id: u64) -> Result<[f64; OPERATION_COUNT], EngineError> {
        self.model.forward(&self.encoding.encode(user_index, resource_id)?)
    }

    pub fn model_access(&self, user_index: u64, resource_id: u64) -> Result<[bool; OPERATION_COUNT], EngineError> {
        Ok(threshold_scores(&self.scores(user_index, resource_id)?, self.threshold))
    }

    /// Model verdict, then the priority-rule overlay.
    pub fn decide(
        &self,
        rules: &[PriorityRule],
        user_index: u64,
        resource_id: u64,
    ) -> Result<AccessDecision, EngineError> {
        let model_scores = self.scores(user_index, resource_id)?;
        let model_access = threshold_scores(&model_scores, self.threshold);
        let outcome = apply_priority_rules(rules, user_index, resource_id, model_access);
        Ok(AccessDecision {
            access_list: outcome.access_list,
            model_scores,
            overridden: outcome.overridden,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_model_threshold_boundary() {
        let model = DecisionModel::zeros(&DEFAULT_DIMS).unwrap();
        let enc = InputEncoding::default();
        assert_eq!(predict_access(&model, enc, 3, 4, 0.5).unwrap(), [true; 4]);
        assert_eq!(predict_access(&model, enc, 3, 4, 0.6).unwrap(), [false; 4]);
        assert!(matches!(
            predict_access(&model, enc, 1 << 16, 0, 0.5),
            Err(EngineError::Encoding { .. })
        ));
    }

    #[test]
    fn engine_rejects_mismatched_encoding() {
        let model = DecisionModel::zeros(&[8, 4]).unwrap();
        assert!(DecisionEngine::new(model, InputEncoding::default()).is_err());
    }

    #[test]
    fn decide_applies_rules_after_model() {
        let engine = DecisionEngine::new(
            DecisionModel::zeros(&DEFAULT_DIMS).unwrap(),
            InputEncoding::default(),
        )
        .unwrap();
        let rules = parse_rules("10 * 5 * DENY\n").unwrap();
        let d = engine.decide(&rules, 1, 5).unwrap();
        assert_eq!(d.access_list, [false; 4]);
        assert_eq!(d.overridden, [true; 4]);
        assert_eq!(d.model_scores, [0.5; 4]);
        let d = engine.decide(&rules, 1, 6).unwrap();
        assert_eq!(d.access_list, [true; 4]);
        assert_eq!(d.overridden, [false; 4]);
    }
}
