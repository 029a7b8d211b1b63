use rand::seq::SliceRandom;

use super::{DecisionModel, EngineError, Sample, DEFAULT_THRESHOLD};
use crate::crypto::seeded_rng;

/// Mini-batch stochastic gradient descent settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            epochs: 200,
            batch_size: 32,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

/// Fraction of (sample, operation) decisions where `score >= threshold`
/// agrees with the label.
pub fn decision_accuracy(model: &DecisionModel, samples: &[Sample]) -> Result<f64, EngineError> {
    if samples.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    let mut correct = 0usize;
    for s in samples {
        let scores = model.forward(&s.input)?;
        correct += scores
            .iter()
            .zip(&s.labels)
            .filter(|(&p, &y)| (p >= DEFAULT_THRESHOLD) == (y == 1.0))
            .count();
    }
    Ok(correct as f64 / (samples.len() * scores_per_sample()) as f64)
}

fn scores_per_sample() -> usize {
    crate::types::OPERATION_COUNT
}

/// Each epoch shuffles the training set with a
/// generator derived from `params.seed`, then steps once per mini-batch.
/// Identical inputs give bit-identical weights.
pub fn train(
    mut model: DecisionModel,
    train_set: &[Sample],
    heldout: &[Sample],
    params: &TrainParams,
) -> Result<(DecisionModel, TrainReport), EngineError> {
    if train_set.is_empty() {
        return Err(EngineError::EmptyBatch);
    }
    let batch_size = params.batch_size.max(1);
    let mut rng = seeded_rng(params.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport::default();
    let mut batch: Vec<Sample> = Vec::with_capacity(batch_size);

    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let (loss, grads) = model.loss_and_gradient(&batch)?;
            if !loss.is_finite() {
                return Err(EngineError::Diverged { epoch, loss });
            }
            loss_sum += loss * chunk.len() as f64;
            model.apply_gradients(&grads, params.learning_rate);
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() || model.layers().iter().any(|l| l.weights.iter().any(|w| !w.is_finite())) {
            return Err(EngineError::Diverged { epoch, loss: train_loss });
        }
        report.epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy: decision_accuracy(&model, train_set)?,
            heldout_accuracy: if heldout.is_empty() {
                None
            } else {
                Some(decision_accuracy(&model, heldout)?)
            },
        });
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_set() -> Vec<Sample> {
        (0..16u32)
            .map(|i| {
                let input: Vec<f64> = (0..4).map(|b| ((i >> b) & 1) as f64).collect();
                let y = |v: bool| if v { 1.0 } else { 0.0 };
                Sample {
                    labels: [
                        y(i & 1 == 1),
                        y(i & 2 == 2),
                        y((i & 1 == 1) && (i & 4 == 4)),
                        y(((i >> 3) & 1) != (i & 1)),
                    ],
                    input,
                }
            })
            .collect()
    }

    #[test]
    fn zero_epochs_is_identity() {
        let m = DecisionModel::init(&[4, 8, 4], &mut seeded_rng(1)).unwrap();
        let params = TrainParams { epochs: 0, ..TrainParams::default() };
        let (out, report) = train(m.clone(), &tiny_set(), &[], &params).unwrap();
        assert_eq!(out, m);
        assert!(report.epochs.is_empty());
    }

    #[test]
    fn same_seed_same_weights() {
        let m = DecisionModel::init(&[4, 8, 4], &mut seeded_rng(1)).unwrap();
        let params = TrainParams { epochs: 5, batch_size: 4, ..TrainParams::default() };
        let (a, _) = train(m.clone(), &tiny_set(), &[], &params).unwrap();
        let (b, _) = train(m.clone(), &tiny_set(), &[], &params).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        let (c, _) = train(m, &tiny_set(), &[], &TrainParams { seed: 99, ..params }).unwrap();
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn learns_a_small_boolean_table() {
        let m = DecisionModel::init(&[4, 16, 4], &mut seeded_rng(2)).unwrap();
        let params = TrainParams { epochs: 400, batch_size: 4, learning_rate: 0.5, seed: 3 };
        let (m, report) = train(m, &tiny_set(), &tiny_set(), &params).unwrap();
        assert_eq!(decision_accuracy(&m, &tiny_set()).unwrap(), 1.0);
        assert_eq!(report.epochs.len(), 400);
        assert!(report.last().unwrap().train_loss < report.epochs[0].train_loss);
    }

    #[test]
    fn divergence_is_reported() {
        let m = DecisionModel::init(&[4, 8, 4], &mut seeded_rng(1)).unwrap();
        let params = TrainParams { epochs: 3, learning_rate: f64::INFINITY, ..TrainParams::default() };
        assert!(matches!(
            train(m, &tiny_set(), &[], &params),
            Err(EngineError::Diverged { .. })
        ));
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let m = DecisionModel::zeros(&[4, 4]).unwrap();
        assert_eq!(
            train(m, &[], &[], &TrainParams::default()).unwrap_err(),
            EngineError::EmptyBatch
        );
    }
}
