//! Ground-truth policy used to label training data and to check the
//! trained model's decisions.

use rand::seq::SliceRandom;
use rand::Rng;

use super::{EngineError, InputEncoding, Sample};
use crate::crypto::seeded_rng;
use crate::types::{Operation, OPERATION_COUNT};

/// Bit positions one operation's rule reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Clause {
    user_and: u32,
    resource_and: u32,
    user_xor: u32,
    resource_xor: u32,
}

/// For each operation `k`:
///
/// ```text
/// grant(u, r, k) = (u[a_k] AND r[b_k]) OR (u[c_k] XOR r[d_k])
/// ```
///
/// where `x[i]` is bit `i` of the index and the positions are drawn from the
/// seed within the low `user_span` / `resource_span` bits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticPolicy {
    seed: u64,
    user_span: u32,
    resource_span: u32,
    clauses: [Clause; OPERATION_COUNT],
}

fn bit(value: u64, index: u32) -> bool {
    (value >> index) & 1 == 1
}

fn bits_needed(count: u64) -> u32 {
    (64 - count.saturating_sub(1).leading_zeros()).max(2)
}

impl SyntheticPolicy {
    /// Spans below 2 are raised to 2 so the two predicates of a clause can
    /// read different bits.
    pub fn new(seed: u64, user_span: u32, resource_span: u32) -> Self {
        let user_span = user_span.clamp(2, 63);
        let resource_span = resource_span.clamp(2, 63);
        let mut rng = seeded_rng(seed ^ 0x5eed_0f_9011c7);
        let mut pick_two = |span: u32| {
            let mut positions: Vec<u32> = (0..span).collect();
            positions.shuffle(&mut rng);
            (positions[0], positions[1])
        };
        let clauses = std::array::from_fn(|_| {
            let (user_and, user_xor) = pick_two(user_span);
            let (resource_and, resource_xor) = pick_two(resource_span);
            Clause {
                user_and,
                resource_and,
                user_xor,
                resource_xor,
            }
        });
        // Consume one more draw so the layout is tied to the full seed stream.
        let _: u8 = rng.gen();
        Self {
            seed,
            user_span,
            resource_span,
            clauses,
        }
    }

    /// Spans sized to the index ranges `0..n_users` and `0..n_resources`.
    pub fn for_population(seed: u64, n_users: u64, n_resources: u64) -> Self {
        Self::new(seed, bits_needed(n_users), bits_needed(n_resources))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn grant(&self, user_index: u64, resource_id: u64, op: Operation) -> bool {
        let c = self.clauses[op.index()];
        (bit(user_index, c.user_and) && bit(resource_id, c.resource_and))
            || (bit(user_index, c.user_xor) != bit(resource_id, c.resource_xor))
    }

    pub fn labels(&self, user_index: u64, resource_id: u64) -> [bool; OPERATION_COUNT] {
        Operation::ALL.map(|op| self.grant(user_index, resource_id, op))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Row {
    pub user_index: u64,
    pub resource_id: u64,
    pub labels: [bool; OPERATION_COUNT],
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Dataset {
    pub rows: Vec<Row>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_samples(&self, encoding: InputEncoding) -> Result<Vec<Sample>, EngineError> {
        self.rows
            .iter()
            .map(|row| {
                Ok(Sample {
                    input: encoding.encode(row.user_index, row.resource_id)?,
                    labels: row.labels.map(|b| if b { 1.0 } else { 0.0 }),
                })
            })
            .collect()
    }

    /// Seeded shuffle, then the first `heldout_fraction` of rows become the
    /// held-out set. Returns `(train, heldout)`.
    pub fn split(&self, heldout_fraction: f64, seed: u64) -> (Dataset, Dataset) {
        let mut rows = self.rows.clone();
        rows.shuffle(&mut seeded_rng(seed));
        let cut = ((rows.len() as f64) * heldout_fraction.clamp(0.0, 1.0)).round() as usize;
        let train = rows.split_off(cut);
        (Dataset { rows: train }, Dataset { rows })
    }
}

/// One row per (user, resource) pair in index order.
pub fn generate_dataset(
    policy: &SyntheticPolicy,
    encoding: InputEncoding,
    n_users: u64,
    n_resources: u64,
) -> Result<Dataset, EngineError> {
    for (count, width) in [(n_users, encoding.user_width), (n_resources, encoding.resource_width)] {
        if count > 0 && width < 64 && (count - 1) >> width != 0 {
            return Err(EngineError::Encoding { value: count - 1, width });
        }
    }
    let rows = (0..n_users)
        .flat_map(|u| {
            (0..n_resources).map(move |r| Row {
                user_index: u,
                resource_id: r,
                labels: policy.labels(u, r),
            })
        })
        .collect();
    Ok(Dataset { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cardinality_and_determinism() {
        let p = SyntheticPolicy::for_population(11, 100, 50);
        let a = generate_dataset(&p, InputEncoding::default(), 100, 50).unwrap();
        let b = generate_dataset(
            &SyntheticPolicy::for_population(11, 100, 50),
            InputEncoding::default(),
            100,
            50,
        )
        .unwrap();
        assert_eq!(a.len(), 5000);
        assert_eq!(a, b);
    }

    #[test]
    fn labels_match_the_policy() {
        let p = SyntheticPolicy::for_population(3, 100, 50);
        let d = generate_dataset(&p, InputEncoding::default(), 100, 50).unwrap();
        for row in d.rows.iter().step_by(37) {
            for op in Operation::ALL {
                assert_eq!(row.labels[op.index()], p.grant(row.user_index, row.resource_id, op));
            }
        }
    }

    #[test]
    fn spans_follow_population() {
        assert_eq!(bits_needed(100), 7);
        assert_eq!(bits_needed(50), 6);
        assert_eq!(bits_needed(1), 2);
        assert_eq!(bits_needed(128), 7);
        assert_eq!(bits_needed(129), 8);
    }

    #[test]
    fn grants_are_mixed() {
        let p = SyntheticPolicy::for_population(5, 100, 50);
        let d = generate_dataset(&p, InputEncoding::default(), 100, 50).unwrap();
        let granted = d.rows.iter().flat_map(|r| r.labels).filter(|&b| b).count();
        let total = d.len() * OPERATION_COUNT;
        assert!(granted > total / 4 && granted < total * 7 / 8, "{granted}/{total}");
    }

    #[test]
    fn oversized_population_is_rejected() {
        let p = SyntheticPolicy::new(1, 4, 4);
        let enc = InputEncoding { user_width: 4, resource_width: 4 };
        assert!(generate_dataset(&p, enc, 17, 2).is_err());
        assert_eq!(generate_dataset(&p, enc, 16, 16).unwrap().len(), 256);
    }

    #[test]
    fn split_partitions_rows() {
        let p = SyntheticPolicy::for_population(1, 10, 10);
        let d = generate_dataset(&p, InputEncoding::default(), 10, 10).unwrap();
        let (train, held) = d.split(0.2, 9);
        assert_eq!(train.len(), 80);
        assert_eq!(held.len(), 20);
        let mut all: Vec<_> = train.rows.iter().chain(&held.rows).map(|r| (r.user_index, r.resource_id)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 100);
    }
}
