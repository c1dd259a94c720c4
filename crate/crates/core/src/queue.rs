//! The invariant memory queue: a fixed-capacity FIFO of
//! (class-related feature, one-hot label) pairs, updated once per training
//! step and read as a constant by the class-specificity loss.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{DicsError, Result};
use crate::tensor::{FeatureVector, ProbVector};

/// Entries are stored oldest-first; pushes evict from the front.
/// Stored values are detached copies, never live references into training
/// state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvariantMemoryQueue {
    entries: VecDeque<(FeatureVector, ProbVector)>,
    capacity: usize,
    dim: usize,
    num_classes: usize,
}

impl InvariantMemoryQueue {
    pub fn new(capacity: usize, dim: usize, num_classes: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(DicsError::InvalidConfig(
                "queue capacity must be at least 1".into(),
            ));
        }
        if dim == 0 || num_classes == 0 {
            return Err(DicsError::InvalidConfig(
                "queue dim and class count must be at least 1".into(),
            ));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(capacity),
            capacity,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Append a batch in order, evicting exactly as many oldest entries as
    /// needed to stay within capacity.
    pub fn push_batch(
        &mut self,
        features: &[FeatureVector],
        labels: &[ProbVector],
    ) -> Result<()> {
        if features.len() != labels.len() {
            return Err(DicsError::LengthMismatch {
                context: "queue push",
                left: features.len(),
                right: labels.len(),
            });
        }
        if features.len() > self.capacity {
            return Err(DicsError::BatchExceedsCapacity {
                batch: features.len(),
                capacity: self.capacity,
            });
        }
        for (f, l) in features.iter().zip(labels) {
            if f.dim() != self.dim {
                return Err(DicsError::DimensionMismatch {
                    expected: self.dim,
                    got: f.dim(),
                });
            }
            if l.len() != self.num_classes || !l.is_one_hot() {
                return Err(DicsError::InvalidBatch(
                    "queue labels must be one-hot with the run's class count".into(),
                ));
            }
        }
        let overflow = (self.entries.len() + features.len()).saturating_sub(self.capacity);
        for _ in 0..overflow {
            self.entries.pop_front();
        }
        for (f, l) in features.iter().zip(labels) {
            self.entries.push_back((f.clone(), l.clone()));
        }
        Ok(())
    }

    /// Immutable copy of the contents in oldest-first order.
    pub fn snapshot(&self) -> (Vec<FeatureVector>, Vec<ProbVector>) {
        let features = self.entries.iter().map(|(f, _)| f.clone()).collect();
        let labels = self.entries.iter().map(|(_, l)| l.clone()).collect();
        (features, labels)
    }

    /// Read-only view in oldest-first order.
    pub fn entries(&self) -> impl Iterator<Item = (&FeatureVector, &ProbVector)> {
        self.entries.iter().map(|(f, l)| (f, l))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn feat(tag: f64) -> FeatureVector {
        FeatureVector::new(vec![tag, 0.0]).unwrap()
    }

    fn label() -> ProbVector {
        ProbVector::one_hot(0, 2).unwrap()
    }

    fn push_n(q: &mut InvariantMemoryQueue, start: usize, n: usize) {
        let feats: Vec<_> = (start..start + n).map(|i| feat(i as f64)).collect();
        let labels = vec![label(); n];
        q.push_batch(&feats, &labels).unwrap();
    }

    #[test]
    fn new_queue_is_empty() {
        let q = InvariantMemoryQueue::new(16, 2, 2).unwrap();
        assert_eq!(q.len(), 0);
        assert!(q.is_empty());
        assert_eq!(q.capacity(), 16);
    }

    #[test]
    fn zero_capacity_is_rejected() {
        assert!(InvariantMemoryQueue::new(0, 2, 2).is_err());
    }

    #[test]
    fn push_preserves_order_and_evicts_oldest() {
        let mut q = InvariantMemoryQueue::new(16, 2, 2).unwrap();
        push_n(&mut q, 0, 4);
        assert_eq!(q.len(), 4);
        let (feats, _) = q.snapshot();
        let tags: Vec<f64> = feats.iter().map(|f| f.values()[0]).collect();
        assert_eq!(tags, vec![0.0, 1.0, 2.0, 3.0]);

        push_n(&mut q, 4, 12);
        assert_eq!(q.len(), 16);
        push_n(&mut q, 16, 4);
        assert_eq!(q.len(), 16);
        let (feats, _) = q.snapshot();
        assert_eq!(feats[0].values()[0], 4.0);
        assert_eq!(feats[15].values()[0], 19.0);
    }

    #[test]
    fn oversize_batch_is_rejected() {
        let mut q = InvariantMemoryQueue::new(16, 2, 2).unwrap();
        let feats: Vec<_> = (0..17).map(|i| feat(i as f64)).collect();
        let labels = vec![label(); 17];
        assert!(matches!(
            q.push_batch(&feats, &labels),
            Err(DicsError::BatchExceedsCapacity { batch: 17, capacity: 16 })
        ));
    }

    #[test]
    fn snapshot_is_isolated_from_later_pushes() {
        let mut q = InvariantMemoryQueue::new(4, 2, 2).unwrap();
        push_n(&mut q, 0, 2);
        let (before, _) = q.snapshot();
        push_n(&mut q, 2, 2);
        assert_eq!(before.len(), 2);
        assert_eq!(before[0].values()[0], 0.0);
        assert_eq!(before[1].values()[0], 1.0);
    }

    proptest! {
        /// FIFO: whatever the push sizes, surviving entries are exactly the
        /// most recent `len` insertions in insertion order.
        #[test]
        fn fifo_eviction_order(push_sizes in prop::collection::vec(1usize..8, 1..20)) {
            let capacity = 8;
            let mut q = InvariantMemoryQueue::new(capacity, 2, 2).unwrap();
            let mut total = 0usize;
            for sz in push_sizes {
                push_n(&mut q, total, sz);
                total += sz;
                prop_assert!(q.len() <= capacity);
                let (feats, _) = q.snapshot();
                let expected_len = total.min(capacity);
                prop_assert_eq!(feats.len(), expected_len);
                for (k, f) in feats.iter().enumerate() {
                    prop_assert_eq!(f.values()[0], (total - expected_len + k) as f64);
                }
            }
        }
    }
}
