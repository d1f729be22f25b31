//! Per-task key-value memory with diversity-driven replacement and Euclidean
//! nearest-neighbour reads.

use rand::seq::index;
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::numgrad::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MemoryError {
    #[error("key has zero norm")]
    ZeroKey,
    #[error("no keys given")]
    NoKeys,
    #[error("memory is empty")]
    Empty,
    #[error("memory capacity must be positive")]
    ZeroCapacity,
    #[error("slot dims ({key}, {value}) do not match memory dims ({expected_key}, {expected_value})")]
    DimMismatch {
        key: usize,
        value: usize,
        expected_key: usize,
        expected_value: usize,
    },
    #[error("store ratio {0} is outside (0, 1]")]
    StoreRatio(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemorySlot {
    pub key: Tensor,
    pub value: Tensor,
}

impl MemorySlot {
    pub fn new(key: Tensor, value: Tensor) -> Self {
        Self { key, value }
    }
}

fn angle(a: &Tensor, b: &Tensor) -> f64 {
    let cos = a.dot(b) / (a.norm() * b.norm());
    cos.clamp(-1.0, 1.0).acos()
}

/// `mean - variance` of the angles over all ordered pairs of keys, self
/// pairs included.
pub fn diversity_score(keys: &[&Tensor]) -> Result<f64, MemoryError> {
    if keys.is_empty() {
        return Err(MemoryError::NoKeys);
    }
    if keys.iter().any(|k| k.norm() == 0.0) {
        return Err(MemoryError::ZeroKey);
    }
    let n = keys.len();
    let mut angles = vec![0.0; n * n];
    for j in 0..n {
        for h in j + 1..n {
            let a = angle(keys[j], keys[h]);
            angles[j * n + h] = a;
            angles[h * n + j] = a;
        }
    }
    Ok(score_of(&angles, n, &(0..n).collect::<Vec<_>>()))
}

/// Score over the sub-matrix of a cached `n x n` angle table picked by `idx`.
fn score_of(angles: &[f64], n: usize, idx: &[usize]) -> f64 {
    let count = (idx.len() * idx.len()) as f64;
    let mut sum = 0.0;
    for &j in idx {
        for &h in idx {
            sum += angles[j * n + h];
        }
    }
    let mean = sum / count;
    let mut var = 0.0;
    for &j in idx {
        for &h in idx {
            let d = angles[j * n + h] - mean;
            var += d * d;
        }
    }
    mean - var / count
}

/// What a call to [`TaskMemory::write`] did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WriteOutcome {
    Appended,
    Replaced { slot: usize, score: f64 },
    Rejected,
}

/// A retrieved slot with its position in the memory and distance to the query.
#[derive(Clone, Copy, Debug)]
pub struct Neighbor<'a> {
    pub index: usize,
    pub distance: f64,
    pub slot: &'a MemorySlot,
}

/// Fixed-capacity memory for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMemory {
    slots: Vec<MemorySlot>,
    capacity: usize,
    key_dim: usize,
    value_dim: usize,
}

/// `ceil(store_ratio * support_size)`, at least one.
pub fn capacity_for(store_ratio: f64, support_size: usize) -> Result<usize, MemoryError> {
    if !(store_ratio > 0.0 && store_ratio <= 1.0) {
        return Err(MemoryError::StoreRatio(store_ratio));
    }
    // the epsilon absorbs products like 0.2 * 10 = 2.0000000000000004
    let raw = store_ratio * support_size as f64;
    Ok(((raw - 1e-9).ceil() as usize).max(1))
}

impl TaskMemory {
    pub fn new(capacity: usize, key_dim: usize, value_dim: usize) -> Result<Self, MemoryError> {
        if capacity == 0 {
            return Err(MemoryError::ZeroCapacity);
        }
        Ok(Self {
            slots: Vec::with_capacity(capacity),
            capacity,
            key_dim,
            value_dim,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.slots.len() == self.capacity
    }

    pub fn slots(&self) -> &[MemorySlot] {
        &self.slots
    }

    pub fn score(&self) -> Result<f64, MemoryError> {
        diversity_score(&self.slots.iter().map(|s| &s.key).collect::<Vec<_>>())
    }

    /// Appends while there is room. When full, substitutes the candidate for
    /// whichever slot gives the highest diversity score, provided that score
    /// beats the current one; otherwise the memory is left unchanged.
    pub fn write(&mut self, slot: MemorySlot) -> Result<WriteOutcome, MemoryError> {
        if slot.key.numel() != self.key_dim || slot.value.numel() != self.value_dim {
            return Err(MemoryError::DimMismatch {
                key: slot.key.numel(),
                value: slot.value.numel(),
                expected_key: self.key_dim,
                expected_value: self.value_dim,
            });
        }
        if slot.key.norm() == 0.0 {
            return Err(MemoryError::ZeroKey);
        }
        if !self.is_full() {
            self.slots.push(slot);
            return Ok(WriteOutcome::Appended);
        }

        // angle table over the stored keys plus the candidate at index n - 1
        let n = self.slots.len() + 1;
        let keys: Vec<&Tensor> = self.slots.iter().map(|s| &s.key).chain([&slot.key]).collect();
        let mut angles = vec![0.0; n * n];
        for j in 0..n {
            for h in j + 1..n {
                let a = angle(keys[j], keys[h]);
                angles[j * n + h] = a;
                angles[h * n + j] = a;
            }
        }
        let current = score_of(&angles, n, &(0..n - 1).collect::<Vec<_>>());
        let mut best: Option<(usize, f64)> = None;
        let mut idx: Vec<usize> = (0..n - 1).collect();
        for j in 0..n - 1 {
            idx[j] = n - 1;
            let s = score_of(&angles, n, &idx);
            idx[j] = j;
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        match best {
            Some((j, s)) if s > current => {
                self.slots[j] = slot;
                Ok(WriteOutcome::Replaced { slot: j, score: s })
            }
            _ => Ok(WriteOutcome::Rejected),
        }
    }

    /// The `min(n, len)` slots closest to `query` in Euclidean distance,
    /// nearest first, ties broken by insertion order.
    pub fn read(&self, query: &Tensor, n: usize) -> Result<Vec<Neighbor<'_>>, MemoryError> {
        if self.slots.is_empty() {
            return Err(MemoryError::Empty);
        }
        if query.numel() != self.key_dim {
            return Err(MemoryError::DimMismatch {
                key: query.numel(),
                value: self.value_dim,
                expected_key: self.key_dim,
                expected_value: self.value_dim,
            });
        }
        let mut all: Vec<Neighbor<'_>> = self
            .slots
            .iter()
            .enumerate()
            .map(|(index, slot)| Neighbor {
                index,
                distance: slot.key.euclidean_distance(query),
                slot,
            })
            .collect();
        // stable sort keeps insertion order among equal distances
        all.sort_by(|a, b| a.distance.total_cmp(&b.distance));
        all.truncate(n);
        Ok(all)
    }

    /// `min(n, len)` distinct slots drawn uniformly at random.
    pub fn read_random(&self, n: usize, rng: &mut impl Rng) -> Result<Vec<Neighbor<'_>>, MemoryError> {
        if self.slots.is_empty() {
            return Err(MemoryError::Empty);
        }
        let k = n.min(self.slots.len());
        Ok(index::sample(rng, self.slots.len(), k)
            .into_iter()
            .map(|index| Neighbor {
                index,
                distance: f64::NAN,
                slot: &self.slots[index],
            })
            .collect())
    }
}
