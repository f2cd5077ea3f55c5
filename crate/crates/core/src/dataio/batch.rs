use rand::seq::SliceRandom;

use super::{TrainingExample, PAD};
use crate::seeding;

/// A right-padded batch of prefixes.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `len x width`, padded with [`PAD`].
    pub padded: Vec<u32>,
    pub width: usize,
    pub lengths: Vec<usize>,
    pub labels: Vec<u32>,
    /// Positions of the examples in the source slice.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[TrainingExample], indices: &[usize]) -> Self {
        let width = indices
            .iter()
            .map(|&i| examples[i].prefix.len())
            .max()
            .unwrap_or(0);
        let mut padded = vec![PAD; width * indices.len()];
        let mut lengths = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            let ex = &examples[i];
            padded[row * width..row * width + ex.prefix.len()].copy_from_slice(&ex.prefix);
            lengths.push(ex.prefix.len());
            labels.push(ex.label);
        }
        Batch {
            padded,
            width,
            lengths,
            labels,
            indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// The unpadded prefix of row `i`.
    pub fn prefix(&self, i: usize) -> &[u32] {
        &self.padded[i * self.width..i * self.width + self.lengths[i]]
    }

    pub fn prefixes(&self) -> Vec<&[u32]> {
        (0..self.len()).map(|i| self.prefix(i)).collect()
    }
}

/// Example order for one epoch: identity, or a permutation seeded by
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut seeding::stream(seed, "shuffle", epoch, 0));
    }
    order
}

pub fn batch_iter<'a>(
    examples: &'a [TrainingExample],
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
) -> impl Iterator<Item = Batch> + 'a {
    assert!(batch_size > 0, "batch size must be positive");
    let order = epoch_order(examples.len(), shuffle_seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks
        .into_iter()
        .map(move |idx| Batch::from_examples(examples, &idx))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<TrainingExample> {
        (0..n)
            .map(|i| TrainingExample {
                prefix: vec![1; 1 + i % 4],
                label: 2,
            })
            .collect()
    }

    #[test]
    fn partition_sizes() {
        let ex = examples(1030);
        let sizes: Vec<usize> = batch_iter(&ex, 512, None, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![512, 512, 6]);
    }

    #[test]
    fn padding_keeps_lengths() {
        let ex = vec![
            TrainingExample { prefix: vec![5], label: 1 },
            TrainingExample { prefix: vec![5, 6, 7], label: 1 },
        ];
        let b = batch_iter(&ex, 8, None, 0).next().unwrap();
        assert_eq!(b.width, 3);
        assert_eq!(b.lengths, vec![1, 3]);
        assert_eq!(b.padded, vec![5, 0, 0, 5, 6, 7]);
        assert_eq!(b.prefix(0), &[5]);
    }

    #[test]
    fn shuffle_is_seeded_per_epoch() {
        let a0 = epoch_order(100, Some(7), 0);
        let a1 = epoch_order(100, Some(7), 1);
        assert_ne!(a0, a1);
        assert_eq!(a0, epoch_order(100, Some(7), 0));
        let mut sorted = a1.clone();
        sorted.sort();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
    }
}
