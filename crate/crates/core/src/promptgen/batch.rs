use std::collections::{BTreeMap, HashSet};

use rand::Rng;

use crate::embstore::EmbeddingSet;
use crate::error::{Error, Result};

/// K positive pairs of bank rows, one per distinct class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub pairs: Vec<(usize, usize)>,
    pub labels: Vec<i64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn first_rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.0).collect()
    }

    pub fn second_rows(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Row indices of a bank grouped by label.
#[derive(Debug, Clone, Default)]
pub struct BankIndex {
    rows: BTreeMap<i64, Vec<usize>>,
}

impl BankIndex {
    pub fn new(bank: &EmbeddingSet) -> Self {
        let mut rows: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for (i, label) in bank.labels().enumerate() {
            rows.entry(label).or_default().push(i);
        }
        BankIndex { rows }
    }

    /// Labels present, ascending. Unlabelled rows (−1) are excluded.
    pub fn classes(&self) -> Vec<i64> {
        self.rows.keys().copied().filter(|&l| l >= 0).collect()
    }

    pub fn rows(&self, label: i64) -> &[usize] {
        self.rows.get(&label).map_or(&[], Vec::as_slice)
    }

    /// Draws two rows with replacement from each listed class, in the
    /// given order.
    pub fn make_batch<R: Rng + ?Sized>(&self, classes: &[i64], rng: &mut R) -> Result<Batch> {
        let mut seen = HashSet::with_capacity(classes.len());
        let mut pairs = Vec::with_capacity(classes.len());
        for &c in classes {
            if !seen.insert(c) {
                return Err(Error::Invalid(format!("class {c} repeated within a batch")));
            }
            let rows = self.rows(c);
            if rows.is_empty() {
                return Err(Error::EmptyClass(c));
            }
            let a = rows[rng.random_range(0..rows.len())];
            let b = rows[rng.random_range(0..rows.len())];
            pairs.push((a, b));
        }
        Ok(Batch {
            pairs,
            labels: classes.to_vec(),
        })
    }
}

pub fn make_batch<R: Rng + ?Sized>(bank: &EmbeddingSet, classes: &[i64], rng: &mut R) -> Result<Batch> {
    BankIndex::new(bank).make_batch(classes, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embstore::RowMeta;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bank(labels: &[i64]) -> EmbeddingSet {
        let meta = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| RowMeta::new(format!("r{i}"), l))
            .collect();
        let data = (0..labels.len() * 2).map(|i| i as f32).collect();
        EmbeddingSet::new(2, data, meta).unwrap()
    }

    #[test]
    fn one_pair_per_class() {
        let labels: Vec<i64> = (0..7).flat_map(|c| [c, c, c]).collect();
        let b = bank(&labels);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let classes: Vec<i64> = (0..7).collect();
        let batch = make_batch(&b, &classes, &mut rng).unwrap();
        assert_eq!(batch.len(), 7);
        assert_eq!(batch.labels, classes);
        let distinct: HashSet<_> = batch.labels.iter().collect();
        assert_eq!(distinct.len(), 7);
        for (&(x, y), &l) in batch.pairs.iter().zip(&batch.labels) {
            assert_eq!(b.meta()[x].label, l);
            assert_eq!(b.meta()[y].label, l);
        }
    }

    #[test]
    fn single_row_class_pairs_with_itself() {
        let b = bank(&[0, 1, 1, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let batch = make_batch(&b, &[0, 1], &mut rng).unwrap();
            assert_eq!(batch.pairs[0], (0, 0));
        }
    }

    #[test]
    fn errors() {
        let b = bank(&[0, 0, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(make_batch(&b, &[0, 5], &mut rng), Err(Error::EmptyClass(5))));
        assert!(make_batch(&b, &[1, 1], &mut rng).is_err());
    }

    #[test]
    fn follows_class_order_and_seed() {
        let labels: Vec<i64> = (0..5).flat_map(|c| [c; 4]).collect();
        let b = bank(&labels);
        let idx = BankIndex::new(&b);
        let run = |seed| idx.make_batch(&[4, 2, 0], &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        assert_eq!(run(7), run(7));
        assert_eq!(run(7).labels, vec![4, 2, 0]);
        assert_eq!(idx.classes(), vec![0, 1, 2, 3, 4]);
    }
}
