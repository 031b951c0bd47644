use serde::Serialize;

use crate::error::{Error, Result};

/// Counts of `(first, second)` label pairs; rows index the first vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(first: &[usize], second: &[usize], classes: usize) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::Argument(format!("prediction lengths differ: {} vs {}", first.len(), second.len())));
        }
        let mut counts = vec![0u64; classes * classes];
        for (&a, &b) in first.iter().zip(second) {
            if a >= classes || b >= classes {
                return Err(Error::Argument(format!("label pair ({a}, {b}) outside 0..{classes}")));
            }
            counts[a * classes + b] += 1;
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, row: usize, col: usize) -> u64 {
        self.counts[row * self.classes + col]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks_exact(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Diagonal share; `None` for an empty matrix.
    pub fn agreement(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| self.trace() as f64 / total as f64)
    }

    /// Recall per class when rows are true labels; `None` for absent classes.
    pub fn recall(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let row: u64 = (0..self.classes).map(|j| self.get(i, j)).sum();
                (row > 0).then(|| self.get(i, i) as f64 / row as f64)
            })
            .collect()
    }
}

/// Share of positions where the two prediction vectors agree.
pub fn agreement_rate(first: &[usize], second: &[usize], classes: usize) -> Result<f64> {
    ConfusionMatrix::new(first, second, classes)?
        .agreement()
        .ok_or_else(|| Error::Argument("agreement over zero samples".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fixed_cases() {
        assert_eq!(agreement_rate(&[0, 1, 2, 0], &[0, 1, 1, 0], 3).unwrap(), 0.75);
        assert_eq!(agreement_rate(&[0, 1, 2], &[0, 1, 2], 3).unwrap(), 1.0);
        assert_eq!(agreement_rate(&[0, 0, 1], &[1, 2, 0], 3).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(agreement_rate(&[0, 1], &[0], 2), Err(Error::Argument(_))));
        assert!(matches!(agreement_rate(&[0, 2], &[0, 1], 2), Err(Error::Argument(_))));
        assert!(agreement_rate(&[], &[], 2).is_err());
    }

    #[test]
    fn recall_reads_rows() {
        let cm = ConfusionMatrix::new(&[0, 0, 1, 1], &[0, 1, 1, 1], 3).unwrap();
        assert_eq!(cm.recall(), vec![Some(0.5), Some(1.0), None]);
        assert_eq!(cm.rows()[0], vec![1, 1, 0]);
    }

    proptest! {
        #[test]
        fn symmetric_and_reflexive(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200)) {
            let (a, b): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let ab = agreement_rate(&a, &b, 4).unwrap();
            prop_assert_eq!(ab, agreement_rate(&b, &a, 4).unwrap());
            prop_assert_eq!(agreement_rate(&a, &a, 4).unwrap(), 1.0);
            let tally = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
            prop_assert_eq!(ab, tally);
            let cm = ConfusionMatrix::new(&a, &b, 4).unwrap();
            prop_assert_eq!(cm.total() as usize, a.len());
        }
    }
}
