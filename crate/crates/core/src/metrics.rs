//! Confusion matrices and the access-control precision/recall convention.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    class_names: Vec<String>,
    counts: Vec<Vec<u64>>,
}

/// Precision and recall for one positive/negative partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub precision: f64,
    pub recall: f64,
}

/// Binary counts after collapsing to known-person vs. `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinaryCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    // an empty denominator counts as vacuously perfect
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

impl BinaryCounts {
    pub fn rates(&self) -> Rates {
        Rates {
            precision: ratio(self.true_positive, self.true_positive + self.false_positive),
            recall: ratio(self.true_positive, self.true_positive + self.false_negative),
        }
    }
}

impl ConfusionMatrix {
    pub fn new(class_names: Vec<String>) -> Self {
        let m = class_names.len();
        Self {
            class_names,
            counts: vec![vec![0; m]; m],
        }
    }

    pub fn from_counts(class_names: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let m = class_names.len();
        if counts.len() != m || counts.iter().any(|r| r.len() != m) {
            return Err(Error::Config(format!("confusion matrix must be {m}x{m}")));
        }
        Ok(Self { class_names, counts })
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth][predicted]
    }

    pub fn accumulate(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let m = self.num_classes();
        for (index, label) in [(0, truth), (1, predicted)] {
            if label >= m {
                return Err(Error::Label {
                    index,
                    label,
                    classes: m,
                });
            }
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    /// Entrywise sum, for combining per-worker matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.class_names != self.class_names {
            return Err(Error::Config("cannot merge matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn column_sums(&self) -> Vec<u64> {
        (0..self.num_classes())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    /// `trace / total`; zero for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    /// Collapse to a binary problem where predicting any class other than
    /// `other` is a positive (access granted).
    pub fn access_control_counts(&self, other: usize) -> BinaryCounts {
        let mut c = BinaryCounts {
            true_positive: 0,
            false_positive: 0,
            false_negative: 0,
            true_negative: 0,
        };
        for (t, row) in self.counts.iter().enumerate() {
            for (p, &n) in row.iter().enumerate() {
                match (t != other, p != other) {
                    (true, true) => c.true_positive += n,
                    (false, true) => c.false_positive += n,
                    (true, false) => c.false_negative += n,
                    (false, false) => c.true_negative += n,
                }
            }
        }
        c
    }

    pub fn access_control_precision_recall(&self, other: usize) -> Rates {
        self.access_control_counts(other).rates()
    }

    /// One-vs-rest precision and recall for each class.
    pub fn per_class_rates(&self) -> Vec<Rates> {
        let rows = self.row_sums();
        let cols = self.column_sums();
        (0..self.num_classes())
            .map(|c| {
                let tp = self.counts[c][c];
                Rates {
                    precision: ratio(tp, cols[c]),
                    recall: ratio(tp, rows[c]),
                }
            })
            .collect()
    }

    /// Index of the class named `other` (case-insensitive), else the last class.
    pub fn other_index(&self) -> usize {
        other_class_index(&self.class_names)
    }
}

pub fn other_class_index(class_names: &[String]) -> usize {
    class_names
        .iter()
        .position(|n| n.eq_ignore_ascii_case("other"))
        .unwrap_or(class_names.len().saturating_sub(1))
}

/// Machine-readable evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub loss: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub confusion: Vec<Vec<u64>>,
    pub class_names: Vec<String>,
}

impl MetricsReport {
    pub fn new(loss: f64, cm: &ConfusionMatrix) -> Self {
        let rates = cm.access_control_precision_recall(cm.other_index());
        Self {
            loss,
            accuracy: cm.accuracy(),
            precision: rates.precision,
            recall: rates.recall,
            confusion: cm.counts.clone(),
            class_names: cm.class_names.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::default_class_names;
    use proptest::prelude::*;

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(default_class_names(counts.len()), counts).unwrap()
    }

    #[test]
    fn accumulate_and_totals() {
        let mut m = ConfusionMatrix::new(default_class_names(4));
        m.accumulate(2, 2).unwrap();
        assert_eq!(m.get(2, 2), 1);
        for i in 0..9 {
            m.accumulate(i % 4, (i * 3) % 4).unwrap();
        }
        assert_eq!(m.total(), 10);
        assert_eq!(m.accuracy(), m.trace() as f64 / 10.0);
        assert!(m.accumulate(4, 0).is_err());
        assert!(m.accumulate(0, 7).is_err());
    }

    #[test]
    fn diagonal_is_perfect() {
        let m = cm(vec![vec![3, 0, 0, 0], vec![0, 2, 0, 0], vec![0, 0, 5, 0], vec![0, 0, 0, 4]]);
        let r = m.access_control_precision_recall(3);
        assert_eq!((r.precision, r.recall), (1.0, 1.0));
        assert!(m.per_class_rates().iter().all(|r| r.precision == 1.0 && r.recall == 1.0));
    }

    #[test]
    fn intruder_admitted() {
        // 10 known faces all correct, 2 intruders predicted as the first class
        let m = cm(vec![vec![4, 0, 0, 0], vec![0, 3, 0, 0], vec![0, 0, 3, 0], vec![2, 0, 0, 0]]);
        let r = m.access_control_precision_recall(3);
        assert_eq!(r.precision, 10.0 / 12.0);
        assert_eq!(r.recall, 1.0);
    }

    #[test]
    fn everything_rejected() {
        let m = cm(vec![vec![0, 0, 0, 4], vec![0, 0, 0, 3], vec![0, 0, 0, 3], vec![0, 0, 0, 5]]);
        let r = m.access_control_precision_recall(3);
        assert_eq!(r.recall, 0.0);
        assert_eq!(r.precision, 1.0);
    }

    #[test]
    fn three_class_rates() {
        let m = cm(vec![vec![5, 1, 0], vec![0, 4, 0], vec![0, 0, 6]]);
        let r = m.per_class_rates();
        assert_eq!(r[1].precision, 4.0 / 5.0);
        assert_eq!(r[1].recall, 1.0);
        assert_eq!(r[0].recall, 5.0 / 6.0);
    }

    #[test]
    fn merge_sums_entries() {
        let mut a = cm(vec![vec![1, 2], vec![3, 4]]);
        a.merge(&cm(vec![vec![1, 0], vec![0, 1]])).unwrap();
        assert_eq!(a.counts(), &[vec![2, 2], vec![3, 5]]);
    }

    fn matrix4() -> impl Strategy<Value = Vec<Vec<u64>>> {
        proptest::collection::vec(proptest::collection::vec(0u64..20, 4), 4)
    }

    proptest! {
        #[test]
        fn rates_are_bounded(counts in matrix4()) {
            let m = cm(counts);
            for r in m.per_class_rates() {
                prop_assert!((0.0..=1.0).contains(&r.precision));
                prop_assert!((0.0..=1.0).contains(&r.recall));
            }
            let c = m.access_control_counts(3);
            let known: u64 = m.row_sums()[..3].iter().sum();
            prop_assert_eq!(c.true_positive + c.false_negative, known);
        }

        #[test]
        fn swapping_known_classes_keeps_access_rates(counts in matrix4(), a in 0usize..3, b in 0usize..3) {
            let m = cm(counts.clone());
            let perm = |i: usize| if i == a { b } else if i == b { a } else { i };
            let mut swapped = vec![vec![0; 4]; 4];
            for t in 0..4 {
                for p in 0..4 {
                    swapped[perm(t)][perm(p)] = counts[t][p];
                }
            }
            let s = cm(swapped);
            prop_assert_eq!(m.access_control_precision_recall(3), s.access_control_precision_recall(3));
        }
    }
}
