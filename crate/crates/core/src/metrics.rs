//! Accuracy, Cohen's kappa and support-weighted F1 from a confusion matrix.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `counts[i][j]`: samples of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|row| row.len() != k) {
            return Err(Error::InvalidInput("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    /// Builds a `k x k` matrix from paired class indices.
    pub fn from_pairs(k: usize, truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::LengthMismatch {
                what: "predictions",
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut m = Self::zeros(k);
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= k || p >= k {
                return Err(Error::InvalidInput(format!("class index out of range for k = {k}")));
            }
            m.counts[t][p] += 1;
        }
        Ok(m)
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|row| row[j]).sum()
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::InvalidInput("confusion matrix is empty".into())),
            n => Ok(n as f64),
        }
    }
}

pub fn accuracy(c: &ConfusionMatrix) -> Result<f64> {
    let n = c.nonempty()?;
    Ok(c.trace() as f64 / n)
}

/// `(p_o - p_e) / (1 - p_e)` with `p_e` from the product of the marginals.
pub fn cohens_kappa(c: &ConfusionMatrix) -> Result<f64> {
    let n = c.nonempty()?;
    let p_o = c.trace() as f64 / n;
    let p_e: f64 = (0..c.k())
        .map(|k| (c.row_sum(k) as f64 / n) * (c.col_sum(k) as f64 / n))
        .sum();
    if p_e >= 1.0 {
        return Err(Error::DegenerateMarginals);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// `(1 + b^2) / (1/precision + b^2/recall)`.
pub fn f_beta(precision: f64, recall: f64, beta: f64) -> Result<f64> {
    if precision <= 0.0 && recall <= 0.0 {
        return Err(Error::InvalidInput("precision and recall are both zero".into()));
    }
    if beta < 0.0 {
        return Err(Error::InvalidInput(format!("beta must be non-negative, got {beta}")));
    }
    let b2 = beta * beta;
    if b2 == 0.0 {
        return Ok(precision);
    }
    Ok((1.0 + b2) / (1.0 / precision + b2 / recall))
}

/// Precision, recall, F1 and support of one class. Zero denominators give 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class(c: &ConfusionMatrix) -> Vec<ClassScores> {
    (0..c.k())
        .map(|k| {
            let tp = c.counts[k][k] as f64;
            let col = c.col_sum(k);
            let row = c.row_sum(k);
            let precision = if col == 0 { 0.0 } else { tp / col as f64 };
            let recall = if row == 0 { 0.0 } else { tp / row as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassScores {
                precision,
                recall,
                f1,
                support: row,
            }
        })
        .collect()
}

/// Per-class F1 averaged with weights `support / N`.
pub fn weighted_f1(c: &ConfusionMatrix) -> Result<f64> {
    let n = c.nonempty()?;
    Ok(per_class(c)
        .iter()
        .map(|s| s.f1 * s.support as f64 / n)
        .sum())
}

pub fn macro_f1(c: &ConfusionMatrix) -> Result<f64> {
    c.nonempty()?;
    Ok(per_class(c).iter().map(|s| s.f1).sum::<f64>() / c.k() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassReport {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub support: Vec<u64>,
}

/// Full evaluation report as written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub kappa: Option<f64>,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub per_class: PerClassReport,
    /// Classes never predicted or never present, whose zero scores are a convention.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl Report {
    pub fn new(c: &ConfusionMatrix, classes: &[String]) -> Result<Self> {
        let scores = per_class(c);
        let mut warnings = Vec::new();
        for (k, name) in classes.iter().enumerate().take(c.k()) {
            if c.col_sum(k) == 0 {
                warnings.push(format!("class {name} never predicted; precision set to 0"));
            }
            if c.row_sum(k) == 0 {
                warnings.push(format!("class {name} absent from the data; recall set to 0"));
            }
        }
        let kappa = match cohens_kappa(c) {
            Ok(k) => Some(k),
            Err(Error::DegenerateMarginals) => {
                warnings.push("kappa undefined: degenerate marginals".into());
                None
            }
            Err(e) => return Err(e),
        };
        Ok(Report {
            classes: classes.to_vec(),
            confusion: c.counts.clone(),
            accuracy: accuracy(c)?,
            kappa,
            weighted_f1: weighted_f1(c)?,
            macro_f1: macro_f1(c)?,
            per_class: PerClassReport {
                precision: scores.iter().map(|s| s.precision).collect(),
                recall: scores.iter().map(|s| s.recall).collect(),
                f1: scores.iter().map(|s| s.f1).collect(),
                support: scores.iter().map(|s| s.support).collect(),
            },
            warnings,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cm(rows: &[&[u64]]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&cm(&[&[3, 0], &[0, 5]])).unwrap(), 1.0);
        assert_eq!(accuracy(&cm(&[&[0, 3], &[5, 0]])).unwrap(), 0.0);
        assert_eq!(accuracy(&cm(&[&[2, 0], &[1, 1]])).unwrap(), 0.75);
        assert!(accuracy(&ConfusionMatrix::zeros(3)).is_err());
    }

    #[test]
    fn kappa_cases() {
        let diag = cm(&[&[5, 0, 0, 0], &[0, 5, 0, 0], &[0, 0, 5, 0], &[0, 0, 0, 5]]);
        assert_eq!(cohens_kappa(&diag).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&cm(&[&[25, 25], &[25, 25]])).unwrap(), 0.0);
        assert!((cohens_kappa(&cm(&[&[2, 0], &[1, 1]])).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(
            cohens_kappa(&cm(&[&[4, 0], &[0, 0]])),
            Err(Error::DegenerateMarginals)
        ));
    }

    #[test]
    fn weighted_f1_cases() {
        assert_eq!(weighted_f1(&cm(&[&[3, 0], &[0, 5]])).unwrap(), 1.0);
        let c = cm(&[&[2, 0], &[1, 1]]);
        let s = per_class(&c);
        assert!((s[0].precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[0].f1 - 0.8).abs() < 1e-15);
        assert!((s[1].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((weighted_f1(&c).unwrap() - 11.0 / 15.0).abs() < 1e-10);
        // precision == recall per class: F1 collapses to the weighted recall
        let sym = cm(&[&[3, 1], &[1, 3]]);
        assert!((weighted_f1(&sym).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn f_beta_cases() {
        assert!((f_beta(0.8, 0.8, 1.0).unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(f_beta(0.3, 0.9, 0.0).unwrap(), 0.3);
        assert!((f_beta(0.5, 1.0, 1.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(f_beta(0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn report_flags_absent_classes() {
        let c = cm(&[&[2, 0, 0], &[1, 1, 0], &[0, 0, 0]]);
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let r = Report::new(&c, &names).unwrap();
        assert_eq!(r.warnings.len(), 2);
        assert_eq!(r.kappa, Some(cohens_kappa(&c).unwrap()));
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (2usize..5).prop_flat_map(|k| prop::collection::vec(prop::collection::vec(0u64..20, k), k))
    }

    proptest! {
        #[test]
        fn scaling_counts_leaves_metrics_unchanged(rows in matrix_strategy(), m in 2u64..7) {
            let c = ConfusionMatrix::from_counts(rows.clone()).unwrap();
            prop_assume!(c.total() > 0);
            let scaled = ConfusionMatrix::from_counts(
                rows.iter().map(|r| r.iter().map(|v| v * m).collect()).collect()).unwrap();
            prop_assert_eq!(accuracy(&c).unwrap(), accuracy(&scaled).unwrap());
            prop_assert!((weighted_f1(&c).unwrap() - weighted_f1(&scaled).unwrap()).abs() < 1e-12);
            if let (Ok(a), Ok(b)) = (cohens_kappa(&c), cohens_kappa(&scaled)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance(rows in matrix_strategy(), rot in 0usize..4) {
            let c = ConfusionMatrix::from_counts(rows.clone()).unwrap();
            prop_assume!(c.total() > 0);
            let k = c.k();
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let mut permuted = vec![vec![0; k]; k];
            for i in 0..k {
                for j in 0..k {
                    permuted[perm[i]][perm[j]] = rows[i][j];
                }
            }
            let p = ConfusionMatrix::from_counts(permuted).unwrap();
            prop_assert!((accuracy(&c).unwrap() - accuracy(&p).unwrap()).abs() < 1e-12);
            prop_assert!((weighted_f1(&c).unwrap() - weighted_f1(&p).unwrap()).abs() < 1e-12);
            if let (Ok(a), Ok(b)) = (cohens_kappa(&c), cohens_kappa(&p)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn kappa_is_one_iff_off_diagonal_empty(rows in matrix_strategy()) {
            let c = ConfusionMatrix::from_counts(rows.clone()).unwrap();
            if let Ok(kappa) = cohens_kappa(&c) {
                prop_assert!(kappa <= 1.0 + 1e-15);
                let off: u64 = (0..c.k()).flat_map(|i| (0..c.k()).map(move |j| (i, j)))
                    .filter(|(i, j)| i != j).map(|(i, j)| rows[i][j]).sum();
                prop_assert_eq!(kappa == 1.0, off == 0);
            }
        }
    }
}
