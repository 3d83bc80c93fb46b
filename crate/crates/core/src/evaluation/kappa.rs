use serde::{Deserialize, Serialize};

use super::metrics::ConfusionCounts;
use crate::error::{Error, Result};
use crate::staging::Stage;

/// Quadratically weighted kappa of a square confusion matrix (rows =
/// reference, columns = predicted). `Ok(None)` when the expected weighted
/// disagreement is zero, i.e. both marginals sit in a single class.
pub fn weighted_kappa(m: &[Vec<u64>]) -> Result<Option<f64>> {
    let k = m.len();
    if m.iter().any(|row| row.len() != k) {
        return Err(Error::InvalidCounts(format!("confusion matrix must be square, got {k} rows")));
    }
    let total: u64 = m.iter().flatten().sum();
    if total == 0 {
        return Err(Error::InvalidCounts("confusion matrix is empty".into()));
    }
    if k < 2 {
        return Ok(None);
    }
    let n = total as f64;
    let rows: Vec<f64> = m.iter().map(|r| r.iter().sum::<u64>() as f64 / n).collect();
    let cols: Vec<f64> = (0..k).map(|j| m.iter().map(|r| r[j]).sum::<u64>() as f64 / n).collect();
    let scale = ((k - 1) * (k - 1)) as f64;
    let (mut observed, mut expected) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let d = i.abs_diff(j);
            if d == 0 {
                continue;
            }
            let w = (d * d) as f64 / scale;
            observed += w * m[i][j] as f64 / n;
            expected += w * rows[i] * cols[j];
        }
    }
    if expected <= 0.0 {
        return Ok(None);
    }
    Ok(Some(1.0 - observed / expected))
}

/// Stage confusion matrix, rows = reference, columns = predicted, stage
/// order I..IV. `NoInvolvement` gets a leading row and column only when it
/// occurs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagingConfusion {
    pub stages: Vec<Stage>,
    pub matrix: Vec<Vec<u64>>,
}

impl StagingConfusion {
    pub fn from_pairs(pairs: &[(Stage, Stage)]) -> Self {
        let with_none = pairs
            .iter()
            .any(|&(r, p)| r == Stage::NoInvolvement || p == Stage::NoInvolvement);
        let stages: Vec<Stage> = Stage::ALL
            .into_iter()
            .filter(|&s| with_none || s != Stage::NoInvolvement)
            .collect();
        let pos = |s: Stage| stages.iter().position(|&x| x == s).expect("stage in table");
        let mut matrix = vec![vec![0u64; stages.len()]; stages.len()];
        for &(r, p) in pairs {
            matrix[pos(r)][pos(p)] += 1;
        }
        StagingConfusion { stages, matrix }
    }

    pub fn total(&self) -> u64 {
        self.matrix.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.stages.len()).map(|i| self.matrix[i][i]).sum()
    }

    pub fn kappa(&self) -> Result<Option<f64>> {
        weighted_kappa(&self.matrix)
    }

    /// One-vs-rest counts for `stage`.
    pub fn one_vs_rest(&self, stage: Stage) -> ConfusionCounts {
        let mut c = ConfusionCounts::default();
        let Some(s) = self.stages.iter().position(|&x| x == stage) else {
            c.tn = self.total();
            return c;
        };
        for (i, row) in self.matrix.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                match (i == s, j == s) {
                    (true, true) => c.tp += v,
                    (false, true) => c.fp += v,
                    (true, false) => c.fn_ += v,
                    (false, false) => c.tn += v,
                }
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn perfect_agreement_is_one() {
        let m = vec![vec![3, 0, 0, 0], vec![0, 5, 0, 0], vec![0, 0, 1, 0], vec![0, 0, 0, 7]];
        assert_eq!(weighted_kappa(&m).unwrap(), Some(1.0));
    }

    #[test]
    fn independence_is_zero() {
        let (r, c) = ([1u64, 2, 3, 4], [2u64, 1, 1, 3]);
        let m: Vec<Vec<u64>> = r.iter().map(|a| c.iter().map(|b| a * b).collect()).collect();
        assert!(weighted_kappa(&m).unwrap().unwrap().abs() < 1e-9);
        let uniform = vec![vec![5u64; 4]; 4];
        assert!(weighted_kappa(&uniform).unwrap().unwrap().abs() < 1e-9);
    }

    #[test]
    fn hand_computed_case() {
        // Worked by hand from the definition as an exact fraction: 206/293.
        let m = vec![vec![5, 2, 1, 0], vec![1, 6, 2, 1], vec![0, 2, 7, 3], vec![1, 0, 2, 9]];
        let k = weighted_kappa(&m).unwrap().unwrap();
        assert!((k - 206.0 / 293.0).abs() < 1e-9, "{k}");
        assert!((k - 0.7030716723549488).abs() < 1e-9);
    }

    #[test]
    fn degenerate_and_invalid() {
        let single = vec![vec![0, 0, 0, 0], vec![0, 4, 0, 0], vec![0; 4], vec![0; 4]];
        assert_eq!(weighted_kappa(&single).unwrap(), None);
        assert!(weighted_kappa(&[vec![0; 4], vec![0; 4], vec![0; 4], vec![0; 4]]).is_err());
        assert!(weighted_kappa(&[vec![1, 2], vec![3]]).is_err());
    }

    #[test]
    fn confusion_from_pairs() {
        use Stage::*;
        let c = StagingConfusion::from_pairs(&[(I, I), (I, II), (IV, IV), (III, IV)]);
        assert_eq!(c.stages, vec![I, II, III, IV]);
        assert_eq!(c.matrix[0], vec![1, 1, 0, 0]);
        assert_eq!(c.correct(), 2);
        assert_eq!(c.one_vs_rest(IV), ConfusionCounts::new(1, 1, 0, 2));
        let c = StagingConfusion::from_pairs(&[(I, NoInvolvement)]);
        assert_eq!(c.stages.len(), 5);
        assert_eq!(c.matrix[1][0], 1);
    }

    proptest! {
        #[test]
        fn kappa_bounded_and_scale_invariant(
            cells in proptest::collection::vec(0u64..20, 16), s in 1u64..10,
        ) {
            let m: Vec<Vec<u64>> = cells.chunks(4).map(|c| c.to_vec()).collect();
            prop_assume!(cells.iter().sum::<u64>() > 0);
            let k = weighted_kappa(&m).unwrap();
            let scaled: Vec<Vec<u64>> = m.iter().map(|r| r.iter().map(|v| v * s).collect()).collect();
            let ks = weighted_kappa(&scaled).unwrap();
            match (k, ks) {
                (Some(a), Some(b)) => {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&a));
                    prop_assert!((a - b).abs() < 1e-12);
                }
                (a, b) => prop_assert_eq!(a, b),
            }
        }
    }
}
