use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies one (reference, predicted) pair.
    pub fn record(&mut self, reference: bool, predicted: bool) {
        match (reference, predicted) {
            (true, true) => self.tp += 1,
            (false, true) => self.fp += 1,
            (true, false) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn add(&self, o: &ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }

    /// Counts with the positive and negative classes swapped.
    pub fn swapped(&self) -> ConfusionCounts {
        ConfusionCounts::new(self.tn, self.fn_, self.fp, self.tp)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CiMethod {
    #[default]
    ClopperPearson,
    /// Normal approximation, clamped to [0, 1].
    Wald,
}

/// A proportion with its confidence interval; `None` when the denominator is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub value: Option<f64>,
    pub ci: Option<[f64; 2]>,
}

impl Metric {
    pub const UNDEFINED: Metric = Metric { value: None, ci: None };

    pub fn point(value: Option<f64>) -> Metric {
        Metric { value, ci: None }
    }
}

fn check_counts(successes: u64, n: u64, level: f64) -> Result<()> {
    if n == 0 || successes > n {
        return Err(Error::InvalidCounts(format!("need 0 <= successes <= n and n >= 1, got {successes}/{n}")));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidCounts(format!("confidence level must be in (0, 1), got {level}")));
    }
    Ok(())
}

/// Smallest x in [0, 1] with `f(x) >= target` for nondecreasing `f`.
fn bisect(f: impl Fn(f64) -> f64, target: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Quantile of Beta(a, b).
fn beta_quantile(q: f64, a: f64, b: f64) -> f64 {
    bisect(|x| beta_reg(a, b, x), q)
}

/// Exact binomial interval from beta quantiles; closed at 0 and 1 for the
/// extreme proportions.
pub fn clopper_pearson_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    check_counts(successes, n, level)?;
    let alpha = 1.0 - level;
    let (k, n) = (successes as f64, n as f64);
    let low = if successes == 0 {
        0.0
    } else {
        beta_quantile(alpha / 2.0, k, n - k + 1.0)
    };
    let high = if k == n {
        1.0
    } else {
        beta_quantile(1.0 - alpha / 2.0, k + 1.0, n - k)
    };
    Ok((low, high))
}

pub fn wald_ci(successes: u64, n: u64, level: f64) -> Result<(f64, f64)> {
    check_counts(successes, n, level)?;
    let z = Normal::standard().inverse_cdf(1.0 - (1.0 - level) / 2.0);
    let p = successes as f64 / n as f64;
    let half = z * (p * (1.0 - p) / n as f64).sqrt();
    Ok(((p - half).max(0.0), (p + half).min(1.0)))
}

pub fn proportion(successes: u64, n: u64, method: CiMethod, level: f64) -> Result<Metric> {
    if n == 0 {
        return Ok(Metric::UNDEFINED);
    }
    let (lo, hi) = match method {
        CiMethod::ClopperPearson => clopper_pearson_ci(successes, n, level)?,
        CiMethod::Wald => wald_ci(successes, n, level)?,
    };
    Ok(Metric {
        value: Some(successes as f64 / n as f64),
        ci: Some([lo, hi]),
    })
}

fn harmonic(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if a + b > 0.0 => Some(2.0 * a * b / (a + b)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    /// (tp + tn) / total
    pub accuracy: Metric,
    /// tp / (tp + fp)
    pub precision: Metric,
    /// tp / (tp + fn), i.e. sensitivity.
    pub recall: Metric,
    pub specificity: Metric,
    /// 2tp / (2tp + fp + fn). The interval treats 2tp of 2tp + fp + fn as
    /// a binomial proportion.
    pub f1: Metric,
    pub ppv: Metric,
    pub npv: Metric,
    /// Harmonic mean of accuracy and recall. No interval.
    pub f_accuracy_recall: Metric,
}

pub fn binary_metrics(c: &ConfusionCounts) -> Result<MetricSet> {
    binary_metrics_with(c, CiMethod::ClopperPearson, 0.95)
}

pub fn binary_metrics_with(c: &ConfusionCounts, method: CiMethod, level: f64) -> Result<MetricSet> {
    if c.total() == 0 {
        return Err(Error::InvalidCounts("all counts are zero".into()));
    }
    let p = |k, n| proportion(k, n, method, level);
    let precision = p(c.tp, c.tp + c.fp)?;
    let accuracy = p(c.tp + c.tn, c.total())?;
    let recall = p(c.tp, c.tp + c.fn_)?;
    Ok(MetricSet {
        accuracy,
        precision,
        recall,
        specificity: p(c.tn, c.tn + c.fp)?,
        f1: p(2 * c.tp, 2 * c.tp + c.fp + c.fn_)?,
        ppv: precision,
        npv: p(c.tn, c.tn + c.fn_)?,
        f_accuracy_recall: Metric::point(harmonic(accuracy.value, recall.value)),
    })
}

/// Mean of the F1 scores of the positive and the negative class.
pub fn macro_f1(c: &ConfusionCounts) -> Option<f64> {
    let f = |c: &ConfusionCounts| {
        let d = 2 * c.tp + c.fp + c.fn_;
        (d > 0).then(|| 2.0 * c.tp as f64 / d as f64)
    };
    Some((f(c)? + f(&c.swapped())?) / 2.0)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn pct(m: Metric) -> f64 {
        m.value.unwrap() * 100.0
    }

    #[test]
    fn reference_count_rows() {
        let m = binary_metrics(&ConfusionCounts::new(318, 58, 109, 944)).unwrap();
        assert!((pct(m.accuracy) - 88.31).abs() < 0.01);
        assert!((pct(m.recall) - 74.47).abs() < 0.01);
        assert!((pct(m.specificity) - 94.21).abs() < 0.01);
        let m = binary_metrics(&ConfusionCounts::new(38, 2, 8, 19)).unwrap();
        assert!((pct(m.accuracy) - 85.07).abs() < 0.01);
        assert!((pct(m.recall) - 82.61).abs() < 0.01);
        assert!((pct(m.specificity) - 90.48).abs() < 0.01);
        assert!((pct(m.f_accuracy_recall) - 83.82).abs() < 0.01);
    }

    #[test]
    fn undefined_metrics_stay_undefined() {
        let m = binary_metrics(&ConfusionCounts::new(0, 0, 0, 10)).unwrap();
        assert_eq!(m.accuracy.value, Some(1.0));
        assert_eq!(m.recall, Metric::UNDEFINED);
        assert_eq!(m.precision, Metric::UNDEFINED);
        assert_eq!(m.f1, Metric::UNDEFINED);
        assert_eq!(m.f_accuracy_recall.value, None);
        assert!(binary_metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn macro_f1_by_hand() {
        // positive F1 = 76/86, negative F1 = 38/48
        let want = (76.0 / 86.0 + 38.0 / 48.0) / 2.0;
        assert!((macro_f1(&ConfusionCounts::new(38, 2, 8, 19)).unwrap() - want).abs() < 1e-15);
        assert_eq!(macro_f1(&ConfusionCounts::new(0, 0, 0, 5)), None);
    }

    #[test]
    fn clopper_pearson_anchors() {
        let (lo, hi) = clopper_pearson_ci(67, 67, 0.95).unwrap();
        assert!((lo - 0.025f64.powf(1.0 / 67.0)).abs() < 1e-9);
        assert_eq!(hi, 1.0);
        let (lo, hi) = clopper_pearson_ci(0, 1, 0.95).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.975).abs() < 1e-9);
        assert!(clopper_pearson_ci(3, 2, 0.95).is_err());
        assert!(clopper_pearson_ci(0, 0, 0.95).is_err());
    }

    fn ln_choose(n: u64, k: u64) -> f64 {
        (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
    }

    /// P(X >= k) for X ~ Bin(n, p), by direct summation.
    fn upper_tail(n: u64, k: u64, p: f64) -> f64 {
        (k..=n)
            .map(|j| (ln_choose(n, j) + j as f64 * p.ln() + (n - j) as f64 * (1.0 - p).ln()).exp())
            .sum()
    }

    // Independent oracle: invert binomial tail sums instead of the beta function.
    fn cp_oracle(k: u64, n: u64) -> (f64, f64) {
        let solve = |f: &dyn Fn(f64) -> f64| {
            let (mut lo, mut hi) = (1e-300f64, 1.0 - 1e-16);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            0.5 * (lo + hi)
        };
        let low = if k == 0 { 0.0 } else { solve(&|p| upper_tail(n, k, p) - 0.025) };
        let high = if k == n { 1.0 } else { solve(&|p| 0.025 - (1.0 - upper_tail(n, k + 1, p))) };
        (low, high)
    }

    #[test]
    fn clopper_pearson_matches_binomial_tail_oracle() {
        for (k, n) in [(50, 100), (1, 10), (9, 10), (13, 24), (318, 427), (0, 5), (5, 5)] {
            let (lo, hi) = clopper_pearson_ci(k, n, 0.95).unwrap();
            let (olo, ohi) = cp_oracle(k, n);
            assert!((lo - olo).abs() < 1e-9, "{k}/{n} low {lo} vs {olo}");
            assert!((hi - ohi).abs() < 1e-9, "{k}/{n} high {hi} vs {ohi}");
        }
        let (lo, hi) = clopper_pearson_ci(50, 100, 0.95).unwrap();
        assert!((lo + hi - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wald_interval() {
        let (lo, hi) = wald_ci(57, 67, 0.95).unwrap();
        let p = 57.0 / 67.0;
        let half = 1.959963984540054 * (p * (1.0 - p) / 67.0f64).sqrt();
        assert!((lo - (p - half)).abs() < 1e-12 && (hi - (p + half)).abs() < 1e-12);
        assert_eq!(wald_ci(0, 10, 0.95).unwrap(), (0.0, 0.0));
    }

    proptest! {
        #[test]
        fn f1_is_harmonic_mean_and_scale_invariant(
            tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500, tn in 0u64..500, k in 1u64..20,
        ) {
            let c = ConfusionCounts::new(tp, fp, fn_, tn);
            prop_assume!(c.total() > 0);
            let m = binary_metrics(&c).unwrap();
            if let (Some(p), Some(r)) = (m.precision.value, m.recall.value) {
                if p + r > 0.0 {
                    prop_assert!((m.f1.value.unwrap() - 2.0 * p * r / (p + r)).abs() < 1e-12);
                }
            }
            let s = binary_metrics(&ConfusionCounts::new(tp * k, fp * k, fn_ * k, tn * k)).unwrap();
            for (a, b) in [(m.accuracy, s.accuracy), (m.recall, s.recall), (m.specificity, s.specificity)] {
                match (a.value, b.value) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() < 1e-12),
                    (x, y) => prop_assert_eq!(x, y),
                }
            }
            for mm in [m.accuracy, m.precision, m.recall, m.specificity, m.f1, m.npv] {
                if let (Some(v), Some([lo, hi])) = (mm.value, mm.ci) {
                    prop_assert!((0.0..=1.0).contains(&v));
                    prop_assert!(lo <= v + 1e-12 && v <= hi + 1e-12);
                }
            }
        }

        #[test]
        fn ci_bounds_monotone_in_successes(n in 1u64..200, k in 0u64..200) {
            prop_assume!(k < n);
            let (l1, h1) = clopper_pearson_ci(k, n, 0.95).unwrap();
            let (l2, h2) = clopper_pearson_ci(k + 1, n, 0.95).unwrap();
            prop_assert!(l1 <= l2 && h1 <= h2);
        }
    }
}
