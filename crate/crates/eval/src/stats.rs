//! Small-sample statistics used by the protocols.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

/// Exact binomial sign test on paired differences. Zero differences
/// (ties) are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub ties: usize,
    /// P(at least `positive` positives) under the null.
    pub p_positive: f64,
    /// P(at least `negative` negatives) under the null.
    pub p_negative: f64,
    pub p_two_sided: f64,
}

/// P(X ≥ k) for X ~ Binomial(n, 1/2).
fn upper_tail(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    let b = Binomial::new(0.5, n as u64).expect("p = 1/2 is valid");
    b.sf(k as u64 - 1)
}

pub fn sign_test(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|d| **d > 0.0).count();
    let negative = diffs.iter().filter(|d| **d < 0.0).count();
    let ties = diffs.len() - positive - negative;
    let n = positive + negative;
    let p_positive = upper_tail(positive, n);
    let p_negative = upper_tail(negative, n);
    SignTest {
        positive,
        negative,
        ties,
        p_positive,
        p_negative,
        p_two_sided: (2.0 * p_positive.min(p_negative)).min(1.0),
    }
}

/// Mean and standard error of the mean (sample standard deviation / √n;
/// zero for fewer than two values).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
