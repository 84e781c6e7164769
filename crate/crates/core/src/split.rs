use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_paths: Vec<String>,
    pub val_paths: Vec<String>,
    pub test_paths: Vec<String>,
    pub seed: u64,
}

/// Shuffles `paths` by `seed` and partitions them by `ratios`
/// (train, val, test). Zero ratios are allowed; part sizes use the
/// largest-remainder rule so each is within one of its exact share.
pub fn split_dataset(paths: &[String], ratios: (f64, f64, f64), seed: u64) -> Result<SplitSpec> {
    if paths.is_empty() {
        return Err(Error::Invalid("cannot split an empty path list".into()));
    }
    let r = [ratios.0, ratios.1, ratios.2];
    if r.iter().any(|v| !v.is_finite() || *v < 0.0) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios {r:?} must be non-negative and sum to 1"
        )));
    }

    let n = paths.len();
    let exact: Vec<f64> = r.iter().map(|v| v * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if r[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }

    let mut shuffled = paths.to_vec();
    shuffled.shuffle(&mut seeded(seed));
    let test_paths = shuffled.split_off(sizes[0] + sizes[1]);
    let val_paths = shuffled.split_off(sizes[0]);
    Ok(SplitSpec {
        train_paths: shuffled,
        val_paths,
        test_paths,
        seed,
    })
}
