//! Split-half noise ceiling with Spearman-Brown correction.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;
use crate::stats::{mean, pearson};

/// `2 r / (1 + r)`; `None` at `r = -1` where the correction is undefined.
pub fn spearman_brown(r: f64) -> Option<f64> {
    if 1.0 + r <= 0.0 {
        None
    } else {
        Some(2.0 * r / (1.0 + r))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ceiling {
    /// Split-half correlation averaged over repeats.
    pub split_half_r: f64,
    /// Spearman-Brown corrected consistency.
    pub r_cons: Option<f64>,
}

/// Noise ceiling of one neuron from its per-image trial lists.
///
/// Each repeat shuffles every image's trials into halves of `floor(T/2)` and
/// `ceil(T/2)` trials and correlates the half means across images. Trials are
/// put in sorted order before shuffling so the result depends only on each
/// image's multiset of trials. A repeat with zero-variance half means counts as
/// `r = 0`.
pub fn ceiling(trials: &[Vec<f64>], repeats: usize, seed: u64) -> Result<Ceiling> {
    if repeats == 0 {
        return Err(Error::validation("ceiling needs at least one repeat"));
    }
    if trials.len() < 3 {
        return Err(Error::validation(format!(
            "ceiling needs at least 3 images, got {}",
            trials.len()
        )));
    }
    if let Some(i) = trials.iter().position(|t| t.len() < 2) {
        return Err(Error::validation(format!(
            "image {i} has {} trial(s); split-half ceiling needs at least 2",
            trials[i].len()
        )));
    }
    let canonical: Vec<Vec<f64>> = trials
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.sort_by(f64::total_cmp);
            t
        })
        .collect();
    let mut rng = seed::rng(seed);
    let mut half_a = vec![0.0; trials.len()];
    let mut half_b = vec![0.0; trials.len()];
    let mut total = 0.0;
    for _ in 0..repeats {
        for (i, t) in canonical.iter().enumerate() {
            let mut shuffled = t.clone();
            shuffled.shuffle(&mut rng);
            let h = shuffled.len() / 2;
            half_a[i] = mean(&shuffled[..h]);
            half_b[i] = mean(&shuffled[h..]);
        }
        total += pearson(&half_a, &half_b).unwrap_or(0.0);
    }
    let r = total / repeats as f64;
    Ok(Ceiling {
        split_half_r: r,
        r_cons: spearman_brown(r),
    })
}
