//! Keep probabilities and variance bookkeeping for sparsified gradients.
//!
//! A gradient `g` sorted by decreasing magnitude keeps its first `k` entries
//! with probability one and every later entry with probability `|g_i| / r`.
//! The rate `r` is chosen so that the second moment of the sparse vector
//! exceeds the dense one by a factor `1 + eps`:
//!
//! ```text
//! r = sum_{i>k} |g_i| / ((1 + eps) * sum_i g_i^2 - sum_{i<=k} g_i^2)
//! ```
//!
//! An alternative model with `p_i = r |g_i|` and second moment
//! `sum g_i^2 / p_i` is available through [`VarianceModel::Alternative`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::rng::SimRng;

/// Slack allowed when comparing the retained mass with its bound.
pub const BOUND_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceModel {
    /// `p_i = |g_i| / r`, second moment `sum g_i^2 p_i`.
    #[default]
    Primary,
    /// `p_i = r |g_i|`, second moment `sum g_i^2 / p_i`.
    Alternative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseGradient {
    pub g: Vec<f64>,
    pub k: usize,
    pub rate: f64,
    pub p: Vec<f64>,
    pub eps: f64,
}

impl SparseGradient {
    /// Builds the keep probabilities for `g` using the rate implied by `eps`.
    pub fn new(g: Vec<f64>, k: usize, eps: f64, model: VarianceModel) -> Result<Self> {
        let rate = rate_from_slack(&g, k, eps)?;
        let p = keep_probabilities_with(&g, k, rate, model)?;
        Ok(SparseGradient { g, k, rate, p, eps })
    }

    pub fn expected_second_moment(&self, model: VarianceModel) -> f64 {
        expected_second_moment(&self.g, &self.p, model)
    }
}

/// Sorts by decreasing magnitude; ties keep their original order.
pub fn sort_by_magnitude(g: &mut [f64]) {
    g.sort_by(|a, b| b.abs().total_cmp(&a.abs()));
}

fn check_sorted(g: &[f64], k: usize) -> Result<()> {
    if k > g.len() {
        return Err(FluidError::Shape(format!(
            "k = {k} exceeds gradient length {}",
            g.len()
        )));
    }
    if let Some(w) = g.windows(2).position(|w| w[0].abs() < w[1].abs()) {
        return Err(FluidError::Shape(format!(
            "gradient not sorted by magnitude at index {}",
            w + 1
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(FluidError::Shape("gradient has non-finite entries".into()));
    }
    Ok(())
}

/// `p_i = 1` for the top `k`, `|g_i| / r` after that.
pub fn keep_probabilities(g: &[f64], k: usize, r: f64) -> Result<Vec<f64>> {
    keep_probabilities_with(g, k, r, VarianceModel::Primary)
}

pub fn keep_probabilities_with(
    g: &[f64],
    k: usize,
    r: f64,
    model: VarianceModel,
) -> Result<Vec<f64>> {
    check_sorted(g, k)?;
    if !(r > 0.0 && r.is_finite()) {
        return Err(FluidError::Degenerate(format!("rate {r} must be positive and finite")));
    }
    g.iter()
        .enumerate()
        .map(|(i, &gi)| {
            if i < k {
                return Ok(1.0);
            }
            let p = match model {
                VarianceModel::Primary => gi.abs() / r,
                VarianceModel::Alternative => gi.abs() * r,
            };
            if p > 1.0 {
                Err(FluidError::InfeasibleRate { index: i, ratio: p })
            } else {
                Ok(p)
            }
        })
        .collect()
}

fn sums(g: &[f64], k: usize) -> (f64, f64, f64) {
    let total_sq: f64 = g.iter().map(|v| v * v).sum();
    let top_sq: f64 = g[..k].iter().map(|v| v * v).sum();
    let tail_abs: f64 = g[k..].iter().map(|v| v.abs()).sum();
    (total_sq, top_sq, tail_abs)
}

/// Rate that makes the sparse second moment equal `(1 + eps)` times the
/// dense one.
pub fn rate_from_slack(g: &[f64], k: usize, eps: f64) -> Result<f64> {
    check_sorted(g, k)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(FluidError::Slack(eps));
    }
    let (total_sq, top_sq, tail_abs) = sums(g, k);
    if tail_abs == 0.0 {
        return Err(FluidError::Degenerate(
            "all gradient mass lies in the always-kept prefix; rate is zero".into(),
        ));
    }
    let denom = (1.0 + eps) * total_sq - top_sq;
    if !(denom > 0.0) {
        return Err(FluidError::Slack(denom));
    }
    Ok(tail_abs / denom)
}

/// Left-hand side of the rate identity
/// `sum_{i<=k} g_i^2 + sum_{i>k} |g_i| / r - (1 + eps) sum_i g_i^2`,
/// which is zero for the rate returned by [`rate_from_slack`].
pub fn slack_residual(g: &[f64], k: usize, eps: f64, r: f64) -> f64 {
    let (total_sq, top_sq, tail_abs) = sums(g, k);
    top_sq + tail_abs / r - (1.0 + eps) * total_sq
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub sum_p: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Total keep probability against `k (1 + eps)`.
pub fn probability_mass_bound(g: &[f64], k: usize, eps: f64) -> Result<BoundCheck> {
    probability_mass_bound_with(g, k, eps, VarianceModel::Primary)
}

pub fn probability_mass_bound_with(
    g: &[f64],
    k: usize,
    eps: f64,
    model: VarianceModel,
) -> Result<BoundCheck> {
    check_sorted(g, k)?;
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(FluidError::Slack(eps));
    }
    let bound = k as f64 * (1.0 + eps);
    let sum_p = if k == g.len() {
        k as f64
    } else {
        let r = rate_from_slack(g, k, eps)?;
        keep_probabilities_with(g, k, r, model)?.iter().sum()
    };
    Ok(BoundCheck {
        sum_p,
        bound,
        holds: sum_p <= bound + BOUND_TOLERANCE,
    })
}

pub fn expected_second_moment(g: &[f64], p: &[f64], model: VarianceModel) -> f64 {
    g.iter()
        .zip(p)
        .map(|(gi, pi)| match model {
            VarianceModel::Primary => gi * gi * pi,
            VarianceModel::Alternative => gi * gi / pi,
        })
        .sum()
}

/// Variance of one trial of [`empirical_variance_oracle`], used for its
/// standard error.
pub fn trial_variance(g: &[f64], p: &[f64], model: VarianceModel) -> f64 {
    g.iter()
        .zip(p)
        .map(|(gi, pi)| {
            let x = match model {
                VarianceModel::Primary => gi * gi,
                VarianceModel::Alternative => gi * gi / (pi * pi),
            };
            x * x * pi * (1.0 - pi)
        })
        .sum()
}

/// Monte-Carlo second moment of the sparsified vector: each element is kept
/// independently with probability `p_i`. Under the primary model a trial
/// contributes `sum (kept g_i)^2`; under the alternative model kept entries
/// are rescaled by `1 / p_i` first.
pub fn empirical_variance_oracle(
    g: &[f64],
    p: &[f64],
    trials: usize,
    rng: &mut SimRng,
    model: VarianceModel,
) -> Result<f64> {
    if trials == 0 {
        return Err(FluidError::Config("trials must be >= 1".into()));
    }
    if g.len() != p.len() {
        return Err(FluidError::Shape(format!(
            "{} gradient entries but {} probabilities",
            g.len(),
            p.len()
        )));
    }
    let mut mean = 0.0;
    for t in 0..trials {
        let mut x = 0.0;
        for (gi, &pi) in g.iter().zip(p) {
            if pi >= 1.0 || rng.random::<f64>() < pi {
                x += match model {
                    VarianceModel::Primary => gi * gi,
                    VarianceModel::Alternative => (gi / pi) * (gi / pi),
                };
            }
        }
        // running mean stays exact when every trial is identical
        mean += (x - mean) / (t + 1) as f64;
    }
    Ok(mean)
}

/// Gradient with entries uniform in `(-1, 1)`, sorted by magnitude.
pub fn random_gradient(m: usize, rng: &mut SimRng) -> Vec<f64> {
    let mut g: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
    sort_by_magnitude(&mut g);
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    #[test]
    fn keep_probability_examples() {
        let g = [3.0, 2.0, 1.0];
        assert_eq!(keep_probabilities(&g, 3, 1.0).unwrap(), vec![1.0, 1.0, 1.0]);
        assert_eq!(keep_probabilities(&g, 1, 4.0).unwrap(), vec![1.0, 0.5, 0.25]);
        assert!(matches!(
            keep_probabilities(&g, 1, 1.5),
            Err(FluidError::InfeasibleRate { index: 1, .. })
        ));
    }

    #[test]
    fn unsorted_input_is_rejected() {
        assert!(matches!(keep_probabilities(&[1.0, 2.0], 0, 5.0), Err(FluidError::Shape(_))));
    }

    #[test]
    fn rate_by_hand() {
        // numerator |1| = 1, denominator 2 * (4 + 1) - 4 = 6
        let r = rate_from_slack(&[2.0, 1.0], 1, 1.0).unwrap();
        assert!((r - 1.0 / 6.0).abs() < 1e-15);
        assert!(slack_residual(&[2.0, 1.0], 1, 1.0, r).abs() < 1e-12);
    }

    #[test]
    fn zero_tail_is_degenerate() {
        assert!(matches!(
            rate_from_slack(&[2.0, 0.0, 0.0], 1, 0.5),
            Err(FluidError::Degenerate(_))
        ));
        assert!(matches!(rate_from_slack(&[2.0, 1.0], 2, 0.5), Err(FluidError::Degenerate(_))));
    }

    #[test]
    fn bad_slack_is_rejected() {
        assert!(matches!(rate_from_slack(&[2.0, 1.0], 1, 0.0), Err(FluidError::Slack(_))));
    }

    #[test]
    fn keep_everything_bound() {
        let b = probability_mass_bound(&[3.0, 2.0, 1.0], 3, 0.5).unwrap();
        assert_eq!(b.sum_p, 3.0);
        assert_eq!(b.bound, 4.5);
        assert!(b.holds);
    }

    #[test]
    fn hand_example_is_infeasible() {
        // r = 1/6 makes the tail probability |1| / r = 6
        assert!(matches!(
            probability_mass_bound(&[2.0, 1.0], 1, 1.0),
            Err(FluidError::InfeasibleRate { index: 1, .. })
        ));
    }

    #[test]
    fn retained_mass_closed_form() {
        // sum p = k + (1 + eps) sum g^2 - sum_{top} g^2, evaluated independently
        let mut rng = rng_for(3, Stream::Analysis, &[]);
        let mut checked = 0;
        while checked < 50 {
            let g: Vec<f64> = random_gradient(12, &mut rng).iter().map(|v| v * 0.05).collect();
            let k = 3;
            let eps = 0.3;
            let Ok(b) = probability_mass_bound(&g, k, eps) else { continue };
            let total: f64 = g.iter().map(|v| v * v).sum();
            let top: f64 = g[..k].iter().map(|v| v * v).sum();
            let closed = k as f64 + (1.0 + eps) * total - top;
            assert!((b.sum_p - closed).abs() < 1e-12);
            checked += 1;
        }
    }

    #[test]
    fn monte_carlo_exact_when_all_kept() {
        let g = [1.5, -0.5, 0.25];
        let mut rng = rng_for(0, Stream::Analysis, &[]);
        let est = empirical_variance_oracle(&g, &[1.0; 3], 17, &mut rng, VarianceModel::Primary).unwrap();
        assert_eq!(est, 1.5 * 1.5 + 0.25 + 0.0625);
    }

    #[test]
    fn monte_carlo_half_probabilities() {
        let g = [1.0, 1.0];
        let p = [0.5, 0.5];
        let mut rng = rng_for(1, Stream::Analysis, &[]);
        let trials = 100_000;
        let est = empirical_variance_oracle(&g, &p, trials, &mut rng, VarianceModel::Primary).unwrap();
        let se = (trial_variance(&g, &p, VarianceModel::Primary) / trials as f64).sqrt();
        assert!((est - 1.0).abs() <= 3.0 * se, "estimate {est}, se {se}");
    }

    #[test]
    fn single_element_expectation() {
        assert_eq!(expected_second_moment(&[2.0], &[0.25], VarianceModel::Primary), 1.0);
        assert_eq!(expected_second_moment(&[2.0], &[0.25], VarianceModel::Alternative), 16.0);
    }

    #[test]
    fn alternative_model_is_unbiased_for_its_moment() {
        let g = [0.9, 0.4, -0.3];
        let p = [1.0, 0.6, 0.3];
        let mut rng = rng_for(2, Stream::Analysis, &[]);
        let trials = 100_000;
        let m = VarianceModel::Alternative;
        let est = empirical_variance_oracle(&g, &p, trials, &mut rng, m).unwrap();
        let se = (trial_variance(&g, &p, m) / trials as f64).sqrt();
        assert!((est - expected_second_moment(&g, &p, m)).abs() <= 3.0 * se);
    }

    #[test]
    fn zero_trials_rejected() {
        let mut rng = rng_for(0, Stream::Analysis, &[]);
        assert!(empirical_variance_oracle(&[1.0], &[1.0], 0, &mut rng, VarianceModel::Primary).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn probabilities_follow_magnitudes(
                raw in proptest::collection::vec(-1.0f64..1.0, 2..40),
                kfrac in 0.0f64..1.0,
                eps in 0.01f64..2.0,
            ) {
                let mut g = raw;
                sort_by_magnitude(&mut g);
                let k = ((g.len() - 1) as f64 * kfrac) as usize;
                if let Ok(sg) = SparseGradient::new(g, k, eps, VarianceModel::Primary) {
                    for i in 0..sg.g.len() {
                        prop_assert!(sg.p[i] <= 1.0);
                        for j in i + 1..sg.g.len() {
                            if sg.g[i].abs() >= sg.g[j].abs() {
                                prop_assert!(sg.p[i] >= sg.p[j]);
                            }
                        }
                    }
                }
            }

            #[test]
            fn rate_satisfies_identity(
                raw in proptest::collection::vec(-1.0f64..1.0, 2..40),
                kfrac in 0.0f64..1.0,
                eps in 0.01f64..2.0,
            ) {
                let mut g = raw;
                sort_by_magnitude(&mut g);
                let k = ((g.len() - 1) as f64 * kfrac) as usize;
                if let Ok(r) = rate_from_slack(&g, k, eps) {
                    prop_assert!(slack_residual(&g, k, eps, r).abs() < 1e-9);
                }
            }
        }
    }
}
