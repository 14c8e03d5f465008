//! Neuron invariance scoring and drop-threshold calibration.
//!
//! A neuron's score `g` is the largest relative change among its incoming
//! weights and bias between the last global model and a client's trained
//! copy. Neurons that a majority of non-stragglers score below the layer's
//! threshold, for several consecutive calibration steps, become drop
//! candidates for stragglers.

use serde::{Deserialize, Serialize};

use crate::dropout::LayerCandidates;
use crate::error::{FluidError, Result};
use crate::nn::Model;

pub const DEFAULT_DELTA: f64 = 1e-8;
pub const DEFAULT_PERSISTENCE: usize = 2;
pub const DEFAULT_GROWTH_FACTOR: f64 = 1.25;

/// Threshold a zero threshold grows to; multiplying zero would never move.
pub const MIN_GROWN_THRESHOLD: f64 = 1e-8;

/// Per-hidden-layer, per-neuron scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronScores {
    pub layers: Vec<Vec<f64>>,
}

impl NeuronScores {
    pub fn neuron_count(&self) -> usize {
        self.layers.iter().map(Vec::len).sum()
    }

    fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }
}

/// `max_p |cur_p - prev_p| / (|prev_p| + delta)`.
pub fn neuron_score(prev: &[f64], cur: &[f64], delta: f64) -> Result<f64> {
    if prev.len() != cur.len() {
        return Err(FluidError::Shape(format!(
            "neuron has {} previous and {} current parameters",
            prev.len(),
            cur.len()
        )));
    }
    if !(delta > 0.0) {
        return Err(FluidError::Config(format!("score guard delta {delta} must be > 0")));
    }
    Ok(prev
        .iter()
        .zip(cur)
        .map(|(p, c)| (c - p).abs() / (p.abs() + delta))
        .fold(0.0, f64::max))
}

/// Scores every hidden neuron of `trained` against `reference`. Both models
/// must have the full (unmasked) shape.
pub fn score_model(reference: &Model, trained: &Model, delta: f64) -> Result<NeuronScores> {
    if reference.hidden_sizes() != trained.hidden_sizes()
        || reference.input_dim() != trained.input_dim()
    {
        return Err(FluidError::Shape(
            "invariance scoring needs two full models of the same shape".into(),
        ));
    }
    if !(delta > 0.0) {
        return Err(FluidError::Config(format!("score guard delta {delta} must be > 0")));
    }
    let hidden = reference.hidden_layer_count();
    let layers = (0..hidden)
        .map(|j| {
            let prev = &reference.layers()[j];
            let cur = &trained.layers()[j];
            (0..prev.out_neurons())
                .map(|i| {
                    let w = prev
                        .weights
                        .row(i)
                        .iter()
                        .zip(cur.weights.row(i))
                        .map(|(p, c)| (c - p).abs() / (p.abs() + delta))
                        .fold(0.0, f64::max);
                    let (pb, cb) = (prev.biases[i], cur.biases[i]);
                    w.max((cb - pb).abs() / (pb.abs() + delta))
                })
                .collect()
        })
        .collect();
    Ok(NeuronScores { layers })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-neuron median across clients.
pub fn median_scores(sets: &[NeuronScores]) -> Result<NeuronScores> {
    let first = sets
        .first()
        .ok_or_else(|| FluidError::EmptyInput("no score sets".into()))?;
    let sizes = first.sizes();
    if sets.iter().any(|s| s.sizes() != sizes) {
        return Err(FluidError::Shape("score sets differ in shape".into()));
    }
    let mut buf = Vec::with_capacity(sets.len());
    let layers = sizes
        .iter()
        .enumerate()
        .map(|(j, &n)| {
            (0..n)
                .map(|i| {
                    buf.clear();
                    buf.extend(sets.iter().map(|s| s.layers[j][i]));
                    median(&mut buf)
                })
                .collect()
        })
        .collect();
    Ok(NeuronScores { layers })
}

/// Threshold per layer: mean over warm-up epochs of the smallest neuron score
/// in that layer.
pub fn init_threshold(warmup: &[NeuronScores]) -> Result<Vec<f64>> {
    let first = warmup
        .first()
        .ok_or_else(|| FluidError::Calibration("no warm-up scores".into()))?;
    let sizes = first.sizes();
    if warmup.iter().any(|s| s.sizes() != sizes) {
        return Err(FluidError::Shape("warm-up score sets differ in shape".into()));
    }
    if sizes.contains(&0) {
        return Err(FluidError::Calibration("empty layer in warm-up scores".into()));
    }
    let epochs = warmup.len() as f64;
    Ok((0..sizes.len())
        .map(|j| {
            warmup
                .iter()
                .map(|s| s.layers[j].iter().copied().fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / epochs
        })
        .collect())
}

/// Fraction of all hidden neurons scoring strictly below their layer's
/// threshold.
pub fn invariant_fraction(scores: &NeuronScores, thresholds: &[f64]) -> f64 {
    let total = scores.neuron_count();
    if total == 0 {
        return 0.0;
    }
    let below: usize = scores
        .layers
        .iter()
        .zip(thresholds)
        .map(|(layer, &th)| layer.iter().filter(|&&g| g < th).count())
        .sum();
    below as f64 / total as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Drop threshold per hidden layer.
    pub thresholds: Vec<f64>,
    /// Non-stragglers that scored each neuron below threshold in the latest
    /// vote.
    pub votes: Vec<Vec<usize>>,
    /// Consecutive votes in which a strict majority scored the neuron below
    /// threshold.
    pub consecutive: Vec<Vec<usize>>,
    /// Number of votes taken so far.
    pub history: usize,
}

impl CalibrationState {
    pub fn new(hidden_sizes: &[usize]) -> Self {
        CalibrationState {
            thresholds: vec![0.0; hidden_sizes.len()],
            votes: hidden_sizes.iter().map(|&n| vec![0; n]).collect(),
            consecutive: hidden_sizes.iter().map(|&n| vec![0; n]).collect(),
            history: 0,
        }
    }

    /// Counts per-neuron votes from this epoch's non-straggler scores and
    /// returns each layer's candidates ranked by median score (then index).
    ///
    /// A neuron is a candidate when more than half of the non-stragglers
    /// scored it below threshold and that has held for at least
    /// `persistence` consecutive votes.
    pub fn vote_candidates(
        &mut self,
        scores: &[NeuronScores],
        persistence: usize,
    ) -> Result<Vec<LayerCandidates>> {
        if scores.is_empty() {
            return Err(FluidError::EmptyInput("no non-straggler scores to vote on".into()));
        }
        let sizes: Vec<usize> = self.votes.iter().map(Vec::len).collect();
        if scores.iter().any(|s| s.sizes() != sizes) {
            return Err(FluidError::Shape("score set does not match calibration state".into()));
        }
        let medians = median_scores(scores)?;
        let voters = scores.len();
        self.history += 1;

        let mut out = Vec::with_capacity(sizes.len());
        for (j, &n) in sizes.iter().enumerate() {
            let th = self.thresholds[j];
            let mut ranked = Vec::new();
            for i in 0..n {
                let below = scores.iter().filter(|s| s.layers[j][i] < th).count();
                self.votes[j][i] = below;
                if 2 * below > voters {
                    self.consecutive[j][i] += 1;
                } else {
                    self.consecutive[j][i] = 0;
                }
                if 2 * below > voters && self.consecutive[j][i] >= persistence {
                    ranked.push(i);
                }
            }
            let med = &medians.layers[j];
            ranked.sort_by(|&a, &b| med[a].total_cmp(&med[b]).then(a.cmp(&b)));
            out.push(LayerCandidates {
                ranked,
                scores: med.clone(),
            });
        }
        Ok(out)
    }

    /// Multiplies each layer's threshold by `factor` while it has fewer
    /// candidates than required drops.
    pub fn grow_threshold(&mut self, required_drops: &[usize], candidate_counts: &[usize], factor: f64) {
        for ((th, &need), &have) in self
            .thresholds
            .iter_mut()
            .zip(required_drops)
            .zip(candidate_counts)
        {
            if have < need {
                *th = if *th > 0.0 {
                    *th * factor
                } else {
                    MIN_GROWN_THRESHOLD
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(layers: Vec<Vec<f64>>) -> NeuronScores {
        NeuronScores { layers }
    }

    #[test]
    fn neuron_score_examples() {
        let g = neuron_score(&[2.0, 4.0], &[2.1, 4.0], 1e-8).unwrap();
        assert!((g - 0.05).abs() < 1e-9);
        assert_eq!(neuron_score(&[1.5, -3.0], &[1.5, -3.0], 1e-8).unwrap(), 0.0);
        let g = neuron_score(&[0.0], &[0.001], 1e-8).unwrap();
        assert!((g - 1e5).abs() < 1e-6);
    }

    #[test]
    fn neuron_score_rejects_length_mismatch() {
        assert!(matches!(
            neuron_score(&[1.0], &[1.0, 2.0], 1e-8),
            Err(FluidError::Shape(_))
        ));
    }

    #[test]
    fn score_model_uses_rows_and_biases() {
        let a = Model::init(&[3, 4, 2], 1).unwrap();
        let mut b = a.clone();
        let w = b.layers()[0].weights.get(2, 1);
        b.layers_mut()[0].weights.set(2, 1, w * 1.1);
        let bias = b.layers()[0].biases[3];
        b.layers_mut()[0].biases[3] = bias * 3.0;
        let s = score_model(&a, &b, 1e-8).unwrap();
        assert_eq!(s.layers.len(), 1);
        assert!((s.layers[0][2] - 0.1).abs() < 1e-6);
        assert!((s.layers[0][3] - 2.0).abs() < 1e-6);
        assert_eq!(s.layers[0][0], 0.0);
        assert_eq!(s.layers[0][1], 0.0);
    }

    #[test]
    fn majority_vote_and_persistence() {
        let mut state = CalibrationState::new(&[2]);
        state.thresholds = vec![0.1];
        // neuron 0 below for 3 of 4 clients, neuron 1 for exactly 2 of 4
        let sets = vec![
            scores(vec![vec![0.05, 0.05]]),
            scores(vec![vec![0.05, 0.05]]),
            scores(vec![vec![0.05, 0.50]]),
            scores(vec![vec![0.50, 0.50]]),
        ];
        let first = state.vote_candidates(&sets, 2).unwrap();
        assert!(first[0].ranked.is_empty());
        let second = state.vote_candidates(&sets, 2).unwrap();
        assert_eq!(second[0].ranked, vec![0]);
        assert_eq!(state.votes[0], vec![3, 2]);
        assert_eq!(state.consecutive[0], vec![2, 0]);
    }

    #[test]
    fn candidates_ranked_by_median() {
        let mut state = CalibrationState::new(&[3]);
        state.thresholds = vec![1.0];
        let sets = vec![scores(vec![vec![0.02, 0.5, 0.01]])];
        let c = state.vote_candidates(&sets, 0).unwrap();
        assert_eq!(c[0].ranked, vec![2, 0, 1]);
    }

    #[test]
    fn counter_resets_without_majority() {
        let mut state = CalibrationState::new(&[1]);
        state.thresholds = vec![0.1];
        let low = vec![scores(vec![vec![0.0]])];
        let high = vec![scores(vec![vec![1.0]])];
        state.vote_candidates(&low, 1).unwrap();
        state.vote_candidates(&low, 1).unwrap();
        assert_eq!(state.consecutive[0][0], 2);
        state.vote_candidates(&high, 1).unwrap();
        assert_eq!(state.consecutive[0][0], 0);
    }

    #[test]
    fn empty_votes_are_rejected() {
        let mut state = CalibrationState::new(&[1]);
        assert!(matches!(state.vote_candidates(&[], 1), Err(FluidError::EmptyInput(_))));
    }

    #[test]
    fn init_threshold_examples() {
        let th = init_threshold(&[scores(vec![vec![0.1, 0.3, 0.2]])]).unwrap();
        assert_eq!(th, vec![0.1]);
        let th = init_threshold(&[
            scores(vec![vec![0.1, 0.4]]),
            scores(vec![vec![0.5, 0.3]]),
        ])
        .unwrap();
        assert!((th[0] - 0.2).abs() < 1e-15);
        let th = init_threshold(&[scores(vec![vec![0.7; 5]]), scores(vec![vec![0.7; 5]])]).unwrap();
        assert_eq!(th, vec![0.7]);
        assert!(matches!(init_threshold(&[]), Err(FluidError::Calibration(_))));
    }

    #[test]
    fn grow_threshold_rule() {
        let mut state = CalibrationState::new(&[4, 4]);
        state.thresholds = vec![0.1, 0.1];
        state.grow_threshold(&[5, 5], &[3, 5], 1.25);
        assert!((state.thresholds[0] - 0.125).abs() < 1e-15);
        assert_eq!(state.thresholds[1], 0.1);
    }

    #[test]
    fn grow_threshold_never_decreases() {
        let mut state = CalibrationState::new(&[3]);
        state.thresholds = vec![0.05];
        let mut last = 0.05;
        for (need, have) in [(3, 0), (3, 1), (0, 2), (3, 3), (2, 0)] {
            state.grow_threshold(&[need], &[have], 1.25);
            assert!(state.thresholds[0] >= last);
            last = state.thresholds[0];
        }
    }

    #[test]
    fn invariant_fraction_extremes() {
        let s = scores(vec![vec![0.0, 0.2, 0.4], vec![0.1]]);
        assert_eq!(invariant_fraction(&s, &[0.0, 0.0]), 0.0);
        assert_eq!(invariant_fraction(&s, &[1e9, 1e9]), 1.0);
        assert_eq!(invariant_fraction(&s, &[0.3, 0.0]), 0.5);
    }

    #[test]
    fn frozen_layer_becomes_all_candidates() {
        let m = Model::init(&[3, 5, 2], 4).unwrap();
        let s = score_model(&m, &m, DEFAULT_DELTA).unwrap();
        assert!(s.layers[0].iter().all(|&g| g == 0.0));
        let mut state = CalibrationState::new(&[5]);
        state.grow_threshold(&[5], &[0], 1.25);
        assert!(state.thresholds[0] > 0.0);
        let sets = vec![s.clone(), s.clone(), s];
        let c = state.vote_candidates(&sets, 1).unwrap();
        assert_eq!(c[0].ranked, vec![0, 1, 2, 3, 4]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(128))]

            #[test]
            fn fraction_is_monotone_in_threshold(
                layer in proptest::collection::vec(0.0f64..10.0, 1..40),
                a in 0.0f64..12.0,
                b in 0.0f64..12.0,
            ) {
                let s = scores(vec![layer]);
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(invariant_fraction(&s, &[lo]) <= invariant_fraction(&s, &[hi]));
            }

            #[test]
            fn score_is_scale_free(
                prev in proptest::collection::vec(0.1f64..5.0, 1..10),
                deltas in proptest::collection::vec(-1.0f64..1.0, 10),
                c in 0.01f64..100.0,
            ) {
                let cur: Vec<f64> = prev.iter().zip(&deltas).map(|(p, d)| p + d).collect();
                let sp: Vec<f64> = prev.iter().map(|p| p * c).collect();
                let sc: Vec<f64> = cur.iter().map(|p| p * c).collect();
                let g1 = neuron_score(&prev, &cur, 1e-300).unwrap();
                let g2 = neuron_score(&sp, &sc, 1e-300).unwrap();
                prop_assert!((g1 - g2).abs() <= 1e-9 * g1.max(1.0));
            }

            #[test]
            fn no_candidate_before_persistence(
                persistence in 1usize..5,
                layer in proptest::collection::vec(0.0f64..0.05, 1..8),
            ) {
                let mut state = CalibrationState::new(&[layer.len()]);
                state.thresholds = vec![1.0];
                let sets = vec![scores(vec![layer])];
                for epoch in 1..=persistence {
                    let c = state.vote_candidates(&sets, persistence).unwrap();
                    if epoch < persistence {
                        prop_assert!(c[0].ranked.is_empty());
                    } else {
                        prop_assert!(!c[0].ranked.is_empty());
                    }
                }
            }
        }
    }
}
