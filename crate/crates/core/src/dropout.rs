//! Neuron masks, sub-model extraction and per-coordinate aggregation.
//!
//! Only hidden layers are ever masked. Dropping neuron `i` of hidden layer
//! `j` removes row `i` and bias `i` of layer `j` and column `i` of layer
//! `j + 1`.

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{FluidError, Result};
use crate::nn::{DenseLayer, Matrix, Model};
use crate::rng::SimRng;

/// Neurons retained at rate `r` in a layer of `n`: `round(r * n)` with halves
/// rounded up, never fewer than one.
pub fn kept_count(rate: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    ((rate * n as f64 + 0.5).floor() as usize).clamp(1, n)
}

pub fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(FluidError::Rate(rate))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// No dropout; every client trains the full model.
    None,
    Random,
    Ordered,
    Invariant,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Random => "random",
            Strategy::Ordered => "ordered",
            Strategy::Invariant => "invariant",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = FluidError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" | "fedavg" => Ok(Strategy::None),
            "random" => Ok(Strategy::Random),
            "ordered" => Ok(Strategy::Ordered),
            "invariant" => Ok(Strategy::Invariant),
            other => Err(FluidError::Config(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-hidden-layer keep flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronMask {
    pub rate: f64,
    pub layers: Vec<Vec<bool>>,
}

impl NeuronMask {
    pub fn full(model: &Model) -> Self {
        NeuronMask {
            rate: 1.0,
            layers: model.hidden_sizes().into_iter().map(|n| vec![true; n]).collect(),
        }
    }

    pub fn is_full(&self) -> bool {
        self.layers.iter().all(|l| l.iter().all(|&k| k))
    }

    pub fn kept(&self, layer: usize) -> Vec<usize> {
        self.layers[layer]
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }

    pub fn kept_counts(&self) -> Vec<usize> {
        self.layers
            .iter()
            .map(|l| l.iter().filter(|&&k| k).count())
            .collect()
    }

    pub fn check_against(&self, model: &Model) -> Result<()> {
        let sizes = model.hidden_sizes();
        if self.layers.len() != sizes.len()
            || self.layers.iter().zip(&sizes).any(|(l, &n)| l.len() != n)
        {
            return Err(FluidError::Shape(format!(
                "mask layers {:?} do not match hidden sizes {sizes:?}",
                self.layers.iter().map(Vec::len).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }

    /// Kept row indices of model layer `j` (all rows for the output layer).
    fn rows_of(&self, model: &Model, j: usize) -> Vec<usize> {
        if j < self.layers.len() {
            self.kept(j)
        } else {
            (0..model.layers()[j].out_neurons()).collect()
        }
    }

    /// Kept column indices of model layer `j` (all inputs for the first layer).
    fn cols_of(&self, model: &Model, j: usize) -> Vec<usize> {
        if j == 0 {
            (0..model.input_dim()).collect()
        } else {
            self.kept(j - 1)
        }
    }
}

/// Uniformly random subset of `round(r * n)` neurons per hidden layer.
pub fn mask_random(model: &Model, rate: f64, rng: &mut SimRng) -> Result<NeuronMask> {
    check_rate(rate)?;
    let layers = model
        .hidden_sizes()
        .into_iter()
        .map(|n| {
            let mut keep = vec![false; n];
            for i in index::sample(rng, n, kept_count(rate, n)) {
                keep[i] = true;
            }
            keep
        })
        .collect();
    Ok(NeuronMask { rate, layers })
}

/// Keeps the lowest-index `round(r * n)` neurons of each hidden layer.
pub fn mask_ordered(model: &Model, rate: f64) -> Result<NeuronMask> {
    check_rate(rate)?;
    let layers = model
        .hidden_sizes()
        .into_iter()
        .map(|n| {
            let k = kept_count(rate, n);
            (0..n).map(|i| i < k).collect()
        })
        .collect();
    Ok(NeuronMask { rate, layers })
}

/// Drop candidates for one hidden layer.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LayerCandidates {
    /// Candidate neurons, most invariant first.
    pub ranked: Vec<usize>,
    /// Invariance score for every neuron in the layer; used to pick extra
    /// drops when there are not enough candidates.
    pub scores: Vec<f64>,
}

/// Drops the first `n - round(r * n)` ranked candidates of each hidden layer.
/// When a layer has too few candidates the remaining drops go to the
/// lowest-scoring non-candidates (ties by index).
pub fn mask_invariant(
    model: &Model,
    rate: f64,
    candidates: &[LayerCandidates],
) -> Result<NeuronMask> {
    check_rate(rate)?;
    let sizes = model.hidden_sizes();
    if candidates.len() != sizes.len() {
        return Err(FluidError::Shape(format!(
            "{} candidate lists for {} hidden layers",
            candidates.len(),
            sizes.len()
        )));
    }
    let mut layers = Vec::with_capacity(sizes.len());
    for (&n, cand) in sizes.iter().zip(candidates) {
        let drops = n - kept_count(rate, n);
        let mut keep = vec![true; n];
        let mut dropped = 0;
        for &i in &cand.ranked {
            if dropped == drops {
                break;
            }
            if i >= n {
                return Err(FluidError::Shape(format!(
                    "candidate neuron {i} outside layer of {n}"
                )));
            }
            if keep[i] {
                keep[i] = false;
                dropped += 1;
            }
        }
        if dropped < drops {
            if cand.scores.len() != n {
                return Err(FluidError::Shape(format!(
                    "fallback needs {n} scores, got {}",
                    cand.scores.len()
                )));
            }
            let mut rest: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
            rest.sort_by(|&a, &b| cand.scores[a].total_cmp(&cand.scores[b]).then(a.cmp(&b)));
            for i in rest.into_iter().take(drops - dropped) {
                keep[i] = false;
            }
        }
        layers.push(keep);
    }
    Ok(NeuronMask { rate, layers })
}

/// A structurally reduced copy of a model plus the mask that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModel {
    pub model: Model,
    pub mask: NeuronMask,
}

pub fn extract(model: &Model, mask: &NeuronMask) -> Result<SubModel> {
    mask.check_against(model)?;
    let layers = model
        .layers()
        .iter()
        .enumerate()
        .map(|(j, layer)| {
            let rows = mask.rows_of(model, j);
            let cols = mask.cols_of(model, j);
            let mut data = Vec::with_capacity(rows.len() * cols.len());
            for &r in &rows {
                let src = layer.weights.row(r);
                data.extend(cols.iter().map(|&c| src[c]));
            }
            DenseLayer::new(
                Matrix::from_vec(rows.len(), cols.len(), data)?,
                rows.iter().map(|&r| layer.biases[r]).collect(),
                layer.activation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubModel {
        model: Model::new(layers)?,
        mask: mask.clone(),
    })
}

/// One client's contribution to aggregation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub submodel: SubModel,
    pub example_count: usize,
}

/// Example-count-weighted FedAvg applied per coordinate: each global
/// parameter becomes the weighted mean over the clients whose mask kept it.
/// Parameters no client kept keep their previous value.
pub fn merge(global: &Model, updates: &[ClientUpdate]) -> Result<Model> {
    if updates.is_empty() {
        return Err(FluidError::Aggregation("no client updates to merge".into()));
    }
    for u in updates {
        let mask = &u.submodel.mask;
        mask.check_against(global)?;
        let layers = u.submodel.model.layers();
        let shapes_match = layers.len() == global.layers().len()
            && layers.iter().enumerate().all(|(j, l)| {
                l.weights.rows() == mask.rows_of(global, j).len()
                    && l.weights.cols() == mask.cols_of(global, j).len()
            });
        if !shapes_match {
            return Err(FluidError::Shape(
                "client update is inconsistent with its mask".into(),
            ));
        }
    }

    let mut merged = global.clone();
    for j in 0..global.layers().len() {
        let (out, inp) = {
            let l = &global.layers()[j];
            (l.out_neurons(), l.in_features())
        };
        let index: Vec<(Vec<usize>, Vec<usize>)> = updates
            .iter()
            .map(|u| {
                (
                    u.submodel.mask.rows_of(global, j),
                    u.submodel.mask.cols_of(global, j),
                )
            })
            .collect();

        // first pass: total example weight behind every coordinate
        let mut w_total = vec![0.0; out * inp];
        let mut b_total = vec![0.0; out];
        for (u, (rows, cols)) in updates.iter().zip(&index) {
            let n = u.example_count as f64;
            for &r in rows {
                b_total[r] += n;
                for &c in cols {
                    w_total[r * inp + c] += n;
                }
            }
        }

        // second pass: normalised contributions
        let mut w_acc = vec![0.0; out * inp];
        let mut b_acc = vec![0.0; out];
        for (u, (rows, cols)) in updates.iter().zip(&index) {
            let n = u.example_count as f64;
            let layer = &u.submodel.model.layers()[j];
            for (sr, &r) in rows.iter().enumerate() {
                if b_total[r] > 0.0 {
                    b_acc[r] += n / b_total[r] * layer.biases[sr];
                }
                let src = layer.weights.row(sr);
                for (sc, &c) in cols.iter().enumerate() {
                    let t = w_total[r * inp + c];
                    if t > 0.0 {
                        w_acc[r * inp + c] += n / t * src[sc];
                    }
                }
            }
        }

        let layer = &mut merged.layers_mut()[j];
        for (k, p) in layer.weights.data_mut().iter_mut().enumerate() {
            if w_total[k] > 0.0 {
                *p = w_acc[k];
            }
        }
        for (r, p) in layer.biases.iter_mut().enumerate() {
            if b_total[r] > 0.0 {
                *p = b_acc[r];
            }
        }
    }
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_for, Stream};

    fn two_four_two() -> Model {
        Model::init(&[2, 4, 2], 3).unwrap()
    }

    fn single_param_model(value: f64) -> Model {
        // 1 -> 1 -> 1 network; the hidden neuron is maskable
        let l1 = DenseLayer::new(
            Matrix::from_vec(1, 1, vec![value]).unwrap(),
            vec![value],
            crate::nn::Activation::Relu,
        )
        .unwrap();
        let l2 = DenseLayer::new(
            Matrix::from_vec(1, 1, vec![value]).unwrap(),
            vec![value],
            crate::nn::Activation::Softmax,
        )
        .unwrap();
        Model::new(vec![l1, l2]).unwrap()
    }

    fn full_update(model: Model, n: usize) -> ClientUpdate {
        let mask = NeuronMask::full(&model);
        ClientUpdate {
            submodel: SubModel { model, mask },
            example_count: n,
        }
    }

    #[test]
    fn kept_count_rounding() {
        assert_eq!(kept_count(0.5, 4), 2);
        assert_eq!(kept_count(0.75, 4), 3);
        assert_eq!(kept_count(0.65, 10), 7);
        assert_eq!(kept_count(0.01, 10), 1);
        assert_eq!(kept_count(1.0, 7), 7);
        assert_eq!(kept_count(0.5, 5), 3);
    }

    #[test]
    fn rate_validation() {
        let m = two_four_two();
        assert!(matches!(mask_ordered(&m, 0.0), Err(FluidError::Rate(_))));
        assert!(matches!(mask_ordered(&m, 1.2), Err(FluidError::Rate(_))));
        let mut rng = rng_for(0, Stream::Mask, &[]);
        assert!(matches!(mask_random(&m, -0.5, &mut rng), Err(FluidError::Rate(_))));
    }

    #[test]
    fn full_rate_masks_keep_everything() {
        let m = Model::init(&[3, 8, 5, 2], 1).unwrap();
        let mut rng = rng_for(0, Stream::Mask, &[]);
        assert!(mask_random(&m, 1.0, &mut rng).unwrap().is_full());
        assert!(mask_ordered(&m, 1.0).unwrap().is_full());
        let cands = vec![
            LayerCandidates { ranked: vec![0, 1, 2], scores: vec![0.0; 8] },
            LayerCandidates { ranked: vec![4], scores: vec![0.0; 5] },
        ];
        assert!(mask_invariant(&m, 1.0, &cands).unwrap().is_full());
    }

    #[test]
    fn random_mask_keeps_exact_count() {
        let m = two_four_two();
        let mut rng = rng_for(5, Stream::Mask, &[]);
        let mask = mask_random(&m, 0.5, &mut rng).unwrap();
        assert_eq!(mask.kept_counts(), vec![2]);
    }

    #[test]
    fn random_mask_is_uniform() {
        let m = Model::init(&[2, 10, 2], 0).unwrap();
        let mut counts = [0usize; 10];
        let trials = 10_000;
        for seed in 0..trials {
            let mut rng = rng_for(seed, Stream::Mask, &[]);
            let mask = mask_random(&m, 0.5, &mut rng).unwrap();
            for i in mask.kept(0) {
                counts[i] += 1;
            }
        }
        for c in counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.5).abs() <= 0.02, "frequency {freq}");
        }
    }

    #[test]
    fn ordered_mask_keeps_prefix_and_nests() {
        let m = two_four_two();
        let mask = mask_ordered(&m, 0.75).unwrap();
        assert_eq!(mask.layers[0], vec![true, true, true, false]);
        let big = Model::init(&[2, 20, 12, 2], 0).unwrap();
        let half = mask_ordered(&big, 0.5).unwrap();
        let most = mask_ordered(&big, 0.75).unwrap();
        for (a, b) in half.layers.iter().zip(&most.layers) {
            assert!(a.iter().zip(b).all(|(&x, &y)| !x || y));
        }
    }

    #[test]
    fn invariant_mask_drops_ranked_candidates() {
        let m = two_four_two();
        let cands = vec![LayerCandidates {
            ranked: vec![2, 0, 3, 1],
            scores: vec![0.0; 4],
        }];
        let mask = mask_invariant(&m, 0.5, &cands).unwrap();
        assert_eq!(mask.kept(0), vec![1, 3]);
    }

    #[test]
    fn invariant_mask_falls_back_to_lowest_scores() {
        let m = two_four_two();
        // neuron 3 is the only candidate; among the others neuron 1 scores lowest
        let cands = vec![LayerCandidates {
            ranked: vec![3],
            scores: vec![0.40, 0.05, 0.30, 0.01],
        }];
        let mask = mask_invariant(&m, 0.5, &cands).unwrap();
        assert_eq!(mask.kept(0), vec![0, 2]);
    }

    #[test]
    fn extract_full_mask_is_identity() {
        let m = Model::init(&[3, 6, 4, 2], 8).unwrap();
        let sub = extract(&m, &NeuronMask::full(&m)).unwrap();
        assert_eq!(sub.model, m);
    }

    #[test]
    fn extract_removes_row_and_downstream_column() {
        let m = two_four_two();
        let mask = NeuronMask {
            rate: 0.75,
            layers: vec![vec![true, false, true, true]],
        };
        let sub = extract(&m, &mask).unwrap();
        let l0 = &sub.model.layers()[0];
        let l1 = &sub.model.layers()[1];
        assert_eq!((l0.weights.rows(), l0.weights.cols()), (3, 2));
        assert_eq!((l1.weights.rows(), l1.weights.cols()), (2, 3));
        // d_in weights + 1 bias + 2 downstream weights
        let d_in = 2;
        assert_eq!(sub.model.parameter_count(), m.parameter_count() - (d_in + 1 + 2));
        assert_eq!(l0.weights.row(1), m.layers()[0].weights.row(2));
        assert_eq!(l1.weights.get(0, 1), m.layers()[1].weights.get(0, 2));
    }

    #[test]
    fn extract_rejects_mismatched_mask() {
        let m = two_four_two();
        let mask = NeuronMask { rate: 1.0, layers: vec![vec![true; 5]] };
        assert!(matches!(extract(&m, &mask), Err(FluidError::Shape(_))));
    }

    #[test]
    fn merge_plain_mean() {
        let g = single_param_model(0.0);
        let merged = merge(
            &g,
            &[full_update(single_param_model(1.0), 10), full_update(single_param_model(3.0), 10)],
        )
        .unwrap();
        assert_eq!(merged.layers()[0].weights.get(0, 0), 2.0);
    }

    #[test]
    fn merge_excludes_dropped_coordinates() {
        let g = Model::init(&[2, 2, 2], 0).unwrap();
        let mut full = g.clone();
        full.layers_mut()[0].weights.set(0, 0, 2.0);
        let mask = NeuronMask { rate: 0.5, layers: vec![vec![false, true]] };
        let mut straggler = extract(&g, &mask).unwrap();
        straggler.model.layers_mut()[0].weights.set(0, 0, 99.0);
        let merged = merge(
            &g,
            &[
                full_update(full, 100),
                ClientUpdate { submodel: straggler, example_count: 50 },
            ],
        )
        .unwrap();
        assert_eq!(merged.layers()[0].weights.get(0, 0), 2.0);
    }

    #[test]
    fn merge_weighted_mean() {
        let g = single_param_model(0.0);
        let merged = merge(
            &g,
            &[
                full_update(single_param_model(1.0), 10),
                full_update(single_param_model(2.0), 20),
                full_update(single_param_model(3.0), 30),
            ],
        )
        .unwrap();
        let expected = (10.0 + 40.0 + 90.0) / 60.0;
        assert!((merged.layers()[0].weights.get(0, 0) - expected).abs() < 1e-12);
    }

    #[test]
    fn merge_keeps_untouched_coordinates() {
        let g = two_four_two();
        let mask = NeuronMask { rate: 0.5, layers: vec![vec![true, true, false, false]] };
        let mut sub = extract(&g, &mask).unwrap();
        for l in sub.model.layers_mut() {
            l.weights.data_mut().iter_mut().for_each(|w| *w += 1.0);
        }
        let merged = merge(&g, &[ClientUpdate { submodel: sub, example_count: 3 }]).unwrap();
        assert_eq!(merged.layers()[0].weights.row(2), g.layers()[0].weights.row(2));
        assert_eq!(merged.layers()[1].weights.get(0, 3), g.layers()[1].weights.get(0, 3));
        assert_ne!(merged.layers()[0].weights.row(0), g.layers()[0].weights.row(0));
    }

    #[test]
    fn merge_rejects_empty_and_inconsistent() {
        let g = two_four_two();
        assert!(matches!(merge(&g, &[]), Err(FluidError::Aggregation(_))));
        let mask = NeuronMask { rate: 0.5, layers: vec![vec![true, true, false, false]] };
        let bad = SubModel { model: g.clone(), mask };
        assert!(matches!(
            merge(&g, &[ClientUpdate { submodel: bad, example_count: 1 }]),
            Err(FluidError::Shape(_))
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use proptest::strategy::Strategy;

        fn arb_mask(sizes: Vec<usize>) -> impl Strategy<Value = NeuronMask> {
            sizes
                .into_iter()
                .map(|n| proptest::collection::vec(any::<bool>(), n))
                .collect::<Vec<_>>()
                .prop_map(|layers| NeuronMask { rate: 0.5, layers })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn extract_then_merge_is_lossless(seed in 0u64..500, mask in arb_mask(vec![6, 4])) {
                let g = Model::init(&[3, 6, 4, 2], seed).unwrap();
                let sub = extract(&g, &mask).unwrap();
                let merged = merge(&g, &[ClientUpdate { submodel: sub, example_count: 7 }]).unwrap();
                prop_assert_eq!(merged, g);
            }

            #[test]
            fn merged_values_lie_between_contributors(
                seed in 0u64..500,
                masks in proptest::collection::vec(arb_mask(vec![5]), 1..5),
                counts in proptest::collection::vec(1usize..100, 5),
            ) {
                let g = Model::init(&[2, 5, 3], seed).unwrap();
                let updates: Vec<ClientUpdate> = masks.iter().enumerate().map(|(c, mask)| {
                    let mut sub = extract(&g, mask).unwrap();
                    for l in sub.model.layers_mut() {
                        l.weights.data_mut().iter_mut().for_each(|w| *w += c as f64 * 0.3 - 0.5);
                        l.biases.iter_mut().for_each(|b| *b -= c as f64 * 0.1);
                    }
                    ClientUpdate { submodel: sub, example_count: counts[c] }
                }).collect();
                let merged = merge(&g, &updates).unwrap();
                // every hidden-layer weight (r, c) of layer 0
                for r in 0..5 {
                    let contributors: Vec<f64> = updates.iter().enumerate()
                        .filter(|(_, u)| u.submodel.mask.layers[0][r])
                        .map(|(c, _)| g.layers()[0].weights.get(r, 0) + c as f64 * 0.3 - 0.5)
                        .collect();
                    let v = merged.layers()[0].weights.get(r, 0);
                    if contributors.is_empty() {
                        prop_assert_eq!(v, g.layers()[0].weights.get(r, 0));
                    } else {
                        let lo = contributors.iter().copied().fold(f64::INFINITY, f64::min);
                        let hi = contributors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                    }
                }
            }

            #[test]
            fn invariant_mask_respects_ranking(
                n in 2usize..16,
                rate in 0.05f64..1.0,
                seed in 0u64..1000,
            ) {
                let m = Model::init(&[2, n, 2], seed).unwrap();
                let mut rng = rng_for(seed, Stream::Mask, &[1]);
                let perm: Vec<usize> = index::sample(&mut rng, n, n).into_vec();
                let ncand = (seed as usize) % (n + 1);
                let ranked = perm[..ncand].to_vec();
                let scores: Vec<f64> = (0..n).map(|i| ((i * 7 + seed as usize) % 11) as f64).collect();
                let mask = mask_invariant(&m, rate, &[LayerCandidates { ranked: ranked.clone(), scores: scores.clone() }]).unwrap();
                let drops = n - kept_count(rate, n);
                let dropped: Vec<usize> = (0..n).filter(|&i| !mask.layers[0][i]).collect();
                prop_assert_eq!(dropped.len(), drops);
                // a kept candidate implies every dropped neuron is a candidate ranked earlier
                for (pos, &c) in ranked.iter().enumerate() {
                    if mask.layers[0][c] {
                        for &d in &dropped {
                            let dpos = ranked.iter().position(|&x| x == d);
                            prop_assert!(matches!(dpos, Some(p) if p < pos));
                        }
                    }
                }
            }
        }
    }
}
