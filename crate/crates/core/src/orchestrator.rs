//! Synchronous federated training with straggler profiling and calibrated
//! invariant dropout.
//!
//! Each round every client trains locally (stragglers on a sub-model), the
//! server merges the updates, all clients evaluate the new global model, and
//! the non-straggler updates feed invariance scoring. Straggler identity and
//! sub-model rates are recalibrated from measured epoch times.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::dropout::{
    check_rate, extract, kept_count, mask_invariant, mask_ordered, mask_random, merge,
    ClientUpdate, LayerCandidates, NeuronMask, Strategy,
};
use crate::error::{FluidError, Result};
use crate::invariance::{
    init_threshold, invariant_fraction, median_scores, score_model, CalibrationState,
    NeuronScores,
};
use crate::nn::Model;
use crate::rng::{rng_for, Stream};
use crate::simclient::{local_eval, local_train, ClientSpec, EvalReport, LocalData, TrainParams};

pub const DEFAULT_RATES: [f64; 6] = [0.5, 0.65, 0.75, 0.85, 0.95, 1.0];
pub const DEFAULT_WARMUP: usize = 3;
/// Server overhead per round as a fraction of the fleet's mean base epoch time.
pub const DEFAULT_SERVER_OVERHEAD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StragglerPolicy {
    SlowestOne,
    /// The slowest `ceil(p * C)` clients, capped so one non-straggler remains.
    SlowestPct(f64),
    /// Stragglers chosen as in `SlowestPct(pct)`, split by time rank into `k`
    /// equal groups that each get one rate.
    Cluster { k: usize, pct: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StragglerSelection {
    /// Client indices, slowest first.
    pub stragglers: Vec<usize>,
    /// Group of each straggler (parallel to `stragglers`).
    pub groups: Vec<usize>,
    /// Time of the slowest non-straggler; `None` when there are no stragglers.
    pub target_time: Option<f64>,
}

pub fn identify_stragglers(times: &[f64], policy: StragglerPolicy) -> Result<StragglerSelection> {
    if times.len() < 2 {
        return Err(FluidError::Config(format!(
            "straggler identification needs at least 2 clients, got {}",
            times.len()
        )));
    }
    if let Some(bad) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(FluidError::Measurement(format!("epoch time {bad} is not positive")));
    }
    let c = times.len();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]).then(a.cmp(&b)));

    let pct_count = |p: f64| -> Result<usize> {
        if !(0.0..=1.0).contains(&p) {
            return Err(FluidError::Config(format!("straggler fraction {p} outside [0, 1]")));
        }
        Ok(((p * c as f64 - 1e-9).ceil().max(0.0) as usize).min(c - 1))
    };
    let (count, k) = match policy {
        StragglerPolicy::SlowestOne => (1, 1),
        StragglerPolicy::SlowestPct(p) => (pct_count(p)?, 1),
        StragglerPolicy::Cluster { k, pct } => {
            if k == 0 {
                return Err(FluidError::Config("cluster count must be >= 1".into()));
            }
            (pct_count(pct)?, k)
        }
    };
    let stragglers = order[..count].to_vec();
    let groups = (0..count).map(|rank| rank * k / count.max(1)).collect();
    let target_time = (count > 0).then(|| times[order[count]]);
    Ok(StragglerSelection {
        stragglers,
        groups,
        target_time,
    })
}

/// `T_straggler / T_target`.
pub fn compute_speedup(straggler_time: f64, target_time: f64) -> Result<f64> {
    for t in [straggler_time, target_time] {
        if !(t > 0.0 && t.is_finite()) {
            return Err(FluidError::Measurement(format!("epoch time {t} is not positive")));
        }
    }
    Ok(straggler_time / target_time)
}

/// Distances closer than this count as ties in [`select_rate`].
const RATE_TIE_TOLERANCE: f64 = 1e-12;

/// The available rate closest to `1 / speedup`; ties go to the larger rate.
pub fn select_rate(speedup: f64, available: &[f64]) -> Result<f64> {
    if available.is_empty() {
        return Err(FluidError::Config("no sub-model rates available".into()));
    }
    for &r in available {
        check_rate(r)?;
    }
    let target = 1.0 / speedup;
    let mut best = available[0];
    for &r in &available[1..] {
        let (d, db) = ((r - target).abs(), (best - target).abs());
        if d < db - RATE_TIE_TOLERANCE || ((d - db).abs() <= RATE_TIE_TOLERANCE && r > best) {
            best = r;
        }
    }
    Ok(best)
}

/// Example-count-weighted accuracy and loss.
pub fn weighted_eval(reports: &[EvalReport]) -> Result<(f64, f64)> {
    let total: usize = reports.iter().map(|r| r.eval_count).sum();
    if total == 0 {
        return Err(FluidError::Metric("no evaluation examples reported".into()));
    }
    let n = total as f64;
    let acc = reports
        .iter()
        .map(|r| r.accuracy * r.eval_count as f64)
        .sum::<f64>()
        / n;
    let loss = reports
        .iter()
        .map(|r| r.loss * r.eval_count as f64)
        .sum::<f64>()
        / n;
    Ok((acc, loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub id: usize,
    /// Last measured epoch time scaled back to the full model.
    pub last_time: f64,
    pub straggler: bool,
    pub rate: f64,
    pub cluster: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluidConfig {
    pub strategy: Strategy,
    pub rates: Vec<f64>,
    /// Straggler rate used instead of speedup-based selection.
    pub forced_rate: Option<f64>,
    pub policy: StragglerPolicy,
    pub rounds: usize,
    pub train: TrainParams,
    pub warmup: usize,
    pub persistence: usize,
    pub growth_factor: f64,
    pub delta: f64,
    /// Calibrate every `cadence` rounds after warm-up.
    pub cadence: usize,
    /// Re-identify stragglers at every calibration; when false the set
    /// found at the end of warm-up is kept for the whole run.
    pub recalibrate_stragglers: bool,
    pub server_overhead: f64,
    /// Pins every layer's drop threshold and disables threshold growth.
    pub fixed_threshold: Option<f64>,
}

impl Default for FluidConfig {
    fn default() -> Self {
        FluidConfig {
            strategy: Strategy::Invariant,
            rates: DEFAULT_RATES.to_vec(),
            forced_rate: None,
            policy: StragglerPolicy::SlowestOne,
            rounds: 60,
            train: TrainParams {
                epochs: 1,
                lr: 0.05,
                batch: 10,
            },
            warmup: DEFAULT_WARMUP,
            persistence: crate::invariance::DEFAULT_PERSISTENCE,
            growth_factor: crate::invariance::DEFAULT_GROWTH_FACTOR,
            delta: crate::invariance::DEFAULT_DELTA,
            cadence: 1,
            recalibrate_stragglers: true,
            server_overhead: DEFAULT_SERVER_OVERHEAD,
            fixed_threshold: None,
        }
    }
}

impl FluidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup == 0 {
            return Err(FluidError::Config("warmup must be >= 1 round".into()));
        }
        if self.rounds < self.warmup + 1 {
            return Err(FluidError::Config(format!(
                "rounds ({}) must exceed warmup ({})",
                self.rounds, self.warmup
            )));
        }
        if self.rates.is_empty() {
            return Err(FluidError::Config("rate set is empty".into()));
        }
        for &r in self.rates.iter().chain(&self.forced_rate) {
            check_rate(r)?;
        }
        if self.cadence == 0 {
            return Err(FluidError::Config("calibration cadence must be >= 1".into()));
        }
        if !(self.growth_factor > 1.0) {
            return Err(FluidError::Config("growth factor must be > 1".into()));
        }
        if !(self.delta > 0.0) {
            return Err(FluidError::Config("delta must be > 0".into()));
        }
        if !(self.train.lr >= 0.0) || self.train.batch == 0 || self.train.epochs == 0 {
            return Err(FluidError::Config(
                "training needs lr >= 0, batch >= 1 and epochs >= 1".into(),
            ));
        }
        if !(self.server_overhead >= 0.0) {
            return Err(FluidError::Config("server overhead must be >= 0".into()));
        }
        if matches!(self.fixed_threshold, Some(t) if !(t >= 0.0)) {
            return Err(FluidError::Config("fixed threshold must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub client_times: Vec<f64>,
    pub stragglers: Vec<usize>,
    /// Rate each client trained at this round.
    pub rates: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub accuracy: f64,
    pub loss: f64,
    pub invariant_fraction: f64,
    /// Slowest client plus server time.
    pub round_time: f64,
    pub calibration_time: f64,
    /// Target time in force for this round's stragglers.
    pub target_time: Option<f64>,
    /// Per-neuron median score over this round's non-stragglers.
    pub scores: NeuronScores,
}

impl RoundRecord {
    /// Smallest rate any client trained at this round.
    pub fn min_rate(&self) -> f64 {
        self.rates.iter().copied().fold(1.0, f64::min)
    }
}

/// Server-side calibration time as a fraction of the round's wall time.
pub fn calibration_overhead(record: &RoundRecord) -> f64 {
    if record.round_time > 0.0 {
        record.calibration_time / record.round_time
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub final_model: Model,
}

/// One federated run from initial model to final round.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: FluidConfig,
    seed: u64,
    fleet: Vec<ClientSpec>,
    data: Vec<LocalData>,
    global: Model,
    profiles: Vec<ClientProfile>,
    calibration: CalibrationState,
    candidates: Vec<LayerCandidates>,
    warmup_scores: Vec<NeuronScores>,
    target_time: Option<f64>,
    round: usize,
}

impl Simulation {
    pub fn new(
        config: FluidConfig,
        dataset: &Dataset,
        partition: &Partition,
        fleet: Vec<ClientSpec>,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        if fleet.is_empty() {
            return Err(FluidError::Config("client fleet is empty".into()));
        }
        if fleet.len() != partition.clients.len() {
            return Err(FluidError::Config(format!(
                "{} client specs but {} data partitions",
                fleet.len(),
                partition.clients.len()
            )));
        }
        for spec in &fleet {
            spec.validate()?;
        }
        let mut layout = vec![dataset.dims()];
        layout.extend_from_slice(hidden);
        layout.push(dataset.class_count);
        let global = Model::init(&layout, seed)?;

        let data = partition
            .clients
            .iter()
            .map(|split| {
                let (train_x, train_y) = dataset.subset(&split.train);
                let (test_x, test_y) = dataset.subset(&split.test);
                LocalData {
                    train_x,
                    train_y,
                    test_x,
                    test_y,
                }
            })
            .collect();
        let profiles = fleet
            .iter()
            .map(|s| ClientProfile {
                id: s.id,
                last_time: s.base_epoch_time,
                straggler: false,
                rate: 1.0,
                cluster: None,
            })
            .collect();
        let sizes = global.hidden_sizes();
        let mut calibration = CalibrationState::new(&sizes);
        if let Some(th) = config.fixed_threshold {
            calibration.thresholds = vec![th; sizes.len()];
        }
        let candidates = sizes
            .iter()
            .map(|&n| LayerCandidates {
                ranked: Vec::new(),
                scores: vec![0.0; n],
            })
            .collect();
        Ok(Simulation {
            config,
            seed,
            fleet,
            data,
            global,
            profiles,
            calibration,
            candidates,
            warmup_scores: Vec::new(),
            target_time: None,
            round: 0,
        })
    }

    pub fn global(&self) -> &Model {
        &self.global
    }

    pub fn profiles(&self) -> &[ClientProfile] {
        &self.profiles
    }

    pub fn calibration(&self) -> &CalibrationState {
        &self.calibration
    }

    pub fn config(&self) -> &FluidConfig {
        &self.config
    }

    pub fn is_finished(&self) -> bool {
        self.round >= self.config.rounds
    }

    fn mask_for(&self, client: usize, rate: f64) -> Result<NeuronMask> {
        if rate >= 1.0 {
            return Ok(NeuronMask::full(&self.global));
        }
        match self.config.strategy {
            Strategy::None => Ok(NeuronMask::full(&self.global)),
            Strategy::Random => {
                let mut rng = rng_for(self.seed, Stream::Mask, &[self.round as u64, client as u64]);
                mask_random(&self.global, rate, &mut rng)
            }
            Strategy::Ordered => mask_ordered(&self.global, rate),
            Strategy::Invariant => mask_invariant(&self.global, rate, &self.candidates),
        }
    }

    /// Drops each hidden layer must support for the most aggressive straggler.
    fn required_drops(&self) -> Vec<usize> {
        self.global
            .hidden_sizes()
            .iter()
            .map(|&n| {
                self.profiles
                    .iter()
                    .filter(|p| p.straggler)
                    .map(|p| n - kept_count(p.rate, n))
                    .max()
                    .unwrap_or(0)
            })
            .collect()
    }

    fn reassign_stragglers(&mut self, normalized: &[f64]) -> Result<()> {
        for (p, &t) in self.profiles.iter_mut().zip(normalized) {
            p.last_time = t;
            p.straggler = false;
            p.rate = 1.0;
            p.cluster = None;
        }
        if normalized.len() < 2 {
            self.target_time = None;
            return Ok(());
        }
        let sel = identify_stragglers(normalized, self.config.policy)?;
        self.target_time = sel.target_time;
        let Some(target) = sel.target_time else {
            return Ok(());
        };
        // slowest member of each group sets the group's rate
        let groups = sel.groups.iter().copied().max().map_or(0, |g| g + 1);
        let mut group_rate = vec![1.0; groups];
        for (g, rate) in group_rate.iter_mut().enumerate() {
            let slowest = sel
                .stragglers
                .iter()
                .zip(&sel.groups)
                .filter(|(_, &gg)| gg == g)
                .map(|(&c, _)| normalized[c])
                .fold(0.0, f64::max);
            *rate = match (self.config.strategy, self.config.forced_rate) {
                (Strategy::None, _) => 1.0,
                (_, Some(r)) => r,
                _ => select_rate(compute_speedup(slowest, target)?, &self.config.rates)?,
            };
        }
        let clustered = matches!(self.config.policy, StragglerPolicy::Cluster { .. });
        for (&c, &g) in sel.stragglers.iter().zip(&sel.groups) {
            let p = &mut self.profiles[c];
            p.straggler = true;
            p.rate = group_rate[g];
            p.cluster = clustered.then_some(g);
        }
        Ok(())
    }

    pub fn run_round(&mut self) -> Result<RoundRecord> {
        if self.is_finished() {
            return Err(FluidError::Config("all rounds already run".into()));
        }
        let t = self.round;
        let cfg = &self.config;
        let progress = t as f64 / cfg.rounds as f64;
        let clients = self.fleet.len();

        let rates: Vec<f64> = self.profiles.iter().map(|p| p.rate).collect();
        let stragglers: Vec<usize> = (0..clients).filter(|&c| self.profiles[c].straggler).collect();
        let target_time = self.target_time.filter(|_| !stragglers.is_empty());
        let masks = (0..clients)
            .map(|c| self.mask_for(c, rates[c]))
            .collect::<Result<Vec<_>>>()?;

        let reports = (0..clients)
            .into_par_iter()
            .map(|c| {
                let sub = extract(&self.global, &masks[c])?;
                let mut train_rng = rng_for(self.seed, Stream::Train, &[t as u64, c as u64]);
                let mut time_rng = rng_for(self.seed, Stream::Timing, &[t as u64, c as u64]);
                local_train(
                    &self.fleet[c],
                    sub,
                    &self.data[c],
                    cfg.train,
                    progress,
                    &mut train_rng,
                    &mut time_rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let updates: Vec<ClientUpdate> = reports
            .iter()
            .map(|r| ClientUpdate {
                submodel: r.update.clone(),
                example_count: r.train_count,
            })
            .collect();
        let merged = merge(&self.global, &updates)?;
        if !merged.is_finite() {
            return Err(FluidError::Measurement(format!(
                "global model diverged to non-finite values in round {t}"
            )));
        }

        let evals = (0..clients)
            .into_par_iter()
            .map(|c| local_eval(self.fleet[c].id, &merged, &self.data[c]))
            .collect::<Result<Vec<_>>>()?;
        let (accuracy, loss) = weighted_eval(&evals)?;

        // invariance scores come from non-stragglers only
        let scores = (0..clients)
            .filter(|&c| !self.profiles[c].straggler)
            .map(|c| score_model(&self.global, &reports[c].update.model, cfg.delta))
            .collect::<Result<Vec<_>>>()?;
        let medians = median_scores(&scores)?;

        let calibrating = t >= cfg.warmup && (t - cfg.warmup).is_multiple_of(cfg.cadence);
        if t < cfg.warmup {
            self.warmup_scores.push(medians.clone());
            if t + 1 == cfg.warmup && cfg.fixed_threshold.is_none() {
                self.calibration.thresholds = init_threshold(&self.warmup_scores)?;
            }
            for (cand, med) in self.candidates.iter_mut().zip(&medians.layers) {
                cand.scores = med.clone();
            }
        }
        if calibrating {
            self.candidates = self.calibration.vote_candidates(&scores, cfg.persistence)?;
            if cfg.fixed_threshold.is_none() {
                let counts: Vec<usize> = self.candidates.iter().map(|c| c.ranked.len()).collect();
                let required = self.required_drops();
                let factor = cfg.growth_factor;
                self.calibration.grow_threshold(&required, &counts, factor);
            }
        }
        let fraction = invariant_fraction(&medians, &self.calibration.thresholds);

        let client_times: Vec<f64> = reports.iter().map(|r| r.epoch_time).collect();
        let mean_base =
            self.fleet.iter().map(|s| s.base_epoch_time).sum::<f64>() / clients as f64;
        let calibration_time = cfg.server_overhead * mean_base;
        let round_time = client_times.iter().copied().fold(0.0, f64::max) + calibration_time;

        let reidentify = t + 1 == cfg.warmup || (calibrating && cfg.recalibrate_stragglers);
        if reidentify {
            let normalized: Vec<f64> = client_times
                .iter()
                .zip(&rates)
                .map(|(time, r)| time / r)
                .collect();
            self.reassign_stragglers(&normalized)?;
        }

        self.global = merged;
        self.round += 1;
        Ok(RoundRecord {
            round: t,
            client_times,
            stragglers,
            rates,
            thresholds: self.calibration.thresholds.clone(),
            accuracy,
            loss,
            invariant_fraction: fraction,
            round_time,
            calibration_time,
            target_time,
            scores: medians,
        })
    }

    pub fn run(mut self) -> Result<RunResult> {
        let mut records = Vec::with_capacity(self.config.rounds);
        while !self.is_finished() {
            records.push(self.run_round()?);
        }
        Ok(RunResult {
            records,
            final_model: self.global,
        })
    }
}
