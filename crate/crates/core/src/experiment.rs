//! Experiment grids on top of [`Simulation`]: config parsing, per-run metrics
//! CSV files, the JSON summary, and the threshold and straggler-ratio sweeps.
//!
//! Configs are flat `section.key = value` files; see [`ExperimentConfig::parse`]
//! for the recognised keys.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_csv, partition, synth_gaussian_blobs, Dataset, PartitionMode};
use crate::dropout::Strategy;
use crate::error::{FluidError, Result};
use crate::invariance::invariant_fraction;
use crate::orchestrator::{calibration_overhead, FluidConfig, RoundRecord, Simulation, StragglerPolicy};
use crate::simclient::{ClientSpec, LoadWindow};

/// Environment variable that overrides `output.dir`.
pub const OUT_DIR_ENV: &str = "FLUID_OUT_DIR";
pub const SUMMARY_FILE: &str = "summary.json";
/// Full-model epoch times of the default five-client fleet.
pub const DEFAULT_BASE_TIMES: [f64; 5] = [1.0, 1.2, 1.35, 1.5, 1.95];
/// Dirichlet concentration of the default label-skewed partition.
pub const DEFAULT_SKEW_ALPHA: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DatasetSpec {
    Blobs { classes: usize, dims: usize, per_class: usize },
    Csv(PathBuf),
}

impl DatasetSpec {
    pub fn build(&self, seed: u64) -> Result<Dataset> {
        match self {
            DatasetSpec::Blobs { classes, dims, per_class } => {
                synth_gaussian_blobs(*classes, *dims, *per_class, seed)
            }
            DatasetSpec::Csv(path) => load_csv(path),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub partition: PartitionMode,
    pub hidden: Vec<usize>,
    pub fleet: Vec<ClientSpec>,
    pub strategies: Vec<Strategy>,
    /// Straggler rates to sweep; empty means rates are picked from measured
    /// speedups.
    pub forced_rates: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Per-run settings shared by every grid cell. Its `strategy` and
    /// `forced_rate` are overwritten per cell.
    pub base: FluidConfig,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    /// Ten-class Gaussian blobs split with label skew, a 64-32 MLP and the
    /// five-client fleet.
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Blobs { classes: 10, dims: 16, per_class: 100 },
            partition: PartitionMode::LabelSkew(DEFAULT_SKEW_ALPHA),
            hidden: vec![64, 32],
            fleet: default_fleet(),
            strategies: vec![Strategy::Invariant],
            forced_rates: Vec::new(),
            seeds: vec![0],
            base: FluidConfig::default(),
            output_dir: None,
        }
    }
}

pub fn default_fleet() -> Vec<ClientSpec> {
    DEFAULT_BASE_TIMES
        .iter()
        .enumerate()
        .map(|(id, &t)| ClientSpec::new(id, t))
        .collect()
}

/// One cell of the experiment grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub strategy: Strategy,
    pub forced_rate: Option<f64>,
    pub seed: u64,
}

impl RunSpec {
    pub fn rate_label(&self) -> String {
        rate_label(self.forced_rate)
    }

    pub fn file_name(&self) -> String {
        format!("metrics_{}_r{}_seed{}.csv", self.strategy, self.rate_label(), self.seed)
    }
}

fn rate_label(rate: Option<f64>) -> String {
    rate.map_or_else(|| "auto".to_string(), |r| format!("{r}"))
}

fn parse_err(line: usize, message: impl Into<String>) -> FluidError {
    FluidError::Parse { line, message: message.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(line, key, s))
        .collect()
}

fn parse_bool(line: usize, key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(parse_err(line, format!("{key}: expected true or false, got {v:?}"))),
    }
}

/// `slowest-one`, `slowest-pct:P` or `cluster:K:P`.
pub fn parse_policy(v: &str) -> std::result::Result<StragglerPolicy, String> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    let num = |s: &str| s.parse::<f64>().map_err(|_| format!("bad number {s:?} in policy {v:?}"));
    match parts.as_slice() {
        ["slowest-one"] => Ok(StragglerPolicy::SlowestOne),
        ["slowest-pct", p] => Ok(StragglerPolicy::SlowestPct(num(p)?)),
        ["cluster", k, p] => Ok(StragglerPolicy::Cluster {
            k: k.parse().map_err(|_| format!("bad group count {k:?} in policy {v:?}"))?,
            pct: num(p)?,
        }),
        _ => Err(format!("unknown straggler policy {v:?}")),
    }
}

fn parse_windows(line: usize, key: &str, v: &str) -> Result<Vec<LoadWindow>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|w| {
            let f: Vec<f64> = w
                .split(':')
                .map(|x| parse_num(line, key, x))
                .collect::<Result<_>>()?;
            match f.as_slice() {
                &[start, end, slowdown] => Ok(LoadWindow { start, end, slowdown }),
                _ => Err(parse_err(line, format!("{key}: expected start:end:slowdown, got {w:?}"))),
            }
        })
        .collect()
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| FluidError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a config file. Every key is optional; missing keys keep the
    /// values of [`ExperimentConfig::default`].
    ///
    /// ```text
    /// dataset.kind = blobs            # or csv
    /// dataset.classes = 10
    /// dataset.dims = 16
    /// dataset.per_class = 100
    /// dataset.path = data.csv         # csv only
    /// dataset.partition = skew        # or iid
    /// dataset.alpha = 0.5             # skew concentration
    /// model.hidden = 64, 32
    /// fleet.base_times = 1.0, 1.2, 1.35, 1.5, 1.95
    /// fleet.noise_pct = 0.05
    /// fleet.load.0 = 0.25:0.5:3.0     # client 0: start:end:slowdown, ...
    /// fl.strategies = random, ordered, invariant
    /// fl.rates = 0.5, 0.65, 0.75, 0.85, 0.95, 1.0
    /// fl.forced_rates = 0.5
    /// fl.policy = slowest-one         # slowest-pct:P | cluster:K:P
    /// fl.rounds = 60
    /// fl.local_epochs = 1
    /// fl.lr = 0.05
    /// fl.batch = 10
    /// fl.seeds = 0, 1, 2
    /// calibration.warmup = 3
    /// calibration.persistence = 2
    /// calibration.growth_factor = 1.25
    /// calibration.delta = 1e-8
    /// calibration.cadence = 1
    /// calibration.recalibrate_stragglers = true
    /// calibration.server_overhead = 0.01
    /// calibration.fixed_threshold = 0.02
    /// output.dir = results
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen: BTreeMap<String, usize> = BTreeMap::new();
        let mut kind = "blobs".to_string();
        let (mut classes, mut dims, mut per_class) = (10, 16, 100);
        let mut csv_path: Option<PathBuf> = None;
        let mut partition_kind = "skew".to_string();
        let mut alpha = DEFAULT_SKEW_ALPHA;
        let mut base_times: Option<Vec<f64>> = None;
        let mut noise: Option<f64> = None;
        let mut loads: BTreeMap<usize, (usize, Vec<LoadWindow>)> = BTreeMap::new();

        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| parse_err(line, format!("expected `key = value`, got {content:?}")))?;
            let key = key.trim();
            let v = value.trim();
            if let Some(prev) = seen.insert(key.to_string(), line) {
                return Err(parse_err(line, format!("{key} already set on line {prev}")));
            }
            match key {
                "dataset.kind" => kind = v.to_string(),
                "dataset.classes" => classes = parse_num(line, key, v)?,
                "dataset.dims" => dims = parse_num(line, key, v)?,
                "dataset.per_class" => per_class = parse_num(line, key, v)?,
                "dataset.path" => csv_path = Some(PathBuf::from(v)),
                "dataset.partition" => partition_kind = v.to_string(),
                "dataset.alpha" => alpha = parse_num(line, key, v)?,
                "model.hidden" => cfg.hidden = parse_list(line, key, v)?,
                "fleet.base_times" => base_times = Some(parse_list(line, key, v)?),
                "fleet.noise_pct" => noise = Some(parse_num(line, key, v)?),
                "fl.strategies" => {
                    cfg.strategies = v
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| s.parse::<Strategy>().map_err(|e| parse_err(line, e.to_string())))
                        .collect::<Result<_>>()?;
                }
                "fl.rates" => cfg.base.rates = parse_list(line, key, v)?,
                "fl.forced_rates" => cfg.forced_rates = parse_list(line, key, v)?,
                "fl.policy" => cfg.base.policy = parse_policy(v).map_err(|e| parse_err(line, e))?,
                "fl.rounds" => cfg.base.rounds = parse_num(line, key, v)?,
                "fl.local_epochs" => cfg.base.train.epochs = parse_num(line, key, v)?,
                "fl.lr" => cfg.base.train.lr = parse_num(line, key, v)?,
                "fl.batch" => cfg.base.train.batch = parse_num(line, key, v)?,
                "fl.seeds" => cfg.seeds = parse_list(line, key, v)?,
                "calibration.warmup" => cfg.base.warmup = parse_num(line, key, v)?,
                "calibration.persistence" => cfg.base.persistence = parse_num(line, key, v)?,
                "calibration.growth_factor" => cfg.base.growth_factor = parse_num(line, key, v)?,
                "calibration.delta" => cfg.base.delta = parse_num(line, key, v)?,
                "calibration.cadence" => cfg.base.cadence = parse_num(line, key, v)?,
                "calibration.recalibrate_stragglers" => {
                    cfg.base.recalibrate_stragglers = parse_bool(line, key, v)?
                }
                "calibration.server_overhead" => cfg.base.server_overhead = parse_num(line, key, v)?,
                "calibration.fixed_threshold" => {
                    cfg.base.fixed_threshold = Some(parse_num(line, key, v)?)
                }
                "output.dir" => cfg.output_dir = Some(PathBuf::from(v)),
                _ => {
                    let Some(id) = key.strip_prefix("fleet.load.") else {
                        return Err(parse_err(line, format!("unknown key {key:?}")));
                    };
                    let id: usize = parse_num(line, key, id)?;
                    loads.insert(id, (line, parse_windows(line, key, v)?));
                }
            }
        }

        cfg.dataset = match kind.as_str() {
            "blobs" => DatasetSpec::Blobs { classes, dims, per_class },
            "csv" => DatasetSpec::Csv(csv_path.ok_or_else(|| {
                FluidError::Config("dataset.kind = csv needs dataset.path".into())
            })?),
            other => return Err(FluidError::Config(format!("unknown dataset kind {other:?}"))),
        };
        cfg.partition = match partition_kind.as_str() {
            "iid" => PartitionMode::Iid,
            "skew" => PartitionMode::LabelSkew(alpha),
            other => return Err(FluidError::Config(format!("unknown partition {other:?}"))),
        };
        if let Some(times) = base_times {
            cfg.fleet = times.iter().enumerate().map(|(id, &t)| ClientSpec::new(id, t)).collect();
        }
        if let Some(n) = noise {
            for c in &mut cfg.fleet {
                c.noise_pct = n;
            }
        }
        for (id, (line, windows)) in loads {
            let client = cfg.fleet.get_mut(id).ok_or_else(|| {
                parse_err(line, format!("fleet.load.{id}: no such client"))
            })?;
            client.load_schedule = windows;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.seeds.is_empty() {
            return Err(FluidError::Config("seed list is empty".into()));
        }
        if self.strategies.is_empty() {
            return Err(FluidError::Config("strategy list is empty".into()));
        }
        if self.fleet.is_empty() {
            return Err(FluidError::Config("fleet is empty".into()));
        }
        for c in &self.fleet {
            c.validate()?;
        }
        for &r in &self.forced_rates {
            crate::dropout::check_rate(r)?;
        }
        if self.hidden.contains(&0) {
            return Err(FluidError::Config("hidden layers need at least one neuron".into()));
        }
        match self.base.policy {
            StragglerPolicy::SlowestPct(p) | StragglerPolicy::Cluster { pct: p, .. }
                if !(0.0..1.0).contains(&p) =>
            {
                Err(FluidError::Config(format!("straggler fraction {p} must lie in [0, 1)")))
            }
            StragglerPolicy::Cluster { k: 0, .. } => {
                Err(FluidError::Config("cluster policy needs k >= 1".into()))
            }
            _ => Ok(()),
        }
    }

    /// Every (strategy, forced rate, seed) cell, in that nesting order.
    pub fn runs(&self) -> Vec<RunSpec> {
        let rates: Vec<Option<f64>> = if self.forced_rates.is_empty() {
            vec![None]
        } else {
            self.forced_rates.iter().copied().map(Some).collect()
        };
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &forced_rate in &rates {
                for &seed in &self.seeds {
                    out.push(RunSpec { strategy, forced_rate, seed });
                }
            }
        }
        out
    }

    pub fn fluid_config(&self, spec: &RunSpec) -> FluidConfig {
        FluidConfig {
            strategy: spec.strategy,
            forced_rate: spec.forced_rate,
            ..self.base.clone()
        }
    }

    pub fn simulation(&self, spec: &RunSpec) -> Result<Simulation> {
        let ds = self.dataset.build(spec.seed)?;
        let part = partition(&ds, self.fleet.len(), self.partition, spec.seed)?;
        Simulation::new(self.fluid_config(spec), &ds, &part, self.fleet.clone(), &self.hidden, spec.seed)
    }
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub seed: u64,
    pub round: usize,
    pub strategy: String,
    /// Smallest rate trained at this round.
    pub r: f64,
    /// Straggler ids joined with `;`.
    pub straggler_ids: String,
    pub round_time_s: f64,
    pub cumulative_time_s: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub invariant_fraction: f64,
    /// Per-layer thresholds joined with `;`.
    pub thresholds: String,
    pub calibration_overhead: f64,
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

pub fn metrics_rows(spec: &RunSpec, records: &[RoundRecord]) -> Vec<MetricsRow> {
    let mut cumulative = 0.0;
    records
        .iter()
        .map(|rec| {
            cumulative += rec.round_time;
            MetricsRow {
                seed: spec.seed,
                round: rec.round,
                strategy: spec.strategy.to_string(),
                r: rec.min_rate(),
                straggler_ids: join(&rec.stragglers),
                round_time_s: rec.round_time,
                cumulative_time_s: cumulative,
                accuracy: rec.accuracy,
                loss: rec.loss,
                invariant_fraction: rec.invariant_fraction,
                thresholds: join(&rec.thresholds),
                calibration_overhead: calibration_overhead(rec),
            }
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record([
            "seed", "round", "strategy", "r", "straggler_ids", "round_time_s",
            "cumulative_time_s", "accuracy", "loss", "invariant_fraction", "thresholds",
            "calibration_overhead",
        ])?;
    }
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| FluidError::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(FluidError::from)).collect()
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub spec: RunSpec,
    pub records: Vec<RoundRecord>,
    pub rows: Vec<MetricsRow>,
}

impl RunOutcome {
    pub fn final_accuracy(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.accuracy)
    }

    pub fn total_time(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative_time_s)
    }
}

pub fn run_single(config: &ExperimentConfig, spec: RunSpec) -> Result<RunOutcome> {
    let result = config.simulation(&spec)?.run()?;
    let rows = metrics_rows(&spec, &result.records);
    Ok(RunOutcome { spec, records: result.records, rows })
}

/// Sample mean and standard deviation (`n - 1` denominator, 0 for a single
/// value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub strategy: String,
    pub r: String,
    pub runs: usize,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub total_time_mean: f64,
    pub total_time_std: f64,
    pub final_accuracies: Vec<f64>,
    pub total_times: Vec<f64>,
}

/// Groups outcomes by (strategy, rate label), keeping first-seen order.
pub fn summarize(outcomes: &[RunOutcome]) -> Vec<SummaryEntry> {
    let mut groups: Vec<((String, String), Vec<&RunOutcome>)> = Vec::new();
    for o in outcomes {
        let key = (o.spec.strategy.to_string(), o.spec.rate_label());
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(o),
            None => groups.push((key, vec![o])),
        }
    }
    groups
        .into_iter()
        .map(|((strategy, r), runs)| {
            let final_accuracies: Vec<f64> = runs.iter().map(|o| o.final_accuracy()).collect();
            let total_times: Vec<f64> = runs.iter().map(|o| o.total_time()).collect();
            let (am, asd) = mean_std(&final_accuracies);
            let (tm, tsd) = mean_std(&total_times);
            SummaryEntry {
                strategy,
                r,
                runs: runs.len(),
                final_accuracy_mean: am,
                final_accuracy_std: asd,
                total_time_mean: tm,
                total_time_std: tsd,
                final_accuracies,
                total_times,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<RunOutcome>,
    pub summary: Vec<SummaryEntry>,
}

impl ExperimentReport {
    pub fn entry(&self, strategy: Strategy, rate: Option<f64>) -> Option<&SummaryEntry> {
        let (s, r) = (strategy.to_string(), rate_label(rate));
        self.summary.iter().find(|e| e.strategy == s && e.r == r)
    }
}

/// Runs every grid cell in parallel. When `out_dir` is given, writes one
/// metrics CSV per run plus `summary.json`.
pub fn run_experiment(config: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ExperimentReport> {
    config.validate()?;
    let outcomes = config
        .runs()
        .into_par_iter()
        .map(|spec| run_single(config, spec))
        .collect::<Result<Vec<_>>>()?;
    let summary = summarize(&outcomes);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| FluidError::io(dir, e))?;
        for o in &outcomes {
            write_metrics(&dir.join(o.spec.file_name()), &o.rows)?;
        }
        let path = dir.join(SUMMARY_FILE);
        let json = serde_json::to_string_pretty(&summary)?;
        fs::write(&path, json + "\n").map_err(|e| FluidError::io(&path, e))?;
    }
    Ok(ExperimentReport { outcomes, summary })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub th: f64,
    /// Mean fraction of neurons scoring below `th`, over every round of the
    /// no-dropout reference runs.
    pub invariant_fraction: f64,
    /// Mean final accuracy of invariant-dropout runs with `th` pinned.
    pub final_accuracy: f64,
}

/// Threshold sweep. The fraction column is measured on the score sets of a
/// no-dropout run per seed, so every threshold is counted against the same
/// scores; accuracy comes from invariant-dropout runs with the threshold
/// pinned.
pub fn sweep_threshold(config: &ExperimentConfig, thresholds: &[f64]) -> Result<Vec<ThresholdRow>> {
    config.validate()?;
    if let Some(t) = thresholds.iter().find(|t| !(**t >= 0.0)) {
        return Err(FluidError::Config(format!("threshold {t} must be >= 0")));
    }
    let forced = config.forced_rates.first().copied();
    let references = config
        .seeds
        .par_iter()
        .map(|&seed| run_single(config, RunSpec { strategy: Strategy::None, forced_rate: forced, seed }))
        .collect::<Result<Vec<_>>>()?;

    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .par_iter()
        .map(|&th| {
            let mut fractions = Vec::new();
            for o in &references {
                for rec in &o.records {
                    let layers = vec![th; rec.scores.layers.len()];
                    fractions.push(invariant_fraction(&rec.scores, &layers));
                }
            }
            let mut pinned = config.clone();
            pinned.base.fixed_threshold = Some(th);
            let finals = config
                .seeds
                .iter()
                .map(|&seed| {
                    let spec = RunSpec { strategy: Strategy::Invariant, forced_rate: forced, seed };
                    run_single(&pinned, spec).map(|o| o.final_accuracy())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ThresholdRow {
                th,
                invariant_fraction: mean_std(&fractions).0,
                final_accuracy: mean_std(&finals).0,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub ratio: f64,
    pub strategy: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub final_accuracies: Vec<f64>,
}

/// Runs the config's strategy grid with the slowest `ratio` fraction of
/// clients as stragglers, for every ratio.
pub fn sweep_straggler_ratio(config: &ExperimentConfig, ratios: &[f64]) -> Result<Vec<RatioRow>> {
    let mut rows = Vec::new();
    for &ratio in ratios {
        if !(0.0..1.0).contains(&ratio) {
            return Err(FluidError::Config(format!("straggler ratio {ratio} must lie in [0, 1)")));
        }
        let mut cfg = config.clone();
        cfg.base.policy = StragglerPolicy::SlowestPct(ratio);
        let report = run_experiment(&cfg, None)?;
        for e in report.summary {
            rows.push(RatioRow {
                ratio,
                strategy: e.strategy,
                mean_accuracy: e.final_accuracy_mean,
                std_accuracy: e.final_accuracy_std,
                final_accuracies: e.final_accuracies,
            });
        }
    }
    Ok(rows)
}
