//! Frozen-configuration sweep execution.
//!
//! Every sweep point trains a fresh policy from the registered base
//! checkpoint, so only the scanned variable differs between points. Points
//! are independent and keyed by (β, seed, lr); a bounded worker pool may
//! run them concurrently without affecting any output byte. The two-path
//! hysteresis protocol is the one deliberate, labeled violation of the
//! fresh-start rule.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterSet};
use crate::dpo::{train_run, RunConfig, RunOutcome, Schedule, StartPoint, TrainError};
use crate::model::ParameterSet;
use crate::optim::OptimizerKind;
use crate::probes::{evaluate_all, generate_preference_data, ProbeError, ProbePack};
use crate::runlog::{
    read_manifest, read_run_log, write_manifest, write_run_log, DataSpec, LogError, Manifest,
    PathLabel, RunLog, RunStatus, Timestamps, LOG_FORMAT_VERSION,
};
use crate::stats::PairedStats;

/// The 13-point β grid with increased resolution in the sensitive region.
pub fn default_beta_grid() -> Vec<f64> {
    vec![
        0.0005, 0.001, 0.002, 0.004, 0.006, 0.008, 0.009, 0.010, 0.012, 0.015, 0.020, 0.050,
        0.100,
    ]
}

pub const DEFAULT_SEEDS: [i64; 5] = [1, 2, 3, 4, 5];

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("sweep directory `{0}` contains no run logs")]
    EmptyDirectory(String),
}

/// A β sweep / seed scan / lr grid plan.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub sweep_id: String,
    pub beta_grid: Vec<f64>,
    pub seeds: Vec<i64>,
    pub lr_grid: Vec<f64>,
    pub schedule: Schedule,
    pub probe_pack: String,
    pub data: DataSpec,
    pub adapter: AdapterConfig,
    pub optimizer: OptimizerKind,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            sweep_id: "canonical".to_string(),
            beta_grid: default_beta_grid(),
            seeds: vec![1],
            lr_grid: vec![Schedule::Canonical.lr()],
            schedule: Schedule::Canonical,
            probe_pack: "core14".to_string(),
            data: DataSpec::default(),
            adapter: AdapterConfig::default(),
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<(), SweepError> {
        if self.beta_grid.is_empty() {
            return Err(SweepError::InvalidPlan("beta_grid is empty".into()));
        }
        if self
            .beta_grid
            .iter()
            .any(|b| !(b.is_finite() && *b > 0.0))
        {
            return Err(SweepError::InvalidPlan(
                "beta_grid values must be positive".into(),
            ));
        }
        if self.beta_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(SweepError::InvalidPlan(
                "beta_grid must be strictly increasing".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(SweepError::InvalidPlan("seeds is empty".into()));
        }
        if self.lr_grid.is_empty() || self.lr_grid.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(SweepError::InvalidPlan(
                "lr_grid must be non-empty and positive".into(),
            ));
        }
        self.adapter
            .validate()
            .map_err(|e| SweepError::InvalidPlan(e.to_string()))?;
        Ok(())
    }

    /// Planned points in deterministic lr-major, β-next, seed-minor order.
    pub fn points(&self) -> Vec<RunKey> {
        let mut out = Vec::with_capacity(self.lr_grid.len() * self.beta_grid.len() * self.seeds.len());
        for &lr in &self.lr_grid {
            for &beta in &self.beta_grid {
                for &seed in &self.seeds {
                    out.push(RunKey { beta, seed, lr });
                }
            }
        }
        out
    }

    fn run_config(&self, key: &RunKey) -> RunConfig {
        let mut config = RunConfig::with_schedule(self.schedule, key.beta, key.seed);
        config.lr = key.lr;
        config.adapter = self.adapter.clone();
        config.optimizer = self.optimizer;
        config
    }
}

/// The learning-rate stress grid: defaults lr ∈ {1e-5, 5e-5, 2e-4} ×
/// β ∈ {0.006, 0.01, 0.02}, seed 1, canonical schedule.
pub fn stress_grid(lr_values: &[f64], beta_values: &[f64]) -> SweepPlan {
    let lr_grid = if lr_values.is_empty() {
        vec![1e-5, 5e-5, 2e-4]
    } else {
        lr_values.to_vec()
    };
    let beta_grid = if beta_values.is_empty() {
        vec![0.006, 0.01, 0.02]
    } else {
        beta_values.to_vec()
    };
    SweepPlan {
        sweep_id: "stress".to_string(),
        beta_grid,
        lr_grid,
        seeds: vec![1],
        ..SweepPlan::default()
    }
}

/// Coordinates of one run. Ordering is by (β, seed, lr) so sweep tables
/// iterate in ascending β regardless of execution order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunKey {
    pub beta: f64,
    pub seed: i64,
    pub lr: f64,
}

impl Eq for RunKey {}

impl Ord for RunKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.beta
            .total_cmp(&other.beta)
            .then(self.seed.cmp(&other.seed))
            .then(self.lr.total_cmp(&other.lr))
    }
}

impl PartialOrd for RunKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl RunKey {
    pub fn run_id(&self, schedule: Schedule) -> String {
        format!(
            "b{}_s{}_lr{}_{}",
            self.beta,
            self.seed,
            self.lr,
            schedule.tag()
        )
    }
}

/// All run logs of one sweep, keyed by coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub sweep_id: String,
    pub base_hash: String,
    pub entries: BTreeMap<RunKey, RunLog>,
}

impl SweepResult {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn failed_count(&self) -> usize {
        self.entries
            .values()
            .filter(|l| l.status == RunStatus::Failed)
            .count()
    }

    /// The canonical analysis slice: smallest seed and smallest lr.
    pub fn canonical_slice(&self) -> (i64, f64) {
        let seed = self.entries.keys().map(|k| k.seed).min().unwrap_or(1);
        let lr = self
            .entries
            .keys()
            .map(|k| k.lr)
            .fold(f64::INFINITY, f64::min);
        (seed, lr)
    }

    /// β-indexed series of a category aggregate over the given slice,
    /// skipping failed runs.
    pub fn category_series(&self, category: &str, seed: i64, lr: f64) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.seed == seed && k.lr == lr)
            .filter_map(|(k, log)| {
                log.category_aggregates
                    .get(category)
                    .map(|&v| (k.beta, v))
            })
            .collect()
    }

    /// β-indexed series of one probe's margin over the given slice.
    pub fn probe_series(&self, probe_id: &str, seed: i64, lr: f64) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.seed == seed && k.lr == lr)
            .filter_map(|(k, log)| {
                log.probe_results
                    .values()
                    .find_map(|m| m.get(probe_id))
                    .map(|&v| (k.beta, v))
            })
            .collect()
    }

    /// β-indexed series of the final preference margin over the slice.
    pub fn final_margin_series(&self, seed: i64, lr: f64) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.seed == seed && k.lr == lr)
            .filter_map(|(k, log)| log.final_margin.map(|v| (k.beta, v)))
            .collect()
    }

    /// β-indexed roughness series over the slice.
    pub fn roughness_series(&self, seed: i64, lr: f64) -> Vec<(f64, f64)> {
        self.entries
            .iter()
            .filter(|(k, _)| k.seed == seed && k.lr == lr)
            .filter_map(|(k, log)| log.roughness.map(|v| (k.beta, v)))
            .collect()
    }

    pub fn seeds(&self) -> Vec<i64> {
        let mut seeds: Vec<i64> = self.entries.keys().map(|k| k.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        seeds
    }

    pub fn betas(&self) -> Vec<f64> {
        let mut betas: Vec<f64> = self.entries.keys().map(|k| k.beta).collect();
        betas.sort_by(f64::total_cmp);
        betas.dedup();
        betas
    }

    pub fn categories(&self) -> Vec<String> {
        let mut cats: Vec<String> = self
            .entries
            .values()
            .flat_map(|l| l.category_aggregates.keys().cloned())
            .collect();
        cats.sort();
        cats.dedup();
        cats
    }

    pub fn probe_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .entries
            .values()
            .flat_map(|l| l.probe_results.values().flat_map(|m| m.keys().cloned()))
            .collect();
        ids.sort();
        ids.dedup();
        ids
    }
}

/// Pearson correlation between two probes' margins across the β sweep,
/// taken over the canonical (smallest seed, smallest lr) slice on the
/// grid points where both probes are present.
pub fn cross_probe_correlation(
    sweep: &SweepResult,
    probe_a: &str,
    probe_b: &str,
) -> Result<(f64, f64), crate::stats::StatsError> {
    let (seed, lr) = sweep.canonical_slice();
    let a = sweep.probe_series(probe_a, seed, lr);
    let b = sweep.probe_series(probe_b, seed, lr);
    let bmap: BTreeMap<u64, f64> = b.iter().map(|&(beta, v)| (beta.to_bits(), v)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (beta, va) in a {
        if let Some(&vb) = bmap.get(&beta.to_bits()) {
            xs.push(va);
            ys.push(vb);
        }
    }
    if xs.len() < 3 {
        return Err(crate::stats::StatsError::MissingSeries(format!(
            "{probe_a} vs {probe_b}"
        )));
    }
    crate::stats::pearson(&xs, &ys)
}

/// Bounded worker pool over an item list; results land in input order.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let workers = effective_workers(workers, items.len());
    if workers <= 1 {
        return items.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let slot_refs: Vec<std::sync::Mutex<&mut Option<R>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                **slot_refs[i].lock().unwrap() = Some(r);
            });
        }
    });
    drop(slot_refs);
    slots.into_iter().map(|s| s.unwrap()).collect()
}

fn effective_workers(requested: usize, n_items: usize) -> usize {
    let auto = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let w = if requested == 0 { auto } else { requested };
    w.min(n_items).max(1)
}

/// Executes one fresh-start point against the registered base.
fn execute_point(
    base: &Arc<ParameterSet>,
    base_hash: &str,
    plan: &SweepPlan,
    pack: &ProbePack,
    data: &[crate::probes::PreferencePair],
    key: &RunKey,
) -> Result<RunLog, SweepError> {
    let config = plan.run_config(key);
    let run_id = key.run_id(plan.schedule);
    let outcome = train_run(base, &config, data, StartPoint::Fresh)?;
    let log = match outcome {
        RunOutcome::Completed { adapters, trace } => {
            let report = evaluate_all(&base.promote(), Some(&adapters), &pack.probes)?;
            RunLog::from_completed_run(
                run_id,
                base_hash.to_string(),
                &config,
                PathLabel::Fresh,
                plan.data,
                pack.id.clone(),
                &trace,
                &report,
                Timestamps::none(),
            )
        }
        RunOutcome::Aborted { trace, reason } => RunLog::from_failed_run(
            run_id,
            base_hash.to_string(),
            &config,
            PathLabel::Fresh,
            plan.data,
            pack.id.clone(),
            &trace,
            reason,
            Timestamps::none(),
        ),
    };
    Ok(log)
}

/// Runs every planned point (in parallel up to `workers`; 0 = auto).
/// Failed runs are recorded with `status = failed` and do not abort the
/// sweep; plan-level errors do.
pub fn run_sweep(
    plan: &SweepPlan,
    base: &Arc<ParameterSet>,
    pack: &ProbePack,
    workers: usize,
) -> Result<SweepResult, SweepError> {
    plan.validate()?;
    let base_hash = base.content_hash();
    let data = generate_preference_data(
        plan.data.seed,
        plan.data.n_pairs as usize,
        Some(plan.data.conflict_fraction),
    );
    let points = plan.points();
    let logs = parallel_map(&points, workers, |key| {
        execute_point(base, &base_hash, plan, pack, &data, key)
    });
    let mut entries = BTreeMap::new();
    for (key, log) in points.iter().zip(logs) {
        entries.insert(*key, log?);
    }
    Ok(SweepResult {
        sweep_id: plan.sweep_id.clone(),
        base_hash,
        entries,
    })
}

/// Writes one log file per run plus the sweep manifest.
pub fn write_sweep_dir(
    result: &SweepResult,
    plan: &SweepPlan,
    dir: &Path,
) -> Result<(), SweepError> {
    for log in result.entries.values() {
        write_run_log(log, dir)?;
    }
    let manifest = Manifest {
        format_version: LOG_FORMAT_VERSION,
        sweep_id: result.sweep_id.clone(),
        base_hash: result.base_hash.clone(),
        beta_grid: plan.beta_grid.clone(),
        seeds: plan.seeds.clone(),
        lr_grid: plan.lr_grid.clone(),
        schedule_tag: plan.schedule.tag().to_string(),
        probe_pack: plan.probe_pack.clone(),
        data: plan.data,
        run_ids: result.entries.values().map(|l| l.run_id.clone()).collect(),
    };
    write_manifest(&manifest, dir)?;
    Ok(())
}

/// Reloads an archived sweep from its log directory. Returns the result
/// plus a warning list (e.g. mixed base hashes).
pub fn load_sweep_dir(dir: &Path) -> Result<(SweepResult, Vec<String>), SweepError> {
    let mut entries = BTreeMap::new();
    let mut warnings = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(dir)
        .map_err(LogError::Io)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|e| e == "json")
                && p.file_name().is_some_and(|n| n != "manifest.json")
        })
        .collect();
    names.sort();
    for path in names {
        let log = read_run_log(&path)?;
        let key = RunKey {
            beta: log.config.beta,
            seed: log.config.seed,
            lr: log.config.lr,
        };
        if entries.insert(key, log).is_some() {
            warnings.push(format!(
                "duplicate run coordinates in `{}`",
                path.display()
            ));
        }
    }
    if entries.is_empty() {
        return Err(SweepError::EmptyDirectory(dir.display().to_string()));
    }
    let manifest_path = dir.join("manifest.json");
    let (sweep_id, manifest_hash) = if manifest_path.exists() {
        let m = read_manifest(&manifest_path)?;
        (m.sweep_id, Some(m.base_hash))
    } else {
        warnings.push("manifest.json missing".to_string());
        ("unknown".to_string(), None)
    };
    let mut hashes: Vec<&String> = entries.values().map(|l| &l.base_hash).collect();
    hashes.sort();
    hashes.dedup();
    if hashes.len() > 1 {
        warnings.push(format!(
            "mixed base hashes across runs ({} distinct)",
            hashes.len()
        ));
    }
    if let (Some(mh), [only]) = (&manifest_hash, hashes.as_slice()) {
        if &mh != only {
            warnings.push("manifest base hash disagrees with run logs".to_string());
        }
    }
    let base_hash = manifest_hash.unwrap_or_else(|| {
        entries
            .values()
            .next()
            .map(|l| l.base_hash.clone())
            .unwrap_or_default()
    });
    Ok((
        SweepResult {
            sweep_id,
            base_hash,
            entries,
        },
        warnings,
    ))
}

/// The two-path hysteresis protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisPlan {
    pub beta_high: f64,
    pub beta_final: f64,
    pub stage_steps: usize,
    pub seeds: Vec<i64>,
    pub lr: f64,
    pub probe_pack: String,
    pub data: DataSpec,
    pub adapter: AdapterConfig,
    pub optimizer: OptimizerKind,
}

impl Default for HysteresisPlan {
    fn default() -> Self {
        Self {
            beta_high: 0.02,
            beta_final: 0.01,
            stage_steps: 200,
            seeds: DEFAULT_SEEDS.to_vec(),
            lr: Schedule::Canonical.lr(),
            probe_pack: "core14".to_string(),
            data: DataSpec::default(),
            adapter: AdapterConfig::default(),
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl HysteresisPlan {
    pub fn validate(&self) -> Result<(), SweepError> {
        if !(self.beta_final.is_finite() && self.beta_final > 0.0) {
            return Err(SweepError::InvalidPlan("beta_final must be positive".into()));
        }
        if self.beta_high <= self.beta_final {
            return Err(SweepError::InvalidPlan(
                "beta_high must exceed beta_final".into(),
            ));
        }
        if self.stage_steps < 1 {
            return Err(SweepError::InvalidPlan("stage_steps must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(SweepError::InvalidPlan("seeds is empty".into()));
        }
        Ok(())
    }

    fn stage_config(&self, beta: f64, seed: i64) -> RunConfig {
        RunConfig {
            beta,
            seed,
            lr: self.lr,
            steps: self.stage_steps,
            batch_size: 4,
            adapter: self.adapter.clone(),
            schedule: Schedule::Canonical,
            optimizer: self.optimizer,
        }
    }
}

/// One seed's quench/anneal pair.
#[derive(Debug, Clone)]
pub struct HysteresisSeedOutcome {
    pub seed: i64,
    pub path_a: RunLog,
    pub path_b_stage1: RunLog,
    pub path_b_stage2: RunLog,
    /// Stage-1 adapters, kept so the quench-prefix identity can be audited.
    pub stage1_adapters: Option<AdapterSet>,
    pub complete: bool,
}

/// Per-category paired comparison of Path A versus Path B (stage 2).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HysteresisSummaryRow {
    pub capability: String,
    pub path_a_mean: f64,
    pub path_b_mean: f64,
    /// `None` when fewer than 2 complete pairs exist (insufficient n).
    pub stats: Option<PairedStats>,
}

#[derive(Debug, Clone)]
pub struct HysteresisResult {
    pub outcomes: Vec<HysteresisSeedOutcome>,
    pub rows: Vec<HysteresisSummaryRow>,
}

impl HysteresisResult {
    pub fn all_logs(&self) -> Vec<&RunLog> {
        self.outcomes
            .iter()
            .flat_map(|o| [&o.path_a, &o.path_b_stage1, &o.path_b_stage2])
            .collect()
    }
}

/// Runs Path A (quench at `beta_final`) and Path B (quench at `beta_high`,
/// then continue at `beta_final` from the stage-1 checkpoint with a fresh
/// optimizer) for every seed, then computes the paired statistics over
/// complete pairs.
pub fn run_hysteresis(
    plan: &HysteresisPlan,
    base: &Arc<ParameterSet>,
    pack: &ProbePack,
    workers: usize,
) -> Result<HysteresisResult, SweepError> {
    plan.validate()?;
    let base_hash = base.content_hash();
    let data = generate_preference_data(
        plan.data.seed,
        plan.data.n_pairs as usize,
        Some(plan.data.conflict_fraction),
    );

    let outcomes: Vec<Result<HysteresisSeedOutcome, SweepError>> =
        parallel_map(&plan.seeds, workers, |&seed| {
            run_hysteresis_seed(plan, base, &base_hash, pack, &data, seed)
        });
    let outcomes: Vec<HysteresisSeedOutcome> =
        outcomes.into_iter().collect::<Result<_, _>>()?;

    // paired stats over complete pairs only
    let complete: Vec<&HysteresisSeedOutcome> =
        outcomes.iter().filter(|o| o.complete).collect();
    let mut categories: Vec<String> = complete
        .iter()
        .flat_map(|o| o.path_a.category_aggregates.keys().cloned())
        .collect();
    categories.sort();
    categories.dedup();

    let mut rows = Vec::new();
    for cat in &categories {
        let a: Vec<f64> = complete
            .iter()
            .filter_map(|o| o.path_a.category_aggregates.get(cat).copied())
            .collect();
        let b: Vec<f64> = complete
            .iter()
            .filter_map(|o| o.path_b_stage2.category_aggregates.get(cat).copied())
            .collect();
        if a.len() != b.len() || a.is_empty() {
            continue;
        }
        rows.push(HysteresisSummaryRow {
            capability: cat.clone(),
            path_a_mean: mean(&a),
            path_b_mean: mean(&b),
            stats: crate::stats::paired_tests(&a, &b).ok(),
        });
    }
    // the optimized proxy itself, for margin-vs-capability contrast
    let a: Vec<f64> = complete
        .iter()
        .filter_map(|o| o.path_a.final_margin)
        .collect();
    let b: Vec<f64> = complete
        .iter()
        .filter_map(|o| o.path_b_stage2.final_margin)
        .collect();
    if !a.is_empty() && a.len() == b.len() {
        rows.push(HysteresisSummaryRow {
            capability: "final_margin".to_string(),
            path_a_mean: mean(&a),
            path_b_mean: mean(&b),
            stats: crate::stats::paired_tests(&a, &b).ok(),
        });
    }

    Ok(HysteresisResult { outcomes, rows })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn run_hysteresis_seed(
    plan: &HysteresisPlan,
    base: &Arc<ParameterSet>,
    base_hash: &str,
    pack: &ProbePack,
    data: &[crate::probes::PreferencePair],
    seed: i64,
) -> Result<HysteresisSeedOutcome, SweepError> {
    let weights = base.promote();
    let mut complete = true;

    // Path A: quench directly at beta_final
    let config_a = plan.stage_config(plan.beta_final, seed);
    let outcome_a = train_run(base, &config_a, data, StartPoint::Fresh)?;
    let path_a = archive_stage(
        format!("hyst_a_b{}_s{seed}", plan.beta_final),
        base_hash,
        &config_a,
        PathLabel::Fresh,
        plan,
        pack,
        &weights,
        outcome_a,
        &mut complete,
    )?;

    // Path B stage 1: quench at beta_high (bit-identical to a standalone
    // quench with the same seed; the derivation must not see the label)
    let config_b1 = plan.stage_config(plan.beta_high, seed);
    let outcome_b1 = train_run(base, &config_b1, data, StartPoint::Fresh)?;
    let stage1_adapters = match &outcome_b1 {
        RunOutcome::Completed { adapters, .. } => Some(adapters.clone()),
        RunOutcome::Aborted { .. } => None,
    };
    let path_b_stage1 = archive_stage(
        format!("hyst_b1_b{}_s{seed}", plan.beta_high),
        base_hash,
        &config_b1,
        PathLabel::HysteresisStage1,
        plan,
        pack,
        &weights,
        outcome_b1,
        &mut complete,
    )?;

    // Path B stage 2: continue at beta_final from the stage-1 checkpoint,
    // optimizer state reset
    let config_b2 = plan.stage_config(plan.beta_final, seed);
    let outcome_b2 = match &stage1_adapters {
        Some(set) => train_run(base, &config_b2, data, StartPoint::Resume(set))?,
        None => RunOutcome::Aborted {
            trace: Vec::new(),
            reason: "stage 1 failed; stage 2 not run".to_string(),
        },
    };
    let path_b_stage2 = archive_stage(
        format!("hyst_b2_b{}_s{seed}", plan.beta_final),
        base_hash,
        &config_b2,
        PathLabel::HysteresisStage2,
        plan,
        pack,
        &weights,
        outcome_b2,
        &mut complete,
    )?;

    Ok(HysteresisSeedOutcome {
        seed,
        path_a,
        path_b_stage1,
        path_b_stage2,
        stage1_adapters,
        complete,
    })
}

#[allow(clippy::too_many_arguments)]
fn archive_stage(
    run_id: String,
    base_hash: &str,
    config: &RunConfig,
    label: PathLabel,
    plan: &HysteresisPlan,
    pack: &ProbePack,
    weights: &crate::model::BaseWeights,
    outcome: RunOutcome,
    complete: &mut bool,
) -> Result<RunLog, SweepError> {
    Ok(match outcome {
        RunOutcome::Completed { adapters, trace } => {
            let report = evaluate_all(weights, Some(&adapters), &pack.probes)?;
            RunLog::from_completed_run(
                run_id,
                base_hash.to_string(),
                config,
                label,
                plan.data,
                pack.id.clone(),
                &trace,
                &report,
                Timestamps::none(),
            )
        }
        RunOutcome::Aborted { trace, reason } => {
            *complete = false;
            RunLog::from_failed_run(
                run_id,
                base_hash.to_string(),
                config,
                label,
                plan.data,
                pack.id.clone(),
                &trace,
                reason,
                Timestamps::none(),
            )
        }
    })
}
