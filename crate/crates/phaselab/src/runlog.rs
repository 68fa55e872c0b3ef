//! The run-log archive: one canonical JSON document per training run.
//!
//! Canonical means byte-reproducible: keys are sorted, floats are written
//! with 9 significant digits (trimmed scientific notation), and every
//! derived quantity stored in a log (roughness, final margin, category
//! aggregates) is computed from the already-rounded values it is stored
//! next to, so a reader can revalidate them from the file alone.
//!
//! Wall-clock timestamps are opt-in (`Timestamps::now`): the default log
//! is fully deterministic so reruns produce byte-identical archives.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dpo::{RunConfig, TrainingTrace};
use crate::probes::ProbeReport;
use crate::stats;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("run log parse error: {0}")]
    Parse(String),
    #[error("run log inconsistent in fields: {}", .fields.join(", "))]
    Inconsistent { fields: Vec<String> },
    #[error("non-finite value in field `{0}`")]
    NonFinite(String),
}

/// Rounds to the canonical 9-significant-digit representation.
pub fn round_sig9(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("sig9 round-trip")
}

/// Canonical float text: 9 significant digits, scientific, trailing zeros
/// trimmed (`0.008 → "8e-3"`, `ln 2 → "6.93147181e-1"`, `0 → "0"`).
/// Parsing this text recovers exactly [`round_sig9`] of the input.
pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    let s = format!("{x:.8e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent");
    let mantissa = mantissa.trim_end_matches('0').trim_end_matches('.');
    if exp == "0" {
        mantissa.to_string()
    } else {
        format!("{mantissa}e{exp}")
    }
}

fn escape_json(s: &str, out: &mut String) {
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
}

/// Renders a JSON value canonically: sorted keys, two-space indentation,
/// floats via [`fmt_f64`]. Rejects non-finite numbers.
pub fn canonical_json(value: &serde_json::Value) -> Result<String, LogError> {
    let mut out = String::new();
    render(value, 0, &mut out)?;
    out.push('\n');
    Ok(out)
}

fn render(value: &serde_json::Value, indent: usize, out: &mut String) -> Result<(), LogError> {
    use serde_json::Value;
    match value {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().unwrap();
                if !f.is_finite() {
                    return Err(LogError::NonFinite("<number>".into()));
                }
                out.push_str(&fmt_f64(f));
            }
        }
        Value::String(s) => escape_json(s, out),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return Ok(());
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                render(item, indent + 1, out)?;
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return Ok(());
            }
            // serde_json's default map is a BTreeMap, but sort defensively
            // in case the preserve_order feature sneaks in transitively
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, key) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push('\n');
                out.push_str(&"  ".repeat(indent + 1));
                escape_json(key, out);
                out.push_str(": ");
                render(&map[*key], indent + 1, out)?;
            }
            out.push('\n');
            out.push_str(&"  ".repeat(indent));
            out.push('}');
        }
    }
    Ok(())
}

pub const LOG_FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PathLabel {
    Fresh,
    HysteresisStage1,
    HysteresisStage2,
}

/// Echo of the preference-data recipe so a log is self-contained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub seed: i64,
    pub n_pairs: u64,
    pub conflict_fraction: f64,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 256,
            conflict_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamps {
    pub started: Option<String>,
    pub finished: Option<String>,
}

impl Timestamps {
    /// Deterministic default: both fields null.
    pub fn none() -> Self {
        Self::default()
    }
}

/// The run recipe as archived, decoupled from the in-memory config types
/// so the schema stays stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    pub beta: f64,
    pub seed: i64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: u64,
    pub adapter: LogAdapter,
    pub schedule_tag: String,
    pub optimizer: String,
    pub path_label: PathLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogAdapter {
    pub rank: u64,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<String>,
}

impl LogConfig {
    pub fn from_run_config(config: &RunConfig, path_label: PathLabel) -> Self {
        Self {
            beta: config.beta,
            seed: config.seed,
            lr: config.lr,
            steps: config.steps as u64,
            batch_size: config.batch_size as u64,
            adapter: LogAdapter {
                rank: config.adapter.rank as u64,
                alpha: config.adapter.alpha,
                dropout: config.adapter.dropout,
                targets: config
                    .adapter
                    .targets
                    .iter()
                    .map(|t| t.tag().to_string())
                    .collect(),
            },
            schedule_tag: config.schedule.tag().to_string(),
            optimizer: config.optimizer.tag().to_string(),
            path_label,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarginTrace {
    pub raw: Vec<f64>,
    pub scaled: Vec<f64>,
}

/// One archived training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunLog {
    pub format_version: u64,
    pub run_id: String,
    pub base_hash: String,
    pub config: LogConfig,
    pub data: DataSpec,
    pub probe_pack: String,
    pub margin_trace: MarginTrace,
    pub final_margin: Option<f64>,
    pub roughness: Option<f64>,
    /// category tag → probe id → margin
    pub probe_results: BTreeMap<String, BTreeMap<String, f64>>,
    pub category_aggregates: BTreeMap<String, f64>,
    pub status: RunStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub timestamps: Timestamps,
}

/// Tail-window mean matching the trainer's final-margin rule.
fn window_mean_tail(values: &[f64]) -> f64 {
    let window = (values.len() / 10).max(1);
    let tail = &values[values.len() - window..];
    tail.iter().sum::<f64>() / window as f64
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

impl RunLog {
    /// Builds a log from a completed run. Trace values and probe margins
    /// are rounded to the canonical 9 digits first; every derived field is
    /// then computed from those rounded values and rounded itself, so the
    /// stored numbers satisfy the validation identities exactly.
    #[allow(clippy::too_many_arguments)]
    pub fn from_completed_run(
        run_id: String,
        base_hash: String,
        config: &RunConfig,
        path_label: PathLabel,
        data: DataSpec,
        probe_pack: String,
        trace: &TrainingTrace,
        report: &ProbeReport,
        timestamps: Timestamps,
    ) -> Self {
        let raw: Vec<f64> = trace.iter().map(|r| round_sig9(r.margin_raw)).collect();
        let scaled: Vec<f64> = trace.iter().map(|r| round_sig9(r.margin_scaled)).collect();
        let roughness = round_sig9(stats::roughness(&scaled).expect("steps >= 2"));
        let final_margin = round_sig9(window_mean_tail(&scaled));
        let probe_results: BTreeMap<String, BTreeMap<String, f64>> = report
            .margins
            .iter()
            .map(|(cat, probes)| {
                (
                    cat.clone(),
                    probes
                        .iter()
                        .map(|(id, m)| (id.clone(), round_sig9(*m)))
                        .collect(),
                )
            })
            .collect();
        let category_aggregates = probe_results
            .iter()
            .map(|(cat, probes)| {
                let mean: f64 = probes.values().sum::<f64>() / probes.len() as f64;
                (cat.clone(), round_sig9(mean))
            })
            .collect();
        Self {
            format_version: LOG_FORMAT_VERSION,
            run_id,
            base_hash,
            config: LogConfig::from_run_config(config, path_label),
            data,
            probe_pack,
            margin_trace: MarginTrace { raw, scaled },
            final_margin: Some(final_margin),
            roughness: Some(roughness),
            probe_results,
            category_aggregates,
            status: RunStatus::Ok,
            error: None,
            timestamps,
        }
    }

    /// A failed run keeps its partial trace and the abort reason; derived
    /// fields stay empty.
    #[allow(clippy::too_many_arguments)]
    pub fn from_failed_run(
        run_id: String,
        base_hash: String,
        config: &RunConfig,
        path_label: PathLabel,
        data: DataSpec,
        probe_pack: String,
        partial_trace: &TrainingTrace,
        error: String,
        timestamps: Timestamps,
    ) -> Self {
        Self {
            format_version: LOG_FORMAT_VERSION,
            run_id,
            base_hash,
            config: LogConfig::from_run_config(config, path_label),
            data,
            probe_pack,
            margin_trace: MarginTrace {
                raw: partial_trace.iter().map(|r| round_sig9(r.margin_raw)).collect(),
                scaled: partial_trace
                    .iter()
                    .map(|r| round_sig9(r.margin_scaled))
                    .collect(),
            },
            final_margin: None,
            roughness: None,
            probe_results: BTreeMap::new(),
            category_aggregates: BTreeMap::new(),
            status: RunStatus::Failed,
            error: Some(error),
            timestamps,
        }
    }

    /// Checks the internal-consistency invariants; the error names every
    /// offending field.
    pub fn validate(&self) -> Result<(), LogError> {
        let mut fields = Vec::new();
        if self.format_version != LOG_FORMAT_VERSION {
            fields.push("format_version".to_string());
        }
        if self.margin_trace.raw.len() != self.margin_trace.scaled.len() {
            fields.push("margin_trace".to_string());
        }
        if self
            .margin_trace
            .raw
            .iter()
            .chain(&self.margin_trace.scaled)
            .any(|v| !v.is_finite())
        {
            fields.push("margin_trace".to_string());
        }
        match self.status {
            RunStatus::Failed => {
                if self.error.is_none() {
                    fields.push("error".to_string());
                }
            }
            RunStatus::Ok => {
                if self.margin_trace.scaled.len() != self.config.steps as usize {
                    fields.push("margin_trace".to_string());
                }
                match (self.roughness, self.margin_trace.scaled.len() >= 2) {
                    (Some(stored), true) => {
                        let recomputed = stats::roughness(&self.margin_trace.scaled).unwrap();
                        if !close(stored, recomputed) {
                            fields.push("roughness".to_string());
                        }
                    }
                    _ => fields.push("roughness".to_string()),
                }
                match self.final_margin {
                    Some(stored) if !self.margin_trace.scaled.is_empty() => {
                        if !close(stored, window_mean_tail(&self.margin_trace.scaled)) {
                            fields.push("final_margin".to_string());
                        }
                    }
                    _ => fields.push("final_margin".to_string()),
                }
                if self.probe_results.is_empty() {
                    fields.push("probe_results".to_string());
                }
                for (cat, probes) in &self.probe_results {
                    let mean: f64 = probes.values().sum::<f64>() / probes.len() as f64;
                    match self.category_aggregates.get(cat) {
                        Some(&agg) if close(agg, mean) => {}
                        _ => fields.push(format!("category_aggregates.{cat}")),
                    }
                }
                if self.category_aggregates.len() != self.probe_results.len() {
                    fields.push("category_aggregates".to_string());
                }
            }
        }
        if !(self.config.beta.is_finite() && self.config.beta > 0.0) {
            fields.push("config.beta".to_string());
        }
        if fields.is_empty() {
            Ok(())
        } else {
            fields.dedup();
            Err(LogError::Inconsistent { fields })
        }
    }

    pub fn to_canonical_json(&self) -> Result<String, LogError> {
        let value = serde_json::to_value(self).map_err(|e| LogError::Parse(e.to_string()))?;
        canonical_json(&value)
    }
}

/// Parses and validates a run log from raw bytes.
pub fn parse_run_log(bytes: &[u8]) -> Result<RunLog, LogError> {
    let log: RunLog =
        serde_json::from_slice(bytes).map_err(|e| LogError::Parse(e.to_string()))?;
    log.validate()?;
    Ok(log)
}

/// Writes `<dir>/<run_id>.json`; creates the directory if needed.
pub fn write_run_log(log: &RunLog, dir: &Path) -> Result<PathBuf, LogError> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{}.json", log.run_id));
    std::fs::write(&path, log.to_canonical_json()?)?;
    Ok(path)
}

pub fn read_run_log(path: &Path) -> Result<RunLog, LogError> {
    let bytes = std::fs::read(path)?;
    parse_run_log(&bytes)
}

/// The sweep manifest: plan echo plus the registered base hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u64,
    pub sweep_id: String,
    pub base_hash: String,
    pub beta_grid: Vec<f64>,
    pub seeds: Vec<i64>,
    pub lr_grid: Vec<f64>,
    pub schedule_tag: String,
    pub probe_pack: String,
    pub data: DataSpec,
    pub run_ids: Vec<String>,
}

pub fn write_manifest(manifest: &Manifest, dir: &Path) -> Result<PathBuf, LogError> {
    std::fs::create_dir_all(dir)?;
    let value = serde_json::to_value(manifest).map_err(|e| LogError::Parse(e.to_string()))?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, canonical_json(&value)?)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest, LogError> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| LogError::Parse(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dpo::StepRecord;
    use crate::probes::ProbeReport;

    fn sample_trace(n: usize) -> TrainingTrace {
        (1..=n)
            .map(|i| {
                let raw = (i as f64 * 0.739).sin() * 3.0;
                StepRecord {
                    step: i,
                    loss: 0.7,
                    margin_raw: raw,
                    margin_scaled: 0.01 * raw,
                }
            })
            .collect()
    }

    fn sample_report() -> ProbeReport {
        let mut margins: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
        margins.entry("logic".into()).or_default().insert("syllogism_1".into(), -0.62);
        margins.entry("logic".into()).or_default().insert("syllogism_2".into(), 2.38);
        margins.entry("logic".into()).or_default().insert("ordering".into(), -1.62);
        margins.entry("arith".into()).or_default().insert("add_small".into(), 2.75);
        let mut report = ProbeReport {
            margins,
            aggregates: BTreeMap::new(),
        };
        report.aggregates = report.recompute_aggregates();
        report
    }

    fn sample_log() -> RunLog {
        let mut config = RunConfig::canonical(0.01, 1);
        config.steps = 40;
        RunLog::from_completed_run(
            "run_b0.01_s1".into(),
            "abc123".into(),
            &config,
            PathLabel::Fresh,
            DataSpec::default(),
            "core14".into(),
            &sample_trace(40),
            &sample_report(),
            Timestamps::none(),
        )
    }

    #[test]
    fn fmt_f64_canonical_forms() {
        assert_eq!(fmt_f64(0.0), "0");
        assert_eq!(fmt_f64(-0.0), "0");
        assert_eq!(fmt_f64(0.008), "8e-3");
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(-2.5), "-2.5");
        assert_eq!(fmt_f64(std::f64::consts::LN_2), "6.93147181e-1");
        assert_eq!(fmt_f64(123.456), "1.23456e2");
        // parse(fmt(x)) == round_sig9(x)
        for &x in &[0.1, -7.25e-9, 1234.5678912345, 2.0f64.powi(40)] {
            let parsed: f64 = fmt_f64(x).parse().unwrap();
            assert_eq!(parsed, round_sig9(x));
            assert_eq!(round_sig9(parsed), parsed, "idempotent");
        }
    }

    #[test]
    fn canonical_json_sorts_keys_and_is_stable() {
        let log = sample_log();
        let a = log.to_canonical_json().unwrap();
        let b = log.to_canonical_json().unwrap();
        assert_eq!(a, b);
        let base_pos = a.find("\"base_hash\"").unwrap();
        let config_pos = a.find("\"config\"").unwrap();
        let status_pos = a.find("\"status\"").unwrap();
        assert!(base_pos < config_pos && config_pos < status_pos);
    }

    #[test]
    fn write_read_round_trip_validates() {
        let dir = tempfile::tempdir().unwrap();
        let log = sample_log();
        let path = write_run_log(&log, dir.path()).unwrap();
        let back = read_run_log(&path).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn structurally_equal_logs_are_byte_identical() {
        let a = sample_log().to_canonical_json().unwrap();
        let b = sample_log().to_canonical_json().unwrap();
        assert_eq!(a.as_bytes(), b.as_bytes());
    }

    #[test]
    fn tampered_roughness_is_rejected_naming_the_field() {
        let mut log = sample_log();
        log.roughness = Some(log.roughness.unwrap() + 0.5);
        let err = log.validate().unwrap_err();
        match err {
            LogError::Inconsistent { fields } => {
                assert!(fields.contains(&"roughness".to_string()), "{fields:?}");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn tampered_aggregate_is_rejected() {
        let mut log = sample_log();
        *log.category_aggregates.get_mut("logic").unwrap() += 0.1;
        let err = log.validate().unwrap_err();
        assert!(err.to_string().contains("category_aggregates.logic"));
    }

    #[test]
    fn failed_log_requires_error_only() {
        let mut config = RunConfig::canonical(0.01, 1);
        config.steps = 40;
        let log = RunLog::from_failed_run(
            "run_x".into(),
            "abc".into(),
            &config,
            PathLabel::Fresh,
            DataSpec::default(),
            "core14".into(),
            &sample_trace(3),
            "non-finite loss at step 4".into(),
            Timestamps::none(),
        );
        log.validate().unwrap();
        let mut bad = log.clone();
        bad.error = None;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parse_rejects_malformed_documents() {
        assert!(parse_run_log(b"").is_err());
        assert!(parse_run_log(b"{}").is_err());
        assert!(parse_run_log(b"[1, 2, 3]").is_err());
        assert!(parse_run_log(b"\xff\xfe").is_err());
        // unknown fields rejected
        let mut v: serde_json::Value =
            serde_json::from_str(&sample_log().to_canonical_json().unwrap()).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("surprise".into(), serde_json::json!(1));
        assert!(parse_run_log(serde_json::to_string(&v).unwrap().as_bytes()).is_err());
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            format_version: LOG_FORMAT_VERSION,
            sweep_id: "canonical".into(),
            base_hash: "ff00".into(),
            beta_grid: vec![0.001, 0.01],
            seeds: vec![1],
            lr_grid: vec![5e-5],
            schedule_tag: "canonical".into(),
            probe_pack: "core14".into(),
            data: DataSpec::default(),
            run_ids: vec!["a".into(), "b".into()],
        };
        let path = write_manifest(&m, dir.path()).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), m);
    }
}
