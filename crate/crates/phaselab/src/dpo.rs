//! The preference-optimization trainer: logistic pairwise loss with β as
//! the explicit control parameter, adapter-only updates, and the per-step
//! margin trace that roughness and final-margin aggregation consume.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterSet};
use crate::graph::{sigmoid, softplus, Graph};
use crate::model::{forward_logits, mount_base, BranchDropout, ParameterSet};
use crate::optim::{Optimizer, OptimizerKind};
use crate::policy::{completion_logprob, completion_picks, mount_master_branches, ScoreError};
use crate::probes::PreferencePair;
use crate::rng::StreamKey;

/// Named training schedules. `canonical` is the 200-step recipe at
/// lr 5e-5; `fast` is the auxiliary 100-step recipe at lr 2e-4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Canonical,
    Fast,
}

impl Schedule {
    pub fn tag(&self) -> &'static str {
        match self {
            Schedule::Canonical => "canonical",
            Schedule::Fast => "fast",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "canonical" => Some(Schedule::Canonical),
            "fast" => Some(Schedule::Fast),
            _ => None,
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Schedule::Canonical => 200,
            Schedule::Fast => 100,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Schedule::Canonical => 5e-5,
            Schedule::Fast => 2e-4,
        }
    }
}

/// The full recipe of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub beta: f64,
    pub seed: i64,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub adapter: AdapterConfig,
    pub schedule: Schedule,
    pub optimizer: OptimizerKind,
}

impl RunConfig {
    /// The canonical recipe at the given β and seed.
    pub fn canonical(beta: f64, seed: i64) -> Self {
        Self::with_schedule(Schedule::Canonical, beta, seed)
    }

    /// The fast auxiliary recipe (100 steps, lr 2e-4).
    pub fn fast(beta: f64, seed: i64) -> Self {
        Self::with_schedule(Schedule::Fast, beta, seed)
    }

    pub fn with_schedule(schedule: Schedule, beta: f64, seed: i64) -> Self {
        Self {
            beta,
            seed,
            lr: schedule.lr(),
            steps: schedule.steps(),
            batch_size: 4,
            adapter: AdapterConfig::default(),
            schedule,
            optimizer: OptimizerKind::AdamW,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(TrainError::InvalidConfig("beta must be positive".into()));
        }
        if self.steps < 1 {
            return Err(TrainError::InvalidConfig("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive".into()));
        }
        self.adapter
            .validate()
            .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// One step of the margin trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub margin_raw: f64,
    pub margin_scaled: f64,
}

pub type TrainingTrace = Vec<StepRecord>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid run config: {0}")]
    InvalidConfig(String),
    #[error("empty preference dataset")]
    EmptyData,
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("resume adapters incompatible: {0}")]
    ResumeMismatch(String),
    #[error("trace is empty")]
    EmptyTrace,
}

/// How a run ended. Numeric aborts are not hard errors: the partial trace
/// is kept so the run can be archived as failed.
#[derive(Debug, Clone)]
pub enum RunOutcome {
    Completed {
        adapters: AdapterSet,
        trace: TrainingTrace,
    },
    Aborted {
        trace: TrainingTrace,
        reason: String,
    },
}

impl RunOutcome {
    pub fn completed(self) -> Option<(AdapterSet, TrainingTrace)> {
        match self {
            RunOutcome::Completed { adapters, trace } => Some((adapters, trace)),
            RunOutcome::Aborted { .. } => None,
        }
    }
}

/// The three quantities one preference pair contributes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoTerms {
    pub loss: f64,
    pub margin_raw: f64,
    pub margin_scaled: f64,
}

/// The pairwise logistic objective: with
/// `Δ = (logπ_θ − logπ_ref)(chosen) − (logπ_θ − logπ_ref)(rejected)`,
/// loss is `−log σ(β·Δ)` via the stable log-sigmoid, `margin_raw = Δ`,
/// and `margin_scaled = β·Δ`.
pub fn dpo_loss(
    logp_theta_w: f64,
    logp_ref_w: f64,
    logp_theta_l: f64,
    logp_ref_l: f64,
    beta: f64,
) -> DpoTerms {
    let delta = (logp_theta_w - logp_ref_w) - (logp_theta_l - logp_ref_l);
    let margin_scaled = beta * delta;
    DpoTerms {
        loss: softplus(-margin_scaled),
        margin_raw: delta,
        margin_scaled,
    }
}

/// Analytic partials of [`dpo_loss`] w.r.t. its four log-probability
/// inputs, in argument order.
pub fn dpo_loss_gradients(
    logp_theta_w: f64,
    logp_ref_w: f64,
    logp_theta_l: f64,
    logp_ref_l: f64,
    beta: f64,
) -> [f64; 4] {
    let delta = (logp_theta_w - logp_ref_w) - (logp_theta_l - logp_ref_l);
    let dl_ddelta = -beta * sigmoid(-beta * delta);
    [dl_ddelta, -dl_ddelta, -dl_ddelta, dl_ddelta]
}

/// Where a run starts: fresh adapters, or (for labeled hysteresis stages)
/// the adapters of a previous stage.
pub enum StartPoint<'a> {
    Fresh,
    Resume(&'a AdapterSet),
}

/// Runs `config.steps` optimizer steps on the adapters only. The base is
/// never touched; reference scores come from the bare base and are cached
/// per dataset item. Deterministic in (base, config, data, start point).
/// Non-finite losses or gradients abort the run (`RunOutcome::Aborted`);
/// hard errors are reserved for unusable configs or data.
pub fn train_run(
    base: &Arc<ParameterSet>,
    config: &RunConfig,
    data: &[PreferencePair],
    start: StartPoint,
) -> Result<RunOutcome, TrainError> {
    use rand::Rng;

    config.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let base_hash = base.content_hash();
    let resume_hash = match &start {
        StartPoint::Fresh => String::new(),
        StartPoint::Resume(set) => set.content_hash(),
    };
    let stream_for = |domain: &str| {
        StreamKey::new(domain)
            .bytes(base_hash.as_bytes())
            .text(&resume_hash)
            .real(config.beta)
            .int(config.seed)
            .real(config.lr)
            .text(config.schedule.tag())
            .into_stream()
    };

    let adapters = match start {
        StartPoint::Fresh => {
            let mut init_stream = stream_for("phaselab.run.adapter_init");
            AdapterSet::init(base.config(), config.adapter.clone(), &mut init_stream)
                .map_err(|e| TrainError::InvalidConfig(e.to_string()))?
        }
        StartPoint::Resume(set) => {
            if set.config() != &config.adapter {
                return Err(TrainError::ResumeMismatch(format!(
                    "adapter config differs: run has {:?}, resume set has {:?}",
                    config.adapter,
                    set.config()
                )));
            }
            set.clone()
        }
    };

    let weights = base.promote();
    let mut masters = adapters.promote();
    let scale = config.adapter.scale();
    let sizes: Vec<usize> = masters
        .iter()
        .flat_map(|(_, _, a, b)| [a.len(), b.len()])
        .collect();
    let mut optimizer = Optimizer::new(config.optimizer, config.lr, &sizes);

    let mut batch_stream = stream_for("phaselab.run.batch");
    let mut dropout_stream = stream_for("phaselab.run.dropout");
    let mut ref_cache: Vec<Option<(f64, f64)>> = vec![None; data.len()];
    let mut trace = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let indices: Vec<usize> = (0..config.batch_size)
            .map(|_| batch_stream.gen_range(0..data.len()))
            .collect();

        let mut graph = Graph::new();
        let base_nodes = mount_base(&mut graph, &weights, false);
        let (branches, leaf_ids) = mount_master_branches(&mut graph, &masters, scale);

        let mut loss_nodes = Vec::with_capacity(indices.len());
        let mut raw_sum = 0.0;
        for &idx in &indices {
            let pair = &data[idx];
            let (lp_ref_w, lp_ref_l) = match ref_cache[idx] {
                Some(v) => v,
                None => {
                    let w = completion_logprob(&weights, None, &pair.prompt, &pair.chosen)?;
                    let l = completion_logprob(&weights, None, &pair.prompt, &pair.rejected)?;
                    ref_cache[idx] = Some((w, l));
                    (w, l)
                }
            };

            let mut score_theta = |completion: &[crate::model::Token],
                                   graph: &mut Graph|
             -> Result<crate::graph::NodeId, TrainError> {
                let seq: Vec<_> = pair.prompt.iter().chain(completion).copied().collect();
                if seq.len() > base.config().context_len {
                    return Err(ScoreError::Overflow {
                        len: seq.len(),
                        context: base.config().context_len,
                    }
                    .into());
                }
                let mut dropout = BranchDropout::Sample {
                    p: config.adapter.dropout,
                    stream: &mut dropout_stream,
                };
                let logits = forward_logits(graph, &base_nodes, &branches, &mut dropout, &seq);
                Ok(graph.log_prob_sum(logits, &completion_picks(&pair.prompt, completion)))
            };

            let lp_tw = score_theta(&pair.chosen, &mut graph)?;
            let lp_tl = score_theta(&pair.rejected, &mut graph)?;

            // Δ built with the same association order as `dpo_loss`
            let dw = graph.add_const(lp_tw, -lp_ref_w);
            let dl = graph.add_const(lp_tl, -lp_ref_l);
            let delta = graph.sub(dw, dl);
            let scaled = graph.scale(delta, config.beta);
            let neg = graph.neg(scaled);
            let loss_i = graph.softplus(neg);
            loss_nodes.push(loss_i);
            raw_sum += graph.scalar(delta);

            debug_assert_eq!(
                graph.scalar(loss_i),
                dpo_loss(
                    graph.scalar(lp_tw),
                    lp_ref_w,
                    graph.scalar(lp_tl),
                    lp_ref_l,
                    config.beta
                )
                .loss
            );
        }

        let loss_node = graph.mean_stack(&loss_nodes);
        let loss = graph.scalar(loss_node);
        if !loss.is_finite() {
            return Ok(RunOutcome::Aborted {
                trace,
                reason: format!("non-finite loss at step {step}: {loss}"),
            });
        }
        let margin_raw = raw_sum / indices.len() as f64;
        let margin_scaled = config.beta * margin_raw;

        let grads = graph.backward(loss_node);
        let mut grad_refs = Vec::with_capacity(sizes.len());
        for (a_id, b_id) in &leaf_ids {
            for id in [a_id, b_id] {
                let g = grads.get(*id);
                if let Some(g) = g {
                    if !g.all_finite() {
                        return Ok(RunOutcome::Aborted {
                            trace,
                            reason: format!("non-finite adapter gradient at step {step}"),
                        });
                    }
                }
                grad_refs.push(g);
            }
        }
        let mut flat: Vec<crate::tensor::Tensor> = masters
            .iter()
            .flat_map(|(_, _, a, b)| [a.clone(), b.clone()])
            .collect();
        optimizer.step(&mut flat, &grad_refs);
        for (i, (_, _, a, b)) in masters.iter_mut().enumerate() {
            *a = flat[2 * i].clone();
            *b = flat[2 * i + 1].clone();
        }

        trace.push(StepRecord {
            step,
            loss,
            margin_raw,
            margin_scaled,
        });
    }

    Ok(RunOutcome::Completed {
        adapters: adapters.from_masters(&masters),
        trace,
    })
}

/// Mean scaled margin over the final `max(1, ⌊0.1·steps⌋)` steps.
pub fn final_margin(trace: &TrainingTrace) -> Result<f64, TrainError> {
    if trace.is_empty() {
        return Err(TrainError::EmptyTrace);
    }
    let window = (trace.len() / 10).max(1);
    let tail = &trace[trace.len() - window..];
    Ok(tail.iter().map(|r| r.margin_scaled).sum::<f64>() / window as f64)
}

/// Mean scaled margin over the first `max(1, ⌊0.1·steps⌋)` steps; the
/// improvement checks compare this against [`final_margin`].
pub fn initial_margin(trace: &TrainingTrace) -> Result<f64, TrainError> {
    if trace.is_empty() {
        return Err(TrainError::EmptyTrace);
    }
    let window = (trace.len() / 10).max(1);
    let head = &trace[..window];
    Ok(head.iter().map(|r| r.margin_scaled).sum::<f64>() / window as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_base, ModelConfig};
    use crate::probes::generate_preference_data;

    #[test]
    fn zero_delta_gives_ln2_loss_and_zero_margins() {
        for beta in [0.001, 0.01, 0.1, 5.0] {
            let t = dpo_loss(-3.0, -3.0, -7.0, -7.0, beta);
            assert!((t.loss - std::f64::consts::LN_2).abs() < 1e-12);
            assert_eq!(t.margin_raw, 0.0);
            assert_eq!(t.margin_scaled, 0.0);
        }
    }

    #[test]
    fn margin_scaled_is_linear_in_beta() {
        let a = dpo_loss(-1.0, -2.0, -5.0, -3.0, 0.01);
        let b = dpo_loss(-1.0, -2.0, -5.0, -3.0, 0.02);
        assert_eq!(b.margin_scaled, 2.0 * a.margin_scaled);
        assert_eq!(a.margin_scaled, 0.01 * a.margin_raw);
    }

    #[test]
    fn antisymmetry_identity_holds_on_grid() {
        // loss(Δ) − loss(−Δ) = −βΔ
        for &delta in &[-3.0, 0.5, 10.0] {
            for &beta in &[0.001, 0.01, 0.1] {
                let plus = dpo_loss(delta, 0.0, 0.0, 0.0, beta).loss;
                let minus = dpo_loss(-delta, 0.0, 0.0, 0.0, beta).loss;
                assert!(
                    ((plus - minus) - (-beta * delta)).abs() < 1e-9,
                    "delta {delta} beta {beta}"
                );
            }
        }
    }

    #[test]
    fn loss_is_finite_up_to_huge_scaled_margins() {
        for &scaled in &[-700.0, -100.0, 0.0, 100.0, 700.0] {
            let t = dpo_loss(scaled, 0.0, 0.0, 0.0, 1.0);
            assert!(t.loss.is_finite(), "scaled {scaled}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let h = 1e-6;
        let x = [-4.2, -3.9, -6.5, -5.1];
        for &beta in &[0.004, 0.05, 0.7] {
            let analytic = dpo_loss_gradients(x[0], x[1], x[2], x[3], beta);
            for i in 0..4 {
                let mut lo = x;
                let mut hi = x;
                lo[i] -= h;
                hi[i] += h;
                let f = |v: [f64; 4]| dpo_loss(v[0], v[1], v[2], v[3], beta).loss;
                let fd = (f(hi) - f(lo)) / (2.0 * h);
                let denom = analytic[i].abs().max(fd.abs()).max(1e-12);
                assert!(
                    (analytic[i] - fd).abs() / denom < 1e-5,
                    "input {i} beta {beta}: {} vs {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn final_margin_windows() {
        let mk = |values: Vec<f64>| -> TrainingTrace {
            values
                .iter()
                .enumerate()
                .map(|(i, &m)| StepRecord {
                    step: i + 1,
                    loss: 0.0,
                    margin_raw: m,
                    margin_scaled: m,
                })
                .collect()
        };
        // constant trace
        assert_eq!(final_margin(&mk(vec![3.25; 50])).unwrap(), 3.25);
        // 200 steps, last 20 alternating 4/6
        let mut vals = vec![0.0; 180];
        for i in 0..20 {
            vals.push(if i % 2 == 0 { 4.0 } else { 6.0 });
        }
        assert_eq!(final_margin(&mk(vals)).unwrap(), 5.0);
        // windowed mean equals a by-hand recomputation
        let vals: Vec<f64> = (0..37).map(|i| (i as f64 * 0.37).sin()).collect();
        let trace = mk(vals.clone());
        let window = 3; // ⌊37/10⌋
        let expect = vals[37 - window..].iter().sum::<f64>() / window as f64;
        assert_eq!(final_margin(&trace).unwrap(), expect);
        assert!(final_margin(&Vec::new()).is_err());
    }

    #[test]
    fn zero_steps_is_rejected() {
        let base = Arc::new(init_base(ModelConfig::default(), 1).unwrap());
        let mut config = RunConfig::canonical(0.01, 1);
        config.steps = 0;
        let data = generate_preference_data(0, 16, Some(0.0));
        assert!(matches!(
            train_run(&base, &config, &data, StartPoint::Fresh),
            Err(TrainError::InvalidConfig(_))
        ));
    }

    #[test]
    fn training_is_deterministic_and_leaves_base_untouched() {
        let base = Arc::new(init_base(ModelConfig::default(), 1).unwrap());
        let before = base.content_hash();
        let mut config = RunConfig::canonical(0.01, 1);
        config.steps = 8;
        let data = generate_preference_data(0, 32, None);
        let (a1, t1) = train_run(&base, &config, &data, StartPoint::Fresh)
            .unwrap()
            .completed()
            .unwrap();
        let (a2, t2) = train_run(&base, &config, &data, StartPoint::Fresh)
            .unwrap()
            .completed()
            .unwrap();
        assert_eq!(a1.content_hash(), a2.content_hash());
        assert_eq!(t1, t2);
        assert_eq!(base.content_hash(), before);
    }

    #[test]
    fn first_step_margin_is_exactly_zero_for_fresh_adapters() {
        // θ = ref at step 1 (B = 0), so Δ of every pair is identically 0
        let base = Arc::new(init_base(ModelConfig::default(), 1).unwrap());
        let mut config = RunConfig::canonical(0.02, 3);
        config.steps = 1;
        let data = generate_preference_data(0, 8, Some(0.0));
        let (_, trace) = train_run(&base, &config, &data, StartPoint::Fresh)
            .unwrap()
            .completed()
            .unwrap();
        assert_eq!(trace[0].margin_raw, 0.0);
        assert_eq!(trace[0].margin_scaled, 0.0);
        assert!((trace[0].loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn training_improves_its_own_margin() {
        let base = Arc::new(init_base(ModelConfig::default(), 1).unwrap());
        let mut config = RunConfig::canonical(0.01, 1);
        config.steps = 120;
        let data = generate_preference_data(0, 64, None);
        let (_, trace) = train_run(&base, &config, &data, StartPoint::Fresh)
            .unwrap()
            .completed()
            .unwrap();
        let first = initial_margin(&trace).unwrap();
        let last = final_margin(&trace).unwrap();
        assert!(last > first, "final {last} !> initial {first}");
    }

    #[test]
    fn resuming_from_prior_adapters_continues_cleanly() {
        let base = Arc::new(init_base(ModelConfig::default(), 1).unwrap());
        let mut config = RunConfig::canonical(0.02, 2);
        config.steps = 4;
        let data = generate_preference_data(0, 16, None);
        let (stage1, _) = train_run(&base, &config, &data, StartPoint::Fresh)
            .unwrap()
            .completed()
            .unwrap();
        let mut config2 = config.clone();
        config2.beta = 0.01;
        let (stage2, trace2) = train_run(&base, &config2, &data, StartPoint::Resume(&stage1))
            .unwrap()
            .completed()
            .unwrap();
        assert_eq!(trace2.len(), 4);
        assert_ne!(stage2.content_hash(), stage1.content_hash());
        // mismatched adapter shape is a hard error
        let mut bad = config2.clone();
        bad.adapter.rank = 4;
        assert!(matches!(
            train_run(&base, &bad, &data, StartPoint::Resume(&stage1)),
            Err(TrainError::ResumeMismatch(_))
        ));
    }
}
