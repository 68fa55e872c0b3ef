//! Sequence scoring: the trainable policy θ (base + adapters) versus its
//! frozen reference (the bare base).
//!
//! `completion_logprob` returns the teacher-forced sum
//! `Σ_t log p(completion_t | prompt, completion_<t)`; length normalization
//! happens in the probe suite.

use std::sync::Arc;

use thiserror::Error;

use crate::adapter::AdapterSet;
use crate::graph::{Graph, NodeId};
use crate::model::{
    forward_logits, mount_base, AdapterBranch, BaseWeights, BranchDropout, ModelConfig,
    ParameterSet, Token,
};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScoreError {
    #[error("sequence of length {len} exceeds context {context}")]
    Overflow { len: usize, context: usize },
    #[error("completion is empty")]
    EmptyCompletion,
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { token: Token, vocab: usize },
}

fn check_sequence(
    config: &ModelConfig,
    prompt: &[Token],
    completion: &[Token],
) -> Result<(), ScoreError> {
    if completion.is_empty() {
        return Err(ScoreError::EmptyCompletion);
    }
    if prompt.is_empty() {
        return Err(ScoreError::EmptyPrompt);
    }
    let len = prompt.len() + completion.len();
    if len > config.context_len {
        return Err(ScoreError::Overflow {
            len,
            context: config.context_len,
        });
    }
    for &t in prompt.iter().chain(completion) {
        if t as usize >= config.vocab_size {
            return Err(ScoreError::TokenOutOfRange {
                token: t,
                vocab: config.vocab_size,
            });
        }
    }
    Ok(())
}

/// Builds the scoring picks for teacher forcing: position `|prompt|-1+t`
/// predicts `completion[t]`.
pub(crate) fn completion_picks(prompt: &[Token], completion: &[Token]) -> Vec<(usize, usize)> {
    completion
        .iter()
        .enumerate()
        .map(|(t, &tok)| (prompt.len() - 1 + t, tok as usize))
        .collect()
}

/// Scores a completion under the given weights (adapters optional,
/// dropout disabled). Always ≤ 0 up to rounding, and finite.
pub fn completion_logprob(
    weights: &BaseWeights,
    adapters: Option<&AdapterSet>,
    prompt: &[Token],
    completion: &[Token],
) -> Result<f64, ScoreError> {
    check_sequence(weights.config(), prompt, completion)?;
    let mut graph = Graph::new();
    let base = mount_base(&mut graph, weights, false);
    let branches = match adapters {
        Some(set) => mount_adapter_branches(&mut graph, set, false),
        None => Vec::new(),
    };
    let seq: Vec<Token> = prompt.iter().chain(completion).copied().collect();
    let logits = forward_logits(&mut graph, &base, &branches, &mut BranchDropout::Off, &seq);
    let picks = completion_picks(prompt, completion);
    let lp = graph.log_prob_sum(logits, &picks);
    Ok(graph.scalar(lp))
}

/// Mounts every (A, B) pair of an adapter set on a graph.
pub(crate) fn mount_adapter_branches(
    graph: &mut Graph,
    set: &AdapterSet,
    trainable: bool,
) -> Vec<AdapterBranch> {
    let scale = set.config().scale();
    set.pairs()
        .iter()
        .map(|p| AdapterBranch {
            layer: p.layer,
            slot: p.slot,
            a: graph.leaf(p.a.to_tensor(), trainable),
            b: graph.leaf(p.b.to_tensor(), trainable),
            scale,
        })
        .collect()
}

/// Mounts pre-promoted f64 master adapters (the training path).
pub(crate) fn mount_master_branches(
    graph: &mut Graph,
    masters: &[(usize, crate::model::AdapterSlot, crate::tensor::Tensor, crate::tensor::Tensor)],
    scale: f64,
) -> (Vec<AdapterBranch>, Vec<(NodeId, NodeId)>) {
    let mut leaf_ids = Vec::new();
    let branches = masters
        .iter()
        .map(|(layer, slot, a, b)| {
            let a_id = graph.leaf(a.clone(), true);
            let b_id = graph.leaf(b.clone(), true);
            leaf_ids.push((a_id, b_id));
            AdapterBranch {
                layer: *layer,
                slot: *slot,
                a: a_id,
                b: b_id,
                scale,
            }
        })
        .collect();
    (branches, leaf_ids)
}

/// A trainable policy and its frozen reference, sharing base bytes.
pub struct PolicyPair {
    base: Arc<ParameterSet>,
    base_hash: String,
    weights: Arc<BaseWeights>,
    pub adapters: AdapterSet,
}

impl PolicyPair {
    pub fn new(base: Arc<ParameterSet>, adapters: AdapterSet) -> Self {
        let base_hash = base.content_hash();
        let weights = Arc::new(base.promote());
        Self {
            base,
            base_hash,
            weights,
            adapters,
        }
    }

    pub fn base(&self) -> &ParameterSet {
        &self.base
    }

    pub fn base_hash(&self) -> &str {
        &self.base_hash
    }

    pub fn weights(&self) -> &Arc<BaseWeights> {
        &self.weights
    }

    /// θ: base plus adapters, dropout off.
    pub fn theta_logprob(&self, prompt: &[Token], completion: &[Token]) -> Result<f64, ScoreError> {
        completion_logprob(&self.weights, Some(&self.adapters), prompt, completion)
    }

    /// Reference: the untouched base.
    pub fn reference_logprob(
        &self,
        prompt: &[Token],
        completion: &[Token],
    ) -> Result<f64, ScoreError> {
        completion_logprob(&self.weights, None, prompt, completion)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::AdapterConfig;
    use crate::model::init_base;
    use crate::rng::StreamKey;
    use crate::tensor::NamedTensor;

    fn base() -> Arc<ParameterSet> {
        Arc::new(init_base(ModelConfig::default(), 1).unwrap())
    }

    #[test]
    fn uniform_logits_give_uniform_logprob() {
        // all-zero weights → all logits equal → p = 1/vocab per step
        let cfg = ModelConfig::default();
        let tensors = cfg
            .tensor_layout()
            .into_iter()
            .map(|(name, shape)| NamedTensor::zeros(&name, &shape))
            .collect();
        let params = ParameterSet::new(cfg, tensors);
        let w = params.promote();
        let lp = completion_logprob(&w, None, &[1, 2], &[3, 4, 5]).unwrap();
        let expected = 3.0 * (1.0f64 / 64.0).ln();
        assert!((lp - expected).abs() < 1e-9, "{lp} vs {expected}");
    }

    #[test]
    fn vocab_of_one_forces_probability_one() {
        let cfg = ModelConfig {
            vocab_size: 1,
            n_heads: 1,
            d_model: 4,
            n_layers: 1,
            context_len: 8,
        };
        let params = init_base(cfg, 5).unwrap();
        let w = params.promote();
        let lp = completion_logprob(&w, None, &[0], &[0, 0, 0]).unwrap();
        assert_eq!(lp, 0.0);
    }

    #[test]
    fn logprob_is_nonpositive_and_finite() {
        let params = base();
        let w = params.promote();
        let lp = completion_logprob(&w, None, &[7, 8, 9], &[10, 11]).unwrap();
        assert!(lp <= 0.0);
        assert!(lp.is_finite());
    }

    #[test]
    fn errors_on_bad_sequences() {
        let params = base();
        let w = params.promote();
        assert_eq!(
            completion_logprob(&w, None, &[1], &[]),
            Err(ScoreError::EmptyCompletion)
        );
        assert_eq!(
            completion_logprob(&w, None, &[], &[1]),
            Err(ScoreError::EmptyPrompt)
        );
        let long = vec![1u16; 33];
        assert!(matches!(
            completion_logprob(&w, None, &long[..20], &long[..13]),
            Err(ScoreError::Overflow { len: 33, .. })
        ));
        assert!(matches!(
            completion_logprob(&w, None, &[1], &[64]),
            Err(ScoreError::TokenOutOfRange { token: 64, .. })
        ));
    }

    #[test]
    fn zero_initialized_adapters_score_exactly_like_base() {
        let b = base();
        let mut stream = StreamKey::new("policy.test").into_stream();
        let adapters = AdapterSet::init(b.config(), AdapterConfig::default(), &mut stream).unwrap();
        let pair = PolicyPair::new(b, adapters);
        let prompt = [3u16, 12, 40];
        let completion = [15u16, 1];
        let theta = pair.theta_logprob(&prompt, &completion).unwrap();
        let reference = pair.reference_logprob(&prompt, &completion).unwrap();
        assert_eq!(theta, reference);
    }
}
