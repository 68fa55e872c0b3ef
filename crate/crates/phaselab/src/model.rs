//! The micro language model: a 2-layer pre-norm causal transformer small
//! enough that a full β sweep runs in minutes, yet expressive enough to
//! learn the micro-language the probes are written in.
//!
//! Weights live in a [`ParameterSet`] whose content hash identifies the
//! frozen base checkpoint that every sweep point starts from.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::rng::{Stream, StreamKey};
use crate::tensor::{NamedTensor, Tensor};

pub type Token = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            context_len: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 1
            || self.context_len < 1
            || self.d_model < 1
            || self.n_layers < 1
            || self.n_heads < 1
        {
            return Err(ModelError::InvalidConfig(
                "all model dimensions must be >= 1".into(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        4 * self.d_model
    }

    /// Canonical (name, shape) list. Parameter order is fixed by this
    /// function: it defines PRNG draw order, checkpoint layout, and the
    /// content hash.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![
            ("embed.tok".to_string(), vec![self.vocab_size, d]),
            ("embed.pos".to_string(), vec![self.context_len, d]),
        ];
        for l in 0..self.n_layers {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn.ln.gain"), vec![d]));
            out.push((format!("{p}.attn.ln.bias"), vec![d]));
            out.push((format!("{p}.attn.wq"), vec![d, d]));
            out.push((format!("{p}.attn.wk"), vec![d, d]));
            out.push((format!("{p}.attn.wv"), vec![d, d]));
            out.push((format!("{p}.attn.wo"), vec![d, d]));
            out.push((format!("{p}.mlp.ln.gain"), vec![d]));
            out.push((format!("{p}.mlp.ln.bias"), vec![d]));
            out.push((format!("{p}.mlp.up"), vec![self.mlp_hidden(), d]));
            out.push((format!("{p}.mlp.down"), vec![d, self.mlp_hidden()]));
        }
        out.push(("final.ln.gain".to_string(), vec![d]));
        out.push(("final.ln.bias".to_string(), vec![d]));
        out.push(("out.w".to_string(), vec![self.vocab_size, d]));
        out
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at pretraining step {step}: {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("non-finite gradient in `{tensor}` at pretraining step {step}")]
    NonFiniteGrad { step: usize, tensor: String },
    #[error("corpus sequence of length {len} exceeds context {context}")]
    SequenceTooLong { len: usize, context: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// The full weight set of one model, in canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    config: ModelConfig,
    tensors: Vec<NamedTensor>,
}

impl ParameterSet {
    pub fn new(config: ModelConfig, tensors: Vec<NamedTensor>) -> Self {
        debug_assert_eq!(
            tensors
                .iter()
                .map(|t| (t.name.clone(), t.shape.clone()))
                .collect::<Vec<_>>(),
            config.tensor_layout()
        );
        Self { config, tensors }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> &NamedTensor {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.all_finite())
    }

    /// Hex SHA-256 over the config and every tensor's name, shape, and
    /// little-endian f32 payload. Stable across save/load and platforms.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"phaselab.params.v1");
        for v in [
            self.config.vocab_size,
            self.config.context_len,
            self.config.d_model,
            self.config.n_layers,
            self.config.n_heads,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for t in &self.tensors {
            h.update((t.name.len() as u64).to_le_bytes());
            h.update(t.name.as_bytes());
            h.update((t.shape.len() as u64).to_le_bytes());
            for &d in &t.shape {
                h.update((d as u64).to_le_bytes());
            }
            for &v in &t.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Promotes all tensors to f64 once; forwards borrow from this.
    pub fn promote(&self) -> BaseWeights {
        BaseWeights {
            config: self.config,
            tensors: self.tensors.iter().map(|t| t.to_tensor()).collect(),
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// f64 copies of the base tensors, in canonical order.
pub struct BaseWeights {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

impl BaseWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }
}

/// Deterministic fresh weights: every tensor drawn in canonical order from
/// one stream keyed by (config, seed). Norm gains start at 1, biases at 0,
/// matrices at N(0, 0.02²) and the position table at N(0, 0.01²).
pub fn init_base(config: ModelConfig, seed: i64) -> Result<ParameterSet, ModelError> {
    config.validate()?;
    let mut stream = StreamKey::new("phaselab.init")
        .int(config.vocab_size as i64)
        .int(config.context_len as i64)
        .int(config.d_model as i64)
        .int(config.n_layers as i64)
        .int(config.n_heads as i64)
        .int(seed)
        .into_stream();

    let tensors = config
        .tensor_layout()
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("ln.gain") {
                vec![1.0; n]
            } else if name.ends_with("ln.bias") {
                vec![0.0; n]
            } else {
                let std = if name == "embed.pos" { 0.01 } else { 0.02 };
                (0..n).map(|_| std * normal(&mut stream)).collect()
            };
            NamedTensor::from_f64(&name, &shape, &data)
        })
        .collect();
    Ok(ParameterSet::new(config, tensors))
}

fn normal(stream: &mut Stream) -> f64 {
    use rand::Rng;
    use rand_distr::StandardNormal;
    stream.sample::<f64, _>(StandardNormal)
}

/// Graph handles for the mounted base weights.
pub struct BaseNodes {
    pub config: ModelConfig,
    pub ids: Vec<NodeId>,
}

impl BaseNodes {
    fn at(&self, layout_index: usize) -> NodeId {
        self.ids[layout_index]
    }
}

// Layout indices relative to the per-layer block start.
const L_ATTN_LN_GAIN: usize = 0;
const L_ATTN_LN_BIAS: usize = 1;
const L_WQ: usize = 2;
const L_WK: usize = 3;
const L_WV: usize = 4;
const L_WO: usize = 5;
const L_MLP_LN_GAIN: usize = 6;
const L_MLP_LN_BIAS: usize = 7;
const L_UP: usize = 8;
const L_DOWN: usize = 9;
const LAYER_BLOCK: usize = 10;

fn layer_base(l: usize) -> usize {
    2 + l * LAYER_BLOCK
}

/// Mounts the base weights on a graph. `trainable` is true only during
/// pretraining; adapter-era forwards freeze the base.
pub fn mount_base(graph: &mut Graph, weights: &BaseWeights, trainable: bool) -> BaseNodes {
    let ids = weights
        .tensors
        .iter()
        .map(|t| graph.leaf(t.clone(), trainable))
        .collect();
    BaseNodes {
        config: weights.config,
        ids,
    }
}

/// One low-rank branch mounted on the graph: `delta = scale · (x·Aᵀ)·Bᵀ`.
pub struct AdapterBranch {
    pub layer: usize,
    pub slot: AdapterSlot,
    pub a: NodeId,
    pub b: NodeId,
    pub scale: f64,
}

/// Which projection of a layer an adapter branch attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSlot {
    AttnQ,
    AttnV,
    MlpUp,
    MlpDown,
}

impl AdapterSlot {
    pub fn all() -> [AdapterSlot; 4] {
        [
            AdapterSlot::AttnQ,
            AdapterSlot::AttnV,
            AdapterSlot::MlpUp,
            AdapterSlot::MlpDown,
        ]
    }

    pub fn tag(&self) -> &'static str {
        match self {
            AdapterSlot::AttnQ => "attn_q",
            AdapterSlot::AttnV => "attn_v",
            AdapterSlot::MlpUp => "mlp_up",
            AdapterSlot::MlpDown => "mlp_down",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::all().into_iter().find(|s| s.tag() == tag)
    }

    /// (d_in, d_out) of the adapted projection.
    pub fn dims(&self, config: &ModelConfig) -> (usize, usize) {
        let d = config.d_model;
        match self {
            AdapterSlot::AttnQ | AdapterSlot::AttnV => (d, d),
            AdapterSlot::MlpUp => (d, config.mlp_hidden()),
            AdapterSlot::MlpDown => (config.mlp_hidden(), d),
        }
    }
}

/// Per-forward dropout configuration for the adapter branches.
pub enum BranchDropout<'a> {
    /// Evaluation / dropout-disabled forward.
    Off,
    /// Training forward: masks drawn from the run's dropout stream in
    /// construction order, keep probability `1 - p`, kept entries scaled
    /// by `1/(1 - p)`.
    Sample { p: f64, stream: &'a mut Stream },
}

/// Builds the logits `[len, vocab]` for one token sequence. Adapter
/// branches (if any) ride on top of the frozen projections they target.
pub fn forward_logits(
    graph: &mut Graph,
    base: &BaseNodes,
    adapters: &[AdapterBranch],
    dropout: &mut BranchDropout,
    tokens: &[Token],
) -> NodeId {
    let cfg = &base.config;
    debug_assert!(tokens.len() <= cfg.context_len);
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..tokens.len()).collect();

    let tok = graph.gather(base.at(0), &ids);
    let pos = graph.gather(base.at(1), &positions);
    let mut x = graph.add(tok, pos);

    for l in 0..cfg.n_layers {
        let lb = layer_base(l);
        let h = graph.layer_norm(x, base.at(lb + L_ATTN_LN_GAIN), base.at(lb + L_ATTN_LN_BIAS));
        let q = adapted_linear(graph, h, base.at(lb + L_WQ), adapters, l, AdapterSlot::AttnQ, dropout);
        let k = graph.linear(h, base.at(lb + L_WK));
        let v = adapted_linear(graph, h, base.at(lb + L_WV), adapters, l, AdapterSlot::AttnV, dropout);
        let attn = graph.causal_attention(q, k, v, cfg.n_heads);
        let o = graph.linear(attn, base.at(lb + L_WO));
        x = graph.add(x, o);

        let h2 = graph.layer_norm(x, base.at(lb + L_MLP_LN_GAIN), base.at(lb + L_MLP_LN_BIAS));
        let u = adapted_linear(graph, h2, base.at(lb + L_UP), adapters, l, AdapterSlot::MlpUp, dropout);
        let u = graph.gelu(u);
        let m = adapted_linear(graph, u, base.at(lb + L_DOWN), adapters, l, AdapterSlot::MlpDown, dropout);
        x = graph.add(x, m);
    }

    let nf = graph.layer_norm(
        x,
        base.at(2 + cfg.n_layers * LAYER_BLOCK),
        base.at(3 + cfg.n_layers * LAYER_BLOCK),
    );
    graph.linear(nf, base.ids[base.ids.len() - 1])
}

fn adapted_linear(
    graph: &mut Graph,
    x: NodeId,
    w: NodeId,
    adapters: &[AdapterBranch],
    layer: usize,
    slot: AdapterSlot,
    dropout: &mut BranchDropout,
) -> NodeId {
    let y = graph.linear(x, w);
    let branch = adapters
        .iter()
        .find(|br| br.layer == layer && br.slot == slot);
    let Some(br) = branch else { return y };

    let xin = match dropout {
        BranchDropout::Off => x,
        BranchDropout::Sample { p, stream } => {
            if *p > 0.0 {
                let shape = graph.value(x).shape().to_vec();
                let mask = draw_dropout_mask(&shape, *p, stream);
                graph.mask(x, mask)
            } else {
                x
            }
        }
    };
    let down = graph.linear(xin, br.a); // [t, r]
    let up = graph.linear(down, br.b); // [t, d_out]
    let delta = graph.scale(up, br.scale);
    graph.add(y, delta)
}

fn draw_dropout_mask(shape: &[usize], p: f64, stream: &mut Stream) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let data = (0..n)
        .map(|_| {
            if stream.gen::<f64>() < p {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

const PRETRAIN_BATCH: usize = 8;

/// Trains every base tensor on next-token prediction over the corpus and
/// returns the frozen checkpoint the sweeps start from. Deterministic in
/// (params, corpus, steps, lr, seed); zero steps returns the input
/// unchanged.
pub fn pretrain_base(
    params: &ParameterSet,
    corpus: &[Vec<Token>],
    steps: usize,
    lr: f64,
    seed: i64,
) -> Result<ParameterSet, ModelError> {
    use crate::optim::{Optimizer, OptimizerKind};
    use rand::Rng;

    if steps == 0 {
        return Ok(params.clone());
    }
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let cfg = *params.config();
    for seq in corpus {
        if seq.len() > cfg.context_len {
            return Err(ModelError::SequenceTooLong {
                len: seq.len(),
                context: cfg.context_len,
            });
        }
    }
    let usable: Vec<&Vec<Token>> = corpus.iter().filter(|s| s.len() >= 2).collect();
    if usable.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }

    let mut stream = StreamKey::new("phaselab.pretrain")
        .bytes(params.content_hash().as_bytes())
        .int(steps as i64)
        .real(lr)
        .int(seed)
        .into_stream();

    let mut masters: Vec<Tensor> = params.tensors().iter().map(|t| t.to_tensor()).collect();
    let sizes: Vec<usize> = masters.iter().map(|t| t.len()).collect();
    let mut opt = Optimizer::new(OptimizerKind::AdamW, lr, &sizes);

    for step in 1..=steps {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = masters
            .iter()
            .map(|t| graph.leaf(t.clone(), true))
            .collect();
        let base = BaseNodes { config: cfg, ids };

        let mut losses = Vec::with_capacity(PRETRAIN_BATCH);
        for _ in 0..PRETRAIN_BATCH {
            let seq = usable[stream.gen_range(0..usable.len())];
            let logits =
                forward_logits(&mut graph, &base, &[], &mut BranchDropout::Off, seq);
            let picks: Vec<(usize, usize)> = seq[1..]
                .iter()
                .enumerate()
                .map(|(i, &t)| (i, t as usize))
                .collect();
            let lp = graph.log_prob_sum(logits, &picks);
            losses.push(graph.scale(lp, -1.0 / picks.len() as f64));
        }
        let loss = graph.mean_stack(&losses);
        let loss_val = graph.scalar(loss);
        if !loss_val.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                step,
                loss: loss_val,
            });
        }
        let grads = graph.backward(loss);
        let layout = cfg.tensor_layout();
        let mut grad_refs: Vec<Option<&Tensor>> = Vec::with_capacity(masters.len());
        for (i, id) in base.ids.iter().enumerate() {
            let g = grads.get(*id);
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(ModelError::NonFiniteGrad {
                        step,
                        tensor: layout[i].0.clone(),
                    });
                }
            }
            grad_refs.push(g);
        }
        opt.step(&mut masters, &grad_refs);
    }

    let tensors = params
        .tensors()
        .iter()
        .zip(&masters)
        .map(|(t, m)| NamedTensor::from_f64(&t.name, &t.shape, m.data()))
        .collect();
    Ok(ParameterSet::new(cfg, tensors))
}

/// Mean per-token next-token cross-entropy over a corpus slice (natural
/// log), dropout off, adapters off. Used to verify pretraining progress.
pub fn corpus_cross_entropy(weights: &BaseWeights, corpus: &[Vec<Token>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for seq in corpus.iter().filter(|s| s.len() >= 2) {
        let mut graph = Graph::new();
        let base = mount_base(&mut graph, weights, false);
        let logits = forward_logits(&mut graph, &base, &[], &mut BranchDropout::Off, seq);
        let picks: Vec<(usize, usize)> = seq[1..]
            .iter()
            .enumerate()
            .map(|(i, &t)| (i, t as usize))
            .collect();
        let lp = graph.log_prob_sum(logits, &picks);
        total -= graph.scalar(lp);
        count += picks.len();
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_base(ModelConfig::default(), 1).unwrap();
        let b = init_base(ModelConfig::default(), 1).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
        let c = init_base(ModelConfig::default(), 2).unwrap();
        assert_ne!(a.content_hash(), c.content_hash());
    }

    #[test]
    fn layout_matches_config_arithmetic() {
        // independently enumerate expected shapes from the config
        let cfg = ModelConfig {
            vocab_size: 64,
            context_len: 32,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
        };
        let params = init_base(cfg, 7).unwrap();
        let d = 32;
        let mut expected: Vec<(String, Vec<usize>)> = vec![
            ("embed.tok".into(), vec![64, d]),
            ("embed.pos".into(), vec![32, d]),
        ];
        for l in 0..2 {
            expected.push((format!("layers.{l}.attn.ln.gain"), vec![d]));
            expected.push((format!("layers.{l}.attn.ln.bias"), vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                expected.push((format!("layers.{l}.attn.{w}"), vec![d, d]));
            }
            expected.push((format!("layers.{l}.mlp.ln.gain"), vec![d]));
            expected.push((format!("layers.{l}.mlp.ln.bias"), vec![d]));
            expected.push((format!("layers.{l}.mlp.up"), vec![4 * d, d]));
            expected.push((format!("layers.{l}.mlp.down"), vec![d, 4 * d]));
        }
        expected.push(("final.ln.gain".into(), vec![d]));
        expected.push(("final.ln.bias".into(), vec![d]));
        expected.push(("out.w".into(), vec![64, d]));

        let got: Vec<(String, Vec<usize>)> = params
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = ModelConfig {
            d_model: 30,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(init_base(cfg, 1).is_err());
        let cfg = ModelConfig {
            n_layers: 0,
            ..ModelConfig::default()
        };
        assert!(init_base(cfg, 1).is_err());
    }

    #[test]
    fn forward_shape_is_len_by_vocab() {
        let params = init_base(ModelConfig::default(), 3).unwrap();
        let w = params.promote();
        let mut g = Graph::new();
        let base = mount_base(&mut g, &w, false);
        let logits = forward_logits(&mut g, &base, &[], &mut BranchDropout::Off, &[1, 5, 9]);
        assert_eq!(g.value(logits).shape(), &[3, 64]);
        assert!(g.value(logits).all_finite());
    }

    #[test]
    fn pretrain_zero_steps_is_identity() {
        let params = init_base(ModelConfig::default(), 1).unwrap();
        let corpus = vec![vec![1u16, 2, 3], vec![4, 5, 6, 7]];
        let out = pretrain_base(&params, &corpus, 0, 1e-3, 1).unwrap();
        assert_eq!(out.content_hash(), params.content_hash());
    }

    #[test]
    fn pretrain_is_deterministic() {
        let params = init_base(ModelConfig::default(), 1).unwrap();
        let corpus = vec![vec![1u16, 2, 3], vec![4, 5, 6, 7], vec![8, 9]];
        let a = pretrain_base(&params, &corpus, 5, 1e-3, 9).unwrap();
        let b = pretrain_base(&params, &corpus, 5, 1e-3, 9).unwrap();
        assert_eq!(a.content_hash(), b.content_hash());
    }

    #[test]
    fn pretrain_lowers_cross_entropy() {
        let params = init_base(ModelConfig::default(), 1).unwrap();
        // a tiny repetitive corpus is enough to verify learning happens
        let corpus: Vec<Vec<Token>> = (0..16)
            .map(|i| vec![(i % 8) as Token, ((i + 1) % 8) as Token, ((i + 2) % 8) as Token])
            .collect();
        let before = corpus_cross_entropy(&params.promote(), &corpus);
        let trained = pretrain_base(&params, &corpus, 60, 3e-3, 1).unwrap();
        let after = corpus_cross_entropy(&trained.promote(), &corpus);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn pretrain_rejects_oversized_sequences() {
        let params = init_base(ModelConfig::default(), 1).unwrap();
        let corpus = vec![vec![0u16; 40]];
        assert!(matches!(
            pretrain_base(&params, &corpus, 1, 1e-3, 1),
            Err(ModelError::SequenceTooLong { len: 40, .. })
        ));
    }
}
