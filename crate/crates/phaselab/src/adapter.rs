//! Low-rank adapter pairs.
//!
//! Each adapted projection `W` gains a trainable branch
//! `ΔW = (alpha / rank) · B · A` with `A: [rank, d_in]`, `B: [d_out, rank]`.
//! `B` starts at zero, so a freshly adapted policy scores every sequence
//! exactly like its base model; only the adapters ever receive gradient.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{hex, AdapterSlot, ModelConfig};
use crate::rng::Stream;
use crate::tensor::{NamedTensor, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<AdapterSlot>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            dropout: 0.05,
            targets: vec![AdapterSlot::AttnQ, AdapterSlot::AttnV],
        }
    }
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<(), AdapterError> {
        if self.rank < 1 {
            return Err(AdapterError::InvalidConfig("rank must be >= 1".into()));
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(AdapterError::InvalidConfig("alpha must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AdapterError::InvalidConfig(
                "dropout must lie in [0, 1)".into(),
            ));
        }
        if self.targets.is_empty() {
            return Err(AdapterError::InvalidConfig("no adapter targets".into()));
        }
        let mut seen = self.targets.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.targets.len() {
            return Err(AdapterError::InvalidConfig(
                "duplicate adapter target".into(),
            ));
        }
        Ok(())
    }

    /// Effective branch scale alpha / rank.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One adapted site: the layer, the projection slot, and the (A, B) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub layer: usize,
    pub slot: AdapterSlot,
    pub a: NamedTensor,
    pub b: NamedTensor,
}

/// All adapter weights of one policy, f32 storage like the base.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    config: AdapterConfig,
    pairs: Vec<AdapterPair>,
}

impl AdapterSet {
    /// Fresh adapters: `A ~ N(0, 0.02²)` drawn from `stream` in site order,
    /// `B = 0`.
    pub fn init(
        model: &ModelConfig,
        config: AdapterConfig,
        stream: &mut Stream,
    ) -> Result<Self, AdapterError> {
        use rand::Rng;
        use rand_distr::StandardNormal;
        config.validate()?;
        let mut pairs = Vec::new();
        for layer in 0..model.n_layers {
            for &slot in &config.targets {
                let (d_in, d_out) = slot.dims(model);
                let a_data: Vec<f64> = (0..config.rank * d_in)
                    .map(|_| 0.02 * stream.sample::<f64, _>(StandardNormal))
                    .collect();
                let prefix = format!("adapter.layers.{layer}.{}", slot.tag());
                pairs.push(AdapterPair {
                    layer,
                    slot,
                    a: NamedTensor::from_f64(&format!("{prefix}.a"), &[config.rank, d_in], &a_data),
                    b: NamedTensor::zeros(&format!("{prefix}.b"), &[d_out, config.rank]),
                });
            }
        }
        Ok(Self { config, pairs })
    }

    pub fn from_parts(config: AdapterConfig, pairs: Vec<AdapterPair>) -> Self {
        Self { config, pairs }
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn pairs(&self) -> &[AdapterPair] {
        &self.pairs
    }

    pub fn is_zero_initialized(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.b.data.iter().all(|&v| v == 0.0))
    }

    pub fn all_finite(&self) -> bool {
        self.pairs
            .iter()
            .all(|p| p.a.all_finite() && p.b.all_finite())
    }

    /// Hex SHA-256 over config and tensors; used to key resumed runs.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"phaselab.adapters.v1");
        h.update((self.config.rank as u64).to_le_bytes());
        h.update(self.config.alpha.to_bits().to_le_bytes());
        h.update(self.config.dropout.to_bits().to_le_bytes());
        for t in &self.config.targets {
            h.update(t.tag().as_bytes());
        }
        for p in &self.pairs {
            for t in [&p.a, &p.b] {
                h.update((t.name.len() as u64).to_le_bytes());
                h.update(t.name.as_bytes());
                for &d in &t.shape {
                    h.update((d as u64).to_le_bytes());
                }
                for &v in &t.data {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// Promotes to f64 master weights for a training run.
    pub fn promote(&self) -> Vec<(usize, AdapterSlot, Tensor, Tensor)> {
        self.pairs
            .iter()
            .map(|p| (p.layer, p.slot, p.a.to_tensor(), p.b.to_tensor()))
            .collect()
    }

    /// Rounds f64 masters back to the f32 storage representation.
    pub fn from_masters(
        &self,
        masters: &[(usize, AdapterSlot, Tensor, Tensor)],
    ) -> Self {
        let pairs = self
            .pairs
            .iter()
            .zip(masters)
            .map(|(p, (layer, slot, a, b))| {
                debug_assert_eq!((p.layer, p.slot), (*layer, *slot));
                AdapterPair {
                    layer: *layer,
                    slot: *slot,
                    a: NamedTensor::from_f64(&p.a.name, &p.a.shape, a.data()),
                    b: NamedTensor::from_f64(&p.b.name, &p.b.shape, b.data()),
                }
            })
            .collect();
        Self {
            config: self.config.clone(),
            pairs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamKey;

    fn stream() -> Stream {
        StreamKey::new("adapter.test").into_stream()
    }

    #[test]
    fn fresh_adapters_have_zero_b() {
        let set = AdapterSet::init(&ModelConfig::default(), AdapterConfig::default(), &mut stream())
            .unwrap();
        assert!(set.is_zero_initialized());
        assert_eq!(set.pairs().len(), 4); // 2 layers × {q, v}
        // A is random, not zero
        assert!(set.pairs()[0].a.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shapes_follow_slot_dims() {
        let cfg = AdapterConfig {
            targets: AdapterSlot::all().to_vec(),
            ..AdapterConfig::default()
        };
        let model = ModelConfig::default();
        let set = AdapterSet::init(&model, cfg, &mut stream()).unwrap();
        for p in set.pairs() {
            let (d_in, d_out) = p.slot.dims(&model);
            assert_eq!(p.a.shape, vec![8, d_in]);
            assert_eq!(p.b.shape, vec![d_out, 8]);
        }
    }

    #[test]
    fn config_validation() {
        assert!(AdapterConfig {
            rank: 0,
            ..AdapterConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdapterConfig {
            dropout: 1.0,
            ..AdapterConfig::default()
        }
        .validate()
        .is_err());
        assert!(AdapterConfig {
            targets: vec![AdapterSlot::AttnQ, AdapterSlot::AttnQ],
            ..AdapterConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn master_round_trip_is_exact_for_f32_values() {
        let set = AdapterSet::init(&ModelConfig::default(), AdapterConfig::default(), &mut stream())
            .unwrap();
        let masters = set.promote();
        let back = set.from_masters(&masters);
        assert_eq!(set, back);
    }
}
