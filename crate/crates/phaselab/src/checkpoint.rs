//! Bit-exact binary checkpoints.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic        6 bytes  "PHLB01"
//! version      u32      (currently 1)
//! config       5 × u32  vocab, context, d_model, n_layers, n_heads
//! adapters?    u8 flag; if 1: rank u32, alpha f64, dropout f64,
//!                        n_targets u8, target tag bytes
//! n_tensors    u32
//! directory    per tensor: name (u16 len + utf8), ndim u8, dims u32…,
//!                          offset u64, len u64   (offsets into payload)
//! payload_len  u64
//! payload      f32 little-endian, concatenated
//! sha256       32 bytes over everything above
//! ```
//!
//! Loading is strict: bad magic, unknown version, truncation, and digest
//! mismatch are distinct errors, and every length is validated before
//! allocation so arbitrary bytes cannot panic or exhaust memory.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::adapter::{AdapterConfig, AdapterPair, AdapterSet};
use crate::model::{AdapterSlot, ModelConfig, ParameterSet};
use crate::tensor::NamedTensor;

pub const MAGIC: &[u8; 6] = b"PHLB01";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: {0}")]
    Truncated(&'static str),
    #[error("content hash mismatch (corrupted checkpoint)")]
    HashMismatch,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("refusing to save non-finite tensors")]
    NonFinite,
}

/// Serializes the base weights and optional adapters.
pub fn save_checkpoint(
    params: &ParameterSet,
    adapters: Option<&AdapterSet>,
) -> Result<Vec<u8>, CheckpointError> {
    if !params.all_finite() || adapters.is_some_and(|a| !a.all_finite()) {
        return Err(CheckpointError::NonFinite);
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = params.config();
    for v in [
        cfg.vocab_size,
        cfg.context_len,
        cfg.d_model,
        cfg.n_layers,
        cfg.n_heads,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }

    match adapters {
        None => out.push(0),
        Some(set) => {
            out.push(1);
            let ac = set.config();
            out.extend_from_slice(&(ac.rank as u32).to_le_bytes());
            out.extend_from_slice(&ac.alpha.to_le_bytes());
            out.extend_from_slice(&ac.dropout.to_le_bytes());
            out.push(ac.targets.len() as u8);
            for t in &ac.targets {
                out.push(slot_code(*t));
            }
        }
    }

    let mut tensors: Vec<&NamedTensor> = params.tensors().iter().collect();
    if let Some(set) = adapters {
        for p in set.pairs() {
            tensors.push(&p.a);
            tensors.push(&p.b);
        }
    }

    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset: u64 = 0;
    for t in &tensors {
        out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.shape.len() as u8);
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let len = (t.data.len() * 4) as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        offset += len;
    }
    out.extend_from_slice(&offset.to_le_bytes());
    for t in &tensors {
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn slot_code(slot: AdapterSlot) -> u8 {
    match slot {
        AdapterSlot::AttnQ => 0,
        AdapterSlot::AttnV => 1,
        AdapterSlot::MlpUp => 2,
        AdapterSlot::MlpDown => 3,
    }
}

fn slot_from_code(code: u8) -> Option<AdapterSlot> {
    match code {
        0 => Some(AdapterSlot::AttnQ),
        1 => Some(AdapterSlot::AttnV),
        2 => Some(AdapterSlot::MlpUp),
        3 => Some(AdapterSlot::MlpDown),
        _ => None,
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.buf.len() - self.pos < n {
            return Err(CheckpointError::Truncated(what));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes back into weights (and adapters when present).
pub fn load_checkpoint(
    bytes: &[u8],
) -> Result<(ParameterSet, Option<AdapterSet>), CheckpointError> {
    if bytes.len() < 32 {
        return Err(CheckpointError::Truncated("digest"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        // distinguish "not ours at all" from corruption
        if body.len() < 6 || &body[..6] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        return Err(CheckpointError::HashMismatch);
    }

    let mut r = Reader { buf: body, pos: 0 };
    if r.take(6, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let config = ModelConfig {
        vocab_size: r.u32("config")? as usize,
        context_len: r.u32("config")? as usize,
        d_model: r.u32("config")? as usize,
        n_layers: r.u32("config")? as usize,
        n_heads: r.u32("config")? as usize,
    };
    config
        .validate()
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;

    let adapter_config = match r.u8("adapter flag")? {
        0 => None,
        1 => {
            let rank = r.u32("adapter rank")? as usize;
            let alpha = r.f64("adapter alpha")?;
            let dropout = r.f64("adapter dropout")?;
            let n = r.u8("adapter targets")? as usize;
            let mut targets = Vec::with_capacity(n);
            for _ in 0..n {
                let code = r.u8("adapter target")?;
                targets.push(slot_from_code(code).ok_or_else(|| {
                    CheckpointError::Malformed(format!("unknown adapter target code {code}"))
                })?);
            }
            let ac = AdapterConfig {
                rank,
                alpha,
                dropout,
                targets,
            };
            ac.validate()
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            Some(ac)
        }
        other => {
            return Err(CheckpointError::Malformed(format!(
                "bad adapter flag {other}"
            )))
        }
    };

    let n_tensors = r.u32("tensor count")? as usize;
    // a directory entry is at least 20 bytes; bound n_tensors by what fits
    if n_tensors > body.len() / 20 {
        return Err(CheckpointError::Malformed("tensor count too large".into()));
    }
    let mut dir = Vec::with_capacity(n_tensors);
    let mut expect_offset: u64 = 0;
    for _ in 0..n_tensors {
        let name_len = r.u16("tensor name len")? as usize;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| CheckpointError::Malformed("tensor name not utf-8".into()))?
            .to_string();
        let ndim = r.u8("tensor ndim")? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Malformed("tensor rank too large".into()));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dim")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed("shape overflow".into()))?;
        let offset = r.u64("tensor offset")?;
        let len = r.u64("tensor len")?;
        if offset != expect_offset {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` offset {offset}, expected {expect_offset}"
            )));
        }
        if len != (count as u64) * 4 {
            return Err(CheckpointError::Malformed(format!(
                "tensor `{name}` length {len} disagrees with shape {shape:?}"
            )));
        }
        expect_offset = expect_offset
            .checked_add(len)
            .ok_or_else(|| CheckpointError::Malformed("payload overflow".into()))?;
        dir.push((name, shape, count));
    }

    let payload_len = r.u64("payload len")?;
    if payload_len != expect_offset {
        return Err(CheckpointError::Malformed(
            "payload length disagrees with directory".into(),
        ));
    }
    if payload_len > (body.len() - r.pos) as u64 {
        return Err(CheckpointError::Truncated("payload"));
    }
    let mut tensors = Vec::with_capacity(dir.len());
    for (name, shape, count) in dir {
        let raw = r.take(count * 4, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }

    // split base tensors from adapter tensors and validate the layout
    let layout = config.tensor_layout();
    if tensors.len() < layout.len() {
        return Err(CheckpointError::Malformed("missing base tensors".into()));
    }
    let adapter_tensors = tensors.split_off(layout.len());
    for (t, (name, shape)) in tensors.iter().zip(&layout) {
        if &t.name != name || &t.shape != shape {
            return Err(CheckpointError::Malformed(format!(
                "unexpected base tensor `{}`",
                t.name
            )));
        }
    }
    let params = ParameterSet::new(config, tensors);

    let adapters = match adapter_config {
        None => {
            if !adapter_tensors.is_empty() {
                return Err(CheckpointError::Malformed(
                    "adapter tensors without adapter config".into(),
                ));
            }
            None
        }
        Some(ac) => {
            let expected = config.n_layers * ac.targets.len();
            if adapter_tensors.len() != expected * 2 {
                return Err(CheckpointError::Malformed(format!(
                    "expected {} adapter tensors, found {}",
                    expected * 2,
                    adapter_tensors.len()
                )));
            }
            let mut pairs = Vec::with_capacity(expected);
            let mut it = adapter_tensors.into_iter();
            for layer in 0..config.n_layers {
                for &slot in &ac.targets {
                    let a = it.next().unwrap();
                    let b = it.next().unwrap();
                    let (d_in, d_out) = slot.dims(&config);
                    let prefix = format!("adapter.layers.{layer}.{}", slot.tag());
                    if a.name != format!("{prefix}.a")
                        || b.name != format!("{prefix}.b")
                        || a.shape != vec![ac.rank, d_in]
                        || b.shape != vec![d_out, ac.rank]
                    {
                        return Err(CheckpointError::Malformed(format!(
                            "adapter pair for {prefix} malformed"
                        )));
                    }
                    pairs.push(AdapterPair { layer, slot, a, b });
                }
            }
            Some(AdapterSet::from_parts(ac, pairs))
        }
    };

    Ok((params, adapters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_base;
    use crate::rng::StreamKey;

    fn params() -> ParameterSet {
        init_base(ModelConfig::default(), 1).unwrap()
    }

    fn adapters(p: &ParameterSet) -> AdapterSet {
        let mut stream = StreamKey::new("ckpt.test").into_stream();
        AdapterSet::init(p.config(), AdapterConfig::default(), &mut stream).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let p = params();
        let bytes = save_checkpoint(&p, None).unwrap();
        let (loaded, ad) = load_checkpoint(&bytes).unwrap();
        assert!(ad.is_none());
        assert_eq!(loaded, p);
        assert_eq!(loaded.content_hash(), p.content_hash());
        // save→load→save gives identical bytes
        let bytes2 = save_checkpoint(&loaded, None).unwrap();
        assert_eq!(bytes, bytes2);
    }

    #[test]
    fn round_trip_with_adapters() {
        let p = params();
        let a = adapters(&p);
        let bytes = save_checkpoint(&p, Some(&a)).unwrap();
        let (loaded_p, loaded_a) = load_checkpoint(&bytes).unwrap();
        assert_eq!(loaded_p, p);
        assert_eq!(loaded_a.unwrap(), a);
    }

    #[test]
    fn flipped_byte_fails_hash_check() {
        let p = params();
        let mut bytes = save_checkpoint(&p, None).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert_eq!(load_checkpoint(&bytes), Err(CheckpointError::HashMismatch));
    }

    #[test]
    fn distinct_errors_for_magic_version_truncation() {
        let p = params();
        let good = save_checkpoint(&p, None).unwrap();

        assert_eq!(
            load_checkpoint(b"not a checkpoint at all............"),
            Err(CheckpointError::BadMagic)
        );

        // rewrite version and re-sign so only the version differs
        let mut v2 = good.clone();
        v2.truncate(v2.len() - 32);
        v2[6..10].copy_from_slice(&99u32.to_le_bytes());
        let digest = Sha256::digest(&v2);
        v2.extend_from_slice(&digest);
        assert_eq!(
            load_checkpoint(&v2),
            Err(CheckpointError::UnsupportedVersion(99))
        );

        let mut short = good.clone();
        short.truncate(good.len() - 200);
        assert!(matches!(
            load_checkpoint(&short),
            Err(CheckpointError::HashMismatch) | Err(CheckpointError::Truncated(_))
        ));
        assert!(matches!(
            load_checkpoint(&good[..10]),
            Err(CheckpointError::Truncated(_))
        ));
    }

    #[test]
    fn arbitrary_bytes_do_not_panic() {
        let mut stream = StreamKey::new("ckpt.fuzzish").into_stream();
        use rand::Rng;
        for _ in 0..200 {
            let n = stream.gen_range(0..512);
            let bytes: Vec<u8> = (0..n).map(|_| stream.gen()).collect();
            let _ = load_checkpoint(&bytes);
        }
    }
}
