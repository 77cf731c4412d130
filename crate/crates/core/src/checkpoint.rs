//! Flat binary checkpoints: model weights, Adam moments and the step
//! counter.
//!
//! Layout: an 8-byte magic/version tag, the step counter, a manifest of
//! `(name, shape, payload offset)` entries in canonical parameter order,
//! then one contiguous `f32` little-endian payload section. Values are
//! stored as `f32` regardless of the in-memory scalar type, so save/load
//! round-trips are bitwise at `f32` precision and widen losslessly into
//! `f64`; saving an `f64` model narrows its values.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::model::{ModelConfig, Params};
use crate::tensor::Tensor;

const CKPT_MAGIC: &[u8; 8] = b"ICLCKPT1";

/// Everything needed to resume training exactly where it stopped.
#[derive(Clone)]
pub struct Checkpoint<T> {
    pub params: Params<T>,
    /// Adam first-moment estimates, canonical order.
    pub m: Params<T>,
    /// Adam second-moment estimates, canonical order.
    pub v: Params<T>,
    pub step: u64,
}

impl<T: Float> Checkpoint<T> {
    /// Fresh optimizer state around existing weights.
    pub fn new(config: &ModelConfig, params: Params<T>) -> Checkpoint<T> {
        Checkpoint {
            params,
            m: Params::zeros(config),
            v: Params::zeros(config),
            step: 0,
        }
    }
}

fn push_section<T: Float>(
    section: &str,
    params: &Params<T>,
    manifest: &mut Vec<u8>,
    payload: &mut Vec<u8>,
) {
    for (name, t) in params.flatten() {
        let full = format!("{section}/{name}");
        manifest.extend_from_slice(&(full.len() as u16).to_le_bytes());
        manifest.extend_from_slice(full.as_bytes());
        manifest.push(t.rank() as u8);
        for &d in t.shape() {
            manifest.extend_from_slice(&(d as u32).to_le_bytes());
        }
        manifest.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        for v in t.data() {
            payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
}

/// Writes a checkpoint; same state always produces identical bytes.
pub fn save_checkpoint<T: Float>(path: &Path, ckpt: &Checkpoint<T>) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload = Vec::new();
    let entry_count = 3 * ckpt.params.flatten().len() as u32;
    push_section("param", &ckpt.params, &mut manifest, &mut payload);
    push_section("m", &ckpt.m, &mut manifest, &mut payload);
    push_section("v", &ckpt.v, &mut manifest, &mut payload);

    let mut buf = Vec::with_capacity(8 + 8 + 4 + manifest.len() + 8 + payload.len());
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&ckpt.step.to_le_bytes());
    buf.extend_from_slice(&entry_count.to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    buf.extend_from_slice(&payload);
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Reads a checkpoint for `config`, widening stored `f32` values into `T`.
/// The manifest must list exactly the tensors `config` implies, in
/// canonical order and with matching shapes.
pub fn load_checkpoint<T: Float>(path: &Path, config: &ModelConfig) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let fail = |reason: String| Error::Format {
        kind: "checkpoint",
        reason,
    };
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if bytes.len() < *pos + n {
            return Err(fail("unexpected end of file".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    let mut pos = 0usize;
    if take(&mut pos, 8)? != CKPT_MAGIC {
        return Err(fail("missing or wrong magic header".into()));
    }
    let step = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let entry_count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| fail("manifest name is not UTF-8".into()))?;
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        entries.push(ManifestEntry {
            name,
            shape,
            offset,
        });
    }
    let payload_len = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let payload = take(&mut pos, payload_len)?;
    if pos != bytes.len() {
        return Err(fail("trailing bytes after payload".into()));
    }

    let mut cursor = 0usize;
    let mut restore_section = |section: &str| -> Result<Params<T>> {
        let mut failure: Option<Error> = None;
        let params = Params::build(config, &mut |name, shape, _| {
            let expect = format!("{section}/{name}");
            let mut make_err = |reason: String| -> Tensor<T> {
                // build() is infallible per tensor; stash the error and
                // return a placeholder that load_checkpoint discards.
                failure.get_or_insert(fail(reason));
                Tensor::zeros(shape.clone())
            };
            let Some(entry) = entries.get(cursor) else {
                return make_err("manifest has fewer tensors than the config".into());
            };
            cursor += 1;
            if entry.name != expect {
                return make_err(format!("expected tensor `{expect}`, found `{}`", entry.name));
            }
            if entry.shape != shape {
                return make_err(format!(
                    "tensor `{expect}` has shape {:?}, expected {shape:?}",
                    entry.shape
                ));
            }
            let n: usize = shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > payload.len() {
                return make_err(format!("tensor `{expect}` payload out of bounds"));
            }
            let data: Vec<T> = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|c| T::cast(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            match Tensor::from_vec(shape.clone(), data) {
                Ok(t) => t,
                Err(e) => {
                    failure.get_or_insert(e);
                    Tensor::zeros(shape.clone())
                }
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(params),
        }
    };

    let params = restore_section("param")?;
    let m = restore_section("m")?;
    let v = restore_section("v")?;
    if cursor != entries.len() {
        return Err(fail("manifest has more tensors than the config".into()));
    }
    Ok(Checkpoint { params, m, v, step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{sample_batch, CovarianceKind};
    use crate::model::{predict, AttentionKind};
    use crate::rng::RngStream;
    use tempfile::tempdir;

    fn cfg(layers: usize) -> ModelConfig {
        ModelConfig {
            attention: AttentionKind::Quadratic,
            layers,
            ..ModelConfig::default()
        }
    }

    fn make_ckpt(seed: u64) -> Checkpoint<f32> {
        let config = cfg(2);
        let params = Params::init(&config, &mut RngStream::new(seed, "ckpt"));
        let mut ckpt = Checkpoint::new(&config, params);
        // Non-trivial moments so the round-trip covers all sections.
        let mut rng = RngStream::new(seed, "moments");
        for (_, t) in ckpt.m.flatten_mut() {
            *t = Tensor::randn(t.shape().to_vec(), 0.1, &mut rng);
        }
        for (_, t) in ckpt.v.flatten_mut() {
            let r = Tensor::<f32>::randn(t.shape().to_vec(), 0.1, &mut rng);
            *t = Tensor::from_vec(
                t.shape().to_vec(),
                r.data().iter().map(|v| v * v).collect(),
            )
            .unwrap();
        }
        ckpt.step = 1234;
        ckpt
    }

    #[test]
    fn round_trip_is_bitwise_and_deterministic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = make_ckpt(21);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded: Checkpoint<f32> = load_checkpoint(&path, &cfg(2)).unwrap();
        assert_eq!(loaded.step, 1234);
        for (src, dst) in [
            (&ckpt.params, &loaded.params),
            (&ckpt.m, &loaded.m),
            (&ckpt.v, &loaded.v),
        ] {
            for ((na, ta), (nb, tb)) in src.flatten().iter().zip(dst.flatten().iter()) {
                assert_eq!(na, nb);
                assert_eq!(ta.data(), tb.data(), "{na}");
            }
        }

        let path2 = dir.path().join("ckpt2.bin");
        save_checkpoint(&path2, &ckpt).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn reloaded_params_predict_bitwise_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let ckpt = make_ckpt(22);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded: Checkpoint<f32> = load_checkpoint(&path, &cfg(2)).unwrap();
        let mut rng = RngStream::new(5, "ckpt-bank");
        let bank = sample_batch(&mut rng, 16, 10, 5, &CovarianceKind::Isotropic).unwrap();
        let a = predict(&cfg(2), &ckpt.params, &bank).unwrap();
        let b = predict(&cfg(2), &loaded.params, &bank).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn config_mismatch_and_corruption_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        save_checkpoint(&path, &make_ckpt(23)).unwrap();

        // Wrong depth: manifest order diverges at the first missing layer.
        assert!(matches!(
            load_checkpoint::<f32>(&path, &cfg(3)),
            Err(Error::Format { kind: "checkpoint", .. })
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[3] = b'X';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, &cfg(2)),
            Err(Error::Format { kind: "checkpoint", .. })
        ));

        let mut bytes = fs::read(&path).unwrap();
        bytes[0..8].copy_from_slice(CKPT_MAGIC);
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path, &cfg(2)),
            Err(Error::Format { kind: "checkpoint", .. })
        ));
    }

    #[test]
    fn f64_state_narrows_to_f32_payloads() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt64.bin");
        let config = cfg(1);
        let params: Params<f64> = Params::init(&config, &mut RngStream::new(24, "ckpt"));
        let ckpt = Checkpoint::new(&config, params);
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded: Checkpoint<f64> = load_checkpoint(&path, &config).unwrap();
        for ((_, ta), (_, tb)) in ckpt.params.flatten().iter().zip(loaded.params.flatten().iter())
        {
            for (a, b) in ta.data().iter().zip(tb.data().iter()) {
                assert_eq!(*a as f32, *b as f32);
            }
        }
    }
}
