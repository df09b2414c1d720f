//! Checkpoint container.
//!
//! Layout: the 8-byte magic `SCACKPT1`, the manifest length as a
//! little-endian `u64`, the manifest as JSON, then every tensor as
//! contiguous little-endian `f64` in manifest order. Model tensors come
//! first, followed by the optimizer moments (`optim.m.*`, `optim.v.*`) when
//! present.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HybridModel, ModelConfig};
use crate::rng;
use crate::train::OptimState;

const MAGIC: &[u8; 8] = b"SCACKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// SHA-256 of the canonical JSON of `model`.
    pub config_hash: String,
    pub dtype: String,
    pub model: ModelConfig,
    /// Optimizer step count, when moments are stored.
    pub optim_step: Option<u64>,
    pub tensors: Vec<TensorEntry>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: HybridModel,
    pub optim: Option<OptimState>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub fn config_hash(cfg: &ModelConfig) -> Result<String> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Serializes to the container format.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &crate::tensor::Tensor<f64>)> = ck.model.tensors();
    let names: Vec<String> = tensors.iter().map(|(n, _)| n.clone()).collect();
    if let Some(st) = &ck.optim {
        if st.m.len() != names.len() || st.v.len() != names.len() {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        tensors.extend(names.iter().zip(&st.m).map(|(n, t)| (format!("optim.m.{n}"), t)));
        tensors.extend(names.iter().zip(&st.v).map(|(n, t)| (format!("optim.v.{n}"), t)));
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        config_hash: config_hash(&ck.model.cfg)?,
        dtype: "f64".into(),
        model: ck.model.cfg.clone(),
        optim_step: ck.optim.as_ref().map(|s| s.step),
        tensors: tensors.iter().map(|(n, t)| TensorEntry { name: n.clone(), shape: t.shape.clone() }).collect(),
        metadata: ck.metadata.clone(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let payload: usize = tensors.iter().map(|(_, t)| t.len() * 8).sum();
    let mut out = Vec::with_capacity(16 + json.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Parses a container. With `expected`, the stored config hash must match
/// it unless `force` is set.
pub fn decode(bytes: &[u8], expected: Option<&ModelConfig>, force: bool) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if mlen > body.len() {
        return Err(bad("manifest length exceeds file size"));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..mlen]).map_err(|e| bad(format!("manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(bad(format!("manifest: format version {} is not {FORMAT_VERSION}", manifest.format_version)));
    }
    if manifest.dtype != "f64" {
        return Err(bad(format!("manifest: dtype {:?} is not f64", manifest.dtype)));
    }
    let stored = config_hash(&manifest.model)?;
    if stored != manifest.config_hash {
        return Err(bad(format!("manifest: config hash {} does not match the stored config ({stored})", manifest.config_hash)));
    }
    if let Some(cfg) = expected {
        let want = config_hash(cfg)?;
        if want != stored && !force {
            return Err(bad(format!("manifest: checkpoint config hash {stored} differs from the run config {want} (use --force to override)")));
        }
    }
    let payload = &body[mlen..];
    let want_bytes: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
    if payload.len() != want_bytes {
        return Err(bad(format!("payload has {} bytes, manifest describes {want_bytes}", payload.len())));
    }
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));

    let mut model = HybridModel::init(&manifest.model, &mut rng::stream(0, rng::MODEL_INIT, 0))?;
    let names: Vec<String> = model.tensors().into_iter().map(|(n, _)| n).collect();
    let n = names.len();
    let with_optim = manifest.optim_step.is_some();
    let expect_count = if with_optim { 3 * n } else { n };
    if manifest.tensors.len() != expect_count {
        return Err(bad(format!("manifest lists {} tensors, the model needs {expect_count}", manifest.tensors.len())));
    }
    let mut fill = |entry: &TensorEntry, want_name: &str, t: &mut crate::tensor::Tensor<f64>| -> Result<()> {
        if entry.name != want_name || entry.shape != t.shape {
            return Err(bad(format!("manifest entry {} {:?} does not match {want_name} {:?}", entry.name, entry.shape, t.shape)));
        }
        for v in t.data.iter_mut() {
            *v = values.next().expect("length checked");
        }
        Ok(())
    };
    for ((entry, name), t) in manifest.tensors.iter().zip(&names).zip(model.tensors_mut()) {
        fill(entry, name, t)?;
    }
    let optim = match manifest.optim_step {
        None => None,
        Some(step) => {
            let mut st = OptimState::new(&model);
            st.step = step;
            for (k, (prefix, moments)) in [("optim.m", &mut st.m), ("optim.v", &mut st.v)].into_iter().enumerate() {
                for (i, t) in moments.iter_mut().enumerate() {
                    fill(&manifest.tensors[(k + 1) * n + i], &format!("{prefix}.{}", names[i]), t)?;
                }
            }
            Some(st)
        }
    };
    Ok(Checkpoint { model, optim, metadata: manifest.metadata })
}

/// Writes `bytes` to `path` through a temporary file in the same
/// directory, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// Saves atomically; refuses to replace an existing file unless `force`.
pub fn save(path: &Path, ck: &Checkpoint, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(bad(format!("{} exists (use --force to overwrite)", path.display())));
    }
    write_atomic(path, &encode(ck)?)
}

pub fn load(path: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes, expected, force)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn sample(with_optim: bool) -> Checkpoint {
        let model = HybridModel::init(&ModelConfig::micro(), &mut rng::stream(3, rng::MODEL_INIT, 0)).unwrap();
        let optim = with_optim.then(|| {
            let mut st = OptimState::new(&model);
            st.step = 17;
            st.m[0].data[1] = 0.25;
            st.v[2].data[0] = 1e-9;
            st
        });
        let mut metadata = BTreeMap::new();
        metadata.insert("step".into(), serde_json::json!(17));
        Checkpoint { model, optim, metadata }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        for with_optim in [false, true] {
            let ck = sample(with_optim);
            let a = encode(&ck).unwrap();
            let back = decode(&a, Some(&ck.model.cfg), false).unwrap();
            assert_eq!(back, ck);
            assert_eq!(encode(&back).unwrap(), a);
        }
    }

    #[test]
    fn payload_length_matches_the_manifest() {
        let ck = sample(true);
        let bytes = encode(&ck).unwrap();
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 16 - mlen, 3 * ck.model.param_count() * 8);
        assert!(matches!(decode(&bytes[..bytes.len() - 8], None, false), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let ck = sample(false);
        let bytes = encode(&ck).unwrap();
        let text = String::from_utf8_lossy(&bytes[16..80]).to_string();
        assert!(text.contains("config_hash"));
        // flip one hex digit of the stored hash
        let at = bytes.windows(15).position(|w| w == b"\"config_hash\":\"").unwrap() + 15;
        let mut bad_hash = bytes.clone();
        bad_hash[at] = if bad_hash[at] == b'0' { b'1' } else { b'0' };
        match decode(&bad_hash, None, false) {
            Err(Error::Checkpoint(m)) => assert!(m.contains("manifest")),
            other => panic!("{other:?}"),
        }
        let mut other = ModelConfig::micro();
        other.rope_base = 500.0;
        assert!(decode(&bytes, Some(&other), false).is_err());
        assert!(decode(&bytes, Some(&other), true).is_ok());
        assert!(decode(b"NOTACKPT00000000", None, false).is_err());
    }

    #[test]
    fn save_refuses_to_overwrite_without_force() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample(true);
        save(&path, &ck, false).unwrap();
        assert!(matches!(save(&path, &ck, false), Err(Error::Checkpoint(_))));
        save(&path, &ck, true).unwrap();
        assert_eq!(load(&path, None, false).unwrap(), ck);
    }
}
