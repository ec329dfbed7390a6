//! Checkpoint files and branch grafting.
//!
//! Layout: `"BTCK" | u64 manifest_len | manifest JSON | f64 blob`, all
//! little-endian. The manifest lists every parameter with its shape, byte
//! offset into the blob, trainable flag and group, plus the config, the
//! step count and a SHA-256 per group.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{self, BtModel};
use crate::params::{Group, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"BTCK";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
    pub group: Group,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: u32,
    pub config: ModelConfig,
    pub step: u64,
    pub params: Vec<ParamEntry>,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: BtModel,
    pub step: u64,
}

impl Checkpoint {
    pub fn hashes(&self) -> BTreeMap<String, String> {
        group_hashes(self.model.params())
    }
}

pub fn group_hashes(params: &ParamStore) -> BTreeMap<String, String> {
    Group::ALL
        .iter()
        .map(|g| (g.name().to_string(), params.group_hash(*g)))
        .collect()
}

pub fn to_bytes(model: &BtModel, step: u64) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    for (name, p) in model.params().iter() {
        entries.push(ParamEntry {
            name: name.clone(),
            shape: p.tensor.shape().to_vec(),
            offset: blob.len() as u64,
            trainable: p.trainable(),
            group: p.group,
        });
        blob.extend_from_slice(&p.tensor.to_le_bytes());
    }
    let manifest = Manifest {
        format: FORMAT,
        config: model.config().clone(),
        step,
        params: entries,
        hashes: group_hashes(model.params()),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(12 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Corrupt("checkpoint magic mismatch".into()));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(12..12 + len)
        .ok_or_else(|| Error::Corrupt("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(json)?;
    if manifest.format != FORMAT {
        return Err(Error::Corrupt(format!("unsupported format {}", manifest.format)));
    }
    let blob = &bytes[12 + len..];
    let mut params = ParamStore::new();
    let mut cursor = 0u64;
    for e in &manifest.params {
        if e.offset != cursor {
            return Err(Error::Corrupt(format!("parameter {} at offset {}, expected {cursor}", e.name, e.offset)));
        }
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let chunk = blob
            .get(start..start + 8 * n)
            .ok_or_else(|| Error::Corrupt(format!("parameter {} runs past the blob", e.name)))?;
        let data = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?, e.group, e.trainable);
        cursor += 8 * n as u64;
    }
    if cursor as usize != blob.len() {
        return Err(Error::Corrupt(format!(
            "blob has {} bytes, manifest covers {cursor}",
            blob.len()
        )));
    }
    let hashes = group_hashes(&params);
    if hashes != manifest.hashes {
        let bad: Vec<&String> = hashes
            .iter()
            .filter(|(k, v)| manifest.hashes.get(*k) != Some(v))
            .map(|(k, _)| k)
            .collect();
        return Err(Error::Corrupt(format!("group hash mismatch for {bad:?}")));
    }
    Ok(Checkpoint {
        model: BtModel::from_parts(manifest.config, params)?,
        step: manifest.step,
    })
}

/// Writes to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &BtModel, step: u64) -> Result<()> {
    write_atomic(path, &to_bytes(model, step)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_bytes(&std::fs::read(path)?)
}

/// SHA-256 of a checkpoint's full serialized form.
pub fn checkpoint_hash(model: &BtModel, step: u64) -> Result<String> {
    Ok(hex::encode(Sha256::digest(to_bytes(model, step)?)))
}

/// Copies the donor's branch group into `target`, leaving its backbone and
/// heads alone. Untrained donors are re-checked against the init invariants
/// using `probe`.
pub fn graft_branch(donor: &Checkpoint, target: &mut BtModel, probe: &Tensor) -> Result<()> {
    let bad = donor.model.config().branch_incompatibilities(target.config());
    if !bad.is_empty() {
        return Err(Error::Incompatible(bad));
    }
    let branch: Vec<(String, crate::params::Param)> = donor
        .model
        .params()
        .iter()
        .filter(|(_, p)| p.group == Group::Branch)
        .map(|(n, p)| (n.clone(), p.clone()))
        .collect();
    for (name, _) in target.params().iter().filter(|(_, p)| p.group == Group::Branch) {
        if !branch.iter().any(|(n, _)| n == name) {
            return Err(Error::Incompatible(vec![name.clone()]));
        }
    }
    let store = target.params_mut();
    for (name, p) in branch {
        let slot = store.get_mut(&name)?;
        if slot.tensor.shape() != p.tensor.shape() {
            return Err(Error::Incompatible(vec![name]));
        }
        *slot = p;
    }
    if donor.step == 0 {
        let failed: Vec<String> = model::verify_init(target, probe, 0)?
            .into_iter()
            .filter(|c| !c.passed)
            .map(|c| format!("{}: {}", c.name, c.detail))
            .collect();
        if !failed.is_empty() {
            return Err(Error::Invariant(failed.join("; ")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let m = BtModel::new(ModelConfig::tiny(), 4).unwrap();
        let bytes = to_bytes(&m, 7).unwrap();
        let c = from_bytes(&bytes).unwrap();
        assert_eq!(c.step, 7);
        assert_eq!(c.model, m);
        assert_eq!(c.hashes(), group_hashes(m.params()));
        assert_eq!(to_bytes(&c.model, 7).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let m = BtModel::new(ModelConfig::tiny(), 4).unwrap();
        let mut bytes = to_bytes(&m, 0).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Corrupt(_))));
        assert!(from_bytes(&bytes[..bytes.len() - 8]).is_err());
        assert!(from_bytes(b"nope").is_err());
    }

    #[test]
    fn graft_rejects_mismatched_branch_depth() {
        let donor = Checkpoint {
            model: BtModel::new(ModelConfig::tiny(), 1).unwrap(),
            step: 0,
        };
        let mut target = BtModel::new(
            ModelConfig {
                layers: 4,
                branch_layers: 3,
                ..ModelConfig::tiny()
            },
            2,
        )
        .unwrap();
        let probe = Tensor::zeros(&[3, 4, 4]);
        match graft_branch(&donor, &mut target, &probe) {
            Err(Error::Incompatible(fields)) => assert_eq!(fields, vec!["branch_layers"]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
