//! Checkpoint files: a single-line JSON manifest, a newline, then the raw
//! little-endian `f64` payload of every tensor in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dit::train::TrainConfig;
use crate::dit::{ArchSpec, DitModel};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT: &str = "ditcal-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const REFERENCE_PREFIX: &str = "reference.class";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub train: TrainConfig,
    pub steps_completed: usize,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub reference_per_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub arch: ArchSpec,
    pub arch_hash: String,
    pub seed: u64,
    pub provenance: Provenance,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    /// Hash of this manifest serialized with this field empty.
    pub manifest_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn manifest_hash(m: &Manifest) -> Result<String> {
    let mut m = m.clone();
    m.manifest_sha256.clear();
    let text = serde_json::to_string(&m).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(hex(&Sha256::digest(text.as_bytes())))
}

/// A trained model with its reward reference sets.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DitModel,
    /// One `[n × 64]` reference set per class.
    pub references: Vec<Tensor>,
    pub seed: u64,
    pub provenance: Provenance,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors: Vec<(String, Tensor)> = Vec::new();
        self.model
            .visit(|name, t| tensors.push((name.to_string(), (**t).clone())));
        for (c, r) in self.references.iter().enumerate() {
            tensors.push((format!("{REFERENCE_PREFIX}{c}"), r.clone()));
        }
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, t) in &tensors {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                bytes: payload.len() as u64 - offset,
            });
        }
        let mut manifest = Manifest {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            arch: self.model.arch.clone(),
            arch_hash: self.model.arch.hash(),
            seed: self.seed,
            provenance: self.provenance.clone(),
            tensors: entries,
            payload_bytes: payload.len() as u64,
            payload_sha256: hex(&Sha256::digest(&payload)),
            manifest_sha256: String::new(),
        };
        manifest.manifest_sha256 = manifest_hash(&manifest)?;
        let mut out = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        out.push(b'\n');
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("no manifest line".into()))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT || manifest.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.format_version
            )));
        }
        if manifest_hash(&manifest)? != manifest.manifest_sha256 {
            return Err(Error::Checkpoint("manifest hash mismatch".into()));
        }
        let payload = &bytes[nl + 1..];
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(Error::Checkpoint(format!(
                "payload has {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        if hex(&Sha256::digest(payload)) != manifest.payload_sha256 {
            return Err(Error::Checkpoint("payload hash mismatch".into()));
        }
        manifest.arch.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        if manifest.arch.hash() != manifest.arch_hash {
            return Err(Error::Checkpoint("architecture hash mismatch".into()));
        }

        let mut entries: Vec<&TensorEntry> = manifest.tensors.iter().collect();
        entries.sort_by_key(|e| e.offset);
        let mut end = 0u64;
        for e in &entries {
            let count: usize = e.shape.iter().product();
            if e.offset < end || e.bytes != count as u64 * 8 || e.offset + e.bytes > manifest.payload_bytes {
                return Err(Error::Checkpoint(format!(
                    "tensor {} is out of bounds or overlapping",
                    e.name
                )));
            }
            end = e.offset + e.bytes;
        }

        let mut table = BTreeMap::new();
        for e in &manifest.tensors {
            let raw = &payload[e.offset as usize..(e.offset + e.bytes) as usize];
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| Error::Checkpoint(format!("tensor {}: {err}", e.name)))?;
            if table.insert(e.name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
        }
        let mut model = DitModel::init(manifest.arch.clone(), 0)?;
        let names = model.tensor_names();
        model.load_named(&table)?;
        let mut references = Vec::new();
        for c in 0..manifest.arch.class_count {
            let name = format!("{REFERENCE_PREFIX}{c}");
            let r = table
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            references.push(r);
        }
        for n in &names {
            table.remove(n);
        }
        if let Some(extra) = table.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(Self {
            model,
            references,
            seed: manifest.seed,
            provenance: manifest.provenance,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_bytes(&bytes)
    }
}
