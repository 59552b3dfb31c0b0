//! Versioned backbone checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes   "PSLCKPT\0"
//! version  u32       currently 1
//! hlen     u64       length of the JSON header in bytes
//! header   hlen      UTF-8 JSON, see `CheckpointHeader`
//! blob     rest      f32 values, addressed by the header's tensor directory
//! ```
//!
//! The header carries the backbone configuration, the partition summary,
//! a step counter and a SHA-256 of the blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Backbone, BackboneConfig};

pub const MAGIC: &[u8; 8] = b"PSLCKPT\0";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX: usize = 8 + 4 + 8;
const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    /// Block name for backbone tensors, head id for head tensors.
    pub group: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    /// Offset and length in f32 elements.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub run_id: String,
    pub config_hash: String,
    pub step: u64,
    /// 0 for an untrained backbone.
    pub stage_completed: usize,
    pub backbone: BackboneConfig,
    pub partition_summary: String,
    pub tensors: Vec<TensorEntry>,
    pub data_sha256: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    data: Vec<f32>,
}

/// Fields the caller supplies; the tensor directory is derived.
#[derive(Debug, Clone, Default)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub config_hash: String,
    pub step: u64,
    pub stage_completed: usize,
    pub partition_summary: String,
}

fn digest(data: &[f32]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

impl Checkpoint {
    pub fn from_backbone(backbone: &mut Backbone, meta: CheckpointMeta) -> Self {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        backbone.for_each_param(|group, p| {
            tensors.push(TensorEntry {
                name: p.name.clone(),
                group: group.to_string(),
                kind: TensorKind::Param,
                shape: p.shape.clone(),
                offset: data.len(),
                len: p.value.len(),
            });
            data.extend_from_slice(&p.value);
        });
        backbone.for_each_buffer(|group, b| {
            tensors.push(TensorEntry {
                name: b.name.clone(),
                group: group.to_string(),
                kind: TensorKind::Buffer,
                shape: vec![b.value.len()],
                offset: data.len(),
                len: b.value.len(),
            });
            data.extend_from_slice(&b.value);
        });
        let header = CheckpointHeader {
            run_id: meta.run_id,
            config_hash: meta.config_hash,
            step: meta.step,
            stage_completed: meta.stage_completed,
            backbone: backbone.config().clone(),
            partition_summary: meta.partition_summary,
            tensors,
            data_sha256: digest(&data),
        };
        Checkpoint { header, data }
    }

    pub fn tensor(&self, name: &str) -> Option<&[f32]> {
        self.header
            .tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &self.data[t.offset..t.offset + t.len])
    }

    /// Groups present in the directory, in first-seen order.
    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.header.tensors {
            if !out.contains(&t.group) {
                out.push(t.group.clone());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.header
            .tensors
            .iter()
            .filter(|t| t.kind == TensorKind::Param)
            .map(|t| t.len)
            .sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(PREFIX + header.len() + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        if bytes.len() < PREFIX || &bytes[..8] != MAGIC {
            return Err(Error::format(WHAT, "missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(WHAT, format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen as usize > bytes.len() - PREFIX {
            return Err(Error::format(WHAT, format!("header length {hlen} exceeds file")));
        }
        let hend = PREFIX + hlen as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[PREFIX..hend]).map_err(|e| Error::format(WHAT, e.to_string()))?;
        let blob = &bytes[hend..];
        if !blob.len().is_multiple_of(4) {
            return Err(Error::format(WHAT, "data blob is not a whole number of f32 values"));
        }
        let data: Vec<f32> = blob
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        for t in &header.tensors {
            let expected: usize = t.shape.iter().product();
            let end = t.offset.checked_add(t.len);
            if expected != t.len || end.is_none_or(|e| e > data.len()) {
                return Err(Error::format(WHAT, format!("tensor `{}` has an invalid extent", t.name)));
            }
        }
        if digest(&data) != header.data_sha256 {
            return Err(Error::format(WHAT, "data checksum mismatch"));
        }
        Ok(Checkpoint { header, data })
    }

    /// Writes through a temporary file so a crash never leaves a torn
    /// checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// `(name, shape)` for every tensor, the same listing
    /// [`Backbone::fingerprint`] produces.
    pub fn fingerprint(&self) -> Vec<(String, Vec<usize>)> {
        self.header
            .tensors
            .iter()
            .filter(|t| !is_head_group(&t.group))
            .map(|t| (t.name.clone(), t.shape.clone()))
            .collect()
    }

    /// Copies the stored values into `backbone`, refusing when the
    /// architectures differ.
    pub fn restore_into(&self, backbone: &mut Backbone) -> Result<()> {
        let diff = fingerprint_diff(&backbone.fingerprint(), &self.fingerprint());
        if !diff.is_empty() {
            return Err(Error::Architecture(diff));
        }
        let lookup = |name: &str| -> &[f32] { self.tensor(name).expect("fingerprints agree") };
        backbone.for_each_param(|_, p| p.value.copy_from_slice(lookup(&p.name)));
        backbone.for_each_buffer(|_, b| b.value.copy_from_slice(lookup(&b.name)));
        Ok(())
    }

    pub fn to_backbone(&self) -> Result<Backbone> {
        let mut backbone = Backbone::new(&self.header.backbone)?;
        self.restore_into(&mut backbone)?;
        Ok(backbone)
    }
}

/// Head groups are named `g<i>`; everything else belongs to the backbone.
pub fn is_head_group(group: &str) -> bool {
    group.strip_prefix('g').is_some_and(|rest| !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()))
}

/// Line-oriented diff of two architecture fingerprints; empty when equal.
pub fn fingerprint_diff(expected: &[(String, Vec<usize>)], found: &[(String, Vec<usize>)]) -> String {
    let mut lines = Vec::new();
    for (name, shape) in expected {
        match found.iter().find(|(n, _)| n == name) {
            None => lines.push(format!("- {name} {shape:?} (missing from checkpoint)")),
            Some((_, s)) if s != shape => lines.push(format!("~ {name} expected {shape:?}, checkpoint has {s:?}")),
            Some(_) => {}
        }
    }
    for (name, shape) in found {
        if !expected.iter().any(|(n, _)| n == name) {
            lines.push(format!("+ {name} {shape:?} (not in configured model)"));
        }
    }
    lines.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BackboneConfig {
        let mut cfg = BackboneConfig::with_widths(&[4, 6, 8]);
        cfg.input_size = 8;
        cfg
    }

    #[test]
    fn round_trip_preserves_every_value() {
        let mut net = Backbone::new(&small()).unwrap();
        let ck = Checkpoint::from_backbone(
            &mut net,
            CheckpointMeta {
                run_id: "r".into(),
                step: 7,
                stage_completed: 2,
                ..Default::default()
            },
        );
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let mut restored = back.to_backbone().unwrap();
        assert_eq!(restored.snapshot(), net.snapshot());
        assert!(back.groups().iter().all(|g| !is_head_group(g)));
    }

    #[test]
    fn corruption_is_detected() {
        let mut net = Backbone::new(&small()).unwrap();
        let mut bytes = Checkpoint::from_backbone(&mut net, CheckpointMeta::default()).to_bytes();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        assert!(Checkpoint::from_bytes(b"PSLCKPT\0").is_err());
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(Checkpoint::from_bytes(&v2).is_err());
    }

    #[test]
    fn architecture_mismatch_lists_differences() {
        let mut a = Backbone::new(&small()).unwrap();
        let ck = Checkpoint::from_backbone(&mut a, CheckpointMeta::default());
        let mut other = small();
        other.blocks[2].width = 10;
        let mut b = Backbone::new(&other).unwrap();
        match ck.restore_into(&mut b) {
            Err(Error::Architecture(diff)) => assert!(diff.contains("B3.unit0.conv1.weight")),
            other => panic!("expected architecture error, got {other:?}"),
        }
    }

    #[test]
    fn head_group_names() {
        assert!(is_head_group("g1"));
        assert!(is_head_group("g12"));
        assert!(!is_head_group("g"));
        assert!(!is_head_group("B1"));
    }
}
