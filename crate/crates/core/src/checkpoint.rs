//! Named-tensor checkpoints: a plain-text manifest plus one little-endian
//! float32 blob.
//!
//! ```text
//! stylegrid-checkpoint 1
//! stage stage1
//! config_hash 3fa1…
//! seed 0
//! meta variant multi_dsi
//! tensor mlcd.rgb.bias f32 3 0 12 9c1e…
//! ```
//!
//! Shapes are written `d0xd1x…` (`-` for a scalar). Tensor values are
//! stored as f32, so a loaded checkpoint saves back byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
const MAGIC: &str = "stylegrid-checkpoint";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub stage: String,
    pub config_hash: String,
    pub seed: u64,
    /// Free-form single-token annotations (shapes, variant, …).
    pub meta: BTreeMap<String, String>,
}

impl Header {
    pub fn new(stage: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            version: FORMAT_VERSION,
            stage: stage.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            meta: BTreeMap::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta `{key}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: Header,
    pub tensors: ParamStore,
}

fn check_token(kind: &str, s: &str) -> Result<()> {
    ensure!(
        !s.is_empty() && !s.chars().any(char::is_whitespace),
        Checkpoint,
        "{} `{}` must be a non-empty token without whitespace",
        kind,
        s
    );
    Ok(())
}

fn shape_str(shape: &[usize]) -> String {
    if shape.is_empty() {
        "-".into()
    } else {
        shape.iter().map(usize::to_string).collect::<Vec<_>>().join("x")
    }
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split('x')
        .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape `{s}`"))))
        .collect()
}

impl Checkpoint {
    pub fn new(header: Header, tensors: ParamStore) -> Self {
        Self { header, tensors }
    }

    /// Manifest text and blob bytes.
    pub fn encode(&self) -> Result<(String, Vec<u8>)> {
        let h = &self.header;
        check_token("stage", &h.stage)?;
        check_token("config hash", &h.config_hash)?;
        let mut manifest = format!(
            "{MAGIC} {}\nstage {}\nconfig_hash {}\nseed {}\n",
            h.version, h.stage, h.config_hash, h.seed
        );
        for (k, v) in &h.meta {
            check_token("meta key", k)?;
            check_token("meta value", v)?;
            manifest.push_str(&format!("meta {k} {v}\n"));
        }
        let mut blob = Vec::new();
        for (name, t) in self.tensors.iter() {
            check_token("tensor name", name)?;
            let start = blob.len();
            for &v in t.data() {
                blob.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let bytes = &blob[start..];
            let digest = hex::encode(Sha256::digest(bytes));
            manifest.push_str(&format!(
                "tensor {name} f32 {} {start} {} {digest}\n",
                shape_str(t.shape()),
                bytes.len()
            ));
        }
        Ok((manifest, blob))
    }

    pub fn decode(manifest: &str, blob: &[u8]) -> Result<Self> {
        let mut lines = manifest.lines();
        let first = lines.next().unwrap_or_default();
        let version = first
            .strip_prefix(MAGIC)
            .map(str::trim)
            .and_then(|v| v.parse::<u32>().ok())
            .ok_or_else(|| Error::Checkpoint("not a checkpoint manifest".into()))?;
        ensure!(
            version == FORMAT_VERSION,
            Checkpoint,
            "unsupported checkpoint version {}",
            version
        );
        let mut stage = None;
        let mut config_hash = None;
        let mut seed = None;
        let mut meta = BTreeMap::new();
        let mut tensors = ParamStore::new();
        for (lineno, line) in lines.enumerate() {
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Checkpoint(format!("manifest line {}: `{line}`", lineno + 2));
            match f.as_slice() {
                [] => {}
                ["stage", s] => stage = Some(s.to_string()),
                ["config_hash", s] => config_hash = Some(s.to_string()),
                ["seed", s] => seed = Some(s.parse::<u64>().map_err(|_| bad())?),
                ["meta", k, v] => {
                    meta.insert(k.to_string(), v.to_string());
                }
                ["tensor", name, dtype, shape, offset, length, digest] => {
                    ensure!(*dtype == "f32", Checkpoint, "tensor {} has unsupported dtype {}", name, dtype);
                    let shape = parse_shape(shape)?;
                    let offset: usize = offset.parse().map_err(|_| bad())?;
                    let length: usize = length.parse().map_err(|_| bad())?;
                    let count: usize = shape.iter().product();
                    ensure!(
                        length == count * 4,
                        Checkpoint,
                        "tensor {}: length {} does not match shape {:?}",
                        name,
                        length,
                        shape
                    );
                    let end = offset.checked_add(length).ok_or_else(bad)?;
                    ensure!(
                        end <= blob.len(),
                        Checkpoint,
                        "tensor {}: extent {}..{} outside blob of {} bytes",
                        name,
                        offset,
                        end,
                        blob.len()
                    );
                    let bytes = &blob[offset..end];
                    ensure!(
                        hex::encode(Sha256::digest(bytes)) == *digest,
                        Checkpoint,
                        "tensor {}: checksum mismatch",
                        name
                    );
                    ensure!(!tensors.contains(name), Checkpoint, "duplicate tensor {}", name);
                    let data = bytes
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                        .collect();
                    tensors.insert(name.to_string(), Tensor::from_vec(&shape, data)?);
                }
                _ => return Err(bad()),
            }
        }
        let header = Header {
            version,
            stage: stage.ok_or_else(|| Error::Checkpoint("missing stage".into()))?,
            config_hash: config_hash.ok_or_else(|| Error::Checkpoint("missing config_hash".into()))?,
            seed: seed.ok_or_else(|| Error::Checkpoint("missing seed".into()))?,
            meta,
        };
        Ok(Self { header, tensors })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, blob) = self.encode()?;
        let mp = dir.join(MANIFEST_FILE);
        fs::write(&mp, manifest).map_err(|e| Error::io(&mp, e))?;
        let bp = dir.join(BLOB_FILE);
        fs::write(&bp, blob).map_err(|e| Error::io(&bp, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mp = dir.join(MANIFEST_FILE);
        let manifest = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let bp = dir.join(BLOB_FILE);
        let blob = fs::read(&bp).map_err(|e| Error::io(&bp, e))?;
        Self::decode(&manifest, &blob)
    }

    /// The same checkpoint with every tensor rounded to f32.
    pub fn quantized(&self) -> Self {
        let mut tensors = ParamStore::new();
        for (name, t) in self.tensors.iter() {
            tensors.insert(name.to_string(), t.map(|v| v as f32 as f64));
        }
        Self {
            header: self.header.clone(),
            tensors,
        }
    }
}

/// Names whose tensors differ between two stores (including names present in
/// only one of them).
pub fn diff_names(a: &ParamStore, b: &ParamStore) -> Vec<String> {
    let mut out: Vec<String> = a
        .iter()
        .filter(|(n, t)| b.get(n) != Some(*t))
        .map(|(n, _)| n.to_string())
        .collect();
    out.extend(b.names().filter(|n| !a.contains(n)).map(String::from));
    out.sort();
    out
}
