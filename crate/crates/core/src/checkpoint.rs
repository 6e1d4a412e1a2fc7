//! Tensor bundles: a JSON manifest next to a little-endian `f32` blob.
//!
//! `<stem>.json` holds the format tag, version, a config echo, free-form
//! metadata, the tensor index and the SHA-256 of `<stem>.bin`. Every tensor
//! starts at a 64-byte aligned offset and the blob is zero-padded to the
//! next boundary after each tensor.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneModel};
use crate::error::Result;
use crate::experts::AdapterFlags;
use crate::numerics::Matrix;
use crate::{Error, Scalar};

pub const FORMAT: &str = "mlae-bundle";
pub const VERSION: u32 = 1;
pub const ALIGN: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

impl TensorEntry {
    /// Bytes the tensor occupies in the blob, padding included.
    pub fn padded_bytes(&self) -> u64 {
        align(self.nbytes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub config: Value,
    pub meta: Value,
    pub tensors: Vec<TensorEntry>,
    pub blob: String,
    pub blob_bytes: u64,
    pub sha256: String,
}

fn align(n: u64) -> u64 {
    n.div_ceil(ALIGN) * ALIGN
}

/// Path of the blob that belongs to manifest `path`.
pub fn blob_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Writes `tensors` to `path` (manifest) and its sibling blob.
pub fn write_bundle<T: Scalar>(
    path: &Path,
    kind: &str,
    config: Value,
    meta: Value,
    tensors: &[(String, Matrix<T>)],
) -> Result<Manifest> {
    let mut blob = Vec::new();
    let mut index = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let offset = blob.len() as u64;
        for &v in m.data() {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        let nbytes = blob.len() as u64 - offset;
        blob.resize(align(blob.len() as u64) as usize, 0);
        index.push(TensorEntry {
            name: name.clone(),
            shape: [m.rows(), m.cols()],
            dtype: "f32".into(),
            offset,
            nbytes,
        });
    }
    let bpath = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        kind: kind.into(),
        config,
        meta,
        tensors: index,
        blob: bpath
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Format(format!("bad bundle path {}", path.display())))?
            .to_string(),
        blob_bytes: blob.len() as u64,
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&bpath, &blob)?;
    fs::write(path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

/// Reads and parses a manifest without touching the blob.
pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Format(format!(
            "{}: unsupported bundle {} v{}",
            path.display(),
            manifest.format,
            manifest.version
        )));
    }
    Ok(manifest)
}

/// Loads a bundle, verifying the blob hash and every tensor's placement.
pub fn read_bundle<T: Scalar>(path: &Path) -> Result<(Manifest, BTreeMap<String, Matrix<T>>)> {
    let manifest = read_manifest(path)?;
    let bpath = path.with_file_name(&manifest.blob);
    let blob = fs::read(&bpath)?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.sha256 || blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Corrupt(format!(
            "{}: content hash does not match the manifest",
            bpath.display()
        )));
    }
    let mut out = BTreeMap::new();
    for e in &manifest.tensors {
        let [rows, cols] = e.shape;
        let end = e.offset.checked_add(e.nbytes);
        let placed = e.dtype == "f32"
            && e.offset % ALIGN == 0
            && e.nbytes == (rows * cols * 4) as u64
            && end.is_some_and(|end| end <= blob.len() as u64);
        if !placed {
            return Err(Error::Format(format!("tensor `{}` has an invalid index entry", e.name)));
        }
        let bytes = &blob[e.offset as usize..(e.offset + e.nbytes) as usize];
        let data = bytes
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let m = Matrix::new(rows, cols, data).map_err(|_| Error::Corrupt(format!("tensor `{}` is not finite", e.name)))?;
        if out.insert(e.name.clone(), m).is_some() {
            return Err(Error::Format(format!("duplicate tensor `{}`", e.name)));
        }
    }
    Ok((manifest, out))
}

/// Model description stored in a checkpoint's `meta` field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub backbone: BackboneConfig,
    pub adapter: Option<AdapterMeta>,
    pub merged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterMeta {
    pub sub_rank: usize,
    pub flags: AdapterFlags,
}

pub const MODEL_KIND: &str = "model";

pub fn save_model<T: Scalar>(path: &Path, model: &BackboneModel<T>, config: Value) -> Result<Manifest> {
    let adapter = model.adapters().and_then(|b| b.first()).map(|b| AdapterMeta {
        sub_rank: b.sub_rank(),
        flags: *b.flags(),
    });
    let meta = ModelMeta {
        backbone: model.config().clone(),
        adapter,
        merged: model.is_merged(),
    };
    let tensors: Vec<(String, Matrix<T>)> = model.named_tensors().into_iter().map(|(n, m, _)| (n, m)).collect();
    write_bundle(path, MODEL_KIND, config, serde_json::to_value(meta)?, &tensors)
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<(BackboneModel<T>, Manifest)> {
    let (manifest, tensors) = read_bundle(path)?;
    if manifest.kind != MODEL_KIND {
        return Err(Error::Format(format!("{} holds a {}, not a model", path.display(), manifest.kind)));
    }
    let meta: ModelMeta = serde_json::from_value(manifest.meta.clone())
        .map_err(|e| Error::Format(format!("model metadata: {e}")))?;
    let adapter = meta.adapter.map(|a| (a.sub_rank, a.flags));
    let model = BackboneModel::from_named(&meta.backbone, adapter, meta.merged, tensors)?;
    Ok((model, manifest))
}

/// Adapter tensor names of a checkpoint.
pub fn adapter_tensors(manifest: &Manifest) -> impl Iterator<Item = &TensorEntry> {
    manifest.tensors.iter().filter(|t| t.name.contains(".adapter."))
}
