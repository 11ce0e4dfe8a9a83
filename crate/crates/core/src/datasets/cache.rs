//! On-disk dataset cache: `<stem>.manifest` (TOML) next to `<stem>.x.bin`
//! (little-endian f64 features), `<stem>.y.bin` and optionally `<stem>.z.bin`
//! (little-endian u32 labels).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::Tensor;

const FORMAT: &str = "unifai-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    n: usize,
    dim: usize,
    num_classes: usize,
    num_z_classes: usize,
    features: BlobEntry,
    y: BlobEntry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    z: Option<BlobEntry>,
    meta: DatasetMeta,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobEntry {
    file: String,
    bytes: u64,
    sha256: String,
}

fn sibling(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Strips a trailing `.manifest` so either the stem or the manifest path works.
pub fn cache_stem(path: &Path) -> PathBuf {
    match path.extension().and_then(|e| e.to_str()) {
        Some("manifest") => path.with_extension(""),
        _ => path.to_path_buf(),
    }
}

fn write_blob(stem: &Path, suffix: &str, bytes: &[u8]) -> Result<BlobEntry> {
    let path = sibling(stem, suffix);
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobEntry {
        file: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        bytes: bytes.len() as u64,
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

fn labels_le(labels: &[usize]) -> Vec<u8> {
    labels.iter().flat_map(|&l| (l as u32).to_le_bytes()).collect()
}

/// Writes the bundle and returns the manifest path.
pub fn write_cache(dataset: &LabeledDataset, stem: &Path) -> Result<PathBuf> {
    let stem = cache_stem(stem);
    let x: Vec<u8> = dataset
        .features
        .data()
        .iter()
        .flat_map(|v| v.to_le_bytes())
        .collect();
    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        n: dataset.len(),
        dim: dataset.dim(),
        num_classes: dataset.num_classes,
        num_z_classes: dataset.num_z_classes,
        features: write_blob(&stem, ".x.bin", &x)?,
        y: write_blob(&stem, ".y.bin", &labels_le(&dataset.y))?,
        z: dataset
            .z
            .as_ref()
            .map(|z| write_blob(&stem, ".z.bin", &labels_le(z)))
            .transpose()?,
        meta: dataset.meta.clone(),
    };
    let path = sibling(&stem, ".manifest");
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_blob(dir: &Path, entry: &BlobEntry) -> Result<Vec<u8>> {
    let path = dir.join(&entry.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if (bytes.len() as u64) < entry.bytes {
        return Err(Error::TruncatedBlob {
            path,
            needed: entry.bytes,
            available: bytes.len() as u64,
        });
    }
    if hex::encode(Sha256::digest(&bytes)) != entry.sha256 {
        return Err(Error::Format {
            path,
            message: "content hash does not match the manifest".into(),
        });
    }
    Ok(bytes)
}

fn labels_from(bytes: &[u8]) -> Vec<usize> {
    bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect()
}

pub fn read_cache(path: &Path) -> Result<LabeledDataset> {
    let stem = cache_stem(path);
    let manifest_path = sibling(&stem, ".manifest");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let parse_err = |message: String| Error::ManifestParse {
        path: manifest_path.clone(),
        message,
    };
    let m: Manifest = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if m.format != FORMAT || m.version != VERSION {
        return Err(parse_err(format!("unsupported format {} v{}", m.format, m.version)));
    }
    let expect = |entry: &BlobEntry, bytes: usize| {
        if entry.bytes as usize != bytes {
            Err(parse_err(format!(
                "`{}` should hold {bytes} bytes, manifest says {}",
                entry.file, entry.bytes
            )))
        } else {
            Ok(())
        }
    };
    expect(&m.features, m.n * m.dim * 8)?;
    expect(&m.y, m.n * 4)?;
    if let Some(z) = &m.z {
        expect(z, m.n * 4)?;
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let x = read_blob(dir, &m.features)?;
    let features = Tensor::matrix(
        m.n,
        m.dim,
        x.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )?;
    let y = labels_from(&read_blob(dir, &m.y)?);
    let z = m
        .z
        .as_ref()
        .map(|e| read_blob(dir, e).map(|b| labels_from(&b)))
        .transpose()?;
    LabeledDataset::new(features, y, z, m.num_classes, m.num_z_classes, m.meta)
}
