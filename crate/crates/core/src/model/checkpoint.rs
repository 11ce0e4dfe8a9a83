//! Two-file checkpoint bundle: `<stem>.manifest` (TOML) and `<stem>.bin`
//! (little-endian f64, parameters concatenated in manifest order).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{UnifAIModel, UnifAISpec};
use crate::error::{Error, Result};
use crate::training::LossWeights;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "unifai-checkpoint";

/// Run provenance stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub fingerprint: String,
    pub seed: u64,
    pub weights: LossWeights,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    blob: String,
    blob_bytes: u64,
    spec: UnifAISpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<CheckpointMeta>,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    count: u64,
}

/// Manifest and blob paths for a bundle. `path` may be the stem or either file.
pub fn bundle_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("manifest" | "bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = stem.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".manifest"), with(".bin"))
}

pub fn save_checkpoint(model: &UnifAIModel, path: &Path, meta: Option<&CheckpointMeta>) -> Result<()> {
    let (manifest_path, blob_path) = bundle_paths(path);
    let mut blob = Vec::with_capacity(model.params().scalar_count() * 8);
    let mut params = Vec::with_capacity(model.params().len());
    for (_, p) in model.params().iter() {
        params.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
            count: p.value.len() as u64,
        });
        for v in p.value.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        blob: blob_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_bytes: blob.len() as u64,
        spec: model.spec().clone(),
        run: meta.cloned(),
        params,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::Format {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<UnifAIModel> {
    load_checkpoint_with_meta(path).map(|(m, _)| m)
}

pub fn load_checkpoint_with_meta(path: &Path) -> Result<(UnifAIModel, Option<CheckpointMeta>)> {
    let (manifest_path, blob_path) = bundle_paths(path);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let parse_err = |message: String| Error::ManifestParse {
        path: manifest_path.clone(),
        message,
    };
    let manifest: Manifest = toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    if manifest.format != FORMAT {
        return Err(parse_err(format!("unknown format `{}`", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(parse_err(format!(
            "unsupported version {} (expected {CHECKPOINT_VERSION})",
            manifest.version
        )));
    }

    let mut model = UnifAIModel::build(manifest.spec, 0)?;
    if manifest.params.len() != model.params().len() {
        return Err(parse_err(format!(
            "manifest lists {} parameters, spec defines {}",
            manifest.params.len(),
            model.params().len()
        )));
    }

    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let available = blob.len() as u64;
    if available < manifest.blob_bytes {
        return Err(Error::TruncatedBlob {
            path: blob_path,
            needed: manifest.blob_bytes,
            available,
        });
    }

    let ids: Vec<_> = model.params().ids().collect();
    for (entry, id) in manifest.params.iter().zip(ids) {
        let param = model.params_mut().get_mut(id);
        if entry.name != param.name {
            return Err(parse_err(format!(
                "parameter `{}` found where `{}` was expected",
                entry.name, param.name
            )));
        }
        if entry.shape != param.value.shape() {
            return Err(Error::ShapeMismatch {
                path: manifest_path,
                name: entry.name.clone(),
                expected: param.value.shape().to_vec(),
                found: entry.shape.clone(),
            });
        }
        if entry.count != param.value.len() as u64 {
            return Err(parse_err(format!(
                "`{}`: count {} disagrees with its shape",
                entry.name, entry.count
            )));
        }
        let end = entry.offset + entry.count * 8;
        if end > available {
            return Err(Error::TruncatedBlob {
                path: blob_path,
                needed: end,
                available,
            });
        }
        let bytes = &blob[entry.offset as usize..end as usize];
        for (dst, chunk) in param.value.data_mut().iter_mut().zip(bytes.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((model, manifest.run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Variant};
    use crate::nn::{SeedRng, Tensor};
    use rand::Rng;

    fn small(variant: Variant) -> UnifAIModel {
        let spec = UnifAISpec::from_architecture(variant, 6, 3, 2, 3, 2, &Architecture::default());
        UnifAIModel::build(spec, 11).unwrap()
    }

    fn batch() -> Tensor {
        let mut rng = SeedRng::new(3);
        Tensor::matrix(9, 6, (0..54).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        for variant in [Variant::Full, Variant::NoDz, Variant::B1, Variant::B0] {
            let m = small(variant);
            let stem = dir.path().join(format!("ck_{variant}"));
            let meta = CheckpointMeta {
                fingerprint: "abc".into(),
                seed: 11,
                weights: LossWeights::default(),
            };
            save_checkpoint(&m, &stem, Some(&meta)).unwrap();
            let (back, got) = load_checkpoint_with_meta(&stem.with_extension("manifest")).unwrap();
            assert_eq!(got, Some(meta));
            assert_eq!(back.spec(), m.spec());
            for ((_, p), (_, q)) in m.params().iter().zip(back.params().iter()) {
                assert_eq!(p.name, q.name);
                let a: Vec<u64> = p.value.data().iter().map(|v| v.to_bits()).collect();
                let b: Vec<u64> = q.value.data().iter().map(|v| v.to_bits()).collect();
                assert_eq!(a, b);
            }
            let pa: Vec<u64> = m.predict(&batch()).unwrap().data().iter().map(|v| v.to_bits()).collect();
            let pb: Vec<u64> = back.predict(&batch()).unwrap().data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = small(Variant::Full);
        save_checkpoint(&m, &dir.path().join("a"), None).unwrap();
        save_checkpoint(&m, &dir.path().join("b"), None).unwrap();
        let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
        assert_eq!(read("a.bin"), read("b.bin"));
        let strip = |s: Vec<u8>| String::from_utf8(s).unwrap().replace("\"a.bin\"", "\"b.bin\"");
        assert_eq!(strip(read("a.manifest")), String::from_utf8(read("b.manifest")).unwrap());
    }

    #[test]
    fn edited_shape_is_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        save_checkpoint(&small(Variant::B1), &stem, None).unwrap();
        let mp = stem.with_extension("manifest");
        let text = fs::read_to_string(&mp).unwrap();
        let edited = text.replacen("shape = [6, 64]", "shape = [6, 63]", 1);
        assert_ne!(text, edited);
        fs::write(&mp, edited).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn empty_manifest_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        save_checkpoint(&small(Variant::B0), &stem, None).unwrap();
        fs::write(stem.with_extension("manifest"), "").unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(Error::ManifestParse { .. })));
    }

    #[test]
    fn truncated_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("ck");
        save_checkpoint(&small(Variant::Full), &stem, None).unwrap();
        let bp = stem.with_extension("bin");
        let mut bytes = fs::read(&bp).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&bp, bytes).unwrap();
        assert!(matches!(load_checkpoint(&stem), Err(Error::TruncatedBlob { .. })));
    }
}
