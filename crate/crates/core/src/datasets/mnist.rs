//! IDX ingestion plus the rotation and morphology augmentations.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::Tensor;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Training angles in degrees; `z` is the index into this list.
pub const MNIST_ROT_ANGLES: [f64; 5] = [-45.0, -22.5, 0.0, 22.5, 45.0];

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn be_u32(&self, at: usize) -> Result<u32> {
        let b = self.bytes.get(at..at + 4).ok_or_else(|| self.err("header truncated"))?;
        Ok(u32::from_be_bytes(b.try_into().unwrap()))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            message: message.into(),
        }
    }
}

fn read_file(path: &Path, hashes: &mut BTreeMap<String, String>) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    hashes.insert(name, hex::encode(Sha256::digest(&bytes)));
    Ok(bytes)
}

/// Reads an IDX image/label pair, keeping at most `limit` leading items.
/// Pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx_limit(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<LabeledDataset> {
    let mut hashes = BTreeMap::new();
    let img_bytes = read_file(images_path, &mut hashes)?;
    let lbl_bytes = read_file(labels_path, &mut hashes)?;
    let img = Reader {
        path: images_path,
        bytes: &img_bytes,
    };
    let lbl = Reader {
        path: labels_path,
        bytes: &lbl_bytes,
    };

    let magic = img.be_u32(0)?;
    if magic != IMAGES_MAGIC {
        return Err(img.err(format!("bad image magic {magic:#010x}")));
    }
    let magic = lbl.be_u32(0)?;
    if magic != LABELS_MAGIC {
        return Err(lbl.err(format!("bad label magic {magic:#010x}")));
    }
    let n = img.be_u32(4)? as usize;
    let (h, w) = (img.be_u32(8)? as usize, img.be_u32(12)? as usize);
    let n_labels = lbl.be_u32(4)? as usize;
    if n != n_labels {
        return Err(lbl.err(format!("{n_labels} labels for {n} images")));
    }
    if h == 0 || w == 0 {
        return Err(img.err("zero image dimension"));
    }
    let pixels = h * w;
    if img_bytes.len() < 16 + n * pixels {
        return Err(img.err(format!(
            "payload truncated: need {} bytes, have {}",
            16 + n * pixels,
            img_bytes.len()
        )));
    }
    if lbl_bytes.len() < 8 + n {
        return Err(lbl.err(format!(
            "payload truncated: need {} bytes, have {}",
            8 + n,
            lbl_bytes.len()
        )));
    }
    let keep = limit.map_or(n, |l| l.min(n));
    if keep == 0 {
        return Err(img.err("no images"));
    }
    let data = img_bytes[16..16 + keep * pixels]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    let y: Vec<usize> = lbl_bytes[8..8 + keep].iter().map(|&b| b as usize).collect();
    if let Some(&bad) = y.iter().find(|&&l| l > 9) {
        return Err(lbl.err(format!("label {bad} outside 0..=9")));
    }
    let meta = DatasetMeta {
        source: "mnist".into(),
        image_dims: Some((h, w)),
        source_hashes: hashes,
        ..DatasetMeta::default()
    };
    LabeledDataset::new(Tensor::matrix(keep, pixels, data)?, y, None, 10, 0, meta)
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    load_mnist_idx_limit(images_path, labels_path, None)
}

fn image_dims(base: &LabeledDataset) -> Result<(usize, usize)> {
    let (h, w) = base
        .meta
        .image_dims
        .ok_or_else(|| Error::Contract("dataset is not image data".into()))?;
    if h * w != base.dim() {
        return Err(Error::dim("image dims", &[h, w], &[base.dim()]));
    }
    Ok((h, w))
}

/// Rotates one image counterclockwise by `degrees` about the grid center with
/// bilinear interpolation; samples outside the frame read as 0.
pub fn rotate_image(src: &[f64], h: usize, w: usize, degrees: f64) -> Vec<f64> {
    if degrees == 0.0 {
        return src.to_vec();
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let at = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            src[r as usize * w + c as usize]
        }
    };
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let dx = c as f64 - cx;
            let dy = r as f64 - cy;
            // inverse map: rows grow downward, so the visual rotation flips sign on dy
            let sx = cx + cos * dx - sin * dy;
            let sy = cy + sin * dx + cos * dy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[r * w + c] = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                + at(y0, x0 + 1) * fx * (1.0 - fy)
                + at(y0 + 1, x0) * (1.0 - fx) * fy
                + at(y0 + 1, x0 + 1) * fx * fy;
        }
    }
    out
}

/// One copy of every image per angle, laid out angle-major; `z` is the angle index.
pub fn make_mnist_rot(base: &LabeledDataset, angles: &[f64]) -> Result<LabeledDataset> {
    let (h, w) = image_dims(base)?;
    if angles.is_empty() {
        return Err(Error::Parameter("at least one angle is required".into()));
    }
    let n = base.len();
    let mut data = Vec::with_capacity(n * angles.len() * h * w);
    let mut y = Vec::with_capacity(n * angles.len());
    let mut z = Vec::with_capacity(n * angles.len());
    for (a, &deg) in angles.iter().enumerate() {
        for i in 0..n {
            data.extend(rotate_image(base.features.row(i), h, w, deg));
            y.push(base.y[i]);
            z.push(a);
        }
    }
    let mut meta = base.meta.clone();
    meta.source = format!("{}-rot", base.meta.source);
    meta.notes.insert(
        "angles".into(),
        angles.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
    );
    LabeledDataset::new(
        Tensor::matrix(n * angles.len(), h * w, data)?,
        y,
        Some(z),
        base.num_classes,
        angles.len().max(2),
        meta,
    )
}

/// Grayscale morphology with a square window of side `k`, anchored at `k / 2`.
/// Dilation takes the max over `p - o`, erosion the min over `p + o`, for
/// window offsets `o`; out-of-frame pixels are ignored.
pub fn morph_image(src: &[f64], h: usize, w: usize, k: usize, dilate: bool) -> Vec<f64> {
    let a = (k / 2) as isize;
    let offsets: Vec<isize> = (-a..k as isize - a).collect();
    let sign = if dilate { -1 } else { 1 };
    let mut out = vec![0.0; h * w];
    for r in 0..h as isize {
        for c in 0..w as isize {
            let mut acc = if dilate { f64::NEG_INFINITY } else { f64::INFINITY };
            for &dr in &offsets {
                for &dc in &offsets {
                    let (rr, cc) = (r + sign * dr, c + sign * dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let v = src[rr as usize * w + cc as usize];
                    acc = if dilate { acc.max(v) } else { acc.min(v) };
                }
            }
            out[r as usize * w + c as usize] = acc;
        }
    }
    out
}

/// Dilation for `kappa > 0`, erosion for `kappa < 0`, identity for 0.
pub fn make_mnist_dil(base: &LabeledDataset, kappa: i32) -> Result<LabeledDataset> {
    let (h, w) = image_dims(base)?;
    if kappa.abs() == 1 {
        return Err(Error::Parameter(
            "kappa = ±1 is a 1×1 kernel; use 0 for the identity".into(),
        ));
    }
    let mut features = base.features.clone();
    if kappa != 0 {
        let k = kappa.unsigned_abs() as usize;
        for i in 0..base.len() {
            let img = morph_image(base.features.row(i), h, w, k, kappa > 0);
            features.row_mut(i).copy_from_slice(&img);
        }
    }
    let mut meta = base.meta.clone();
    meta.source = format!("{}-dil", base.meta.source);
    meta.notes.insert("kappa".into(), kappa.to_string());
    LabeledDataset::new(features, base.y.clone(), None, base.num_classes, 0, meta)
}
