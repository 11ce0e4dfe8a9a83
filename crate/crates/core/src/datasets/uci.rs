//! Adult and German credit loaders.
//!
//! Both drop their sensitive attribute from the features and expose it as `z`:
//! Adult's age (binarized at [`ADULT_AGE_THRESHOLD`]) and German's gender
//! (from the personal-status-and-sex attribute). Continuous columns are
//! standardized and categorical columns one-hot encoded, fitted on the
//! training split only.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use super::{ColumnMeta, DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{SeedRng, Tensor};

/// `z = 1` iff age is at least this value.
pub const ADULT_AGE_THRESHOLD: u32 = 44;
pub const GERMAN_TRAIN_ROWS: usize = 700;
pub const GERMAN_TEST_ROWS: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Kind {
    Continuous,
    Categorical,
    /// Used for a label or the sensitive attribute, not a feature.
    Target,
}

const ADULT_SCHEMA: [(&str, Kind); 15] = [
    ("age", Kind::Target),
    ("workclass", Kind::Categorical),
    ("fnlwgt", Kind::Continuous),
    ("education", Kind::Categorical),
    ("education-num", Kind::Continuous),
    ("marital-status", Kind::Categorical),
    ("occupation", Kind::Categorical),
    ("relationship", Kind::Categorical),
    ("race", Kind::Categorical),
    ("sex", Kind::Categorical),
    ("capital-gain", Kind::Continuous),
    ("capital-loss", Kind::Continuous),
    ("hours-per-week", Kind::Continuous),
    ("native-country", Kind::Categorical),
    ("income", Kind::Target),
];

const GERMAN_SCHEMA: [(&str, Kind); 21] = [
    ("checking-status", Kind::Categorical),
    ("duration", Kind::Continuous),
    ("credit-history", Kind::Categorical),
    ("purpose", Kind::Categorical),
    ("credit-amount", Kind::Continuous),
    ("savings", Kind::Categorical),
    ("employment-since", Kind::Categorical),
    ("installment-rate", Kind::Continuous),
    ("personal-status-sex", Kind::Target),
    ("other-debtors", Kind::Categorical),
    ("residence-since", Kind::Continuous),
    ("property", Kind::Categorical),
    ("age", Kind::Continuous),
    ("other-installments", Kind::Categorical),
    ("housing", Kind::Categorical),
    ("existing-credits", Kind::Continuous),
    ("job", Kind::Categorical),
    ("people-liable", Kind::Continuous),
    ("telephone", Kind::Categorical),
    ("foreign-worker", Kind::Categorical),
    ("credit-risk", Kind::Target),
];

/// Female codes of the German personal-status-and-sex attribute.
const GERMAN_FEMALE: [&str; 2] = ["A92", "A95"];

/// One parsed record with the line it came from.
#[derive(Clone, Debug)]
pub(crate) struct Record {
    pub line: usize,
    pub fields: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_source(path: &Path, hashes: &mut BTreeMap<String, String>) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    hashes.insert(name, sha256_hex(&bytes));
    String::from_utf8(bytes).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Splits non-empty lines into fields; rows containing `?` are dropped.
/// Lines starting with `|` are comments.
fn parse_records(
    path: &Path,
    text: &str,
    expected: usize,
    split: impl Fn(&str) -> Vec<String>,
) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('|') {
            continue;
        }
        let fields = split(line);
        if fields.len() != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected {expected} fields, found {}", fields.len()),
            });
        }
        if fields.iter().any(|f| f == "?") {
            continue;
        }
        out.push(Record { line: i + 1, fields });
    }
    Ok(out)
}

fn comma_fields(line: &str) -> Vec<String> {
    line.split(',').map(|f| f.trim().to_string()).collect()
}

fn whitespace_fields(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_string).collect()
}

fn parse_number(path: &Path, rec: &Record, col: usize, name: &str) -> Result<f64> {
    rec.fields[col]
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: rec.line,
            message: format!("column `{name}`: `{}` is not a number", rec.fields[col]),
        })
}

/// Fits standardization and one-hot maps on `records`.
pub(crate) fn fit_columns(
    path: &Path,
    schema: &[(&str, Kind)],
    records: &[Record],
) -> Result<Vec<ColumnMeta>> {
    let mut metas = Vec::new();
    for (col, &(name, kind)) in schema.iter().enumerate() {
        match kind {
            Kind::Target => {}
            Kind::Continuous => {
                let vals = records
                    .iter()
                    .map(|r| parse_number(path, r, col, name))
                    .collect::<Result<Vec<f64>>>()?;
                let n = vals.len().max(1) as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let sd = var.sqrt();
                metas.push(ColumnMeta::Continuous {
                    name: name.into(),
                    mean,
                    scale: if sd > 0.0 { sd } else { 1.0 },
                });
            }
            Kind::Categorical => {
                let cats: BTreeSet<&str> = records.iter().map(|r| r.fields[col].as_str()).collect();
                metas.push(ColumnMeta::OneHot {
                    name: name.into(),
                    categories: cats.into_iter().map(str::to_string).collect(),
                });
            }
        }
    }
    Ok(metas)
}

/// Applies fitted metadata. Unseen categories become all-zero blocks; the
/// second return value counts them.
pub(crate) fn transform(
    path: &Path,
    schema: &[(&str, Kind)],
    metas: &[ColumnMeta],
    records: &[Record],
) -> Result<(Tensor, usize)> {
    let width: usize = metas.iter().map(ColumnMeta::width).sum();
    let feature_cols: Vec<usize> = schema
        .iter()
        .enumerate()
        .filter(|(_, (_, k))| *k != Kind::Target)
        .map(|(i, _)| i)
        .collect();
    let lookups: Vec<Option<BTreeMap<&str, usize>>> = metas
        .iter()
        .map(|m| match m {
            ColumnMeta::OneHot { categories, .. } => Some(
                categories
                    .iter()
                    .enumerate()
                    .map(|(i, c)| (c.as_str(), i))
                    .collect(),
            ),
            ColumnMeta::Continuous { .. } => None,
        })
        .collect();

    let mut data = Vec::with_capacity(records.len() * width);
    let mut unseen = 0;
    for rec in records {
        for ((meta, lookup), &col) in metas.iter().zip(&lookups).zip(&feature_cols) {
            match meta {
                ColumnMeta::Continuous { name, mean, scale } => {
                    let v = parse_number(path, rec, col, name)?;
                    data.push((v - mean) / scale);
                }
                ColumnMeta::OneHot { categories, .. } => {
                    let start = data.len();
                    data.resize(start + categories.len(), 0.0);
                    match lookup.as_ref().unwrap().get(rec.fields[col].as_str()) {
                        Some(&k) => data[start + k] = 1.0,
                        None => unseen += 1,
                    }
                }
            }
        }
    }
    Ok((Tensor::matrix(records.len(), width, data)?, unseen))
}

fn adult_labels(path: &Path, records: &[Record], threshold: u32) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut y = Vec::with_capacity(records.len());
    let mut z = Vec::with_capacity(records.len());
    for r in records {
        let income = r.fields[14].trim_end_matches('.');
        y.push(match income {
            ">50K" => 1,
            "<=50K" => 0,
            other => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: r.line,
                    message: format!("unknown income label `{other}`"),
                })
            }
        });
        let age = parse_number(path, r, 0, "age")?;
        z.push(usize::from(age >= threshold as f64));
    }
    Ok((y, z))
}

fn read_adult_records(path: &Path, hashes: &mut BTreeMap<String, String>) -> Result<Vec<Record>> {
    let text = read_source(path, hashes)?;
    parse_records(path, &text, ADULT_SCHEMA.len(), comma_fields)
}

/// Ages of every complete Adult row across both files.
pub fn adult_ages(train_path: &Path, test_path: &Path) -> Result<Vec<u32>> {
    let mut hashes = BTreeMap::new();
    let mut ages = Vec::new();
    for path in [train_path, test_path] {
        for r in read_adult_records(path, &mut hashes)? {
            ages.push(parse_number(path, &r, 0, "age")? as u32);
        }
    }
    Ok(ages)
}

/// Smallest integer cut `t` such that the majority share of `age >= t` lies
/// within `tolerance` of `target`.
pub fn choose_age_threshold(ages: &[u32], target: f64, tolerance: f64) -> Option<u32> {
    let n = ages.len() as f64;
    let (lo, hi) = (*ages.iter().min()?, *ages.iter().max()?);
    (lo + 1..=hi).find(|&t| {
        let older = ages.iter().filter(|&&a| a >= t).count() as f64 / n;
        (older.max(1.0 - older) - target).abs() <= tolerance
    })
}

/// Loads `adult.data` / `adult.test`; returns `(train, test)`.
pub fn load_adult(train_path: &Path, test_path: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut hashes = BTreeMap::new();
    let train_rec = read_adult_records(train_path, &mut hashes)?;
    let test_rec = read_adult_records(test_path, &mut hashes)?;
    let metas = fit_columns(train_path, &ADULT_SCHEMA, &train_rec)?;

    let build = |path: &Path, recs: &[Record]| -> Result<LabeledDataset> {
        let (x, unseen) = transform(path, &ADULT_SCHEMA, &metas, recs)?;
        let (y, z) = adult_labels(path, recs, ADULT_AGE_THRESHOLD)?;
        let mut notes = BTreeMap::new();
        notes.insert("age_threshold".into(), ADULT_AGE_THRESHOLD.to_string());
        notes.insert("unseen_categories".into(), unseen.to_string());
        let meta = DatasetMeta {
            source: "adult".into(),
            seed: 0,
            columns: metas.clone(),
            image_dims: None,
            source_hashes: hashes.clone(),
            notes,
        };
        LabeledDataset::new(x, y, Some(z), 2, 2, meta)
    };
    Ok((build(train_path, &train_rec)?, build(test_path, &test_rec)?))
}

/// Loads `german.data` and splits it 700/300 by `seed`; returns `(train, test)`.
pub fn load_german(path: &Path, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut hashes = BTreeMap::new();
    let text = read_source(path, &mut hashes)?;
    let records = parse_records(path, &text, GERMAN_SCHEMA.len(), whitespace_fields)?;
    if records.len() != GERMAN_TRAIN_ROWS + GERMAN_TEST_ROWS {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!(
                "expected {} complete rows, found {}",
                GERMAN_TRAIN_ROWS + GERMAN_TEST_ROWS,
                records.len()
            ),
        });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut SeedRng::stream(seed, "german-split"));
    let pick = |idx: &[usize]| -> Vec<Record> {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.iter().map(|&i| records[i].clone()).collect()
    };
    let train_rec = pick(&order[..GERMAN_TRAIN_ROWS]);
    let test_rec = pick(&order[GERMAN_TRAIN_ROWS..]);
    let metas = fit_columns(path, &GERMAN_SCHEMA, &train_rec)?;

    let build = |recs: &[Record]| -> Result<LabeledDataset> {
        let (x, unseen) = transform(path, &GERMAN_SCHEMA, &metas, recs)?;
        let mut y = Vec::with_capacity(recs.len());
        let mut z = Vec::with_capacity(recs.len());
        for r in recs {
            y.push(match r.fields[20].as_str() {
                "1" => 1,
                "2" => 0,
                other => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        line: r.line,
                        message: format!("unknown credit-risk label `{other}`"),
                    })
                }
            });
            z.push(usize::from(GERMAN_FEMALE.contains(&r.fields[8].as_str())));
        }
        let mut notes = BTreeMap::new();
        notes.insert("unseen_categories".into(), unseen.to_string());
        let meta = DatasetMeta {
            source: "german".into(),
            seed,
            columns: metas.clone(),
            image_dims: None,
            source_hashes: hashes.clone(),
            notes,
        };
        LabeledDataset::new(x, y, Some(z), 2, 2, meta)
    };
    Ok((build(&train_rec)?, build(&test_rec)?))
}
