//! Two-component PCA by power iteration with deflation.

use crate::error::{Error, Result};
use crate::nn::Tensor;

const TOLERANCE: f64 = 1e-9;
const MAX_ITERATIONS: usize = 100_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    /// Unit principal directions; the largest-magnitude entry of each is positive.
    pub components: [Vec<f64>; 2],
    /// Variances along the two directions.
    pub eigenvalues: [f64; 2],
    /// Trace of the covariance.
    pub total_variance: f64,
    pub mean: Vec<f64>,
    /// `n × 2` projection of the centered rows.
    pub projected: Tensor,
}

fn covariance(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; d * d];
    for i in 0..n {
        let r: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in a..d {
                cov[a * d + b] += r[a] * r[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            let v = cov[a * d + b] / n as f64;
            cov[a * d + b] = v;
            cov[b * d + a] = v;
        }
    }
    (mean, cov)
}

fn mat_vec(m: &[f64], v: &[f64]) -> Vec<f64> {
    m.chunks(v.len())
        .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    norm
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        for x in v.iter_mut() {
            *x = -*x;
        }
    }
}

/// Dominant eigenpair of a symmetric positive semidefinite `d × d` matrix.
fn power_iteration(m: &[f64], d: usize) -> (f64, Vec<f64>) {
    // deterministic start with no symmetry that could zero a component
    let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + 1.0).sqrt() / d as f64).collect();
    normalize(&mut v);
    let scale = m.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1.0);
    let mut lambda = 0.0;
    for _ in 0..MAX_ITERATIONS {
        let mut w = mat_vec(m, &v);
        lambda = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        let residual = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - lambda * b).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= TOLERANCE * scale {
            break;
        }
        if normalize(&mut w) == 0.0 {
            // v lies in the null space; any unit vector is an eigenvector
            break;
        }
        v = w;
    }
    fix_sign(&mut v);
    (lambda, v)
}

/// Projects mean-centered rows onto the top two principal directions.
pub fn pca_2d(x: &Tensor) -> Result<Pca2> {
    if x.shape().len() != 2 || x.rows() < 3 {
        return Err(Error::Contract(format!(
            "2D projection needs at least 3 rows, got {:?}",
            x.shape()
        )));
    }
    let d = x.cols();
    if d < 2 {
        return Err(Error::Contract("2D projection needs at least 2 columns".into()));
    }
    let (mean, mut cov) = covariance(x);
    let total_variance = (0..d).map(|i| cov[i * d + i]).sum();
    let (l1, v1) = power_iteration(&cov, d);
    for a in 0..d {
        for b in 0..d {
            cov[a * d + b] -= l1 * v1[a] * v1[b];
        }
    }
    let (l2, mut v2) = power_iteration(&cov, d);
    // re-orthogonalize against the first direction
    let dot: f64 = v1.iter().zip(&v2).map(|(a, b)| a * b).sum();
    for (b, a) in v2.iter_mut().zip(&v1) {
        *b -= dot * a;
    }
    normalize(&mut v2);
    fix_sign(&mut v2);

    let mut proj = Vec::with_capacity(x.rows() * 2);
    for i in 0..x.rows() {
        let r: Vec<f64> = x.row(i).iter().zip(&mean).map(|(v, m)| v - m).collect();
        proj.push(r.iter().zip(&v1).map(|(a, b)| a * b).sum());
        proj.push(r.iter().zip(&v2).map(|(a, b)| a * b).sum());
    }
    Ok(Pca2 {
        components: [v1, v2],
        eigenvalues: [l1, l2.max(0.0)],
        total_variance,
        mean,
        projected: Tensor::matrix(x.rows(), 2, proj)?,
    })
}
