use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{DatasetMeta, LabeledDataset};
use crate::error::{Error, Result};
use crate::nn::{SeedRng, Tensor};

/// Gaussian-cluster generator with a signal block driven by `y` and a nuisance
/// block driven by `z`.
///
/// With probability `rho` a row gets `z = y mod num_z_classes`, otherwise `z`
/// is uniform, so `rho = 0` makes `z` independent of `y`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n: usize,
    pub signal_dim: usize,
    pub nuisance_dim: usize,
    pub num_y_classes: usize,
    pub num_z_classes: usize,
    pub rho: f64,
    pub noise_std: f64,
    pub seed: u64,
    /// Spread of the class centers in the signal block.
    #[serde(default = "one")]
    pub signal_scale: f64,
    /// Spread of the class centers in the nuisance block.
    #[serde(default = "one")]
    pub nuisance_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n: 10_000,
            signal_dim: 8,
            nuisance_dim: 8,
            num_y_classes: 4,
            num_z_classes: 4,
            rho: 0.0,
            noise_std: 1.0,
            seed: 0,
            signal_scale: 1.0,
            nuisance_scale: 1.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("synthetic.{key}: {why}")));
        if !(0.0..=1.0).contains(&self.rho) {
            return bad("rho", format!("must lie in [0, 1], got {}", self.rho));
        }
        if self.n == 0 {
            return bad("n", "must be positive".into());
        }
        if self.signal_dim == 0 {
            return bad("signal_dim", "must be >= 1".into());
        }
        if self.nuisance_dim == 0 {
            return bad("nuisance_dim", "must be >= 1".into());
        }
        if self.num_y_classes < 2 {
            return bad("num_y_classes", "must be >= 2".into());
        }
        if self.num_z_classes < 2 {
            return bad("num_z_classes", "must be >= 2".into());
        }
        for (key, v) in [
            ("noise_std", self.noise_std),
            ("signal_scale", self.signal_scale),
            ("nuisance_scale", self.nuisance_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(key, format!("must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }
}

pub fn make_synthetic(config: &SyntheticConfig) -> Result<LabeledDataset> {
    config.validate()?;
    let mut rng = SeedRng::stream(config.seed, "synthetic");
    let centers = |rng: &mut SeedRng, classes: usize, dim: usize, scale: f64| -> Vec<Vec<f64>> {
        (0..classes)
            .map(|_| {
                (0..dim)
                    .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect()
    };
    let signal = centers(&mut rng, config.num_y_classes, config.signal_dim, config.signal_scale);
    let nuisance = centers(&mut rng, config.num_z_classes, config.nuisance_dim, config.nuisance_scale);

    let d = config.signal_dim + config.nuisance_dim;
    let mut data = Vec::with_capacity(config.n * d);
    let mut ys = Vec::with_capacity(config.n);
    let mut zs = Vec::with_capacity(config.n);
    for _ in 0..config.n {
        let y = rng.random_range(0..config.num_y_classes);
        let tied = rng.random::<f64>() < config.rho;
        let z = if tied {
            y % config.num_z_classes
        } else {
            rng.random_range(0..config.num_z_classes)
        };
        for c in signal[y].iter().chain(&nuisance[z]) {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(c + config.noise_std * noise);
        }
        ys.push(y);
        zs.push(z);
    }
    let meta = DatasetMeta {
        source: "synthetic".into(),
        seed: config.seed,
        ..DatasetMeta::default()
    };
    LabeledDataset::new(
        Tensor::matrix(config.n, d, data)?,
        ys,
        Some(zs),
        config.num_y_classes,
        config.num_z_classes,
        meta,
    )
}
