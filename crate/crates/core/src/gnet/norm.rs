use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::schema::ChannelKind;

const MIN_SD: f64 = 1e-12;

/// Per-channel affine normalization. Binary channels pass through
/// unchanged. Dose statistics cover treated steps only and are used by the
/// treatment head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub action_mean: [f64; 2],
    pub action_sd: [f64; 2],
    pub dose_mean: [f64; 2],
    pub dose_sd: [f64; 2],
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
    for v in values {
        n += 1;
        sum += v;
        sq += v * v;
    }
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / n as f64;
    let var = (sq / n as f64 - mean * mean).max(0.0);
    let sd = var.sqrt();
    // constant channels would divide by zero
    (mean, if sd < MIN_SD * mean.abs().max(1.0) { 1.0 } else { sd })
}

impl Normalizer {
    pub fn identity(n_channels: usize) -> Self {
        Self {
            mean: vec![0.0; n_channels],
            sd: vec![1.0; n_channels],
            action_mean: [0.0; 2],
            action_sd: [1.0; 2],
            dose_mean: [0.0; 2],
            dose_sd: [1.0; 2],
        }
    }

    /// Statistics over every row of the listed trajectories.
    pub fn fit(ds: &Dataset, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Empty("normalization needs at least one trajectory".into()));
        }
        let schema = ds.schema();
        let rows = || {
            indices
                .iter()
                .flat_map(|&i| ds.trajectories[i].l.iter())
        };
        let actions = || indices.iter().flat_map(|&i| ds.trajectories[i].a.iter());
        let mut out = Self::identity(schema.len());
        for (c, spec) in schema.channels.iter().enumerate() {
            if spec.kind == ChannelKind::Continuous {
                (out.mean[c], out.sd[c]) = mean_sd(rows().map(|r| r[c]));
            }
        }
        for j in 0..2 {
            let (m, s) = mean_sd(actions().map(|a| a.as_array()[j]));
            out.action_mean[j] = m;
            out.action_sd[j] = s;
            let (m, s) = mean_sd(actions().map(|a| a.as_array()[j]).filter(|&d| d > 0.0));
            out.dose_mean[j] = m;
            out.dose_sd[j] = s;
        }
        Ok(out)
    }

    pub fn normalize(&self, c: usize, x: f64) -> f64 {
        (x - self.mean[c]) / self.sd[c]
    }

    pub fn denormalize(&self, c: usize, z: f64) -> f64 {
        self.mean[c] + self.sd[c] * z
    }

    pub fn normalize_action(&self, j: usize, x: f64) -> f64 {
        (x - self.action_mean[j]) / self.action_sd[j]
    }

    pub fn normalize_dose(&self, j: usize, x: f64) -> f64 {
        (x - self.dose_mean[j]) / self.dose_sd[j]
    }

    pub fn denormalize_dose(&self, j: usize, z: f64) -> f64 {
        self.dose_mean[j] + self.dose_sd[j] * z
    }
}
