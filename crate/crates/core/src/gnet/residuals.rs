use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Feed, GNet};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::schema::ChannelSchema;

/// Holdout one-step residuals `L - L̂` in raw units, pooled over patients and
/// time. Row `r` of every continuous channel comes from the same
/// `(patient, t)`, so a single index draws a joint residual vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualBank {
    pub channels: Vec<String>,
    /// Per channel in schema order; empty for binary channels.
    pub residuals: Vec<Vec<f64>>,
    /// Dose residuals `[fluid, vasopressor]` on treated steps, when the
    /// model has a treatment head.
    #[serde(default)]
    pub dose: Option<[Vec<f64>; 2]>,
}

impl ResidualBank {
    /// A bank holding `n` zero residuals per continuous channel.
    pub fn zeros(schema: &ChannelSchema, n: usize) -> Self {
        Self {
            channels: schema.names(),
            residuals: schema
                .channels
                .iter()
                .map(|c| match c.kind {
                    crate::schema::ChannelKind::Continuous => vec![0.0; n],
                    crate::schema::ChannelKind::Binary => Vec::new(),
                })
                .collect(),
            dose: None,
        }
    }

    /// Residual rows available per continuous channel.
    pub fn len(&self) -> usize {
        self.residuals.iter().map(Vec::len).max().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self, schema: &ChannelSchema) -> Result<()> {
        if self.channels != schema.names() {
            return Err(Error::DimensionMismatch(
                "residual bank channels differ from the model schema".into(),
            ));
        }
        let n = self.len();
        for (c, spec) in schema.channels.iter().enumerate() {
            let expected = match spec.kind {
                crate::schema::ChannelKind::Continuous => n,
                crate::schema::ChannelKind::Binary => 0,
            };
            if self.residuals[c].len() != expected {
                return Err(Error::DimensionMismatch(format!(
                    "channel `{}` has {} residuals, expected {expected}",
                    spec.name,
                    self.residuals[c].len()
                )));
            }
        }
        if n == 0 && schema.channels.iter().any(|c| c.kind == crate::schema::ChannelKind::Continuous) {
            return Err(Error::Empty("residual bank is empty".into()));
        }
        Ok(())
    }

    pub fn draw_index(&self, rng: &mut impl Rng) -> usize {
        rng.random_range(0..self.len())
    }

    pub fn draw_dose(&self, arm: usize, rng: &mut impl Rng) -> f64 {
        match &self.dose {
            Some(d) if !d[arm].is_empty() => d[arm][rng.random_range(0..d[arm].len())],
            _ => 0.0,
        }
    }
}

/// Teacher-forced one-step residuals of `model` on `holdout`.
pub fn collect_residuals(model: &GNet, holdout: &Dataset) -> Result<ResidualBank> {
    if holdout.is_empty() {
        return Err(Error::Empty("holdout set for residuals is empty".into()));
    }
    if holdout.schema() != model.schema() {
        return Err(Error::DimensionMismatch("holdout schema differs from the model schema".into()));
    }
    let schema = model.schema();
    let n_channels = schema.len();
    let mut residuals: Vec<Vec<f64>> = vec![Vec::new(); n_channels];
    let mut dose = [Vec::new(), Vec::new()];
    let k = holdout.k();
    let groups = &model.arch.groups;
    for chunk in holdout.trajectories.chunks(model.config.batch_size.max(1)) {
        let b = chunk.len();
        let mut st = model.initial_state(b, None)?;
        // [batch][t][channel] predictions for the step being filled
        let mut pred = vec![vec![vec![0.0; n_channels]; k]; b];
        let mut treat_pred = vec![Vec::new(); b];
        for t in 0..k {
            let l = Array2::from_shape_fn((b, n_channels), |(r, c)| chunk[r].l[t][c]);
            let a = Array2::from_shape_fn((b, 2), |(r, c)| chunk[r].a[t].as_array()[c]);
            let out = model.step(&mut st, l.view(), a.view(), &mut |j, e| {
                for (col, &c) in groups[j].iter().enumerate() {
                    for r in 0..b {
                        pred[r][t][c] = e[[r, col]];
                    }
                }
                Ok(Feed::Observed(Array2::from_shape_fn((b, groups[j].len()), |(r, col)| {
                    chunk[r].l[t + 1][groups[j][col]]
                })))
            })?;
            if let Some(out) = out {
                for (r, tp) in treat_pred.iter_mut().enumerate() {
                    tp.push([out[[r, 2]], out[[r, 3]]]);
                }
            }
        }
        for (r, tr) in chunk.iter().enumerate() {
            for t in 0..k {
                for (c, spec) in schema.channels.iter().enumerate() {
                    if spec.kind == crate::schema::ChannelKind::Continuous {
                        residuals[c].push(tr.l[t + 1][c] - pred[r][t][c]);
                    }
                }
                if let Some(tp) = treat_pred[r].get(t) {
                    let a = tr.a[t + 1];
                    if a.fluid > 0.0 {
                        dose[0].push(a.fluid - tp[0]);
                    } else if a.vaso > 0.0 {
                        dose[1].push(a.vaso - tp[1]);
                    }
                }
            }
        }
    }
    let bank = ResidualBank {
        channels: schema.names(),
        residuals,
        dose: model.has_treatment_head().then_some(dose),
    };
    bank.validate(schema)?;
    Ok(bank)
}
