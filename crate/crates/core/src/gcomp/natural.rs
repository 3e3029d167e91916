use serde::{Deserialize, Serialize};

use super::simulate::{g_compute_dataset, GcompOptions};
use super::strategy::Resolved;
use super::{SequenceModel, StrategySpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gnet::ResidualBank;

/// Population means of simulated and observed data under the observational
/// treatment process, rows `0..=w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalCourse {
    pub channels: Vec<String>,
    pub horizon: usize,
    pub simulated_mean: Vec<Vec<f64>>,
    pub observed_mean: Vec<Vec<f64>>,
    pub simulated_treated: Vec<f64>,
    pub observed_treated: Vec<f64>,
}

/// Simulates every patient of `ds` from its baseline row for `w` steps,
/// drawing treatments from the model's treatment head.
pub fn natural_course<M: SequenceModel>(
    model: &M,
    bank: &ResidualBank,
    ds: &Dataset,
    w: usize,
    opts: &GcompOptions,
) -> Result<NaturalCourse> {
    if !model.has_treatment_head() {
        return Err(Error::Config("natural course needs a model trained with a treatment head".into()));
    }
    if ds.is_empty() {
        return Err(Error::Empty("natural course on an empty dataset".into()));
    }
    if w > ds.k() {
        return Err(Error::Config(format!("horizon w={w} exceeds the data horizon K={}", ds.k())));
    }
    let truncated = truncate(ds, w)?;
    let opts = GcompOptions {
        keep_draws: true,
        ..opts.clone()
    };
    let outputs = g_compute_dataset(model, bank, &truncated, 0, &StrategySpec::LearnedTreatmentHead, &opts)?;
    let d = ds.schema().len();
    let n = ds.len() as f64;
    let mut simulated_mean = vec![vec![0.0; d]; w + 1];
    let mut observed_mean = vec![vec![0.0; d]; w + 1];
    let mut simulated_treated = vec![0.0; w + 1];
    let mut observed_treated = vec![0.0; w + 1];
    for (out, tr) in outputs.iter().zip(&ds.trajectories) {
        let draws = out.actions.len() as f64;
        for t in 0..=w {
            for c in 0..d {
                simulated_mean[t][c] += out.mean[t][c] / n;
                observed_mean[t][c] += tr.l[t][c] / n;
            }
            let treated = out.actions.iter().filter(|a| a[t].is_treatment()).count() as f64;
            simulated_treated[t] += treated / draws / n;
            observed_treated[t] += f64::from(u8::from(tr.a[t].is_treatment())) / n;
        }
    }
    Ok(NaturalCourse {
        channels: ds.schema().names(),
        horizon: w,
        simulated_mean,
        observed_mean,
        simulated_treated,
        observed_treated,
    })
}

fn truncate(ds: &Dataset, w: usize) -> Result<Dataset> {
    let mut header = ds.header.clone();
    header.k = w;
    header.m = 0;
    let trajectories = ds
        .trajectories
        .iter()
        .map(|tr| {
            let mut t = tr.clone();
            t.k = w;
            t.m = 0;
            t.l.truncate(w + 1);
            t.a.truncate(w + 1);
            t
        })
        .collect();
    Dataset::new(header, trajectories)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositivityReport {
    pub tolerance: f64,
    /// Per step, the share of patients whose observed action is within
    /// `tolerance` of the strategy's action.
    pub fraction: Vec<f64>,
    /// Steps where no patient followed the strategy.
    pub flagged: Vec<usize>,
}

/// Checks how often the observed actions agree with strategy `g` applied
/// to the observed history.
pub fn positivity_check(ds: &Dataset, g: &StrategySpec, tolerance: f64) -> Result<PositivityReport> {
    if ds.is_empty() {
        return Err(Error::Empty("positivity check on an empty dataset".into()));
    }
    let strategy = Resolved::new(g, ds.schema())?;
    let k = ds.k();
    let mut fraction = vec![0.0; k + 1];
    for tr in &ds.trajectories {
        for (t, f) in fraction.iter_mut().enumerate() {
            let a = strategy.replay(&tr.l[t], t, tr.seed)?;
            if a.max_abs_diff(&tr.a[t]) <= tolerance {
                *f += 1.0;
            }
        }
    }
    fraction.iter_mut().for_each(|f| *f /= ds.len() as f64);
    let flagged = fraction
        .iter()
        .enumerate()
        .filter(|(_, &f)| f == 0.0)
        .map(|(t, _)| t)
        .collect();
    Ok(PositivityReport {
        tolerance,
        fraction,
        flagged,
    })
}
