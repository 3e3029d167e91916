//! Counterfactual prediction metrics against simulated ground truth.
//!
//! Every metric pairs a set of [`McOutput`]s with the trajectories of the
//! same patients under the same strategy. Errors are taken over steps
//! `m+1..=K`; step `m` is observed history and carries no information.
//! Squared errors are computed on channels z-scored with training-set
//! statistics so channels with large raw ranges do not dominate.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gcomp::McOutput;
use crate::gnet::Normalizer;
use crate::io::write_bytes;
use crate::schema::ChannelSchema;

/// Channels entering a metric and the scale each error is divided by.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelScale {
    pub indices: Vec<usize>,
    pub names: Vec<String>,
    pub sd: Vec<f64>,
}

impl ChannelScale {
    /// Continuous channels scaled by their standard deviation over the
    /// listed training trajectories.
    pub fn from_training(ds: &Dataset, train: &[usize]) -> Result<Self> {
        Ok(Self::from_normalizer(ds.schema(), &Normalizer::fit(ds, train)?))
    }

    /// Continuous channels scaled by a fitted model's normalization.
    pub fn from_normalizer(schema: &ChannelSchema, norm: &Normalizer) -> Self {
        Self::new(schema, schema.continuous_indices(), &norm.sd)
    }

    /// Continuous channels in raw units.
    pub fn unit(schema: &ChannelSchema) -> Self {
        Self::new(schema, schema.continuous_indices(), &vec![1.0; schema.len()])
    }

    fn new(schema: &ChannelSchema, indices: Vec<usize>, sd: &[f64]) -> Self {
        Self {
            names: indices.iter().map(|&c| schema.channels[c].name.clone()).collect(),
            sd: indices.iter().map(|&c| sd[c]).collect(),
            indices,
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_pairing(mc: &[McOutput], truth: &Dataset, m: usize, scale: &ChannelScale) -> Result<()> {
    if mc.is_empty() {
        return Err(Error::Empty("no Monte-Carlo outputs to evaluate".into()));
    }
    if scale.is_empty() {
        return Err(Error::Empty("no channels to evaluate".into()));
    }
    if mc.len() != truth.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} Monte-Carlo outputs for {} ground-truth patients",
            mc.len(),
            truth.len()
        )));
    }
    let k = truth.k();
    if m >= k {
        return Err(Error::Config(format!("m={m} leaves no steps to evaluate before K={k}")));
    }
    let names = truth.schema().names();
    if let Some(&c) = scale.indices.iter().find(|&&c| c >= names.len()) {
        return Err(Error::DimensionMismatch(format!("channel index {c} out of range")));
    }
    for (o, tr) in mc.iter().zip(&truth.trajectories) {
        if o.patient_id != tr.id {
            return Err(Error::Contract(format!(
                "Monte-Carlo output for patient {} paired with trajectory {}",
                o.patient_id, tr.id
            )));
        }
        if o.m != m || o.k != k || o.steps() != k - m + 1 {
            return Err(Error::DimensionMismatch(format!(
                "patient {}: output covers m={} K={}, expected m={m} K={k}",
                o.patient_id, o.m, o.k
            )));
        }
        if o.channels != names {
            return Err(Error::DimensionMismatch(format!("patient {}: channel list differs", o.patient_id)));
        }
    }
    Ok(())
}

/// Squared-error summary over steps `start_t..start_t + per_time.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseTable {
    pub channels: Vec<String>,
    pub start_t: usize,
    pub n_patients: usize,
    /// Normalized MSE per step, pooled over patients and channels.
    pub per_time: Vec<f64>,
    /// `[step][channel]`, normalized.
    pub per_time_channel: Vec<Vec<f64>>,
    /// `[step][channel]`, raw units.
    pub per_time_channel_raw: Vec<Vec<f64>>,
    /// Normalized MSE pooled over patients, steps and channels.
    pub pooled: f64,
    /// Raw-unit MSE per channel, pooled over patients and steps.
    pub raw_per_channel: Vec<f64>,
}

/// Mean squared error of the Monte-Carlo means against the truth.
pub fn mse(mc: &[McOutput], truth: &Dataset, m: usize, scale: &ChannelScale) -> Result<MseTable> {
    check_pairing(mc, truth, m, scale)?;
    let steps = truth.k() - m;
    let d = scale.len();
    let mut sq = vec![vec![0.0; d]; steps];
    let mut raw = vec![vec![0.0; d]; steps];
    for (o, tr) in mc.iter().zip(&truth.trajectories) {
        for s in 0..steps {
            let (pred, obs) = (&o.mean[s + 1], &tr.l[m + 1 + s]);
            for (h, &c) in scale.indices.iter().enumerate() {
                let e = pred[c] - obs[c];
                raw[s][h] += e * e;
                let z = e / scale.sd[h];
                sq[s][h] += z * z;
            }
        }
    }
    let n = mc.len() as f64;
    let total: f64 = sq.iter().flatten().sum();
    sq.iter_mut().chain(raw.iter_mut()).flatten().for_each(|x| *x /= n);
    let per_time = sq.iter().map(|r| r.iter().sum::<f64>() / d as f64).collect();
    let raw_per_channel = (0..d)
        .map(|h| raw.iter().map(|r| r[h]).sum::<f64>() / steps as f64)
        .collect();
    Ok(MseTable {
        channels: scale.names.clone(),
        start_t: m + 1,
        n_patients: mc.len(),
        per_time,
        per_time_channel: sq,
        per_time_channel_raw: raw,
        pooled: total / (n * steps as f64 * d as f64),
        raw_per_channel,
    })
}

/// Share of true values inside the Monte-Carlo quantile band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTable {
    pub channels: Vec<String>,
    pub start_t: usize,
    pub alpha_low: f64,
    pub alpha_high: f64,
    pub per_time: Vec<f64>,
    pub per_time_channel: Vec<Vec<f64>>,
    pub pooled: f64,
}

impl CalibrationTable {
    pub fn nominal(&self) -> f64 {
        self.alpha_high - self.alpha_low
    }
}

/// Coverage of the closed interval `[q_low, q_high]` of the draws.
pub fn calibration(
    mc: &[McOutput],
    truth: &Dataset,
    m: usize,
    scale: &ChannelScale,
    alpha_low: f64,
    alpha_high: f64,
) -> Result<CalibrationTable> {
    if !(0.0..=1.0).contains(&alpha_low) || !(0.0..=1.0).contains(&alpha_high) || alpha_low >= alpha_high {
        return Err(Error::Config(format!(
            "quantile levels ({alpha_low}, {alpha_high}) must satisfy 0 <= low < high <= 1"
        )));
    }
    check_pairing(mc, truth, m, scale)?;
    if let Some(o) = mc.iter().find(|o| o.n_draws() < 2) {
        return Err(Error::Config(format!(
            "patient {}: calibration needs at least two draws, found {}",
            o.patient_id,
            o.n_draws()
        )));
    }
    let steps = truth.k() - m;
    let d = scale.len();
    let mut hits = vec![vec![0usize; d]; steps];
    for (o, tr) in mc.iter().zip(&truth.trajectories) {
        let (lo, hi) = o.band(alpha_low, alpha_high)?;
        for (s, row) in hits.iter_mut().enumerate() {
            let obs = &tr.l[m + 1 + s];
            for (h, &c) in scale.indices.iter().enumerate() {
                if lo[s + 1][c] <= obs[c] && obs[c] <= hi[s + 1][c] {
                    row[h] += 1;
                }
            }
        }
    }
    let n = mc.len() as f64;
    let total: usize = hits.iter().flatten().sum();
    Ok(CalibrationTable {
        channels: scale.names.clone(),
        start_t: m + 1,
        alpha_low,
        alpha_high,
        per_time: hits
            .iter()
            .map(|r| r.iter().sum::<usize>() as f64 / (n * d as f64))
            .collect(),
        per_time_channel: hits
            .iter()
            .map(|r| r.iter().map(|&x| x as f64 / n).collect())
            .collect(),
        pooled: total as f64 / (n * (steps * d) as f64),
    })
}

/// Values at steps `start_t..start_t + values.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub start_t: usize,
    pub values: Vec<f64>,
}

impl Curve {
    pub fn at(&self, t: usize) -> Option<f64> {
        t.checked_sub(self.start_t).and_then(|i| self.values.get(i).copied())
    }

    pub fn end_t(&self) -> usize {
        self.start_t + self.values.len()
    }

    /// The curve restricted to steps `>= t`.
    pub fn from_step(&self, t: usize) -> Curve {
        let skip = t.saturating_sub(self.start_t).min(self.values.len());
        Curve {
            start_t: self.start_t.max(t),
            values: self.values[skip..].to_vec(),
        }
    }
}

/// Patients whose population average is taken.
#[derive(Debug, Clone, Copy)]
pub enum Source<'a> {
    Data(&'a Dataset),
    Mc(&'a [McOutput]),
}

impl Source<'_> {
    fn patient_ids(&self) -> Vec<u64> {
        match self {
            Source::Data(ds) => ds.trajectories.iter().map(|t| t.id).collect(),
            Source::Mc(mc) => mc.iter().map(|o| o.patient_id).collect(),
        }
    }
}

/// Cross-patient mean of `channel` per step. A dataset contributes steps
/// `0..=K`, Monte-Carlo outputs steps `m..=K` (draw means, then patients).
pub fn population_average(source: Source<'_>, channel: &str) -> Result<Curve> {
    match source {
        Source::Data(ds) => {
            if ds.is_empty() {
                return Err(Error::Empty("population average of an empty dataset".into()));
            }
            let c = ds.schema().require(channel)?;
            let mut values = vec![0.0; ds.k() + 1];
            for tr in &ds.trajectories {
                for (v, row) in values.iter_mut().zip(&tr.l) {
                    *v += row[c];
                }
            }
            let n = ds.len() as f64;
            values.iter_mut().for_each(|v| *v /= n);
            Ok(Curve { start_t: 0, values })
        }
        Source::Mc(mc) => {
            let first = mc
                .first()
                .ok_or_else(|| Error::Empty("population average of no Monte-Carlo outputs".into()))?;
            let c = first
                .channels
                .iter()
                .position(|n| n == channel)
                .ok_or_else(|| Error::Config(format!("unknown channel `{channel}`")))?;
            let mut values = vec![0.0; first.steps()];
            for o in mc {
                if o.m != first.m || o.steps() != first.steps() || o.channels != first.channels {
                    return Err(Error::DimensionMismatch(format!(
                        "patient {} covers a different horizon or channel list",
                        o.patient_id
                    )));
                }
                for (v, row) in values.iter_mut().zip(&o.mean) {
                    *v += row[c];
                }
            }
            let n = mc.len() as f64;
            values.iter_mut().for_each(|v| *v /= n);
            Ok(Curve {
                start_t: first.m,
                values,
            })
        }
    }
}

/// Per-step difference of population averages, `treated - control`.
pub fn treatment_effect(treated: Source<'_>, control: Source<'_>, channel: &str) -> Result<Curve> {
    if treated.patient_ids() != control.patient_ids() {
        return Err(Error::Contract(
            "treatment effect arms must cover the same patients in the same order".into(),
        ));
    }
    let a = population_average(treated, channel)?;
    let b = population_average(control, channel)?;
    if a.start_t != b.start_t || a.values.len() != b.values.len() {
        return Err(Error::DimensionMismatch(format!(
            "arms cover steps {}..{} and {}..{}",
            a.start_t,
            a.end_t(),
            b.start_t,
            b.end_t()
        )));
    }
    Ok(Curve {
        start_t: a.start_t,
        values: a.values.iter().zip(&b.values).map(|(x, y)| x - y).collect(),
    })
}

fn csv_file(header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<String> {
    let mut out = header.join(",");
    out.push('\n');
    let mut n = 0;
    for row in rows {
        n += 1;
        let _ = writeln!(out, "{}", row.join(","));
    }
    if n == 0 {
        return Err(Error::Empty("refusing to write a table with no rows".into()));
    }
    Ok(out)
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// `t, <channel>..., pooled` with normalized MSE.
pub fn mse_csv(table: &MseTable) -> Result<String> {
    let mut header = vec!["t"];
    header.extend(table.channels.iter().map(String::as_str));
    header.push("pooled");
    csv_file(
        &header,
        table.per_time.iter().enumerate().map(|(s, pooled)| {
            let mut row = vec![(table.start_t + s).to_string()];
            row.extend(table.per_time_channel[s].iter().map(|&x| num(x)));
            row.push(num(*pooled));
            row
        }),
    )
}

/// `t, <channel>...` with raw-unit MSE.
pub fn mse_raw_csv(table: &MseTable) -> Result<String> {
    let mut header = vec!["t"];
    header.extend(table.channels.iter().map(String::as_str));
    csv_file(
        &header,
        table.per_time_channel_raw.iter().enumerate().map(|(s, r)| {
            let mut row = vec![(table.start_t + s).to_string()];
            row.extend(r.iter().map(|&x| num(x)));
            row
        }),
    )
}

/// `t, coverage` pooled over channels.
pub fn calibration_csv(table: &CalibrationTable) -> Result<String> {
    csv_file(
        &["t", "coverage"],
        table
            .per_time
            .iter()
            .enumerate()
            .map(|(s, &c)| vec![(table.start_t + s).to_string(), num(c)]),
    )
}

/// `t, estimated, true` over the steps both curves cover.
pub fn curve_pair_csv(estimated: &Curve, truth: &Curve) -> Result<String> {
    let start = estimated.start_t.max(truth.start_t);
    let end = estimated.end_t().min(truth.end_t());
    csv_file(
        &["t", "estimated", "true"],
        (start..end).map(|t| {
            vec![
                t.to_string(),
                num(estimated.at(t).expect("in range")),
                num(truth.at(t).expect("in range")),
            ]
        }),
    )
}

/// Writes a CSV produced by one of the `*_csv` functions.
pub fn write_csv(text: &str, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{DatasetHeader, Regime, Trajectory};
    use crate::gcomp::SimulatedDraw;
    use crate::rng;
    use crate::schema::Action;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn dataset(rows: Vec<Vec<Vec<f64>>>, names: &[&str]) -> Dataset {
        let schema = ChannelSchema::continuous(names, names[0]).unwrap();
        let k = rows[0].len() - 1;
        let trajectories = rows
            .into_iter()
            .enumerate()
            .map(|(i, l)| Trajectory {
                id: i as u64,
                regime: Regime::External,
                seed: i as u64,
                k,
                m: 0,
                a: vec![Action::NONE; l.len()],
                l,
            })
            .collect();
        Dataset::new(
            DatasetHeader {
                schema,
                regime: Regime::External,
                k,
                m: 0,
                master_seed: 0,
                sim_config: None,
            },
            trajectories,
        )
        .unwrap()
    }

    fn output(id: u64, m: usize, names: &[&str], draws: Vec<Vec<Vec<f64>>>) -> McOutput {
        let n = draws.len();
        let draws = draws
            .into_iter()
            .map(|rows| SimulatedDraw {
                actions: vec![Action::NONE; rows.len()],
                rows,
            })
            .collect();
        McOutput::from_draws(
            id,
            m,
            names.iter().map(|s| s.to_string()).collect(),
            [0.25, 0.75],
            (0..n as u64).collect(),
            0,
            draws,
            true,
        )
        .unwrap()
    }

    /// Random truth and outputs: `n` patients, `d` channels, `draws` draws.
    fn random_case(
        seed: u64,
        n: usize,
        k: usize,
        m: usize,
        d: usize,
        draws: usize,
    ) -> (Dataset, Vec<McOutput>, Vec<&'static str>) {
        let names: Vec<&str> = ["a", "b", "c", "e", "f"][..d].to_vec();
        let mut rng = rng::from_seed(seed);
        let rows: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|_| (0..=k).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect())
            .collect();
        let mc = rows
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let sims = (0..draws)
                    .map(|_| {
                        (m..=k)
                            .map(|t| l[t].iter().map(|v| v + rng.random_range(-2.0..2.0)).collect())
                            .collect()
                    })
                    .collect();
                output(i as u64, m, &names, sims)
            })
            .collect();
        (dataset(rows, &names), mc, names)
    }

    fn brute_mse(mc: &[McOutput], truth: &Dataset, m: usize, scale: &ChannelScale) -> f64 {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in 0..truth.len() {
            for t in m + 1..=truth.k() {
                for h in 0..scale.len() {
                    let c = scale.indices[h];
                    let e = (mc[i].mean[t - m][c] - truth.trajectories[i].l[t][c]) / scale.sd[h];
                    sum += e * e;
                    count += 1;
                }
            }
        }
        sum / count as f64
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn perfect_prediction_has_zero_mse() {
        let rows = vec![vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]];
        let ds = dataset(rows.clone(), &["a", "b"]);
        let mc = vec![output(0, 0, &["a", "b"], vec![rows[0].clone(); 3])];
        let t = mse(&mc, &ds, 0, &ChannelScale::unit(ds.schema())).unwrap();
        assert_eq!(t.per_time, vec![0.0, 0.0]);
        assert_eq!(t.pooled, 0.0);
        let c = calibration(&mc, &ds, 0, &ChannelScale::unit(ds.schema()), 0.25, 0.75).unwrap();
        assert_eq!(c.pooled, 1.0);
    }

    #[test]
    fn hand_evaluated_mse() {
        let ds = dataset(vec![vec![vec![0.0], vec![0.0], vec![0.0]]], &["y"]);
        let mc = vec![output(0, 0, &["y"], vec![vec![vec![0.0], vec![1.0], vec![3.0]]])];
        let t = mse(&mc, &ds, 0, &ChannelScale::unit(ds.schema())).unwrap();
        assert_eq!(t.pooled, 5.0);
        assert_eq!(t.per_time, vec![1.0, 9.0]);
        assert_eq!(t.start_t, 1);
        assert_eq!(t.raw_per_channel, vec![5.0]);
        let mut scaled = ChannelScale::unit(ds.schema());
        scaled.sd = vec![2.0];
        assert_eq!(mse(&mc, &ds, 0, &scaled).unwrap().pooled, 1.25);
    }

    #[test]
    fn mse_matches_brute_force() {
        for trial in 0..1000u64 {
            let mut rng = rng::from_seed(trial);
            let n = rng.random_range(1..6);
            let k = rng.random_range(2..8);
            let m = rng.random_range(0..k);
            let d = rng.random_range(1..5);
            let (ds, mc, _) = random_case(trial, n, k, m, d, 3);
            let mut scale = ChannelScale::unit(ds.schema());
            scale.sd.iter_mut().for_each(|s| *s = rng.random_range(0.5..3.0));
            let fast = mse(&mc, &ds, m, &scale).unwrap();
            let brute = brute_mse(&mc, &ds, m, &scale);
            assert!(rel(fast.pooled, brute) < 1e-9, "trial {trial}: {} vs {brute}", fast.pooled);
            let mean_of_steps = fast.per_time.iter().sum::<f64>() / fast.per_time.len() as f64;
            assert!(rel(mean_of_steps, brute) < 1e-9);
        }
    }

    #[test]
    fn population_average_matches_brute_force() {
        for trial in 0..1000u64 {
            let mut rng = rng::from_seed(trial ^ 0xabc);
            let n = rng.random_range(1..6);
            let k = rng.random_range(2..8);
            let m = rng.random_range(0..k);
            let (ds, mc, names) = random_case(trial, n, k, m, 2, 4);
            let data = population_average(Source::Data(&ds), names[1]).unwrap();
            let est = population_average(Source::Mc(&mc), names[1]).unwrap();
            for t in 0..=k {
                let brute = (0..n).map(|i| ds.trajectories[i].l[t][1]).sum::<f64>() / n as f64;
                assert!(rel(data.at(t).unwrap(), brute) < 1e-12);
            }
            for t in m..=k {
                let mut brute = 0.0;
                for o in &mc {
                    brute += o.sims.iter().map(|s| s[t - m][1]).sum::<f64>() / o.sims.len() as f64;
                }
                brute /= n as f64;
                assert!(rel(est.at(t).unwrap(), brute) < 1e-9);
            }
        }
    }

    #[test]
    fn population_average_edge_cases() {
        let c = vec![vec![1.0], vec![-2.0], vec![4.0]];
        let single = dataset(vec![c.clone()], &["y"]);
        assert_eq!(population_average(Source::Data(&single), "y").unwrap().values, vec![1.0, -2.0, 4.0]);
        let neg: Vec<Vec<f64>> = c.iter().map(|r| vec![-r[0]]).collect();
        let pair = dataset(vec![c, neg], &["y"]);
        assert_eq!(population_average(Source::Data(&pair), "y").unwrap().values, vec![0.0; 3]);
        assert!(population_average(Source::Mc(&[]), "y").is_err());
        assert!(population_average(Source::Data(&pair), "z").is_err());
    }

    #[test]
    fn treatment_effects() {
        let (ds, mc, _) = random_case(3, 4, 5, 2, 2, 3);
        let zero = treatment_effect(Source::Mc(&mc), Source::Mc(&mc), "a").unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
        assert_eq!(zero.start_t, 2);

        let (other, mc2, _) = random_case(4, 4, 5, 2, 2, 3);
        let est = treatment_effect(Source::Mc(&mc), Source::Mc(&mc2), "b").unwrap();
        let pa = population_average(Source::Mc(&mc), "b").unwrap();
        let pb = population_average(Source::Mc(&mc2), "b").unwrap();
        for t in 2..=5 {
            assert_eq!(est.at(t).unwrap(), pa.at(t).unwrap() - pb.at(t).unwrap());
        }
        let truth = treatment_effect(Source::Data(&ds), Source::Data(&other), "a").unwrap();
        for t in 0..=5 {
            let paired = (0..4)
                .map(|i| ds.trajectories[i].l[t][0] - other.trajectories[i].l[t][0])
                .sum::<f64>()
                / 4.0;
            assert!((truth.at(t).unwrap() - paired).abs() < 1e-12);
        }
        let (_, fewer, _) = random_case(5, 3, 5, 2, 2, 3);
        assert!(matches!(
            treatment_effect(Source::Mc(&mc), Source::Mc(&fewer), "a"),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn exchangeable_truth_covers_half() {
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut rng = rng::from_seed(9);
        let n = 400;
        let rows: Vec<Vec<Vec<f64>>> = (0..n).map(|_| vec![vec![0.0], vec![normal.sample(&mut rng)]]).collect();
        let ds = dataset(rows, &["y"]);
        let mc: Vec<McOutput> = (0..n)
            .map(|i| {
                let sims = (0..200).map(|_| vec![vec![0.0], vec![normal.sample(&mut rng)]]).collect();
                output(i as u64, 0, &["y"], sims)
            })
            .collect();
        let c = calibration(&mc, &ds, 0, &ChannelScale::unit(ds.schema()), 0.25, 0.75).unwrap();
        assert!((c.pooled - 0.5).abs() < 0.05, "{}", c.pooled);
        assert_eq!(c.nominal(), 0.5);
    }

    #[test]
    fn truth_above_band_is_never_covered() {
        let mut rng = rng::from_seed(2);
        let n = 50;
        let ds = dataset((0..n).map(|_| vec![vec![0.0], vec![0.99]]).collect(), &["y"]);
        let mc: Vec<McOutput> = (0..n)
            .map(|i| {
                let sims = (0..100).map(|_| vec![vec![0.0], vec![rng.random::<f64>()]]).collect();
                output(i as u64, 0, &["y"], sims)
            })
            .collect();
        let c = calibration(&mc, &ds, 0, &ChannelScale::unit(ds.schema()), 0.25, 0.75).unwrap();
        assert_eq!(c.pooled, 0.0);
    }

    #[test]
    fn calibration_preconditions() {
        let (ds, mc, _) = random_case(1, 2, 3, 1, 1, 1);
        let scale = ChannelScale::unit(ds.schema());
        assert!(calibration(&mc, &ds, 1, &scale, 0.25, 0.75).unwrap_err().is_config());
        let (ds, mc, _) = random_case(1, 2, 3, 1, 1, 4);
        assert!(calibration(&mc, &ds, 1, &scale, 0.75, 0.25).unwrap_err().is_config());
        assert!(mse(&mc[..1], &ds, 1, &scale).is_err());
        assert!(mse(&mc, &ds, 0, &scale).is_err());
    }

    #[test]
    fn csv_shapes() {
        let (ds, mc, _) = random_case(1, 3, 6, 2, 2, 4);
        let scale = ChannelScale::unit(ds.schema());
        let table = mse(&mc, &ds, 2, &scale).unwrap();
        let text = mse_csv(&table).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 4);
        assert_eq!(lines[0], "t,a,b,pooled");
        assert!(lines[1].starts_with("3,"));
        assert_eq!(mse_raw_csv(&table).unwrap().lines().count(), 5);
        let cal = calibration(&mc, &ds, 2, &scale, 0.25, 0.75).unwrap();
        assert_eq!(calibration_csv(&cal).unwrap().lines().count(), 5);
        let est = population_average(Source::Mc(&mc), "a").unwrap();
        let truth = population_average(Source::Data(&ds), "a").unwrap();
        let pair = curve_pair_csv(&est, &truth).unwrap();
        assert_eq!(pair.lines().count(), 1 + 5);
        assert!(pair.lines().nth(1).unwrap().starts_with("2,"));

        let mut empty = table.clone();
        empty.per_time.clear();
        assert!(matches!(mse_csv(&empty), Err(Error::Empty(_))));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mse.csv");
        write_csv(&text, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_csv(&mse_csv(&mse(&mc, &ds, 2, &scale).unwrap()).unwrap(), &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first);
    }

    #[test]
    fn scale_from_training_rows() {
        let ds = dataset(
            vec![vec![vec![0.0], vec![2.0]], vec![vec![100.0], vec![300.0]]],
            &["y"],
        );
        let s = ChannelScale::from_training(&ds, &[0]).unwrap();
        assert_eq!(s.sd, vec![1.0]);
        assert_eq!(s.names, vec!["y".to_string()]);
    }

    proptest! {
        #[test]
        fn mse_ignores_patient_and_channel_order(seed in 0u64..10_000) {
            let (ds, mc, _) = random_case(seed, 4, 4, 1, 3, 2);
            let scale = ChannelScale::unit(ds.schema());
            let base = mse(&mc, &ds, 1, &scale).unwrap().pooled;
            let order = [2usize, 0, 3, 1];
            let ds2 = ds.subset(&order);
            let mc2: Vec<McOutput> = order.iter().map(|&i| mc[i].clone()).collect();
            let mut rev = scale.clone();
            rev.indices.reverse();
            rev.names.reverse();
            rev.sd.reverse();
            let shuffled = mse(&mc2, &ds2, 1, &rev).unwrap().pooled;
            prop_assert!(rel(base, shuffled) < 1e-12);
        }

        #[test]
        fn wider_band_never_lowers_coverage(seed in 0u64..10_000, lo in 0.0f64..0.4, w in 0.05f64..0.3, extra in 0.0f64..0.2) {
            let (ds, mc, _) = random_case(seed, 5, 4, 1, 2, 7);
            let scale = ChannelScale::unit(ds.schema());
            let narrow = calibration(&mc, &ds, 1, &scale, lo, lo + w).unwrap();
            let wide = calibration(&mc, &ds, 1, &scale, (lo - extra).max(0.0), (lo + w + extra).min(1.0)).unwrap();
            prop_assert!(wide.pooled >= narrow.pooled);
            prop_assert!((0.0..=1.0).contains(&wide.pooled));
        }
    }
}
