use log::warn;
use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::output::McOutput;
use super::strategy::Resolved;
use super::{PatientHistory, SequenceModel, StrategySpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::gnet::{Feed, Mat, MaskSet, ResidualBank};
use crate::rng::{self, derive_seed, Purpose, StreamRng};
use crate::schema::{Action, ChannelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcompOptions {
    pub draws: usize,
    /// Sample a fresh dropout mask set per draw.
    pub dropout: bool,
    pub alphas: [f64; 2],
    pub seed: u64,
    /// Keep every draw in the output, not just the summaries.
    pub keep_draws: bool,
}

impl Default for GcompOptions {
    fn default() -> Self {
        Self {
            draws: 100,
            dropout: false,
            alphas: [0.25, 0.75],
            seed: 0,
            keep_draws: true,
        }
    }
}

/// One simulated continuation: rows `m..=K` (row 0 is the observed `L_m`)
/// and the actions taken at those steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDraw {
    pub rows: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
}

impl SimulatedDraw {
    pub fn is_finite(&self) -> bool {
        self.rows.iter().flatten().all(|x| x.is_finite())
            && self.actions.iter().all(|a| a.fluid.is_finite() && a.vaso.is_finite())
    }
}

/// Seed of draw `draw` for patient `patient` in a run seeded by `seed`.
pub fn draw_seed(seed: u64, patient: u64, draw: usize) -> u64 {
    derive_seed(derive_seed(seed, patient, Purpose::Patient), draw as u64, Purpose::Draw)
}

fn broadcast_row(row: &[f64], n: usize) -> Mat {
    Array2::from_shape_fn((n, row.len()), |(_, c)| row[c])
}

fn actions_mat(actions: &[Action]) -> Mat {
    Array2::from_shape_fn((actions.len(), 2), |(r, c)| actions[r].as_array()[c])
}

/// Simulates one continuation per entry of `rngs`, in a single batch.
/// `masks` holds one mask set per draw when dropout is on.
#[allow(clippy::too_many_arguments)]
fn simulate_batch<M: SequenceModel>(
    model: &M,
    bank: &ResidualBank,
    h: &PatientHistory,
    g: &StrategySpec,
    k: usize,
    rngs: &mut [StreamRng],
    masks: Option<&[MaskSet]>,
) -> Result<Vec<SimulatedDraw>> {
    let schema = model.schema();
    h.check(schema)?;
    bank.validate(schema)?;
    let m = h.m();
    if k < m {
        return Err(Error::Config(format!("horizon K={k} is before m={m}")));
    }
    let strategy = Resolved::new(g, schema)?;
    if strategy.needs_treatment_head() && !model.has_treatment_head() {
        return Err(Error::Config("learned strategy needs a model with a treatment head".into()));
    }
    let n = rngs.len();
    let groups: Vec<Vec<usize>> = (0..schema.n_groups()).map(|j| schema.group_indices(j)).collect();
    let binary: Vec<bool> = schema.channels.iter().map(|c| c.kind == ChannelKind::Binary).collect();

    let warm = if masks.is_some() { n } else { 1 };
    let mut state = model.initial_state(warm, masks)?;
    let mut treat = None;
    for t in 0..m {
        let next = &h.l[t + 1];
        treat = model.step(
            &mut state,
            broadcast_row(&h.l[t], warm).view(),
            broadcast_row(&h.a[t].as_array(), warm).view(),
            &mut |j, _| {
                Ok(Feed::Observed(Array2::from_shape_fn((warm, groups[j].len()), |(_, c)| {
                    next[groups[j][c]]
                })))
            },
        )?;
    }
    if warm != n {
        state = model.expand(&state, n)?;
        treat = treat.map(|t| broadcast_row(t.row(0).as_slice().expect("contiguous"), n));
    }

    let mut draws: Vec<SimulatedDraw> = (0..n)
        .map(|_| SimulatedDraw {
            rows: vec![h.l[m].clone()],
            actions: Vec::with_capacity(k - m + 1),
        })
        .collect();
    let first_action = |d: usize, rng: &mut StreamRng, treat: &Option<Mat>| -> Result<Action> {
        match (treat, strategy.needs_treatment_head(), h.baseline_action) {
            (None, true, Some(a)) => Ok(a),
            (None, true, None) => Err(Error::Config(
                "learned strategy at m=0 needs a baseline action".into(),
            )),
            _ => strategy.simulate(&h.l[m], m, h.seed, treat.as_ref().map(|t| t.row(d)), bank, rng),
        }
    };
    for (d, draw) in draws.iter_mut().enumerate() {
        let a = first_action(d, &mut rngs[d], &treat)?;
        draw.actions.push(a);
    }
    for t in m..k {
        let l = Array2::from_shape_fn((n, schema.len()), |(r, c)| draws[r].rows[t - m][c]);
        let a: Vec<Action> = draws.iter().map(|d| d.actions[t - m]).collect();
        let mut next = vec![vec![0.0; schema.len()]; n];
        let out = model.step(&mut state, l.view(), actions_mat(&a).view(), &mut |j, e| {
            let idx = &groups[j];
            let has_continuous = idx.iter().any(|&c| !binary[c]);
            let mut values = Mat::zeros((n, idx.len()));
            for (r, rng) in rngs.iter_mut().enumerate() {
                let pick = if has_continuous { bank.draw_index(rng) } else { 0 };
                for (col, &c) in idx.iter().enumerate() {
                    let v = if binary[c] {
                        f64::from(u8::from(rng.random::<f64>() < e[[r, col]]))
                    } else {
                        e[[r, col]] + bank.residuals[c][pick]
                    };
                    values[[r, col]] = v;
                    next[r][c] = v;
                }
            }
            Ok(Feed::Generated(values))
        })?;
        for (d, (draw, row)) in draws.iter_mut().zip(next).enumerate() {
            let action = if draw.is_finite() && row.iter().all(|x| x.is_finite()) {
                strategy.simulate(&row, t + 1, h.seed, out.as_ref().map(|o| o.row(d)), bank, &mut rngs[d])?
            } else {
                Action::NONE
            };
            draw.rows.push(row);
            draw.actions.push(action);
        }
    }
    Ok(draws)
}

/// One draw of the simulation from `h` to step `k`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_one<M: SequenceModel>(
    model: &M,
    bank: &ResidualBank,
    masks: Option<&MaskSet>,
    h: &PatientHistory,
    g: &StrategySpec,
    k: usize,
    rng: &mut StreamRng,
) -> Result<SimulatedDraw> {
    let masks = masks.map(|m| vec![m.clone()]);
    let mut draws = simulate_batch(model, bank, h, g, k, std::slice::from_mut(rng), masks.as_deref())?;
    Ok(draws.pop().expect("one draw"))
}

/// `opts.draws` simulations from `h` to step `k`, summarized per step and
/// channel. Draws with non-finite values are dropped; more than 1% dropped
/// is an error.
pub fn g_compute<M: SequenceModel>(
    model: &M,
    bank: &ResidualBank,
    h: &PatientHistory,
    g: &StrategySpec,
    k: usize,
    opts: &GcompOptions,
) -> Result<McOutput> {
    if opts.draws == 0 {
        return Err(Error::Config("at least one Monte-Carlo draw is required".into()));
    }
    let seeds: Vec<u64> = (0..opts.draws).map(|d| draw_seed(opts.seed, h.id, d)).collect();
    let mut rngs: Vec<StreamRng> = seeds.iter().map(|&s| rng::stream(s, 0, Purpose::Draw)).collect();
    let masks: Option<Vec<MaskSet>> = (opts.dropout && model.dropout_rate() > 0.0).then(|| {
        seeds
            .iter()
            .map(|&s| model.sample_masks(&mut rng::stream(s, 0, Purpose::Dropout)))
            .collect()
    });
    let draws = simulate_batch(model, bank, h, g, k, &mut rngs, masks.as_deref())?;
    let total = draws.len();
    let kept: Vec<SimulatedDraw> = draws.into_iter().filter(SimulatedDraw::is_finite).collect();
    let excluded = total - kept.len();
    if excluded > 0 {
        warn!("patient {}: excluded {excluded} of {total} non-finite draws", h.id);
    }
    if excluded * 100 > total || kept.is_empty() {
        return Err(Error::NonFiniteDraws { excluded, total });
    }
    McOutput::from_draws(
        h.id,
        h.m(),
        model.schema().names(),
        opts.alphas,
        seeds,
        excluded,
        kept,
        opts.keep_draws,
    )
}

/// Runs [`g_compute`] from `H_m` for every trajectory of `ds`.
pub fn g_compute_dataset<M: SequenceModel>(
    model: &M,
    bank: &ResidualBank,
    ds: &Dataset,
    m: usize,
    g: &StrategySpec,
    opts: &GcompOptions,
) -> Result<Vec<McOutput>> {
    if ds.schema() != model.schema() {
        return Err(Error::DimensionMismatch("dataset schema differs from the model schema".into()));
    }
    ds.trajectories
        .par_iter()
        .map(|tr| {
            let h = PatientHistory::from_trajectory(tr, m)?;
            g_compute(model, bank, &h, g, tr.k, opts)
        })
        .collect()
}
