//! Teacher-forced training by backpropagation through time.

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dropout::MaskSet;
use super::layers::{Mat, Params};
use super::norm::Normalizer;
use super::residuals::{collect_residuals, ResidualBank};
use super::{rep_part, Feed, GNet, Head, HeadCache, StepCache, StepState, TREAT_OUTPUTS};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLoss>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Model-generated group values consumed while training. Always zero.
    pub generated_inputs_consumed: usize,
}

/// Normalized inputs and targets of one trajectory.
pub(super) struct Encoded {
    /// `[K + 1, channels + 2]`: normalized `L_t` then normalized `A_t`.
    x: Mat,
    /// `[K + 1, 4]`: treated flag, fluid-arm flag, normalized doses.
    treat: Mat,
}

pub(super) fn encode(model: &GNet, ds: &Dataset, indices: &[usize]) -> Vec<Encoded> {
    let n = model.arch.n_channels;
    let norm = &model.norm;
    indices
        .iter()
        .map(|&i| {
            let tr = &ds.trajectories[i];
            let x = Mat::from_shape_fn((tr.l.len(), n + 2), |(t, c)| {
                if c < n {
                    norm.normalize(c, tr.l[t][c])
                } else {
                    norm.normalize_action(c - n, tr.a[t].as_array()[c - n])
                }
            });
            let treat = Mat::from_shape_fn((tr.a.len(), TREAT_OUTPUTS), |(t, c)| {
                let a = tr.a[t];
                match c {
                    0 => f64::from(u8::from(a.is_treatment())),
                    1 => f64::from(u8::from(a.fluid > 0.0)),
                    2 => norm.normalize_dose(0, a.fluid),
                    _ => norm.normalize_dose(1, a.vaso),
                }
            });
            Encoded { x, treat }
        })
        .collect()
}

fn gather(rows: &[&Encoded], t: usize, treat: bool) -> Mat {
    let width = if treat { TREAT_OUTPUTS } else { rows[0].x.ncols() };
    Mat::from_shape_fn((rows.len(), width), |(b, c)| {
        if treat {
            rows[b].treat[[t, c]]
        } else {
            rows[b].x[[t, c]]
        }
    })
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    0.5 + 0.5 * (0.5 * z).tanh()
}

/// Loss terms per sequence step.
fn terms_per_step(model: &GNet) -> usize {
    model.arch.n_channels + if model.arch.treatment.is_some() { 3 } else { 0 }
}

/// Summed loss of one step and its gradient scaled by `1 / denom`.
fn step_loss(model: &GNet, cache: &StepCache, x_next: &Mat, treat_next: Option<&Mat>, denom: f64) -> (f64, Vec<Mat>, Option<Mat>) {
    let mut loss = 0.0;
    let mut douts = Vec::with_capacity(cache.outs.len());
    for (j, out) in cache.outs.iter().enumerate() {
        let mut d = Mat::zeros(out.raw_dim());
        for (k, &c) in model.arch.groups[j].iter().enumerate() {
            for b in 0..out.nrows() {
                let (z, y) = (out[[b, k]], x_next[[b, c]]);
                if model.arch.binary[c] {
                    loss += softplus(z) - y * z;
                    d[[b, k]] = (sigmoid(z) - y) / denom;
                } else {
                    loss += (z - y) * (z - y);
                    d[[b, k]] = 2.0 * (z - y) / denom;
                }
            }
        }
        douts.push(d);
    }
    let dtreat = match (&cache.treat_out, treat_next) {
        (Some(out), Some(target)) => {
            let mut d = Mat::zeros(out.raw_dim());
            for b in 0..out.nrows() {
                let treated = target[[b, 0]];
                loss += softplus(out[[b, 0]]) - treated * out[[b, 0]];
                d[[b, 0]] = (sigmoid(out[[b, 0]]) - treated) / denom;
                if treated > 0.5 {
                    let fluid = target[[b, 1]];
                    loss += softplus(out[[b, 1]]) - fluid * out[[b, 1]];
                    d[[b, 1]] = (sigmoid(out[[b, 1]]) - fluid) / denom;
                    let col = if fluid > 0.5 { 2 } else { 3 };
                    let e = out[[b, col]] - target[[b, col]];
                    loss += e * e;
                    d[[b, col]] = 2.0 * e / denom;
                }
            }
            Some(d)
        }
        _ => None,
    };
    (loss, douts, dtreat)
}

/// Upstream gradients flowing into the previous step's recurrent states.
struct Carry {
    rep: Option<(Mat, Mat)>,
    heads: Vec<Option<(Mat, Mat)>>,
    treat: Option<(Mat, Mat)>,
}

fn head_backward(
    model: &GNet,
    head: &Head,
    sites: super::Sites,
    cache: &HeadCache,
    dout: &Mat,
    carry: &mut Option<(Mat, Mat)>,
    st: &StepState,
    grads: &mut Params,
) -> Mat {
    let p = &model.params;
    match (head, cache) {
        (Head::Linear(lin), HeadCache::Linear { z }) => lin.backward(p, grads, z.view(), dout.view()),
        (Head::Recurrent { cell, out }, HeadCache::Recurrent { cell: cc, h }) => {
            let (sx, sh) = sites.expect("recurrent head sites");
            let (dh_next, dc_next) = carry.take().expect("recurrent carry");
            let dh = out.backward(p, grads, h.view(), dout.view()) + dh_next;
            let (dz, dh_prev, dc_prev) =
                cell.backward(p, grads, cc, dh.view(), dc_next.view(), st.mask(sx), st.mask(sh));
            *carry = Some((dh_prev, dc_prev));
            dz
        }
        _ => unreachable!("head cache matches head kind"),
    }
}

fn step_backward(
    model: &GNet,
    st: &StepState,
    cache: &StepCache,
    douts: &[Mat],
    dtreat: Option<&Mat>,
    carry: &mut Carry,
    grads: &mut Params,
) {
    let arch = &model.arch;
    let mut dr = Mat::zeros((st.batch, arch.rep_dim));
    if let (Some(head), Some(hc), Some(d)) = (&arch.treatment, &cache.treat, dtreat) {
        let dz = head_backward(model, head, arch.treat_sites, hc, d, &mut carry.treat, st, grads);
        dr += &rep_part(&dz, arch.rep_dim);
    }
    for (j, head) in arch.heads.iter().enumerate().rev() {
        let dz = head_backward(
            model,
            head,
            arch.head_sites[j],
            &cache.heads[j],
            &douts[j],
            &mut carry.heads[j],
            st,
            grads,
        );
        dr += &rep_part(&dz, arch.rep_dim);
    }
    if let (Some(cell), Some((sx, sh)), Some(rc)) = (&arch.rep, arch.rep_sites, &cache.rep) {
        let (dh_next, dc_next) = carry.rep.take().expect("representation carry");
        let dh = dr + dh_next;
        let (_, dh_prev, dc_prev) =
            cell.backward(&model.params, grads, rc, dh.view(), dc_next.view(), st.mask(sx), st.mask(sh));
        carry.rep = Some((dh_prev, dc_prev));
    }
}

/// Teacher-forced loss of a batch, averaged over steps and loss terms.
/// Accumulates gradients of that average into `grads` when given.
pub(super) fn batch_loss(
    model: &GNet,
    rows: &[&Encoded],
    masks: Option<&[MaskSet]>,
    grads: Option<&mut Params>,
    generated: &mut usize,
) -> Result<f64> {
    let steps = rows[0].x.nrows() - 1;
    if steps == 0 {
        return Ok(0.0);
    }
    let denom = (rows.len() * steps * terms_per_step(model)) as f64;
    let has_treat = model.arch.treatment.is_some();
    let mut st = model.initial_state(rows.len(), masks)?;
    let mut caches = Vec::with_capacity(steps);
    let mut loss = 0.0;
    let mut x = gather(rows, 0, false);
    for t in 0..steps {
        let x_next = gather(rows, t + 1, false);
        let cache = model.step_norm(&mut st, x.view(), &mut |j, _| {
            let idx = &model.arch.groups[j];
            Ok(Feed::Observed(Mat::from_shape_fn((rows.len(), idx.len()), |(b, k)| {
                x_next[[b, idx[k]]]
            })))
        })?;
        let treat_next = has_treat.then(|| gather(rows, t + 1, true));
        let (l, douts, dtreat) = step_loss(model, &cache, &x_next, treat_next.as_ref(), denom);
        loss += l;
        caches.push((cache, douts, dtreat));
        x = x_next;
    }
    *generated += st.generated_inputs;
    if let Some(grads) = grads {
        let zeros = |h: usize| (Mat::zeros((rows.len(), h)), Mat::zeros((rows.len(), h)));
        let mut carry = Carry {
            rep: model.arch.rep.map(|c| zeros(c.hidden)),
            heads: model
                .arch
                .heads
                .iter()
                .map(|h| h.cell().map(|c| zeros(c.hidden)))
                .collect(),
            treat: model.arch.treatment.and_then(|h| h.cell().map(|c| zeros(c.hidden))),
        };
        for (cache, douts, dtreat) in caches.iter().rev() {
            step_backward(model, &st, cache, douts, dtreat.as_ref(), &mut carry, grads);
        }
    }
    Ok(loss / denom)
}

enum OptState {
    Sgd,
    Adam { m: Params, v: Params, t: i32 },
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl OptState {
    fn new(model: &GNet) -> Self {
        match model.config.optimizer {
            super::Optimizer::Sgd => OptState::Sgd,
            super::Optimizer::Adam => OptState::Adam {
                m: model.params.zeros_like(),
                v: model.params.zeros_like(),
                t: 0,
            },
        }
    }

    fn apply(&mut self, params: &mut Params, grads: &Params, lr: f64) {
        match self {
            OptState::Sgd => {
                for (p, g) in params.tensors.iter_mut().zip(&grads.tensors) {
                    for (x, d) in p.data.iter_mut().zip(&g.data) {
                        *x -= lr * d;
                    }
                }
            }
            OptState::Adam { m, v, t } => {
                *t += 1;
                let c1 = 1.0 - BETA1.powi(*t);
                let c2 = 1.0 - BETA2.powi(*t);
                for (((p, g), m), v) in params
                    .tensors
                    .iter_mut()
                    .zip(&grads.tensors)
                    .zip(&mut m.tensors)
                    .zip(&mut v.tensors)
                {
                    for i in 0..p.data.len() {
                        let d = g.data[i];
                        m.data[i] = BETA1 * m.data[i] + (1.0 - BETA1) * d;
                        v.data[i] = BETA2 * v.data[i] + (1.0 - BETA2) * d * d;
                        p.data[i] -= lr * (m.data[i] / c1) / ((v.data[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

fn mean_loss(model: &GNet, data: &[Encoded], generated: &mut usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(model.config.batch_size) {
        let rows: Vec<&Encoded> = chunk.iter().collect();
        total += batch_loss(model, &rows, None, None, generated)? * rows.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Trains on a seeded `train_frac` split of `ds`, selecting the epoch with
/// the lowest validation loss. Normalization statistics come from the
/// training split only.
pub fn train(mut model: GNet, ds: &Dataset, train_frac: f64) -> Result<(GNet, TrainReport)> {
    if ds.schema() != &model.schema {
        return Err(Error::DimensionMismatch("dataset schema differs from the model schema".into()));
    }
    let (train_idx, val_idx) = ds.split_indices(train_frac, derive_seed(ds.header.master_seed, 0, Purpose::Split))?;
    if train_idx.is_empty() {
        return Err(Error::Empty("training split is empty".into()));
    }
    model.norm = Normalizer::fit(ds, &train_idx)?;
    let train_data = encode(&model, ds, &train_idx);
    let val_data = encode(&model, ds, &val_idx);
    let config = model.config.clone();
    let mut opt = OptState::new(&model);
    let mut generated = 0usize;
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train_data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stream(config.seed, epoch as u64, Purpose::Shuffle));
        let mask_seed = derive_seed(config.seed, epoch as u64, Purpose::Dropout);
        let mut train_total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let rows: Vec<&Encoded> = chunk.iter().map(|&i| &train_data[i]).collect();
            let masks: Option<Vec<MaskSet>> = (config.dropout > 0.0).then(|| {
                (0..rows.len())
                    .map(|r| {
                        let idx = (b * config.batch_size + r) as u64;
                        model.sample_dropout_masks(&mut rng::stream(mask_seed, idx, Purpose::Dropout))
                    })
                    .collect()
            });
            let mut grads = model.params.zeros_like();
            let loss = batch_loss(&model, &rows, masks.as_deref(), Some(&mut grads), &mut generated)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            let norm = grads.sq_norm().sqrt();
            if norm > config.grad_clip {
                grads.scale(config.grad_clip / norm);
            }
            opt.apply(&mut model.params, &grads, config.learning_rate);
            train_total += loss * rows.len() as f64;
        }
        let train_loss = train_total / train_data.len() as f64;
        let val_loss = if val_data.is_empty() {
            mean_loss(&model, &train_data, &mut generated)?
        } else {
            mean_loss(&model, &val_data, &mut generated)?
        };
        if !val_loss.is_finite() || !model.params.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        debug!("{} epoch {epoch}: train {train_loss:.6} val {val_loss:.6}", config.name);
        epochs.push(EpochLoss {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, epoch, model.params.clone());
        } else if config.patience.is_some_and(|p| epoch - best.1 >= p) {
            break;
        }
    }
    assert_eq!(generated, 0, "teacher forcing consumed generated inputs");
    let (best_val_loss, best_epoch, params) = best;
    if !epochs.is_empty() {
        model.params = params;
    }
    info!(
        "{}: best validation loss {best_val_loss:.6} at epoch {best_epoch}",
        config.name
    );
    Ok((
        model,
        TrainReport {
            epochs,
            best_epoch,
            best_val_loss,
            train_indices: train_idx,
            val_indices: val_idx,
            generated_inputs_consumed: generated,
        },
    ))
}

/// A trained model with the residual bank built from its validation split.
#[derive(Debug, Clone)]
pub struct FittedModel {
    pub model: GNet,
    pub bank: ResidualBank,
    pub report: TrainReport,
}

/// Analytic gradient of the teacher-forced loss against central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientCheck {
    pub n_params: usize,
    /// `max |fd - analytic| / max(|fd|, |analytic|, 1e-6)` over parameters.
    pub max_rel_error: f64,
}

/// Compares backpropagated gradients with central finite differences of
/// step `eps` on every parameter, for one batch holding all of `ds`.
/// `masks`, when given, holds one mask set per trajectory.
pub fn check_gradients(model: &GNet, ds: &Dataset, masks: Option<&[MaskSet]>, eps: f64) -> Result<GradientCheck> {
    if ds.schema() != &model.schema {
        return Err(Error::DimensionMismatch("dataset schema differs from the model schema".into()));
    }
    if masks.is_some_and(|m| m.len() != ds.len()) {
        return Err(Error::DimensionMismatch("one mask set per trajectory is required".into()));
    }
    let mut model = model.clone();
    let all: Vec<usize> = (0..ds.len()).collect();
    let data = encode(&model, ds, &all);
    let rows: Vec<&Encoded> = data.iter().collect();
    let mut grads = model.params.zeros_like();
    let mut generated = 0;
    batch_loss(&model, &rows, masks, Some(&mut grads), &mut generated)?;
    let mut worst: f64 = 0.0;
    for k in 0..model.params.n_scalars() {
        let orig = model.params.get(k);
        model.params.set(k, orig + eps);
        let up = batch_loss(&model, &rows, masks, None, &mut generated)?;
        model.params.set(k, orig - eps);
        let down = batch_loss(&model, &rows, masks, None, &mut generated)?;
        model.params.set(k, orig);
        let fd = (up - down) / (2.0 * eps);
        let an = grads.get(k);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    if generated != 0 {
        return Err(Error::Contract("gradient check consumed generated inputs".into()));
    }
    Ok(GradientCheck {
        n_params: model.params.n_scalars(),
        max_rel_error: worst,
    })
}

pub fn fit(model: GNet, ds: &Dataset, train_frac: f64) -> Result<FittedModel> {
    let (model, report) = train(model, ds, train_frac)?;
    let bank = collect_residuals(&model, &ds.subset(&report.val_indices))?;
    Ok(FittedModel { model, bank, report })
}
