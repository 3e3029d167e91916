//! Sequential conditional-expectation network.
//!
//! At step `t` the network reads `x_t = [L_t, A_t]` (normalized), forms a
//! representation `R_t` and predicts the covariate groups of `L_{t+1}` one
//! after another. Head `j` sees `R_t` and the values of groups `0..j`, so
//! the product of the heads is a factorization of the joint conditional.
//! The representation is either the raw input (identity) or an LSTM state;
//! each head is either affine or an LSTM followed by an affine readout.

mod checkpoint;
mod dropout;
mod layers;
mod norm;
mod residuals;
mod train;

use std::str::FromStr;

use ndarray::{concatenate, s, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

pub use checkpoint::{checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use dropout::MaskSet;
pub use layers::{Linear, Lstm, LstmCache, Mat, Params, Tensor};
pub use norm::Normalizer;
pub use residuals::{collect_residuals, ResidualBank};
pub use train::{check_gradients, fit, train, EpochLoss, FittedModel, GradientCheck, TrainReport};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose, StreamRng};
use crate::schema::{Action, ChannelKind, ChannelSchema};
use layers::LstmCache as CellCache;

/// Columns of the treatment head output.
pub const TREAT_OUTPUTS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum RepresentationKind {
    Identity,
    Recurrent { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum HeadKind {
    Linear,
    Recurrent { hidden: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    #[default]
    Adam,
}

/// The four architecture cells of the model grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    M1,
    M2,
    M3,
    M4,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::M1, Preset::M2, Preset::M3, Preset::M4];

    pub fn name(self) -> &'static str {
        match self {
            Preset::M1 => "M1",
            Preset::M2 => "M2",
            Preset::M3 => "M3",
            Preset::M4 => "M4",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "M1" => Ok(Preset::M1),
            "M2" => Ok(Preset::M2),
            "M3" => Ok(Preset::M3),
            "M4" => Ok(Preset::M4),
            _ => Err(Error::Config(format!("unknown model preset `{s}`"))),
        }
    }
}

fn default_batch() -> usize {
    64
}
fn default_epochs() -> usize {
    50
}
fn default_clip() -> f64 {
    5.0
}
fn default_treatment_head() -> HeadKind {
    HeadKind::Linear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GNetConfig {
    #[serde(default)]
    pub name: String,
    pub representation: RepresentationKind,
    /// One entry per covariate group, in group order.
    pub heads: Vec<HeadKind>,
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Recurrent dropout rate. Zero disables dropout.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub include_treatment_head: bool,
    #[serde(default = "default_treatment_head")]
    pub treatment_head: HeadKind,
    #[serde(default)]
    pub optimizer: Optimizer,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    /// Stop after this many epochs without validation improvement.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl GNetConfig {
    /// Preset hyper-parameters. A group made only of binary channels gets the
    /// small "categorical" head width.
    pub fn preset(preset: Preset, schema: &ChannelSchema) -> Self {
        let categorical = |j: usize| {
            schema
                .group_indices(j)
                .iter()
                .all(|&c| schema.channels[c].kind == ChannelKind::Binary)
        };
        let heads = |cat: usize, cont: usize| -> Vec<HeadKind> {
            (0..schema.n_groups())
                .map(|j| HeadKind::Recurrent {
                    hidden: if categorical(j) { cat } else { cont },
                })
                .collect()
        };
        let linear = vec![HeadKind::Linear; schema.n_groups()];
        let (representation, heads, learning_rate) = match preset {
            Preset::M1 => (RepresentationKind::Identity, linear, 0.005),
            Preset::M2 => (RepresentationKind::Recurrent { hidden: 30 }, linear, 0.001),
            Preset::M3 => (RepresentationKind::Identity, heads(10, 75), 0.005),
            Preset::M4 => (RepresentationKind::Recurrent { hidden: 30 }, heads(5, 30), 0.001),
        };
        Self {
            name: preset.name().into(),
            representation,
            heads,
            learning_rate,
            batch_size: default_batch(),
            epochs: default_epochs(),
            dropout: 0.0,
            include_treatment_head: false,
            treatment_head: default_treatment_head(),
            optimizer: Optimizer::default(),
            grad_clip: default_clip(),
            patience: None,
            seed: 0,
        }
    }

    /// Parses a JSON config; unknown kinds or fields are configuration errors.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }

    pub fn validate(&self, schema: &ChannelSchema) -> Result<()> {
        if self.heads.len() != schema.n_groups() {
            return Err(Error::Config(format!(
                "{} heads configured for {} covariate groups",
                self.heads.len(),
                schema.n_groups()
            )));
        }
        let hidden_ok = |h: &HeadKind| !matches!(h, HeadKind::Recurrent { hidden: 0 });
        if matches!(self.representation, RepresentationKind::Recurrent { hidden: 0 })
            || !self.heads.iter().all(hidden_ok)
            || !hidden_ok(&self.treatment_head)
        {
            return Err(Error::Config("recurrent layers need a positive hidden size".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout rate {} not in [0, 1)", self.dropout)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("gradient clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Head {
    Linear(Linear),
    Recurrent { cell: Lstm, out: Linear },
}

impl Head {
    fn build(kind: HeadKind, p: &mut Params, name: &str, n_in: usize, n_out: usize, rng: &mut StreamRng) -> Self {
        match kind {
            HeadKind::Linear => Head::Linear(Linear::new(p, name, n_in, n_out, rng)),
            HeadKind::Recurrent { hidden } => Head::Recurrent {
                cell: Lstm::new(p, &format!("{name}.lstm"), n_in, hidden, rng),
                out: Linear::new(p, &format!("{name}.out"), hidden, n_out, rng),
            },
        }
    }

    fn cell(&self) -> Option<&Lstm> {
        match self {
            Head::Linear(_) => None,
            Head::Recurrent { cell, .. } => Some(cell),
        }
    }
}

/// Dropout site indices `(input, hidden)` of one LSTM cell.
type Sites = Option<(usize, usize)>;

#[derive(Debug, Clone)]
struct Arch {
    n_channels: usize,
    input_dim: usize,
    rep_dim: usize,
    rep: Option<Lstm>,
    rep_sites: Sites,
    heads: Vec<Head>,
    head_sites: Vec<Sites>,
    treatment: Option<Head>,
    treat_sites: Sites,
    groups: Vec<Vec<usize>>,
    binary: Vec<bool>,
    site_sizes: Vec<usize>,
}

impl Arch {
    fn register(&mut self, cell: Option<&Lstm>) -> Sites {
        cell.map(|c| {
            self.site_sizes.push(c.n_in);
            self.site_sizes.push(c.hidden);
            (self.site_sizes.len() - 2, self.site_sizes.len() - 1)
        })
    }
}

#[derive(Debug, Clone)]
pub struct GNet {
    config: GNetConfig,
    schema: ChannelSchema,
    norm: Normalizer,
    params: Params,
    arch: Arch,
}

/// Value supplied for a group after its head has produced an estimate.
/// Training and warm-up use `Observed`; simulation uses `Generated`.
#[derive(Debug, Clone)]
pub enum Feed {
    Observed(Mat),
    Generated(Mat),
}

impl Feed {
    fn into_inner(self) -> (Mat, bool) {
        match self {
            Feed::Observed(m) => (m, false),
            Feed::Generated(m) => (m, true),
        }
    }
}

/// Recurrent state of a batch of sequences plus their dropout masks.
#[derive(Debug, Clone)]
pub struct StepState {
    batch: usize,
    rep: Option<(Mat, Mat)>,
    heads: Vec<Option<(Mat, Mat)>>,
    treat: Option<(Mat, Mat)>,
    masks: Vec<Option<Mat>>,
    generated_inputs: usize,
}

impl StepState {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of model-generated group values consumed so far.
    pub fn generated_inputs(&self) -> usize {
        self.generated_inputs
    }

    /// Replicates a single-row state `n` times. Only valid without dropout
    /// masks, which are per row.
    pub fn expand(&self, n: usize) -> Result<StepState> {
        if self.batch != 1 || self.masks.iter().any(Option::is_some) {
            return Err(Error::Contract(
                "only a single-row state without dropout masks can be expanded".into(),
            ));
        }
        let rep = |m: &Mat| m.broadcast((n, m.ncols())).expect("single row").to_owned();
        let pair = |p: &Option<(Mat, Mat)>| p.as_ref().map(|(h, c)| (rep(h), rep(c)));
        Ok(StepState {
            batch: n,
            rep: pair(&self.rep),
            heads: self.heads.iter().map(pair).collect(),
            treat: pair(&self.treat),
            masks: self.masks.clone(),
            generated_inputs: self.generated_inputs,
        })
    }

    fn mask(&self, site: usize) -> Option<&Mat> {
        self.masks[site].as_ref()
    }
}

#[derive(Debug, Clone)]
enum HeadCache {
    Linear { z: Mat },
    Recurrent { cell: CellCache, h: Mat },
}

/// Everything the backward pass needs from one forward step.
#[derive(Debug, Clone)]
struct StepCache {
    rep: Option<CellCache>,
    heads: Vec<HeadCache>,
    treat: Option<HeadCache>,
    outs: Vec<Mat>,
    treat_out: Option<Mat>,
}

/// Representation at the end of a history prefix, with the head states
/// needed to predict the next row.
#[derive(Debug, Clone)]
pub struct Representation {
    pub r: Vec<f64>,
    state: StepState,
}

fn zeros_pair(batch: usize, hidden: usize) -> (Mat, Mat) {
    (Mat::zeros((batch, hidden)), Mat::zeros((batch, hidden)))
}

fn sigmoid(x: f64) -> f64 {
    0.5 + 0.5 * (0.5 * x).tanh()
}

impl GNet {
    pub fn build(config: GNetConfig, schema: ChannelSchema) -> Result<GNet> {
        config.validate(&schema)?;
        let mut rng = rng::stream(config.seed, 0, Purpose::Init);
        let mut params = Params::default();
        let n_channels = schema.len();
        let input_dim = n_channels + 2;
        let rep = match config.representation {
            RepresentationKind::Identity => None,
            RepresentationKind::Recurrent { hidden } => {
                Some(Lstm::new(&mut params, "representation", input_dim, hidden, &mut rng))
            }
        };
        let rep_dim = rep.map_or(input_dim, |c| c.hidden);
        let groups: Vec<Vec<usize>> = (0..schema.n_groups()).map(|j| schema.group_indices(j)).collect();
        let mut heads = Vec::with_capacity(groups.len());
        let mut preceding = 0;
        for (j, (kind, group)) in config.heads.iter().zip(&groups).enumerate() {
            heads.push(Head::build(
                *kind,
                &mut params,
                &format!("head{j}"),
                rep_dim + preceding,
                group.len(),
                &mut rng,
            ));
            preceding += group.len();
        }
        let treatment = config.include_treatment_head.then(|| {
            Head::build(
                config.treatment_head,
                &mut params,
                "treatment",
                rep_dim + n_channels,
                TREAT_OUTPUTS,
                &mut rng,
            )
        });
        let binary = schema
            .channels
            .iter()
            .map(|c| c.kind == ChannelKind::Binary)
            .collect();
        let mut arch = Arch {
            n_channels,
            input_dim,
            rep_dim,
            rep,
            rep_sites: None,
            heads,
            head_sites: Vec::new(),
            treatment,
            treat_sites: None,
            groups,
            binary,
            site_sizes: Vec::new(),
        };
        arch.rep_sites = arch.register(rep.as_ref());
        let head_cells: Vec<Option<Lstm>> = arch.heads.iter().map(|h| h.cell().copied()).collect();
        arch.head_sites = head_cells.iter().map(|c| arch.register(c.as_ref())).collect();
        let treat_cell = arch.treatment.and_then(|h| h.cell().copied());
        arch.treat_sites = arch.register(treat_cell.as_ref());
        Ok(GNet {
            norm: Normalizer::identity(n_channels),
            config,
            schema,
            params,
            arch,
        })
    }

    pub fn config(&self) -> &GNetConfig {
        &self.config
    }

    pub fn schema(&self) -> &ChannelSchema {
        &self.schema
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    pub fn set_normalizer(&mut self, norm: Normalizer) -> Result<()> {
        if norm.mean.len() != self.arch.n_channels || norm.sd.len() != self.arch.n_channels {
            return Err(Error::DimensionMismatch(format!(
                "normalizer has {} channels, model has {}",
                norm.mean.len(),
                self.arch.n_channels
            )));
        }
        self.norm = norm;
        Ok(())
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn has_treatment_head(&self) -> bool {
        self.arch.treatment.is_some()
    }

    pub fn dropout_site_sizes(&self) -> &[usize] {
        &self.arch.site_sizes
    }

    /// Fresh Bernoulli masks for every dropout site at the configured rate.
    pub fn sample_dropout_masks(&self, rng: &mut StreamRng) -> MaskSet {
        MaskSet::sample(&self.arch.site_sizes, self.config.dropout, rng)
    }

    /// Zero state for `batch` sequences. `masks`, when given, holds one
    /// `MaskSet` per row and stays attached for the life of the state.
    pub fn initial_state(&self, batch: usize, masks: Option<&[MaskSet]>) -> Result<StepState> {
        let masks = match masks {
            None => vec![None; self.arch.site_sizes.len()],
            Some(ms) => {
                if ms.len() != batch {
                    return Err(Error::DimensionMismatch(format!(
                        "{} mask sets for a batch of {batch}",
                        ms.len()
                    )));
                }
                if ms.iter().any(|m| m.sizes() != self.arch.site_sizes) {
                    return Err(Error::DimensionMismatch("mask set does not fit the model".into()));
                }
                (0..self.arch.site_sizes.len())
                    .map(|s| Some(dropout::stack_site(ms, s)))
                    .collect()
            }
        };
        Ok(StepState {
            batch,
            rep: self.arch.rep.map(|c| zeros_pair(batch, c.hidden)),
            heads: self
                .arch
                .heads
                .iter()
                .map(|h| h.cell().map(|c| zeros_pair(batch, c.hidden)))
                .collect(),
            treat: self
                .arch
                .treatment
                .and_then(|h| h.cell().map(|c| zeros_pair(batch, c.hidden))),
            masks,
            generated_inputs: 0,
        })
    }

    fn rep_forward(&self, st: &mut StepState, x: ArrayView2<f64>) -> (Mat, Option<CellCache>) {
        match (&self.arch.rep, self.arch.rep_sites) {
            (Some(cell), Some((sx, sh))) => {
                let (h, c) = st.rep.take().expect("recurrent state");
                let (h2, c2, cache) =
                    cell.step(&self.params, x, h.view(), c.view(), st.mask(sx), st.mask(sh));
                st.rep = Some((h2.clone(), c2));
                (h2, Some(cache))
            }
            _ => (x.to_owned(), None),
        }
    }

    fn head_forward(
        &self,
        head: &Head,
        sites: Sites,
        hidden: &mut Option<(Mat, Mat)>,
        masks: &[Option<Mat>],
        z: Mat,
    ) -> (Mat, HeadCache) {
        match head {
            Head::Linear(lin) => (lin.forward(&self.params, z.view()), HeadCache::Linear { z }),
            Head::Recurrent { cell, out } => {
                let (sx, sh) = sites.expect("recurrent head has dropout sites");
                let (h, c) = hidden.take().expect("recurrent head state");
                let (h2, c2, cache) = cell.step(
                    &self.params,
                    z.view(),
                    h.view(),
                    c.view(),
                    masks[sx].as_ref(),
                    masks[sh].as_ref(),
                );
                let y = out.forward(&self.params, h2.view());
                *hidden = Some((h2.clone(), c2));
                (y, HeadCache::Recurrent { cell: cache, h: h2 })
            }
        }
    }

    /// One step in normalized space. `feed(j, out)` receives head `j`'s raw
    /// output (normalized means, logits for binary channels) and returns the
    /// normalized group values to condition later heads on.
    fn step_norm(
        &self,
        st: &mut StepState,
        x: ArrayView2<f64>,
        feed: &mut dyn FnMut(usize, &Mat) -> Result<Feed>,
    ) -> Result<StepCache> {
        if x.ncols() != self.arch.input_dim || x.nrows() != st.batch {
            return Err(Error::DimensionMismatch(format!(
                "step input is {}x{}, expected {}x{}",
                x.nrows(),
                x.ncols(),
                st.batch,
                self.arch.input_dim
            )));
        }
        let (r, rep_cache) = self.rep_forward(st, x);
        let mut fed: Vec<Mat> = Vec::with_capacity(self.arch.heads.len());
        let mut outs = Vec::with_capacity(self.arch.heads.len());
        let mut head_caches = Vec::with_capacity(self.arch.heads.len());
        for (j, head) in self.arch.heads.iter().enumerate() {
            let z = concat_cols(&r, &fed);
            let mut hidden = st.heads[j].take();
            let (y, cache) = self.head_forward(head, self.arch.head_sites[j], &mut hidden, &st.masks, z);
            st.heads[j] = hidden;
            let (values, generated) = feed(j, &y)?.into_inner();
            if values.dim() != (st.batch, self.arch.groups[j].len()) {
                return Err(Error::DimensionMismatch(format!(
                    "group {j} values have shape {:?}",
                    values.dim()
                )));
            }
            st.generated_inputs += usize::from(generated);
            fed.push(values);
            outs.push(y);
            head_caches.push(cache);
        }
        let (treat_out, treat_cache) = match &self.arch.treatment {
            Some(head) => {
                let z = concat_cols(&r, &fed);
                let mut hidden = st.treat.take();
                let (y, cache) = self.head_forward(head, self.arch.treat_sites, &mut hidden, &st.masks, z);
                st.treat = hidden;
                (Some(y), Some(cache))
            }
            None => (None, None),
        };
        Ok(StepCache {
            rep: rep_cache,
            heads: head_caches,
            treat: treat_cache,
            outs,
            treat_out,
        })
    }

    fn normalize_inputs(&self, l: ArrayView2<f64>, a: ArrayView2<f64>) -> Result<Mat> {
        if l.ncols() != self.arch.n_channels || a.ncols() != 2 || l.nrows() != a.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} channels and 2 action columns, got {} and {}",
                self.arch.n_channels,
                l.ncols(),
                a.ncols()
            )));
        }
        let n = self.arch.n_channels;
        Ok(Mat::from_shape_fn((l.nrows(), n + 2), |(r, c)| {
            if c < n {
                self.norm.normalize(c, l[[r, c]])
            } else {
                self.norm.normalize_action(c - n, a[[r, c - n]])
            }
        }))
    }

    /// Expectations in raw units for group `j`: means for continuous
    /// channels, probabilities for binary ones.
    fn expectations(&self, j: usize, out: &Mat) -> Mat {
        let idx = &self.arch.groups[j];
        let mut e = out.clone();
        for (k, &c) in idx.iter().enumerate() {
            let mut col = e.column_mut(k);
            if self.arch.binary[c] {
                col.mapv_inplace(sigmoid);
            } else {
                col.mapv_inplace(|z| self.norm.denormalize(c, z));
            }
        }
        e
    }

    fn normalize_group(&self, j: usize, values: &Mat) -> Mat {
        let mut v = values.clone();
        for (k, &c) in self.arch.groups[j].iter().enumerate() {
            v.column_mut(k).mapv_inplace(|x| self.norm.normalize(c, x));
        }
        v
    }

    /// One step in raw units. `l` and `a` are `[batch, channels]` and
    /// `[batch, 2]`. `feed(j, expectations)` must return the raw values of
    /// group `j`. Returns the treatment head output for the next action as
    /// `[P(treat), P(fluid | treat), fluid dose, vasopressor dose]`.
    pub fn step(
        &self,
        st: &mut StepState,
        l: ArrayView2<f64>,
        a: ArrayView2<f64>,
        feed: &mut dyn FnMut(usize, &Mat) -> Result<Feed>,
    ) -> Result<Option<Mat>> {
        let x = self.normalize_inputs(l, a)?;
        let cache = self.step_norm(st, x.view(), &mut |j, out| {
            let e = self.expectations(j, out);
            Ok(match feed(j, &e)? {
                Feed::Observed(v) => Feed::Observed(self.normalize_group(j, &v)),
                Feed::Generated(v) => Feed::Generated(self.normalize_group(j, &v)),
            })
        })?;
        Ok(cache.treat_out.map(|t| self.treatment_expectations(&t)))
    }

    fn treatment_expectations(&self, out: &Mat) -> Mat {
        let mut e = out.clone();
        e.column_mut(0).mapv_inplace(sigmoid);
        e.column_mut(1).mapv_inplace(sigmoid);
        e.column_mut(2).mapv_inplace(|z| self.norm.denormalize_dose(0, z));
        e.column_mut(3).mapv_inplace(|z| self.norm.denormalize_dose(1, z));
        e
    }

    fn group_values(&self, j: usize, row: &[f64]) -> Mat {
        let idx = &self.arch.groups[j];
        Mat::from_shape_fn((1, idx.len()), |(_, k)| row[idx[k]])
    }

    /// Representation after consuming the history `L_0..L_t`, `A_0..A_t`.
    /// Earlier rows are replayed with teacher forcing so recurrent heads are
    /// in the state they would have at `t`.
    pub fn represent(&self, l: &[Vec<f64>], a: &[Action]) -> Result<Representation> {
        if l.is_empty() {
            return Err(Error::Empty("history must contain at least one row".into()));
        }
        if a.len() != l.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} covariate rows but {} actions",
                l.len(),
                a.len()
            )));
        }
        if let Some(bad) = l.iter().find(|r| r.len() != self.arch.n_channels) {
            return Err(Error::DimensionMismatch(format!(
                "history row has {} channels, schema has {}",
                bad.len(),
                self.arch.n_channels
            )));
        }
        let row = |t: usize| {
            (
                Mat::from_shape_vec((1, l[t].len()), l[t].clone()).expect("row"),
                Mat::from_shape_vec((1, 2), a[t].as_array().to_vec()).expect("action"),
            )
        };
        let mut st = self.initial_state(1, None)?;
        let last = l.len() - 1;
        for t in 0..last {
            let (lt, at) = row(t);
            self.step(&mut st, lt.view(), at.view(), &mut |j, _| {
                Ok(Feed::Observed(self.group_values(j, &l[t + 1])))
            })?;
        }
        let (lt, at) = row(last);
        let x = self.normalize_inputs(lt.view(), at.view())?;
        let (r, _) = self.rep_forward(&mut st, x.view());
        Ok(Representation {
            r: r.row(0).to_vec(),
            state: st,
        })
    }

    /// Conditional expectation of group `j` of the next row given the
    /// representation and the raw values of groups `0..j`, which must be
    /// supplied in order as `(group, values)` pairs.
    pub fn predict_group(&self, rep: &Representation, j: usize, preceding: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
        if j >= self.arch.heads.len() {
            return Err(Error::Contract(format!("no covariate group {j}")));
        }
        if preceding.len() != j || preceding.iter().enumerate().any(|(i, (g, _))| *g != i) {
            return Err(Error::Contract(format!(
                "group {j} needs the values of groups 0..{j} in order, got {:?}",
                preceding.iter().map(|(g, _)| *g).collect::<Vec<_>>()
            )));
        }
        let mut fed = Vec::with_capacity(j);
        for (g, values) in preceding {
            if values.len() != self.arch.groups[*g].len() {
                return Err(Error::DimensionMismatch(format!(
                    "group {g} has {} channels, got {} values",
                    self.arch.groups[*g].len(),
                    values.len()
                )));
            }
            let v = Mat::from_shape_vec((1, values.len()), values.clone()).expect("row");
            fed.push(self.normalize_group(*g, &v));
        }
        let r = Mat::from_shape_vec((1, rep.r.len()), rep.r.clone()).expect("row");
        let z = concat_cols(&r, &fed);
        let mut hidden = rep.state.heads[j].clone();
        let (y, _) = self.head_forward(
            &self.arch.heads[j],
            self.arch.head_sites[j],
            &mut hidden,
            &rep.state.masks,
            z,
        );
        Ok(self.expectations(j, &y).row(0).to_vec())
    }
}

fn concat_cols(r: &Mat, fed: &[Mat]) -> Mat {
    if fed.is_empty() {
        return r.clone();
    }
    let mut views = Vec::with_capacity(fed.len() + 1);
    views.push(r.view());
    views.extend(fed.iter().map(|m| m.view()));
    concatenate(Axis(1), &views).expect("matching batch sizes")
}

/// Drops the first `rep_dim` columns, keeping the gradient with respect to
/// the representation.
fn rep_part(dz: &Mat, rep_dim: usize) -> ArrayView2<'_, f64> {
    dz.slice(s![.., ..rep_dim])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::ChannelSpec;

    pub(crate) fn toy_schema() -> ChannelSchema {
        ChannelSchema::new(
            vec![
                ChannelSpec {
                    name: "flag".into(),
                    kind: ChannelKind::Binary,
                    group: 0,
                },
                ChannelSpec {
                    name: "x".into(),
                    kind: ChannelKind::Continuous,
                    group: 1,
                },
                ChannelSpec {
                    name: "y".into(),
                    kind: ChannelKind::Continuous,
                    group: 1,
                },
            ],
            "x",
        )
        .unwrap()
    }

    fn history(len: usize, shift: f64) -> (Vec<Vec<f64>>, Vec<Action>) {
        let l = (0..len)
            .map(|t| vec![(t % 2) as f64, t as f64 * 0.3 + shift, 1.0 - t as f64 * 0.1])
            .collect();
        let a = (0..len).map(|t| Action::fluid(t as f64)).collect();
        (l, a)
    }

    #[test]
    fn presets_cover_the_grid() {
        let schema = toy_schema();
        let m1 = GNetConfig::preset(Preset::M1, &schema);
        assert_eq!(m1.representation, RepresentationKind::Identity);
        assert_eq!(m1.heads, vec![HeadKind::Linear, HeadKind::Linear]);
        let m3 = GNetConfig::preset(Preset::M3, &schema);
        assert_eq!(
            m3.heads,
            vec![HeadKind::Recurrent { hidden: 10 }, HeadKind::Recurrent { hidden: 75 }]
        );
        assert_eq!(m3.learning_rate, 0.005);
        let m4 = GNetConfig::preset(Preset::M4, &schema);
        assert_eq!(m4.representation, RepresentationKind::Recurrent { hidden: 30 });
        assert_eq!(
            m4.heads,
            vec![HeadKind::Recurrent { hidden: 5 }, HeadKind::Recurrent { hidden: 30 }]
        );
        assert_eq!((m4.learning_rate, m4.batch_size), (0.001, 64));
        for p in Preset::ALL {
            GNet::build(GNetConfig::preset(p, &schema), schema.clone()).unwrap();
        }
    }

    #[test]
    fn unknown_kind_is_config_error() {
        let text = r#"{"representation":{"kind":"attention"},"heads":[{"kind":"linear"}],"learning_rate":0.1}"#;
        assert!(GNetConfig::from_json(text).unwrap_err().is_config());
        let text = r#"{"representation":{"kind":"identity"},"heads":[{"kind":"transformer"}],"learning_rate":0.1}"#;
        assert!(GNetConfig::from_json(text).unwrap_err().is_config());
        let text = r#"{"representation":{"kind":"identity"},"heads":[{"kind":"linear"}],"learning_rate":0.1}"#;
        let config = GNetConfig::from_json(text).unwrap();
        assert!(GNet::build(config, toy_schema()).unwrap_err().is_config());
    }

    #[test]
    fn same_seed_same_parameters() {
        let schema = toy_schema();
        let config = GNetConfig::preset(Preset::M4, &schema);
        let a = GNet::build(config.clone(), schema.clone()).unwrap();
        let b = GNet::build(config.clone(), schema.clone()).unwrap();
        assert_eq!(a.params(), b.params());
        let c = GNet::build(GNetConfig { seed: 1, ..config }, schema).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn identity_representation_passes_inputs_through() {
        let schema = toy_schema();
        let net = GNet::build(GNetConfig::preset(Preset::M1, &schema), schema).unwrap();
        let (l, a) = history(4, 0.0);
        let rep = net.represent(&l, &a).unwrap();
        let mut expected = l[3].clone();
        expected.extend(a[3].as_array());
        assert_eq!(rep.r, expected);
    }

    #[test]
    fn recurrent_representation_of_one_row_starts_from_zero_state() {
        let schema = toy_schema();
        let net = GNet::build(GNetConfig::preset(Preset::M2, &schema), schema).unwrap();
        let (l, a) = history(1, 0.0);
        let rep = net.represent(&l, &a).unwrap();
        let cell = net.arch.rep.unwrap();
        let x = Mat::from_shape_fn((1, 5), |(_, c)| if c < 3 { l[0][c] } else { a[0].as_array()[c - 3] });
        let zeros = Mat::zeros((1, 30));
        let (h, _, _) = cell.step(net.params(), x.view(), zeros.view(), zeros.view(), None, None);
        assert_eq!(rep.r, h.row(0).to_vec());
    }

    #[test]
    fn recurrent_representation_remembers_the_past() {
        let schema = toy_schema();
        let net = GNet::build(GNetConfig::preset(Preset::M2, &schema), schema).unwrap();
        let (l, a) = history(8, 0.0);
        let mut l2 = l.clone();
        l2[2][1] += 3.0;
        let r1 = net.represent(&l, &a).unwrap().r;
        let r2 = net.represent(&l2, &a).unwrap().r;
        assert_ne!(r1, r2);
        let id = GNet::build(GNetConfig::preset(Preset::M1, &toy_schema()), toy_schema()).unwrap();
        assert_eq!(id.represent(&l, &a).unwrap().r, id.represent(&l2, &a).unwrap().r);
    }

    #[test]
    fn history_with_wrong_width_is_rejected() {
        let schema = toy_schema();
        let net = GNet::build(GNetConfig::preset(Preset::M1, &schema), schema).unwrap();
        let err = net.represent(&[vec![0.0, 1.0]], &[Action::NONE]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch(_)));
        assert!(net.represent(&[], &[]).is_err());
    }

    #[test]
    fn groups_must_arrive_in_order() {
        let schema = toy_schema();
        for preset in Preset::ALL {
            let net = GNet::build(GNetConfig::preset(preset, &schema), schema.clone()).unwrap();
            let (l, a) = history(3, 0.0);
            let rep = net.represent(&l, &a).unwrap();
            let p0 = net.predict_group(&rep, 0, &[]).unwrap();
            assert!(p0.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(matches!(net.predict_group(&rep, 1, &[]), Err(Error::Contract(_))));
            assert!(matches!(
                net.predict_group(&rep, 1, &[(1, vec![0.0, 0.0])]),
                Err(Error::Contract(_))
            ));
            let p1 = net.predict_group(&rep, 1, &[(0, vec![1.0])]).unwrap();
            let p1b = net.predict_group(&rep, 1, &[(0, vec![0.0])]).unwrap();
            assert_eq!(p1.len(), 2);
            assert_ne!(p1, p1b, "{preset:?}: group 1 ignores group 0");
        }
    }

    #[test]
    fn binary_outputs_are_probabilities_for_large_weights() {
        let schema = toy_schema();
        let mut net = GNet::build(GNetConfig::preset(Preset::M1, &schema), schema).unwrap();
        net.params_mut().scale(500.0);
        let (l, a) = history(3, 50.0);
        let rep = net.represent(&l, &a).unwrap();
        let p = net.predict_group(&rep, 0, &[]).unwrap();
        assert!(p.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn expanded_state_matches_batched_steps() {
        let schema = toy_schema();
        let net = GNet::build(GNetConfig::preset(Preset::M4, &schema), schema).unwrap();
        let (l, a) = history(3, 0.0);
        let rep = net.represent(&l, &a).unwrap();
        let wide = rep.state.expand(3).unwrap();
        assert_eq!(wide.batch(), 3);
        let lm = Mat::from_shape_fn((3, 3), |(_, c)| l[2][c]);
        let am = Mat::zeros((3, 2));
        let mut s1 = wide.clone();
        let mut outs = Vec::new();
        net.step(&mut s1, lm.view(), am.view(), &mut |_, e| {
            outs.push(e.clone());
            Ok(Feed::Generated(e.clone()))
        })
        .unwrap();
        assert_eq!(s1.generated_inputs(), 2);
        for o in &outs {
            assert_eq!(o.row(0), o.row(2));
        }
    }
}
