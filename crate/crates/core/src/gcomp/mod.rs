//! Monte-Carlo g-computation.
//!
//! Given a patient's observed history up to step `m`, a fitted sequence
//! model and a treatment strategy, each draw replays the history through
//! the model (teacher forced), then alternates between choosing an action
//! with the strategy and sampling the next covariate row group by group:
//! continuous channels as model estimate plus a residual drawn from the
//! bank, binary channels as Bernoulli draws.

mod linear;
mod natural;
mod output;
mod simulate;
mod strategy;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

pub use linear::{LinearGaussianModel, LinearTreatment};
pub use natural::{natural_course, positivity_check, NaturalCourse, PositivityReport};
pub use output::{read_mc_outputs, write_mc_outputs, McOutput, MC_FORMAT, MC_VERSION};
pub use simulate::{draw_seed, g_compute, g_compute_dataset, simulate_one, GcompOptions, SimulatedDraw};
pub use strategy::{Arm, StrategySpec};

use crate::dataset::Trajectory;
use crate::error::{Error, Result};
use crate::gnet::{Feed, GNet, Mat, MaskSet, StepState};
use crate::rng::StreamRng;
use crate::schema::{Action, ChannelSchema};

/// A conditional model that can be stepped forward in batches.
pub trait SequenceModel: Sync {
    type State: Clone + Send;

    fn schema(&self) -> &ChannelSchema;

    fn dropout_rate(&self) -> f64 {
        0.0
    }

    fn sample_masks(&self, _rng: &mut StreamRng) -> MaskSet {
        MaskSet::ones(&[])
    }

    fn has_treatment_head(&self) -> bool {
        false
    }

    fn initial_state(&self, batch: usize, masks: Option<&[MaskSet]>) -> Result<Self::State>;

    /// Copies a single-row state to `n` rows.
    fn expand(&self, state: &Self::State, n: usize) -> Result<Self::State>;

    /// Reads `L_t`, `A_t` (raw units, one row per sequence), calls
    /// `feed(j, expectations)` for every group in order and returns the
    /// treatment output for `A_{t+1}` if the model has one.
    fn step(
        &self,
        state: &mut Self::State,
        l: ArrayView2<f64>,
        a: ArrayView2<f64>,
        feed: &mut dyn FnMut(usize, &Mat) -> Result<Feed>,
    ) -> Result<Option<Mat>>;
}

impl SequenceModel for GNet {
    type State = StepState;

    fn schema(&self) -> &ChannelSchema {
        GNet::schema(self)
    }

    fn dropout_rate(&self) -> f64 {
        self.config().dropout
    }

    fn sample_masks(&self, rng: &mut StreamRng) -> MaskSet {
        self.sample_dropout_masks(rng)
    }

    fn has_treatment_head(&self) -> bool {
        GNet::has_treatment_head(self)
    }

    fn initial_state(&self, batch: usize, masks: Option<&[MaskSet]>) -> Result<StepState> {
        GNet::initial_state(self, batch, masks)
    }

    fn expand(&self, state: &StepState, n: usize) -> Result<StepState> {
        state.expand(n)
    }

    fn step(
        &self,
        state: &mut StepState,
        l: ArrayView2<f64>,
        a: ArrayView2<f64>,
        feed: &mut dyn FnMut(usize, &Mat) -> Result<Feed>,
    ) -> Result<Option<Mat>> {
        GNet::step(self, state, l, a, feed)
    }
}

/// Observed history `H_m`: rows `L_0..L_m` and actions `A_0..A_{m-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientHistory {
    pub id: u64,
    /// Trajectory seed, used by strategies whose tie-breaking coin is
    /// keyed to the patient.
    pub seed: u64,
    pub l: Vec<Vec<f64>>,
    pub a: Vec<Action>,
    /// Action at step `m` for a learned treatment strategy when there is
    /// no earlier step to predict it from.
    #[serde(default)]
    pub baseline_action: Option<Action>,
}

impl PatientHistory {
    pub fn from_trajectory(tr: &Trajectory, m: usize) -> Result<Self> {
        if m > tr.k {
            return Err(Error::Config(format!("history length m={m} exceeds K={}", tr.k)));
        }
        Ok(Self {
            id: tr.id,
            seed: tr.seed,
            l: tr.l[..=m].to_vec(),
            a: tr.a[..m].to_vec(),
            baseline_action: Some(tr.a[m]),
        })
    }

    pub fn m(&self) -> usize {
        self.l.len().saturating_sub(1)
    }

    pub fn check(&self, schema: &ChannelSchema) -> Result<()> {
        if self.l.is_empty() || self.a.len() + 1 != self.l.len() {
            return Err(Error::DimensionMismatch(format!(
                "history has {} rows and {} actions",
                self.l.len(),
                self.a.len()
            )));
        }
        if self.l.iter().any(|r| r.len() != schema.len()) {
            return Err(Error::DimensionMismatch(format!(
                "history rows must have {} channels",
                schema.len()
            )));
        }
        Ok(())
    }
}
