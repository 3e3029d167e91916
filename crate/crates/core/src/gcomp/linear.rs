use ndarray::{Array2, ArrayView2};

use super::SequenceModel;
use crate::error::{Error, Result};
use crate::gnet::{Feed, Mat, MaskSet};
use crate::schema::{ChannelKind, ChannelSchema};

/// Fixed treatment probabilities and mean doses returned as the treatment
/// output of a [`LinearGaussianModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearTreatment {
    pub p_treat: f64,
    pub p_fluid: f64,
    pub fluid_dose: f64,
    pub vaso_dose: f64,
}

/// Known first-order linear model
/// `E[L_{t+1} | history] = T L_t + B A_t + c`, used as an exact oracle in
/// place of a fitted network.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    schema: ChannelSchema,
    pub transition: Vec<Vec<f64>>,
    pub action_gain: Vec<[f64; 2]>,
    pub intercept: Vec<f64>,
    pub treatment: Option<LinearTreatment>,
}

impl LinearGaussianModel {
    pub fn new(
        schema: ChannelSchema,
        transition: Vec<Vec<f64>>,
        action_gain: Vec<[f64; 2]>,
        intercept: Vec<f64>,
    ) -> Result<Self> {
        let d = schema.len();
        if transition.len() != d
            || transition.iter().any(|r| r.len() != d)
            || action_gain.len() != d
            || intercept.len() != d
        {
            return Err(Error::DimensionMismatch(format!(
                "linear model coefficients must match {d} channels"
            )));
        }
        if schema.channels.iter().any(|c| c.kind == ChannelKind::Binary) {
            return Err(Error::Config("linear model supports continuous channels only".into()));
        }
        Ok(Self {
            schema,
            transition,
            action_gain,
            intercept,
            treatment: None,
        })
    }

    /// One channel `y` with `E[y_{t+1}] = a·y_t + b·fluid_t`.
    pub fn scalar(a: f64, b: f64) -> Self {
        let schema = ChannelSchema::continuous(&["y"], "y").expect("valid schema");
        Self::new(schema, vec![vec![a]], vec![[b, 0.0]], vec![0.0]).expect("consistent shapes")
    }

    pub fn with_treatment(mut self, treatment: LinearTreatment) -> Self {
        self.treatment = Some(treatment);
        self
    }

    fn mean(&self, l: ArrayView2<f64>, a: ArrayView2<f64>, r: usize, c: usize) -> f64 {
        let lag: f64 = self.transition[c].iter().enumerate().map(|(k, w)| w * l[[r, k]]).sum();
        lag + self.action_gain[c][0] * a[[r, 0]] + self.action_gain[c][1] * a[[r, 1]] + self.intercept[c]
    }
}

impl SequenceModel for LinearGaussianModel {
    type State = usize;

    fn schema(&self) -> &ChannelSchema {
        &self.schema
    }

    fn has_treatment_head(&self) -> bool {
        self.treatment.is_some()
    }

    fn initial_state(&self, batch: usize, _masks: Option<&[MaskSet]>) -> Result<usize> {
        Ok(batch)
    }

    fn expand(&self, _state: &usize, n: usize) -> Result<usize> {
        Ok(n)
    }

    fn step(
        &self,
        state: &mut usize,
        l: ArrayView2<f64>,
        a: ArrayView2<f64>,
        feed: &mut dyn FnMut(usize, &Mat) -> Result<Feed>,
    ) -> Result<Option<Mat>> {
        let batch = *state;
        if l.dim() != (batch, self.schema.len()) || a.dim() != (batch, 2) {
            return Err(Error::DimensionMismatch("linear model step input shape".into()));
        }
        for j in 0..self.schema.n_groups() {
            let idx = self.schema.group_indices(j);
            let e = Array2::from_shape_fn((batch, idx.len()), |(r, k)| self.mean(l, a, r, idx[k]));
            feed(j, &e)?;
        }
        Ok(self.treatment.map(|t| {
            Array2::from_shape_fn((batch, 4), |(_, c)| [t.p_treat, t.p_fluid, t.fluid_dose, t.vaso_dose][c])
        }))
    }
}
