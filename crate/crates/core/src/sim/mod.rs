//! Stochastic hemodynamic ground-truth simulator.
//!
//! Each simulated patient draws hidden baseline inputs uniformly from
//! physiologic ranges, then evolves a discrete-time lumped model of blood
//! volume, peripheral resistance and heart rate. Random disease events
//! (sepsis, blood loss) perturb the state; treatments (fluids, vasopressors)
//! are chosen by a treatment-assignment rule from the current covariates.
//!
//! The lumped model is a surrogate for a full pulsatile circulation model; it
//! keeps the properties the downstream estimators depend on: fluids raise
//! volume and venous pressure, vasopressors raise resistance, both raise
//! arterial pressure within a step, and every driver of treatment is an
//! observed channel.

mod dynamics;
mod generate;
mod policy;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schema::{ChannelKind, ChannelSchema, ChannelSpec};

pub use dynamics::{derive_pressures, disease_step, sample_baseline, PatientSim};
pub use generate::{generate_dataset, oracle_draws, simulate_trajectory, SimulatedPatient};
pub use policy::{
    policy_counterfactual_c1, policy_counterfactual_c2, policy_observational,
    treat_probability, PolicyNoise, SimPolicy,
};

/// Continuous output channels, in schema order.
pub const CHANNELS: [&str; 18] = [
    "map", "sbp", "cvp", "hr", "tbv", "ar", "ap", "aq", "av", "pvv", "lvp", "lvq", "lvc", "rvp",
    "rvq", "rvc", "vt", "pth",
];

/// Binary channel flagging a disease event in the transition into `t`.
pub const DISEASE_CHANNEL: &str = "disease";

/// Closed interval a baseline input is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRanges {
    pub total_blood_volume: Range,
    pub nominal_heart_rate: Range,
    pub total_peripheral_resistance: Range,
    pub arterial_compliance: Range,
    pub pulmonary_arterial_compliance: Range,
    pub total_zero_pressure_filling_volume: Range,
    pub pulmonary_venous_compliance: Range,
    pub pulmonary_microcirculation_resistance: Range,
}

impl Default for InputRanges {
    fn default() -> Self {
        Self {
            total_blood_volume: Range::new(1500.0, 6000.0),
            nominal_heart_rate: Range::new(40.0, 160.0),
            total_peripheral_resistance: Range::new(0.1, 1.4),
            arterial_compliance: Range::new(0.4, 1.1),
            pulmonary_arterial_compliance: Range::new(0.1, 19.9),
            total_zero_pressure_filling_volume: Range::new(500.0, 3500.0),
            pulmonary_venous_compliance: Range::new(2.0, 3.4),
            pulmonary_microcirculation_resistance: Range::new(0.4, 1.0),
        }
    }
}

impl InputRanges {
    fn all(&self) -> [(&'static str, Range); 8] {
        [
            ("total_blood_volume", self.total_blood_volume),
            ("nominal_heart_rate", self.nominal_heart_rate),
            ("total_peripheral_resistance", self.total_peripheral_resistance),
            ("arterial_compliance", self.arterial_compliance),
            ("pulmonary_arterial_compliance", self.pulmonary_arterial_compliance),
            (
                "total_zero_pressure_filling_volume",
                self.total_zero_pressure_filling_volume,
            ),
            ("pulmonary_venous_compliance", self.pulmonary_venous_compliance),
            (
                "pulmonary_microcirculation_resistance",
                self.pulmonary_microcirculation_resistance,
            ),
        ]
    }
}

/// Treatment-rule coefficients shared by `g_o` and `g_c1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCoefficients {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    pub fluid_map: f64,
    pub fluid_cvp: f64,
    pub vaso_map: f64,
    pub vaso_cvp: f64,
    pub fluid_noise_mean: f64,
    pub fluid_noise_sd: f64,
    pub vaso_noise_mean: f64,
    pub vaso_noise_sd: f64,
    pub map_target: f64,
    pub cvp_target: f64,
    /// Probability that a treatment is a fluid bolus rather than a vasopressor.
    pub fluid_share: f64,
    /// `g_c1` treats only when SBP is at or below this value...
    pub c1_sbp_max: f64,
    /// ...and HR/SBP is at or below this value.
    pub c1_shock_index_max: f64,
}

impl Default for PolicyCoefficients {
    fn default() -> Self {
        Self {
            c0: 0.02,
            c1: 0.06,
            c2: 0.24,
            fluid_map: 10.0,
            fluid_cvp: 60.0,
            vaso_map: 0.1,
            vaso_cvp: 0.15,
            fluid_noise_mean: 1500.0,
            fluid_noise_sd: 1000.0,
            vaso_noise_mean: 0.0,
            vaso_noise_sd: 1.0,
            map_target: 65.0,
            cvp_target: 10.0,
            fluid_share: 0.5,
            c1_sbp_max: 100.0,
            c1_shock_index_max: 0.8,
        }
    }
}

/// Constants of the lumped surrogate dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsConstants {
    /// Fraction of the gap to baseline blood volume closed per step.
    pub volume_recovery: f64,
    /// Fraction of the gap to baseline resistance closed per step.
    pub resistance_recovery: f64,
    /// Resistance added per vasopressor dose unit.
    pub vaso_gain: f64,
    /// Fraction of the zero-pressure filling volume that is unstressed.
    pub unstressed_fraction: f64,
    /// Softness (mL) of the stressed-volume floor.
    pub stressed_softness: f64,
    /// CVP = stressed volume / (pulmonary venous compliance * this).
    pub venous_capacitance_scale: f64,
    pub stroke_volume_max: f64,
    pub stroke_half_volume: f64,
    pub baroreflex_gain: f64,
    pub heart_rate_relaxation: f64,
    pub heart_rate_min: f64,
    pub heart_rate_max: f64,
    /// Pulse pressure = this * stroke volume / arterial compliance.
    pub pulse_fraction: f64,
    /// Relative sd of the per-step Gaussian process noise on every channel.
    pub process_noise: f64,
}

impl Default for DynamicsConstants {
    fn default() -> Self {
        Self {
            volume_recovery: 0.02,
            resistance_recovery: 0.02,
            vaso_gain: 0.1,
            unstressed_fraction: 0.6,
            stressed_softness: 300.0,
            venous_capacitance_scale: 300.0,
            stroke_volume_max: 120.0,
            stroke_half_volume: 1500.0,
            baroreflex_gain: 2.0,
            heart_rate_relaxation: 0.1,
            heart_rate_min: 30.0,
            heart_rate_max: 220.0,
            pulse_fraction: 0.4,
            process_noise: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub ranges: InputRanges,
    /// Per-step probability of a disease event.
    pub disease_prob: f64,
    /// Probability that a disease event is sepsis (otherwise blood loss).
    pub sepsis_share: f64,
    pub sepsis_max_multiplier: f64,
    pub blood_loss_max_multiplier: f64,
    pub policy: PolicyCoefficients,
    pub dynamics: DynamicsConstants,
    /// Horizon: trajectories have `k + 1` rows.
    #[serde(rename = "K")]
    pub k: usize,
    /// Divergence step of the counterfactual regimes.
    pub m: usize,
    /// Number of trajectories per generated dataset.
    pub n: usize,
    pub master_seed: u64,
    /// Whether the disease flag is emitted as a binary channel.
    pub expose_disease_indicator: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            ranges: InputRanges::default(),
            disease_prob: 0.05,
            sepsis_share: 0.5,
            sepsis_max_multiplier: 0.7,
            blood_loss_max_multiplier: 0.95,
            policy: PolicyCoefficients::default(),
            dynamics: DynamicsConstants::default(),
            k: 64,
            m: 34,
            n: 10_000,
            master_seed: 20_200_101,
            expose_disease_indicator: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in self.ranges.all() {
            if !(r.lo <= r.hi) || !r.lo.is_finite() || !r.hi.is_finite() {
                return Err(Error::Config(format!(
                    "input range `{name}` is invalid: [{}, {}]",
                    r.lo, r.hi
                )));
            }
        }
        for (name, p) in [
            ("disease_prob", self.disease_prob),
            ("sepsis_share", self.sepsis_share),
            ("policy.fluid_share", self.policy.fluid_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be a probability, got {p}")));
            }
        }
        for (name, a) in [
            ("sepsis_max_multiplier", self.sepsis_max_multiplier),
            ("blood_loss_max_multiplier", self.blood_loss_max_multiplier),
        ] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {a}")));
            }
        }
        if self.m > self.k {
            return Err(Error::Config(format!(
                "divergence step m={} exceeds horizon K={}",
                self.m, self.k
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("N must be positive".into()));
        }
        Ok(())
    }

    /// Channel schema of generated datasets: the disease flag (if exposed)
    /// forms group 0, the continuous vitals group 1; the outcome is MAP.
    pub fn schema(&self) -> ChannelSchema {
        let cont_group = usize::from(self.expose_disease_indicator);
        let mut channels: Vec<ChannelSpec> = CHANNELS
            .iter()
            .map(|n| ChannelSpec {
                name: n.to_string(),
                kind: ChannelKind::Continuous,
                group: cont_group,
            })
            .collect();
        if self.expose_disease_indicator {
            channels.push(ChannelSpec {
                name: DISEASE_CHANNEL.into(),
                kind: ChannelKind::Binary,
                group: 0,
            });
        }
        ChannelSchema::new(channels, "map").expect("built-in schema is valid")
    }
}

/// Hidden per-patient inputs. Never written to datasets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentInputs {
    pub total_blood_volume: f64,
    pub nominal_heart_rate: f64,
    pub total_peripheral_resistance: f64,
    pub arterial_compliance: f64,
    pub pulmonary_arterial_compliance: f64,
    pub total_zero_pressure_filling_volume: f64,
    pub pulmonary_venous_compliance: f64,
    pub pulmonary_microcirculation_resistance: f64,
}

/// Full simulator state at one step: every output channel plus DBP.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SimState {
    pub t: usize,
    pub map: f64,
    pub sbp: f64,
    pub dbp: f64,
    pub cvp: f64,
    pub hr: f64,
    pub tbv: f64,
    /// Arteriolar (total peripheral) resistance.
    pub ar: f64,
    pub ap: f64,
    pub aq: f64,
    pub av: f64,
    pub pvv: f64,
    pub lvp: f64,
    pub lvq: f64,
    pub lvc: f64,
    pub rvp: f64,
    pub rvq: f64,
    pub rvc: f64,
    pub vt: f64,
    pub pth: f64,
    pub disease: bool,
}

impl SimState {
    /// Values in [`CHANNELS`] order.
    pub fn continuous_values(&self) -> [f64; 18] {
        [
            self.map, self.sbp, self.cvp, self.hr, self.tbv, self.ar, self.ap, self.aq, self.av,
            self.pvv, self.lvp, self.lvq, self.lvc, self.rvp, self.rvq, self.rvc, self.vt,
            self.pth,
        ]
    }

    /// Row in the order of `config.schema()`.
    pub fn to_row(&self, expose_disease: bool) -> Vec<f64> {
        let mut row = self.continuous_values().to_vec();
        if expose_disease {
            row.push(if self.disease { 1.0 } else { 0.0 });
        }
        row
    }

    /// Rebuilds a state from a dataset row (schema order). DBP is recovered
    /// from the MAP identity.
    pub fn from_row(schema: &ChannelSchema, row: &[f64], t: usize) -> Result<Self> {
        let get = |name: &str| -> Result<f64> { Ok(row[schema.require(name)?]) };
        let map = get("map")?;
        let sbp = get("sbp")?;
        Ok(Self {
            t,
            map,
            sbp,
            dbp: (3.0 * map - sbp) / 2.0,
            cvp: get("cvp")?,
            hr: get("hr")?,
            tbv: get("tbv")?,
            ar: get("ar")?,
            ap: get("ap")?,
            aq: get("aq")?,
            av: get("av")?,
            pvv: get("pvv")?,
            lvp: get("lvp")?,
            lvq: get("lvq")?,
            lvc: get("lvc")?,
            rvp: get("rvp")?,
            rvq: get("rvq")?,
            rvc: get("rvc")?,
            vt: get("vt")?,
            pth: get("pth")?,
            disease: schema
                .index_of(DISEASE_CHANNEL)
                .map(|i| row[i] > 0.5)
                .unwrap_or(false),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.continuous_values().iter().all(|v| v.is_finite()) && self.dbp.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DiseaseKind {
    None,
    Sepsis,
    BloodLoss,
}

/// A disease event and its multiplier on resistance (sepsis) or volume
/// (blood loss). `multiplier` is 1 when no event occurs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiseaseEvent {
    pub kind: DiseaseKind,
    pub multiplier: f64,
}

impl DiseaseEvent {
    pub const NONE: DiseaseEvent = DiseaseEvent {
        kind: DiseaseKind::None,
        multiplier: 1.0,
    };

    pub fn occurred(&self) -> bool {
        self.kind != DiseaseKind::None
    }
}
