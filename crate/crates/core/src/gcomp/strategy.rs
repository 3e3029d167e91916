use ndarray::ArrayView1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnet::ResidualBank;
use crate::rng::{self, Purpose, StreamRng};
use crate::schema::{Action, ChannelSchema};
use crate::sim::{
    policy_counterfactual_c1, policy_observational, PolicyCoefficients, PolicyNoise, SimPolicy, SimState,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    Fluid,
    Vaso,
}

impl Arm {
    pub fn action(self, dose: f64) -> Action {
        match self {
            Arm::Fluid => Action::fluid(dose),
            Arm::Vaso => Action::vaso(dose),
        }
    }
}

/// A rule mapping the (simulated) history to the next action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategySpec {
    /// One of the simulator's own rules, evaluated on the current row.
    Builtin {
        policy: SimPolicy,
        #[serde(default)]
        coefficients: PolicyCoefficients,
    },
    /// `dose` of `arm` whenever `channel` is below `threshold`.
    Threshold {
        channel: String,
        threshold: f64,
        arm: Arm,
        dose: f64,
    },
    /// The same action at every step.
    Static { fluid: f64, vaso: f64 },
    /// Sample from the model's treatment head.
    LearnedTreatmentHead,
}

impl StrategySpec {
    pub fn builtin(policy: SimPolicy) -> Self {
        StrategySpec::Builtin {
            policy,
            coefficients: PolicyCoefficients::default(),
        }
    }

    /// Parses `o`, `c1`, `c2`, `learned`, or a JSON object.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "o" | "g_o" | "observational" => Ok(Self::builtin(SimPolicy::Observational)),
            "c1" | "g_c1" => Ok(Self::builtin(SimPolicy::C1)),
            "c2" | "g_c2" => Ok(Self::builtin(SimPolicy::C2)),
            "learned" => Ok(StrategySpec::LearnedTreatmentHead),
            _ if s.trim_start().starts_with('{') => serde_json::from_str(s)
                .map_err(|e| Error::Config(format!("strategy: {e}"))),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }

    pub fn is_deterministic(&self) -> bool {
        !matches!(
            self,
            StrategySpec::LearnedTreatmentHead
                | StrategySpec::Builtin {
                    policy: SimPolicy::Observational,
                    ..
                }
        )
    }
}

/// A strategy resolved against a schema.
pub(crate) struct Resolved<'a> {
    spec: &'a StrategySpec,
    vitals: Option<[usize; 4]>,
    threshold_channel: Option<usize>,
}

impl<'a> Resolved<'a> {
    pub(crate) fn new(spec: &'a StrategySpec, schema: &ChannelSchema) -> Result<Self> {
        let mut vitals = None;
        let mut threshold_channel = None;
        match spec {
            StrategySpec::Builtin { .. } => {
                let need = |n: &str| {
                    schema
                        .index_of(n)
                        .ok_or_else(|| Error::Config(format!("built-in strategy needs channel `{n}`")))
                };
                vitals = Some([need("map")?, need("cvp")?, need("sbp")?, need("hr")?]);
            }
            StrategySpec::Threshold { channel, .. } => {
                threshold_channel = Some(
                    schema
                        .index_of(channel)
                        .ok_or_else(|| Error::Config(format!("unknown strategy channel `{channel}`")))?,
                );
            }
            _ => {}
        }
        Ok(Self {
            spec,
            vitals,
            threshold_channel,
        })
    }

    pub(crate) fn needs_treatment_head(&self) -> bool {
        matches!(self.spec, StrategySpec::LearnedTreatmentHead)
    }

    fn sim_state(&self, row: &[f64], t: usize) -> SimState {
        let [map, cvp, sbp, hr] = self.vitals.expect("resolved vitals");
        SimState {
            t,
            map: row[map],
            cvp: row[cvp],
            sbp: row[sbp],
            hr: row[hr],
            ..Default::default()
        }
    }

    /// Action at step `t` for a simulated row. `treat` is the treatment head
    /// output predicting this step; `rng` is the draw's stream.
    pub(crate) fn simulate(
        &self,
        row: &[f64],
        t: usize,
        patient_seed: u64,
        treat: Option<ArrayView1<f64>>,
        bank: &ResidualBank,
        rng: &mut StreamRng,
    ) -> Result<Action> {
        match self.spec {
            StrategySpec::Builtin { policy, coefficients } => {
                let state = self.sim_state(row, t);
                Ok(match policy {
                    SimPolicy::Observational => {
                        policy_observational(&PolicyNoise::draw(rng, coefficients), &state, coefficients)
                    }
                    SimPolicy::C1 => {
                        let u = rng::stream(patient_seed, t as u64, Purpose::CounterfactualSelection).random();
                        policy_counterfactual_c1(&state, u, coefficients)
                    }
                    SimPolicy::C2 => Action::NONE,
                })
            }
            StrategySpec::LearnedTreatmentHead => {
                let out = treat.ok_or_else(|| {
                    Error::Config("learned strategy needs a model with a treatment head".into())
                })?;
                let treated = rng.random::<f64>() < out[0];
                let fluid = rng.random::<f64>() < out[1];
                if !treated {
                    return Ok(Action::NONE);
                }
                let arm = usize::from(!fluid);
                let dose = (out[2 + arm] + bank.draw_dose(arm, rng)).max(0.0);
                Ok(if fluid { Action::fluid(dose) } else { Action::vaso(dose) })
            }
            _ => Ok(self.deterministic(row)),
        }
    }

    /// Action of a rule that needs no randomness.
    fn deterministic(&self, row: &[f64]) -> Action {
        match self.spec {
            StrategySpec::Threshold {
                threshold, arm, dose, ..
            } => {
                let c = self.threshold_channel.expect("resolved channel");
                if row[c] < *threshold {
                    arm.action(*dose)
                } else {
                    Action::NONE
                }
            }
            StrategySpec::Static { fluid, vaso } => Action {
                fluid: *fluid,
                vaso: *vaso,
            },
            _ => unreachable!("randomized strategies handled by the caller"),
        }
    }

    /// Action the strategy would take on an observed row, replaying the
    /// simulator's own random streams for `g_o`.
    pub(crate) fn replay(&self, row: &[f64], t: usize, patient_seed: u64) -> Result<Action> {
        match self.spec {
            StrategySpec::Builtin { policy, coefficients } => {
                let state = self.sim_state(row, t);
                Ok(match policy {
                    SimPolicy::Observational => {
                        let noise = PolicyNoise::draw(
                            &mut rng::stream(patient_seed, t as u64, Purpose::Policy),
                            coefficients,
                        );
                        policy_observational(&noise, &state, coefficients)
                    }
                    SimPolicy::C1 => {
                        let u = rng::stream(patient_seed, t as u64, Purpose::CounterfactualSelection).random();
                        policy_counterfactual_c1(&state, u, coefficients)
                    }
                    SimPolicy::C2 => Action::NONE,
                })
            }
            StrategySpec::LearnedTreatmentHead => Err(Error::Config(
                "a learned strategy cannot be replayed without a model".into(),
            )),
            _ => Ok(self.deterministic(row)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_names_and_json() {
        assert_eq!(StrategySpec::parse("c2").unwrap(), StrategySpec::builtin(SimPolicy::C2));
        let t = StrategySpec::parse(r#"{"kind":"threshold","channel":"map","threshold":65,"arm":"fluid","dose":500}"#)
            .unwrap();
        assert!(matches!(t, StrategySpec::Threshold { dose, .. } if dose == 500.0));
        assert!(StrategySpec::parse("c3").unwrap_err().is_config());
        assert!(StrategySpec::parse(r#"{"kind":"oracle"}"#).unwrap_err().is_config());
    }

    #[test]
    fn builtin_needs_vitals() {
        let schema = ChannelSchema::continuous(&["x"], "x").unwrap();
        assert!(Resolved::new(&StrategySpec::builtin(SimPolicy::C1), &schema).is_err());
    }

    #[test]
    fn threshold_rule() {
        let schema = ChannelSchema::continuous(&["map", "cvp"], "map").unwrap();
        let spec = StrategySpec::Threshold {
            channel: "map".into(),
            threshold: 65.0,
            arm: Arm::Fluid,
            dose: 500.0,
        };
        let r = Resolved::new(&spec, &schema).unwrap();
        assert_eq!(r.replay(&[60.0, 5.0], 0, 0).unwrap(), Action::fluid(500.0));
        assert_eq!(r.replay(&[65.0, 5.0], 0, 0).unwrap(), Action::NONE);
    }
}
