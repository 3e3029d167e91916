//! Treatment-assignment rules used to generate ground truth.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{PolicyCoefficients, SimState};
use crate::schema::Action;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimPolicy {
    /// Stochastic logistic rule `g_o`.
    Observational,
    /// Deterministic gated rule `g_c1`.
    C1,
    /// Treatment withheld.
    C2,
}

/// Exogenous randomness consumed by `g_o` at one step. All four values are
/// drawn whether or not treatment happens.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyNoise {
    pub u_treat: f64,
    pub u_fluid: f64,
    /// Draw from N(fluid_noise_mean, fluid_noise_sd).
    pub fluid_noise: f64,
    /// Draw from N(vaso_noise_mean, vaso_noise_sd).
    pub vaso_noise: f64,
}

impl PolicyNoise {
    pub fn draw(rng: &mut impl Rng, p: &PolicyCoefficients) -> Self {
        let u_treat = rng.random();
        let u_fluid = rng.random();
        let fluid_noise = Normal::new(p.fluid_noise_mean, p.fluid_noise_sd)
            .expect("finite fluid noise sd")
            .sample(rng);
        let vaso_noise = Normal::new(p.vaso_noise_mean, p.vaso_noise_sd)
            .expect("finite vaso noise sd")
            .sample(rng);
        Self {
            u_treat,
            u_fluid,
            fluid_noise,
            vaso_noise,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn deltas(state: &SimState, p: &PolicyCoefficients) -> (f64, f64) {
    (p.map_target - state.map, p.cvp_target - state.cvp)
}

/// Probability that `g_o` treats at this state.
pub fn treat_probability(state: &SimState, p: &PolicyCoefficients) -> f64 {
    let (dmap, dcvp) = deltas(state, p);
    sigmoid(p.c1 * dmap + p.c2 * dcvp + p.c0)
}

/// `g_o`: treat with logistic probability in the MAP and CVP gaps; pick
/// fluids or vasopressor by a fair coin; noisy, non-negative dose.
pub fn policy_observational(noise: &PolicyNoise, state: &SimState, p: &PolicyCoefficients) -> Action {
    if noise.u_treat >= treat_probability(state, p) {
        return Action::NONE;
    }
    let (dmap, dcvp) = deltas(state, p);
    if noise.u_fluid < p.fluid_share {
        Action::fluid((p.fluid_map * dmap + p.fluid_cvp * dcvp + noise.fluid_noise).max(0.0))
    } else {
        Action::vaso((p.vaso_map * dmap + p.vaso_cvp * dcvp + noise.vaso_noise).max(0.0))
    }
}

/// `g_c1`: treats iff SBP <= 100 and HR/SBP <= 0.8, with noiseless doses.
/// `u_select` picks fluids (below `fluid_share`) or vasopressor.
///
/// The shock-index gate is applied as written even though clinically a high
/// index signals shock.
pub fn policy_counterfactual_c1(state: &SimState, u_select: f64, p: &PolicyCoefficients) -> Action {
    let gate = state.sbp <= p.c1_sbp_max && state.hr / state.sbp <= p.c1_shock_index_max;
    if !gate {
        return Action::NONE;
    }
    let (dmap, dcvp) = deltas(state, p);
    if u_select < p.fluid_share {
        Action::fluid((p.fluid_map * dmap + p.fluid_cvp * dcvp).max(0.0))
    } else {
        Action::vaso((p.vaso_map * dmap + p.vaso_cvp * dcvp).max(0.0))
    }
}

/// `g_c2`: treatment always withheld.
pub fn policy_counterfactual_c2() -> Action {
    Action::NONE
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn state(map: f64, cvp: f64) -> SimState {
        SimState {
            map,
            cvp,
            ..Default::default()
        }
    }

    #[test]
    fn treat_probability_at_targets() {
        let p = PolicyCoefficients::default();
        let logistic = |x: f64| 0.5 + 0.5 * (x / 2.0).tanh();
        assert!((treat_probability(&state(65.0, 10.0), &p) - 0.504_999_833_3).abs() < 1e-9);
        assert!((treat_probability(&state(45.0, 10.0), &p) - logistic(1.22)).abs() < 1e-12);
        assert!((treat_probability(&state(70.0, 4.0), &p) - logistic(-0.3 + 1.44 + 0.02)).abs() < 1e-12);
    }

    #[test]
    fn fluid_dose_without_noise() {
        let p = PolicyCoefficients::default();
        let noise = PolicyNoise {
            u_treat: 0.0,
            u_fluid: 0.0,
            fluid_noise: 0.0,
            vaso_noise: 0.0,
        };
        let a = policy_observational(&noise, &state(55.0, 8.0), &p);
        assert_eq!(a, Action::fluid(220.0));
    }

    #[test]
    fn doses_never_negative() {
        let p = PolicyCoefficients::default();
        let noise = PolicyNoise {
            u_treat: 0.0,
            u_fluid: 0.9,
            fluid_noise: -5000.0,
            vaso_noise: -10.0,
        };
        assert_eq!(policy_observational(&noise, &state(120.0, 20.0), &p), Action::vaso(0.0));
    }

    #[test]
    fn treat_frequency_at_targets() {
        let p = PolicyCoefficients::default();
        let s = state(65.0, 10.0);
        let mut rng = from_seed(17);
        let n = 100_000;
        let treated = (0..n)
            .filter(|_| {
                let noise = PolicyNoise::draw(&mut rng, &p);
                // a zero dose still counts as a treatment decision
                noise.u_treat < treat_probability(&s, &p)
            })
            .count();
        let freq = treated as f64 / n as f64;
        assert!((0.495..=0.515).contains(&freq), "treat frequency {freq}");
    }

    #[test]
    fn c1_gate_and_doses() {
        let p = PolicyCoefficients::default();
        let high = SimState {
            sbp: 120.0,
            hr: 70.0,
            map: 60.0,
            cvp: 9.0,
            ..Default::default()
        };
        assert_eq!(policy_counterfactual_c1(&high, 0.1, &p), Action::NONE);

        let low = SimState {
            sbp: 95.0,
            hr: 70.0,
            map: 60.0,
            cvp: 9.0,
            ..Default::default()
        };
        assert_eq!(policy_counterfactual_c1(&low, 0.1, &p), Action::fluid(110.0));
        let v = policy_counterfactual_c1(&low, 0.9, &p);
        assert!((v.vaso - 0.65).abs() < 1e-12 && v.fluid == 0.0);

        let hyper = SimState {
            sbp: 95.0,
            hr: 70.0,
            map: 85.0,
            cvp: 15.0,
            ..Default::default()
        };
        assert_eq!(policy_counterfactual_c1(&hyper, 0.1, &p), Action::fluid(0.0));

        let tachy = SimState {
            sbp: 95.0,
            hr: 90.0,
            map: 60.0,
            cvp: 9.0,
            ..Default::default()
        };
        assert_eq!(policy_counterfactual_c1(&tachy, 0.1, &p), Action::NONE);
    }

    #[test]
    fn c2_withholds() {
        assert_eq!(policy_counterfactual_c2(), Action::NONE);
    }
}
