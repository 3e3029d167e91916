use rayon::prelude::*;

use super::dynamics::{sample_baseline, PatientSim};
use super::policy::SimPolicy;
use super::{LatentInputs, SimConfig, SimState};
use crate::dataset::{Dataset, DatasetHeader, Regime, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{self, derive_seed, Purpose};
use crate::schema::Action;

/// A generated trajectory together with the hidden inputs and full states
/// that produced it. Only `trajectory` is ever persisted.
#[derive(Debug, Clone)]
pub struct SimulatedPatient {
    pub latent: LatentInputs,
    pub states: Vec<SimState>,
    pub trajectory: Trajectory,
}

/// Hidden inputs of the trajectory with the given seed.
pub fn latent_for_seed(config: &SimConfig, seed: u64) -> Result<LatentInputs> {
    sample_baseline(&mut rng::stream(seed, 0, Purpose::Baseline), config)
}

/// Simulates `K + 1` steps. Actions for `t < m` come from `pre`, for
/// `t >= m` from `post`. At each step the covariates are produced first and
/// the action is then chosen from them.
pub fn simulate_trajectory(
    config: &SimConfig,
    latent: LatentInputs,
    pre: SimPolicy,
    post: SimPolicy,
    k: usize,
    m: usize,
    seed: u64,
) -> Result<SimulatedPatient> {
    if m > k {
        return Err(Error::Config(format!("divergence step m={m} exceeds K={k}")));
    }
    let mut sim = PatientSim::start(config, latent, seed)?;
    let mut states = Vec::with_capacity(k + 1);
    let mut actions = Vec::with_capacity(k + 1);
    for t in 0..=k {
        let policy = if t < m { pre } else { post };
        let action = sim.act(policy);
        states.push(*sim.state());
        actions.push(action);
        if t < k {
            sim.advance(action)?;
        }
    }
    let trajectory = Trajectory {
        id: 0,
        regime: Regime::External,
        seed,
        k,
        m,
        l: states
            .iter()
            .map(|s| s.to_row(config.expose_disease_indicator))
            .collect(),
        a: actions,
    };
    Ok(SimulatedPatient {
        latent,
        states,
        trajectory,
    })
}

fn regime_policies(regime: Regime) -> Result<(SimPolicy, SimPolicy)> {
    match regime {
        Regime::Observational => Ok((SimPolicy::Observational, SimPolicy::Observational)),
        Regime::C1 => Ok((SimPolicy::Observational, SimPolicy::C1)),
        Regime::C2 => Ok((SimPolicy::Observational, SimPolicy::C2)),
        Regime::External => Err(Error::Config(
            "the simulator cannot generate an `external` regime".into(),
        )),
    }
}

/// Seed of trajectory `index` under `master_seed`. Shared by every regime,
/// which couples the cohorts.
pub fn trajectory_seed(master_seed: u64, index: usize) -> u64 {
    derive_seed(master_seed, index as u64, Purpose::Trajectory)
}

/// Generates `config.n` trajectories. Output order is trajectory index order.
pub fn generate_dataset(config: &SimConfig, regime: Regime) -> Result<Dataset> {
    config.validate()?;
    let (pre, post) = regime_policies(regime)?;
    let trajectories = (0..config.n)
        .into_par_iter()
        .map(|i| {
            let seed = trajectory_seed(config.master_seed, i);
            let latent = latent_for_seed(config, seed)?;
            let mut p = simulate_trajectory(config, latent, pre, post, config.k, config.m, seed)?;
            p.trajectory.id = i as u64;
            p.trajectory.regime = regime;
            Ok(p.trajectory)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        DatasetHeader {
            schema: config.schema(),
            regime,
            k: config.k,
            m: config.m,
            master_seed: config.master_seed,
            sim_config: Some(config.clone()),
        },
        trajectories,
    )
}

/// Draws from the true data-generating process given a patient's hidden
/// inputs and observed state at step `m`, following `policy` from `m` on.
///
/// Returns `draws` matrices of shape `[K - m + 1][channels]` (row 0 is the
/// observed row at `m`) and the matching actions. Disease and process noise
/// come from per-draw seeds; deterministic policies keep the patient seed so
/// their tie-breaking coin matches the ground truth.
pub fn oracle_draws(
    config: &SimConfig,
    trajectory: &Trajectory,
    m: usize,
    policy: SimPolicy,
    draws: usize,
) -> Result<Vec<(Vec<Vec<f64>>, Vec<Action>)>> {
    let latent = latent_for_seed(config, trajectory.seed)?;
    let schema = config.schema();
    let start = SimState::from_row(&schema, &trajectory.l[m], m)?;
    (0..draws)
        .map(|d| {
            let noise_seed = derive_seed(trajectory.seed, d as u64, Purpose::OracleDraw);
            let policy_seed = match policy {
                SimPolicy::Observational => noise_seed,
                _ => trajectory.seed,
            };
            let mut sim = PatientSim::resume(config, latent, start, noise_seed, policy_seed);
            let mut rows = Vec::with_capacity(trajectory.k - m + 1);
            let mut actions = Vec::with_capacity(trajectory.k - m + 1);
            for t in m..=trajectory.k {
                let action = sim.act(policy);
                rows.push(if t == m {
                    trajectory.l[m].clone()
                } else {
                    sim.state().to_row(config.expose_disease_indicator)
                });
                actions.push(action);
                if t < trajectory.k {
                    sim.advance(action)?;
                }
            }
            Ok((rows, actions))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, k: usize, m: usize) -> SimConfig {
        SimConfig {
            n,
            k,
            m,
            ..SimConfig::default()
        }
    }

    #[test]
    fn zero_horizon() {
        let config = small(1, 0, 0);
        let latent = latent_for_seed(&config, 5).unwrap();
        let p = simulate_trajectory(&config, latent, SimPolicy::Observational, SimPolicy::C1, 0, 0, 5)
            .unwrap();
        assert_eq!(p.trajectory.l.len(), 1);
        assert_eq!(p.trajectory.a.len(), 1);
    }

    #[test]
    fn divergence_after_horizon_rejected() {
        let config = small(1, 4, 2);
        let latent = latent_for_seed(&config, 5).unwrap();
        assert!(simulate_trajectory(&config, latent, SimPolicy::C2, SimPolicy::C2, 4, 5, 5).is_err());
    }

    #[test]
    fn coupled_regimes_agree_before_divergence() {
        let config = small(30, 20, 10);
        let o = generate_dataset(&config, Regime::Observational).unwrap();
        let c2 = generate_dataset(&config, Regime::C2).unwrap();
        for (a, b) in o.trajectories.iter().zip(&c2.trajectories) {
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.l[..=10], b.l[..=10]);
            assert_eq!(a.a[..10], b.a[..10]);
            assert!(b.a[10..].iter().all(|x| *x == Action::NONE));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let config = small(12, 8, 4);
        let a = crate::io::dataset_to_bytes(&generate_dataset(&config, Regime::C1).unwrap()).unwrap();
        let b = crate::io::dataset_to_bytes(&generate_dataset(&config, Regime::C1).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn latent_inputs_not_serialized() {
        let config = small(3, 4, 2);
        let ds = generate_dataset(&config, Regime::Observational).unwrap();
        let text = String::from_utf8(crate::io::dataset_to_bytes(&ds).unwrap()).unwrap();
        for line in text.lines().skip(1) {
            for hidden in ["nominal_heart_rate", "total_zero_pressure", "compliance"] {
                assert!(!line.contains(hidden));
            }
        }
        for name in ds.schema().names() {
            assert!(super::super::CHANNELS.contains(&name.as_str()) || name == "disease");
        }
    }

    #[test]
    fn oracle_first_row_is_observed() {
        let config = small(2, 10, 4);
        let ds = generate_dataset(&config, Regime::C2).unwrap();
        let draws = oracle_draws(&config, &ds.trajectories[0], 4, SimPolicy::C2, 3).unwrap();
        assert_eq!(draws.len(), 3);
        for (rows, actions) in &draws {
            assert_eq!(rows.len(), 7);
            assert_eq!(rows[0], ds.trajectories[0].l[4]);
            assert!(actions.iter().all(|a| *a == Action::NONE));
        }
        assert_ne!(draws[0].0[3], draws[1].0[3]);
    }

    #[test]
    fn c1_bolus_raises_map_and_cvp() {
        let config = small(300, 12, 6);
        let o = generate_dataset(&config, Regime::Observational).unwrap();
        let c1 = generate_dataset(&config, Regime::C1).unwrap();
        let (map, cvp) = (0, 2);
        let mut checked = 0;
        for (x, y) in o.trajectories.iter().zip(&c1.trajectories) {
            let bolus = y.a[6].fluid > 0.0 && x.a[6] == Action::NONE;
            if bolus {
                checked += 1;
                assert!(y.l[7][map] > x.l[7][map]);
                assert!(y.l[7][cvp] > x.l[7][cvp]);
            }
        }
        assert!(checked > 0);
    }
}
