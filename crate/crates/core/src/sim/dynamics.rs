use rand::Rng;
use rand_distr::StandardNormal;

use super::policy::{policy_counterfactual_c1, policy_observational, PolicyNoise, SimPolicy};
use super::{DiseaseEvent, DiseaseKind, LatentInputs, Range, SimConfig, SimState};
use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::schema::Action;

fn uniform(rng: &mut impl Rng, r: Range) -> f64 {
    if r.hi == r.lo {
        r.lo
    } else {
        r.lo + (r.hi - r.lo) * rng.random::<f64>()
    }
}

/// Draws hidden inputs independently and uniformly from their ranges.
pub fn sample_baseline(rng: &mut impl Rng, config: &SimConfig) -> Result<LatentInputs> {
    config.validate()?;
    let r = &config.ranges;
    Ok(LatentInputs {
        total_blood_volume: uniform(rng, r.total_blood_volume),
        nominal_heart_rate: uniform(rng, r.nominal_heart_rate),
        total_peripheral_resistance: uniform(rng, r.total_peripheral_resistance),
        arterial_compliance: uniform(rng, r.arterial_compliance),
        pulmonary_arterial_compliance: uniform(rng, r.pulmonary_arterial_compliance),
        total_zero_pressure_filling_volume: uniform(rng, r.total_zero_pressure_filling_volume),
        pulmonary_venous_compliance: uniform(rng, r.pulmonary_venous_compliance),
        pulmonary_microcirculation_resistance: uniform(
            rng,
            r.pulmonary_microcirculation_resistance,
        ),
    })
}

/// Returns `(sbp, dbp, map)` with `map = (2 dbp + sbp) / 3`.
pub fn derive_pressures(state: &SimState) -> Result<(f64, f64, f64)> {
    let (sbp, dbp) = (state.sbp, state.dbp);
    if !(sbp >= dbp && dbp >= 0.0) {
        return Err(Error::StateCorruption(format!(
            "pressures out of order at t={}: sbp={sbp}, dbp={dbp}",
            state.t
        )));
    }
    Ok((sbp, dbp, (2.0 * dbp + sbp) / 3.0))
}

/// Draws the disease event for one transition. The returned state has the
/// event's multiplier applied to resistance (sepsis) or blood volume (blood
/// loss); everything else is untouched.
pub fn disease_step(
    rng: &mut impl Rng,
    state: &SimState,
    config: &SimConfig,
) -> (SimState, DiseaseEvent) {
    // Three uniforms are always consumed so the stream layout never depends
    // on the outcome.
    let u_event: f64 = rng.random();
    let u_kind: f64 = rng.random();
    let u_mult: f64 = rng.random();
    if u_event >= config.disease_prob {
        return (*state, DiseaseEvent::NONE);
    }
    let mut next = *state;
    // 1 - u lies in (0, 1], so multipliers lie in (0, max].
    let event = if u_kind < config.sepsis_share {
        let multiplier = config.sepsis_max_multiplier * (1.0 - u_mult);
        next.ar *= multiplier;
        DiseaseEvent {
            kind: DiseaseKind::Sepsis,
            multiplier,
        }
    } else {
        let multiplier = config.blood_loss_max_multiplier * (1.0 - u_mult);
        next.tbv *= multiplier;
        DiseaseEvent {
            kind: DiseaseKind::BloodLoss,
            multiplier,
        }
    };
    (next, event)
}

fn softplus_floor(x: f64, softness: f64) -> f64 {
    let z = x / softness;
    if z > 30.0 {
        x
    } else {
        softness * z.exp().ln_1p()
    }
}

/// Maps the dynamic core (blood volume, resistance, heart rate) to every
/// output channel. `noise` supplies one standard-normal draw per noisy
/// quantity, in a fixed order.
fn observe(
    config: &SimConfig,
    v: &LatentInputs,
    t: usize,
    tbv: f64,
    ar: f64,
    hr: f64,
    disease: bool,
    noise: &[f64; 17],
) -> SimState {
    let d = &config.dynamics;
    let jitter = |i: usize| 1.0 + d.process_noise * noise[i];

    let unstressed = d.unstressed_fraction * v.total_zero_pressure_filling_volume;
    let stressed = softplus_floor(tbv - unstressed, d.stressed_softness);
    let cvp = stressed / (v.pulmonary_venous_compliance * d.venous_capacitance_scale);
    let stroke = d.stroke_volume_max * stressed / (stressed + d.stroke_half_volume);
    // mL/s
    let cardiac_output = hr * stroke / 60.0;
    let map_raw = cvp + cardiac_output * ar;
    let pulse = (d.pulse_fraction * stroke / v.arterial_compliance * jitter(0)).min(2.4 * map_raw);
    let sbp = map_raw + 2.0 * pulse / 3.0;
    let dbp = (map_raw - pulse / 3.0).max(0.0);
    let map = (2.0 * dbp + sbp) / 3.0;

    let sympathetic = (hr - v.nominal_heart_rate) / v.nominal_heart_rate;
    let lvc = 2.0 * (1.0 + 0.4 * sympathetic) * jitter(1);
    let pulmonary_venous_pressure =
        5.0 + v.pulmonary_microcirculation_resistance * cardiac_output / 10.0;

    SimState {
        t,
        map,
        sbp,
        dbp,
        cvp,
        hr,
        tbv,
        ar,
        ap: 0.5 * (sbp + dbp) * jitter(2),
        aq: cardiac_output * jitter(3),
        av: (v.arterial_compliance * map + 0.15 * tbv) * jitter(4),
        pvv: (100.0
            + 10.0 * v.pulmonary_venous_compliance * pulmonary_venous_pressure
            + 0.05 * tbv)
            * jitter(5),
        lvp: (1.03 * sbp + 2.0) * jitter(6),
        lvq: cardiac_output * jitter(7),
        lvc,
        rvp: (cvp + 25.0 * stroke / (stroke + 3.0 * v.pulmonary_arterial_compliance)) * jitter(8),
        rvq: 0.99 * cardiac_output * jitter(9),
        rvc: (0.6 * (1.0 + 0.3 * sympathetic) + 0.01 * v.pulmonary_arterial_compliance)
            * jitter(10),
        vt: v.total_zero_pressure_filling_volume
            * (1.0 - 0.1 * ((65.0 - map) / 30.0).tanh())
            * jitter(11),
        pth: -4.0 + 0.05 * (cvp - 10.0) + 0.2 * noise[12],
        disease,
    }
}

fn normals<const N: usize>(rng: &mut impl Rng) -> [f64; N] {
    std::array::from_fn(|_| rng.sample(StandardNormal))
}

/// One patient being simulated forward step by step.
///
/// Stochastic inputs are read from sub-streams keyed by `(seed, t, purpose)`:
/// disease and process noise from `noise_seed`, treatment-rule randomness from
/// `policy_seed`. For ground-truth generation both equal the trajectory seed.
#[derive(Debug, Clone)]
pub struct PatientSim<'a> {
    config: &'a SimConfig,
    latent: LatentInputs,
    noise_seed: u64,
    policy_seed: u64,
    state: SimState,
}

impl<'a> PatientSim<'a> {
    /// State at t = 0: the hidden baseline, observed with noise.
    pub fn start(config: &'a SimConfig, latent: LatentInputs, seed: u64) -> Result<Self> {
        let noise = normals::<17>(&mut rng::stream(seed, 0, Purpose::ProcessNoise));
        let state = observe(
            config,
            &latent,
            0,
            latent.total_blood_volume,
            latent.total_peripheral_resistance,
            latent.nominal_heart_rate,
            false,
            &noise,
        );
        let sim = Self {
            config,
            latent,
            noise_seed: seed,
            policy_seed: seed,
            state,
        };
        sim.check()?;
        Ok(sim)
    }

    /// Resumes from a state reconstructed at step `state.t`, drawing all
    /// future randomness from fresh seeds.
    pub fn resume(
        config: &'a SimConfig,
        latent: LatentInputs,
        state: SimState,
        noise_seed: u64,
        policy_seed: u64,
    ) -> Self {
        Self {
            config,
            latent,
            noise_seed,
            policy_seed,
            state,
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn latent(&self) -> &LatentInputs {
        &self.latent
    }

    pub fn t(&self) -> usize {
        self.state.t
    }

    /// Treatment at the current step under `policy`.
    pub fn act(&self, policy: SimPolicy) -> Action {
        let t = self.state.t as u64;
        let p = &self.config.policy;
        match policy {
            SimPolicy::Observational => {
                let noise = PolicyNoise::draw(
                    &mut rng::stream(self.policy_seed, t, Purpose::Policy),
                    p,
                );
                policy_observational(&noise, &self.state, p)
            }
            SimPolicy::C1 => {
                let u: f64 = rng::stream(self.policy_seed, t, Purpose::CounterfactualSelection)
                    .random();
                policy_counterfactual_c1(&self.state, u, p)
            }
            SimPolicy::C2 => Action::NONE,
        }
    }

    /// Advances one step: disease, covariate update, pressure derivation.
    pub fn advance(&mut self, action: Action) -> Result<()> {
        let d = &self.config.dynamics;
        let v = self.latent;
        let t = self.state.t + 1;
        let (sick, event) = disease_step(
            &mut rng::stream(self.noise_seed, t as u64, Purpose::Disease),
            &self.state,
            self.config,
        );
        let mut noise_rng = rng::stream(self.noise_seed, t as u64, Purpose::ProcessNoise);
        let core = normals::<3>(&mut noise_rng);
        let obs = normals::<17>(&mut noise_rng);

        let tbv = (sick.tbv + action.fluid - d.volume_recovery * (sick.tbv - v.total_blood_volume))
            * (1.0 + d.process_noise * core[0]);
        let ar = (sick.ar + d.vaso_gain * action.vaso
            - d.resistance_recovery * (sick.ar - v.total_peripheral_resistance))
            * (1.0 + d.process_noise * core[1]);
        let target_hr = v.nominal_heart_rate
            * (1.0 + d.baroreflex_gain * (self.config.policy.map_target - self.state.map) / 65.0);
        let hr = ((self.state.hr + d.heart_rate_relaxation * (target_hr - self.state.hr))
            * (1.0 + d.process_noise * core[2]))
            .clamp(d.heart_rate_min, d.heart_rate_max);

        self.state = observe(self.config, &v, t, tbv, ar, hr, event.occurred(), &obs);
        self.check()
    }

    fn check(&self) -> Result<()> {
        if !self.state.is_finite() {
            return Err(Error::SimulationDiverged {
                step: self.state.t,
                detail: "non-finite state".into(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    #[test]
    fn baseline_within_ranges() {
        let config = SimConfig::default();
        let mut rng = from_seed(3);
        for _ in 0..200 {
            let v = sample_baseline(&mut rng, &config).unwrap();
            assert!((1500.0..=6000.0).contains(&v.total_blood_volume));
            assert!((40.0..=160.0).contains(&v.nominal_heart_rate));
            assert!((0.1..=1.4).contains(&v.total_peripheral_resistance));
            assert!((2.0..=3.4).contains(&v.pulmonary_venous_compliance));
        }
    }

    #[test]
    fn degenerate_range_is_exact() {
        let mut config = SimConfig::default();
        config.ranges.total_blood_volume = Range::new(4200.0, 4200.0);
        let v = sample_baseline(&mut from_seed(1), &config).unwrap();
        assert_eq!(v.total_blood_volume, 4200.0);
    }

    #[test]
    fn inverted_range_is_config_error() {
        let mut config = SimConfig::default();
        config.ranges.nominal_heart_rate = Range::new(160.0, 40.0);
        assert!(matches!(
            sample_baseline(&mut from_seed(1), &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn uniform_mean_of_blood_volume() {
        let config = SimConfig::default();
        let mut rng = from_seed(11);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_baseline(&mut rng, &config).unwrap().total_blood_volume)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 3750.0).abs() < 0.02 * 3750.0, "mean {mean}");
    }

    fn pressures(sbp: f64, dbp: f64) -> SimState {
        SimState {
            sbp,
            dbp,
            ..Default::default()
        }
    }

    #[test]
    fn map_from_pressure_pair() {
        let (_, _, map) = derive_pressures(&pressures(120.0, 80.0)).unwrap();
        assert!((map - 280.0 / 3.0).abs() < 1e-12);
        let (_, _, map) = derive_pressures(&pressures(100.0, 55.0)).unwrap();
        assert!((map - 70.0).abs() < 1e-12);
        let (_, _, map) = derive_pressures(&pressures(77.5, 77.5)).unwrap();
        assert_eq!(map, 77.5);
        assert!(matches!(
            derive_pressures(&pressures(60.0, 80.0)),
            Err(Error::StateCorruption(_))
        ));
    }

    /// Replays a fixed uniform sequence through the `Rng` interface.
    struct Scripted(Vec<f64>, usize);

    impl rand::RngCore for Scripted {
        fn next_u32(&mut self) -> u32 {
            (self.next_u64() >> 32) as u32
        }
        fn next_u64(&mut self) -> u64 {
            let u = self.0[self.1 % self.0.len()];
            self.1 += 1;
            // rand maps the top 53 bits to [0, 1)
            ((u * (1u64 << 53) as f64) as u64) << 11
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            rand::rand_core::impls::fill_bytes_via_next(self, dst)
        }
    }

    #[test]
    fn disease_none_leaves_state() {
        let config = SimConfig::default();
        let state = SimState {
            ar: 1.0,
            tbv: 4000.0,
            ..Default::default()
        };
        let (next, event) = disease_step(&mut Scripted(vec![0.9, 0.1, 0.1], 0), &state, &config);
        assert_eq!(event, DiseaseEvent::NONE);
        assert_eq!(next, state);
    }

    #[test]
    fn sepsis_scales_resistance() {
        let config = SimConfig::default();
        let state = SimState {
            ar: 1.0,
            tbv: 4000.0,
            ..Default::default()
        };
        // 0.7 * (1 - u) = 0.5  <=>  u = 2/7
        let (next, event) =
            disease_step(&mut Scripted(vec![0.01, 0.2, 2.0 / 7.0], 0), &state, &config);
        assert_eq!(event.kind, DiseaseKind::Sepsis);
        assert!((event.multiplier - 0.5).abs() < 1e-9);
        assert!((next.ar - 0.5).abs() < 1e-9);
        assert_eq!(next.tbv, 4000.0);
    }

    #[test]
    fn blood_loss_scales_volume() {
        let config = SimConfig::default();
        let state = SimState {
            ar: 1.0,
            tbv: 4000.0,
            ..Default::default()
        };
        let (next, event) = disease_step(&mut Scripted(vec![0.01, 0.7, 0.0], 0), &state, &config);
        assert_eq!(event.kind, DiseaseKind::BloodLoss);
        assert!((event.multiplier - 0.95).abs() < 1e-12);
        assert!((next.tbv - 3800.0).abs() < 1e-9);
        assert_eq!(next.ar, 1.0);
    }

    #[test]
    fn disease_frequencies() {
        let config = SimConfig::default();
        let state = SimState::default();
        let mut rng = from_seed(5);
        let (mut events, mut sepsis) = (0usize, 0usize);
        let n = 100_000;
        for _ in 0..n {
            let (_, e) = disease_step(&mut rng, &state, &config);
            match e.kind {
                DiseaseKind::None => {}
                DiseaseKind::Sepsis => {
                    events += 1;
                    sepsis += 1;
                    assert!(e.multiplier > 0.0 && e.multiplier <= 0.7);
                }
                DiseaseKind::BloodLoss => {
                    events += 1;
                    assert!(e.multiplier > 0.0 && e.multiplier <= 0.95);
                }
            }
        }
        let freq = events as f64 / n as f64;
        let share = sepsis as f64 / events as f64;
        assert!((0.045..=0.055).contains(&freq), "event frequency {freq}");
        assert!((0.47..=0.53).contains(&share), "sepsis share {share}");
    }

    #[test]
    fn map_identity_and_ordering_along_trajectory() {
        let config = SimConfig::default();
        for seed in 0..20u64 {
            let latent = sample_baseline(&mut rng::stream(seed, 0, Purpose::Baseline), &config)
                .unwrap();
            let mut sim = PatientSim::start(&config, latent, seed).unwrap();
            for _ in 0..64 {
                let s = *sim.state();
                assert_eq!(s.map, (2.0 * s.dbp + s.sbp) / 3.0);
                assert!(s.sbp >= s.dbp && s.dbp >= 0.0);
                assert!(s.tbv > 0.0 && s.hr > 0.0 && s.ar > 0.0);
                let a = sim.act(SimPolicy::Observational);
                assert!(a.fluid >= 0.0 && a.vaso >= 0.0 && a.fluid * a.vaso == 0.0);
                sim.advance(a).unwrap();
            }
        }
    }

    fn quiet() -> SimConfig {
        let mut config = SimConfig {
            disease_prob: 0.0,
            ..SimConfig::default()
        };
        config.dynamics.process_noise = 0.0;
        config
    }

    fn patient(config: &SimConfig, seed: u64) -> PatientSim<'_> {
        let latent = sample_baseline(&mut rng::stream(seed, 0, Purpose::Baseline), config).unwrap();
        PatientSim::start(config, latent, seed).unwrap()
    }

    #[test]
    fn untreated_patients_settle() {
        let config = quiet();
        for seed in 0..500u64 {
            let mut sim = patient(&config, seed);
            let mut maps = Vec::new();
            for _ in 0..300 {
                sim.advance(Action::NONE).unwrap();
                maps.push(sim.state().map);
            }
            let tail = &maps[280..];
            let hi = tail.iter().cloned().fold(f64::MIN, f64::max);
            let lo = tail.iter().cloned().fold(f64::MAX, f64::min);
            assert!(hi - lo <= 1e-3 * hi.max(1.0), "seed {seed}: map still moving in [{lo}, {hi}]");
        }
    }

    #[test]
    fn treatments_raise_map_within_three_steps() {
        let config = quiet();
        for seed in 0..200u64 {
            for dose in [Action::fluid(500.0), Action::vaso(1.0)] {
                let mut treated = patient(&config, seed);
                let mut control = treated.clone();
                for _ in 0..10 {
                    treated.advance(Action::NONE).unwrap();
                    control.advance(Action::NONE).unwrap();
                }
                treated.advance(dose).unwrap();
                control.advance(Action::NONE).unwrap();
                let mut raised = treated.state().map > control.state().map;
                for _ in 0..2 {
                    treated.advance(Action::NONE).unwrap();
                    control.advance(Action::NONE).unwrap();
                    raised |= treated.state().map > control.state().map;
                }
                assert!(raised, "seed {seed}: {dose:?} did not raise MAP");
            }
        }
    }
}
