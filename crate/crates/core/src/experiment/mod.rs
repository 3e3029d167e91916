//! End-to-end replication protocol: simulate the cohorts, fit each model on
//! the observational cohort, run g-computation from the divergence step of
//! every counterfactual patient, and score the predictions.
//!
//! Every stage reads only the files it declares and every file written is
//! listed with its SHA-256 in `manifest.json`.

mod manifest;
mod run;

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnet::{GNetConfig, Preset};
use crate::rng::{derive_seed, Purpose};
use crate::schema::ChannelSchema;
use crate::sim::SimConfig;

pub use manifest::{hash_file, verify_manifest, Manifest, StageRecord, Verification, MANIFEST_FILE, MANIFEST_VERSION};
pub use run::{run_experiment, ExperimentOutcome, ModelSummary, StrategySummary};

/// A model to fit: a named preset or a full configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Preset(Preset),
    Custom(GNetConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Simulator settings. `n` is the observational cohort size, `K`, `m`
    /// and `master_seed` apply to the whole experiment.
    #[serde(default)]
    pub sim: SimConfig,
    /// Patients per counterfactual cohort.
    pub n_counterfactual: usize,
    pub models: Vec<ModelSpec>,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Monte-Carlo draws per patient.
    pub draws: usize,
    #[serde(default = "default_alphas")]
    pub alphas: [f64; 2],
    #[serde(default)]
    pub mc_dropout: bool,
    /// Overrides the epoch count of every model.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Channels with population-average and effect curves.
    #[serde(default = "default_curve_channels")]
    pub curve_channels: Vec<String>,
    #[serde(default, skip_serializing)]
    pub output_dir: PathBuf,
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_alphas() -> [f64; 2] {
    [0.25, 0.75]
}

fn default_curve_channels() -> Vec<String> {
    vec!["map".into(), "cvp".into()]
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ExperimentConfig {
    /// Full protocol: 10000 observational patients, 500 per counterfactual
    /// cohort, 64 steps diverging at 34, all four models.
    pub fn full() -> Self {
        Self {
            sim: SimConfig::default(),
            n_counterfactual: 500,
            models: Preset::ALL.iter().map(|&p| ModelSpec::Preset(p)).collect(),
            train_fraction: default_train_fraction(),
            draws: 100,
            alphas: default_alphas(),
            mc_dropout: false,
            epochs: None,
            curve_channels: default_curve_channels(),
            output_dir: PathBuf::new(),
        }
    }

    /// Reduced protocol for a single machine: 2000 observational patients,
    /// 200 per counterfactual cohort, 32 steps diverging at 17, M1 and M3.
    pub fn desk() -> Self {
        Self {
            sim: SimConfig {
                n: 2000,
                k: 32,
                m: 17,
                ..SimConfig::default()
            },
            n_counterfactual: 200,
            models: vec![ModelSpec::Preset(Preset::M1), ModelSpec::Preset(Preset::M3)],
            ..Self::full()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn master_seed(&self) -> u64 {
        self.sim.master_seed
    }

    pub fn schema(&self) -> ChannelSchema {
        self.sim.schema()
    }

    pub fn observational_sim(&self) -> SimConfig {
        self.sim.clone()
    }

    /// Same simulator, fresh patients: the counterfactual cohorts share
    /// this seed with each other but not with the observational cohort.
    pub fn counterfactual_sim(&self) -> SimConfig {
        SimConfig {
            n: self.n_counterfactual,
            master_seed: derive_seed(self.master_seed(), 0, Purpose::Patient),
            ..self.sim.clone()
        }
    }

    pub fn gcomp_seed(&self) -> u64 {
        derive_seed(self.master_seed(), 0, Purpose::Draw)
    }

    /// Model configurations with presets expanded, initialization seeds
    /// derived from the master seed and the epoch override applied.
    pub fn model_configs(&self) -> Vec<GNetConfig> {
        let schema = self.schema();
        self.models
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut cfg = match spec {
                    ModelSpec::Preset(p) => GNetConfig {
                        seed: derive_seed(self.master_seed(), i as u64, Purpose::Init),
                        ..GNetConfig::preset(*p, &schema)
                    },
                    ModelSpec::Custom(c) => c.clone(),
                };
                if let Some(e) = self.epochs {
                    cfg.epochs = e;
                }
                if self.mc_dropout && cfg.dropout == 0.0 {
                    log::warn!("model {}: MC dropout requested but the model has no dropout", cfg.name);
                }
                cfg
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.sim.n < 2 {
            return bad("the observational cohort needs at least two patients".into());
        }
        if self.n_counterfactual == 0 {
            return bad("the counterfactual cohorts need at least one patient".into());
        }
        if self.sim.m >= self.sim.k {
            return bad(format!("m={} must be below K={}", self.sim.m, self.sim.k));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train fraction {} must lie in (0, 1)", self.train_fraction));
        }
        if self.draws < 2 {
            return bad("calibration needs at least two Monte-Carlo draws".into());
        }
        let [lo, hi] = self.alphas;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return bad(format!("quantile levels {:?} must satisfy 0 <= low < high <= 1", self.alphas));
        }
        if self.models.is_empty() {
            return bad("no models configured".into());
        }
        let schema = self.schema();
        let mut names = HashSet::new();
        for cfg in self.model_configs() {
            if cfg.name.is_empty() || cfg.name.contains(['/', '\\']) {
                return bad(format!("model name `{}` is not usable as a file name", cfg.name));
            }
            if !names.insert(cfg.name.clone()) {
                return bad(format!("model name `{}` is used twice", cfg.name));
            }
            cfg.validate(&schema)?;
        }
        for ch in &self.curve_channels {
            schema.require(ch)?;
        }
        if self.output_dir.as_os_str().is_empty() {
            return bad("no output directory set".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let p = ExperimentConfig::full();
        assert_eq!((p.sim.n, p.n_counterfactual, p.sim.k, p.sim.m, p.draws), (10_000, 500, 64, 34, 100));
        assert!(p.model_configs().iter().all(|c| c.batch_size == 64));
        assert_eq!(p.train_fraction, 0.8);
        let d = ExperimentConfig::desk();
        assert_eq!((d.sim.n, d.sim.k, d.sim.m, d.draws), (2000, 32, 17, 100));
        let names: Vec<String> = d.model_configs().into_iter().map(|c| c.name).collect();
        assert_eq!(names, vec!["M1", "M3"]);
    }

    #[test]
    fn json_round_trip_without_output_dir() {
        let mut d = ExperimentConfig::desk();
        d.output_dir = "/tmp/x".into();
        let text = serde_json::to_string(&d).unwrap();
        assert!(!text.contains("/tmp/x"));
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back.output_dir, PathBuf::new());
        assert_eq!(back.models, d.models);
        let short = ExperimentConfig::from_json(r#"{"n_counterfactual": 3, "models": ["M2"], "draws": 5}"#).unwrap();
        assert_eq!(short.sim.k, 64);
        assert!(ExperimentConfig::from_json(r#"{"n_counterfactual": 3, "models": [], "draws": 5, "bogus": 1}"#)
            .unwrap_err()
            .is_config());
    }

    #[test]
    fn validation() {
        let mut c = ExperimentConfig::desk();
        assert!(c.validate().unwrap_err().is_config());
        c.output_dir = "out".into();
        c.validate().unwrap();
        c.models.push(ModelSpec::Preset(Preset::M1));
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig {
            output_dir: "out".into(),
            ..ExperimentConfig::desk()
        };
        c.curve_channels = vec!["nope".into()];
        assert!(c.validate().is_err());
        c.curve_channels.clear();
        c.sim.m = 32;
        assert!(c.validate().is_err());
    }

    #[test]
    fn seeds_are_separated() {
        let c = ExperimentConfig::desk();
        let seeds: Vec<u64> = c.model_configs().iter().map(|m| m.seed).collect();
        assert_ne!(seeds[0], seeds[1]);
        assert_ne!(c.counterfactual_sim().master_seed, c.master_seed());
        assert_eq!(c.counterfactual_sim().n, 200);
    }
}
