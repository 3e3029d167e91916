//! In-memory cohort representation.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};
use crate::schema::{Action, ChannelSchema};
use crate::sim::SimConfig;

/// Which treatment-assignment rule generated a cohort.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    /// `g_o` for every step.
    Observational,
    /// `g_o` before the divergence step, `g_c1` afterwards.
    C1,
    /// `g_o` before the divergence step, treatment withheld afterwards.
    C2,
    /// Data that did not come from the built-in simulator.
    External,
}

impl Regime {
    pub fn as_str(&self) -> &'static str {
        match self {
            Regime::Observational => "observational",
            Regime::C1 => "c1",
            Regime::C2 => "c2",
            Regime::External => "external",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "o" | "obs" | "observational" => Ok(Regime::Observational),
            "c1" => Ok(Regime::C1),
            "c2" => Ok(Regime::C2),
            "external" => Ok(Regime::External),
            other => Err(Error::Config(format!("unknown regime `{other}`"))),
        }
    }
}

/// One patient: covariate rows `L[0..=K]` and action rows `A[0..=K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: u64,
    pub regime: Regime,
    pub seed: u64,
    pub k: usize,
    pub m: usize,
    /// `l[t][channel]`, schema channel order.
    pub l: Vec<Vec<f64>>,
    pub a: Vec<Action>,
}

impl Trajectory {
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        self.l.iter().map(move |row| row[c])
    }

    pub fn check_shape(&self, n_channels: usize) -> Result<()> {
        if self.l.len() != self.k + 1 || self.a.len() != self.k + 1 {
            return Err(Error::DimensionMismatch(format!(
                "trajectory {}: K={} but {} L rows and {} A rows",
                self.id,
                self.k,
                self.l.len(),
                self.a.len()
            )));
        }
        if let Some(row) = self.l.iter().find(|r| r.len() != n_channels) {
            return Err(Error::DimensionMismatch(format!(
                "trajectory {}: row with {} channels, schema has {}",
                self.id,
                row.len(),
                n_channels
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema: ChannelSchema,
    pub regime: Regime,
    #[serde(rename = "K")]
    pub k: usize,
    pub m: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim_config: Option<SimConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(header: DatasetHeader, trajectories: Vec<Trajectory>) -> Result<Self> {
        let n = header.schema.len();
        for tr in &trajectories {
            tr.check_shape(n)?;
            if tr.k != header.k {
                return Err(Error::DimensionMismatch(format!(
                    "trajectory {} has K={}, header says {}",
                    tr.id, tr.k, header.k
                )));
            }
        }
        Ok(Self {
            header,
            trajectories,
        })
    }

    pub fn schema(&self) -> &ChannelSchema {
        &self.header.schema
    }

    pub fn k(&self) -> usize {
        self.header.k
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            header: self.header.clone(),
            trajectories: indices.iter().map(|&i| self.trajectories[i].clone()).collect(),
        }
    }

    /// Seeded shuffle-and-cut into (fit, holdout) index sets.
    pub fn split_indices(&self, train_frac: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
        if !(train_frac > 0.0 && train_frac < 1.0) {
            return Err(Error::Config(format!(
                "train fraction must lie in (0, 1), got {train_frac}"
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::stream(seed, 0, Purpose::Split));
        let n_train = ((self.len() as f64) * train_frac).round() as usize;
        let n_train = n_train.clamp(1.min(self.len()), self.len().saturating_sub(1));
        let holdout = idx.split_off(n_train);
        Ok((idx, holdout))
    }
}
