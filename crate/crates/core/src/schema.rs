//! Channel schema shared by datasets, models and simulations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelKind {
    Continuous,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub name: String,
    pub kind: ChannelKind,
    /// Index of the covariate group this channel belongs to. Groups are
    /// simulated in increasing index order within a time step.
    pub group: usize,
}

/// Ordered covariate channels, their kinds and their group partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelSchema {
    pub channels: Vec<ChannelSpec>,
    /// Name of the channel designated as the outcome `Y`.
    pub outcome: String,
}

impl ChannelSchema {
    pub fn new(channels: Vec<ChannelSpec>, outcome: impl Into<String>) -> Result<Self> {
        let schema = Self {
            channels,
            outcome: outcome.into(),
        };
        schema.validate()?;
        Ok(schema)
    }

    /// Convenience constructor: all channels continuous, one group.
    pub fn continuous(names: &[&str], outcome: &str) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| ChannelSpec {
                    name: n.to_string(),
                    kind: ChannelKind::Continuous,
                    group: 0,
                })
                .collect(),
            outcome,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("schema has no channels".into()));
        }
        let mut names = std::collections::HashSet::new();
        for c in &self.channels {
            if !names.insert(c.name.as_str()) {
                return Err(Error::Config(format!("duplicate channel `{}`", c.name)));
            }
        }
        let outcomes = self.channels.iter().filter(|c| c.name == self.outcome).count();
        if outcomes != 1 {
            return Err(Error::Config(format!(
                "outcome `{}` must name exactly one channel",
                self.outcome
            )));
        }
        let p = self.n_groups();
        for j in 0..p {
            if self.group_indices(j).is_empty() {
                return Err(Error::Config(format!(
                    "group indices must be contiguous from 0; group {j} is empty"
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.channels.iter().map(|c| c.group + 1).max().unwrap_or(0)
    }

    /// Channel indices belonging to group `j`, in schema order.
    pub fn group_indices(&self, j: usize) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.group == j)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.channels.iter().position(|c| c.name == name)
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::Config(format!("schema has no channel `{name}`")))
    }

    pub fn continuous_indices(&self) -> Vec<usize> {
        self.indices_of_kind(ChannelKind::Continuous)
    }

    pub fn binary_indices(&self) -> Vec<usize> {
        self.indices_of_kind(ChannelKind::Binary)
    }

    fn indices_of_kind(&self, kind: ChannelKind) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| c.kind == kind)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.channels.iter().map(|c| c.name.clone()).collect()
    }

    /// Returns a copy with a new group assignment, one entry per channel.
    pub fn regrouped(&self, groups: &[usize]) -> Result<Self> {
        if groups.len() != self.channels.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} group labels for {} channels",
                groups.len(),
                self.channels.len()
            )));
        }
        let mut out = self.clone();
        for (c, &g) in out.channels.iter_mut().zip(groups) {
            c.group = g;
        }
        out.validate()?;
        Ok(out)
    }
}

/// One treatment decision: a fluid bolus (mL) or a vasopressor dose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub fluid: f64,
    pub vaso: f64,
}

impl Action {
    pub const NONE: Action = Action {
        fluid: 0.0,
        vaso: 0.0,
    };

    pub fn fluid(dose: f64) -> Self {
        Self {
            fluid: dose,
            vaso: 0.0,
        }
    }

    pub fn vaso(dose: f64) -> Self {
        Self {
            fluid: 0.0,
            vaso: dose,
        }
    }

    pub fn is_treatment(&self) -> bool {
        self.fluid > 0.0 || self.vaso > 0.0
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.fluid, self.vaso]
    }

    pub fn max_abs_diff(&self, other: &Action) -> f64 {
        (self.fluid - other.fluid)
            .abs()
            .max((self.vaso - other.vaso).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(name: &str, kind: ChannelKind, group: usize) -> ChannelSpec {
        ChannelSpec {
            name: name.into(),
            kind,
            group,
        }
    }

    #[test]
    fn groups_must_be_contiguous() {
        let err = ChannelSchema::new(
            vec![
                spec("a", ChannelKind::Binary, 0),
                spec("b", ChannelKind::Continuous, 2),
            ],
            "b",
        );
        assert!(err.is_err());
    }

    #[test]
    fn exactly_one_outcome() {
        assert!(ChannelSchema::continuous(&["a", "b"], "c").is_err());
        assert!(ChannelSchema::continuous(&["a", "a"], "a").is_err());
        let s = ChannelSchema::continuous(&["a", "b"], "b").unwrap();
        assert_eq!(s.n_groups(), 1);
        assert_eq!(s.group_indices(0), vec![0, 1]);
    }

    #[test]
    fn regroup() {
        let s = ChannelSchema::continuous(&["a", "b", "c"], "b").unwrap();
        let r = s.regrouped(&[1, 0, 1]).unwrap();
        assert_eq!(r.group_indices(0), vec![1]);
        assert_eq!(r.group_indices(1), vec![0, 2]);
    }
}
