use rand::Rng;

use super::layers::Mat;

/// One Bernoulli keep/drop mask per dropout site. A simulation draw holds a
/// single `MaskSet` for all of its time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    pub keep: f64,
    pub sites: Vec<Vec<bool>>,
}

impl MaskSet {
    pub fn ones(sizes: &[usize]) -> Self {
        Self {
            keep: 1.0,
            sites: sizes.iter().map(|&n| vec![true; n]).collect(),
        }
    }

    pub fn sample(sizes: &[usize], rate: f64, rng: &mut impl Rng) -> Self {
        let keep = 1.0 - rate;
        Self {
            keep,
            sites: sizes
                .iter()
                .map(|&n| (0..n).map(|_| rate == 0.0 || rng.random::<f64>() < keep).collect())
                .collect(),
        }
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.sites.iter().map(Vec::len).collect()
    }

    pub fn kept_fraction(&self) -> f64 {
        let total: usize = self.sites.iter().map(Vec::len).sum();
        let kept: usize = self
            .sites
            .iter()
            .map(|s| s.iter().filter(|&&k| k).count())
            .sum();
        kept as f64 / total.max(1) as f64
    }
}

/// Stacks site `site` of each row's mask into a `[rows, width]` matrix of
/// inverted-dropout multipliers (`0` or `1 / keep`).
pub(crate) fn stack_site(masks: &[MaskSet], site: usize) -> Mat {
    let width = masks[0].sites[site].len();
    Mat::from_shape_fn((masks.len(), width), |(r, c)| {
        if masks[r].sites[site][c] {
            1.0 / masks[r].keep
        } else {
            0.0
        }
    })
}
