use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::simulate::SimulatedDraw;
use crate::error::{Error, Result};
use crate::quantile::sorted_quantile;
use crate::schema::Action;

pub const MC_FORMAT: &str = "cfsim-mc";
pub const MC_VERSION: u32 = 1;

/// Monte-Carlo result for one patient. Row `0` of every table is step `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McOutput {
    pub patient_id: u64,
    pub m: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub channels: Vec<String>,
    pub alphas: [f64; 2],
    pub draw_seeds: Vec<u64>,
    pub excluded: usize,
    /// Per `(step, channel)` mean over the kept draws.
    pub mean: Vec<Vec<f64>>,
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
    /// `[draw][step][channel]`, empty unless draws were kept.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sims: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub actions: Vec<Vec<Action>>,
}

fn column_quantiles(draws: &[Vec<Vec<f64>>], steps: usize, channels: usize, alphas: &[f64]) -> Vec<Vec<Vec<f64>>> {
    let mut out = vec![vec![vec![0.0; channels]; steps]; alphas.len()];
    let mut col = Vec::with_capacity(draws.len());
    for t in 0..steps {
        for c in 0..channels {
            col.clear();
            col.extend(draws.iter().map(|d| d[t][c]));
            col.sort_by(f64::total_cmp);
            for (q, &a) in alphas.iter().enumerate() {
                out[q][t][c] = sorted_quantile(&col, a);
            }
        }
    }
    out
}

impl McOutput {
    #[allow(clippy::too_many_arguments)]
    pub fn from_draws(
        patient_id: u64,
        m: usize,
        channels: Vec<String>,
        alphas: [f64; 2],
        draw_seeds: Vec<u64>,
        excluded: usize,
        draws: Vec<SimulatedDraw>,
        keep_draws: bool,
    ) -> Result<Self> {
        if draws.is_empty() {
            return Err(Error::Empty("no draws to summarize".into()));
        }
        if !(0.0..=1.0).contains(&alphas[0]) || !(0.0..=1.0).contains(&alphas[1]) || alphas[0] >= alphas[1] {
            return Err(Error::Config(format!("quantile levels {alphas:?} must satisfy 0 <= low < high <= 1")));
        }
        let steps = draws[0].rows.len();
        let d = channels.len();
        if draws.iter().any(|x| x.rows.len() != steps || x.rows.iter().any(|r| r.len() != d)) {
            return Err(Error::DimensionMismatch("draws have inconsistent shapes".into()));
        }
        let mut mean = vec![vec![0.0; d]; steps];
        for draw in &draws {
            for (acc, row) in mean.iter_mut().zip(&draw.rows) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let n = draws.len() as f64;
        mean.iter_mut().flatten().for_each(|x| *x /= n);
        let (sims, actions): (Vec<_>, Vec<_>) = draws.into_iter().map(|x| (x.rows, x.actions)).unzip();
        let mut q = column_quantiles(&sims, steps, d, &alphas);
        let upper = q.pop().expect("two levels");
        let lower = q.pop().expect("two levels");
        Ok(Self {
            patient_id,
            m,
            k: m + steps - 1,
            channels,
            alphas,
            draw_seeds,
            excluded,
            mean,
            lower,
            upper,
            sims: if keep_draws { sims } else { Vec::new() },
            actions: if keep_draws { actions } else { Vec::new() },
        })
    }

    /// Rows per table: `K - m + 1`.
    pub fn steps(&self) -> usize {
        self.mean.len()
    }

    pub fn n_draws(&self) -> usize {
        self.draw_seeds.len() - self.excluded
    }

    /// `[step][channel]` quantile bands at `(low, high)`. Uses stored draws
    /// when available, otherwise only the stored levels.
    pub fn band(&self, low: f64, high: f64) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        if !self.sims.is_empty() {
            let mut q = column_quantiles(&self.sims, self.steps(), self.channels.len(), &[low, high]);
            let hi = q.pop().expect("two levels");
            return Ok((q.pop().expect("two levels"), hi));
        }
        if [low, high] == self.alphas {
            return Ok((self.lower.clone(), self.upper.clone()));
        }
        Err(Error::Config(format!(
            "quantiles ({low}, {high}) need stored draws; output only has {:?}",
            self.alphas
        )))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    patients: usize,
}

/// NDJSON: a header line then one patient per line.
pub fn write_mc_outputs(outputs: &[McOutput], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        format: MC_FORMAT.into(),
        version: MC_VERSION,
        patients: outputs.len(),
    };
    let write = |w: &mut BufWriter<File>, bytes: Vec<u8>| -> Result<()> {
        w.write_all(&bytes).and_then(|_| w.write_all(b"\n")).map_err(|e| Error::io(path, e))
    };
    write(&mut w, serde_json::to_vec(&header)?)?;
    for o in outputs {
        write(&mut w, serde_json::to_vec(o)?)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mc_outputs(path: impl AsRef<Path>) -> Result<Vec<McOutput>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if header.format != MC_FORMAT {
        return Err(parse_err(1, format!("unexpected format `{}`", header.format)));
    }
    if header.version != MC_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: MC_VERSION,
        });
    }
    let mut out = Vec::with_capacity(header.patients);
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 2, e.to_string()))?);
    }
    if out.len() != header.patients {
        return Err(parse_err(
            out.len() + 1,
            format!("expected {} patients, found {}", header.patients, out.len()),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn draw(vals: &[f64]) -> SimulatedDraw {
        SimulatedDraw {
            rows: vals.iter().map(|&v| vec![v, -v]).collect(),
            actions: vec![Action::NONE; vals.len()],
        }
    }

    fn sample() -> McOutput {
        McOutput::from_draws(
            4,
            2,
            vec!["a".into(), "b".into()],
            [0.25, 0.75],
            vec![1, 2, 3],
            0,
            vec![draw(&[1.0, 2.0]), draw(&[1.0, 4.0]), draw(&[1.0, 9.0])],
            true,
        )
        .unwrap()
    }

    #[test]
    fn summaries() {
        let o = sample();
        assert_eq!(o.k, 3);
        assert_eq!(o.mean[1], vec![5.0, -5.0]);
        assert_eq!(o.lower[1][0], 3.0);
        assert_eq!(o.upper[1][0], 6.5);
        assert_eq!(o.band(0.0, 1.0).unwrap().1[1][0], 9.0);
    }

    #[test]
    fn file_round_trip_and_version_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mc.ndjson");
        let mut slim = sample();
        slim.sims.clear();
        slim.actions.clear();
        write_mc_outputs(&[sample(), slim.clone()], &path).unwrap();
        let back = read_mc_outputs(&path).unwrap();
        assert_eq!(back, vec![sample(), slim.clone()]);
        assert!(back[1].band(0.1, 0.9).is_err());
        let text = std::fs::read_to_string(&path).unwrap().replace("\"version\":1", "\"version\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_mc_outputs(&path), Err(Error::Version { found: 9, .. })));
    }

    #[test]
    fn invalid_levels_rejected() {
        let r = McOutput::from_draws(0, 0, vec!["a".into(), "b".into()], [0.8, 0.2], vec![1], 0, vec![draw(&[1.0])], false);
        assert!(r.unwrap_err().is_config());
    }
}
