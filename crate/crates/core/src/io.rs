//! Dataset files and small JSON helpers.
//!
//! A dataset file is newline-delimited JSON. Line 1 is a header carrying the
//! format version, the channel schema and the generating configuration; every
//! following line is one trajectory:
//!
//! ```text
//! {"format":"cfsim-dataset","version":1,"schema":{..},"regime":"c1","K":64,"m":34,...}
//! {"id":0,"regime":"c1","seed":..,"K":64,"m":34,"L":{"map":[..],..},"A":{"fluid":[..],"vaso":[..]}}
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetHeader, Regime, Trajectory};
use crate::error::{Error, Result};
use crate::schema::Action;

pub const DATASET_FORMAT: &str = "cfsim-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    version: u32,
    #[serde(flatten)]
    header: DatasetHeader,
}

#[derive(Serialize, Deserialize)]
struct ActionColumns {
    fluid: Vec<f64>,
    vaso: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryLine {
    id: u64,
    regime: Regime,
    seed: u64,
    #[serde(rename = "K")]
    k: usize,
    m: usize,
    #[serde(rename = "L")]
    l: IndexMap<String, Vec<f64>>,
    #[serde(rename = "A")]
    a: ActionColumns,
}

/// Serializes a dataset to NDJSON bytes.
pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let header = HeaderLine {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        header: ds.header.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    let names = ds.schema().names();
    for tr in &ds.trajectories {
        let mut l = IndexMap::with_capacity(names.len());
        for (c, name) in names.iter().enumerate() {
            l.insert(name.clone(), tr.channel(c).collect::<Vec<_>>());
        }
        let line = TrajectoryLine {
            id: tr.id,
            regime: tr.regime,
            seed: tr.seed,
            k: tr.k,
            m: tr.m,
            l,
            a: ActionColumns {
                fluid: tr.a.iter().map(|a| a.fluid).collect(),
                vaso: tr.a.iter().map(|a| a.vaso).collect(),
            },
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    Ok(out)
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = dataset_to_bytes(ds)?;
    write_bytes(path, &bytes)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = BufReader::new(file);
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing header line".into())),
    };
    let raw: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| parse_err(1, e.to_string()))?;
    if raw.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(parse_err(1, "not a cfsim dataset header".into()));
    }
    let version = raw
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| parse_err(1, "header has no version".into()))? as u32;
    if version != DATASET_VERSION {
        return Err(Error::Version {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let header: HeaderLine =
        serde_json::from_value(raw).map_err(|e| parse_err(1, e.to_string()))?;
    let header = header.header;
    header
        .schema
        .validate()
        .map_err(|e| parse_err(1, e.to_string()))?;
    let names = header.schema.names();

    let mut trajectories = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let tl: TrajectoryLine =
            serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        let rows = tl.k + 1;
        if tl.l.len() != names.len() {
            return Err(parse_err(
                lineno,
                format!("{} channels, schema has {}", tl.l.len(), names.len()),
            ));
        }
        let mut cols = Vec::with_capacity(names.len());
        for name in &names {
            let col = tl
                .l
                .get(name)
                .ok_or_else(|| parse_err(lineno, format!("missing channel `{name}`")))?;
            if col.len() != rows {
                return Err(parse_err(
                    lineno,
                    format!("channel `{name}` has {} values, expected {rows}", col.len()),
                ));
            }
            cols.push(col);
        }
        if tl.a.fluid.len() != rows || tl.a.vaso.len() != rows {
            return Err(parse_err(lineno, format!("action columns must have {rows} values")));
        }
        let l = (0..rows)
            .map(|t| cols.iter().map(|col| col[t]).collect())
            .collect();
        let a = tl
            .a
            .fluid
            .iter()
            .zip(&tl.a.vaso)
            .map(|(&fluid, &vaso)| Action { fluid, vaso })
            .collect();
        trajectories.push(Trajectory {
            id: tl.id,
            regime: tl.regime,
            seed: tl.seed,
            k: tl.k,
            m: tl.m,
            l,
            a,
        });
    }
    Dataset::new(header, trajectories).map_err(|e| parse_err(0, e.to_string()))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_bytes(path.as_ref(), &bytes)
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{ChannelKind, ChannelSchema, ChannelSpec};

    fn toy(n: usize, k: usize) -> Dataset {
        let schema = ChannelSchema::new(
            vec![
                ChannelSpec {
                    name: "flag".into(),
                    kind: ChannelKind::Binary,
                    group: 0,
                },
                ChannelSpec {
                    name: "x".into(),
                    kind: ChannelKind::Continuous,
                    group: 1,
                },
            ],
            "x",
        )
        .unwrap();
        let trajectories = (0..n)
            .map(|i| Trajectory {
                id: i as u64,
                regime: Regime::External,
                seed: 1000 + i as u64,
                k,
                m: k / 2,
                l: (0..=k)
                    .map(|t| vec![(t % 2) as f64, 0.1 * (i * t) as f64 - 1.0 / 3.0])
                    .collect(),
                a: (0..=k).map(|t| Action::fluid(t as f64 * 1.5)).collect(),
            })
            .collect();
        Dataset::new(
            DatasetHeader {
                schema,
                regime: Regime::External,
                k,
                m: k / 2,
                master_seed: 9,
                sim_config: None,
            },
            trajectories,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_100() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let ds = toy(100, 6);
        write_dataset(&ds, &path).unwrap();
        assert_eq!(read_dataset(&path).unwrap(), ds);
    }

    #[test]
    fn truncated_line_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let bytes = dataset_to_bytes(&toy(3, 4)).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 20]).unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn newer_version_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let text = String::from_utf8(dataset_to_bytes(&toy(2, 3)).unwrap()).unwrap();
        let text = text.replacen("\"version\":1", "\"version\":2", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            read_dataset(&path),
            Err(Error::Version { found: 2, expected: 1 })
        ));
    }

    #[test]
    fn missing_channel_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        let text = String::from_utf8(dataset_to_bytes(&toy(2, 3)).unwrap()).unwrap();
        // the header spells the schema as `"name":"flag"`, so only data lines change
        let text = text.replace("\"flag\":[", "\"flog\":[");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Parse { line: 2, .. })));
    }
}
