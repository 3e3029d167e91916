//! Self-describing JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{Params, Tensor};
use super::norm::Normalizer;
use super::residuals::ResidualBank;
use super::{GNet, GNetConfig};
use crate::error::{Error, Result};
use crate::schema::ChannelSchema;

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "cfsim-gnet";

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    schema: ChannelSchema,
    config: GNetConfig,
    normalizer: Normalizer,
    tensors: Vec<Tensor>,
    #[serde(default)]
    residuals: Option<ResidualBank>,
}

pub fn checkpoint_to_bytes(model: &GNet, bank: Option<&ResidualBank>) -> Result<Vec<u8>> {
    let file = CheckpointFile {
        format: FORMAT.into(),
        version: CHECKPOINT_VERSION,
        schema: model.schema.clone(),
        config: model.config.clone(),
        normalizer: model.norm.clone(),
        tensors: model.params.tensors.clone(),
        residuals: bank.cloned(),
    };
    let mut bytes = serde_json::to_vec(&file)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(GNet, Option<ResidualBank>)> {
    let value: serde_json::Value = serde_json::from_slice(bytes)?;
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(Error::Config("not a model checkpoint".into()));
    }
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0);
    if found != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::Version {
            found: u32::try_from(found).unwrap_or(u32::MAX),
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value)?;
    let mut model = GNet::build(file.config, file.schema)?;
    let expected: Vec<(&str, &[usize])> = model
        .params
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    let found: Vec<(&str, &[usize])> = file
        .tensors
        .iter()
        .map(|t| (t.name.as_str(), t.shape.as_slice()))
        .collect();
    if expected != found {
        return Err(Error::StateCorruption(
            "checkpoint tensors do not match the configured architecture".into(),
        ));
    }
    if file
        .tensors
        .iter()
        .any(|t| t.data.len() != t.shape.iter().product::<usize>())
    {
        return Err(Error::StateCorruption("tensor data does not match its shape".into()));
    }
    model.params = Params { tensors: file.tensors };
    if !model.params.is_finite() {
        return Err(Error::StateCorruption("checkpoint holds non-finite parameters".into()));
    }
    model.set_normalizer(file.normalizer)?;
    if let Some(bank) = &file.residuals {
        bank.validate(&model.schema)?;
    }
    Ok((model, file.residuals))
}

pub fn save_checkpoint(model: &GNet, bank: Option<&ResidualBank>, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_bytes(path.as_ref(), &checkpoint_to_bytes(model, bank)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GNet, Option<ResidualBank>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
