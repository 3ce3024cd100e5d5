use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, ConvNet, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::rng::tag;
use crate::synthdata::{read_json, write_json};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub architecture: Architecture,
    pub architecture_hash: String,
    pub seed: u64,
    pub epoch: usize,
    pub params: Vec<String>,
}

/// Writes one GRTN file per parameter plus `manifest.json`.
pub fn save_checkpoint(dir: &Path, net: &ConvNet<f32>, seed: u64, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let arch = *net.arch();
    for ((name, values), shape) in PARAM_NAMES.iter().zip(net.params()).zip(arch.param_shapes()) {
        Tensor::new(shape, values.clone())?.save(dir.join(format!("{name}.grtn")))?;
    }
    let manifest = CheckpointManifest {
        schema_version: crate::SCHEMA_VERSION,
        architecture: arch,
        architecture_hash: format!("{:016x}", tag(&arch.describe())),
        seed,
        epoch,
        params: PARAM_NAMES.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<(ConvNet<f32>, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let expected_hash = format!("{:016x}", tag(&manifest.architecture.describe()));
    if manifest.architecture_hash != expected_hash {
        return Err(Error::invalid(format!(
            "checkpoint {} has architecture hash {} but this build expects {}",
            dir.display(),
            manifest.architecture_hash,
            expected_hash
        )));
    }
    let params = PARAM_NAMES
        .iter()
        .map(|name| Tensor::load(dir.join(format!("{name}.grtn"))).map(Tensor::into_data))
        .collect::<Result<Vec<_>>>()?;
    Ok((ConvNet::from_params(manifest.architecture, params)?, manifest))
}
