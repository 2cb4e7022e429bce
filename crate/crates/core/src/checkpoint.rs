//! Checkpoint file: a JSON header (config, σ, training metadata, the
//! estimated Lipschitz constant when present) followed by the raw tensor
//! blocks in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::energy::{EnergyModel, EnergyNetConfig};
use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::io::{read_tensor, write_tensor, Dtype};
use crate::rng::Rng;

const MAGIC: &[u8; 8] = b"EPNPCKPT";

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TrainingMeta {
    pub epochs: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub dataset: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct LipschitzMeta {
    pub lipschitz_l: f64,
    pub method: String,
    pub num_probes: usize,
    pub safety_factor: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: EnergyNetConfig,
    pub sigma: f64,
    #[serde(default)]
    pub training: Option<TrainingMeta>,
    #[serde(default)]
    pub lipschitz: Option<LipschitzMeta>,
    pub num_blocks: usize,
}

/// Trained parameters plus architecture metadata.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: EnergyModel,
}

pub fn save_model(
    path: &Path,
    model: &EnergyModel,
    training: Option<TrainingMeta>,
    lipschitz: Option<LipschitzMeta>,
    dtype: Dtype,
) -> Result<()> {
    let ordered = model.blocks().ordered();
    let header = CheckpointHeader {
        config: model.config.clone(),
        sigma: model.sigma,
        training,
        lipschitz,
        num_blocks: ordered.len(),
    };
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    let json = serde_json::to_vec(&header)?;
    f.write_all(&(json.len() as u32).to_le_bytes())?;
    f.write_all(&json)?;
    for id in ordered {
        write_tensor(&mut f, model.params().value(id), dtype)?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let mut len = [0u8; 4];
    f.read_exact(&mut len)?;
    let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
    f.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    header.config.validate()?;

    // fresh model gives us the block layout; then overwrite values
    let mut rng = Rng::from_seed(0);
    let mut model = EnergyModel::new(header.config.clone(), header.sigma, &mut rng)?;
    let ordered = model.blocks().ordered();
    if ordered.len() != header.num_blocks {
        return Err(Error::Checkpoint(format!(
            "block count mismatch: header {} vs layout {}",
            header.num_blocks,
            ordered.len()
        )));
    }
    for id in ordered {
        let t = read_tensor(&mut f)?;
        if t.shape() != model.params().value(id).shape() {
            return Err(Error::Checkpoint(format!(
                "block shape mismatch: file {:?} vs layout {:?}",
                t.shape(),
                model.params().value(id).shape()
            )));
        }
        *model.params_mut().value_mut(id) = t;
    }
    Ok(Checkpoint { header, model })
}

/// Rewrite only the header of an existing checkpoint (e.g. to record a
/// freshly estimated Lipschitz constant).
pub fn update_header(path: &Path, update: impl FnOnce(&mut CheckpointHeader)) -> Result<()> {
    let ckpt = load(path)?;
    let mut header = ckpt.header;
    update(&mut header);
    save_model(
        path,
        &ckpt.model,
        header.training.clone(),
        header.lipschitz.clone(),
        Dtype::F64,
    )
}

/// Access to the parameter store of a freshly loaded model, for tools
/// that need raw blocks.
pub fn params_of(model: &EnergyModel) -> &ParamStore {
    model.params()
}
