use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CCGPW001";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const META_FILE: &str = "metadata.json";

/// Contents of `metadata.json` next to the weights blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// The full configuration the model was trained with.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub encoder: EncoderConfig,
    #[serde(rename = "M")]
    pub clusters: usize,
    pub epoch: usize,
    pub dataset_hash: String,
    pub seed: u64,
}

/// Writes the weights and metadata into `dir` (created if missing).
pub fn save_checkpoint(dir: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(16 + model.param_count() * 4);
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&(model.param_count() as u64).to_le_bytes());
    for v in model.params() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    // Write-then-rename so a reader never sees a half-written blob.
    let tmp = dir.join(format!("{WEIGHTS_FILE}.tmp"));
    fs::File::create(&tmp)?.write_all(&blob)?;
    fs::rename(&tmp, dir.join(WEIGHTS_FILE))?;
    let mut json = serde_json::to_vec_pretty(meta)?;
    json.push(b'\n');
    fs::write(dir.join(META_FILE), json)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join(META_FILE))?)?;
    let blob = fs::read(dir.join(WEIGHTS_FILE))?;
    if blob.len() < 16 || &blob[..8] != MAGIC {
        return Err(Error::Checkpoint(format!("{}: not a weights blob", dir.display())));
    }
    let count = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
    if blob.len() != 16 + 4 * count {
        return Err(Error::Checkpoint(format!(
            "{}: blob holds {} bytes for {count} parameters",
            dir.display(),
            blob.len()
        )));
    }
    let params = blob[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut model = Model::<f32>::new(&meta.encoder, 0)?;
    model
        .set_params(params)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    Ok((model, meta))
}
