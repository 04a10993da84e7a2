//! Versioned JSON checkpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Network, NetworkRecord};
use crate::numeric::RngState;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Epoch the weights come from; 0 for an untrained network.
    pub epoch: usize,
    pub network: NetworkRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, epoch: usize, network: &Network, rng: Option<RngState>) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: config.clone(),
            epoch,
            network: network.to_record(),
            rng,
        }
    }

    pub fn network(&self) -> Result<Network> {
        Network::from_record(&self.network)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("corrupt payload: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == FORMAT_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Checkpoint(format!(
                    "unsupported format_version {v} (this build reads {FORMAT_VERSION})"
                )))
            }
            None => return Err(Error::Checkpoint("missing format_version".into())),
        }
        let ck: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(format!("corrupt payload: {e}")))?;
        ck.network()?;
        Ok(ck)
    }
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ck.to_json()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
