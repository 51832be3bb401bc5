use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Flow, FlowConfig, Standardization};
use crate::error::{Error, Result};

pub const FLOW_CHECKPOINT_VERSION: u32 = 1;

/// Portable flow state. JSON with shortest round-trip float formatting, so
/// save/load reproduces every weight bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowCheckpoint {
    pub schema_version: u32,
    pub config: FlowConfig,
    pub init_seed: u64,
    pub standardization: Standardization,
    pub weights: Vec<f64>,
}

impl FlowCheckpoint {
    pub fn from_flow(flow: &Flow) -> Self {
        FlowCheckpoint {
            schema_version: FLOW_CHECKPOINT_VERSION,
            config: flow.config.clone(),
            init_seed: flow.init_seed,
            standardization: flow.standardization.clone(),
            weights: flow.weights.to_vec(),
        }
    }

    pub fn into_flow(self) -> Result<Flow> {
        if self.schema_version != FLOW_CHECKPOINT_VERSION {
            return Err(Error::SchemaVersion {
                what: "flow checkpoint",
                found: self.schema_version,
                expected: FLOW_CHECKPOINT_VERSION,
            });
        }
        let mut flow = Flow::new(self.config, self.init_seed)?;
        flow.set_standardization(self.standardization)?;
        flow.set_weights(self.weights)?;
        Ok(flow)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

impl Flow {
    pub fn save(&self, path: &Path) -> Result<()> {
        FlowCheckpoint::from_flow(self).save(path)
    }

    pub fn load(path: &Path) -> Result<Flow> {
        FlowCheckpoint::load(path)?.into_flow()
    }
}
