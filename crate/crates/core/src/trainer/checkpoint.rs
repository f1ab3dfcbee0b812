use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainState, TrainerConfig};
use crate::data::FeatureSchema;
use crate::error::{Error, Result};
use crate::gradcore::{Parameter, RngState};

pub const CHECKPOINT_FORMAT: u32 = 1;

/// A resumable training run as one JSON document. Floats are written in
/// shortest round-trip form, so reloading is bit-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: u32,
    pub config: TrainerConfig,
    pub schema: FeatureSchema,
    pub knowledge_dim: usize,
    /// Values, gradients, Adam moments and step counts in visit order.
    pub params: Vec<Parameter>,
    pub rng: RngState,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(file), self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file)).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Rejects a vector store whose width differs from the trained model's.
    pub fn check_knowledge_dim(&self, h: usize) -> Result<()> {
        if h != self.knowledge_dim {
            return Err(Error::Config(format!(
                "checkpoint was trained with H={} but the vector store has H={h}",
                self.knowledge_dim
            )));
        }
        Ok(())
    }
}
