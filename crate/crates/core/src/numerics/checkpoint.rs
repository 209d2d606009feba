//! JSON checkpoint format.
//!
//! ```text
//! {
//!   "format": "coview-checkpoint/1",
//!   "config": { ...model configuration... },
//!   "params": { "<name>": { "shape": [r, c], "values": [f64, ...] }, ... }
//! }
//! ```
//!
//! `params` is keyed by parameter name (sorted). Values are row-major and
//! written with shortest round-trip formatting, so a save/load cycle
//! reproduces every `f64` bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{NumericsError, ParamStore, Tensor};

pub const CHECKPOINT_FORMAT: &str = "coview-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<C> {
    pub format: String,
    pub config: C,
    pub params: BTreeMap<String, StoredTensor>,
}

impl<C> Checkpoint<C> {
    pub fn from_store(config: C, store: &ParamStore) -> Self {
        let params = store
            .iter()
            .map(|(_, p)| {
                (
                    p.name.clone(),
                    StoredTensor {
                        shape: p.value.shape().to_vec(),
                        values: p.value.data().to_vec(),
                    },
                )
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config,
            params,
        }
    }

    /// Copies stored values into `store`. Every parameter in `store` must be
    /// present with a matching shape, and no extra entries are allowed.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<(), NumericsError> {
        if self.params.len() != store.len() {
            return Err(NumericsError::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        for (name, stored) in &self.params {
            let t = Tensor::new(stored.shape.clone(), stored.values.clone())?;
            store.set_value(name, t)?;
        }
        Ok(())
    }
}

pub fn write_checkpoint<C: Serialize>(
    path: impl AsRef<Path>,
    checkpoint: &Checkpoint<C>,
) -> Result<(), NumericsError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, checkpoint)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<C: DeserializeOwned>(
    path: impl AsRef<Path>,
) -> Result<Checkpoint<C>, NumericsError> {
    let ck: Checkpoint<C> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ck.format != CHECKPOINT_FORMAT {
        return Err(NumericsError::Checkpoint(format!(
            "unsupported format tag {:?}",
            ck.format
        )));
    }
    Ok(ck)
}
