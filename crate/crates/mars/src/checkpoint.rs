//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! save/load cycle reproduces every parameter bit for bit.

use std::path::Path;

use mars_core::{Geometry, ModelParams, Variant};
use serde::{Deserialize, Serialize};

use crate::io::{read_file, write_file};
use crate::Error;

pub const FORMAT: &str = "mars-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub k: usize,
    pub variant: Variant,
    pub geometry: Geometry,
    pub seed: u64,
    /// Epoch the parameters were taken at; `None` for an untrained model.
    pub epoch: Option<usize>,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, seed: u64, epoch: Option<usize>) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: VERSION,
            n_users: params.n_users(),
            n_items: params.n_items(),
            dim: params.dim(),
            k: params.n_facets(),
            variant: params.variant,
            geometry: params.geometry(),
            seed,
            epoch,
            params,
        }
    }

    fn check(&self) -> Result<(), Error> {
        if self.format != FORMAT || self.version != VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        self.params.validate()?;
        let p = &self.params;
        let header = (self.n_users, self.n_items, self.dim, self.k, self.geometry);
        let actual = (p.n_users(), p.n_items(), p.dim(), p.n_facets(), p.geometry());
        if header != actual || self.variant != p.variant {
            return Err(Error::Invalid("checkpoint header disagrees with its tensors".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, Error> {
        crate::to_json_pretty(self)
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self, Error> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| Error::Json { path: path.to_path_buf(), source: e })?;
        ck.check()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), Error> {
        write_file(path, &self.to_json()?)
    }

    pub fn load(path: &Path) -> Result<Self, Error> {
        Self::from_json(&read_file(path)?, path)
    }
}
