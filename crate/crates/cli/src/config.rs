//! Experiment configuration file.

use std::path::{Path, PathBuf};

use dmri::baseline::CsConfig;
use dmri::data::{PatchSpec, PhantomConfig};
use dmri::kspace::{MaskConfig, NoiseModel};
use dmri::network::NetworkConfig;
use dmri::training::TrainConfig;
use dmri::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA: &str = "dmri-experiment/1";

/// Synthetic dataset: `volumes` phantoms, optionally sheared into patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    pub volumes: usize,
    pub patch: Option<PatchSpec>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            volumes: 4,
            patch: None,
        }
    }
}

impl DataConfig {
    /// `(nx, ny, nt)` of every record.
    pub fn geometry(&self) -> Result<(usize, usize, usize)> {
        let p = &self.phantom;
        match &self.patch {
            None => Ok((p.nx, p.ny, p.nt)),
            Some(spec) => {
                spec.counts((p.nx, p.ny, p.nt))?;
                Ok((spec.size[0], spec.size[1], spec.size[2]))
            }
        }
    }
}

/// Default file locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub mask: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: String,
    /// Master seed. Phantom `i` uses `seed + i`, the mask uses `seed`,
    /// simulated measurements `seed + 1000003`, training `seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub mask: MaskConfig,
    pub noise: NoiseModel,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub cs: CsConfig,
    pub paths: Paths,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema: SCHEMA.to_string(),
            seed: 0,
            data: DataConfig::default(),
            mask: MaskConfig::default(),
            noise: NoiseModel::default(),
            network: NetworkConfig::tiny(),
            train: TrainConfig::default(),
            cs: CsConfig::default(),
            paths: Paths::default(),
        }
    }
}

/// Offset between the master seed and the measurement-noise seed.
pub const SIMULATION_SEED_OFFSET: u64 = 1_000_003;

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::InvalidArgument(format!("cannot read config {}: {e}", path.display()))
        })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))
    }

    /// Applies a seed override and propagates the master seed.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.data.phantom.seed = self.seed;
        self.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA {
            return Err(Error::InvalidArgument(format!(
                "unsupported config schema {:?}, expected {SCHEMA:?}",
                self.schema
            )));
        }
        if self.data.volumes == 0 {
            return Err(Error::InvalidArgument("data.volumes must be >= 1".into()));
        }
        self.data.phantom.validate()?;
        if let Some(p) = &self.data.patch {
            p.validate()?;
        }
        let (nx, ny, _) = self.data.geometry()?;
        self.mask.generate(nx, ny, 1, 0)?;
        if !(self.noise.sigma >= 0.0 && self.noise.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise.sigma must be finite and >= 0, got {}",
                self.noise.sigma
            )));
        }
        self.network.validate()?;
        self.train.validate()?;
        self.cs.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
