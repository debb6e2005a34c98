//! Declarative run configuration shared by every command.
//!
//! One TOML file describes a run; command-line flags override individual
//! fields. The top-level `seed` replaces the seeds of every section so a
//! single number fixes all randomness.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::casestudy::control::ControlConfig;
use crate::casestudy::ml::MlConfig;
use crate::error::{Error, Result};
use crate::privacy::{calibrate_sigma, LaplaceParams, Sensitivity};
use crate::scheme::{keygen, Dims, EncodingScheme, Scales};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    /// `[ny, nu, nzeta]`.
    pub dims: [usize; 3],
    /// `[ny_tilde, nu_tilde, nzeta_tilde]`.
    pub lifted: [usize; 3],
    pub scales: Scales,
    pub sigma: f64,
    pub path: PathBuf,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            dims: [1, 1, 3],
            lifted: [3, 3, 4],
            scales: Scales::high_privacy(),
            sigma: 1e4,
            path: "scheme.imk".into(),
        }
    }
}

impl SchemeConfig {
    pub fn dims(&self) -> Result<Dims> {
        let [a, b, c] = self.dims;
        let [x, y, z] = self.lifted;
        Dims::new((a, b, c), (x, y, z))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrivacyConfig {
    pub delta_y: f64,
    pub delta_u: f64,
    /// With both targets set, keygen picks the smallest sigma meeting them.
    pub target_eps_y: Option<f64>,
    pub target_eps_u: Option<f64>,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        Self {
            delta_y: 1.0,
            delta_u: 1.0,
            target_eps_y: None,
            target_eps_u: None,
        }
    }
}

impl PrivacyConfig {
    pub fn sensitivity(&self) -> Result<Sensitivity> {
        Sensitivity::new(self.delta_y, self.delta_u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeConfig {
    pub addr: String,
    /// Stop after this many connections; run forever when absent.
    pub max_connections: Option<usize>,
}

impl Default for ServeConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            max_connections: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub addr: String,
    pub algorithm: String,
    /// CSV of `y` columns followed by `w` columns, one row per step.
    pub inputs: Option<PathBuf>,
    pub outputs: PathBuf,
    pub transcript: PathBuf,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            addr: "127.0.0.1:7878".into(),
            algorithm: "reactor-controller".into(),
            inputs: None,
            outputs: "client_outputs.csv".into(),
            transcript: "session.imts".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Relative artifact paths are resolved against this directory.
    pub out_dir: PathBuf,
    pub scheme: SchemeConfig,
    pub privacy: PrivacyConfig,
    pub control: ControlConfig,
    pub ml: MlConfig,
    pub serve: ServeConfig,
    pub client: ClientConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 1,
            out_dir: "out".into(),
            scheme: SchemeConfig::default(),
            privacy: PrivacyConfig::default(),
            control: ControlConfig::default(),
            ml: MlConfig::default(),
            serve: ServeConfig::default(),
            client: ClientConfig::default(),
        };
        c.set_seed(1);
        c
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.set_seed(c.seed);
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.control.seed = seed;
        self.ml.seed = seed;
    }

    /// `path` itself when absolute, otherwise under `out_dir`.
    pub fn artifact(&self, path: impl AsRef<Path>) -> PathBuf {
        let p = path.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scheme.dims()?;
        if !(self.scheme.sigma > 0.0) || !self.scheme.sigma.is_finite() {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.scheme.sigma)));
        }
        self.privacy.sensitivity()?;
        if self.privacy.target_eps_y.is_some() != self.privacy.target_eps_u.is_some() {
            return Err(Error::Config("set both privacy targets or neither".into()));
        }
        self.control.validate()?;
        Ok(())
    }

    /// Draws the configured scheme, calibrating sigma when targets are set.
    pub fn keygen(&self) -> Result<EncodingScheme> {
        self.validate()?;
        let dims = self.scheme.dims()?;
        let gen = |sigma| keygen(dims, self.scheme.scales, LaplaceParams::centered(dims.noise_dim(), sigma)?, self.seed);
        match (self.privacy.target_eps_y, self.privacy.target_eps_u) {
            (Some(ey), Some(eu)) => {
                // the coding matrices do not depend on sigma
                let probe = gen(1.0)?;
                gen(calibrate_sigma(&probe, self.privacy.sensitivity()?, ey, eu)?)
            }
            _ => gen(self.scheme.sigma),
        }
    }
}
