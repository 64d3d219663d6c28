//! Declarative pipeline configuration.
//!
//! A config file picks a `profile` (`full` or `toy`) whose defaults fill in
//! every section, then overrides individual keys:
//!
//! ```toml
//! profile = "toy"
//! models_dir = "models"
//! output_dir = "reports"
//!
//! [dataset]
//! root = "data/synthetic"
//! kind = "synthetic"          # mpi_pcb | mvtec_ad | synthetic
//!
//! [grid]
//! side = 64                   # board-space region side
//!
//! [train]
//! epochs = 50
//! seed = 3
//!
//! [registration]
//! reference = "golden.png"    # enables registration before inference
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! workers = 2
//! ```
//!
//! Relative paths resolve against the config file's directory.
//! `PCB_SENTINEL_MODELS` overrides `models_dir`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcb_sentinel_core::datasets::DatasetKind;
use pcb_sentinel_core::evaluation::DEFAULT_THRESHOLDS;
use pcb_sentinel_core::registration::RegistrationConfig;
use pcb_sentinel_core::training::TrainConfig;
use pcb_sentinel_core::CaeConfig;
use serde::{Deserialize, Serialize};

pub const MODELS_ENV: &str = "PCB_SENTINEL_MODELS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Full,
    Toy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub root: PathBuf,
    pub kind: DatasetKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    /// Region side in board pixels.
    pub side: usize,
    /// Board size; taken from the dataset or the reference image when absent.
    pub board_w: Option<usize>,
    pub board_h: Option<usize>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            side: 1024,
            board_w: None,
            board_h: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub n_thresholds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_thresholds: DEFAULT_THRESHOLDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationSection {
    /// Golden board image; registration is skipped without one.
    #[serde(default)]
    pub reference: Option<PathBuf>,
    #[serde(flatten)]
    pub params: RegistrationConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub bind: String,
    pub workers: usize,
    /// Job results and the verdict audit log; defaults to `<output_dir>/service`.
    pub work_dir: Option<PathBuf>,
    /// Prebuilt inspector UI served under `/`.
    pub static_dir: Option<PathBuf>,
    /// Largest accepted upload, bytes.
    pub max_upload: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1:8080".into(),
            workers: 2,
            work_dir: None,
            static_dir: None,
            max_upload: 256 << 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    pub models_dir: PathBuf,
    pub output_dir: PathBuf,
    pub grid: GridConfig,
    pub cae: CaeConfig,
    pub train: TrainConfig,
    pub registration: RegistrationSection,
    pub eval: EvalConfig,
    pub service: ServiceConfig,
}

impl Config {
    /// Profile defaults with no dataset attached.
    pub fn defaults(profile: Profile) -> Config {
        let (cae, train, side) = match profile {
            Profile::Full => (CaeConfig::default(), TrainConfig::default(), 1024),
            Profile::Toy => (CaeConfig::toy(), TrainConfig::toy(), 64),
        };
        Config {
            profile,
            dataset: None,
            models_dir: "models".into(),
            output_dir: "reports".into(),
            grid: GridConfig {
                side,
                ..GridConfig::default()
            },
            cae,
            train,
            registration: RegistrationSection {
                reference: None,
                params: RegistrationConfig::default(),
            },
            eval: EvalConfig::default(),
            service: ServiceConfig::default(),
        }
    }

    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Config> {
        let user: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
        let profile = match user.get("profile") {
            Some(v) => v
                .clone()
                .try_into::<Profile>()
                .context("profile must be \"full\" or \"toy\"")?,
            None => Profile::default(),
        };
        let mut merged =
            toml::Table::try_from(Config::defaults(profile)).context("serializing defaults")?;
        overlay(&mut merged, user);
        let mut cfg: Config = toml::Value::Table(merged)
            .try_into()
            .context("invalid config")?;
        cfg.resolve_paths(base_dir);
        if let Some(dir) = std::env::var_os(MODELS_ENV) {
            cfg.models_dir = PathBuf::from(dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::from_toml(&text, base).with_context(|| format!("in {}", path.display()))
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.models_dir);
        fix(&mut self.output_dir);
        if let Some(d) = &mut self.dataset {
            fix(&mut d.root);
        }
        for p in [
            self.registration.reference.as_mut(),
            self.service.work_dir.as_mut(),
            self.service.static_dir.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cae.validate()?;
        self.train.validate()?;
        if self.grid.side == 0 {
            bail!("grid.side must be positive");
        }
        if self.service.workers == 0 {
            bail!("service.workers must be positive");
        }
        if self.eval.n_thresholds < 2 {
            bail!("eval.n_thresholds must be at least 2");
        }
        Ok(())
    }

    pub fn dataset(&self) -> Result<&DatasetConfig> {
        self.dataset
            .as_ref()
            .context("config has no [dataset] section")
    }

    pub fn work_dir(&self) -> PathBuf {
        self.service
            .work_dir
            .clone()
            .unwrap_or_else(|| self.output_dir.join("service"))
    }
}

/// Recursively replaces keys of `base` with those of `over`.
fn overlay(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => overlay(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
