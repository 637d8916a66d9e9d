//! Output directories and provenance headers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("STATIONARY_NP_VERSION");

/// Version, seed and configuration hash stamped into every artifact.
#[derive(Debug, Clone)]
pub struct Provenance {
    pub version: String,
    pub seed: u64,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(cfg: &RunConfig) -> Self {
        Self { version: VERSION.to_string(), seed: cfg.seed, config_hash: cfg.hash() }
    }

    pub fn comment(&self) -> String {
        format!("# stationary-np {} seed={} config={}", self.version, self.seed, self.config_hash)
    }

    pub fn meta(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("version".to_string(), self.version.clone()),
            ("seed".to_string(), self.seed.to_string()),
            ("config_hash".to_string(), self.config_hash.clone()),
        ])
    }
}

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<PathBuf, CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("{} exists and is not a directory", dir.display())));
        }
        let nonempty = std::fs::read_dir(dir)?.next().is_some();
        if nonempty && !force {
            return Err(CliError::Config(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(dir.to_path_buf())
}

/// CSV writer whose first line is the provenance comment.
pub fn csv_writer(path: &Path, prov: &Provenance) -> Result<csv::Writer<File>, CliError> {
    let mut f = File::create(path)?;
    writeln!(f, "{}", prov.comment())?;
    Ok(csv::Writer::from_writer(f))
}

/// Writes the effective configuration as TOML under a provenance comment.
pub fn write_config(path: &Path, cfg: &RunConfig, prov: &Provenance) -> Result<(), CliError> {
    let body = toml::to_string(cfg).map_err(|e| CliError::Config(e.to_string()))?;
    std::fs::write(path, format!("{}\n{body}", prov.comment()))?;
    Ok(())
}
