use std::path::PathBuf;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const GIT_DESCRIBE: &str = env!("LARAR_GIT_DESCRIBE");

/// A run directory holding the resolved config, the seeds, the build's git
/// description and every output of the run.
pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        let name = match &cfg.run.run_name {
            Some(n) => n.clone(),
            None => format!("{}-{}", cfg.run.command, config_hash(cfg)?),
        };
        let path = cfg.output_base().join(name);
        std::fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        let dir = Self { path };
        dir.write("config.toml", &cfg.to_toml()?)?;
        dir.write("seeds.txt", &cfg.seeds_summary())?;
        dir.write("git-describe.txt", &format!("{GIT_DESCRIBE}\n"))?;
        log::info!("run directory {}", dir.path.display());
        Ok(dir)
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.file(name);
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }
}

/// Short digest of the config without its output location, so identical
/// experiments land in identically named directories.
fn config_hash(cfg: &RunConfig) -> Result<String> {
    let mut c = cfg.clone();
    c.run.output_dir = None;
    c.run.run_name = None;
    let digest = Sha256::digest(c.to_toml()?.as_bytes());
    Ok(digest.iter().take(6).map(|b| format!("{b:02x}")).collect())
}
