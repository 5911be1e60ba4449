//! The run manifest: artifact paths, τ-search table, metrics, timings and seeds.

use std::path::{Path, PathBuf};

use nmvq_core::kv::KvMap;

use crate::config::RunConfig;
use crate::error::{io_err, Result};

const FILE_PREFIX: &str = "file.";

#[derive(Debug, Clone)]
pub struct Manifest {
    path: PathBuf,
    entries: KvMap,
}

impl Manifest {
    /// Loads the manifest at `path`, starting over if it belongs to another config.
    pub fn open(path: &Path, config: &RunConfig) -> Result<Self> {
        let mut entries = KvMap::new();
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(io_err(path))?;
            let old = KvMap::parse(&text)?;
            if old.get_str("config_hash") == Some(config.hash().as_str()) {
                entries = old;
            }
        }
        entries.set("config_hash", config.hash());
        let s = config.seeds;
        entries
            .set("seed.data", s.data)
            .set("seed.model", s.model)
            .set("seed.sampling", s.sampling)
            .set("seed.rocket", s.rocket);
        Ok(Manifest { path: path.to_path_buf(), entries })
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.entries.set(key, value);
    }

    pub fn set_file(&mut self, key: &str, path: &Path) {
        self.entries.set(&format!("{FILE_PREFIX}{key}"), path.display());
    }

    pub fn set_timing(&mut self, step: &str, secs: f64) {
        self.entries.set(&format!("timing.{step}_secs"), format!("{secs:.3}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get_str(key)
    }

    pub fn file(&self, key: &str) -> Option<PathBuf> {
        self.entries.get_str(&format!("{FILE_PREFIX}{key}")).map(PathBuf::from)
    }

    /// Writes the manifest, dropping file entries whose target no longer exists.
    pub fn save(mut self) -> Result<()> {
        let stale: Vec<String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(FILE_PREFIX))
            .filter(|k| !Path::new(self.entries.get_str(k).unwrap_or("")).exists())
            .map(String::from)
            .collect();
        let mut kept = KvMap::new();
        for k in self.entries.keys().filter(|k| !stale.iter().any(|s| s == k)) {
            kept.set(k, self.entries.get_str(k).unwrap_or(""));
        }
        self.entries = kept;
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        std::fs::write(&self.path, self.entries.to_text()).map_err(io_err(&self.path))
    }

    pub fn load(path: &Path) -> Result<KvMap> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Ok(KvMap::parse(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stale_files_are_dropped_and_other_configs_reset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.txt");
        let real = dir.path().join("a.csv");
        std::fs::write(&real, "x").unwrap();
        let cfg = RunConfig::default();
        let mut m = Manifest::open(&path, &cfg).unwrap();
        m.set_file("a", &real);
        m.set_file("gone", &dir.path().join("nope.csv"));
        m.set("tau.star", 1.0);
        m.save().unwrap();
        let m = Manifest::open(&path, &cfg).unwrap();
        assert_eq!(m.file("a"), Some(real));
        assert_eq!(m.file("gone"), None);
        assert_eq!(m.get("tau.star"), Some("1"));
        let other = RunConfig::desk_scale();
        assert_eq!(Manifest::open(&path, &other).unwrap().get("tau.star"), None);
    }
}
