use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use graftstereo::io::KvFile;
use graftstereo::pipeline::PipelineConfig;

/// Run record written beside a command's outputs: what ran, with which
/// configuration, and the SHA-256 of every file read and written.
pub struct Manifest {
    kv: KvFile,
}

pub fn sha256_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Regular files directly inside `dir`, sorted by name.
pub fn files_in(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| anyhow::anyhow!("listing {}: {e}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    out.sort();
    Ok(out)
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut kv = KvFile::new();
        kv.set("command", command);
        kv.set("version", env!("CARGO_PKG_VERSION"));
        // argv[0] varies with how the binary was invoked
        let args: Vec<String> = std::env::args().skip(1).collect();
        kv.set("args", args.join(" "));
        Self { kv }
    }

    pub fn set(&mut self, key: &str, value: impl std::fmt::Display) {
        self.kv.set(key, value);
    }

    pub fn config(&mut self, cfg: &PipelineConfig) {
        for (k, v) in cfg.to_kv().iter() {
            self.kv.set(&format!("config.{k}"), v);
        }
    }

    pub fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let h = sha256_file(path)?;
        self.kv.set(&format!("input.{}", path.display()), h);
        Ok(())
    }

    pub fn inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a PathBuf>) -> anyhow::Result<()> {
        paths.into_iter().try_for_each(|p| self.input(p))
    }

    pub fn output(&mut self, path: &Path) -> anyhow::Result<()> {
        let h = sha256_file(path)?;
        self.kv.set(&format!("output.{}", path.display()), h);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        self.kv.write(path)?;
        log::debug!("manifest written to {}", path.display());
        Ok(())
    }
}
