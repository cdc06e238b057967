//! Run-directory layout and prerequisite lookup.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageName {
    BuildDataset,
    Invert,
    PretrainEncoder,
    PretrainProjection,
    Finetune,
    FinetuneAblation,
    Generate,
    Evaluate,
}

impl StageName {
    /// Directory name, identical to the CLI verb.
    pub fn as_str(self) -> &'static str {
        match self {
            StageName::BuildDataset => "build-dataset",
            StageName::Invert => "invert",
            StageName::PretrainEncoder => "pretrain-encoder",
            StageName::PretrainProjection => "pretrain-projection",
            StageName::Finetune => "finetune",
            StageName::FinetuneAblation => "finetune-ablation",
            StageName::Generate => "generate",
            StageName::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// `<run_dir>/<stage>/`.
#[derive(Clone, Debug)]
pub struct StageDir {
    pub name: StageName,
    pub root: PathBuf,
}

impl StageDir {
    pub fn new(run_dir: &Path, name: StageName) -> Self {
        Self { name, root: run_dir.join(name.as_str()) }
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn outputs(&self) -> PathBuf {
        self.root.join("outputs")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    /// Creates the directories and records the effective configuration.
    pub fn prepare(&self, cfg: &RunConfig) -> Result<()> {
        for d in [self.checkpoints(), self.logs(), self.outputs()] {
            std::fs::create_dir_all(&d).with_context(|| format!("creating {}", d.display()))?;
        }
        std::fs::write(self.config(), cfg.to_toml()?).with_context(|| format!("writing {}", self.config().display()))
    }

    /// Path of a checkpoint this stage must already have produced.
    pub fn require(&self, file: &str, what: &str) -> Result<PathBuf> {
        let path = self.checkpoints().join(file);
        require(&path, what, self.name)
    }
}

/// Errors with the missing path and the verb that produces it.
pub fn require(path: &Path, what: &str, producer: StageName) -> Result<PathBuf> {
    if !path.exists() {
        bail!("missing {what}: {} (produced by `stylekit {producer}`)", path.display());
    }
    Ok(path.to_path_buf())
}

/// Final-checkpoint or per-epoch file name for a trained component.
pub fn component_file(component: &str, epoch: Option<usize>) -> String {
    match epoch {
        None => format!("{component}.safetensors"),
        Some(e) => format!("{component}-epoch-{e:03}.safetensors"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_prerequisite_names_path_and_producer() {
        let dir = tempfile::tempdir().unwrap();
        let stage = StageDir::new(dir.path(), StageName::PretrainProjection);
        let err = stage.require("projection.safetensors", "stage-2b projection").unwrap_err().to_string();
        assert!(err.contains("projection.safetensors"), "{err}");
        assert!(err.contains("stylekit pretrain-projection"), "{err}");
    }

    #[test]
    fn file_names() {
        assert_eq!(component_file("encoder", None), "encoder.safetensors");
        assert_eq!(component_file("encoder", Some(3)), "encoder-epoch-003.safetensors");
    }
}
