//! Full-scale backbone: the pretrained latent-diffusion stack, loaded from a
//! diffusers-layout weights directory.
//!
//! Execution is provided by the `full` cargo feature. Without it, loading still
//! validates the directory so configuration mistakes surface early, then
//! reports that the build lacks the runtime.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Backbone;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width of the text encoder's token embeddings in the pretrained stack.
pub const PRETRAINED_D_TEXT: usize = 768;
/// Training timesteps of the pretrained schedule.
pub const PRETRAINED_TRAIN_STEPS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PretrainedConfig {
    /// Root holding `unet/`, `vae/`, `text_encoder/`, `tokenizer/`.
    pub root: PathBuf,
    /// Optional joint-space text projection (`text_projection.weight`), e.g.
    /// the CLIP checkpoint the style encoder starts from.
    #[serde(default)]
    pub text_projection: Option<PathBuf>,
}

impl PretrainedConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), text_projection: None }
    }

    pub fn unet_weights(&self) -> PathBuf {
        self.root.join("unet").join("diffusion_pytorch_model.safetensors")
    }

    pub fn vae_weights(&self) -> PathBuf {
        self.root.join("vae").join("diffusion_pytorch_model.safetensors")
    }

    pub fn text_encoder_weights(&self) -> PathBuf {
        self.root.join("text_encoder").join("model.safetensors")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("tokenizer").join("vocab.json")
    }

    pub fn merges(&self) -> PathBuf {
        self.root.join("tokenizer").join("merges.txt")
    }

    /// Every file the loader needs, with a human-readable role.
    pub fn required_files(&self) -> Vec<(PathBuf, &'static str)> {
        let mut files = vec![
            (self.unet_weights(), "noise predictor weights"),
            (self.vae_weights(), "latent autoencoder weights"),
            (self.text_encoder_weights(), "text encoder weights"),
            (self.vocab(), "tokenizer vocabulary"),
            (self.merges(), "tokenizer merges"),
        ];
        if let Some(p) = &self.text_projection {
            files.push((p.clone(), "text projection weights"));
        }
        files
    }

    pub fn check_layout(&self) -> Result<()> {
        if !self.root.is_dir() {
            return Err(Error::Missing { path: self.root.clone(), what: "pretrained weights directory".into() });
        }
        for (path, what) in self.required_files() {
            if !path.is_file() {
                return Err(Error::Missing { path, what: what.into() });
            }
            check_safetensors_header(&path)?;
        }
        Ok(())
    }
}

// Cheap corruption check: a safetensors file starts with a little-endian u64
// header length followed by that many bytes of JSON.
fn check_safetensors_header(path: &Path) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) != Some("safetensors") {
        return Ok(());
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let corrupt = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 8 {
        return Err(corrupt("truncated header"));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("eight bytes")) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(|| corrupt("header length exceeds file"))?;
    serde_json::from_slice::<serde_json::Value>(header).map_err(|_| corrupt("header is not JSON"))?;
    Ok(())
}

/// Loads the frozen pretrained stack (`d_text = 768`, 1000 training steps).
pub fn load_pretrained_backbone<T: Scalar>(cfg: &PretrainedConfig) -> Result<Box<dyn Backbone<T>>> {
    cfg.check_layout()?;
    #[cfg(feature = "full")]
    {
        let bb = super::candle_backbone::CandleBackbone::load(cfg)?;
        Ok(Box::new(bb))
    }
    #[cfg(not(feature = "full"))]
    {
        Err(Error::Unsupported("full-scale backbone requires building with `--features full`".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_directory_is_a_descriptive_error() {
        let cfg = PretrainedConfig::new("/nonexistent/sd-v1-4");
        let err = load_pretrained_backbone::<f32>(&cfg).err().unwrap();
        assert!(matches!(err, Error::Missing { .. }), "{err}");
        assert!(err.to_string().contains("sd-v1-4"));
    }

    #[test]
    fn missing_component_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainedConfig::new(dir.path());
        let err = cfg.check_layout().unwrap_err();
        assert!(err.to_string().contains("diffusion_pytorch_model.safetensors"), "{err}");
    }

    #[test]
    fn corrupt_weights_are_detected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PretrainedConfig::new(dir.path());
        for (path, _) in cfg.required_files() {
            std::fs::create_dir_all(path.parent().unwrap()).unwrap();
            std::fs::write(&path, b"{}").unwrap();
        }
        let err = cfg.check_layout().unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
