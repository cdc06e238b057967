//! Run configuration: one TOML document with per-stage sections. Command-line
//! flags override file values; every path is made absolute on load so the
//! copy saved next to a stage's outputs replays from any directory.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use stylekit::inversion::InversionConfig;
use stylekit::trainer::{Stage, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Desk-scale stack: no network, no pretrained weights.
    #[default]
    Toy,
    /// Pretrained backbone and encoder weights.
    Full,
}

/// Where a style vector comes from at generation or evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    /// Stage-1 vectors, stored per image.
    Inverted,
    /// Stage-2 encoder and projection.
    Pretrained,
    /// Stage-3 encoder and projection.
    Finetuned,
    /// Stage-3 encoder with the replicated feature and no projection.
    Ablation,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Inverted => "inverted",
            Source::Pretrained => "pretrained",
            Source::Finetuned => "finetuned",
            Source::Ablation => "ablation",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Class-folder image tree, `<images>/<tag>/<file>`.
    pub images: Option<PathBuf>,
    /// Recorded captions (toy mode); defaults to `<images>/captions.json`.
    pub captions: Option<PathBuf>,
    /// Existing manifest to use instead of the run's `build-dataset` output.
    pub manifest: Option<PathBuf>,
    pub test_size: Option<usize>,
    /// Extra blacklist words, one per line.
    pub blacklist_extension: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CaptionerConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. The key itself
    /// is never written to disk.
    pub key_env: String,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "gpt-4o".into(),
            key_env: "OPENAI_API_KEY".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Seed of the toy stack's fixed weights.
    pub toy_seed: u64,
    /// Diffusers-layout weights directory (full mode).
    pub weights: Option<PathBuf>,
    /// CLIP checkpoint the style encoder starts from (full mode).
    pub clip: Option<PathBuf>,
    /// torchvision VGG19 weights for the Gram baseline (full mode, optional).
    pub vgg19: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InvertSection {
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub adam_eps: Option<f64>,
}

impl InvertSection {
    pub fn resolve(&self, seed: u64) -> InversionConfig {
        let d = InversionConfig::default();
        InversionConfig {
            steps: self.steps.unwrap_or(d.steps),
            lr: self.lr.unwrap_or(d.lr),
            checkpoint_every: self.checkpoint_every.unwrap_or(d.checkpoint_every),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
            seed,
        }
    }
}

/// Overrides on top of a stage's published defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr_encoder: Option<f64>,
    pub lr_projection: Option<f64>,
    pub adam_eps: Option<f64>,
    pub threads: Option<usize>,
}

impl StageSection {
    pub fn resolve(&self, stage: Stage, seed: u64) -> TrainConfig {
        let d = TrainConfig::defaults(stage);
        TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr_encoder: self.lr_encoder.unwrap_or(d.lr_encoder),
            lr_projection: self.lr_projection.unwrap_or(d.lr_projection),
            adam_eps: self.adam_eps.unwrap_or(d.adam_eps),
            threads: self.threads.or(d.threads),
            seed,
            ..d
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSection {
    pub steps: usize,
    pub guidance: f64,
    pub output_size: Option<u32>,
    pub source: Source,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self {
            steps: stylekit::sampler::DEFAULT_STEPS,
            guidance: stylekit::sampler::DEFAULT_GUIDANCE,
            output_size: None,
            source: Source::Finetuned,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub steps: usize,
    pub guidance: f64,
    pub sources: Vec<Source>,
    /// `final`, `epoch-N` (trained stages) or `step-N` (inverted vectors).
    pub checkpoint: String,
    /// Also write t-SNE plots and silhouettes of encoder and Gram features.
    pub plots: bool,
    /// Tapped VGG19 conv layers (0-based) of the full-mode Gram baseline.
    pub gram_layers: Vec<usize>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            steps: stylekit::sampler::DEFAULT_STEPS,
            guidance: stylekit::sampler::DEFAULT_GUIDANCE,
            sources: vec![Source::Finetuned],
            checkpoint: "final".into(),
            plots: false,
            gram_layers: vec![0, 2, 4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub captioner: CaptionerConfig,
    pub backbone: BackboneConfig,
    pub invert: InvertSection,
    pub pretrain_encoder: StageSection,
    pub pretrain_projection: StageSection,
    pub finetune: StageSection,
    pub finetune_ablation: StageSection,
    pub generate: GenerateSection,
    pub evaluate: EvaluateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Toy,
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            captioner: CaptionerConfig::default(),
            backbone: BackboneConfig::default(),
            invert: InvertSection::default(),
            pretrain_encoder: StageSection::default(),
            pretrain_projection: StageSection::default(),
            finetune: StageSection::default(),
            finetune_ablation: StageSection::default(),
            generate: GenerateSection::default(),
            evaluate: EvaluateSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Resolves every relative path against `base`.
    pub fn absolutize(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        let fix_opt = |p: &mut Option<PathBuf>| {
            if let Some(p) = p {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        fix(&mut self.run_dir);
        fix_opt(&mut self.data.images);
        fix_opt(&mut self.data.captions);
        fix_opt(&mut self.data.manifest);
        fix_opt(&mut self.data.blacklist_extension);
        fix_opt(&mut self.backbone.weights);
        fix_opt(&mut self.backbone.clip);
        fix_opt(&mut self.backbone.vgg19);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.invert.steps = Some(40);
        cfg.evaluate.sources = vec![Source::Inverted, Source::Ablation];
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[invert]\nstepz = 3\n").is_err());
    }

    #[test]
    fn overrides_sit_on_published_defaults() {
        let s = StageSection { epochs: Some(2), ..Default::default() };
        let c = s.resolve(Stage::Finetune, 5);
        assert_eq!((c.epochs, c.seed), (2, 5));
        assert_eq!(c.lr_projection, TrainConfig::defaults(Stage::Finetune).lr_projection);
        let inv = InvertSection::default().resolve(1);
        assert_eq!((inv.steps, inv.checkpoint_every), (250, 50));
    }
}
