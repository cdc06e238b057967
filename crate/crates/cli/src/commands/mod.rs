mod dataset;
mod evaluate;
mod generate;
mod train;

use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use stylekit::backbone::{load_pretrained_backbone, make_toy_backbone, Backbone, PretrainedConfig};
use stylekit::dataset::{Manifest, StyleSample};
use stylekit::eval::sample_id;
use stylekit::style_module::{EncoderConfig, StyleEncoder};

use crate::config::{Mode, RunConfig};
use crate::layout::{require, StageDir, StageName};
use crate::Command;

/// Scalar type of every CLI run.
pub type F = f32;

pub fn dispatch(cfg: RunConfig, command: Command) -> Result<()> {
    let ctx = Ctx { cfg };
    match command {
        Command::BuildDataset(a) => dataset::build(ctx, a),
        Command::Invert(a) => train::invert(ctx, a),
        Command::PretrainEncoder(a) => train::pretrain_encoder(ctx, a),
        Command::PretrainProjection(a) => train::pretrain_projection(ctx, a),
        Command::Finetune(a) => train::finetune(ctx, a, false),
        Command::FinetuneAblation(a) => train::finetune(ctx, a, true),
        Command::Generate(a) => generate::generate(ctx, a),
        Command::Evaluate(a) => evaluate::evaluate(ctx, a),
        Command::SynthFixtures(a) => dataset::synth(ctx, a),
    }
}

pub(crate) struct Ctx {
    pub cfg: RunConfig,
}

impl Ctx {
    pub fn stage(&self, name: StageName) -> StageDir {
        StageDir::new(&self.cfg.run_dir, name)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.cfg
            .data
            .manifest
            .clone()
            .unwrap_or_else(|| self.stage(StageName::BuildDataset).outputs().join("manifest.ndjson"))
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let path = require(&self.manifest_path(), "dataset manifest", StageName::BuildDataset)?;
        let m = Manifest::load(&path)?;
        let mut seen = BTreeMap::new();
        for s in m.samples() {
            if let Some(prev) = seen.insert(sample_id(s), &s.image_path) {
                bail!("image ids must be unique file stems: {} and {}", prev.display(), s.image_path.display());
            }
        }
        Ok(m)
    }

    pub fn train_samples(&self) -> Result<Vec<StyleSample>> {
        let m = self.manifest()?;
        let train: Vec<StyleSample> = m.split(stylekit::dataset::Split::Train).cloned().collect();
        if train.is_empty() {
            bail!("manifest {} has no training samples", self.manifest_path().display());
        }
        Ok(train)
    }

    pub fn backbone(&self) -> Result<Box<dyn Backbone<F>>> {
        match self.cfg.mode {
            Mode::Toy => Ok(Box::new(make_toy_backbone::<F>(self.cfg.backbone.toy_seed))),
            Mode::Full => {
                let Some(dir) = &self.cfg.backbone.weights else {
                    bail!("full mode needs `backbone.weights` (diffusers-layout weights directory)");
                };
                // Pooled text features go through the CLIP text projection so
                // they share the style encoder's joint space.
                let pretrained =
                    PretrainedConfig { text_projection: self.cfg.backbone.clip.clone(), ..PretrainedConfig::new(dir) };
                Ok(load_pretrained_backbone::<F>(&pretrained)?)
            }
        }
    }

    /// Untrained encoder a stage-2a run starts from.
    pub fn initial_encoder(&self) -> Result<StyleEncoder<F>> {
        match self.cfg.mode {
            Mode::Toy => Ok(StyleEncoder::new(EncoderConfig::toy(), self.cfg.seed)?),
            Mode::Full => {
                let Some(clip) = &self.cfg.backbone.clip else {
                    bail!("full mode needs `backbone.clip` (CLIP checkpoint for the style encoder)");
                };
                Ok(StyleEncoder::from_clip_weights(EncoderConfig::clip_vit_l14(), clip)
                    .with_context(|| format!("loading {}", clip.display()))?)
            }
        }
    }

    pub fn backbone_label(&self) -> String {
        match self.cfg.mode {
            Mode::Toy => format!("toy(seed={})", self.cfg.backbone.toy_seed),
            Mode::Full => format!(
                "full({})",
                self.cfg.backbone.weights.as_deref().map(|p| p.display().to_string()).unwrap_or_default()
            ),
        }
    }

    /// Metadata stamped on every checkpoint a stage writes.
    pub fn meta(&self, stage: StageName) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("stage".to_string(), stage.to_string()),
            ("mode".to_string(), format!("{:?}", self.cfg.mode).to_lowercase()),
            ("seed".to_string(), self.cfg.seed.to_string()),
        ])
    }
}

pub(crate) fn write_json<S: serde::Serialize>(path: &std::path::Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
