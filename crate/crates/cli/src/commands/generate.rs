use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};
use stylekit::dataset::{append_style_suffix, STYLE_SUFFIX};
use stylekit::prep::load_rgb;
use stylekit::sampler::{generate as run_generation, write_output, GenerationRequest, GenerationSidecar};
use stylekit::style_module::{PredictionMode, StyleEncoder, StyleProjection};
use stylekit::Scalar;

use super::{Ctx, F};
use crate::config::Source;
use crate::layout::{component_file, StageName};
use crate::GenerateArgs;

/// Encoder, optional projection and the files they came from.
pub(crate) struct Models {
    pub enc: StyleEncoder<F>,
    pub projection: Option<StyleProjection<F>>,
    pub mode: PredictionMode,
    pub paths: BTreeMap<String, PathBuf>,
}

/// Loads the trained components behind `source`. `epoch` picks a per-epoch
/// checkpoint of the source's own stage (the projection, for `pretrained`).
pub(crate) fn load_models(ctx: &Ctx, source: Source, epoch: Option<usize>) -> Result<Models> {
    let (enc_stage, proj_stage, enc_epoch) = match source {
        Source::Inverted => bail!("`inverted` vectors exist only for dataset images; pick a trained source"),
        Source::Pretrained => (StageName::PretrainEncoder, Some(StageName::PretrainProjection), None),
        Source::Finetuned => (StageName::Finetune, Some(StageName::Finetune), epoch),
        Source::Ablation => (StageName::FinetuneAblation, None, epoch),
    };
    let enc_path = ctx.stage(enc_stage).require(&component_file("encoder", enc_epoch), "style encoder")?;
    let mut paths = BTreeMap::from([("encoder".to_string(), enc_path.clone())]);
    let enc = StyleEncoder::load(&enc_path)?;
    let projection = match proj_stage {
        Some(stage) => {
            let path = ctx.stage(stage).require(&component_file("projection", epoch), "style projection")?;
            paths.insert("projection".into(), path.clone());
            Some(StyleProjection::load(&path)?)
        }
        None => None,
    };
    let mode = if projection.is_some() { PredictionMode::Projected } else { PredictionMode::AblationReplicated };
    Ok(Models { enc, projection, mode, paths })
}

pub(super) fn generate(ctx: Ctx, args: GenerateArgs) -> Result<()> {
    if let Some(sidecar) = &args.replay {
        return replay(&ctx, sidecar);
    }
    let (Some(reference), Some(prompt)) = (args.reference, args.prompt) else {
        bail!("--reference and --prompt are required");
    };
    let reference = std::env::current_dir()?.join(reference);
    load_rgb(&reference)?;
    let prompt = if prompt.ends_with(STYLE_SUFFIX) { prompt } else { append_style_suffix(&prompt)? };
    let g = &ctx.cfg.generate;
    let source = args.source.unwrap_or(g.source);
    let models = load_models(&ctx, source, None)?;
    let bundle = ctx.backbone()?;
    let req = GenerationRequest {
        reference_image: reference.clone(),
        prompt,
        seed: ctx.cfg.seed,
        steps: args.steps.unwrap_or(g.steps),
        guidance: args.guidance.unwrap_or(g.guidance),
        output_size: args.size.or(g.output_size),
        mode: models.mode,
    };
    let stage = ctx.stage(StageName::Generate);
    stage.prepare(&ctx.cfg)?;
    let out = run_generation(bundle.as_ref(), &models.enc, models.projection.as_ref(), &req)?;
    let stem = reference.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
    let path = match args.out {
        Some(p) => std::env::current_dir()?.join(p),
        None => stage.outputs().join(format!("{stem}-{}-seed{}.png", source.name(), req.seed)),
    };
    let mut sidecar = GenerationSidecar {
        request: req,
        backbone: ctx.backbone_label(),
        backbone_hash: bundle.parameter_hash(),
        dtype: F::DTYPE.into(),
        checkpoints: models.paths,
        timesteps: out.timesteps,
        output: path.clone(),
        output_sha256: String::new(),
    };
    let side = write_output(&path, &out.image, &mut sidecar)?;
    println!("seed: {}", sidecar.request.seed);
    println!("image: {}", path.display());
    println!("sidecar: {}", side.display());
    Ok(())
}

fn replay(ctx: &Ctx, sidecar_path: &std::path::Path) -> Result<()> {
    let text = std::fs::read_to_string(sidecar_path).with_context(|| format!("reading {}", sidecar_path.display()))?;
    let sidecar: GenerationSidecar = serde_json::from_str(&text)?;
    if sidecar.dtype != F::DTYPE {
        bail!("sidecar was produced at {} precision; this build replays {}", sidecar.dtype, F::DTYPE);
    }
    let bundle = ctx.backbone()?;
    if bundle.parameter_hash() != sidecar.backbone_hash {
        bail!("backbone {} does not match the recorded {} (hash differs)", ctx.backbone_label(), sidecar.backbone);
    }
    let load = |role: &str| -> Result<Option<PathBuf>> {
        let Some(p) = sidecar.checkpoints.get(role) else { return Ok(None) };
        if !p.is_file() {
            bail!("missing recorded {role} checkpoint {}", p.display());
        }
        Ok(Some(p.clone()))
    };
    let enc_path = load("encoder")?.context("sidecar records no encoder checkpoint")?;
    let enc = StyleEncoder::<F>::load(&enc_path)?;
    let projection = load("projection")?.map(|p| StyleProjection::<F>::load(&p)).transpose()?;
    let out = run_generation(bundle.as_ref(), &enc, projection.as_ref(), &sidecar.request)?;
    let mut bytes = Cursor::new(Vec::new());
    out.image.write_to(&mut bytes, image::ImageFormat::Png)?;
    let digest = hex::encode(Sha256::digest(bytes.get_ref()));
    if digest != sidecar.output_sha256 {
        bail!(
            "replay of {} produced different bytes ({digest} vs {})",
            sidecar.output.display(),
            sidecar.output_sha256
        );
    }
    println!("seed: {}", sidecar.request.seed);
    println!("replay matches {}", sidecar.output.display());
    Ok(())
}
