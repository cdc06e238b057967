use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stylekit::eval::sample_id;
use stylekit::inversion::{checkpoint_path, invert_style, StyleVector};
use stylekit::prep::{load_rgb, preprocess_image};
use stylekit::style_module::{StyleEncoder, StyleProjection};
use stylekit::trainer::{
    train_stage2a, train_stage2b, train_stage3, train_stage3_ablation, EpochSnapshot, FinetuneExample, Stage, TrainLog,
};

use super::{write_json, Ctx, F};
use crate::layout::{component_file, StageDir, StageName};
use crate::{InvertArgs, StageArgs};

#[derive(Serialize)]
struct InversionLog<'a> {
    image_id: &'a str,
    seed: u64,
    backbone_hash: &'a str,
    losses: &'a [f64],
}

pub(super) fn invert(mut ctx: Ctx, args: InvertArgs) -> Result<()> {
    if let Some(s) = args.steps {
        ctx.cfg.invert.steps = Some(s);
    }
    let samples = ctx.manifest()?.samples().to_vec();
    let bundle = ctx.backbone()?;
    let stage = ctx.stage(StageName::Invert);
    stage.prepare(&ctx.cfg)?;
    let mut meta = ctx.meta(StageName::Invert);
    for (i, s) in samples.iter().enumerate() {
        let id = sample_id(s);
        // Seeds depend only on the manifest position, so images can be
        // inverted in any order.
        let seed = ctx.cfg.seed.wrapping_add(i as u64);
        let inv = ctx.cfg.invert.resolve(seed);
        let image = load_rgb(&s.image_path)?;
        let result = invert_style(bundle.as_ref(), &image, &s.caption, &id, &inv)?;
        meta.insert("caption".into(), s.caption.clone());
        meta.insert("backbone_hash".into(), result.backbone_hash.clone());
        for v in &result.checkpoints {
            v.save(&checkpoint_path(&stage.checkpoints(), &id, v.step()), seed, &meta)?;
        }
        let log = InversionLog { image_id: &id, seed, backbone_hash: &result.backbone_hash, losses: &result.losses };
        write_json(&stage.logs().join(format!("{id}.json")), &log)?;
        let (first, last) = (result.losses.first().copied(), result.losses.last().copied());
        println!(
            "{id}: {} checkpoints, loss {} -> {}",
            result.checkpoints.len(),
            first.map_or("-".into(), |l| format!("{l:.4}")),
            last.map_or("-".into(), |l| format!("{l:.4}"))
        );
    }
    Ok(())
}

/// Latest saved step of one image's stage-1 vectors, or a specific one.
pub(crate) fn inverted_vector(ctx: &Ctx, id: &str, step: Option<usize>) -> Result<StyleVector<F>> {
    let dir = ctx.stage(StageName::Invert).checkpoints();
    let path = match step {
        Some(step) => checkpoint_path(&dir, id, step),
        None => latest_step(&dir.join(id))?.with_context(|| {
            format!("missing stage-1 vectors for {id} in {} (produced by `stylekit invert`)", dir.display())
        })?,
    };
    if !path.is_file() {
        bail!("missing stage-1 vector {} (produced by `stylekit invert`)", path.display());
    }
    Ok(StyleVector::load(&path)?)
}

fn latest_step(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    // Zero-padded step numbers sort lexically.
    files.sort();
    Ok(files.pop())
}

fn apply_epochs(ctx: &mut Ctx, name: StageName, args: &StageArgs) {
    let Some(e) = args.epochs else { return };
    let section = match name {
        StageName::PretrainEncoder => &mut ctx.cfg.pretrain_encoder,
        StageName::PretrainProjection => &mut ctx.cfg.pretrain_projection,
        StageName::Finetune => &mut ctx.cfg.finetune,
        StageName::FinetuneAblation => &mut ctx.cfg.finetune_ablation,
        _ => return,
    };
    section.epochs = Some(e);
}

fn save_log(stage: &StageDir, log: &TrainLog) -> Result<()> {
    log.write_ndjson(&stage.logs().join("steps.ndjson"))?;
    #[derive(Serialize)]
    struct Summary<'a> {
        stage: String,
        epoch_means: &'a [f64],
        frozen_hashes: &'a [stylekit::trainer::HashRecord],
        wall_time_secs: f64,
    }
    write_json(
        &stage.logs().join("summary.json"),
        &Summary {
            stage: log.stage.to_string(),
            epoch_means: &log.epoch_means,
            frozen_hashes: &log.frozen_hashes,
            wall_time_secs: log.wall_time_secs,
        },
    )?;
    if let Some(last) = log.epoch_means.last() {
        println!("{}: {} epochs, final mean loss {last:.6}", stage.name, log.epoch_means.len());
    }
    Ok(())
}

/// Per-epoch checkpoint writer for the trainers' epoch hook.
fn epoch_saver<'a>(
    stage: &'a StageDir,
    meta: &'a BTreeMap<String, String>,
) -> impl FnMut(&EpochSnapshot<'_, F>) -> stylekit::Result<()> + 'a {
    move |snap| {
        let mut meta = meta.clone();
        meta.insert("epoch".into(), snap.epoch.to_string());
        meta.insert("mean_loss".into(), format!("{:e}", snap.mean_loss));
        if let Some(enc) = snap.encoder {
            enc.save(&stage.checkpoints().join(component_file("encoder", Some(snap.epoch))), &meta)?;
        }
        if let Some(p) = snap.projection {
            p.save(&stage.checkpoints().join(component_file("projection", Some(snap.epoch))), &meta)?;
        }
        Ok(())
    }
}

pub(super) fn pretrain_encoder(mut ctx: Ctx, args: StageArgs) -> Result<()> {
    apply_epochs(&mut ctx, StageName::PretrainEncoder, &args);
    let samples = ctx.train_samples()?;
    let bundle = ctx.backbone()?;
    let mut enc = ctx.initial_encoder()?;
    let stage = ctx.stage(StageName::PretrainEncoder);
    let cfg = ctx.cfg.pretrain_encoder.resolve(Stage::EncoderPretrain, ctx.cfg.seed);
    let data = samples
        .iter()
        .map(|s| Ok((preprocess_image(&load_rgb(&s.image_path)?)?, s.tag.clone())))
        .collect::<Result<Vec<_>>>()?;
    stage.prepare(&ctx.cfg)?;
    let meta = ctx.meta(StageName::PretrainEncoder);
    let log = train_stage2a(&mut enc, bundle.as_ref(), &data, &cfg, &mut epoch_saver(&stage, &meta))?;
    enc.save(&stage.checkpoints().join(component_file("encoder", None)), &meta)?;
    save_log(&stage, &log)
}

pub(super) fn pretrain_projection(mut ctx: Ctx, args: StageArgs) -> Result<()> {
    apply_epochs(&mut ctx, StageName::PretrainProjection, &args);
    let samples = ctx.train_samples()?;
    let enc_path =
        ctx.stage(StageName::PretrainEncoder).require(&component_file("encoder", None), "stage-2a encoder")?;
    let enc = StyleEncoder::<F>::load(&enc_path)?;
    let mut data = Vec::new();
    for s in &samples {
        let target = inverted_vector(&ctx, &sample_id(s), None)?;
        data.push((preprocess_image(&load_rgb(&s.image_path)?)?, target));
    }
    let d_text = data[0].1.d_text();
    let mut p = StyleProjection::<F>::new(enc.d_enc(), d_text, ctx.cfg.seed);
    let stage = ctx.stage(StageName::PretrainProjection);
    let cfg = ctx.cfg.pretrain_projection.resolve(Stage::ProjectionPretrain, ctx.cfg.seed);
    stage.prepare(&ctx.cfg)?;
    let meta = ctx.meta(StageName::PretrainProjection);
    let log = train_stage2b(&mut p, &enc, &data, &cfg, &mut epoch_saver(&stage, &meta))?;
    p.save(&stage.checkpoints().join(component_file("projection", None)), &meta)?;
    save_log(&stage, &log)
}

pub(super) fn finetune(mut ctx: Ctx, args: StageArgs, ablation: bool) -> Result<()> {
    let name = if ablation { StageName::FinetuneAblation } else { StageName::Finetune };
    apply_epochs(&mut ctx, name, &args);
    let samples = ctx.train_samples()?;
    // Both configurations start from the stage-2a encoder; only the projected
    // one needs the stage-2b projection.
    let enc_path =
        ctx.stage(StageName::PretrainEncoder).require(&component_file("encoder", None), "stage-2a encoder")?;
    let proj_path = if ablation {
        None
    } else {
        Some(
            ctx.stage(StageName::PretrainProjection)
                .require(&component_file("projection", None), "stage-2b projection")?,
        )
    };
    let mut enc = StyleEncoder::<F>::load(&enc_path)?;
    let bundle = ctx.backbone()?;
    let data = samples
        .iter()
        .map(|s| Ok(FinetuneExample::prepare(bundle.as_ref(), &sample_id(s), &load_rgb(&s.image_path)?, &s.caption)?))
        .collect::<Result<Vec<_>>>()?;
    let stage = ctx.stage(name);
    stage.prepare(&ctx.cfg)?;
    let meta = ctx.meta(name);
    let log = match proj_path {
        Some(path) => {
            let mut p = StyleProjection::<F>::load(&path)?;
            let cfg = ctx.cfg.finetune.resolve(Stage::Finetune, ctx.cfg.seed);
            let log = train_stage3(&mut enc, &mut p, bundle.as_ref(), &data, &cfg, &mut epoch_saver(&stage, &meta))?;
            p.save(&stage.checkpoints().join(component_file("projection", None)), &meta)?;
            log
        }
        None => {
            let cfg = ctx.cfg.finetune_ablation.resolve(Stage::FinetuneAblation, ctx.cfg.seed);
            train_stage3_ablation(&mut enc, bundle.as_ref(), &data, &cfg, &mut epoch_saver(&stage, &meta))?
        }
    };
    enc.save(&stage.checkpoints().join(component_file("encoder", None)), &meta)?;
    save_log(&stage, &log)
}
