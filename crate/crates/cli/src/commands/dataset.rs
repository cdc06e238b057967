use anyhow::{bail, Result};
use stylekit::dataset::{
    build_manifest, scan_image_dir, split_dataset, Blacklist, Captioner, ChatCaptioner, RecordedCaptioner,
};
use stylekit::synth::{write_fixtures, CAPTIONS_FILE};

use super::Ctx;
use crate::config::Mode;
use crate::layout::StageName;
use crate::{BuildArgs, SynthArgs};

pub(super) fn build(mut ctx: Ctx, args: BuildArgs) -> Result<()> {
    let data = &mut ctx.cfg.data;
    let cwd = std::env::current_dir()?;
    if let Some(p) = args.images {
        data.images = Some(cwd.join(p));
    }
    if let Some(p) = args.captions {
        data.captions = Some(cwd.join(p));
    }
    if let Some(n) = args.test_size {
        data.test_size = Some(n);
    }
    let Some(images) = data.images.clone() else {
        bail!("no image directory: pass --images or set `data.images`");
    };
    if !images.is_dir() {
        bail!("image directory {} does not exist", images.display());
    }
    // Resolve the captioner before any work so missing credentials fail fast.
    let client: Box<dyn Captioner> = match ctx.cfg.mode {
        Mode::Toy => {
            let path = data.captions.clone().unwrap_or_else(|| images.join(CAPTIONS_FILE));
            Box::new(RecordedCaptioner::from_file(&path, &images)?)
        }
        Mode::Full => {
            let c = &ctx.cfg.captioner;
            Box::new(ChatCaptioner::from_env(&c.endpoint, &c.model, &c.key_env)?)
        }
    };
    let blacklist = match &data.blacklist_extension {
        Some(p) => Blacklist::with_extension_file(p)?,
        None => Blacklist::default(),
    };
    let scanned = scan_image_dir(&images)?;
    if scanned.is_empty() {
        bail!("no images under {}", images.display());
    }
    let stage = ctx.stage(StageName::BuildDataset);
    stage.prepare(&ctx.cfg)?;

    let outcome = build_manifest(&scanned, client.as_ref(), &blacklist)?;
    let tags = outcome.manifest.tags().len();
    let test_size = ctx.cfg.data.test_size.unwrap_or(tags);
    let manifest = split_dataset(&outcome.manifest, test_size, ctx.cfg.seed)?;
    let path = stage.outputs().join("manifest.ndjson");
    manifest.save(&path)?;

    println!("manifest: {} ({} samples, {} test)", path.display(), manifest.len(), test_size);
    for (tag, n) in manifest.tag_counts() {
        println!("  {tag}: {n}");
    }
    println!("rejected captions: {}", outcome.rejected.len());
    for r in &outcome.rejected {
        println!("  {}: {:?} ({})", r.image.display(), r.caption, r.words.join(", "));
    }
    Ok(())
}

pub(super) fn synth(ctx: Ctx, args: SynthArgs) -> Result<()> {
    let fixtures = write_fixtures(&args.out, args.per_style, ctx.cfg.seed, args.size)?;
    println!("wrote {} images and {} to {}", fixtures.len(), CAPTIONS_FILE, args.out.display());
    Ok(())
}
