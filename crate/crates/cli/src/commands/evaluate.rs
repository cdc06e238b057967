use std::collections::BTreeMap;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use stylekit::dataset::{Split, StyleSample};
use stylekit::eval::{
    clustering_report, evaluate_checkpoint, sample_id, write_summary, ConvStack, EvalReport, EvalSettings,
    ReportProvenance, VectorSource,
};
use stylekit::prep::{load_rgb, preprocess_image};
use stylekit::style_module::{extract_style_feature, EncoderConfig, StyleEncoder};
use stylekit::Scalar;

use super::generate::load_models;
use super::train::inverted_vector;
use super::{write_json, Ctx, F};
use crate::config::{Mode, Source};
use crate::layout::{component_file, StageName};
use crate::EvaluateArgs;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Selection {
    Final,
    Epoch(usize),
    Step(usize),
}

fn parse_selection(s: &str) -> Result<Selection> {
    let num = |rest: &str| rest.parse::<usize>().with_context(|| format!("bad checkpoint selection {s:?}"));
    match s {
        "final" => Ok(Selection::Final),
        _ if s.starts_with("epoch-") => Ok(Selection::Epoch(num(&s[6..])?)),
        _ if s.starts_with("step-") => Ok(Selection::Step(num(&s[5..])?)),
        _ => bail!("checkpoint selection must be `final`, `epoch-N` or `step-N`, got {s:?}"),
    }
}

#[derive(Serialize)]
struct EvalSidecar {
    referee: PathBuf,
    checkpoint: String,
    reports: BTreeMap<String, PathBuf>,
    summary: PathBuf,
    plots: Vec<PathBuf>,
}

pub(super) fn evaluate(mut ctx: Ctx, args: EvaluateArgs) -> Result<()> {
    let e = &mut ctx.cfg.evaluate;
    if !args.source.is_empty() {
        e.sources = args.source;
    }
    if let Some(c) = args.checkpoint {
        e.checkpoint = c;
    }
    if let Some(s) = args.steps {
        e.steps = s;
    }
    e.plots |= args.plots;
    e.sources.sort();
    e.sources.dedup();
    if e.sources.is_empty() {
        bail!("no vector source selected");
    }
    let selection = parse_selection(&e.checkpoint)?;

    let manifest = ctx.manifest()?;
    let test: Vec<StyleSample> = manifest.split(Split::Test).cloned().collect();
    if test.is_empty() {
        bail!("empty test split in {}", ctx.manifest_path().display());
    }
    // Scores always use the stage-2a encoder, so every source is judged by
    // the same fixed referee.
    let referee_path = ctx
        .stage(StageName::PretrainEncoder)
        .require(&component_file("encoder", None), "stage-2a encoder (referee)")?;
    let referee = StyleEncoder::<F>::load(&referee_path)?;
    let tower = match ctx.cfg.mode {
        Mode::Toy => referee.clone(),
        Mode::Full => {
            let clip =
                ctx.cfg.backbone.clip.as_ref().context("full mode needs `backbone.clip` for image-text scores")?;
            StyleEncoder::from_clip_weights(EncoderConfig::clip_vit_l14(), clip)?
        }
    };
    let bundle = ctx.backbone()?;
    let stage = ctx.stage(StageName::Evaluate);
    stage.prepare(&ctx.cfg)?;

    let e = &ctx.cfg.evaluate;
    let mut reports: Vec<(Source, EvalReport)> = Vec::new();
    let mut report_paths = BTreeMap::new();
    for &source in &e.sources {
        let dir = stage.outputs().join(source.name());
        let settings = EvalSettings {
            seed: ctx.cfg.seed,
            steps: e.steps,
            guidance: e.guidance,
            output_dir: Some(dir.join("reconstructions")),
        };
        let mut provenance = ReportProvenance {
            vector_source: source.name().into(),
            stage: String::new(),
            checkpoint: e.checkpoint.clone(),
            referee: referee_path.display().to_string(),
        };
        let report = if source == Source::Inverted {
            let step = match selection {
                Selection::Final => None,
                Selection::Step(s) => Some(s),
                Selection::Epoch(_) => bail!("stage-1 vectors are selected with `step-N`, not epochs"),
            };
            let vectors = test
                .iter()
                .map(|s| Ok((sample_id(s), inverted_vector(&ctx, &sample_id(s), step)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            provenance.stage = StageName::Invert.to_string();
            evaluate_checkpoint(
                bundle.as_ref(),
                &referee,
                &tower,
                &VectorSource::Stored(&vectors),
                &test,
                &settings,
                provenance,
            )?
        } else {
            let epoch = match selection {
                Selection::Final => None,
                Selection::Epoch(n) => Some(n),
                Selection::Step(_) => bail!("trained checkpoints are selected with `epoch-N`, not steps"),
            };
            let m = load_models(&ctx, source, epoch)?;
            provenance.stage = m.paths.values().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ");
            let vs = VectorSource::Predicted { enc: &m.enc, projection: m.projection.as_ref(), mode: m.mode };
            evaluate_checkpoint(bundle.as_ref(), &referee, &tower, &vs, &test, &settings, provenance)?
        };
        let csv = dir.join("report.csv");
        report.write_csv(&csv)?;
        write_json(&dir.join("report.json"), &report)?;
        println!(
            "{}: {} samples, style {:.4}, image-text {:.4}",
            source.name(),
            report.records.len(),
            report.mean_style_score,
            report.mean_image_text_score
        );
        report_paths.insert(source.name().to_string(), csv);
        reports.push((source, report));
    }
    let summary = stage.outputs().join("summary.csv");
    write_summary(&summary, &reports.iter().map(|(_, r)| r).collect::<Vec<_>>())?;

    let plots =
        if e.plots { write_plots(&ctx, manifest.samples(), &referee, &stage.outputs().join("plots"))? } else { vec![] };
    let sidecar = EvalSidecar {
        referee: referee_path,
        checkpoint: e.checkpoint.clone(),
        reports: report_paths,
        summary: summary.clone(),
        plots,
    };
    write_json(&stage.outputs().join("evaluate.json"), &sidecar)?;
    println!("summary: {}", summary.display());
    Ok(())
}

#[derive(Serialize)]
struct PlotRecord {
    features: String,
    silhouette: Option<f64>,
    perplexity: f64,
    seed: u64,
}

/// t-SNE plots and silhouettes for the untrained encoder, the referee, every
/// available stage-3 encoder and the Gram baseline, over the whole manifest.
fn write_plots(
    ctx: &Ctx,
    samples: &[StyleSample],
    referee: &StyleEncoder<F>,
    dir: &std::path::Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let pixels =
        samples.iter().map(|s| Ok(preprocess_image::<F>(&load_rgb(&s.image_path)?)?)).collect::<Result<Vec<_>>>()?;
    let labels: Vec<String> = samples.iter().map(|s| s.tag.clone()).collect();
    let encode = |enc: &StyleEncoder<F>| -> Result<Vec<Vec<f64>>> {
        pixels.iter().map(|p| Ok(extract_style_feature(enc, p)?.data().iter().map(|v| v.as_f64()).collect())).collect()
    };
    let mut sets: Vec<(String, Vec<Vec<f64>>)> = vec![
        ("untrained-encoder".into(), encode(&ctx.initial_encoder()?)?),
        ("pretrained-encoder".into(), encode(referee)?),
    ];
    for (name, stage) in [("finetuned-encoder", StageName::Finetune), ("ablation-encoder", StageName::FinetuneAblation)]
    {
        let path = ctx.stage(stage).checkpoints().join(component_file("encoder", None));
        if path.is_file() {
            sets.push((name.into(), encode(&StyleEncoder::load(&path)?)?));
        }
    }
    let gram: Option<ConvStack<F>> = match ctx.cfg.mode {
        Mode::Toy => Some(ConvStack::toy(ctx.cfg.seed)),
        Mode::Full => match &ctx.cfg.backbone.vgg19 {
            Some(p) => Some(ConvStack::vgg19(p, &ctx.cfg.evaluate.gram_layers)?),
            None => None,
        },
    };
    if let Some(stack) = gram {
        let feats = pixels.iter().map(|p| Ok(stack.descriptor(p)?)).collect::<Result<Vec<_>>>()?;
        sets.push(("gram-baseline".into(), feats));
    }
    let mut written = Vec::new();
    let mut records = Vec::new();
    for (name, feats) in sets {
        let report = clustering_report(&feats, &labels, ctx.cfg.seed)?;
        let png = dir.join(format!("{name}.png"));
        report.render(512).save(&png)?;
        println!("{name}: silhouette {}", report.silhouette.map_or("undefined".into(), |s| format!("{s:.4}")));
        records.push(PlotRecord {
            features: name,
            silhouette: report.silhouette,
            perplexity: report.perplexity,
            seed: report.seed,
        });
        written.push(png);
    }
    let json = dir.join("clustering.json");
    write_json(&json, &records)?;
    written.push(json);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selections() {
        assert_eq!(parse_selection("final").unwrap(), Selection::Final);
        assert_eq!(parse_selection("epoch-3").unwrap(), Selection::Epoch(3));
        assert_eq!(parse_selection("step-250").unwrap(), Selection::Step(250));
        assert!(parse_selection("latest").is_err());
        assert!(parse_selection("epoch-x").is_err());
    }
}
