//! Training loops for the encoder and projection stages.
//!
//! * 2a: encoder against tag text features (paired cosine loss).
//! * 2b: projection against Stage-1 vectors (MSE), encoder frozen.
//! * 3: encoder and projection jointly through the frozen generator's
//!   reconstruction loss.
//! * 3-ablation: encoder only, its feature copied into all 8 style rows.
//!
//! Each batch is processed one graph per sample on the rayon pool; gradients
//! are summed in sample order, so results do not depend on thread count.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::backbone::{require_frozen, Backbone};
use crate::error::{Error, Result};
use crate::inversion::{concat_condition, recon_loss_grad, sample_noise, Provenance, StyleVector, STYLE_TOKENS};
use crate::params::{AdamW, AdamWConfig};
use crate::prep::{preprocess_image, PreprocessedImage};
use crate::scalar::Scalar;
use crate::style_module::{check_ablation_dims, StyleEncoder, StyleProjection};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    #[serde(rename = "2a")]
    EncoderPretrain,
    #[serde(rename = "2b")]
    ProjectionPretrain,
    #[serde(rename = "3")]
    Finetune,
    #[serde(rename = "3_ablation")]
    FinetuneAblation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::EncoderPretrain => "2a",
            Stage::ProjectionPretrain => "2b",
            Stage::Finetune => "3",
            Stage::FinetuneAblation => "3_ablation",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "2a" => Ok(Stage::EncoderPretrain),
            "2b" => Ok(Stage::ProjectionPretrain),
            "3" => Ok(Stage::Finetune),
            "3_ablation" => Ok(Stage::FinetuneAblation),
            other => Err(Error::Invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_encoder: f64,
    pub lr_projection: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Worker threads for per-sample graphs; `None` uses the global pool.
    #[serde(default)]
    pub threads: Option<usize>,
}

impl TrainConfig {
    /// Published defaults for each stage.
    pub fn defaults(stage: Stage) -> Self {
        let base = Self {
            stage,
            batch_size: 32,
            epochs: 10,
            lr_encoder: 0.0,
            lr_projection: 0.0,
            adam_eps: 1e-8,
            seed: 0,
            threads: None,
        };
        match stage {
            Stage::EncoderPretrain => Self { lr_encoder: 5e-5, ..base },
            Stage::ProjectionPretrain => Self { lr_projection: 5e-5, epochs: 5, ..base },
            Stage::Finetune => Self { batch_size: 8, lr_encoder: 1e-5, lr_projection: 5e-4, ..base },
            Stage::FinetuneAblation => Self { batch_size: 8, epochs: 3, lr_encoder: 2e-6, ..base },
        }
    }

    fn check(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Invalid(format!("config is for stage {}, loop is {expected}", self.stage)));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.lr_encoder < 0.0 || self.lr_projection < 0.0 || !(self.adam_eps > 0.0) {
            return Err(Error::Invalid("learning rates must be ≥ 0 and epsilon > 0".into()));
        }
        Ok(())
    }

    fn adam(&self, lr: f64) -> AdamWConfig {
        AdamWConfig { eps: self.adam_eps, ..AdamWConfig::with_lr(lr) }
    }
}

/// One optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub stage: Stage,
    pub loss: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: f64,
}

/// Hash of a component that the stage must not modify.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashRecord {
    pub component: String,
    pub before: String,
    pub after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub stage: Stage,
    pub steps: Vec<StepRecord>,
    pub epoch_means: Vec<f64>,
    pub wall_time_secs: f64,
    pub frozen_hashes: Vec<HashRecord>,
}

impl TrainLog {
    fn new(stage: Stage) -> Self {
        Self { stage, steps: Vec::new(), epoch_means: Vec::new(), wall_time_secs: 0.0, frozen_hashes: Vec::new() }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|r| r.loss).collect()
    }

    fn record(&mut self, loss: f64) -> Result<()> {
        let step = self.steps.len() + 1;
        if !loss.is_finite() || loss < 0.0 {
            return Err(Error::NonFinite { context: format!("stage {} loss", self.stage), step });
        }
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        self.steps.push(StepRecord { step, stage: self.stage, loss, timestamp });
        Ok(())
    }

    /// Newline-delimited step records.
    pub fn write_ndjson(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for r in &self.steps {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    pub fn read_ndjson(path: &Path) -> Result<Vec<StepRecord>> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
    }
}

/// Models visible at the end of an epoch, for checkpointing.
pub struct EpochSnapshot<'a, T> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub encoder: Option<&'a StyleEncoder<T>>,
    pub projection: Option<&'a StyleProjection<T>>,
}

pub type EpochHook<'h, T> = dyn FnMut(&EpochSnapshot<'_, T>) -> Result<()> + 'h;

/// A hook that does nothing.
pub fn ignore_epochs<T>(_: &EpochSnapshot<'_, T>) -> Result<()> {
    Ok(())
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

fn run_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

type Grads<T> = Vec<Option<Tensor<T>>>;

fn add_grads<T: Scalar>(acc: &mut Grads<T>, g: Grads<T>) -> Result<()> {
    for (a, g) in acc.iter_mut().zip(g) {
        match (a.as_mut(), g) {
            (Some(a), Some(g)) => a.add_assign(&g)?,
            (None, Some(g)) => *a = Some(g),
            _ => {}
        }
    }
    Ok(())
}

fn scale_grads<T: Scalar>(g: Grads<T>, c: T) -> Grads<T> {
    g.into_iter().map(|t| t.map(|t| t.scale(c))).collect()
}

/// Per-sample result: loss plus gradients for (encoder, projection).
struct SampleGrad<T> {
    loss: T,
    enc: Grads<T>,
    proj: Grads<T>,
}

fn reduce<T: Scalar>(results: Vec<Result<SampleGrad<T>>>, n_enc: usize, n_proj: usize) -> Result<SampleGrad<T>> {
    let b = T::lit(results.len() as f64);
    let mut total = SampleGrad { loss: T::zero(), enc: vec![None; n_enc], proj: vec![None; n_proj] };
    for r in results {
        let r = r?;
        total.loss += r.loss;
        add_grads(&mut total.enc, r.enc)?;
        add_grads(&mut total.proj, r.proj)?;
    }
    let inv = T::one() / b;
    Ok(SampleGrad { loss: total.loss * inv, enc: scale_grads(total.enc, inv), proj: scale_grads(total.proj, inv) })
}

fn check_grads<T: Scalar>(g: &SampleGrad<T>, stage: Stage, step: usize) -> Result<()> {
    let finite = |gs: &Grads<T>| gs.iter().flatten().all(|t| t.all_finite());
    if !g.loss.is_finite() || !finite(&g.enc) || !finite(&g.proj) {
        return Err(Error::NonFinite { context: format!("stage {stage} gradients"), step });
    }
    Ok(())
}

fn finish_hash(log: &mut TrainLog, component: &str, before: String, after: String) -> Result<()> {
    let same = before == after;
    log.frozen_hashes.push(HashRecord { component: component.into(), before, after });
    if !same {
        return Err(Error::Precondition(format!("{component} changed during stage {}", log.stage)));
    }
    Ok(())
}

/// Stage 2a: `mean(1 − cos(E_style(I), E_text(Tag)))`, encoder only.
pub fn train_stage2a<T: Scalar>(
    enc: &mut StyleEncoder<T>,
    bundle: &dyn Backbone<T>,
    data: &[(PreprocessedImage<T>, String)],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainLog> {
    cfg.check(Stage::EncoderPretrain)?;
    require_frozen(bundle)?;
    if data.is_empty() {
        return Err(Error::Invalid("stage 2a needs at least one (image, tag) pair".into()));
    }
    let started = Instant::now();
    let text_hash = bundle.parameter_hash();
    let mut tag_feats: BTreeMap<&str, Tensor<T>> = BTreeMap::new();
    for (_, tag) in data {
        if tag.trim().is_empty() {
            return Err(Error::Invalid("empty style tag".into()));
        }
        if !tag_feats.contains_key(tag.as_str()) {
            let pooled = bundle.encode_prompt(tag)?.pooled;
            if pooled.len() != enc.d_enc() {
                return Err(Error::Shape(format!(
                    "tag features have size {}, encoder produces {}",
                    pooled.len(),
                    enc.d_enc()
                )));
            }
            tag_feats.insert(tag, pooled.into_reshape(&[1, enc.d_enc()])?);
        }
    }
    let patches: Vec<Tensor<T>> = data.iter().map(|(img, _)| enc.patchify(img)).collect::<Result<_>>()?;
    let mut opt = AdamW::new(enc.params(), cfg.adam(cfg.lr_encoder));
    let mut log = TrainLog::new(cfg.stage);
    let n_enc = enc.params().len();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let model = &*enc;
            let results = run_pool(cfg.threads, || {
                batch
                    .par_iter()
                    .map(|&i| {
                        let mut g = Graph::new();
                        let f = model.forward_patches(&mut g, &patches[i], true)?;
                        let target = g.constant(tag_feats[data[i].1.as_str()].clone());
                        let loss = g.cosine_distance(f, target)?;
                        let grads = g.backward(loss)?;
                        Ok(SampleGrad {
                            loss: g.value(loss).data()[0],
                            enc: grads.for_store(model.params()),
                            proj: vec![],
                        })
                    })
                    .collect::<Vec<_>>()
            })?;
            let total = reduce(results, n_enc, 0)?;
            check_grads(&total, cfg.stage, log.steps.len() + 1)?;
            log.record(total.loss.as_f64())?;
            opt.step(enc.params_mut(), &total.enc)?;
            sum += total.loss.as_f64();
            count += 1;
        }
        let mean = sum / count as f64;
        log.epoch_means.push(mean);
        hook(&EpochSnapshot { epoch: epoch + 1, mean_loss: mean, encoder: Some(enc), projection: None })?;
    }
    finish_hash(&mut log, "text encoder", text_hash, bundle.parameter_hash())?;
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Stage 2b: `mean((P(E_style(I)) − V_inverted)²)`, projection only.
pub fn train_stage2b<T: Scalar>(
    p: &mut StyleProjection<T>,
    enc: &StyleEncoder<T>,
    data: &[(PreprocessedImage<T>, StyleVector<T>)],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainLog> {
    cfg.check(Stage::ProjectionPretrain)?;
    if data.is_empty() {
        return Err(Error::Invalid("stage 2b needs at least one (image, vector) pair".into()));
    }
    for (_, v) in data {
        if v.provenance() != Provenance::Inverted {
            return Err(Error::Precondition(format!(
                "stage 2b targets must be inverted vectors, got {} for {:?}",
                v.provenance(),
                v.source_image()
            )));
        }
        if v.d_text() != p.d_text() {
            return Err(Error::Shape(format!("target width {} vs projection {}", v.d_text(), p.d_text())));
        }
    }
    let started = Instant::now();
    let enc_hash = enc.parameter_hash();
    // The encoder is frozen, so features are computed once.
    let feats: Vec<Tensor<T>> = data
        .par_iter()
        .map(|(img, _)| crate::style_module::extract_style_feature(enc, img)?.into_reshape(&[1, enc.d_enc()]))
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(p.params(), cfg.adam(cfg.lr_projection));
    let mut log = TrainLog::new(cfg.stage);
    let n_proj = p.params().len();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            let proj = &*p;
            let results: Vec<Result<SampleGrad<T>>> = batch
                .iter()
                .map(|&i| {
                    let mut g = Graph::new();
                    let f = g.constant(feats[i].clone());
                    let pred = proj.forward(&mut g, f, true)?;
                    let target = g.constant(data[i].1.tokens().clone());
                    let loss = g.mse(pred, target)?;
                    let grads = g.backward(loss)?;
                    Ok(SampleGrad { loss: g.value(loss).data()[0], enc: vec![], proj: grads.for_store(proj.params()) })
                })
                .collect();
            let total = reduce(results, 0, n_proj)?;
            check_grads(&total, cfg.stage, log.steps.len() + 1)?;
            log.record(total.loss.as_f64())?;
            opt.step(p.params_mut(), &total.proj)?;
            sum += total.loss.as_f64();
            count += 1;
        }
        let mean = sum / count as f64;
        log.epoch_means.push(mean);
        hook(&EpochSnapshot { epoch: epoch + 1, mean_loss: mean, encoder: None, projection: Some(p) })?;
    }
    finish_hash(&mut log, "style encoder", enc_hash, enc.parameter_hash())?;
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// A prepared Stage-3 example: encoder input, clean latent and the encoded
/// (suffixed) caption.
#[derive(Clone, Debug)]
pub struct FinetuneExample<T> {
    pub id: String,
    pub pixels: PreprocessedImage<T>,
    pub latent: Tensor<T>,
    pub text: Tensor<T>,
}

impl<T: Scalar> FinetuneExample<T> {
    pub fn prepare(bundle: &dyn Backbone<T>, id: &str, image: &DynamicImage, caption: &str) -> Result<Self> {
        if !caption.ends_with(crate::dataset::STYLE_SUFFIX) {
            return Err(Error::Precondition(format!("caption must be suffixed: {caption:?}")));
        }
        Ok(Self {
            id: id.to_string(),
            pixels: preprocess_image(image)?,
            latent: bundle.encode_image(image)?,
            text: bundle.encode_prompt(caption)?.hidden,
        })
    }
}

/// How Stage 3 turns the encoder feature into style tokens.
#[derive(Clone, Copy)]
enum Head<'a, T> {
    Projected(&'a StyleProjection<T>),
    Replicated,
}

struct Draw<T> {
    index: usize,
    t: usize,
    eps: Tensor<T>,
}

fn finetune_sample<T: Scalar>(
    bundle: &dyn Backbone<T>,
    enc: &StyleEncoder<T>,
    head: Head<'_, T>,
    patches: &Tensor<T>,
    ex: &FinetuneExample<T>,
    draw: &Draw<T>,
    train: bool,
) -> Result<SampleGrad<T>> {
    let mut g = Graph::new();
    let f = enc.forward_patches(&mut g, patches, train)?;
    let style = match head {
        Head::Projected(p) => p.forward(&mut g, f, train)?,
        Head::Replicated => g.repeat_rows(f, STYLE_TOKENS)?,
    };
    let cond = concat_condition(g.value(style), &ex.text)?;
    if !train {
        let loss = crate::inversion::recon_loss(bundle, &ex.latent, &cond, draw.t, &draw.eps)?;
        return Ok(SampleGrad { loss, enc: vec![], proj: vec![] });
    }
    let (loss, dcond) = recon_loss_grad(bundle, &ex.latent, &cond, draw.t, &draw.eps)?;
    let seed = dcond.slice_rows(0, STYLE_TOKENS)?;
    let grads = g.backward_seeded(&[(style, seed)])?;
    let proj = match head {
        Head::Projected(p) => grads.for_store(p.params()),
        Head::Replicated => vec![],
    };
    Ok(SampleGrad { loss, enc: grads.for_store(enc.params()), proj })
}

fn finetune_loop<T: Scalar>(
    enc: &mut StyleEncoder<T>,
    mut proj: Option<&mut StyleProjection<T>>,
    bundle: &dyn Backbone<T>,
    data: &[FinetuneExample<T>],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainLog> {
    require_frozen(bundle)?;
    if data.is_empty() {
        return Err(Error::Invalid(format!("stage {} needs at least one example", cfg.stage)));
    }
    for ex in data {
        bundle.check_latent(&ex.latent)?;
    }
    let started = Instant::now();
    let backbone_hash = bundle.parameter_hash();
    let patches: Vec<Tensor<T>> = data.iter().map(|ex| enc.patchify(&ex.pixels)).collect::<Result<_>>()?;
    let mut opt_enc = AdamW::new(enc.params(), cfg.adam(cfg.lr_encoder));
    let mut opt_proj = proj.as_ref().map(|p| AdamW::new(p.params(), cfg.adam(cfg.lr_projection)));
    let mut log = TrainLog::new(cfg.stage);
    let (n_enc, n_proj) = (enc.params().len(), proj.as_ref().map_or(0, |p| p.params().len()));
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(0);
    let shape = bundle.latent_shape();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(data.len(), cfg.seed, epoch);
        let mut sum = 0.0;
        let mut count = 0;
        for batch in order.chunks(cfg.batch_size) {
            // Draw every (t, ε) up front so parallel evaluation cannot
            // reorder the random stream.
            let draws: Vec<Draw<T>> = batch
                .iter()
                .map(|&index| {
                    let (t, eps) = sample_noise(&mut noise_rng, bundle.schedule().train_steps(), &shape);
                    Draw { index, t, eps }
                })
                .collect();
            let model = &*enc;
            let head = match proj.as_deref() {
                Some(p) => Head::Projected(p),
                None => Head::Replicated,
            };
            let results = run_pool(cfg.threads, || {
                draws
                    .par_iter()
                    .map(|d| finetune_sample(bundle, model, head, &patches[d.index], &data[d.index], d, true))
                    .collect::<Vec<_>>()
            })?;
            let total = reduce(results, n_enc, n_proj)?;
            check_grads(&total, cfg.stage, log.steps.len() + 1)?;
            log.record(total.loss.as_f64())?;
            opt_enc.step(enc.params_mut(), &total.enc)?;
            if let (Some(p), Some(opt)) = (proj.as_deref_mut(), opt_proj.as_mut()) {
                opt.step(p.params_mut(), &total.proj)?;
            }
            sum += total.loss.as_f64();
            count += 1;
        }
        let mean = sum / count as f64;
        log.epoch_means.push(mean);
        hook(&EpochSnapshot { epoch: epoch + 1, mean_loss: mean, encoder: Some(enc), projection: proj.as_deref() })?;
    }
    finish_hash(&mut log, "backbone", backbone_hash, bundle.parameter_hash())?;
    log.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(log)
}

/// Stage 3: `Cond' = [P(E_style(I)); E_text(C)]`, encoder and projection
/// updated with their own learning rates.
pub fn train_stage3<T: Scalar>(
    enc: &mut StyleEncoder<T>,
    p: &mut StyleProjection<T>,
    bundle: &dyn Backbone<T>,
    data: &[FinetuneExample<T>],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainLog> {
    cfg.check(Stage::Finetune)?;
    if p.d_enc() != enc.d_enc() || p.d_text() != bundle.d_text() {
        return Err(Error::Shape(format!(
            "projection {}→8×{} does not connect encoder d_enc={} to d_text={}",
            p.d_enc(),
            p.d_text(),
            enc.d_enc(),
            bundle.d_text()
        )));
    }
    finetune_loop(enc, Some(p), bundle, data, cfg, hook)
}

/// Stage-3 ablation: no projection, the feature replicated into 8 rows.
pub fn train_stage3_ablation<T: Scalar>(
    enc: &mut StyleEncoder<T>,
    bundle: &dyn Backbone<T>,
    data: &[FinetuneExample<T>],
    cfg: &TrainConfig,
    hook: &mut EpochHook<'_, T>,
) -> Result<TrainLog> {
    cfg.check(Stage::FinetuneAblation)?;
    check_ablation_dims(enc.d_enc(), bundle.d_text())?;
    finetune_loop(enc, None, bundle, data, cfg, hook)
}

/// Mean reconstruction loss over `draws` fixed `(t, ε)` samples per example,
/// with no parameter updates. Identical seeds give identical draws, so two
/// configurations can be compared on the same noise.
pub fn finetune_eval_loss<T: Scalar>(
    bundle: &dyn Backbone<T>,
    enc: &StyleEncoder<T>,
    p: Option<&StyleProjection<T>>,
    data: &[FinetuneExample<T>],
    seed: u64,
    draws: usize,
) -> Result<f64> {
    if data.is_empty() || draws == 0 {
        return Err(Error::Invalid("evaluation needs examples and draws".into()));
    }
    if p.is_none() {
        check_ablation_dims(enc.d_enc(), bundle.d_text())?;
    }
    let head = match p {
        Some(p) => Head::Projected(p),
        None => Head::Replicated,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let shape = bundle.latent_shape();
    let mut jobs = Vec::with_capacity(data.len() * draws);
    for index in 0..data.len() {
        for _ in 0..draws {
            let (t, eps) = sample_noise(&mut rng, bundle.schedule().train_steps(), &shape);
            jobs.push(Draw { index, t, eps });
        }
    }
    let patches: Vec<Tensor<T>> = data.iter().map(|ex| enc.patchify(&ex.pixels)).collect::<Result<_>>()?;
    let losses = jobs
        .par_iter()
        .map(|d| {
            finetune_sample(bundle, enc, head, &patches[d.index], &data[d.index], d, false).map(|s| s.loss.as_f64())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
