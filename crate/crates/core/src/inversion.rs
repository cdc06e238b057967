//! Stage 1: per-image textual inversion of an 8-token style vector against
//! the frozen generator's reconstruction loss.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use image::DynamicImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{add_noise, require_frozen, Backbone};
use crate::checkpoint;
use crate::dataset::STYLE_SUFFIX;
use crate::error::{Error, Result};
use crate::params::{normal_tensor, AdamW, AdamWConfig, ParamStore};
use crate::prep::CONTEXT_LENGTH;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Number of style tokens prepended to the content embeddings.
pub const STYLE_TOKENS: usize = 8;
/// Standard deviation of the style-vector initialization.
pub const INIT_STD: f64 = 0.02;

const TOKENS_KEY: &str = "style_tokens";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Inverted,
    Predicted,
    AblationReplicated,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Inverted => "inverted",
            Provenance::Predicted => "predicted",
            Provenance::AblationReplicated => "ablation_replicated",
        })
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inverted" => Ok(Provenance::Inverted),
            "predicted" => Ok(Provenance::Predicted),
            "ablation_replicated" => Ok(Provenance::AblationReplicated),
            other => Err(Error::Invalid(format!("unknown provenance {other:?}"))),
        }
    }
}

/// An `8 × d_text` block of style tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleVector<T> {
    tokens: Tensor<T>,
    provenance: Provenance,
    source_image: String,
    step: usize,
}

impl<T: Scalar> StyleVector<T> {
    pub fn new(
        tokens: Tensor<T>,
        provenance: Provenance,
        source_image: impl Into<String>,
        step: usize,
    ) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() != STYLE_TOKENS {
            return Err(Error::Shape(format!(
                "style vector must be [{STYLE_TOKENS}, d_text], got {:?}",
                tokens.shape()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::Invalid("style vector has non-finite entries".into()));
        }
        Ok(Self { tokens, provenance, source_image: source_image.into(), step })
    }

    pub fn tokens(&self) -> &Tensor<T> {
        &self.tokens
    }

    pub fn d_text(&self) -> usize {
        self.tokens.cols()
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn source_image(&self) -> &str {
        &self.source_image
    }

    pub fn step(&self) -> usize {
        self.step
    }

    /// Writes the tokens plus seed/step/image metadata.
    pub fn save(&self, path: &Path, seed: u64, extra: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = extra.clone();
        meta.insert("seed".into(), seed.to_string());
        meta.insert("step".into(), self.step.to_string());
        meta.insert("image_id".into(), self.source_image.clone());
        meta.insert("provenance".into(), self.provenance.to_string());
        let tensors = BTreeMap::from([(TOKENS_KEY.to_string(), &self.tokens)]);
        checkpoint::save(path, &tensors, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        let step = ck.meta("step")?.parse().map_err(|_| Error::Checkpoint(format!("{}: bad step", path.display())))?;
        Self::new(ck.tensor(TOKENS_KEY)?.clone(), ck.meta("provenance")?.parse()?, ck.meta("image_id")?, step)
    }
}

/// `[V; E_text(C)]`: style rows first, then the text-encoder rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence<T> {
    embeddings: Tensor<T>,
}

impl<T: Scalar> ConditioningSequence<T> {
    pub fn embeddings(&self) -> &Tensor<T> {
        &self.embeddings
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn style_rows(&self) -> Tensor<T> {
        self.embeddings.slice_rows(0, STYLE_TOKENS).expect("sequence has style rows")
    }

    pub fn text_rows(&self) -> Tensor<T> {
        self.embeddings.slice_rows(STYLE_TOKENS, self.len() - STYLE_TOKENS).expect("sequence has text rows")
    }
}

/// Draws `N(0, 0.02²)` tokens; the same seed always gives the same vector.
pub fn init_style_vector<T: Scalar>(seed: u64, d_text: usize) -> StyleVector<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens = normal_tensor(&mut rng, &[STYLE_TOKENS, d_text], INIT_STD);
    StyleVector { tokens, provenance: Provenance::Inverted, source_image: String::new(), step: 0 }
}

pub fn build_condition<T: Scalar>(v: &StyleVector<T>, text_emb: &Tensor<T>) -> Result<ConditioningSequence<T>> {
    concat_condition(v.tokens(), text_emb)
}

/// [`build_condition`] on bare arrays.
pub fn concat_condition<T: Scalar>(style: &Tensor<T>, text_emb: &Tensor<T>) -> Result<ConditioningSequence<T>> {
    if text_emb.shape().len() != 2 || text_emb.rows() != CONTEXT_LENGTH {
        return Err(Error::Shape(format!(
            "text embedding must be [{CONTEXT_LENGTH}, d_text], got {:?}",
            text_emb.shape()
        )));
    }
    if style.shape() != [STYLE_TOKENS, text_emb.cols()] {
        return Err(Error::Shape(format!(
            "style tokens {:?} do not match text width {}",
            style.shape(),
            text_emb.cols()
        )));
    }
    Ok(ConditioningSequence { embeddings: Tensor::concat_rows(&[style, text_emb])? })
}

/// `mean((ε − ε_θ(add_noise(z0, t, ε), t, cond))²)`.
pub fn recon_loss<T: Scalar>(
    bundle: &dyn Backbone<T>,
    z0: &Tensor<T>,
    cond: &ConditioningSequence<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<T> {
    let z_t = add_noise(bundle.schedule(), z0, t, eps)?;
    let pred = bundle.predict_noise(&z_t, t, cond.embeddings())?;
    let diff = pred.sub(eps)?;
    // Accumulate in f64: single-precision sums over the whole latent are
    // noisy enough to swamp finite-difference probes.
    let sse: f64 = diff.data().iter().map(|&d| d.as_f64() * d.as_f64()).sum();
    Ok(T::lit(sse / diff.len() as f64))
}

/// [`recon_loss`] together with its gradient with respect to every row of the
/// conditioning sequence.
pub fn recon_loss_grad<T: Scalar>(
    bundle: &dyn Backbone<T>,
    z0: &Tensor<T>,
    cond: &ConditioningSequence<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    bundle.check_latent(eps)?;
    let z_t = add_noise(bundle.schedule(), z0, t, eps)?;
    bundle.noise_mse_grad(&z_t, t, cond.embeddings(), eps)
}

/// Gradient of [`recon_loss`] with respect to the style tokens only.
pub fn style_gradient<T: Scalar>(
    bundle: &dyn Backbone<T>,
    z0: &Tensor<T>,
    style: &Tensor<T>,
    text_emb: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<(T, Tensor<T>)> {
    let cond = concat_condition(style, text_emb)?;
    let (loss, grad) = recon_loss_grad(bundle, z0, &cond, t, eps)?;
    Ok((loss, grad.slice_rows(0, STYLE_TOKENS)?))
}

/// One training sample for the noise-prediction objective: a random
/// timestep in `[0, T)` and a standard-normal noise array.
pub fn sample_noise<T: Scalar, R: Rng>(rng: &mut R, train_steps: usize, latent_shape: &[usize]) -> (usize, Tensor<T>) {
    let t = rng.gen_range(0..train_steps);
    let eps = Tensor::from_fn(latent_shape, |_| T::lit(rng.sample::<f64, _>(StandardNormal)));
    (t, eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f64,
    pub checkpoint_every: usize,
    pub adam_eps: f64,
    pub seed: u64,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self { steps: 250, lr: 5e-4, checkpoint_every: 50, adam_eps: 1e-8, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult<T> {
    /// Snapshots at every multiple of `checkpoint_every`, or just the initial
    /// vector when no step runs.
    pub checkpoints: Vec<StyleVector<T>>,
    /// Loss before each update.
    pub losses: Vec<f64>,
    pub backbone_hash: String,
}

/// Optimizes a fresh style vector so the frozen generator reconstructs
/// `image` from `[V; E_text(caption)]`.
pub fn invert_style<T: Scalar>(
    bundle: &dyn Backbone<T>,
    image: &DynamicImage,
    caption: &str,
    image_id: &str,
    cfg: &InversionConfig,
) -> Result<InversionResult<T>> {
    let z0 = bundle.encode_image(image)?;
    invert_latent(bundle, &z0, caption, image_id, cfg)
}

/// [`invert_style`] on an already-encoded latent.
pub fn invert_latent<T: Scalar>(
    bundle: &dyn Backbone<T>,
    z0: &Tensor<T>,
    caption: &str,
    image_id: &str,
    cfg: &InversionConfig,
) -> Result<InversionResult<T>> {
    require_frozen(bundle)?;
    if !caption.ends_with(STYLE_SUFFIX) {
        return Err(Error::Precondition(format!("caption must end with {STYLE_SUFFIX:?}: {caption:?}")));
    }
    if cfg.checkpoint_every == 0 {
        return Err(Error::Invalid("checkpoint interval must be positive".into()));
    }
    bundle.check_latent(z0)?;
    let hash_before = bundle.parameter_hash();
    let text = bundle.encode_prompt(caption)?.hidden;

    let init = init_style_vector::<T>(cfg.seed, bundle.d_text());
    let mut store = ParamStore::new();
    let idx = store.insert(TOKENS_KEY, init.tokens);
    let mut opt = AdamW::new(&store, AdamWConfig { eps: cfg.adam_eps, ..AdamWConfig::with_lr(cfg.lr) });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let snapshot = |store: &ParamStore<T>, step| StyleVector {
        tokens: store.value(idx).clone(),
        provenance: Provenance::Inverted,
        source_image: image_id.to_string(),
        step,
    };
    let mut checkpoints = Vec::new();
    if cfg.steps == 0 {
        checkpoints.push(snapshot(&store, 0));
    }
    let mut losses = Vec::with_capacity(cfg.steps);
    let shape = bundle.latent_shape();
    for step in 1..=cfg.steps {
        let (t, eps) = sample_noise::<T, _>(&mut rng, bundle.schedule().train_steps(), &shape);
        let (loss, grad) = style_gradient(bundle, z0, store.value(idx), &text, t, &eps)?;
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFinite { context: format!("stage-1 loss for image {image_id:?}"), step });
        }
        losses.push(loss.as_f64());
        opt.step(&mut store, &[Some(grad)])?;
        if step % cfg.checkpoint_every == 0 {
            checkpoints.push(snapshot(&store, step));
        }
    }
    let backbone_hash = bundle.parameter_hash();
    if backbone_hash != hash_before {
        return Err(Error::Precondition("backbone parameters changed during inversion".into()));
    }
    Ok(InversionResult { checkpoints, losses, backbone_hash })
}

/// Conventional checkpoint path for one image and step.
pub fn checkpoint_path(dir: &Path, image_id: &str, step: usize) -> std::path::PathBuf {
    dir.join(image_id).join(format!("step-{step:06}.safetensors"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::make_toy_backbone;

    #[test]
    fn init_is_deterministic_with_target_spread() {
        let a = init_style_vector::<f64>(11, 768);
        assert_eq!(a.tokens().shape(), &[8, 768]);
        assert_eq!(a, init_style_vector::<f64>(11, 768));
        let n = a.tokens().len() as f64;
        let mean = a.tokens().sum() / n;
        let var = a.tokens().data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((0.018..=0.022).contains(&var.sqrt()), "{}", var.sqrt());
        assert!(mean.abs() < 4.0 * 0.02 / n.sqrt());
    }

    #[test]
    fn condition_is_style_then_text() {
        let v = StyleVector::new(Tensor::full(&[8, 4], 1.0f32), Provenance::Inverted, "x", 0).unwrap();
        let text = Tensor::from_fn(&[77, 4], |i| i as f32);
        let c = build_condition(&v, &text).unwrap();
        assert_eq!(c.embeddings().shape(), &[85, 4]);
        assert_eq!(c.style_rows(), *v.tokens());
        assert_eq!(c.text_rows(), text);
        assert!(build_condition(&v, &Tensor::<f32>::zeros(&[77, 5])).is_err());
        assert!(build_condition(&v, &Tensor::<f32>::zeros(&[70, 4])).is_err());
        let z = build_condition(
            &StyleVector::new(Tensor::<f32>::zeros(&[8, 4]), Provenance::Inverted, "", 0).unwrap(),
            &Tensor::zeros(&[77, 4]),
        )
        .unwrap();
        assert_eq!(z.embeddings().max_abs(), 0.0);
    }

    #[test]
    fn style_vector_rejects_bad_shapes_and_values() {
        assert!(StyleVector::new(Tensor::<f32>::zeros(&[7, 4]), Provenance::Inverted, "", 0).is_err());
        let mut t = Tensor::zeros(&[8, 4]);
        t.data_mut()[3] = f32::NAN;
        assert!(StyleVector::new(t, Provenance::Inverted, "", 0).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v =
            StyleVector::new(Tensor::from_fn(&[8, 3], |i| i as f64 * 0.1), Provenance::Inverted, "img7", 150).unwrap();
        let path = checkpoint_path(dir.path(), "img7", 150);
        v.save(&path, 42, &BTreeMap::new()).unwrap();
        assert!(path.ends_with("img7/step-000150.safetensors"));
        let back = StyleVector::<f64>::load(&path).unwrap();
        assert_eq!(back, v);
        let ck = checkpoint::load::<f64>(&path).unwrap();
        assert_eq!(ck.meta("seed").unwrap(), "42");
    }

    #[test]
    fn zero_steps_returns_initial_vector() {
        let bb = make_toy_backbone::<f32>(0);
        let z0 = Tensor::zeros(&[4, 8, 8]);
        let cfg = InversionConfig { steps: 0, ..Default::default() };
        let r = invert_latent(&bb, &z0, "a cat in the style of [*].", "a", &cfg).unwrap();
        assert_eq!(r.checkpoints.len(), 1);
        assert_eq!(r.checkpoints[0].tokens(), init_style_vector::<f32>(0, 32).tokens());
        assert!(r.losses.is_empty());
    }

    #[test]
    fn unsuffixed_caption_and_unfrozen_backbone_are_rejected() {
        let mut bb = make_toy_backbone::<f32>(0);
        let z0 = Tensor::zeros(&[4, 8, 8]);
        let cfg = InversionConfig { steps: 1, ..Default::default() };
        assert!(matches!(invert_latent(&bb, &z0, "a cat", "a", &cfg), Err(Error::Precondition(_))));
        bb.set_frozen(false);
        assert!(matches!(
            invert_latent(&bb, &z0, "a cat in the style of [*].", "a", &cfg),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn recon_loss_constant_offset_and_perfect_prediction() {
        struct Offset(crate::backbone::ToyBackbone<f64>, f64);
        impl Backbone<f64> for Offset {
            fn kind(&self) -> crate::backbone::BackboneKind {
                self.0.kind()
            }
            fn d_text(&self) -> usize {
                self.0.d_text()
            }
            fn latent_shape(&self) -> [usize; 3] {
                self.0.latent_shape()
            }
            fn schedule(&self) -> &crate::backbone::NoiseSchedule<f64> {
                self.0.schedule()
            }
            fn tokenizer(&self) -> &dyn crate::prep::Tokenizer {
                self.0.tokenizer()
            }
            fn encode_text(&self, t: &crate::prep::TokenSequence) -> Result<crate::backbone::TextEncoding<f64>> {
                self.0.encode_text(t)
            }
            fn encode_image(&self, i: &DynamicImage) -> Result<Tensor<f64>> {
                self.0.encode_image(i)
            }
            fn decode_latent(&self, l: &Tensor<f64>) -> Result<image::RgbImage> {
                self.0.decode_latent(l)
            }
            // Recovers the noise exactly from z_t given z0 = 0, then offsets it.
            fn predict_noise(&self, z_t: &Tensor<f64>, t: usize, _: &Tensor<f64>) -> Result<Tensor<f64>> {
                let a = self.schedule().alpha_bar(t)?;
                Ok(z_t.map(|v| v / (1.0 - a).sqrt() + self.1))
            }
            fn predict_noise_vjp(
                &self,
                z_t: &Tensor<f64>,
                t: usize,
                c: &Tensor<f64>,
                _: &Tensor<f64>,
            ) -> Result<(Tensor<f64>, Tensor<f64>)> {
                Ok((self.predict_noise(z_t, t, c)?, Tensor::zeros(c.shape())))
            }
            fn frozen(&self) -> bool {
                true
            }
            fn parameter_hash(&self) -> String {
                self.0.parameter_hash()
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = Tensor::zeros(&[4, 8, 8]);
        let (t, eps) = sample_noise::<f64, _>(&mut rng, 50, &[4, 8, 8]);
        let cond = concat_condition(&Tensor::<f64>::zeros(&[8, 32]), &Tensor::zeros(&[77, 32])).unwrap();
        let exact = Offset(make_toy_backbone(0), 0.0);
        assert!(recon_loss(&exact, &z0, &cond, t, &eps).unwrap() < 1e-20);
        let off = Offset(make_toy_backbone(0), 1.0);
        assert!((recon_loss(&off, &z0, &cond, t, &eps).unwrap() - 1.0).abs() < 1e-10);
    }
}
