//! Inference: style tokens from a reference image, classifier-free guidance
//! against the empty prompt, and the deterministic latent update
//! `z_{t−1} = √ᾱ_{t−1}·x̂0 + √(1−ᾱ_{t−1})·ε̂`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{imageops, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::Backbone;
use crate::dataset::STYLE_SUFFIX;
use crate::error::{Error, Result};
use crate::inversion::{build_condition, StyleVector};
use crate::params::normal_tensor;
use crate::prep::{load_rgb, preprocess_image};
use crate::scalar::Scalar;
use crate::style_module::{predict_style_vector, PredictionMode, StyleEncoder, StyleProjection};
use crate::tensor::Tensor;

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_GUIDANCE: f64 = 7.5;

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE
}

fn default_mode() -> PredictionMode {
    PredictionMode::Projected
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub reference_image: PathBuf,
    /// Content prompt, already ending in `" in the style of [*]."`.
    pub prompt: String,
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_guidance")]
    pub guidance: f64,
    /// Square output side; `None` keeps the decoder's resolution.
    #[serde(default)]
    pub output_size: Option<u32>,
    #[serde(default = "default_mode")]
    pub mode: PredictionMode,
}

impl GenerationRequest {
    pub fn new(reference_image: impl Into<PathBuf>, prompt: &str, seed: u64) -> Self {
        Self {
            reference_image: reference_image.into(),
            prompt: prompt.into(),
            seed,
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            output_size: None,
            mode: PredictionMode::Projected,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_settings(self.steps, self.guidance)?;
        if !self.prompt.ends_with(STYLE_SUFFIX) {
            return Err(Error::Precondition(format!("prompt must end with {STYLE_SUFFIX:?}: {:?}", self.prompt)));
        }
        if self.output_size == Some(0) {
            return Err(Error::Invalid("output size must be positive".into()));
        }
        Ok(())
    }
}

fn check_settings(steps: usize, guidance: f64) -> Result<()> {
    if steps == 0 {
        return Err(Error::Invalid("at least one sampling step is required".into()));
    }
    if !(guidance >= 0.0 && guidance.is_finite()) {
        return Err(Error::Invalid(format!("guidance scale must be finite and ≥ 0, got {guidance}")));
    }
    Ok(())
}

/// `ε_uncond + s·(ε_cond − ε_uncond)`.
pub fn cfg_combine<T: Scalar>(eps_uncond: &Tensor<T>, eps_cond: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    eps_uncond.zip_map(eps_cond, |u, c| u + s * (c - u))
}

/// One literal update from `ᾱ_t` to `ᾱ_{t−1}` with predicted noise `eps`.
pub fn pndm_step<T: Scalar>(z_t: &Tensor<T>, eps: &Tensor<T>, a_t: T, a_prev: T) -> Result<Tensor<T>> {
    let unit = |a: T| a > T::zero() && a <= T::one();
    if a_t == T::zero() {
        return Err(Error::Invalid("ᾱ_t = 0 makes the clean-latent estimate undefined".into()));
    }
    if !unit(a_t) || !unit(a_prev) {
        return Err(Error::Invalid(format!("ᾱ values must lie in (0, 1], got {} and {}", a_t, a_prev)));
    }
    let (sa, sb) = (a_t.sqrt(), (T::one() - a_t).sqrt());
    let (pa, pb) = (a_prev.sqrt(), (T::one() - a_prev).sqrt());
    z_t.zip_map(eps, |z, e| pa * ((z - sb * e) / sa) + pb * e)
}

/// `steps` timesteps with stride `⌊T/steps⌋`, strictly decreasing and
/// starting at `T − 1`.
pub fn timesteps(train_steps: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > train_steps {
        return Err(Error::Invalid(format!("cannot take {steps} sampling steps from a {train_steps}-step schedule")));
    }
    let stride = train_steps / steps;
    let offset = train_steps - 1 - (steps - 1) * stride;
    Ok((0..steps).rev().map(|i| i * stride + offset).collect())
}

/// Output of one sampling run.
#[derive(Clone, Debug)]
pub struct Generated<T> {
    pub image: RgbImage,
    pub latent: Tensor<T>,
    /// Timesteps visited, one per update.
    pub timesteps: Vec<usize>,
}

/// Style-conditioned sampling with an explicit style vector.
pub fn sample_with_style<T: Scalar>(
    bundle: &dyn Backbone<T>,
    style: &StyleVector<T>,
    prompt: &str,
    seed: u64,
    steps: usize,
    guidance: f64,
) -> Result<Generated<T>> {
    check_settings(steps, guidance)?;
    let text = bundle.encode_prompt(prompt)?.hidden;
    let cond = build_condition(style, &text)?;
    run(bundle, Some(cond.embeddings()), seed, steps, guidance)
}

/// The same loop with the empty-prompt branch only.
pub fn sample_unconditional<T: Scalar>(bundle: &dyn Backbone<T>, seed: u64, steps: usize) -> Result<Generated<T>> {
    check_settings(steps, 0.0)?;
    run(bundle, None, seed, steps, 0.0)
}

fn run<T: Scalar>(
    bundle: &dyn Backbone<T>,
    cond: Option<&Tensor<T>>,
    seed: u64,
    steps: usize,
    guidance: f64,
) -> Result<Generated<T>> {
    let sched = bundle.schedule();
    let ts = timesteps(sched.train_steps(), steps)?;
    let uncond = bundle.encode_prompt("")?.hidden;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // The scheduler's initial sigma is 1 for this update rule.
    let mut z: Tensor<T> = normal_tensor(&mut rng, &bundle.latent_shape(), 1.0);
    let s = T::lit(guidance);
    for (i, &t) in ts.iter().enumerate() {
        let eps_u = bundle.predict_noise(&z, t, &uncond)?;
        let eps = match cond {
            Some(c) => cfg_combine(&eps_u, &bundle.predict_noise(&z, t, c)?, s)?,
            None => eps_u,
        };
        let a_t = sched.alpha_bar(t)?;
        let a_prev = match ts.get(i + 1) {
            Some(&next) => sched.alpha_bar(next)?,
            None => T::one(),
        };
        z = pndm_step(&z, &eps, a_t, a_prev)?;
        if !z.all_finite() {
            return Err(Error::NonFinite { context: "sampled latent".into(), step: i + 1 });
        }
    }
    Ok(Generated { image: bundle.decode_latent(&z)?, latent: z, timesteps: ts })
}

/// Reference image → predicted style vector → guided sampling → decoded image.
pub fn generate<T: Scalar>(
    bundle: &dyn Backbone<T>,
    enc: &StyleEncoder<T>,
    p: Option<&StyleProjection<T>>,
    req: &GenerationRequest,
) -> Result<Generated<T>> {
    req.validate()?;
    let reference = load_rgb(&req.reference_image)?;
    let id = req.reference_image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let style = predict_style_vector(enc, p, &preprocess_image(&reference)?, req.mode, &id)?;
    let mut out = sample_with_style(bundle, &style, &req.prompt, req.seed, req.steps, req.guidance)?;
    if let Some(side) = req.output_size {
        out.image = imageops::resize(&out.image, side, side, imageops::FilterType::Nearest);
    }
    Ok(out)
}

/// Everything needed to replay a generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationSidecar {
    pub request: GenerationRequest,
    pub backbone: String,
    pub backbone_hash: String,
    pub dtype: String,
    /// Checkpoint role → path.
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub timesteps: Vec<usize>,
    pub output: PathBuf,
    pub output_sha256: String,
}

/// Writes the image losslessly and `<image>.json` next to it; returns the
/// sidecar path.
pub fn write_output(path: &Path, image: &RgbImage, sidecar: &mut GenerationSidecar) -> Result<PathBuf> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    image.save_with_format(path, image::ImageFormat::Png)?;
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    sidecar.output = path.to_path_buf();
    sidecar.output_sha256 = hex::encode(Sha256::digest(&bytes));
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(sidecar)? + "\n").map_err(|e| Error::io(&side, e))?;
    Ok(side)
}

pub fn sidecar_path(image: &Path) -> PathBuf {
    image.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{add_noise, make_toy_backbone};
    use crate::inversion::init_style_vector;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cfg_examples() {
        let u = Tensor::from_fn(&[3], |i| i as f64 - 1.0);
        let c = Tensor::from_fn(&[3], |i| 2.0 * i as f64);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &u, 7.5).unwrap(), u);
        let got = cfg_combine(&Tensor::zeros(&[1]), &Tensor::full(&[1], 2.0), 7.5).unwrap();
        assert_eq!(got.data()[0], 15.0);
        assert!(cfg_combine(&u, &Tensor::zeros(&[2]), 1.0).is_err());
    }

    #[test]
    fn step_examples() {
        let z = Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.2);
        assert_relative_eq!(pndm_step(&z, &Tensor::zeros(&[4]), 0.6, 0.6).unwrap().data()[3], z.data()[3]);
        let e = Tensor::full(&[4], 0.5);
        let got = pndm_step(&z, &e, 1.0, 0.49).unwrap();
        for (g, zi) in got.data().iter().zip(z.data()) {
            assert_relative_eq!(*g, 0.7 * zi + (0.51f64).sqrt() * 0.5, max_relative = 1e-12);
        }
        assert!(pndm_step(&z, &e, 0.0, 0.5).is_err());
        assert!(pndm_step(&z, &e, 0.5, 1.5).is_err());
    }

    #[test]
    fn timestep_grid() {
        let ts = timesteps(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(ts[1], 979);
        assert_eq!(*ts.last().unwrap(), 19);
        assert_eq!(timesteps(50, 50).unwrap(), (0..50).rev().collect::<Vec<_>>());
        assert_eq!(timesteps(50, 1).unwrap(), vec![49]);
        assert!(timesteps(50, 51).is_err());
        assert!(timesteps(50, 0).is_err());
    }

    fn toy_style(bb: &dyn Backbone<f64>) -> StyleVector<f64> {
        init_style_vector(3, bb.d_text())
    }

    #[test]
    fn sampling_is_deterministic_and_counts_steps() {
        let bb = make_toy_backbone::<f64>(0);
        let v = toy_style(&bb);
        let p = "a cat in the style of [*].";
        let a = sample_with_style(&bb, &v, p, 11, 50, 7.5).unwrap();
        let b = sample_with_style(&bb, &v, p, 11, 50, 7.5).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.latent, b.latent);
        let one = sample_with_style(&bb, &v, p, 11, 1, 7.5).unwrap();
        assert_eq!(one.timesteps, vec![49]);
    }

    #[test]
    fn zero_guidance_equals_unconditional() {
        let bb = make_toy_backbone::<f64>(0);
        let v = toy_style(&bb);
        let g = sample_with_style(&bb, &v, "a dog in the style of [*].", 5, 20, 0.0).unwrap();
        let u = sample_unconditional(&bb, 5, 20).unwrap();
        assert_eq!(g.latent, u.latent);
        assert_eq!(g.image, u.image);
    }

    #[test]
    fn latents_stay_finite_over_many_seeds() {
        let bb = make_toy_backbone::<f32>(1);
        let v = init_style_vector(0, bb.d_text());
        for seed in 0..20 {
            let g = sample_with_style(&bb, &v, "a tree in the style of [*].", seed, 50, 7.5).unwrap();
            assert!(g.latent.all_finite() && g.latent.norm().is_finite());
        }
    }

    #[test]
    fn request_checks() {
        let mut r = GenerationRequest::new("ref.png", "a cat", 0);
        assert!(matches!(r.validate(), Err(Error::Precondition(_))));
        r.prompt = "a cat in the style of [*].".into();
        r.validate().unwrap();
        r.guidance = -1.0;
        assert!(r.validate().is_err());
        r.guidance = 7.5;
        r.steps = 0;
        assert!(r.validate().is_err());
        let bb = make_toy_backbone::<f32>(0);
        let enc = StyleEncoder::<f32>::new(crate::style_module::EncoderConfig::toy(), 0).unwrap();
        let req = GenerationRequest::new("/nonexistent/ref.png", "a cat in the style of [*].", 0);
        assert!(matches!(generate(&bb, &enc, None, &req), Err(Error::Io { .. })));
    }

    proptest! {
        #[test]
        fn round_trip_with_true_noise(seed in any::<u64>(), t in 0usize..1000) {
            let sched = crate::backbone::NoiseSchedule::<f64>::stable_diffusion();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z0: Tensor<f64> = normal_tensor(&mut rng, &[4, 8, 8], 1.0);
            let eps: Tensor<f64> = normal_tensor(&mut rng, &[4, 8, 8], 1.0);
            let zt = add_noise(&sched, &z0, t, &eps).unwrap();
            let back = pndm_step(&zt, &eps, sched.alpha_bar(t).unwrap(), 1.0).unwrap();
            let err = back.sub(&z0).unwrap().norm() / z0.norm();
            prop_assert!(err <= 1e-5, "relative error {err}");
        }

        #[test]
        fn cfg_is_affine_in_scale(s1 in -10.0f64..10.0, s2 in -10.0f64..10.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u: Tensor<f64> = normal_tensor(&mut rng, &[16], 1.0);
            let c: Tensor<f64> = normal_tensor(&mut rng, &[16], 1.0);
            let a = cfg_combine(&u, &c, s1).unwrap();
            let b = cfg_combine(&u, &c, s2).unwrap();
            let m = cfg_combine(&u, &c, (s1 + s2) / 2.0).unwrap();
            for i in 0..16 {
                prop_assert!((a.data()[i] + b.data()[i] - 2.0 * m.data()[i]).abs() <= 1e-12 * (1.0 + a.data()[i].abs() + b.data()[i].abs()));
            }
        }

        #[test]
        fn step_is_linear_in_latent_and_noise(
            a_t in 0.01f64..1.0, a_prev in 0.01f64..1.0, k in -3.0f64..3.0, seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z1: Tensor<f64> = normal_tensor(&mut rng, &[8], 1.0);
            let e1: Tensor<f64> = normal_tensor(&mut rng, &[8], 1.0);
            let z2: Tensor<f64> = normal_tensor(&mut rng, &[8], 1.0);
            let e2: Tensor<f64> = normal_tensor(&mut rng, &[8], 1.0);
            let lhs = pndm_step(&z1.add(&z2.scale(k)).unwrap(), &e1.add(&e2.scale(k)).unwrap(), a_t, a_prev).unwrap();
            let rhs = pndm_step(&z1, &e1, a_t, a_prev).unwrap().add(&pndm_step(&z2, &e2, a_t, a_prev).unwrap().scale(k)).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
    }
}
