//! The frozen generative stack: latent autoencoder, text encoder, noise
//! predictor and diffusion schedule.
//!
//! Training code never sees backbone parameters. It talks to the stack through
//! [`Backbone`], whose only differentiable entry point is
//! [`Backbone::predict_noise_vjp`] (gradient with respect to the conditioning),
//! so no optimizer can reach the frozen weights.

use image::{DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::prep::{TokenSequence, Tokenizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[cfg(feature = "full")]
mod candle_backbone;
pub mod pretrained;
#[cfg(feature = "full")]
mod sd;
mod toy;

#[cfg(feature = "full")]
pub use candle_backbone::{CandleBackbone, NoisePredictor};
pub use pretrained::{load_pretrained_backbone, PretrainedConfig};
pub use toy::{make_toy_backbone, ToyBackbone, ToyConfig};

/// Cumulative signal fractions `ᾱ_t` for `t ∈ [0, T)`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule<T> {
    alphas_cumprod: Vec<T>,
}

impl<T: Scalar> NoiseSchedule<T> {
    /// `β_t = (linspace(√β_start, √β_end, T)_t)²`, `ᾱ_t = Π_{s≤t} (1 − β_s)`.
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Invalid("schedule needs at least one timestep".into()));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::Invalid(format!("betas must satisfy 0 < {beta_start} <= {beta_end} < 1")));
        }
        let (s, e) = (beta_start.sqrt(), beta_end.sqrt());
        let mut acc = 1.0f64;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let frac = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
                let beta = (s + (e - s) * frac).powi(2);
                acc *= 1.0 - beta;
                T::lit(acc)
            })
            .collect();
        Ok(Self { alphas_cumprod })
    }

    /// The generator's training schedule: 1000 steps, β from 0.00085 to 0.012.
    pub fn stable_diffusion() -> Self {
        Self::scaled_linear(1000, 0.000_85, 0.012).expect("static schedule is valid")
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alphas_cumprod(&self) -> &[T] {
        &self.alphas_cumprod
    }

    pub fn alpha_bar(&self, t: usize) -> Result<T> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("timestep {t} outside [0, {})", self.alphas_cumprod.len())))
    }
}

/// Forward diffusion `z_t = √ᾱ_t · z0 + √(1 − ᾱ_t) · ε`.
pub fn add_noise<T: Scalar>(
    schedule: &NoiseSchedule<T>,
    z0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
) -> Result<Tensor<T>> {
    noise_with_alpha(z0, eps, schedule.alpha_bar(t)?)
}

/// [`add_noise`] with an explicit `ᾱ`.
pub fn noise_with_alpha<T: Scalar>(z0: &Tensor<T>, eps: &Tensor<T>, alpha_bar: T) -> Result<Tensor<T>> {
    let (a, b) = (alpha_bar.sqrt(), (T::one() - alpha_bar).sqrt());
    z0.zip_map(eps, |z, e| a * z + b * e)
}

/// Text-encoder output for one token sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoding<T> {
    /// Per-token embeddings, `[77, d_text]`.
    pub hidden: Tensor<T>,
    /// Sequence-level feature at the end-of-sequence position, projected into
    /// the image-text joint space when the backbone provides a projection.
    pub pooled: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Toy,
    Full,
}

/// Read-only handle on a frozen generative stack.
pub trait Backbone<T: Scalar>: Send + Sync {
    fn kind(&self) -> BackboneKind;

    /// Per-token embedding width of the text encoder.
    fn d_text(&self) -> usize;

    /// Latent shape `[channels, height, width]`.
    fn latent_shape(&self) -> [usize; 3];

    fn schedule(&self) -> &NoiseSchedule<T>;

    fn tokenizer(&self) -> &dyn Tokenizer;

    fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEncoding<T>>;

    /// Latent encoder, image → `latent_shape` array.
    fn encode_image(&self, image: &DynamicImage) -> Result<Tensor<T>>;

    /// Latent decoder.
    fn decode_latent(&self, latent: &Tensor<T>) -> Result<RgbImage>;

    /// Noise prediction for latent `z_t` at timestep `t` under conditioning
    /// `cond` (`[rows, d_text]`, any number of rows).
    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>>;

    /// Returns the prediction together with `∂⟨upstream, ε̂⟩/∂cond`.
    fn predict_noise_vjp(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)>;

    /// Mean squared error between the noise prediction and `target`, with its
    /// gradient with respect to `cond`.
    fn noise_mse_grad(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<(T, Tensor<T>)> {
        let pred = self.predict_noise(z_t, t, cond)?;
        let diff = pred.sub(target)?;
        let n = T::lit(diff.len() as f64);
        let loss = diff.data().iter().map(|&d| d * d).sum::<T>() / n;
        let upstream = diff.scale(T::lit(2.0) / n);
        let (_, grad) = self.predict_noise_vjp(z_t, t, cond, &upstream)?;
        Ok((loss, grad))
    }

    /// Whether the stack refuses to be trained. Every stage requires `true`.
    fn frozen(&self) -> bool;

    /// Content hash over every backbone parameter.
    fn parameter_hash(&self) -> String;

    fn encode_prompt(&self, text: &str) -> Result<TextEncoding<T>> {
        self.encode_text(&self.tokenizer().encode(text))
    }

    fn check_latent(&self, z: &Tensor<T>) -> Result<()> {
        let want = self.latent_shape();
        if z.shape() != want {
            return Err(Error::Shape(format!("latent {:?}, backbone expects {want:?}", z.shape())));
        }
        Ok(())
    }

    fn check_cond(&self, cond: &Tensor<T>) -> Result<()> {
        if cond.shape().len() != 2 || cond.cols() != self.d_text() {
            return Err(Error::Shape(format!(
                "conditioning {:?}, backbone expects [_, {}]",
                cond.shape(),
                self.d_text()
            )));
        }
        Ok(())
    }
}

pub(crate) fn require_frozen<T: Scalar>(bundle: &dyn Backbone<T>) -> Result<()> {
    if !bundle.frozen() {
        return Err(Error::Precondition("backbone must be frozen".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn schedule_is_strictly_decreasing_from_near_one() {
        for s in [NoiseSchedule::<f64>::stable_diffusion(), NoiseSchedule::scaled_linear(50, 0.000_85, 0.012).unwrap()]
        {
            let a = s.alphas_cumprod();
            assert!(a[0] <= 1.0 && a[0] > 0.999);
            assert!(a.windows(2).all(|w| 0.0 < w[1] && w[1] < w[0]));
        }
        assert_eq!(NoiseSchedule::<f32>::stable_diffusion().train_steps(), 1000);
    }

    #[test]
    fn add_noise_examples() {
        let z0 = Tensor::full(&[2, 2], 1.0f64);
        let zero = Tensor::zeros(&[2, 2]);
        let one = Tensor::full(&[2, 2], 1.0);
        let z = noise_with_alpha(&z0, &zero, 0.49).unwrap();
        assert!(z.data().iter().all(|&v| (v - 0.7).abs() < 1e-12));
        assert_eq!(noise_with_alpha(&z0, &one, 1.0).unwrap(), z0);
        let z = noise_with_alpha(&z0, &one, 0.25).unwrap();
        // 0.5 + sqrt(0.75)
        assert!(z.data().iter().all(|&v| (v - 1.366_025_403_784_438_6).abs() < 1e-12));
        assert!(noise_with_alpha(&z0, &Tensor::zeros(&[4]), 0.5).is_err());
        let s = NoiseSchedule::<f64>::stable_diffusion();
        assert!(add_noise(&s, &z0, 1000, &one).is_err());
    }

    proptest! {
        #[test]
        fn exact_denoising_recovers_clean_latent(
            vals in prop::collection::vec(-3.0f64..3.0, 8),
            noise in prop::collection::vec(-3.0f64..3.0, 8),
            t in 0usize..1000,
        ) {
            let s = NoiseSchedule::<f64>::stable_diffusion();
            let z0 = Tensor::from_vec(&[8], vals).unwrap();
            let eps = Tensor::from_vec(&[8], noise).unwrap();
            let a = s.alpha_bar(t).unwrap();
            let zt = add_noise(&s, &z0, t, &eps).unwrap();
            for i in 0..8 {
                let rec = (zt.data()[i] - (1.0 - a).sqrt() * eps.data()[i]) / a.sqrt();
                let want = z0.data()[i];
                prop_assert!((rec - want).abs() <= 1e-5 * want.abs().max(1e-3) + 1e-9);
            }
        }
    }
}
