//! Pretrained latent-diffusion stack executed with candle on the CPU.

use std::io::Read;
use std::path::Path;

use candle_core::{DType, Device, Module, Tensor as CTensor, Var};
use candle_nn::VarBuilder;
use candle_transformers::models::stable_diffusion::clip::{ClipTextTransformer, Config as ClipConfig};
use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb, RgbImage};
use sha2::{Digest, Sha256};

use super::pretrained::{PretrainedConfig, PRETRAINED_D_TEXT};
use super::sd::unet_2d::{UNet2DConditionModel, UNet2DConditionModelConfig};
use super::sd::vae::AutoEncoderKL;
use super::sd::{unet_v1, vae_v1};
use super::{Backbone, BackboneKind, NoiseSchedule, TextEncoding};
use crate::error::{Error, Result};
use crate::prep::{ClipBpeTokenizer, TokenSequence, Tokenizer};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Latent scaling of the v1 autoencoder.
const LATENT_SCALE: f64 = 0.18215;
/// Pixel resolution the autoencoder works at.
const PIXEL_SIDE: u32 = 512;

fn be(e: candle_core::Error) -> Error {
    Error::Backend(e.to_string())
}

fn to_candle<T: Scalar>(t: &Tensor<T>, device: &Device, dtype: DType) -> Result<CTensor> {
    let data: Vec<f64> = t.data().iter().map(|v| v.as_f64()).collect();
    CTensor::from_vec(data, t.shape(), device).and_then(|x| x.to_dtype(dtype)).map_err(be)
}

fn from_candle<T: Scalar>(t: &CTensor) -> Result<Tensor<T>> {
    let shape = t.dims().to_vec();
    let data = t.to_dtype(DType::F64).and_then(|x| x.flatten_all()).and_then(|x| x.to_vec1::<f64>()).map_err(be)?;
    Tensor::from_vec(&shape, data.into_iter().map(T::lit).collect())
}

/// Noise predictor with an exact vector-Jacobian product in the conditioning.
pub struct NoisePredictor {
    unet: UNet2DConditionModel,
    device: Device,
    dtype: DType,
}

impl NoisePredictor {
    pub fn new(vs: VarBuilder, cfg: UNet2DConditionModelConfig) -> Result<Self> {
        let (device, dtype) = (vs.device().clone(), vs.dtype());
        let unet = UNet2DConditionModel::new(vs, 4, 4, false, cfg).map_err(be)?;
        Ok(Self { unet, device, dtype })
    }

    fn forward(&self, z_t: &CTensor, t: usize, cond: &CTensor) -> candle_core::Result<CTensor> {
        let out = self.unet.forward(&z_t.unsqueeze(0)?, t as f64, &cond.unsqueeze(0)?)?;
        out.squeeze(0)
    }

    pub fn predict<T: Scalar>(&self, z_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        let z = to_candle(z_t, &self.device, self.dtype)?;
        let c = to_candle(cond, &self.device, self.dtype)?;
        from_candle(&self.forward(&z, t, &c).map_err(be)?)
    }

    pub fn predict_vjp<T: Scalar>(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let z = to_candle(z_t, &self.device, self.dtype)?;
        let c = Var::from_tensor(&to_candle(cond, &self.device, self.dtype)?).map_err(be)?;
        let u = to_candle(upstream, &self.device, self.dtype)?;
        let pred = self.forward(&z, t, c.as_tensor()).map_err(be)?;
        let grads = (&pred * &u).and_then(|x| x.sum_all()).and_then(|l| l.backward()).map_err(be)?;
        let g = match grads.get(c.as_tensor()) {
            Some(g) => from_candle(g)?,
            None => Tensor::zeros(cond.shape()),
        };
        Ok((from_candle(&pred)?, g))
    }
}

/// The frozen pretrained stack. Weights are memory-mapped and never wrapped
/// in trainable variables.
pub struct CandleBackbone<T> {
    unet: NoisePredictor,
    vae: AutoEncoderKL,
    text: ClipTextTransformer,
    text_projection: Option<CTensor>,
    tokenizer: ClipBpeTokenizer,
    schedule: NoiseSchedule<T>,
    hash: String,
    device: Device,
}

fn hash_files(files: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 20];
    for path in files {
        let mut f = std::fs::File::open(path).map_err(|e| Error::io(*path, e))?;
        loop {
            let n = f.read(&mut buf).map_err(|e| Error::io(*path, e))?;
            if n == 0 {
                break;
            }
            h.update(&buf[..n]);
        }
    }
    Ok(hex::encode(h.finalize()))
}

impl<T: Scalar> CandleBackbone<T> {
    pub fn load(cfg: &PretrainedConfig) -> Result<Self> {
        let device = Device::Cpu;
        let dtype = DType::F32;
        let mmap = |p: &Path| unsafe { VarBuilder::from_mmaped_safetensors(&[p], dtype, &device) }.map_err(be);
        let unet = NoisePredictor::new(mmap(&cfg.unet_weights())?, unet_v1())?;
        let vae = AutoEncoderKL::new(mmap(&cfg.vae_weights())?, 3, 3, vae_v1()).map_err(be)?;
        let text = ClipTextTransformer::new(mmap(&cfg.text_encoder_weights())?, &ClipConfig::v1_5()).map_err(be)?;
        let text_projection = match &cfg.text_projection {
            Some(p) => {
                let mut tensors = candle_core::safetensors::load(p, &device).map_err(be)?;
                let w = tensors
                    .remove("text_projection.weight")
                    .ok_or_else(|| Error::Missing { path: p.clone(), what: "tensor text_projection.weight".into() })?;
                Some(w.to_dtype(dtype).map_err(be)?)
            }
            None => None,
        };
        let tokenizer = ClipBpeTokenizer::from_files(&cfg.vocab(), &cfg.merges())?;
        let mut files = vec![cfg.unet_weights(), cfg.vae_weights(), cfg.text_encoder_weights()];
        files.extend(cfg.text_projection.clone());
        let hash = hash_files(&files.iter().map(|p| p.as_path()).collect::<Vec<_>>())?;
        Ok(Self {
            unet,
            vae,
            text,
            text_projection,
            tokenizer,
            schedule: NoiseSchedule::stable_diffusion(),
            hash,
            device,
        })
    }
}

impl<T: Scalar> Backbone<T> for CandleBackbone<T> {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Full
    }

    fn d_text(&self) -> usize {
        PRETRAINED_D_TEXT
    }

    fn latent_shape(&self) -> [usize; 3] {
        let side = (PIXEL_SIDE / 8) as usize;
        [4, side, side]
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEncoding<T>> {
        let ids = CTensor::new(tokens.ids(), &self.device).and_then(|x| x.unsqueeze(0)).map_err(be)?;
        let hidden = self.text.forward(&ids).and_then(|h| h.squeeze(0)).map_err(be)?;
        let eos = hidden.get(tokens.eos_position()).map_err(be)?;
        let pooled = match &self.text_projection {
            Some(w) => w.matmul(&eos.unsqueeze(1).map_err(be)?).and_then(|p| p.squeeze(1)).map_err(be)?,
            None => eos,
        };
        Ok(TextEncoding { hidden: from_candle(&hidden)?, pooled: from_candle(&pooled)? })
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Tensor<T>> {
        let rgb = image.to_rgb32f();
        if rgb.width() == 0 || rgb.height() == 0 {
            return Err(Error::Invalid("image has no pixels".into()));
        }
        let img = imageops::resize(&rgb, PIXEL_SIDE, PIXEL_SIDE, FilterType::Triangle);
        let n = (PIXEL_SIDE * PIXEL_SIDE) as usize;
        let mut px = vec![0f32; 3 * n];
        for (x, y, p) in img.enumerate_pixels() {
            let k = (y * PIXEL_SIDE + x) as usize;
            for c in 0..3 {
                px[c * n + k] = 2.0 * p.0[c] - 1.0;
            }
        }
        let side = PIXEL_SIDE as usize;
        let z = CTensor::from_vec(px, (1, 3, side, side), &self.device)
            .and_then(|x| self.vae.encode_mean(&x))
            .and_then(|z| z * LATENT_SCALE)
            .and_then(|z| z.squeeze(0))
            .map_err(be)?;
        from_candle(&z)
    }

    fn decode_latent(&self, latent: &Tensor<T>) -> Result<RgbImage> {
        self.check_latent(latent)?;
        let z = to_candle(latent, &self.device, DType::F32)?;
        let img = (z / LATENT_SCALE)
            .and_then(|z| z.unsqueeze(0))
            .and_then(|z| self.vae.decode(&z))
            .and_then(|x| x.squeeze(0))
            .and_then(|x| ((x + 1.0)? / 2.0)?.clamp(0f32, 1f32))
            .and_then(|x| x.to_dtype(DType::F32))
            .map_err(be)?;
        let (_, h, w) = img.dims3().map_err(be)?;
        let data = img.flatten_all().and_then(|x| x.to_vec1::<f32>()).map_err(be)?;
        let n = h * w;
        Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let k = y as usize * w + x as usize;
            let ch = |c: usize| (data[c * n + k] * 255.0).round() as u8;
            Rgb([ch(0), ch(1), ch(2)])
        }))
    }

    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_latent(z_t)?;
        self.check_cond(cond)?;
        self.schedule.alpha_bar(t)?;
        self.unet.predict(z_t, t, cond)
    }

    fn predict_noise_vjp(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_latent(z_t)?;
        self.check_cond(cond)?;
        self.schedule.alpha_bar(t)?;
        if upstream.shape() != z_t.shape() {
            return Err(Error::Shape(format!("upstream {:?} vs latent {:?}", upstream.shape(), z_t.shape())));
        }
        self.unet.predict_vjp(z_t, t, cond, upstream)
    }

    fn frozen(&self) -> bool {
        true
    }

    fn parameter_hash(&self) -> String {
        self.hash.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::sd::unet_2d::BlockConfig;
    use crate::params::normal_tensor;
    use candle_nn::VarMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_unet() -> NoisePredictor {
        let map = VarMap::new();
        let vs = VarBuilder::from_varmap(&map, DType::F64, &Device::Cpu);
        let bc = |out_channels, use_cross_attn, attention_head_dim| BlockConfig {
            out_channels,
            use_cross_attn,
            attention_head_dim,
        };
        let cfg = UNet2DConditionModelConfig {
            blocks: vec![bc(32, Some(1), 2), bc(64, Some(1), 2)],
            center_input_sample: false,
            cross_attention_dim: 12,
            downsample_padding: 1,
            flip_sin_to_cos: true,
            freq_shift: 0.,
            layers_per_block: 1,
            mid_block_scale_factor: 1.,
            norm_eps: 1e-5,
            norm_num_groups: 32,
            sliced_attention_size: None,
            use_linear_projection: false,
        };
        NoisePredictor::new(vs, cfg).unwrap()
    }

    // Directional derivative of ⟨u, ε̂(cond)⟩ against a central difference.
    #[test]
    fn conditioning_gradient_matches_finite_differences() {
        let unet = tiny_unet();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = normal_tensor::<f64, _>(&mut rng, &[4, 8, 8], 1.0);
        let cond = normal_tensor::<f64, _>(&mut rng, &[5, 12], 1.0);
        let u = normal_tensor::<f64, _>(&mut rng, &[4, 8, 8], 1.0);
        let v = normal_tensor::<f64, _>(&mut rng, &[5, 12], 1.0);
        let (_, g) = unet.predict_vjp(&z, 10, &cond, &u).unwrap();
        let analytic: f64 = g.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
        let f = |s: f64| {
            let c = cond.zip_map(&v, |c, d| c + s * d).unwrap();
            let p = unet.predict(&z, 10, &c).unwrap();
            p.data().iter().zip(u.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-3;
        let numeric = (f(h) - f(-h)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / numeric.abs().max(1e-6);
        assert!(analytic.abs() > 1e-6, "gradient vanished");
        assert!(rel < 1e-3, "analytic {analytic} vs numeric {numeric} (rel {rel})");
    }

    #[test]
    fn prediction_keeps_latent_shape() {
        let unet = tiny_unet();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = normal_tensor::<f32, _>(&mut rng, &[4, 8, 8], 1.0);
        let cond = normal_tensor::<f32, _>(&mut rng, &[3, 12], 1.0);
        let p = unet.predict(&z, 0, &cond).unwrap();
        assert_eq!(p.shape(), z.shape());
        assert!(p.data().iter().all(|v| v.is_finite()));
    }
}
