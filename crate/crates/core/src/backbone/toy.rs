//! Deterministic desk-scale stack.
//!
//! * latent autoencoder: 8×8 area resample, RGB mapped to `[-1, 1]` in
//!   channels 0..3 and luminance in channel 3; the decoder reads channels 0..3
//!   back. On 4×8×8 arrays the pair is the identity.
//! * text encoder: token + position embeddings followed by one mixing layer
//!   that combines each token with the masked sequence mean.
//! * noise predictor: one cross-attention layer (queries from the noisy latent,
//!   keys/values from the conditioning) and one MLP layer producing a guess
//!   `m` of the clean latent. The naive estimate `z_t / √ᾱ_t` is shrunk toward
//!   `m` with weight `λ_t = c·√s_t / (c·√s_t + 1)` (`s_t` the signal-to-noise
//!   ratio), and the result is converted to a noise estimate:
//!   `ε̂ = (z_t − √ᾱ_t · x̂0) / √(1 − ᾱ_t)`.
//!
//! With a perfect guess the residual `ε̂ − ε` is `−λ_t·ε`, so the loss stays
//! O(1) at every timestep instead of scaling with the signal-to-noise ratio.
//! Text embeddings are small (like freshly initialized style tokens) and the
//! predictor applies a fixed gain to the conditioning, so learned style rows
//! and text rows compete on equal terms in the attention.

use image::imageops::{self, FilterType};
use image::{DynamicImage, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Backbone, BackboneKind, NoiseSchedule, TextEncoding};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{normal_tensor, ParamStore};
use crate::prep::{StubTokenizer, TokenSequence, Tokenizer, CONTEXT_LENGTH};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub d_text: usize,
    pub vocab_size: usize,
    pub latent_channels: usize,
    pub latent_side: usize,
    pub train_steps: usize,
    pub mlp_hidden: usize,
    /// Standard deviation of token embeddings.
    pub text_scale: f64,
    /// Fixed gain applied to the conditioning before the key/value maps.
    pub cond_gain: f64,
    /// Shrinkage constant `c` of the clean-latent readout.
    pub prior_scale: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            d_text: 32,
            vocab_size: 512,
            latent_channels: 4,
            latent_side: 8,
            train_steps: 50,
            mlp_hidden: 64,
            text_scale: 0.05,
            cond_gain: 32.0,
            prior_scale: 0.25,
        }
    }
}

pub struct ToyBackbone<T> {
    cfg: ToyConfig,
    params: ParamStore<T>,
    schedule: NoiseSchedule<T>,
    tokenizer: StubTokenizer,
    frozen: bool,
}

/// Builds the toy stack; identical seeds give parameter-identical stacks.
pub fn make_toy_backbone<T: Scalar>(seed: u64) -> ToyBackbone<T> {
    ToyBackbone::new(ToyConfig::default(), seed)
}

impl<T: Scalar> ToyBackbone<T> {
    pub fn new(cfg: ToyConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d_text;
        let c = cfg.latent_channels;
        let n_pos = cfg.latent_side * cfg.latent_side;
        let h = cfg.mlp_hidden;
        let inv = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let mut p = ParamStore::new();
        p.insert("text.token_embedding", normal_tensor(&mut rng, &[cfg.vocab_size, d], cfg.text_scale));
        p.insert("text.position_embedding", normal_tensor(&mut rng, &[CONTEXT_LENGTH, d], 0.1 * cfg.text_scale));
        p.insert("text.mix_self", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("text.mix_context", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("text.mix_bias", Tensor::zeros(&[d]));
        p.insert("unet.time", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("unet.in.weight", normal_tensor(&mut rng, &[d, c], inv(c)));
        p.insert("unet.in.bias", Tensor::zeros(&[d]));
        p.insert("unet.position", normal_tensor(&mut rng, &[n_pos, d], 1.0));
        p.insert("unet.attn.q", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("unet.attn.k", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("unet.attn.v", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("unet.attn.o", normal_tensor(&mut rng, &[d, d], inv(d)));
        p.insert("unet.mlp.fc1.weight", normal_tensor(&mut rng, &[h, d], inv(d)));
        p.insert("unet.mlp.fc1.bias", Tensor::zeros(&[h]));
        p.insert("unet.mlp.fc2.weight", normal_tensor(&mut rng, &[c, h], inv(h)));
        p.insert("unet.mlp.fc2.bias", Tensor::zeros(&[c]));
        let schedule = NoiseSchedule::scaled_linear(cfg.train_steps, 0.000_85, 0.012).expect("toy schedule is valid");
        let tokenizer = StubTokenizer::new(cfg.vocab_size);
        Self { cfg, params: p, schedule, tokenizer, frozen: true }
    }

    pub fn config(&self) -> &ToyConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Allows tests to model a misconfigured, trainable backbone.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn p(&self, name: &str) -> &Tensor<T> {
        self.params.get(name).expect("toy parameter exists")
    }

    fn bind(&self, g: &mut Graph<T>, name: &str) -> Var {
        let idx = self.params.index_of(name).expect("toy parameter exists");
        g.param(&self.params, idx, false)
    }

    fn time_embedding(&self, t: usize) -> Tensor<T> {
        let d = self.cfg.d_text;
        let half = d / 2;
        let mut v = vec![T::zero(); d];
        for i in 0..half {
            let freq = (-(10_000f64).ln() * i as f64 / half as f64).exp();
            v[i] = T::lit((t as f64 * freq).cos());
            v[half + i] = T::lit((t as f64 * freq).sin());
        }
        Tensor::from_vec(&[1, d], v).expect("sized above")
    }

    /// Builds the prediction graph and returns the noise-estimate node.
    fn forward(&self, g: &mut Graph<T>, z_t: &Tensor<T>, t: usize, cond: Var) -> Result<Var> {
        self.check_latent(z_t)?;
        let alpha = self.schedule.alpha_bar(t)?;
        let c = self.cfg.latent_channels;
        let n_pos = self.cfg.latent_side * self.cfg.latent_side;
        let d = self.cfg.d_text;

        // [C, H, W] -> [H·W, C] rows per spatial position.
        let tokens = z_t.reshape(&[c, n_pos])?.transpose()?;
        let x = g.constant(tokens);
        let temb_raw = g.constant(self.time_embedding(t));
        let w_time = self.bind(g, "unet.time");
        let temb = g.matmul_t(temb_raw, w_time)?;
        let w_in = self.bind(g, "unet.in.weight");
        let b_in = self.bind(g, "unet.in.bias");
        let h = g.linear(x, w_in, Some(b_in))?;
        let pos = self.bind(g, "unet.position");
        let h = g.add(h, pos)?;
        let h = g.add_row(h, temb)?;

        let wq = self.bind(g, "unet.attn.q");
        let wk = self.bind(g, "unet.attn.k");
        let wv = self.bind(g, "unet.attn.v");
        let wo = self.bind(g, "unet.attn.o");
        let q = g.matmul_t(h, wq)?;
        let cond = g.scale(cond, T::lit(self.cfg.cond_gain));
        let k = g.matmul_t(cond, wk)?;
        let v = g.matmul_t(cond, wv)?;
        let logits = g.matmul_t(q, k)?;
        let logits = g.scale(logits, T::lit(1.0 / (d as f64).sqrt()));
        let attn = g.softmax_rows(logits);
        let mixed = g.matmul(attn, v)?;
        let u = g.matmul_t(mixed, wo)?;

        let fc1w = self.bind(g, "unet.mlp.fc1.weight");
        let fc1b = self.bind(g, "unet.mlp.fc1.bias");
        let fc2w = self.bind(g, "unet.mlp.fc2.weight");
        let fc2b = self.bind(g, "unet.mlp.fc2.bias");
        let hid = g.linear(u, fc1w, Some(fc1b))?;
        let hid = g.tanh(hid);
        let guess_rows = g.linear(hid, fc2w, Some(fc2b))?;

        // Back to [C, H, W] layout, flattened as [C, H·W].
        let guess = self.rows_to_channels(g, guess_rows)?;
        // ε̂ = √s·(z_t/√ᾱ − x̂0) with x̂0 = λ·z_t/√ᾱ + (1 − λ)·m, which is
        // (1 − λ)·√s·(z_t/√ᾱ − m).
        let snr_sqrt = (alpha / (T::one() - alpha)).sqrt();
        let cs = T::lit(self.cfg.prior_scale) * snr_sqrt;
        let k_out = snr_sqrt / (cs + T::one());
        let naive = g.constant(z_t.reshape(&[c, n_pos])?.scale(T::one() / alpha.sqrt()));
        let diff = g.sub(naive, guess)?;
        let eps = g.scale(diff, k_out);
        g.reshape(eps, z_t.shape())
    }

    // [H·W, C] -> [C, H·W] by slicing columns; keeps the op differentiable.
    fn rows_to_channels(&self, g: &mut Graph<T>, rows: Var) -> Result<Var> {
        let n_pos = g.shape(rows)[0];
        let mut chans = Vec::with_capacity(self.cfg.latent_channels);
        for ch in 0..self.cfg.latent_channels {
            let col = g.slice_cols(rows, ch, 1)?;
            chans.push(g.reshape(col, &[1, n_pos])?);
        }
        g.concat_rows(&chans)
    }
}

impl<T: Scalar> Backbone<T> for ToyBackbone<T> {
    fn kind(&self) -> BackboneKind {
        BackboneKind::Toy
    }

    fn d_text(&self) -> usize {
        self.cfg.d_text
    }

    fn latent_shape(&self) -> [usize; 3] {
        [self.cfg.latent_channels, self.cfg.latent_side, self.cfg.latent_side]
    }

    fn schedule(&self) -> &NoiseSchedule<T> {
        &self.schedule
    }

    fn tokenizer(&self) -> &dyn Tokenizer {
        &self.tokenizer
    }

    fn encode_text(&self, tokens: &TokenSequence) -> Result<TextEncoding<T>> {
        let d = self.cfg.d_text;
        let table = self.p("text.token_embedding");
        let pos = self.p("text.position_embedding");
        let mut h = Tensor::zeros(&[CONTEXT_LENGTH, d]);
        for (i, &id) in tokens.ids().iter().enumerate() {
            let id = id as usize;
            if id >= self.cfg.vocab_size {
                return Err(Error::Invalid(format!("token id {id} outside toy vocabulary")));
            }
            for j in 0..d {
                h.data_mut()[i * d + j] = table.row(id)[j] + pos.row(i)[j];
            }
        }
        let valid: Vec<usize> = (0..CONTEXT_LENGTH).filter(|&i| tokens.mask()[i] == 1).collect();
        let mut ctx = Tensor::zeros(&[1, d]);
        for &i in &valid {
            for j in 0..d {
                ctx.data_mut()[j] += h.row(i)[j];
            }
        }
        let ctx = ctx.scale(T::one() / T::lit(valid.len().max(1) as f64));
        let own = h.matmul_t(self.p("text.mix_self"))?;
        let shared = ctx.matmul_t(self.p("text.mix_context"))?;
        let bias = self.p("text.mix_bias");
        let mut out = h.clone();
        for i in 0..CONTEXT_LENGTH {
            for j in 0..d {
                let pre = own.row(i)[j] + shared.data()[j] + bias.data()[j];
                out.data_mut()[i * d + j] += pre.tanh();
            }
        }
        let eos = tokens.eos_position();
        let pooled = Tensor::from_vec(&[d], out.row(eos).to_vec())?;
        Ok(TextEncoding { hidden: out, pooled })
    }

    fn encode_image(&self, image: &DynamicImage) -> Result<Tensor<T>> {
        let side = self.cfg.latent_side as u32;
        let rgb = image.to_rgb32f();
        if rgb.width() == 0 || rgb.height() == 0 {
            return Err(Error::Invalid("image has no pixels".into()));
        }
        let small = imageops::resize(&rgb, side, side, FilterType::Triangle);
        let n = (side * side) as usize;
        let mut z = vec![T::zero(); self.cfg.latent_channels * n];
        for (x, y, px) in small.enumerate_pixels() {
            let k = (y * side + x) as usize;
            let mut lum = 0.0;
            for c in 0..3 {
                let v = 2.0 * f64::from(px.0[c]) - 1.0;
                z[c * n + k] = T::lit(v);
                lum += v / 3.0;
            }
            if self.cfg.latent_channels > 3 {
                z[3 * n + k] = T::lit(lum);
            }
        }
        Tensor::from_vec(&self.latent_shape(), z)
    }

    fn decode_latent(&self, latent: &Tensor<T>) -> Result<RgbImage> {
        self.check_latent(latent)?;
        let side = self.cfg.latent_side;
        let n = side * side;
        let img = RgbImage::from_fn(side as u32, side as u32, |x, y| {
            let k = y as usize * side + x as usize;
            let ch = |c: usize| {
                let v = (latent.data()[c * n + k].as_f64() + 1.0) / 2.0;
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([ch(0), ch(1), ch(2)])
        });
        Ok(img)
    }

    fn predict_noise(&self, z_t: &Tensor<T>, t: usize, cond: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_cond(cond)?;
        let mut g = Graph::new();
        let c = g.constant(cond.clone());
        let out = self.forward(&mut g, z_t, t, c)?;
        Ok(g.value(out).clone())
    }

    fn predict_noise_vjp(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Tensor<T>,
        upstream: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_cond(cond)?;
        let mut g = Graph::new();
        let c = g.input(cond.clone());
        let out = self.forward(&mut g, z_t, t, c)?;
        let grads = g.backward_seeded(&[(out, upstream.clone())])?;
        let gc = grads.of(c).cloned().unwrap_or_else(|| Tensor::zeros(cond.shape()));
        Ok((g.value(out).clone(), gc))
    }

    fn noise_mse_grad(
        &self,
        z_t: &Tensor<T>,
        t: usize,
        cond: &Tensor<T>,
        target: &Tensor<T>,
    ) -> Result<(T, Tensor<T>)> {
        self.check_cond(cond)?;
        let mut g = Graph::new();
        let c = g.input(cond.clone());
        let out = self.forward(&mut g, z_t, t, c)?;
        let tgt = g.constant(target.clone());
        let loss = g.mse(out, tgt)?;
        let grads = g.backward(loss)?;
        let gc = grads.of(c).cloned().unwrap_or_else(|| Tensor::zeros(cond.shape()));
        Ok((g.value(loss).data()[0], gc))
    }

    fn frozen(&self) -> bool {
        self.frozen
    }

    fn parameter_hash(&self) -> String {
        self.params.content_hash()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_parameters() {
        let a = make_toy_backbone::<f32>(3);
        let b = make_toy_backbone::<f32>(3);
        assert_eq!(a.parameter_hash(), b.parameter_hash());
        assert_ne!(a.parameter_hash(), make_toy_backbone::<f32>(4).parameter_hash());
    }

    #[test]
    fn zero_inputs_give_finite_latent_shaped_output() {
        let bb = make_toy_backbone::<f32>(0);
        let z = Tensor::zeros(&[4, 8, 8]);
        let cond = Tensor::zeros(&[85, 32]);
        let out = bb.predict_noise(&z, 10, &cond).unwrap();
        assert_eq!(out.shape(), &[4, 8, 8]);
        assert!(out.all_finite());
    }

    #[test]
    fn conditioning_gradient_matches_finite_difference_probe() {
        let bb = make_toy_backbone::<f64>(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let cond = Tensor::from_fn(&[85, 32], |_| rng.gen_range(-0.5..0.5));
        let ones = Tensor::full(&[4, 8, 8], 1.0);
        let (_, grad) = bb.predict_noise_vjp(&z, 7, &cond, &ones).unwrap();
        assert!(grad.max_abs() > 0.0);
        let h = 1e-6;
        for idx in [0usize, 5, 100, 300, 2000, 2719] {
            let mut p = cond.clone();
            p.data_mut()[idx] += h;
            let mut m = cond.clone();
            m.data_mut()[idx] -= h;
            let fd =
                (bb.predict_noise(&z, 7, &p).unwrap().sum() - bb.predict_noise(&z, 7, &m).unwrap().sum()) / (2.0 * h);
            let an = grad.data()[idx];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "idx {idx}: {fd} vs {an}");
        }
    }

    #[test]
    fn fused_mse_gradient_matches_default_path() {
        let bb = make_toy_backbone::<f64>(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let target = Tensor::from_fn(&[4, 8, 8], |_| rng.gen_range(-1.0..1.0));
        let cond = Tensor::from_fn(&[85, 32], |_| rng.gen_range(-0.5..0.5));
        let (l1, g1) = bb.noise_mse_grad(&z, 20, &cond, &target).unwrap();
        let pred = bb.predict_noise(&z, 20, &cond).unwrap();
        let diff = pred.sub(&target).unwrap();
        let n = diff.len() as f64;
        let (_, g2) = bb.predict_noise_vjp(&z, 20, &cond, &diff.scale(2.0 / n)).unwrap();
        let l2 = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
        assert!((l1 - l2).abs() < 1e-12);
        assert!(g1.sub(&g2).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn variable_conditioning_length_is_accepted() {
        let bb = make_toy_backbone::<f32>(0);
        let z = Tensor::zeros(&[4, 8, 8]);
        assert!(bb.predict_noise(&z, 0, &Tensor::zeros(&[77, 32])).is_ok());
        assert!(bb.predict_noise(&z, 0, &Tensor::zeros(&[77, 31])).is_err());
        assert!(bb.predict_noise(&z, 50, &Tensor::zeros(&[77, 32])).is_err());
    }

    #[test]
    fn latent_autoencoder_round_trips_on_its_own_grid() {
        let bb = make_toy_backbone::<f64>(0);
        let img = RgbImage::from_fn(8, 8, |x, y| Rgb([(x * 30) as u8, (y * 30) as u8, 128]));
        let z = bb.encode_image(&DynamicImage::ImageRgb8(img.clone())).unwrap();
        assert_eq!(z.shape(), &[4, 8, 8]);
        assert_eq!(bb.decode_latent(&z).unwrap(), img);
    }

    #[test]
    fn text_encoding_shapes_and_pooling() {
        let bb = make_toy_backbone::<f32>(0);
        let enc = bb.encode_prompt("a cat in the style of [*].").unwrap();
        assert_eq!(enc.hidden.shape(), &[77, 32]);
        assert_eq!(enc.pooled.shape(), &[32]);
        let eos = bb.tokenizer().encode("a cat in the style of [*].").eos_position();
        assert_eq!(enc.pooled.data(), enc.hidden.row(eos));
    }
}
