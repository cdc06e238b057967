//! Feed-forward style extraction: a vision transformer `E_style` whose
//! class-token output is the style feature, and a linear map `P` from that
//! feature to an `8 × d_text` block of style tokens.
//!
//! Encoder parameters use the Hugging Face CLIP vision key names, so the
//! pretrained tower loads by name.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, Checkpoint};
use crate::error::{Error, Result};
use crate::inversion::{Provenance, StyleVector, STYLE_TOKENS};
use crate::params::{normal_tensor, ParamStore};
use crate::prep::{PreprocessedImage, ENCODER_RESOLUTION};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Average-pooling factor applied to the 224×224 input before patching.
    pub pool: usize,
    pub patch: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp: usize,
    /// Output feature size `d_enc`.
    pub d_enc: usize,
}

impl EncoderConfig {
    /// Desk-scale tower: 32×32 pooled input, 4×4 patches, two blocks.
    pub fn toy() -> Self {
        Self { pool: 7, patch: 4, width: 32, layers: 2, heads: 2, mlp: 64, d_enc: 32 }
    }

    /// The ViT-L/14 vision tower (`d_enc = 768`).
    pub fn clip_vit_l14() -> Self {
        Self { pool: 1, patch: 14, width: 1024, layers: 24, heads: 16, mlp: 4096, d_enc: 768 }
    }

    fn grid(&self) -> usize {
        ENCODER_RESOLUTION as usize / self.pool / self.patch
    }

    fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    fn validate(&self) -> Result<()> {
        let side = ENCODER_RESOLUTION as usize;
        if self.pool == 0
            || self.patch == 0
            || !side.is_multiple_of(self.pool)
            || !(side / self.pool).is_multiple_of(self.patch)
        {
            return Err(Error::Invalid(format!("pool {} × patch {} must tile {side}", self.pool, self.patch)));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Invalid(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Vision transformer producing the class-token style feature.
pub struct StyleEncoder<T> {
    cfg: EncoderConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> Clone for StyleEncoder<T> {
    fn clone(&self) -> Self {
        Self { cfg: self.cfg.clone(), params: self.params.clone() }
    }
}

impl<T: Scalar> std::fmt::Debug for StyleEncoder<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StyleEncoder").field("cfg", &self.cfg).field("params", &self.params).finish()
    }
}

fn layer_key(i: usize, rest: &str) -> String {
    format!("vision_model.encoder.layers.{i}.{rest}")
}

impl<T: Scalar> StyleEncoder<T> {
    /// Randomly initialized tower; identical seeds give identical weights.
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, m) = (cfg.width, cfg.mlp);
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let patch_in = 3 * cfg.patch * cfg.patch;
        let mut p = ParamStore::new();
        p.insert("vision_model.embeddings.class_embedding", normal_tensor(&mut rng, &[w], inv(w)));
        p.insert(
            "vision_model.embeddings.patch_embedding.weight",
            normal_tensor(&mut rng, &[w, 3, cfg.patch, cfg.patch], inv(patch_in)),
        );
        p.insert(
            "vision_model.embeddings.position_embedding.weight",
            normal_tensor(&mut rng, &[cfg.tokens(), w], 0.02),
        );
        p.insert("vision_model.pre_layrnorm.weight", Tensor::full(&[w], T::one()));
        p.insert("vision_model.pre_layrnorm.bias", Tensor::zeros(&[w]));
        for i in 0..cfg.layers {
            for ln in ["layer_norm1", "layer_norm2"] {
                p.insert(layer_key(i, &format!("{ln}.weight")), Tensor::full(&[w], T::one()));
                p.insert(layer_key(i, &format!("{ln}.bias")), Tensor::zeros(&[w]));
            }
            for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
                p.insert(layer_key(i, &format!("self_attn.{proj}.weight")), normal_tensor(&mut rng, &[w, w], inv(w)));
                p.insert(layer_key(i, &format!("self_attn.{proj}.bias")), Tensor::zeros(&[w]));
            }
            p.insert(layer_key(i, "mlp.fc1.weight"), normal_tensor(&mut rng, &[m, w], inv(w)));
            p.insert(layer_key(i, "mlp.fc1.bias"), Tensor::zeros(&[m]));
            p.insert(layer_key(i, "mlp.fc2.weight"), normal_tensor(&mut rng, &[w, m], inv(m)));
            p.insert(layer_key(i, "mlp.fc2.bias"), Tensor::zeros(&[w]));
        }
        p.insert("vision_model.post_layernorm.weight", Tensor::full(&[w], T::one()));
        p.insert("vision_model.post_layernorm.bias", Tensor::zeros(&[w]));
        p.insert("visual_projection.weight", normal_tensor(&mut rng, &[cfg.d_enc, w], inv(w)));
        Ok(Self { cfg, params: p })
    }

    /// Loads the vision half of a CLIP checkpoint (e.g.
    /// `clip-vit-large-patch14/model.safetensors`); text-tower keys are ignored.
    pub fn from_clip_weights(cfg: EncoderConfig, path: &Path) -> Result<Self> {
        let mut enc = Self::new(cfg, 0)?;
        let ck = checkpoint::load_weights::<T>(path)?;
        let names: Vec<String> = enc.params.names().to_vec();
        for name in names {
            let t = ck.tensor(&name)?;
            enc.params.set(&name, t.clone())?;
        }
        Ok(enc)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn d_enc(&self) -> usize {
        self.cfg.d_enc
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_hash(&self) -> String {
        self.params.content_hash()
    }

    /// Pools and unfolds the image into `[grid², 3·patch²]` rows in
    /// `(channel, y, x)` order, matching the patch-embedding kernel layout.
    pub fn patchify(&self, img: &PreprocessedImage<T>) -> Result<Tensor<T>> {
        let side = ENCODER_RESOLUTION as usize;
        if img.height() != side || img.width() != side {
            return Err(Error::Shape(format!(
                "style encoder expects {side}×{side} input, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        let (pool, patch, grid) = (self.cfg.pool, self.cfg.patch, self.cfg.grid());
        let small = side / pool;
        let norm = T::one() / T::lit((pool * pool) as f64);
        let mut pooled = vec![T::zero(); 3 * small * small];
        for c in 0..3 {
            for y in 0..small {
                for x in 0..small {
                    let mut acc = T::zero();
                    for dy in 0..pool {
                        for dx in 0..pool {
                            acc += img.at(c, y * pool + dy, x * pool + dx);
                        }
                    }
                    pooled[c * small * small + y * small + x] = acc * norm;
                }
            }
        }
        let cols = 3 * patch * patch;
        let mut rows = vec![T::zero(); grid * grid * cols];
        for gy in 0..grid {
            for gx in 0..grid {
                let r = gy * grid + gx;
                for c in 0..3 {
                    for ky in 0..patch {
                        for kx in 0..patch {
                            let (y, x) = (gy * patch + ky, gx * patch + kx);
                            rows[r * cols + c * patch * patch + ky * patch + kx] =
                                pooled[c * small * small + y * small + x];
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&[grid * grid, cols], rows)
    }

    fn bind(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<Var> {
        g.param_named(&self.params, name, trainable)
    }

    fn bind_row(&self, g: &mut Graph<T>, name: &str, trainable: bool) -> Result<Var> {
        let v = self.bind(g, name, trainable)?;
        let n = g.shape(v).iter().product();
        g.reshape(v, &[1, n])
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let gamma = self.bind(g, &format!("{prefix}.weight"), trainable)?;
        let beta = self.bind(g, &format!("{prefix}.bias"), trainable)?;
        g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }

    fn dense(&self, g: &mut Graph<T>, x: Var, prefix: &str, trainable: bool) -> Result<Var> {
        let w = self.bind(g, &format!("{prefix}.weight"), trainable)?;
        let b = self.bind(g, &format!("{prefix}.bias"), trainable)?;
        g.linear(x, w, Some(b))
    }

    fn attention(&self, g: &mut Graph<T>, x: Var, i: usize, trainable: bool) -> Result<Var> {
        let q = self.dense(g, x, &layer_key(i, "self_attn.q_proj"), trainable)?;
        let k = self.dense(g, x, &layer_key(i, "self_attn.k_proj"), trainable)?;
        let v = self.dense(g, x, &layer_key(i, "self_attn.v_proj"), trainable)?;
        let dh = self.cfg.width / self.cfg.heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.scale(logits, scale);
            let a = g.softmax_rows(logits);
            heads.push(g.matmul(a, vh)?);
        }
        let joined = g.concat_cols(&heads)?;
        self.dense(g, joined, &layer_key(i, "self_attn.out_proj"), trainable)
    }

    /// Builds the forward pass from pre-patchified input and returns the
    /// `[1, d_enc]` feature node.
    pub fn forward_patches(&self, g: &mut Graph<T>, patches: &Tensor<T>, trainable: bool) -> Result<Var> {
        let (w, patch) = (self.cfg.width, self.cfg.patch);
        let x = g.constant(patches.clone());
        let kernel = self.bind(g, "vision_model.embeddings.patch_embedding.weight", trainable)?;
        let kernel = g.reshape(kernel, &[w, 3 * patch * patch])?;
        let emb = g.matmul_t(x, kernel)?;
        let cls = self.bind_row(g, "vision_model.embeddings.class_embedding", trainable)?;
        let seq = g.concat_rows(&[cls, emb])?;
        let pos = self.bind(g, "vision_model.embeddings.position_embedding.weight", trainable)?;
        let mut h = g.add(seq, pos)?;
        h = self.norm(g, h, "vision_model.pre_layrnorm", trainable)?;
        for i in 0..self.cfg.layers {
            let a = self.norm(g, h, &layer_key(i, "layer_norm1"), trainable)?;
            let a = self.attention(g, a, i, trainable)?;
            h = g.add(h, a)?;
            let m = self.norm(g, h, &layer_key(i, "layer_norm2"), trainable)?;
            let m = self.dense(g, m, &layer_key(i, "mlp.fc1"), trainable)?;
            let m = g.quick_gelu(m);
            let m = self.dense(g, m, &layer_key(i, "mlp.fc2"), trainable)?;
            h = g.add(h, m)?;
        }
        let cls_out = g.slice_rows(h, 0, 1)?;
        let cls_out = self.norm(g, cls_out, "vision_model.post_layernorm", trainable)?;
        let proj = self.bind(g, "visual_projection.weight", trainable)?;
        g.matmul_t(cls_out, proj)
    }

    pub fn forward(&self, g: &mut Graph<T>, img: &PreprocessedImage<T>, trainable: bool) -> Result<Var> {
        let patches = self.patchify(img)?;
        self.forward_patches(g, &patches, trainable)
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = meta.clone();
        meta.insert("kind".into(), "style_encoder".into());
        meta.insert("config".into(), serde_json::to_string(&self.cfg)?);
        checkpoint::save_store(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        expect_kind(&ck, path, "style_encoder")?;
        let cfg: EncoderConfig = serde_json::from_str(ck.meta("config")?)?;
        let mut enc = Self::new(cfg, 0)?;
        checkpoint::restore_store(&mut enc.params, &ck)?;
        Ok(enc)
    }
}

fn expect_kind<T: Scalar>(ck: &Checkpoint<T>, path: &Path, kind: &str) -> Result<()> {
    let got = ck.meta("kind")?;
    if got != kind {
        return Err(Error::Checkpoint(format!("{}: holds a {got}, expected a {kind}", path.display())));
    }
    Ok(())
}

/// Affine map `f ↦ f·W + b` reshaped to `8 × d_text`.
pub struct StyleProjection<T> {
    d_enc: usize,
    d_text: usize,
    params: ParamStore<T>,
}

impl<T: Scalar> Clone for StyleProjection<T> {
    fn clone(&self) -> Self {
        Self { d_enc: self.d_enc, d_text: self.d_text, params: self.params.clone() }
    }
}

impl<T: Scalar> std::fmt::Debug for StyleProjection<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StyleProjection").field("d_enc", &self.d_enc).field("d_text", &self.d_text).finish()
    }
}

const PROJ_W: &str = "projection.weight";
const PROJ_B: &str = "projection.bias";

impl<T: Scalar> StyleProjection<T> {
    /// Weights drawn with std 0.02 and a zero bias.
    pub fn new(d_enc: usize, d_text: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = normal_tensor(&mut rng, &[d_enc, STYLE_TOKENS * d_text], 0.02);
        Self::from_parts(w, Tensor::zeros(&[STYLE_TOKENS * d_text]), d_text).expect("shapes built above")
    }

    /// `weight` is `d_enc × (8·d_text)`, `bias` has `8·d_text` entries.
    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>, d_text: usize) -> Result<Self> {
        let out = STYLE_TOKENS * d_text;
        if weight.shape().len() != 2 || weight.cols() != out || bias.shape() != [out] {
            return Err(Error::Shape(format!(
                "projection weight {:?} / bias {:?} do not map to {STYLE_TOKENS}×{d_text}",
                weight.shape(),
                bias.shape()
            )));
        }
        let d_enc = weight.rows();
        let mut params = ParamStore::new();
        params.insert(PROJ_W, weight);
        params.insert(PROJ_B, bias);
        Ok(Self { d_enc, d_text, params })
    }

    pub fn d_enc(&self) -> usize {
        self.d_enc
    }

    pub fn d_text(&self) -> usize {
        self.d_text
    }

    pub fn weight(&self) -> &Tensor<T> {
        self.params.get(PROJ_W).expect("projection weight")
    }

    pub fn bias(&self) -> &Tensor<T> {
        self.params.get(PROJ_B).expect("projection bias")
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn parameter_hash(&self) -> String {
        self.params.content_hash()
    }

    /// `f: [1, d_enc]` node → `[8, d_text]` node.
    pub fn forward(&self, g: &mut Graph<T>, f: Var, trainable: bool) -> Result<Var> {
        let w = g.param_named(&self.params, PROJ_W, trainable)?;
        let b = g.param_named(&self.params, PROJ_B, trainable)?;
        let y = g.matmul(f, w)?;
        let y = g.add_row(y, b)?;
        g.reshape(y, &[STYLE_TOKENS, self.d_text])
    }

    pub fn save(&self, path: &Path, meta: &BTreeMap<String, String>) -> Result<()> {
        let mut meta = meta.clone();
        meta.insert("kind".into(), "style_projection".into());
        meta.insert("d_text".into(), self.d_text.to_string());
        checkpoint::save_store(path, &self.params, &meta)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::load::<T>(path)?;
        expect_kind(&ck, path, "style_projection")?;
        let d_text =
            ck.meta("d_text")?.parse().map_err(|_| Error::Checkpoint(format!("{}: bad d_text", path.display())))?;
        Self::from_parts(ck.tensor(PROJ_W)?.clone(), ck.tensor(PROJ_B)?.clone(), d_text)
    }
}

/// `f_style = E_style(I)`, a `[d_enc]` vector.
pub fn extract_style_feature<T: Scalar>(enc: &StyleEncoder<T>, img: &PreprocessedImage<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = enc.forward(&mut g, img, false)?;
    let out = g.value(f).reshape(&[enc.d_enc()])?;
    if !out.all_finite() {
        return Err(Error::NonFinite { context: "style feature".into(), step: 0 });
    }
    Ok(out)
}

/// `P(f)` reshaped to `8 × d_text`.
pub fn project<T: Scalar>(p: &StyleProjection<T>, f: &Tensor<T>) -> Result<Tensor<T>> {
    if f.len() != p.d_enc() {
        return Err(Error::Shape(format!("feature of size {} for a d_enc={} projection", f.len(), p.d_enc())));
    }
    if !f.all_finite() {
        return Err(Error::Invalid("non-finite style feature".into()));
    }
    let row = f.reshape(&[1, p.d_enc()])?;
    let y = row.matmul(p.weight())?.into_reshape(&[STYLE_TOKENS * p.d_text()])?;
    y.add(p.bias())?.into_reshape(&[STYLE_TOKENS, p.d_text()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMode {
    Projected,
    AblationReplicated,
}

/// Copies a `d`-vector into all 8 rows.
pub fn replicate<T: Scalar>(f: &Tensor<T>) -> Result<Tensor<T>> {
    let row = f.reshape(&[1, f.len()])?;
    Tensor::concat_rows(&[&row; STYLE_TOKENS])
}

pub fn predict_style_vector<T: Scalar>(
    enc: &StyleEncoder<T>,
    p: Option<&StyleProjection<T>>,
    img: &PreprocessedImage<T>,
    mode: PredictionMode,
    image_id: &str,
) -> Result<StyleVector<T>> {
    let f = extract_style_feature(enc, img)?;
    match mode {
        PredictionMode::Projected => {
            let p = p.ok_or_else(|| Error::Precondition("projected mode needs a projection".into()))?;
            StyleVector::new(project(p, &f)?, Provenance::Predicted, image_id, 0)
        }
        PredictionMode::AblationReplicated => {
            StyleVector::new(replicate(&f)?, Provenance::AblationReplicated, image_id, 0)
        }
    }
}

/// Ablation mode feeds encoder features straight into text space.
pub fn check_ablation_dims(d_enc: usize, d_text: usize) -> Result<()> {
    if d_enc != d_text {
        return Err(Error::Precondition(format!(
            "replicated-feature mode needs d_enc == d_text, got {d_enc} vs {d_text}"
        )));
    }
    Ok(())
}

/// Ablation-mode prediction with the dimension check applied.
pub fn predict_ablation<T: Scalar>(
    enc: &StyleEncoder<T>,
    img: &PreprocessedImage<T>,
    d_text: usize,
    image_id: &str,
) -> Result<StyleVector<T>> {
    check_ablation_dims(enc.d_enc(), d_text)?;
    predict_style_vector(enc, None, img, PredictionMode::AblationReplicated, image_id)
}

fn cosine<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("cosine of sizes {} and {}", a.len(), b.len())));
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == T::zero() || nb == T::zero() {
        return Err(Error::Invalid("cosine similarity of a zero-norm vector".into()));
    }
    let dot: T = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Cosine similarity with a zero-norm check, clamped to `[−1, 1]`.
pub fn cosine_similarity<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    Ok(cosine(a, b)?.max(-T::one()).min(T::one()))
}

/// `mean_i (1 − cos(img_i, tag_i))`.
pub fn cosine_clip_loss<T: Scalar>(img_feats: &[Tensor<T>], tag_feats: &[Tensor<T>]) -> Result<T> {
    if img_feats.len() != tag_feats.len() {
        return Err(Error::Shape(format!("{} image features vs {} tag features", img_feats.len(), tag_feats.len())));
    }
    if img_feats.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let mut total = T::zero();
    for (a, b) in img_feats.iter().zip(tag_feats) {
        total += T::one() - cosine_similarity(a, b)?;
    }
    Ok(total / T::lit(img_feats.len() as f64))
}

/// Mean squared elementwise difference.
pub fn map_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    let d = pred.sub(target)?;
    Ok(d.data().iter().map(|&x| x * x).sum::<T>() / T::lit(d.len().max(1) as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prep::preprocess_image;
    use image::{DynamicImage, Rgb, RgbImage};
    use proptest::prelude::*;

    fn zero_image<T: Scalar>() -> PreprocessedImage<T> {
        PreprocessedImage::from_tensor(Tensor::zeros(&[3, 224, 224])).unwrap()
    }

    #[test]
    fn toy_encoder_feature_shape_and_determinism() {
        let enc = StyleEncoder::<f32>::new(EncoderConfig::toy(), 0).unwrap();
        let f = extract_style_feature(&enc, &zero_image()).unwrap();
        assert_eq!(f.shape(), &[32]);
        assert_eq!(f, extract_style_feature(&enc, &zero_image()).unwrap());
        let again = StyleEncoder::<f32>::new(EncoderConfig::toy(), 0).unwrap();
        assert_eq!(enc.parameter_hash(), again.parameter_hash());
    }

    #[test]
    fn wrong_spatial_size_is_rejected() {
        let enc = StyleEncoder::<f32>::new(EncoderConfig::toy(), 0).unwrap();
        let small = PreprocessedImage::from_tensor(Tensor::zeros(&[3, 112, 112])).unwrap();
        assert!(matches!(extract_style_feature(&enc, &small), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_survives_a_lossless_codec_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_fn(50, 40, |x, y| Rgb([(x * 5) as u8, (y * 6) as u8, ((x + y) * 2) as u8]));
        let path = dir.path().join("a.png");
        img.save(&path).unwrap();
        let enc = StyleEncoder::<f64>::new(EncoderConfig::toy(), 3).unwrap();
        let a = extract_style_feature(&enc, &preprocess_image(&DynamicImage::ImageRgb8(img)).unwrap()).unwrap();
        let b =
            extract_style_feature(&enc, &preprocess_image(&crate::prep::load_rgb(&path).unwrap()).unwrap()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn patchify_layout_matches_kernel_order() {
        let enc = StyleEncoder::<f64>::new(EncoderConfig { pool: 1, patch: 14, ..EncoderConfig::toy() }, 0).unwrap();
        let px = Tensor::from_fn(&[3, 224, 224], |i| i as f64);
        let rows = enc.patchify(&PreprocessedImage::from_tensor(px.clone()).unwrap()).unwrap();
        assert_eq!(rows.shape(), &[256, 3 * 14 * 14]);
        // patch (1, 2), channel 2, ky 3, kx 5
        let (r, c) = (16 + 2, 2 * 196 + 3 * 14 + 5);
        assert_eq!(rows.row(r)[c], px.data()[2 * 224 * 224 + (14 + 3) * 224 + 28 + 5]);
    }

    #[test]
    fn projection_affine_identities() {
        let zero = StyleProjection::<f64>::from_parts(Tensor::zeros(&[4, 24]), Tensor::zeros(&[24]), 3).unwrap();
        assert_eq!(project(&zero, &Tensor::full(&[4], 1.0)).unwrap().max_abs(), 0.0);
        let bias = Tensor::from_fn(&[24], |i| i as f64);
        let p = StyleProjection::from_parts(Tensor::full(&[4, 24], 0.5), bias.clone(), 3).unwrap();
        assert_eq!(project(&p, &Tensor::zeros(&[4])).unwrap(), bias.reshape(&[8, 3]).unwrap());
        assert!(project(&p, &Tensor::zeros(&[5])).is_err());
        assert!(StyleProjection::from_parts(Tensor::<f64>::zeros(&[4, 23]), Tensor::zeros(&[23]), 3).is_err());
    }

    #[test]
    fn graph_projection_matches_direct() {
        let p = StyleProjection::<f64>::new(6, 4, 1);
        let f = Tensor::from_fn(&[6], |i| i as f64 - 2.0);
        let mut g = Graph::new();
        let fv = g.constant(f.reshape(&[1, 6]).unwrap());
        let out = p.forward(&mut g, fv, false).unwrap();
        let direct = project(&p, &f).unwrap();
        assert!(g.value(out).sub(&direct).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn ablation_rows_identical_and_dimension_checked() {
        let enc = StyleEncoder::<f32>::new(EncoderConfig::toy(), 0).unwrap();
        let v = predict_ablation(&enc, &zero_image(), 32, "z").unwrap();
        assert_eq!(v.provenance(), Provenance::AblationReplicated);
        for r in 1..8 {
            assert_eq!(v.tokens().row(r), v.tokens().row(0));
        }
        assert!(matches!(predict_ablation(&enc, &zero_image(), 33, "z"), Err(Error::Precondition(_))));
        let p = StyleProjection::new(32, 32, 0);
        let v = predict_style_vector(&enc, Some(&p), &zero_image(), PredictionMode::Projected, "z").unwrap();
        assert_eq!(v.provenance(), Provenance::Predicted);
        let f = extract_style_feature(&enc, &zero_image()).unwrap();
        assert_eq!(*v.tokens(), project(&p, &f).unwrap());
    }

    #[test]
    fn cosine_loss_reference_points() {
        let a = Tensor::from_vec(&[2], vec![1.0f64, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.0f64, 3.0]).unwrap();
        let neg = a.scale(-2.0);
        assert!(cosine_clip_loss(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap().abs() < 1e-12);
        assert!((cosine_clip_loss(std::slice::from_ref(&a), &[b]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine_clip_loss(std::slice::from_ref(&a), &[neg]).unwrap() - 2.0).abs() < 1e-12);
        assert!(cosine_clip_loss(std::slice::from_ref(&a), &[Tensor::zeros(&[2])]).is_err());
        assert!(cosine_clip_loss::<f64>(&[], &[]).is_err());
    }

    #[test]
    fn map_loss_reference_points() {
        let t = Tensor::from_fn(&[8, 3], |i| i as f64);
        assert_eq!(map_loss(&t, &t).unwrap(), 0.0);
        assert!((map_loss(&t.map(|x| x + 2.0), &t).unwrap() - 4.0).abs() < 1e-12);
        assert!(map_loss(&t, &Tensor::zeros(&[8, 4])).is_err());
    }

    #[test]
    fn encoder_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let enc = StyleEncoder::<f32>::new(EncoderConfig::toy(), 9).unwrap();
        let path = dir.path().join("enc.safetensors");
        enc.save(&path, &BTreeMap::new()).unwrap();
        let back = StyleEncoder::<f32>::load(&path).unwrap();
        assert_eq!(back.parameter_hash(), enc.parameter_hash());
        assert!(StyleProjection::<f32>::load(&path).is_err());
        let p = StyleProjection::<f32>::new(32, 32, 2);
        let ppath = dir.path().join("proj.safetensors");
        p.save(&ppath, &BTreeMap::new()).unwrap();
        assert_eq!(StyleProjection::<f32>::load(&ppath).unwrap().parameter_hash(), p.parameter_hash());
    }

    fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-2.0f64..2.0, n)
    }

    proptest! {
        #[test]
        fn cosine_loss_is_scale_invariant(a in vec_strategy(5), b in vec_strategy(5), c1 in 0.01f64..100.0, c2 in 0.01f64..100.0) {
            let ta = Tensor::from_vec(&[5], a).unwrap();
            let tb = Tensor::from_vec(&[5], b).unwrap();
            prop_assume!(ta.norm() > 1e-3 && tb.norm() > 1e-3);
            let base = cosine_clip_loss(std::slice::from_ref(&ta), std::slice::from_ref(&tb)).unwrap();
            let scaled = cosine_clip_loss(&[ta.scale(c1)], &[tb.scale(c2)]).unwrap();
            prop_assert!((base - scaled).abs() < 1e-12);
        }

        #[test]
        fn map_loss_is_symmetric(a in vec_strategy(16), b in vec_strategy(16)) {
            let ta = Tensor::from_vec(&[8, 2], a).unwrap();
            let tb = Tensor::from_vec(&[8, 2], b).unwrap();
            prop_assert_eq!(map_loss(&ta, &tb).unwrap(), map_loss(&tb, &ta).unwrap());
        }

        #[test]
        fn projection_is_affine(f1 in vec_strategy(4), f2 in vec_strategy(4), seed in 0u64..1000) {
            let p = StyleProjection::<f64>::new(4, 2, seed);
            let (a, b) = (Tensor::from_vec(&[4], f1).unwrap(), Tensor::from_vec(&[4], f2).unwrap());
            let lhs = project(&p, &a.add(&b).unwrap()).unwrap();
            let rhs = project(&p, &a).unwrap().add(&project(&p, &b).unwrap()).unwrap();
            let resid = lhs.sub(&rhs).unwrap().add(&project(&p, &Tensor::zeros(&[4])).unwrap()).unwrap();
            prop_assert!(resid.max_abs() < 1e-12);
        }
    }
}
