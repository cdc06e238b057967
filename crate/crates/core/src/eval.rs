//! Style and image-text scores, the Gram-matrix baseline, and feature
//! clustering (exact t-SNE plus a cosine silhouette).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, Rgb, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint;
use crate::dataset::{StyleSample, STYLE_SUFFIX};
use crate::error::{Error, Result};
use crate::inversion::StyleVector;
use crate::params::normal_tensor;
use crate::prep::{load_rgb, preprocess_image, PreprocessedImage};
use crate::sampler::sample_with_style;
use crate::scalar::Scalar;
use crate::style_module::{
    cosine_similarity, extract_style_feature, predict_style_vector, PredictionMode, StyleEncoder, StyleProjection,
};
use crate::tensor::Tensor;

/// Cosine similarity of the encoder features of two images.
pub fn style_score<T: Scalar>(
    enc: &StyleEncoder<T>,
    original: &DynamicImage,
    reconstruction: &DynamicImage,
) -> Result<f64> {
    let a = extract_style_feature(enc, &preprocess_image(original)?)?;
    let b = extract_style_feature(enc, &preprocess_image(reconstruction)?)?;
    Ok(cosine_similarity(&a, &b)?.as_f64())
}

/// Cosine similarity of the image tower's projected feature and the text
/// encoder's pooled feature.
pub fn image_text_score<T: Scalar>(
    image_tower: &StyleEncoder<T>,
    bundle: &dyn Backbone<T>,
    image: &DynamicImage,
    prompt: &str,
) -> Result<f64> {
    let f = extract_style_feature(image_tower, &preprocess_image(image)?)?;
    let text = bundle.encode_prompt(prompt)?.pooled;
    if text.len() != f.len() {
        return Err(Error::Shape(format!("image feature {} vs text feature {}", f.len(), text.len())));
    }
    Ok(cosine_similarity(&f, &text)?.as_f64())
}

/// `G = F·Fᵀ / (H·W)` for each `[C, H, W]` map.
pub fn gram_features<T: Scalar>(maps: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    maps.iter()
        .map(|m| {
            let &[c, h, w] = m.shape() else {
                return Err(Error::Shape(format!("feature map must be [C, H, W], got {:?}", m.shape())));
            };
            if c * h * w == 0 {
                return Err(Error::Invalid("empty feature map".into()));
            }
            let f = m.reshape(&[c, h * w])?;
            Ok(f.matmul_t(&f)?.scale(T::one() / T::lit((h * w) as f64)))
        })
        .collect()
}

/// A plain 3×3 convolution stack (ReLU after each conv, optional 2×2
/// pooling) whose tapped activations feed [`gram_features`].
#[derive(Clone, Debug)]
pub struct ConvStack<T> {
    convs: Vec<(Tensor<T>, Tensor<T>)>,
    pool_after: Vec<bool>,
    taps: Vec<usize>,
    input_pool: usize,
    max_pool: bool,
}

/// Conv indices inside torchvision's VGG19 `features` block, and whether a
/// max-pool follows each one.
const VGG19_CONVS: [(usize, bool); 16] = [
    (0, false),
    (2, true),
    (5, false),
    (7, true),
    (10, false),
    (12, false),
    (14, false),
    (16, true),
    (19, false),
    (21, false),
    (23, false),
    (25, true),
    (28, false),
    (30, false),
    (32, false),
    (34, true),
];

impl<T: Scalar> ConvStack<T> {
    /// Randomly initialized stack with the given channel widths (input is RGB).
    pub fn random(widths: &[usize], taps: &[usize], input_pool: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut cin = 3;
        for &cout in widths {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            convs.push((normal_tensor(&mut rng, &[cout, cin, 3, 3], std), Tensor::zeros(&[cout])));
            cin = cout;
        }
        let pool_after = vec![true; convs.len()];
        Self::assemble(convs, pool_after, taps, input_pool, false)
    }

    /// Desk-scale baseline: three conv layers of width 8/16/32 on a 56×56
    /// input, tapping all three.
    pub fn toy(seed: u64) -> Self {
        Self::random(&[8, 16, 32], &[0, 1, 2], 4, seed).expect("static configuration is valid")
    }

    /// Loads torchvision VGG19 `features.N.{weight,bias}` tensors; `taps`
    /// index the 16 conv layers (e.g. `[0, 2, 4]` for relu1_1/relu2_1/relu3_1).
    pub fn vgg19(path: &Path, taps: &[usize]) -> Result<Self> {
        let ck = checkpoint::load_weights::<T>(path)?;
        let last = taps.iter().copied().max().unwrap_or(0);
        let mut convs = Vec::new();
        let mut pools = Vec::new();
        for &(idx, pool) in VGG19_CONVS.iter().take(last + 1) {
            let w = ck.tensor(&format!("features.{idx}.weight"))?.clone();
            let b = ck.tensor(&format!("features.{idx}.bias"))?.clone();
            convs.push((w, b));
            pools.push(pool);
        }
        Self::assemble(convs, pools, taps, 1, true)
    }

    fn assemble(
        convs: Vec<(Tensor<T>, Tensor<T>)>,
        pool_after: Vec<bool>,
        taps: &[usize],
        input_pool: usize,
        max_pool: bool,
    ) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|&t| t >= convs.len()) {
            return Err(Error::Invalid(format!("taps {taps:?} must index {} conv layers", convs.len())));
        }
        let mut cin = 3;
        for (w, b) in &convs {
            if w.shape().len() != 4 || w.shape()[1] != cin || w.shape()[2..] != [3, 3] || b.len() != w.shape()[0] {
                return Err(Error::Shape(format!("conv weight {:?} after {cin} channels", w.shape())));
            }
            cin = w.shape()[0];
        }
        if input_pool == 0 {
            return Err(Error::Invalid("input pooling must be ≥ 1".into()));
        }
        Ok(Self { convs, pool_after, taps: taps.to_vec(), input_pool, max_pool })
    }

    /// Tapped activations `[C, H, W]` for a preprocessed image.
    pub fn feature_maps(&self, img: &PreprocessedImage<T>) -> Result<Vec<Tensor<T>>> {
        let mut x = pool(img.pixels(), self.input_pool, false)?;
        let mut out = Vec::new();
        for (i, (w, b)) in self.convs.iter().enumerate() {
            x = conv3x3_relu(&x, w, b)?;
            if self.taps.contains(&i) {
                out.push(x.clone());
            }
            if self.pool_after[i] && i + 1 < self.convs.len() {
                x = pool(&x, 2, self.max_pool)?;
            }
        }
        Ok(out)
    }

    /// Upper triangles of every tapped Gram matrix, concatenated.
    pub fn descriptor(&self, img: &PreprocessedImage<T>) -> Result<Vec<f64>> {
        let grams = gram_features(&self.feature_maps(img)?)?;
        let mut v = Vec::new();
        for g in grams {
            let c = g.rows();
            for i in 0..c {
                for j in i..c {
                    v.push(g.data()[i * c + j].as_f64());
                }
            }
        }
        Ok(v)
    }
}

/// `k×k` average or max pooling with stride `k`.
fn pool<T: Scalar>(x: &Tensor<T>, k: usize, max: bool) -> Result<Tensor<T>> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", x.shape())));
    };
    if k == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::lit((k * k) as f64);
    let d = x.data();
    Ok(Tensor::from_fn(&[c, oh, ow], |i| {
        let (ci, r) = (i / (oh * ow), i % (oh * ow));
        let (y, xx) = (r / ow, r % ow);
        let mut acc = if max { T::neg_infinity() } else { T::zero() };
        for dy in 0..k {
            for dx in 0..k {
                let v = d[ci * h * w + (y * k + dy) * w + xx * k + dx];
                acc = if max { acc.max(v) } else { acc + v };
            }
        }
        if max {
            acc
        } else {
            acc * norm
        }
    }))
}

fn conv3x3_relu<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let &[cin, h, wd] = x.shape() else {
        return Err(Error::Shape(format!("expected [C, H, W], got {:?}", x.shape())));
    };
    let cout = w.shape()[0];
    let (xd, wt, bd) = (x.data(), w.data(), b.data());
    let plane = h * wd;
    let out: Vec<T> = (0..cout)
        .into_par_iter()
        .flat_map_iter(|o| {
            let mut acc = vec![bd[o]; plane];
            for i in 0..cin {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let k = wt[((o * cin + i) * 3 + ky) * 3 + kx];
                        for y in 0..h {
                            let sy = y as isize + ky as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for xx in 0..wd {
                                let sx = xx as isize + kx as isize - 1;
                                if sx < 0 || sx >= wd as isize {
                                    continue;
                                }
                                acc[y * wd + xx] += k * xd[i * plane + sy as usize * wd + sx as usize];
                            }
                        }
                    }
                }
            }
            acc.into_iter().map(|v| v.max(T::zero()))
        })
        .collect();
    Tensor::from_vec(&[cout, h, wd], out)
}

/// Mean cosine silhouette, or `None` when every pairwise distance is zero.
pub fn silhouette_cosine(features: &[Vec<f64>], labels: &[String]) -> Result<Option<f64>> {
    check_clusters(features, labels)?;
    let n = features.len();
    let norms: Vec<f64> = features.iter().map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    if norms.contains(&0.0) {
        return Ok(None);
    }
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let dot: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| a * b).sum();
            let d = (1.0 - dot / (norms[i] * norms[j])).max(0.0);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    if dist.iter().all(|&d| d <= 1e-12) {
        return Ok(None);
    }
    let classes: Vec<&String> = {
        let mut c: Vec<&String> = labels.iter().collect();
        c.sort();
        c.dedup();
        c
    };
    let mut total = 0.0;
    for i in 0..n {
        let mut a = 0.0;
        let mut b = f64::INFINITY;
        for &c in &classes {
            let (sum, cnt) = (0..n)
                .filter(|&j| j != i && labels[j] == *c)
                .fold((0.0, 0usize), |(s, k), j| (s + dist[i * n + j], k + 1));
            if *c == labels[i] {
                a = sum / cnt as f64;
            } else {
                b = b.min(sum / cnt as f64);
            }
        }
        let m = a.max(b);
        total += if m > 0.0 { (b - a) / m } else { 0.0 };
    }
    Ok(Some(total / n as f64))
}

fn check_clusters(features: &[Vec<f64>], labels: &[String]) -> Result<()> {
    if features.len() != labels.len() {
        return Err(Error::Shape(format!("{} features vs {} labels", features.len(), labels.len())));
    }
    let d = features.first().map_or(0, Vec::len);
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features must be non-empty rows of equal length".into()));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l).or_insert(0) += 1;
    }
    if counts.len() < 2 || counts.values().any(|&c| c < 2) {
        return Err(Error::Precondition(format!("need ≥ 2 classes with ≥ 2 members each, got {counts:?}")));
    }
    Ok(())
}

/// `30`, or `(N − 1)/3` when that is smaller.
pub fn default_perplexity(n: usize) -> f64 {
    30f64.min((n as f64 - 1.0) / 3.0)
}

/// Exact t-SNE to two dimensions (squared Euclidean input affinities).
pub fn tsne(features: &[Vec<f64>], perplexity: f64, seed: u64) -> Result<Vec<[f64; 2]>> {
    let n = features.len();
    if n < 2 {
        return Err(Error::Invalid("t-SNE needs at least two points".into()));
    }
    if !(perplexity > 0.0) {
        return Err(Error::Invalid(format!("perplexity must be positive, got {perplexity}")));
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d: f64 = features[i].iter().zip(&features[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[i * n + j] = d;
            d2[j * n + i] = d;
        }
    }
    let p = joint_probabilities(&d2, n, perplexity);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init: Tensor<f64> = normal_tensor(&mut rng, &[n, 2], 1e-4);
    let mut y: Vec<[f64; 2]> = (0..n).map(|i| [init.data()[2 * i], init.data()[2 * i + 1]]).collect();
    let mut vel = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let lr = (n as f64 / 12.0 / 4.0).max(50.0);
    let mut q = vec![0.0; n * n];
    for iter in 0..1000 {
        let exag = if iter < 250 { 12.0 } else { 1.0 };
        let momentum = if iter < 250 { 0.5 } else { 0.8 };
        let mut zsum = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dy = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
                let w = 1.0 / (1.0 + dy[0] * dy[0] + dy[1] * dy[1]);
                q[i * n + j] = w;
                q[j * n + i] = w;
                zsum += 2.0 * w;
            }
        }
        for i in 0..n {
            let mut grad = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q[i * n + j];
                let coef = 4.0 * (exag * p[i * n + j] - w / zsum) * w;
                grad[0] += coef * (y[i][0] - y[j][0]);
                grad[1] += coef * (y[i][1] - y[j][1]);
            }
            for k in 0..2 {
                let same_sign = (grad[k] > 0.0) == (vel[i][k] > 0.0);
                gains[i][k] = if same_sign { (gains[i][k] * 0.8f64).max(0.01) } else { gains[i][k] + 0.2 };
                vel[i][k] = momentum * vel[i][k] - lr * gains[i][k] * grad[k];
            }
        }
        for i in 0..n {
            y[i][0] += vel[i][0];
            y[i][1] += vel[i][1];
        }
        let mean = [y.iter().map(|p| p[0]).sum::<f64>() / n as f64, y.iter().map(|p| p[1]).sum::<f64>() / n as f64];
        for p in &mut y {
            p[0] -= mean[0];
            p[1] -= mean[1];
        }
    }
    Ok(y)
}

/// Symmetrized input affinities with per-point bandwidths found by bisection
/// so that each conditional distribution has the requested perplexity.
fn joint_probabilities(d2: &[f64], n: usize, perplexity: f64) -> Vec<f64> {
    let target = perplexity.ln();
    let mut cond = vec![0.0; n * n];
    for i in 0..n {
        let row = &d2[i * n..(i + 1) * n];
        let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
        let mut probs = vec![0.0; n];
        for _ in 0..100 {
            let dmin = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &d)| d).fold(f64::INFINITY, f64::min);
            let mut sum = 0.0;
            for j in 0..n {
                probs[j] = if j == i { 0.0 } else { (-(row[j] - dmin) * beta).exp() };
                sum += probs[j];
            }
            let mut h = 0.0;
            for j in 0..n {
                probs[j] /= sum;
                if probs[j] > 1e-300 {
                    h -= probs[j] * probs[j].ln();
                }
            }
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        cond[i * n..(i + 1) * n].copy_from_slice(&probs);
    }
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    p
}

const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    pub colors: BTreeMap<String, [u8; 3]>,
    /// `None` when the features are degenerate.
    pub silhouette: Option<f64>,
    pub perplexity: f64,
    pub seed: u64,
}

impl ClusteringReport {
    pub fn silhouette_defined(&self) -> bool {
        self.silhouette.is_some()
    }

    /// Scatter plot of the embedding, one color per label.
    pub fn render(&self, side: u32) -> RgbImage {
        let mut img = RgbImage::from_pixel(side, side, Rgb([255, 255, 255]));
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for c in &self.coords {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        let margin = 8.0;
        let span = side as f64 - 2.0 * margin;
        for (c, l) in self.coords.iter().zip(&self.labels) {
            let at = |k: usize| {
                let r = hi[k] - lo[k];
                margin + if r > 0.0 { (c[k] - lo[k]) / r * span } else { span / 2.0 }
            };
            let (px, py) = (at(0) as i64, at(1) as i64);
            let color = Rgb(self.colors[l]);
            for dy in -2..=2 {
                for dx in -2..=2 {
                    let (x, y) = (px + dx, py + dy);
                    if x >= 0 && y >= 0 && (x as u32) < side && (y as u32) < side {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
        img
    }
}

/// t-SNE coordinates plus the cosine silhouette on the original features.
pub fn clustering_report(features: &[Vec<f64>], labels: &[String], seed: u64) -> Result<ClusteringReport> {
    check_clusters(features, labels)?;
    let perplexity = default_perplexity(features.len());
    let coords = tsne(features, perplexity, seed)?;
    let mut classes: Vec<&String> = labels.iter().collect();
    classes.sort();
    classes.dedup();
    let colors = classes.iter().enumerate().map(|(i, c)| ((*c).clone(), PALETTE[i % PALETTE.len()])).collect();
    Ok(ClusteringReport {
        coords,
        labels: labels.to_vec(),
        colors,
        silhouette: silhouette_cosine(features, labels)?,
        perplexity,
        seed,
    })
}

/// One evaluated test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub image_id: String,
    pub style_score: f64,
    pub image_text_score: f64,
}

/// Which vectors were scored, against which checkpoint and referee.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub vector_source: String,
    pub stage: String,
    pub checkpoint: String,
    pub referee: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub records: Vec<EvalRecord>,
    pub mean_style_score: f64,
    pub mean_image_text_score: f64,
    pub provenance: ReportProvenance,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>, provenance: ReportProvenance) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Invalid("evaluation produced no records".into()));
        }
        for r in &records {
            for v in [r.style_score, r.image_text_score] {
                if !(-1.0..=1.0).contains(&v) {
                    return Err(Error::Invalid(format!("{}: score {v} outside [−1, 1]", r.image_id)));
                }
            }
        }
        let n = records.len() as f64;
        let mean_style_score = records.iter().map(|r| r.style_score).sum::<f64>() / n;
        let mean_image_text_score = records.iter().map(|r| r.image_text_score).sum::<f64>() / n;
        Ok(Self { records, mean_style_score, mean_image_text_score, provenance })
    }

    /// Per-sample table: `image_id,style_score,image_text_score`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        for r in &self.records {
            w.serialize(r).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Vec<EvalRecord>> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        r.deserialize().map(|rec| rec.map_err(csv_err)).collect()
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    csv::Writer::from_path(path).map_err(csv_err)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invalid(format!("csv: {e}"))
}

/// Aggregate table with one row per metric and one column per report.
pub fn write_summary(path: &Path, reports: &[&EvalReport]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|r| r.provenance.vector_source.clone()));
    w.write_record(&header).map_err(csv_err)?;
    let style: Vec<String> = reports.iter().map(|r| format!("{:.6}", r.mean_style_score)).collect();
    let text: Vec<String> = reports.iter().map(|r| format!("{:.6}", r.mean_image_text_score)).collect();
    w.write_record(std::iter::once("style_similarity".to_string()).chain(style)).map_err(csv_err)?;
    w.write_record(std::iter::once("image_text_similarity".to_string()).chain(text)).map_err(csv_err)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Where the scored style vectors come from.
pub enum VectorSource<'a, T> {
    Predicted {
        enc: &'a StyleEncoder<T>,
        projection: Option<&'a StyleProjection<T>>,
        mode: PredictionMode,
    },
    /// Stage-1 vectors keyed by [`sample_id`].
    Stored(&'a BTreeMap<String, StyleVector<T>>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub seed: u64,
    pub steps: usize,
    pub guidance: f64,
    /// When set, reconstructions are written here as `<id>.png`.
    pub output_dir: Option<PathBuf>,
}

/// File stem of the sample image.
pub fn sample_id(s: &StyleSample) -> String {
    s.image_path.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Regenerates every sample from its caption and style vector, then scores
/// the result against the original (style) and the caption (image-text).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint<T: Scalar>(
    bundle: &dyn Backbone<T>,
    referee: &StyleEncoder<T>,
    image_tower: &StyleEncoder<T>,
    source: &VectorSource<'_, T>,
    samples: &[StyleSample],
    settings: &EvalSettings,
    provenance: ReportProvenance,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Invalid("empty test set".into()));
    }
    if let VectorSource::Stored(map) = source {
        let missing: Vec<String> = samples.iter().map(sample_id).filter(|id| !map.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(Error::Missing {
                path: PathBuf::from(&missing[0]),
                what: format!("stage-1 style vectors for {} sample(s)", missing.len()),
            });
        }
    }
    let records = samples
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let id = sample_id(s);
            let original = load_rgb(&s.image_path)?;
            let style = match source {
                VectorSource::Stored(map) => map[&id].clone(),
                VectorSource::Predicted { enc, projection, mode } => {
                    predict_style_vector(enc, *projection, &preprocess_image(&original)?, *mode, &id)?
                }
            };
            let seed = settings.seed.wrapping_add(i as u64);
            let out = sample_with_style(bundle, &style, &s.caption, seed, settings.steps, settings.guidance)?;
            let recon = DynamicImage::ImageRgb8(out.image);
            if let Some(dir) = &settings.output_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                recon.save(dir.join(format!("{id}.png")))?;
            }
            let content = s.caption.strip_suffix(STYLE_SUFFIX).unwrap_or(&s.caption);
            Ok(EvalRecord {
                style_score: style_score(referee, &original, &recon)?,
                image_text_score: image_text_score(image_tower, bundle, &recon, content)?,
                image_id: id,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_records(records, provenance)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::style_module::EncoderConfig;
    use crate::synth::{render, SynthStyle};
    use approx::assert_relative_eq;

    fn naive_gram(m: &Tensor<f64>) -> Vec<f64> {
        let (c, h, w) = (m.shape()[0], m.shape()[1], m.shape()[2]);
        let mut g = vec![0.0; c * c];
        for i in 0..c {
            for j in 0..c {
                let mut s = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        s += m.data()[(i * h + y) * w + x] * m.data()[(j * h + y) * w + x];
                    }
                }
                g[i * c + j] = s / (h * w) as f64;
            }
        }
        g
    }

    #[test]
    fn gram_examples() {
        let one = Tensor::from_fn(&[1, 2, 2], |i| i as f64);
        assert_relative_eq!(gram_features(&[one]).unwrap()[0].data()[0], (0.0 + 1.0 + 4.0 + 9.0) / 4.0);
        let orth = Tensor::from_vec(&[2, 1, 2], vec![1.0, 1.0, 1.0, -1.0]).unwrap();
        assert_eq!(gram_features(&[orth]).unwrap()[0].data(), &[1.0, 0.0, 0.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m: Tensor<f64> = normal_tensor(&mut rng, &[3, 4, 4], 1.0);
        let g = gram_features(std::slice::from_ref(&m)).unwrap();
        for (a, b) in g[0].data().iter().zip(naive_gram(&m)) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        assert!(gram_features(&[Tensor::<f64>::zeros(&[2, 0, 3])]).is_err());
    }

    #[test]
    fn style_score_examples() {
        let enc = StyleEncoder::<f64>::new(EncoderConfig::toy(), 0).unwrap();
        let (a, b) = (render(SynthStyle::Stripes, 0, 64), render(SynthStyle::Hue, 1, 64));
        assert_relative_eq!(style_score(&enc, &a, &a).unwrap(), 1.0, epsilon = 1e-6);
        assert_eq!(style_score(&enc, &a, &b).unwrap(), style_score(&enc, &b, &a).unwrap());
        let fa = extract_style_feature(&enc, &preprocess_image(&a).unwrap()).unwrap();
        let fb = extract_style_feature(&enc, &preprocess_image(&b).unwrap()).unwrap();
        let dot: f64 = fa.data().iter().zip(fb.data()).map(|(x, y)| x * y).sum();
        let want = dot / (fa.norm() * fb.norm());
        assert_relative_eq!(style_score(&enc, &a, &b).unwrap(), want, max_relative = 1e-12);
    }

    #[test]
    fn image_text_score_is_bounded_and_repeatable() {
        let bb = crate::backbone::make_toy_backbone::<f32>(0);
        let tower = StyleEncoder::<f32>::new(EncoderConfig::toy(), 5).unwrap();
        let img = render(SynthStyle::Checker, 2, 64);
        let s = image_text_score(&tower, &bb, &img, "a circle").unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert_eq!(s, image_text_score(&tower, &bb, &img, "a circle").unwrap());
    }

    fn blobs(sep: f64, seed: u64) -> (Vec<Vec<f64>>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (k, center) in [[sep, 0.0, 0.0], [0.0, sep, 0.0]].iter().enumerate() {
            for _ in 0..15 {
                let noise: Tensor<f64> = normal_tensor(&mut rng, &[3], 1.0);
                feats.push(center.iter().zip(noise.data()).map(|(c, e)| c + e).collect());
                labels.push(format!("c{k}"));
            }
        }
        (feats, labels)
    }

    #[test]
    fn separated_blobs_have_high_silhouette() {
        let (f, l) = blobs(10.0, 0);
        let r = clustering_report(&f, &l, 0).unwrap();
        assert!(r.silhouette.unwrap() > 0.8, "{:?}", r.silhouette);
        assert_eq!(r.coords, clustering_report(&f, &l, 0).unwrap().coords);
        assert!(r.coords.iter().all(|c| c[0].is_finite() && c[1].is_finite()));
        let img = r.render(128);
        assert_eq!(img.dimensions(), (128, 128));
    }

    #[test]
    fn clustering_preconditions_and_degenerate_features() {
        let f = vec![vec![1.0], vec![2.0]];
        let l = vec!["a".to_string(), "b".to_string()];
        assert!(matches!(clustering_report(&f, &l, 0), Err(Error::Precondition(_))));
        let same = vec![vec![1.0, 2.0]; 4];
        let l4: Vec<String> = ["a", "a", "b", "b"].iter().map(|s| s.to_string()).collect();
        let r = clustering_report(&same, &l4, 0).unwrap();
        assert!(!r.silhouette_defined());
    }

    /// Direct silhouette on cosine distances, written independently of the
    /// implementation above.
    fn oracle_silhouette(f: &[Vec<f64>], l: &[String]) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            1.0 - d / (n(a) * n(b))
        };
        let mut s = 0.0;
        for i in 0..f.len() {
            let mut per: BTreeMap<&String, Vec<f64>> = BTreeMap::new();
            for j in 0..f.len() {
                if i != j {
                    per.entry(&l[j]).or_default().push(cos(&f[i], &f[j]));
                }
            }
            let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
            let a = mean(&per[&l[i]]);
            let b = per.iter().filter(|(k, _)| **k != &l[i]).map(|(_, v)| mean(v)).fold(f64::INFINITY, f64::min);
            s += (b - a) / a.max(b);
        }
        s / f.len() as f64
    }

    #[test]
    fn silhouette_matches_direct_formula() {
        let (f, l) = blobs(1.5, 3);
        let got = silhouette_cosine(&f, &l).unwrap().unwrap();
        assert_relative_eq!(got, oracle_silhouette(&f, &l), max_relative = 1e-10);
    }

    #[test]
    fn conv_baseline_descriptor() {
        let stack = ConvStack::<f32>::toy(0);
        let img = preprocess_image(&render(SynthStyle::Stripes, 0, 64)).unwrap();
        let maps = stack.feature_maps(&img).unwrap();
        assert_eq!(maps.len(), 3);
        assert_eq!(maps[0].shape(), &[8, 56, 56]);
        assert_eq!(maps[2].shape(), &[32, 14, 14]);
        let d = stack.descriptor(&img).unwrap();
        assert_eq!(d.len(), 36 + 136 + 528);
        assert!(ConvStack::<f32>::random(&[4], &[1], 1, 0).is_err());
    }

    #[test]
    fn report_means_and_csv() {
        let recs = vec![
            EvalRecord { image_id: "a".into(), style_score: 0.5, image_text_score: 0.1 },
            EvalRecord { image_id: "b".into(), style_score: 0.7, image_text_score: -0.3 },
        ];
        let r = EvalReport::from_records(recs.clone(), ReportProvenance::default()).unwrap();
        assert_relative_eq!(r.mean_style_score, 0.6);
        assert_relative_eq!(r.mean_image_text_score, -0.1);
        assert!(EvalReport::from_records(vec![], ReportProvenance::default()).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        r.write_csv(&path).unwrap();
        assert_eq!(EvalReport::read_csv(&path).unwrap(), recs);
        write_summary(&dir.path().join("s.csv"), &[&r]).unwrap();
    }

    proptest::proptest! {
        #[test]
        fn gram_is_symmetric_psd(seed in proptest::prelude::any::<u64>(), c in 1usize..5, h in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: Tensor<f64> = normal_tensor(&mut rng, &[c, h, 3], 1.0);
            let g = &gram_features(&[m]).unwrap()[0];
            for i in 0..c {
                for j in 0..c {
                    proptest::prop_assert_eq!(g.data()[i * c + j], g.data()[j * c + i]);
                }
            }
            let mat = nalgebra::DMatrix::from_row_slice(c, c, g.data());
            let min = mat.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min);
            proptest::prop_assert!(min >= -1e-6, "min eigenvalue {}", min);
        }
    }
}
