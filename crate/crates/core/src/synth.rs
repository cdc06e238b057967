//! Procedural styled images for desk-scale runs.
//!
//! Each image is a random arrangement of circles and squares (the content)
//! rendered with one of a few textures and palettes (the style), so the style
//! label is ground truth by construction and the content caption is known.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, Rgb, RgbImage};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SynthStyle {
    /// Diagonal stripes on a warm palette.
    Stripes,
    /// Checkerboard on a cool palette.
    Checker,
    /// Untextured, hue-shifted magenta/green gradient.
    Hue,
}

impl SynthStyle {
    pub const ALL: [SynthStyle; 3] = [SynthStyle::Stripes, SynthStyle::Checker, SynthStyle::Hue];

    pub fn tag(self) -> &'static str {
        match self {
            SynthStyle::Stripes => "stripes",
            SynthStyle::Checker => "checker",
            SynthStyle::Hue => "hue",
        }
    }
}

impl fmt::Display for SynthStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SynthStyle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthStyle::ALL
            .into_iter()
            .find(|st| st.tag() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown synthetic style {s:?}")))
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { cx: f64, cy: f64, h: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Circle { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Square { cx, cy, h } => (x - cx).abs() <= h && (y - cy).abs() <= h,
        }
    }
}

fn count_word(n: usize, noun: &str) -> Option<String> {
    let num = ["", "a", "two", "three"];
    match n {
        0 => None,
        1 => Some(format!("a {noun}")),
        n => Some(format!("{} {noun}s", num[n.min(3)])),
    }
}

/// Renders one image and returns it with a content-only caption.
pub fn render_scene(style: SynthStyle, seed: u64, size: u32) -> (DynamicImage, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Separate the content stream from the style stream so the same seed gives
    // the same shapes under every style.
    rng.set_stream(1);
    let n = rng.gen_range(1..=3);
    let shapes: Vec<Shape> = (0..n)
        .map(|_| {
            let (cx, cy) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8));
            let s = rng.gen_range(0.1..0.22);
            if rng.gen_bool(0.5) {
                Shape::Circle { cx, cy, r: s }
            } else {
                Shape::Square { cx, cy, h: s * 0.85 }
            }
        })
        .collect();
    let levels: Vec<f64> = (0..n).map(|_| rng.gen_range(0.7..0.95)).collect();
    let background = rng.gen_range(0.25..0.45);

    let mut srng = ChaCha8Rng::seed_from_u64(seed);
    srng.set_stream(2);
    let period = srng.gen_range(7.0..10.0) * size as f64 / 64.0;
    let phase = srng.gen_range(0.0..period);
    let tint = srng.gen_range(-0.06..0.06);

    let side = size as f64;
    let img = RgbImage::from_fn(size, size, |px, py| {
        let (x, y) = ((px as f64 + 0.5) / side, (py as f64 + 0.5) / side);
        let lum = shapes.iter().zip(&levels).rev().find(|(s, _)| s.contains(x, y)).map_or(background, |(_, &l)| l);
        let (fx, fy) = (px as f64 + phase, py as f64 + phase);
        let rgb = match style {
            SynthStyle::Stripes => {
                let on = ((fx + fy) / period).floor() as i64 % 2 == 0;
                let m = if on { 1.0 } else { 0.45 };
                [lum * m, lum * m * (0.72 + tint), lum * m * 0.35]
            }
            SynthStyle::Checker => {
                let on = ((fx / period).floor() as i64 + (fy / period).floor() as i64) % 2 == 0;
                let m = if on { 1.0 } else { 0.45 };
                [lum * m * 0.35, lum * m * (0.7 + tint), lum * m]
            }
            SynthStyle::Hue => {
                let g = 0.75 + 0.25 * y;
                [lum * 0.85 * g, lum * (0.35 + tint) + 0.15 * (1.0 - y), lum * 0.9 * g]
            }
        };
        Rgb(rgb.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
    });

    let circles = shapes.iter().filter(|s| matches!(s, Shape::Circle { .. })).count();
    let squares = n - circles;
    let parts: Vec<String> =
        [count_word(circles, "circle"), count_word(squares, "square")].into_iter().flatten().collect();
    (DynamicImage::ImageRgb8(img), format!("{} on a plain background", parts.join(" and ")))
}

pub fn render(style: SynthStyle, seed: u64, size: u32) -> DynamicImage {
    render_scene(style, seed, size).0
}

/// One written fixture image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fixture {
    pub path: PathBuf,
    pub tag: String,
    pub caption: String,
}

/// Name of the recorded-caption file written next to the fixtures.
pub const CAPTIONS_FILE: &str = "captions.json";

/// Writes `per_style` PNGs for every style under `<dir>/<tag>/`, plus a
/// `captions.json` of recorded content captions keyed by relative path.
pub fn write_fixtures(dir: &Path, per_style: usize, seed: u64, size: u32) -> Result<Vec<Fixture>> {
    let mut out = Vec::new();
    let mut captions = BTreeMap::new();
    for (si, style) in SynthStyle::ALL.into_iter().enumerate() {
        let sub = dir.join(style.tag());
        std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
        for i in 0..per_style {
            let (img, caption) = render_scene(style, seed.wrapping_add((si * 1000 + i) as u64), size);
            let rel = format!("{}/{}_{i:02}.png", style.tag(), style.tag());
            let path = dir.join(&rel);
            img.save(&path)?;
            captions.insert(rel, caption.clone());
            out.push(Fixture { path, tag: style.tag().to_string(), caption });
        }
    }
    let path = dir.join(CAPTIONS_FILE);
    let json = serde_json::to_string_pretty(&captions)?;
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rendering_is_deterministic_and_style_dependent() {
        let a = render(SynthStyle::Stripes, 3, 64);
        assert_eq!(a, render(SynthStyle::Stripes, 3, 64));
        assert_ne!(a, render(SynthStyle::Checker, 3, 64));
        let (_, c1) = render_scene(SynthStyle::Stripes, 3, 64);
        let (_, c2) = render_scene(SynthStyle::Hue, 3, 64);
        assert_eq!(c1, c2, "content does not depend on style");
    }

    #[test]
    fn fixtures_are_written_with_captions() {
        let dir = tempfile::tempdir().unwrap();
        let fx = write_fixtures(dir.path(), 4, 0, 64).unwrap();
        assert_eq!(fx.len(), 12);
        assert!(fx.iter().all(|f| f.path.is_file()));
        let recorded: BTreeMap<String, String> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(CAPTIONS_FILE)).unwrap()).unwrap();
        assert_eq!(recorded.len(), 12);
    }
}
