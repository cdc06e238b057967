//! Dataset records, caption validation and the train/test split.
//!
//! A manifest is a newline-delimited JSON file, one `{image, caption, tag,
//! split}` object per line, with a `.meta.json` sidecar holding the blacklist
//! version and build metadata. Captions come from an external vision-language
//! service asked for content only; a word blacklist then checks mechanically
//! that no style vocabulary slipped through.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Suffix appended to every content caption.
pub const STYLE_SUFFIX: &str = " in the style of [*].";

/// Instruction sent with every captioning request, byte for byte.
pub const CAPTION_PROMPT: &str = "Describe only the content and subject of this image in short words. Must ignore any artistic style and Do not mention the artist, the style. Focus purely on what objects or subjects are depicted. Do not use words like 'abstract', 'colorful', 'abstract expressionism'. Do not mention colors, textures, brushstrokes, lighting style, artistic movement, or overall mood.";

/// Words the prompt forbids; the seed of every blacklist.
pub const DEFAULT_BLACKLIST: [&str; 3] = ["abstract", "colorful", "abstract expressionism"];
const DEFAULT_BLACKLIST_VERSION: &str = "builtin-1";

const MANIFEST_FORMAT: &str = "1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One `(image, caption, tag, split)` record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleSample {
    #[serde(rename = "image")]
    pub image_path: PathBuf,
    pub caption: String,
    pub tag: String,
    pub split: Split,
}

impl StyleSample {
    pub fn new(image_path: impl Into<PathBuf>, caption: &str, tag: &str, blacklist: &Blacklist) -> Result<Self> {
        let s = Self { image_path: image_path.into(), caption: caption.into(), tag: tag.into(), split: Split::Train };
        s.validate(blacklist)?;
        Ok(s)
    }

    pub fn validate(&self, blacklist: &Blacklist) -> Result<()> {
        if self.caption.trim().is_empty() {
            return Err(Error::Validation(format!("{}: empty caption", self.image_path.display())));
        }
        if self.tag.trim().is_empty() {
            return Err(Error::Validation(format!("{}: empty tag", self.image_path.display())));
        }
        if let CaptionCheck::Reject(words) = validate_caption(&self.caption, blacklist) {
            return Err(Error::Validation(format!(
                "{}: caption uses style words {words:?}",
                self.image_path.display()
            )));
        }
        Ok(())
    }
}

/// Case-insensitive whole-word blacklist.
#[derive(Clone, Debug)]
pub struct Blacklist {
    version: String,
    entries: Vec<(String, Regex)>,
}

impl Default for Blacklist {
    fn default() -> Self {
        Self::new(DEFAULT_BLACKLIST, DEFAULT_BLACKLIST_VERSION).expect("built-in blacklist is valid")
    }
}

impl Blacklist {
    /// Entries are lowercased and deduplicated; multi-word entries match
    /// across any run of whitespace. An entry must start and end with a word
    /// character and must not occur in [`STYLE_SUFFIX`].
    pub fn new<S: AsRef<str>>(words: impl IntoIterator<Item = S>, version: &str) -> Result<Self> {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(Error::Invalid("blacklist is empty".into()));
        }
        let mut entries = Vec::with_capacity(words.len());
        for w in words {
            let edge = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
            if !edge(w.chars().next()) || !edge(w.chars().last()) {
                return Err(Error::Invalid(format!("blacklist entry {w:?} must start and end with a letter or digit")));
            }
            let body = w.split(' ').map(regex::escape).collect::<Vec<_>>().join(r"\s+");
            let re = Regex::new(&format!(r"(?i)\b{body}\b")).map_err(|e| Error::Invalid(e.to_string()))?;
            if re.is_match(STYLE_SUFFIX) {
                return Err(Error::Invalid(format!("blacklist entry {w:?} would reject the style suffix")));
            }
            entries.push((w, re));
        }
        Ok(Self { version: version.into(), entries })
    }

    /// The built-in words plus one entry per non-empty, non-`#` line of
    /// `path`. The version records a digest of the file.
    pub fn with_extension_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let extra = text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
        let digest = hex::encode(Sha256::digest(text.as_bytes()));
        let version = format!("{DEFAULT_BLACKLIST_VERSION}+{}", &digest[..12]);
        Self::new(DEFAULT_BLACKLIST.into_iter().chain(extra), &version)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(w, _)| w.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CaptionCheck {
    Accept,
    /// The blacklist entries found in the caption.
    Reject(BTreeSet<String>),
}

impl CaptionCheck {
    pub fn is_accept(&self) -> bool {
        matches!(self, CaptionCheck::Accept)
    }
}

pub fn validate_caption(caption: &str, blacklist: &Blacklist) -> CaptionCheck {
    let hits: BTreeSet<String> =
        blacklist.entries.iter().filter(|(_, re)| re.is_match(caption)).map(|(w, _)| w.clone()).collect();
    if hits.is_empty() {
        CaptionCheck::Accept
    } else {
        CaptionCheck::Reject(hits)
    }
}

/// `caption + " in the style of [*]."`. Fails on an empty caption or one that
/// already carries the suffix.
pub fn append_style_suffix(caption: &str) -> Result<String> {
    if caption.trim().is_empty() {
        return Err(Error::Validation("empty caption".into()));
    }
    if caption.ends_with(STYLE_SUFFIX) {
        return Err(Error::Validation(format!("caption already suffixed: {caption:?}")));
    }
    Ok(format!("{caption}{STYLE_SUFFIX}"))
}

/// A caption that failed the blacklist during a build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub image: PathBuf,
    pub caption: String,
    pub words: Vec<String>,
}

/// Build and split bookkeeping stored in the manifest sidecar.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub captioner: String,
    pub rejected: Vec<Rejection>,
    pub split_seed: Option<u64>,
    pub test_size: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: String,
    blacklist_version: String,
    #[serde(flatten)]
    meta: ManifestMeta,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    samples: Vec<StyleSample>,
    blacklist_version: String,
    meta: ManifestMeta,
}

impl Manifest {
    /// Checks path uniqueness, non-empty captions and tags, and tag coverage
    /// of the test split whenever one exists.
    pub fn new(samples: Vec<StyleSample>, blacklist_version: &str, meta: ManifestMeta) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.caption.trim().is_empty() || s.tag.trim().is_empty() {
                return Err(Error::Validation(format!("{}: empty caption or tag", s.image_path.display())));
            }
            if !seen.insert(&s.image_path) {
                return Err(Error::Invalid(format!("duplicate image {}", s.image_path.display())));
            }
        }
        let m = Self { samples, blacklist_version: blacklist_version.into(), meta };
        if m.samples.iter().any(|s| s.split == Split::Test) {
            let missing: Vec<&str> = m.tags().difference(&m.test_tags()).copied().collect();
            if !missing.is_empty() {
                return Err(Error::Invalid(format!("tags absent from the test split: {missing:?}")));
            }
        }
        Ok(m)
    }

    pub fn samples(&self) -> &[StyleSample] {
        &self.samples
    }

    pub fn blacklist_version(&self) -> &str {
        &self.blacklist_version
    }

    pub fn meta(&self) -> &ManifestMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tags(&self) -> BTreeSet<&str> {
        self.samples.iter().map(|s| s.tag.as_str()).collect()
    }

    fn test_tags(&self) -> BTreeSet<&str> {
        self.samples.iter().filter(|s| s.split == Split::Test).map(|s| s.tag.as_str()).collect()
    }

    pub fn split(&self, which: Split) -> impl Iterator<Item = &StyleSample> {
        self.samples.iter().filter(move |s| s.split == which)
    }

    pub fn tag_counts(&self) -> BTreeMap<&str, usize> {
        let mut out = BTreeMap::new();
        for s in &self.samples {
            *out.entry(s.tag.as_str()).or_insert(0) += 1;
        }
        out
    }

    pub fn to_ndjson(&self) -> Result<String> {
        let mut out = String::new();
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_ndjson(text: &str, blacklist_version: &str, meta: ManifestMeta) -> Result<Self> {
        let samples = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<StyleSample>, _>>()?;
        Self::new(samples, blacklist_version, meta)
    }

    /// Writes the records to `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_ndjson()?).map_err(|e| Error::io(path, e))?;
        let side = Sidecar {
            format_version: MANIFEST_FORMAT.into(),
            blacklist_version: self.blacklist_version.clone(),
            meta: self.meta.clone(),
        };
        let mp = meta_path(path);
        std::fs::write(&mp, serde_json::to_string_pretty(&side)? + "\n").map_err(|e| Error::io(&mp, e))
    }

    /// Reads a manifest; a missing sidecar leaves the blacklist version
    /// `"unknown"`.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing { path: path.to_path_buf(), what: "dataset manifest".into() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mp = meta_path(path);
        let (version, meta) = if mp.is_file() {
            let raw = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
            let side: Sidecar = serde_json::from_str(&raw)?;
            if side.format_version != MANIFEST_FORMAT {
                return Err(Error::Invalid(format!("{}: manifest format {}", mp.display(), side.format_version)));
            }
            (side.blacklist_version, side.meta)
        } else {
            ("unknown".to_string(), ManifestMeta::default())
        };
        Self::from_ndjson(&text, &version, meta)
    }
}

/// `manifest.ndjson` → `manifest.meta.json`.
pub fn meta_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("meta.json")
}

/// Marks exactly `test_size` samples as test, at least one per tag.
///
/// One sample per tag is drawn first (seeded shuffle within the tag), then the
/// rest of the test set is filled by seeded sampling over all remaining
/// samples. Sample order is preserved.
pub fn split_dataset(manifest: &Manifest, test_size: usize, seed: u64) -> Result<Manifest> {
    let n = manifest.len();
    let mut by_tag: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in manifest.samples.iter().enumerate() {
        by_tag.entry(s.tag.as_str()).or_default().push(i);
    }
    if test_size < by_tag.len() {
        return Err(Error::Precondition(format!("test size {test_size} cannot cover {} distinct tags", by_tag.len())));
    }
    if test_size >= n {
        return Err(Error::Precondition(format!("test size {test_size} must be below the sample count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut test = vec![false; n];
    for idx in by_tag.values_mut() {
        idx.shuffle(&mut rng);
        test[idx[0]] = true;
    }
    let mut rest: Vec<usize> = (0..n).filter(|&i| !test[i]).collect();
    rest.shuffle(&mut rng);
    for &i in &rest[..test_size - by_tag.len()] {
        test[i] = true;
    }
    let samples = manifest
        .samples
        .iter()
        .zip(&test)
        .map(|(s, &t)| StyleSample { split: if t { Split::Test } else { Split::Train }, ..s.clone() })
        .collect();
    let meta = ManifestMeta { split_seed: Some(seed), test_size: Some(test_size), ..manifest.meta.clone() };
    Manifest::new(samples, &manifest.blacklist_version, meta)
}

/// A captioning backend. Implementations must return the service text
/// unchanged.
pub trait Captioner: Send + Sync {
    /// Identifier recorded in the manifest sidecar.
    fn describe(&self) -> String;

    fn caption(&self, image: &Path, bytes: &[u8]) -> Result<String>;
}

/// Asks `client` for a content-only caption of `image`.
pub fn generate_caption(image: &Path, client: &dyn Captioner) -> Result<String> {
    let bytes = std::fs::read(image).map_err(|e| Error::io(image, e))?;
    image::load_from_memory(&bytes)?;
    let text = client.caption(image, &bytes)?;
    if text.trim().is_empty() {
        return Err(Error::Validation(format!("{}: service returned an empty caption", image.display())));
    }
    Ok(text)
}

/// Replays captions from a JSON object keyed by image path relative to `root`
/// (falling back to the bare file name).
#[derive(Clone, Debug)]
pub struct RecordedCaptioner {
    root: PathBuf,
    responses: BTreeMap<String, String>,
}

impl RecordedCaptioner {
    pub fn new(root: impl Into<PathBuf>, responses: BTreeMap<String, String>) -> Self {
        Self { root: root.into(), responses }
    }

    pub fn from_file(path: &Path, root: impl Into<PathBuf>) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Missing { path: path.to_path_buf(), what: "recorded captions".into() });
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::new(root, serde_json::from_str(&text)?))
    }

    fn key(&self, image: &Path) -> Option<&String> {
        let rel = image.strip_prefix(&self.root).unwrap_or(image);
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        self.responses.get(&rel).or_else(|| {
            let name = image.file_name()?.to_string_lossy();
            self.responses.get(name.as_ref())
        })
    }
}

impl Captioner for RecordedCaptioner {
    fn describe(&self) -> String {
        "recorded".into()
    }

    fn caption(&self, image: &Path, _bytes: &[u8]) -> Result<String> {
        self.key(image).cloned().ok_or_else(|| Error::Service {
            attempts: 1,
            message: format!("no recorded response for {}", image.display()),
        })
    }
}

/// Client for an OpenAI-compatible chat-completions endpoint with image input.
#[derive(Clone, Debug)]
pub struct ChatCaptioner {
    pub endpoint: String,
    pub model: String,
    api_key: String,
    pub max_attempts: u32,
    pub backoff: Duration,
    pub timeout: Duration,
}

impl ChatCaptioner {
    /// Reads the key from `key_var`; fails before any request when unset.
    pub fn from_env(endpoint: &str, model: &str, key_var: &str) -> Result<Self> {
        let api_key = std::env::var(key_var)
            .ok()
            .filter(|k| !k.trim().is_empty())
            .ok_or_else(|| Error::Precondition(format!("environment variable {key_var} holds no API key")))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            max_attempts: 3,
            backoff: Duration::from_secs(2),
            timeout: Duration::from_secs(60),
        })
    }

    fn post(&self, body: &serde_json::Value) -> std::result::Result<String, String> {
        let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into();
        let mut resp = agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(body)
            .map_err(|e| e.to_string())?;
        let v: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| format!("response has no message content: {v}"))
    }
}

/// Request body for one image; the text part is [`CAPTION_PROMPT`].
pub fn chat_request_body(model: &str, image: &Path, bytes: &[u8]) -> serde_json::Value {
    let ext = image.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
    let mime = match ext.as_str() {
        "jpg" | "jpeg" => "image/jpeg",
        "webp" => "image/webp",
        _ => "image/png",
    };
    let data = base64::engine::general_purpose::STANDARD.encode(bytes);
    serde_json::json!({
        "model": model,
        "messages": [{
            "role": "user",
            "content": [
                { "type": "text", "text": CAPTION_PROMPT },
                { "type": "image_url", "image_url": { "url": format!("data:{mime};base64,{data}") } }
            ]
        }]
    })
}

impl Captioner for ChatCaptioner {
    fn describe(&self) -> String {
        format!("chat:{}@{}", self.model, self.endpoint)
    }

    fn caption(&self, image: &Path, bytes: &[u8]) -> Result<String> {
        let body = chat_request_body(&self.model, image, bytes);
        let mut last = String::new();
        for attempt in 1..=self.max_attempts.max(1) {
            match self.post(&body) {
                Ok(text) => return Ok(text),
                Err(e) => last = e,
            }
            if attempt < self.max_attempts {
                std::thread::sleep(self.backoff * attempt);
            }
        }
        Err(Error::Service { attempts: self.max_attempts.max(1), message: last })
    }
}

/// `(image, tag)` pairs from a class-folder layout `<root>/<tag>/<image>`,
/// sorted by path.
pub fn scan_image_dir(root: &Path) -> Result<Vec<(PathBuf, String)>> {
    if !root.is_dir() {
        return Err(Error::Missing { path: root.to_path_buf(), what: "image directory".into() });
    }
    let read = |d: &Path| -> Result<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = std::fs::read_dir(d)
            .map_err(|e| Error::io(d, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(d, err)))
            .collect::<Result<_>>()?;
        v.sort();
        Ok(v)
    };
    let mut out = Vec::new();
    for dir in read(root)?.into_iter().filter(|p| p.is_dir()) {
        let tag = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        for p in read(&dir)? {
            let ext = p.extension().map(|e| e.to_string_lossy().to_lowercase()).unwrap_or_default();
            if matches!(ext.as_str(), "png" | "jpg" | "jpeg") {
                out.push((p, tag.clone()));
            }
        }
    }
    Ok(out)
}

/// Result of [`build_manifest`].
#[derive(Clone, Debug)]
pub struct BuildOutcome {
    pub manifest: Manifest,
    pub rejected: Vec<Rejection>,
}

/// Captions every image (in parallel), drops blacklist hits and suffixes the
/// survivors. Service errors abort the build.
pub fn build_manifest(
    images: &[(PathBuf, String)],
    client: &dyn Captioner,
    blacklist: &Blacklist,
) -> Result<BuildOutcome> {
    let captions: Vec<String> =
        images.par_iter().map(|(path, _)| generate_caption(path, client)).collect::<Result<_>>()?;
    let mut samples = Vec::new();
    let mut rejected = Vec::new();
    for ((path, tag), caption) in images.iter().zip(captions) {
        match validate_caption(&caption, blacklist) {
            CaptionCheck::Accept => {
                let suffixed = append_style_suffix(&caption)?;
                samples.push(StyleSample::new(path.clone(), &suffixed, tag, blacklist)?);
            }
            CaptionCheck::Reject(words) => {
                rejected.push(Rejection { image: path.clone(), caption, words: words.into_iter().collect() })
            }
        }
    }
    let meta = ManifestMeta { captioner: client.describe(), rejected: rejected.clone(), ..Default::default() };
    Ok(BuildOutcome { manifest: Manifest::new(samples, blacklist.version(), meta)?, rejected })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bl() -> Blacklist {
        Blacklist::default()
    }

    /// Independent whole-word oracle: tokenize on non-word characters and look
    /// for the entry's words as a contiguous run.
    fn oracle_hits(caption: &str, entry: &str) -> bool {
        let toks: Vec<String> = caption
            .split(|c: char| !(c.is_alphanumeric() || c == '_'))
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
            .collect();
        let want: Vec<&str> = entry.split(' ').collect();
        toks.windows(want.len()).any(|w| w.iter().zip(&want).all(|(a, b)| a == b))
    }

    #[test]
    fn prompt_is_bit_exact() {
        let digest = hex::encode(Sha256::digest(CAPTION_PROMPT.as_bytes()));
        assert_eq!(CAPTION_PROMPT.len(), 366);
        assert!(CAPTION_PROMPT.starts_with("Describe only the content and subject of this image in short words."));
        assert!(CAPTION_PROMPT.ends_with("artistic movement, or overall mood."));
        assert!(CAPTION_PROMPT.contains("Do not use words like 'abstract', 'colorful', 'abstract expressionism'."));
        assert_eq!(digest, "d3b3ec27a63eacb64ef0ec6c50e1f137e913594b645acc19aa0f2f67145c0ee6");
        let body = chat_request_body("m", Path::new("x.jpg"), b"abc");
        assert_eq!(body.pointer("/messages/0/content/0/text").unwrap().as_str().unwrap(), CAPTION_PROMPT);
        assert_eq!(
            body.pointer("/messages/0/content/1/image_url/url").unwrap().as_str().unwrap(),
            "data:image/jpeg;base64,YWJj"
        );
    }

    #[test]
    fn caption_validation_examples() {
        assert_eq!(validate_caption("a cat on a chair", &bl()), CaptionCheck::Accept);
        assert_eq!(
            validate_caption("a colorful abstract landscape", &bl()),
            CaptionCheck::Reject(BTreeSet::from(["colorful".to_string(), "abstract".to_string()]))
        );
        assert_eq!(validate_caption("an abstraction of gears", &bl()), CaptionCheck::Accept);
        assert!(!oracle_hits("an abstraction of gears", "abstract"));
        assert!(!validate_caption("COLORFUL birds", &bl()).is_accept());
        assert_eq!(
            validate_caption("Abstract\n  Expressionism revival", &bl()),
            CaptionCheck::Reject(BTreeSet::from(["abstract".to_string(), "abstract expressionism".to_string()]))
        );
    }

    #[test]
    fn suffix_examples() {
        assert_eq!(append_style_suffix("a cat").unwrap(), "a cat in the style of [*].");
        assert!(append_style_suffix("").is_err());
        assert!(append_style_suffix("a cat in the style of [*].").is_err());
    }

    #[test]
    fn blacklist_entries_cannot_match_the_suffix() {
        assert!(Blacklist::new(["style"], "x").is_err());
        assert!(Blacklist::new(["in the"], "x").is_err());
        assert!(Blacklist::new(["'quoted'"], "x").is_err());
        assert!(Blacklist::new(Vec::<String>::new(), "x").is_err());
    }

    #[test]
    fn extension_file_extends_and_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("extra.txt");
        std::fs::write(&path, "# extra words\nvibrant\n\nImpressionist\n").unwrap();
        let b = Blacklist::with_extension_file(&path).unwrap();
        assert!(b.version().starts_with("builtin-1+"));
        assert!(!validate_caption("an impressionist garden", &b).is_accept());
        assert!(!validate_caption("a colorful kite", &b).is_accept());
    }

    fn manifest(tags: &[usize]) -> Manifest {
        let samples = tags
            .iter()
            .enumerate()
            .map(|(i, t)| StyleSample {
                image_path: PathBuf::from(format!("img/{i}.png")),
                caption: format!("object {i}{STYLE_SUFFIX}"),
                tag: format!("tag{t}"),
                split: Split::Train,
            })
            .collect();
        Manifest::new(samples, "v", ManifestMeta::default()).unwrap()
    }

    #[test]
    fn published_split_sizes() {
        let tags: Vec<usize> = (0..25_868).map(|i| (i * 7919) % 1121).collect();
        let m = split_dataset(&manifest(&tags), 2500, 0).unwrap();
        assert_eq!(m.split(Split::Test).count(), 2500);
        assert_eq!(m.split(Split::Train).count(), 23_368);
        assert_eq!(m.tags().len(), 1121);
        assert_eq!(m.test_tags().len(), 1121);
    }

    #[test]
    fn small_split_examples() {
        let m = split_dataset(&manifest(&[0; 10]), 2, 1).unwrap();
        assert_eq!((m.split(Split::Train).count(), m.split(Split::Test).count()), (8, 2));
        let five = manifest(&[0, 1, 2, 3, 4]);
        assert!(matches!(split_dataset(&five, 6, 0), Err(Error::Precondition(_))));
        assert!(split_dataset(&manifest(&[0, 1, 2, 0, 1, 2]), 2, 0).is_err());
    }

    #[test]
    fn manifest_rejects_duplicates_and_uncovered_tags() {
        let mut m = manifest(&[0, 1]);
        let mut dup = m.samples.clone();
        dup[1].image_path = dup[0].image_path.clone();
        assert!(Manifest::new(dup, "v", ManifestMeta::default()).is_err());
        m.samples[0].split = Split::Test;
        assert!(Manifest::new(m.samples.clone(), "v", ManifestMeta::default()).is_err());
    }

    #[test]
    fn ndjson_layout_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.ndjson");
        let m = split_dataset(&manifest(&[0, 0, 1, 1, 2]), 3, 4).unwrap();
        m.save(&path).unwrap();
        let first = std::fs::read_to_string(&path).unwrap();
        let line = first.lines().next().unwrap();
        assert!(line.starts_with("{\"image\":\"img/0.png\",\"caption\":"), "{line}");
        let keys: Vec<String> =
            serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(line).unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 4);
        let back = Manifest::load(&path).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.meta().split_seed, Some(4));
        let side = std::fs::read_to_string(meta_path(&path)).unwrap();
        assert!(!side.to_lowercase().contains("key"));
    }

    #[test]
    fn recorded_build_counts_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let fx = crate::synth::write_fixtures(dir.path(), 2, 0, 32).unwrap();
        let images: Vec<(PathBuf, String)> = scan_image_dir(dir.path()).unwrap();
        assert_eq!(images.len(), fx.len());
        let mut responses: BTreeMap<String, String> =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(crate::synth::CAPTIONS_FILE)).unwrap())
                .unwrap();
        let first = responses.keys().next().unwrap().clone();
        responses.insert(first, "a colorful square".into());
        let client = RecordedCaptioner::new(dir.path(), responses);
        let out = build_manifest(&images, &client, &bl()).unwrap();
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].words, vec!["colorful".to_string()]);
        assert_eq!(out.manifest.len(), fx.len() - 1);
        assert!(out.manifest.samples().iter().all(|s| s.caption.ends_with(STYLE_SUFFIX)));
    }

    #[test]
    fn caption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let client = RecordedCaptioner::new(dir.path(), BTreeMap::from([("a.png".to_string(), String::new())]));
        assert!(matches!(generate_caption(&dir.path().join("missing.png"), &client), Err(Error::Io { .. })));
        let path = dir.path().join("a.png");
        crate::synth::render(crate::synth::SynthStyle::Hue, 0, 16).save(&path).unwrap();
        assert!(matches!(generate_caption(&path, &client), Err(Error::Validation(_))));
        let other = dir.path().join("b.png");
        std::fs::copy(&path, &other).unwrap();
        assert!(matches!(generate_caption(&other, &client), Err(Error::Service { attempts: 1, .. })));
        assert!(matches!(
            ChatCaptioner::from_env("http://localhost", "m", "STYLEKIT_TEST_UNSET_KEY_VAR"),
            Err(Error::Precondition(_))
        ));
    }

    proptest! {
        #[test]
        fn regex_matching_agrees_with_token_oracle(words in prop::collection::vec("[a-zA-Z]{1,12}", 0..8)) {
            let caption = words.join(" ");
            let b = bl();
            let expected: BTreeSet<String> = b.words().filter(|w| oracle_hits(&caption, w)).map(String::from).collect();
            let got = match validate_caption(&caption, &b) {
                CaptionCheck::Accept => BTreeSet::new(),
                CaptionCheck::Reject(h) => h,
            };
            prop_assert_eq!(got, expected);
        }

        #[test]
        fn suffix_preserves_acceptance(caption in "[a-z ]{1,40}") {
            prop_assume!(!caption.trim().is_empty());
            if validate_caption(&caption, &bl()).is_accept() {
                let s = append_style_suffix(&caption).unwrap();
                prop_assert!(validate_caption(&s, &bl()).is_accept());
            }
        }

        #[test]
        fn split_is_deterministic_and_covering(
            tags in prop::collection::vec(0usize..6, 8..40),
            extra in 0usize..10,
            seed in any::<u64>(),
        ) {
            let m = manifest(&tags);
            let ntags = m.tags().len();
            let test_size = (ntags + extra).min(m.len() - 1);
            prop_assume!(test_size >= ntags);
            let a = split_dataset(&m, test_size, seed).unwrap();
            let b = split_dataset(&m, test_size, seed).unwrap();
            prop_assert_eq!(a.to_ndjson().unwrap(), b.to_ndjson().unwrap());
            prop_assert_eq!(a.split(Split::Test).count(), test_size);
            prop_assert_eq!(a.test_tags(), a.tags());
        }
    }
}
