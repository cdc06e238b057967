//! Tokenizers producing exactly [`CONTEXT_LENGTH`] ids.

use std::collections::HashMap;
use std::path::Path;

use regex::Regex;

use crate::error::{Error, Result};

/// Fixed sequence length of the text encoder.
pub const CONTEXT_LENGTH: usize = 77;

/// Token ids plus a validity mask, both of length [`CONTEXT_LENGTH`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<u32>,
    mask: Vec<u8>,
}

impl TokenSequence {
    /// Frames `body` as `[bos, body.., eos, pad..]`. Over-long bodies keep
    /// their earliest tokens; the end-of-sequence id is always present.
    pub fn pack(body: &[u32], bos: u32, eos: u32, pad: u32) -> Self {
        let keep = body.len().min(CONTEXT_LENGTH - 2);
        let mut ids = Vec::with_capacity(CONTEXT_LENGTH);
        ids.push(bos);
        ids.extend_from_slice(&body[..keep]);
        ids.push(eos);
        let valid = ids.len();
        ids.resize(CONTEXT_LENGTH, pad);
        let mut mask = vec![1u8; valid];
        mask.resize(CONTEXT_LENGTH, 0);
        Self { ids, mask }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn mask(&self) -> &[u8] {
        &self.mask
    }

    /// Position of the end-of-sequence token (last valid position).
    pub fn eos_position(&self) -> usize {
        self.mask.iter().rposition(|&m| m == 1).unwrap_or(0)
    }
}

pub trait Tokenizer: Send + Sync {
    fn encode(&self, text: &str) -> TokenSequence;
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> u32;
    fn eos_id(&self) -> u32;
}

/// Whitespace tokenizer over a hashed fixed-size vocabulary.
#[derive(Clone, Debug)]
pub struct StubTokenizer {
    vocab_size: u32,
}

impl StubTokenizer {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    const RESERVED: u32 = 3;

    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > Self::RESERVED as usize, "vocabulary too small");
        Self { vocab_size: vocab_size as u32 }
    }

    fn word_id(&self, word: &str) -> u32 {
        // FNV-1a: stable across platforms and releases, unlike std's hasher.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        Self::RESERVED + (h % u64::from(self.vocab_size - Self::RESERVED)) as u32
    }
}

impl Default for StubTokenizer {
    fn default() -> Self {
        Self::new(512)
    }
}

impl Tokenizer for StubTokenizer {
    fn encode(&self, text: &str) -> TokenSequence {
        let body: Vec<u32> = text.split_whitespace().map(|w| self.word_id(w)).collect();
        TokenSequence::pack(&body, Self::BOS, Self::EOS, Self::PAD)
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    fn bos_id(&self) -> u32 {
        Self::BOS
    }

    fn eos_id(&self) -> u32 {
        Self::EOS
    }
}

/// Byte-level BPE tokenizer reading CLIP's `vocab.json` and `merges.txt`.
///
/// Text is lower-cased and whitespace-collapsed before splitting; the
/// original tokenizer's ftfy/HTML unescaping pass is not reproduced. Padding
/// uses the end-of-text id, as the diffusion text encoder expects.
pub struct ClipBpeTokenizer {
    encoder: HashMap<String, u32>,
    ranks: HashMap<(String, String), usize>,
    byte_map: [char; 256],
    pattern: Regex,
    bos: u32,
    eos: u32,
}

impl ClipBpeTokenizer {
    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab).map_err(|e| Error::io(vocab, e))?;
        let merges_text = std::fs::read_to_string(merges).map_err(|e| Error::io(merges, e))?;
        let encoder: HashMap<String, u32> = serde_json::from_str(&vocab_text)?;
        Self::from_parts(encoder, &merges_text)
    }

    pub fn from_parts(encoder: HashMap<String, u32>, merges: &str) -> Result<Self> {
        let mut ranks = HashMap::new();
        for line in merges.lines() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some(a), Some(b)) => {
                    let r = ranks.len();
                    ranks.entry((a.to_string(), b.to_string())).or_insert(r);
                }
                _ => return Err(Error::Invalid(format!("bad merges line: {line:?}"))),
            }
        }
        let special = |k: &str| encoder.get(k).copied().ok_or_else(|| Error::Invalid(format!("vocabulary lacks {k}")));
        let bos = special("<|startoftext|>")?;
        let eos = special("<|endoftext|>")?;
        let pattern =
            Regex::new(r"<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|\p{L}+|\p{N}|[^\s\p{L}\p{N}]+")
                .expect("static pattern compiles");
        Ok(Self { encoder, ranks, byte_map: bytes_to_unicode(), pattern, bos, eos })
    }

    fn bpe(&self, token: &str) -> Vec<String> {
        let mut word: Vec<String> = token.chars().map(|c| c.to_string()).collect();
        if let Some(last) = word.last_mut() {
            last.push_str("</w>");
        }
        loop {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0].clone(), w[1].clone())).map(|&r| (r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && self.ranks.get(&(word[i].clone(), word[i + 1].clone())) == Some(&rank) {
                    merged.push(format!("{}{}", word[i], word[i + 1]));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
            if word.len() == 1 {
                break;
            }
        }
        word
    }
}

impl Tokenizer for ClipBpeTokenizer {
    fn encode(&self, text: &str) -> TokenSequence {
        let cleaned = text.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
        let mut body = Vec::new();
        for m in self.pattern.find_iter(&cleaned) {
            let mapped: String = m.as_str().bytes().map(|b| self.byte_map[b as usize]).collect();
            for piece in self.bpe(&mapped) {
                if let Some(&id) = self.encoder.get(&piece) {
                    body.push(id);
                } else {
                    // Fall back to characters; the full CLIP vocabulary covers every byte.
                    let stem = piece.strip_suffix("</w>");
                    let chars: Vec<char> = stem.unwrap_or(&piece).chars().collect();
                    for (k, ch) in chars.iter().enumerate() {
                        let mut s = ch.to_string();
                        if stem.is_some() && k + 1 == chars.len() {
                            s.push_str("</w>");
                        }
                        if let Some(&id) = self.encoder.get(&s) {
                            body.push(id);
                        }
                    }
                }
            }
        }
        TokenSequence::pack(&body, self.bos, self.eos, self.eos)
    }

    fn vocab_size(&self) -> usize {
        self.encoder.len()
    }

    fn bos_id(&self) -> u32 {
        self.bos
    }

    fn eos_id(&self) -> u32 {
        self.eos
    }
}

/// GPT-2/CLIP reversible byte → printable-char table.
fn bytes_to_unicode() -> [char; 256] {
    let mut table = ['\0'; 256];
    let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
    let mut extra = 0u32;
    for b in 0..256u32 {
        table[b as usize] = if printable(b) {
            char::from_u32(b).expect("latin-1 code point")
        } else {
            extra += 1;
            char::from_u32(255 + extra).expect("valid code point")
        };
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_bos_eos_then_padding() {
        let t = StubTokenizer::default().encode("");
        assert_eq!(t.ids().len(), CONTEXT_LENGTH);
        assert_eq!(&t.ids()[..2], &[StubTokenizer::BOS, StubTokenizer::EOS]);
        assert!(t.ids()[2..].iter().all(|&i| i == StubTokenizer::PAD));
        assert_eq!(t.mask().iter().filter(|&&m| m == 1).count(), 2);
        assert_eq!(t.eos_position(), 1);
    }

    #[test]
    fn long_text_truncates_keeping_eos() {
        let text = (0..300).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ");
        let tok = StubTokenizer::default();
        let t = tok.encode(&text);
        assert_eq!(t.ids().len(), CONTEXT_LENGTH);
        assert_eq!(t.ids()[CONTEXT_LENGTH - 1], StubTokenizer::EOS);
        assert_eq!(t.ids()[1], tok.word_id("w0"));
        assert!(t.mask().iter().all(|&m| m == 1));
    }

    #[test]
    fn stub_is_deterministic_and_case_insensitive() {
        let tok = StubTokenizer::default();
        assert_eq!(tok.encode("A cat"), tok.encode("a  CAT"));
        assert_ne!(tok.encode("a cat"), tok.encode("a dog"));
    }

    fn tiny_clip() -> ClipBpeTokenizer {
        let mut vocab = HashMap::new();
        let entries = [
            "<|startoftext|>",
            "<|endoftext|>",
            "c",
            "a",
            "t",
            "c</w>",
            "a</w>",
            "t</w>",
            "ca",
            "cat</w>",
            "s</w>",
            "s",
            ".</w>",
            "[",
            "*",
            "]",
            "[*]</w>",
            "[*",
            "[</w>",
        ];
        for (i, e) in entries.iter().enumerate() {
            vocab.insert(e.to_string(), i as u32);
        }
        let merges = "#version: 0.2\nc a\nca t</w>\n[ *\n[* ]</w>\n";
        ClipBpeTokenizer::from_parts(vocab, merges).unwrap()
    }

    #[test]
    fn clip_bpe_merges_by_rank() {
        let tok = tiny_clip();
        let t = tok.encode("Cat cats [*].");
        let valid: Vec<u32> = t.ids()[..t.eos_position() + 1].to_vec();
        // <sot>, cat</w>, ca t s</w>, [* ] .</w>, <eot>
        assert_eq!(valid, vec![0, 9, 8, 4, 10, 17, 15, 12, 1]);
        assert_eq!(t.ids()[CONTEXT_LENGTH - 1], 1);
    }

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let set: std::collections::HashSet<char> = t.iter().copied().collect();
        assert_eq!(set.len(), 256);
        assert_eq!(t[b'a' as usize], 'a');
    }
}
