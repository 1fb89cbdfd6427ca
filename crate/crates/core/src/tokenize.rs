//! Text and image tokenization.
//!
//! Text is split on whitespace, lowercased (ASCII only), stripped of leading
//! and trailing ASCII punctuation and hash-bucketed into `[3, V)`. Ids 0..3
//! are reserved for PAD, CLS and UNK. Every sequence starts with CLS and is
//! PAD-filled to its context length.
//!
//! Images are cut into a row-major grid of P×P×Ch patches.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageGeometry};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const UNK: u32 = 2;
const RESERVED: u32 = 3;

pub const TEXT_CONTEXT: usize = 77;
pub const CONTENT_CONTEXT: usize = 512;

/// 64-bit FNV-1a.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Normalized words of `text`, in order. Words made only of punctuation are
/// kept as empty strings so they can map to UNK.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_ascii_lowercase())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct Vocabulary {
    size: usize,
}

impl TryFrom<usize> for Vocabulary {
    type Error = Error;

    fn try_from(size: usize) -> Result<Self> {
        Self::new(size)
    }
}

impl From<Vocabulary> for usize {
    fn from(v: Vocabulary) -> usize {
        v.size
    }
}

impl Vocabulary {
    pub fn new(size: usize) -> Result<Self> {
        if size < 4 {
            return Err(Error::validation("vocabulary size", "V must be at least 4"));
        }
        if size > u32::MAX as usize {
            return Err(Error::validation("vocabulary size", "V must fit in 32 bits"));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Id of an already-normalized word.
    pub fn word_id(&self, word: &str) -> u32 {
        if word.is_empty() {
            return UNK;
        }
        let buckets = (self.size as u64) - u64::from(RESERVED);
        RESERVED + (fnv1a(word.as_bytes()) % buckets) as u32
    }

    /// Ids of every word in `text`, without CLS, padding or truncation.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        words(text).map(|w| self.word_id(&w)).collect()
    }

    /// Pairs of distinct words that share a bucket.
    pub fn collisions<'a>(&self, vocabulary: impl IntoIterator<Item = &'a str>) -> Vec<(String, String)> {
        let mut seen: HashMap<u32, &str> = HashMap::new();
        let mut clashes = Vec::new();
        for word in vocabulary {
            let id = self.word_id(word);
            match seen.get(&id) {
                Some(&other) if other != word => clashes.push((other.to_string(), word.to_string())),
                Some(_) => {}
                None => {
                    seen.insert(id, word);
                }
            }
        }
        clashes
    }

    /// Smallest vocabulary of at least `min_size` buckets in which the given
    /// words are collision-free.
    pub fn collision_free(words: &[&str], min_size: usize) -> Result<Self> {
        let mut size = min_size.max(4);
        loop {
            let vocab = Self::new(size)?;
            if vocab.collisions(words.iter().copied()).is_empty() {
                return Ok(vocab);
            }
            size += 1;
        }
    }
}

/// Fixed-length id sequence, CLS first and PAD-filled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn context(&self) -> usize {
        self.ids.len()
    }

    /// Number of leading non-PAD positions (CLS included).
    pub fn active_len(&self) -> usize {
        self.ids.iter().position(|&id| id == PAD).unwrap_or(self.ids.len())
    }

    /// Builds a sequence from raw ids, validating the CLS/PAD layout.
    pub fn from_ids(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self> {
        if ids.first() != Some(&CLS) {
            return Err(Error::Shape("token sequence must start with CLS".into()));
        }
        if let Some(bad) = ids.iter().find(|&&id| id as usize >= vocab.size()) {
            return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
        }
        let active = ids.iter().position(|&id| id == PAD).unwrap_or(ids.len());
        if ids[active..].iter().any(|&id| id != PAD) {
            return Err(Error::Shape("tokens after padding".into()));
        }
        Ok(Self { ids })
    }
}

/// Tokenizes `text` into exactly `context` ids. Keeps the first
/// `context - 1` words after CLS.
pub fn tokenize(text: &str, vocab: &Vocabulary, context: usize) -> TokenSequence {
    assert!(context >= 1, "context length must hold the CLS token");
    let mut ids = Vec::with_capacity(context);
    ids.push(CLS);
    ids.extend(words(text).take(context - 1).map(|w| vocab.word_id(&w)));
    ids.resize(context, PAD);
    TokenSequence { ids }
}

pub fn tokenize_text(text: &str, vocab: &Vocabulary) -> TokenSequence {
    tokenize(text, vocab, TEXT_CONTEXT)
}

pub fn tokenize_content(text: &str, vocab: &Vocabulary) -> TokenSequence {
    tokenize(text, vocab, CONTENT_CONTEXT)
}

/// M flattened patches, each of dimension P²·Ch, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchSequence {
    count: usize,
    dim: usize,
    values: Vec<f64>,
}

impl PatchSequence {
    pub fn from_values(count: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != count * dim {
            return Err(Error::Shape(format!(
                "{} values cannot form {count} patches of dim {dim}",
                values.len()
            )));
        }
        Ok(Self { count, dim, values })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn patch(&self, j: usize) -> &[f64] {
        &self.values[j * self.dim..(j + 1) * self.dim]
    }

    /// Row-major M × (P²·Ch) matrix of all patches.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

pub fn patchify(image: &Image, patch: usize) -> Result<PatchSequence> {
    let geometry = ImageGeometry::new(image.height, image.width, image.channels, patch)?;
    if image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("image".into()));
    }
    let (count, dim) = (geometry.patch_count(), geometry.patch_dim());
    let cols = geometry.grid_cols();
    let mut values = Vec::with_capacity(count * dim);
    for j in 0..count {
        let (y0, x0) = ((j / cols) * patch, (j % cols) * patch);
        for y in y0..y0 + patch {
            let start = image.index(y, x0, 0);
            let end = start + patch * image.channels;
            values.extend(image.data[start..end].iter().map(|&v| f64::from(v)));
        }
    }
    Ok(PatchSequence { count, dim, values })
}

/// Reassembles an image from its patches.
pub fn unpatchify(patches: &PatchSequence, geometry: &ImageGeometry) -> Result<Image> {
    geometry.validate()?;
    if patches.count != geometry.patch_count() || patches.dim != geometry.patch_dim() {
        return Err(Error::Shape(format!(
            "{} patches of dim {} do not fit geometry {:?}",
            patches.count, patches.dim, geometry
        )));
    }
    let mut image = Image::filled(geometry.height, geometry.width, geometry.channels, 0.0);
    let cols = geometry.grid_cols();
    let p = geometry.patch;
    let row_len = p * geometry.channels;
    for j in 0..patches.count {
        let (y0, x0) = ((j / cols) * p, (j % cols) * p);
        let patch = patches.patch(j);
        for dy in 0..p {
            let start = image.index(y0 + dy, x0, 0);
            for (dst, &src) in image.data[start..start + row_len]
                .iter_mut()
                .zip(&patch[dy * row_len..(dy + 1) * row_len])
            {
                *dst = src as f32;
            }
        }
    }
    Ok(image)
}
