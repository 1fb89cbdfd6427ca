//! Document corpus: data model, JSON-lines manifests and a deterministic
//! synthetic generator.
//!
//! The synthetic corpus ties every modality to the same token stream. A
//! document is a bag of words drawn from its class's word set (plus uniform
//! noise). The content channels carry those words as text and the image
//! renders one glyph patch per word. Class names are two-word phrases built
//! from a shared facet grid, and the facet words also occur in the
//! documents, so an unseen class is a new combination of words that the
//! encoders did see during training.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, ImageGeometry};
use crate::tokenize::{words, Vocabulary};

pub const CLEAN: &str = "clean";
pub const NOISY: &str = "noisy";

const INLINE_PREFIX: &str = "base64:";
const PAPER: f32 = 1.0;
const INK: f32 = 0.0;

const FACET_QUALIFIERS: [&str; 8] = ["amber", "cobalt", "crimson", "ivory", "jade", "olive", "slate", "umber"];
const FACET_KINDS: [&str; 8] = [
    "brief", "chart", "deed", "folio", "ledger", "notice", "roster", "voucher",
];

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClassLabel {
    pub index: usize,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    File(PathBuf),
    Inline(Image),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentRecord {
    pub id: String,
    /// Index into the manifest's class list.
    pub label: usize,
    pub content: BTreeMap<String, String>,
    pub image: ImageSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub classes: Vec<ClassLabel>,
    pub channels: Vec<String>,
    pub geometry: ImageGeometry,
    /// Bucket count the images were rendered with, when known.
    pub vocab_buckets: Option<usize>,
    pub records: Vec<DocumentRecord>,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    classes: Vec<String>,
    channels: Vec<String>,
    #[serde(flatten)]
    geometry: ImageGeometry,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_buckets: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct RecordLine {
    id: String,
    label: String,
    image: String,
    content: BTreeMap<String, String>,
}

impl CorpusManifest {
    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn record(&self, id: &str) -> Option<&DocumentRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn load_image(&self, record: &DocumentRecord) -> Result<Image> {
        let image = match &record.image {
            ImageSource::Inline(image) => image.clone(),
            ImageSource::File(path) => {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                Image::from_le_bytes(&self.geometry, &bytes)?
            }
        };
        if !image.matches(&self.geometry) {
            return Err(Error::Shape(format!(
                "image of record `{}` does not match geometry",
                record.id
            )));
        }
        Ok(image)
    }

    /// Number of records per class, in class order.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for r in &self.records {
            counts[r.label] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.channels.is_empty() {
            return Err(Error::validation("channels", "at least one content channel required"));
        }
        let mut names = HashSet::new();
        for (i, c) in self.classes.iter().enumerate() {
            if c.index != i {
                return Err(Error::validation("classes", "class indices must be dense"));
            }
            if !names.insert(c.name.as_str()) {
                return Err(Error::validation("classes", format!("duplicate class `{}`", c.name)));
            }
        }
        let mut ids = HashSet::new();
        for r in &self.records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::validation("records", format!("duplicate id `{}`", r.id)));
            }
            if r.label >= self.classes.len() {
                return Err(Error::validation("records", format!("record `{}` has no class", r.id)));
            }
            for ch in &self.channels {
                if !r.content.contains_key(ch) {
                    return Err(Error::validation(
                        "records",
                        format!("record `{}` lacks channel `{ch}`", r.id),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Writes the manifest as JSON lines. Inline images stay inline unless
    /// `image_dir` is given, in which case they become `.f32` files there
    /// and are referenced relative to the manifest.
    pub fn write(&self, path: &Path, image_dir: Option<&str>) -> Result<()> {
        let parent = path.parent().unwrap_or_else(|| Path::new("."));
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        if let Some(dir) = image_dir {
            let full = parent.join(dir);
            fs::create_dir_all(&full).map_err(|e| Error::io(&full, e))?;
        }
        let mut out = Vec::new();
        let header = HeaderLine {
            classes: self.class_names(),
            channels: self.channels.clone(),
            geometry: self.geometry,
            vocab_buckets: self.vocab_buckets,
        };
        serde_json::to_writer(&mut out, &header)?;
        out.push(b'\n');
        let engine = base64::engine::general_purpose::STANDARD;
        for r in &self.records {
            let image = match (&r.image, image_dir) {
                (ImageSource::Inline(img), None) => {
                    format!("{INLINE_PREFIX}{}", engine.encode(img.to_le_bytes()))
                }
                (source, Some(dir)) => {
                    let img = match source {
                        ImageSource::Inline(img) => img.clone(),
                        ImageSource::File(_) => self.load_image(r)?,
                    };
                    let rel = format!("{dir}/{}.f32", r.id);
                    let full = parent.join(&rel);
                    fs::write(&full, img.to_le_bytes()).map_err(|e| Error::io(&full, e))?;
                    rel
                }
                (ImageSource::File(p), None) => p.to_string_lossy().into_owned(),
            };
            let line = RecordLine {
                id: r.id.clone(),
                label: self.classes[r.label].name.clone(),
                image,
                content: r.content.clone(),
            };
            serde_json::to_writer(&mut out, &line)?;
            out.push(b'\n');
        }
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let err = |line: usize, reason: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut lines = BufReader::new(file)
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()));

    let Some((n, header)) = lines.next() else {
        return Err(Error::NoRecords(path.to_path_buf()));
    };
    let header = header.map_err(|e| Error::io(path, e))?;
    let header: HeaderLine = serde_json::from_str(&header).map_err(|e| err(n, format!("malformed header: {e}")))?;
    header.geometry.validate().map_err(|e| err(n, e.to_string()))?;
    let classes: Vec<ClassLabel> = header
        .classes
        .iter()
        .enumerate()
        .map(|(index, name)| ClassLabel {
            index,
            name: name.clone(),
        })
        .collect();
    let mut manifest = CorpusManifest {
        classes,
        channels: header.channels,
        geometry: header.geometry,
        vocab_buckets: header.vocab_buckets,
        records: Vec::new(),
    };
    if manifest.channels.is_empty() {
        return Err(err(n, "header lists no content channels".into()));
    }
    let mut seen_ids = HashSet::new();
    let engine = base64::engine::general_purpose::STANDARD;
    for (n, line) in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        let rec: RecordLine = serde_json::from_str(&line).map_err(|e| err(n, format!("malformed record: {e}")))?;
        let label = manifest
            .class_index(&rec.label)
            .ok_or_else(|| err(n, format!("label `{}` is not a declared class", rec.label)))?;
        if let Some(missing) = manifest.channels.iter().find(|c| !rec.content.contains_key(*c)) {
            return Err(err(n, format!("record `{}` is missing channel `{missing}`", rec.id)));
        }
        if !seen_ids.insert(rec.id.clone()) {
            return Err(err(n, format!("duplicate record id `{}`", rec.id)));
        }
        let image = if let Some(payload) = rec.image.strip_prefix(INLINE_PREFIX) {
            let bytes = engine
                .decode(payload)
                .map_err(|e| err(n, format!("bad inline image: {e}")))?;
            let img = Image::from_le_bytes(&manifest.geometry, &bytes).map_err(|e| err(n, e.to_string()))?;
            ImageSource::Inline(img)
        } else {
            let full = base.join(&rec.image);
            if !full.is_file() {
                return Err(err(n, format!("image file {} not found", full.display())));
            }
            ImageSource::File(full)
        };
        manifest.records.push(DocumentRecord {
            id: rec.id,
            label,
            content: rec.content,
            image,
        });
    }
    if manifest.records.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    Ok(manifest)
}

/// A manifest seen through one content channel, optionally restricted to a
/// subset of records.
#[derive(Debug, Clone)]
pub struct DatasetView<'a> {
    manifest: &'a CorpusManifest,
    channel: String,
    indices: Vec<usize>,
}

pub fn select_channel<'a>(manifest: &'a CorpusManifest, channel: &str) -> Result<DatasetView<'a>> {
    if !manifest.channels.iter().any(|c| c == channel) {
        return Err(Error::UnknownChannel {
            requested: channel.to_string(),
            available: manifest.channels.clone(),
        });
    }
    Ok(DatasetView {
        manifest,
        channel: channel.to_string(),
        indices: (0..manifest.records.len()).collect(),
    })
}

impl<'a> DatasetView<'a> {
    pub fn manifest(&self) -> &'a CorpusManifest {
        self.manifest
    }

    pub fn channel(&self) -> &str {
        &self.channel
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Indices into the manifest's record list.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn records(&self) -> impl Iterator<Item = &'a DocumentRecord> + '_ {
        self.indices.iter().map(|&i| &self.manifest.records[i])
    }

    pub fn content(&self, record: &'a DocumentRecord) -> &'a str {
        record.content[&self.channel].as_str()
    }

    pub fn restrict(&self, keep: impl Fn(&DocumentRecord) -> bool) -> DatasetView<'a> {
        DatasetView {
            manifest: self.manifest,
            channel: self.channel.clone(),
            indices: self
                .indices
                .iter()
                .copied()
                .filter(|&i| keep(&self.manifest.records[i]))
                .collect(),
        }
    }

    pub fn with_indices(&self, indices: Vec<usize>) -> DatasetView<'a> {
        DatasetView {
            manifest: self.manifest,
            channel: self.channel.clone(),
            indices,
        }
    }
}

/// Per-class seeded partition of record indices into (kept, held out).
/// Each class with at least two records holds out `round(fraction · n)`
/// records, clamped to `[1, n - 1]`.
pub fn stratified_split(
    manifest: &CorpusManifest,
    indices: &[usize],
    fraction: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(manifest.records[i].label).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kept, mut held) = (Vec::new(), Vec::new());
    for (_, mut members) in by_class {
        members.shuffle(&mut rng);
        let n = members.len();
        let take = if n < 2 || fraction <= 0.0 {
            0
        } else {
            ((fraction * n as f64).round() as usize).clamp(1, n - 1)
        };
        held.extend_from_slice(&members[..take]);
        kept.extend_from_slice(&members[take..]);
    }
    kept.sort_unstable();
    held.sort_unstable();
    (kept, held)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// K, the number of classes.
    pub classes: usize,
    pub docs_per_class: usize,
    /// Total distinct words, including facet words and filler.
    pub vocab_size: usize,
    /// Private words owned by each class.
    pub keywords_per_class: usize,
    pub noise_rate: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub geometry: ImageGeometry,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 16,
            docs_per_class: 50,
            vocab_size: 128,
            keywords_per_class: 4,
            noise_rate: 0.1,
            seed: 7,
            geometry: ImageGeometry {
                height: 32,
                width: 32,
                channels: 1,
                patch: 8,
            },
        }
    }
}

impl SyntheticSpec {
    /// Side of the facet grid: the smallest g with g² ≥ K.
    fn facet_side(&self) -> usize {
        (1..).find(|g| g * g >= self.classes).unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.classes < 2 {
            return Err(Error::validation("classes", "need at least two classes"));
        }
        if self.classes > FACET_QUALIFIERS.len() * FACET_KINDS.len() {
            return Err(Error::validation("classes", "at most 64 classes are supported"));
        }
        if self.docs_per_class < 2 {
            return Err(Error::validation("docs_per_class", "must be at least 2"));
        }
        if self.keywords_per_class == 0 {
            return Err(Error::validation("keywords_per_class", "must be positive"));
        }
        let facets = 2 * self.facet_side();
        if self.keywords_per_class * self.classes + facets > self.vocab_size {
            return Err(Error::validation(
                "vocab_size",
                format!(
                    "{} keywords x {} classes plus {facets} facet words exceed vocab_size {}",
                    self.keywords_per_class, self.classes, self.vocab_size
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return Err(Error::validation("noise_rate", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// The generated word inventory and per-class word sets.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVocabulary {
    /// Every word, facets first.
    pub words: Vec<String>,
    pub class_names: Vec<String>,
    /// The two facet words of each class.
    pub facet_words: Vec<[String; 2]>,
    /// Private keywords of each class; disjoint across classes.
    pub keywords: Vec<Vec<String>>,
}

impl SyntheticVocabulary {
    /// Words a document of class `k` draws from when not sampling noise.
    pub fn class_words(&self, k: usize) -> Vec<&str> {
        self.facet_words[k]
            .iter()
            .chain(&self.keywords[k])
            .map(String::as_str)
            .collect()
    }
}

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    const ONSETS: [&str; 16] = [
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "tr",
    ];
    const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];
    let syllables = rng.random_range(2..=3);
    (0..syllables)
        .map(|_| {
            format!(
                "{}{}",
                ONSETS[rng.random_range(0..ONSETS.len())],
                VOWELS[rng.random_range(0..VOWELS.len())]
            )
        })
        .collect()
}

pub fn synthetic_vocabulary(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> SyntheticVocabulary {
    let g = spec.facet_side();
    let mut class_names = Vec::with_capacity(spec.classes);
    let mut facet_words = Vec::with_capacity(spec.classes);
    for k in 0..spec.classes {
        // Latin-square walk over the g×g grid: any run of g consecutive
        // classes covers every qualifier and every kind exactly once.
        let a = k % g;
        let b = (k / g + a) % g;
        let pair = [FACET_QUALIFIERS[a].to_string(), FACET_KINDS[b].to_string()];
        class_names.push(pair.join(" "));
        facet_words.push(pair);
    }
    let mut taken: BTreeSet<String> = FACET_QUALIFIERS[..g]
        .iter()
        .chain(&FACET_KINDS[..g])
        .map(|s| s.to_string())
        .collect();
    let mut words: Vec<String> = FACET_QUALIFIERS[..g]
        .iter()
        .chain(&FACET_KINDS[..g])
        .map(|s| s.to_string())
        .collect();
    let mut fresh = |rng: &mut ChaCha8Rng| loop {
        let w = pseudo_word(rng);
        if taken.insert(w.clone()) {
            return w;
        }
    };
    let mut keywords = Vec::with_capacity(spec.classes);
    for _ in 0..spec.classes {
        let kws: Vec<String> = (0..spec.keywords_per_class).map(|_| fresh(rng)).collect();
        words.extend(kws.iter().cloned());
        keywords.push(kws);
    }
    while words.len() < spec.vocab_size {
        words.push(fresh(rng));
    }
    SyntheticVocabulary {
        words,
        class_names,
        facet_words,
        keywords,
    }
}

/// Deterministic P×P×Ch glyph for a token id: binary ink pixels drawn from
/// a SplitMix64 stream keyed by the id.
pub fn token_pattern(token: u32, geometry: &ImageGeometry) -> Vec<f32> {
    let mut state = 0x9e37_79b9_7f4a_7c15u64 ^ (u64::from(token).wrapping_mul(0xd1b5_4a32_d192_ed03));
    let mut bits = 0u64;
    let mut left = 0;
    (0..geometry.patch_dim())
        .map(|_| {
            if left == 0 {
                state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
                let mut z = state;
                z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
                z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
                bits = z ^ (z >> 31);
                left = 64;
            }
            let ink = bits & 1 == 1;
            bits >>= 1;
            left -= 1;
            if ink {
                INK
            } else {
                PAPER
            }
        })
        .collect()
}

/// Renders one glyph patch per token in row-major patch order. Tokens past
/// the M available patches are dropped; unused patches stay blank paper.
pub fn render_document_image(tokens: &[u32], geometry: &ImageGeometry) -> Result<Image> {
    geometry.validate()?;
    let mut image = Image::filled(geometry.height, geometry.width, geometry.channels, PAPER);
    let (p, cols) = (geometry.patch, geometry.grid_cols());
    let row_len = p * geometry.channels;
    for (j, &token) in tokens.iter().take(geometry.patch_count()).enumerate() {
        let pattern = token_pattern(token, geometry);
        let (y0, x0) = ((j / cols) * p, (j % cols) * p);
        for dy in 0..p {
            let start = image.index(y0 + dy, x0, 0);
            image.data[start..start + row_len].copy_from_slice(&pattern[dy * row_len..(dy + 1) * row_len]);
        }
    }
    Ok(image)
}

/// Replaces each character, independently with probability `rate`, by a
/// different lowercase letter.
fn corrupt_word(word: &str, rate: f64, rng: &mut ChaCha8Rng) -> String {
    word.chars()
        .map(|c| {
            if rng.random::<f64>() >= rate {
                return c;
            }
            loop {
                let r = (b'a' + rng.random_range(0..26u8)) as char;
                if r != c {
                    break r;
                }
            }
        })
        .collect()
}

/// In-memory synthetic corpus: manifest with inline images plus the word
/// inventory it was drawn from.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub manifest: CorpusManifest,
    pub vocabulary: SyntheticVocabulary,
    pub buckets: Vocabulary,
}

/// Draws the whole corpus from `spec.seed`. Pure: equal specs give equal
/// corpora.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let vocabulary = synthetic_vocabulary(spec, &mut rng);
    let refs: Vec<&str> = vocabulary.words.iter().map(String::as_str).collect();
    let buckets = Vocabulary::collision_free(&refs, 4 * spec.vocab_size)?;

    let geometry = spec.geometry;
    let m = geometry.patch_count();
    let min_len = m.div_ceil(2).max(1);
    let mut records = Vec::with_capacity(spec.classes * spec.docs_per_class);
    for k in 0..spec.classes {
        let own = vocabulary.class_words(k);
        for d in 0..spec.docs_per_class {
            let len = rng.random_range(min_len..=m);
            let tokens: Vec<&str> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < spec.noise_rate {
                        refs[rng.random_range(0..refs.len())]
                    } else {
                        own[rng.random_range(0..own.len())]
                    }
                })
                .collect();
            let char_rate = (2.0 * spec.noise_rate).min(1.0);
            let noisy: Vec<String> = tokens.iter().map(|w| corrupt_word(w, char_rate, &mut rng)).collect();
            let ids: Vec<u32> = tokens.iter().map(|w| buckets.word_id(w)).collect();
            let image = render_document_image(&ids, &geometry)?;
            let content = BTreeMap::from([
                (CLEAN.to_string(), tokens.join(" ")),
                (NOISY.to_string(), noisy.join(" ")),
            ]);
            records.push(DocumentRecord {
                id: format!("c{k:02}-d{d:04}"),
                label: k,
                content,
                image: ImageSource::Inline(image),
            });
        }
    }
    let classes = vocabulary
        .class_names
        .iter()
        .enumerate()
        .map(|(index, name)| ClassLabel {
            index,
            name: name.clone(),
        })
        .collect();
    let manifest = CorpusManifest {
        classes,
        channels: vec![CLEAN.to_string(), NOISY.to_string()],
        geometry,
        vocab_buckets: Some(buckets.size()),
        records,
    };
    Ok(SyntheticCorpus {
        manifest,
        vocabulary,
        buckets,
    })
}

/// Generates the synthetic corpus into `dir` (`manifest.jsonl` plus one
/// `.f32` file per image under `images/`) and returns the loaded manifest.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, dir: &Path) -> Result<CorpusManifest> {
    let corpus = synthesize(spec)?;
    let path = dir.join("manifest.jsonl");
    corpus.manifest.write(&path, Some("images"))?;
    load_manifest(&path)
}

/// Bag-of-words counts over `vocab` for a text, used by sanity oracles.
pub fn bag_of_words(text: &str, vocab: &[String]) -> Vec<f64> {
    let mut counts = vec![0.0; vocab.len()];
    for w in words(text) {
        if let Some(i) = vocab.iter().position(|v| *v == w) {
            counts[i] += 1.0;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenize::patchify;

    fn small_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            docs_per_class: 6,
            vocab_size: 40,
            keywords_per_class: 3,
            noise_rate: 0.1,
            seed: 11,
            geometry: ImageGeometry::new(16, 16, 1, 4).unwrap(),
        }
    }

    #[test]
    fn default_spec_counts() {
        let corpus = synthesize(&SyntheticSpec::default()).unwrap();
        let m = &corpus.manifest;
        assert_eq!(m.records.len(), 800);
        assert_eq!(m.classes.len(), 16);
        assert_eq!(m.channels, vec!["clean", "noisy"]);
        assert!(m.class_counts().iter().all(|&c| c == 50));
        assert!(corpus.buckets.size() >= 4 * 128);
    }

    #[test]
    fn class_names_unique_and_keywords_disjoint() {
        let corpus = synthesize(&SyntheticSpec::default()).unwrap();
        let v = &corpus.vocabulary;
        let names: HashSet<_> = v.class_names.iter().collect();
        assert_eq!(names.len(), 16);
        let mut all = HashSet::new();
        for kws in &v.keywords {
            for w in kws {
                assert!(all.insert(w.clone()), "keyword {w} shared");
            }
        }
        assert_eq!(v.words.len(), 128);
        let distinct: HashSet<_> = v.words.iter().collect();
        assert_eq!(distinct.len(), 128);
    }

    #[test]
    fn consecutive_facet_blocks_cover_grid() {
        let corpus = synthesize(&SyntheticSpec::default()).unwrap();
        let v = &corpus.vocabulary;
        for block in 0..4 {
            let q: HashSet<_> = (block * 4..block * 4 + 4).map(|k| &v.facet_words[k][0]).collect();
            let kinds: HashSet<_> = (block * 4..block * 4 + 4).map(|k| &v.facet_words[k][1]).collect();
            assert_eq!((q.len(), kinds.len()), (4, 4));
        }
    }

    #[test]
    fn zero_noise_content_uses_class_words_only() {
        let spec = SyntheticSpec {
            noise_rate: 0.0,
            ..small_spec()
        };
        let corpus = synthesize(&spec).unwrap();
        for r in &corpus.manifest.records {
            let own = corpus.vocabulary.class_words(r.label);
            for w in r.content[CLEAN].split(' ') {
                assert!(own.contains(&w), "{w} not a word of class {}", r.label);
            }
            assert_eq!(r.content[CLEAN], r.content[NOISY]);
        }
    }

    #[test]
    fn rendered_patches_are_token_glyphs() {
        let spec = SyntheticSpec {
            noise_rate: 0.0,
            ..small_spec()
        };
        let corpus = synthesize(&spec).unwrap();
        let g = spec.geometry;
        for r in &corpus.manifest.records {
            let img = corpus.manifest.load_image(r).unwrap();
            let patches = patchify(&img, g.patch).unwrap();
            let ids = corpus.buckets.encode(&r.content[CLEAN]);
            assert!(ids.len() <= g.patch_count());
            let mut rendered: Vec<Vec<u32>> = (0..ids.len())
                .map(|j| patches.patch(j).iter().map(|v| (*v as f32).to_bits()).collect())
                .collect();
            let mut expected: Vec<Vec<u32>> = ids
                .iter()
                .map(|&id| token_pattern(id, &g).iter().map(|v| v.to_bits()).collect())
                .collect();
            rendered.sort();
            expected.sort();
            assert_eq!(rendered, expected);
            for j in ids.len()..g.patch_count() {
                assert!(patches.patch(j).iter().all(|&v| v == f64::from(PAPER)));
            }
        }
    }

    #[test]
    fn empty_token_list_renders_blank_page() {
        let g = ImageGeometry::new(32, 32, 1, 8).unwrap();
        let img = render_document_image(&[], &g).unwrap();
        assert!(img.data.iter().all(|&v| v == PAPER));
        assert_eq!(g.patch_count(), 16);
        let a = render_document_image(&[5, 9, 5], &g).unwrap();
        let b = render_document_image(&[5, 9, 5], &g).unwrap();
        assert_eq!(a, b);
        assert!(render_document_image(&[1], &ImageGeometry { patch: 5, ..g }).is_err());
    }

    #[test]
    fn rendering_truncates_past_patch_budget() {
        let g = ImageGeometry::new(8, 8, 1, 4).unwrap();
        let long: Vec<u32> = (3..20).collect();
        let img = render_document_image(&long, &g).unwrap();
        let first4 = render_document_image(&long[..4], &g).unwrap();
        assert_eq!(img, first4);
    }

    #[test]
    fn invalid_specs_name_their_field() {
        let bad = SyntheticSpec {
            docs_per_class: 1,
            ..small_spec()
        };
        assert!(matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "docs_per_class"));
        let bad = SyntheticSpec {
            vocab_size: 10,
            ..small_spec()
        };
        assert!(matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "vocab_size"));
        let bad = SyntheticSpec {
            noise_rate: 1.0,
            ..small_spec()
        };
        assert!(matches!(bad.validate(), Err(Error::Validation { field, .. }) if field == "noise_rate"));
    }

    #[test]
    fn select_channel_views() {
        let corpus = synthesize(&small_spec()).unwrap();
        let m = &corpus.manifest;
        let clean = select_channel(m, CLEAN).unwrap();
        for r in clean.records() {
            assert_eq!(clean.content(r), r.content[CLEAN]);
        }
        match select_channel(m, "docTR") {
            Err(Error::UnknownChannel { available, .. }) => assert_eq!(available, vec!["clean", "noisy"]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stratified_split_holds_out_per_class() {
        let corpus = synthesize(&SyntheticSpec::default()).unwrap();
        let m = &corpus.manifest;
        let all: Vec<usize> = (0..m.records.len()).collect();
        let (kept, held) = stratified_split(m, &all, 0.2, 3);
        assert_eq!(held.len(), 160);
        assert_eq!(kept.len() + held.len(), 800);
        let again = stratified_split(m, &all, 0.2, 3);
        assert_eq!((kept.clone(), held.clone()), again);
        let held_set: HashSet<_> = held.iter().collect();
        assert!(kept.iter().all(|i| !held_set.contains(i)));
    }
}
