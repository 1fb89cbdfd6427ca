//! Seen/unseen class partitions: sequential group splits and rank-ordered
//! incremental splits.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusManifest;
use crate::error::{Error, Result};

/// RVL-CDIP class order under which each group of four consecutive classes
/// forms one unseen set of the standard sequential splits.
pub const RVL_CDIP_CLASSES: [&str; 16] = [
    "letter",
    "form",
    "email",
    "handwritten",
    "advertisement",
    "scientific report",
    "scientific publication",
    "specification",
    "file folder",
    "news article",
    "budget",
    "invoice",
    "presentation",
    "questionnaire",
    "resume",
    "memo",
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSpec {
    pub name: String,
    pub seen: BTreeSet<usize>,
    pub unseen: BTreeSet<usize>,
}

impl SplitSpec {
    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.contains(&class)
    }

    pub fn is_unseen(&self, class: usize) -> bool {
        self.unseen.contains(&class)
    }

    pub fn to_file(&self, classes: &[String]) -> SplitFile {
        let names = |set: &BTreeSet<usize>| set.iter().map(|&i| classes[i].clone()).collect();
        SplitFile {
            name: self.name.clone(),
            seen: names(&self.seen),
            unseen: names(&self.unseen),
        }
    }

    pub fn from_file(file: &SplitFile, classes: &[String]) -> Result<Self> {
        let lookup = |names: &[String]| -> Result<BTreeSet<usize>> {
            names
                .iter()
                .map(|n| {
                    classes
                        .iter()
                        .position(|c| c == n)
                        .ok_or_else(|| Error::UnknownClass(n.clone()))
                })
                .collect()
        };
        Ok(Self {
            name: file.name.clone(),
            seen: lookup(&file.seen)?,
            unseen: lookup(&file.unseen)?,
        })
    }
}

/// On-disk split, classes referred to by name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitFile {
    pub name: String,
    pub seen: Vec<String>,
    pub unseen: Vec<String>,
}

pub fn save_split(split: &SplitSpec, classes: &[String], path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&split.to_file(classes))?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_split(path: &Path, classes: &[String]) -> Result<SplitSpec> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: SplitFile = serde_json::from_str(&text)?;
    SplitSpec::from_file(&file, classes)
}

/// Name of the i-th sequential split: "A", "B", ..., "Z", "AA", ...
fn sequential_name(mut i: usize) -> String {
    let mut name = Vec::new();
    loop {
        name.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    name.reverse();
    String::from_utf8(name).expect("ascii")
}

/// Split i puts the i-th block of `group_size` consecutive classes (in the
/// given order) into the unseen set. `order` holds class indices.
pub fn make_sequential_splits(order: &[usize], group_size: usize) -> Result<Vec<SplitSpec>> {
    if group_size == 0 || order.is_empty() || !order.len().is_multiple_of(group_size) {
        return Err(Error::validation(
            "group_size",
            format!("{} classes cannot be split into groups of {group_size}", order.len()),
        ));
    }
    if order.len() / group_size < 2 {
        return Err(Error::validation(
            "group_size",
            "need at least two groups so seen is non-empty",
        ));
    }
    let all: BTreeSet<usize> = order.iter().copied().collect();
    if all.len() != order.len() {
        return Err(Error::validation("classes", "class order contains duplicates"));
    }
    Ok(order
        .chunks(group_size)
        .enumerate()
        .map(|(i, block)| {
            let unseen: BTreeSet<usize> = block.iter().copied().collect();
            SplitSpec {
                name: sequential_name(i),
                seen: all.difference(&unseen).copied().collect(),
                unseen,
            }
        })
        .collect())
}

/// Classes ascending by accuracy, ties broken by class index.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOrdering {
    entries: Vec<(usize, f64)>,
}

impl RankOrdering {
    /// Sorts `(class, accuracy)` pairs and checks they cover `0..classes`
    /// exactly once.
    pub fn new(mut entries: Vec<(usize, f64)>, classes: usize) -> Result<Self> {
        let mut seen = vec![false; classes];
        for &(c, acc) in &entries {
            if c >= classes {
                return Err(Error::validation("rank", format!("class index {c} out of range")));
            }
            if seen[c] {
                return Err(Error::validation("rank", format!("class index {c} listed twice")));
            }
            if !(0.0..=100.0).contains(&acc) {
                return Err(Error::validation("rank", format!("accuracy {acc} outside [0, 100]")));
            }
            seen[c] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::validation("rank", format!("class index {missing} missing")));
        }
        entries.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a `class,accuracy` CSV (with header) against the given class names.
pub fn load_rank_ordering(path: &Path, classes: &[String]) -> Result<RankOrdering> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut entries = Vec::new();
    for row in reader.deserialize::<(String, f64)>() {
        let (name, acc) = row?;
        let idx = classes
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::UnknownClass(name.clone()))?;
        if entries.iter().any(|&(c, _)| c == idx) {
            return Err(Error::validation("rank", format!("class `{name}` listed twice")));
        }
        entries.push((idx, acc));
    }
    if let Some(missing) = (0..classes.len()).find(|i| !entries.iter().any(|e| e.0 == *i)) {
        return Err(Error::validation(
            "rank",
            format!("class `{}` missing from rank ordering", classes[missing]),
        ));
    }
    RankOrdering::new(entries, classes.len())
}

pub fn save_rank_ordering(rank: &RankOrdering, classes: &[String], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["class", "accuracy"])?;
    for &(c, acc) in rank.entries() {
        writer.write_record([classes[c].clone(), acc.to_string()])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Inclusive bounds on the incremental split index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncrementalBounds {
    pub min: usize,
    pub max: usize,
}

impl Default for IncrementalBounds {
    fn default() -> Self {
        Self { min: 2, max: 8 }
    }
}

/// Unseen set = the `i` worst-ranked classes.
pub fn make_incremental_split(rank: &RankOrdering, i: usize, bounds: IncrementalBounds) -> Result<SplitSpec> {
    let k = rank.len();
    if i < bounds.min.max(1) || i > bounds.max || i >= k {
        return Err(Error::validation(
            "incremental",
            format!(
                "index {i} outside [{}, {}] for {k} classes",
                bounds.min.max(1),
                bounds.max.min(k.saturating_sub(1))
            ),
        ));
    }
    let unseen: BTreeSet<usize> = rank.classes().take(i).collect();
    Ok(SplitSpec {
        name: format!("S_I_{i}"),
        seen: rank.classes().skip(i).collect(),
        unseen,
    })
}

/// Checks disjointness, exhaustiveness and that every class has records.
pub fn validate_split(split: &SplitSpec, manifest: &CorpusManifest) -> std::result::Result<(), Vec<String>> {
    let names = manifest.class_names();
    let k = names.len();
    let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    let mut violations = Vec::new();
    for &c in split.seen.intersection(&split.unseen) {
        violations.push(format!("class `{}` is both seen and unseen", label(c)));
    }
    for &c in split.seen.union(&split.unseen) {
        if c >= k {
            violations.push(format!("class index {c} is not in the manifest"));
        }
    }
    for (c, name) in names.iter().enumerate() {
        if !split.seen.contains(&c) && !split.unseen.contains(&c) {
            violations.push(format!("class `{name}` is neither seen nor unseen"));
        }
    }
    if split.seen.is_empty() {
        violations.push("seen set is empty".into());
    }
    if split.unseen.is_empty() {
        violations.push("unseen set is empty".into());
    }
    let counts = manifest.class_counts();
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            violations.push(format!("class `{}` has no records", names[c]));
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

pub fn check_split(split: &SplitSpec, manifest: &CorpusManifest) -> Result<()> {
    validate_split(split, manifest).map_err(|violations| Error::InvalidSplit {
        name: split.name.clone(),
        violations,
    })
}
