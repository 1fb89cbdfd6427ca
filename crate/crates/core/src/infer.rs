//! Zero-shot classifiers built from class-name prompts, fused scoring and
//! calibrated stacking.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::dot;
use crate::corpus::{CorpusManifest, DatasetView};
use crate::error::{Error, Result};
use crate::model::{EncoderInput, JointEmbedding, Modality, ModelParams};
use crate::tokenize::{patchify, tokenize, PatchSequence, TokenSequence};

pub const LABEL_PLACEHOLDER: &str = "{label}";
pub const DEFAULT_TEMPLATE: &str = "an image of a {label}.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let template = template.into();
        if !template.contains(LABEL_PLACEHOLDER) {
            return Err(Error::validation(
                "template",
                format!("`{template}` has no {LABEL_PLACEHOLDER} placeholder"),
            ));
        }
        Ok(Self(template))
    }

    pub fn instantiate(&self, label: &str) -> String {
        self.0.replace(LABEL_PLACEHOLDER, label)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.into())
    }
}

impl TryFrom<String> for PromptTemplate {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        Self::new(s)
    }
}

impl From<PromptTemplate> for String {
    fn from(t: PromptTemplate) -> String {
        t.0
    }
}

/// How temperatures enter the inference logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    /// S_TI = τ_IC·⟨I, T⟩, S_TC = τ_TC·⟨C, T⟩.
    #[default]
    Multiply,
    /// Divide by τ instead, matching how similarities enter the loss.
    Divide,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    /// Average of text-to-image and text-to-content logits.
    #[default]
    Late,
    /// Score the renormalized sum of image and content embeddings.
    Early,
}

impl Fusion {
    pub const ALL: [Fusion; 2] = [Fusion::Late, Fusion::Early];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Late => "late",
            Fusion::Early => "early",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "late" => Ok(Fusion::Late),
            "early" => Ok(Fusion::Early),
            _ => Err(Error::validation("fusion", format!("`{s}` is not late or early"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Temperatures {
    pub tau_ic: f64,
    pub tau_tc: f64,
}

impl Temperatures {
    pub fn of(params: &ModelParams) -> Self {
        Self {
            tau_ic: params.tau_ic(),
            tau_tc: params.tau_tc(),
        }
    }
}

/// Text tokens of the prompt for one class name.
pub fn prompt_tokens(template: &PromptTemplate, label: &str, params: &ModelParams) -> TokenSequence {
    let cfg = params.config();
    tokenize(&template.instantiate(label), &cfg.vocabulary(), cfg.text_context)
}

pub fn content_tokens(content: &str, params: &ModelParams) -> TokenSequence {
    let cfg = params.config();
    tokenize(content, &cfg.vocabulary(), cfg.content_context)
}

/// One embedded prompt per class of the active label set.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    pub template: PromptTemplate,
    /// Manifest class index of each bank entry.
    pub classes: Vec<usize>,
    pub names: Vec<String>,
    pub embeddings: Vec<JointEmbedding>,
}

impl PromptBank {
    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }
}

/// Embeds `template` instantiated with each `(class index, name)`.
pub fn build_prompt_bank(
    labels: &[(usize, String)],
    template: &PromptTemplate,
    params: &ModelParams,
) -> Result<PromptBank> {
    if labels.len() < 2 {
        return Err(Error::validation("labels", "a prompt bank needs at least two classes"));
    }
    let mut names = HashSet::new();
    for (_, name) in labels {
        if !names.insert(name.as_str()) {
            return Err(Error::validation("labels", format!("duplicate class name `{name}`")));
        }
    }
    let embeddings = labels
        .iter()
        .map(|(_, name)| {
            let tokens = prompt_tokens(template, name, params);
            params.embed(Modality::Text, EncoderInput::Tokens(&tokens))
        })
        .collect::<Result<_>>()?;
    Ok(PromptBank {
        template: template.clone(),
        classes: labels.iter().map(|l| l.0).collect(),
        names: labels.iter().map(|l| l.1.clone()).collect(),
        embeddings,
    })
}

/// Bank labels for a set of manifest class indices, in index order.
pub fn labels_for(manifest: &CorpusManifest, classes: impl IntoIterator<Item = usize>) -> Vec<(usize, String)> {
    classes
        .into_iter()
        .map(|c| (c, manifest.classes[c].name.clone()))
        .collect()
}

fn scaled(tau: f64, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Multiply => tau,
        ScoreMode::Divide => 1.0 / tau,
    }
}

fn check_dim(e: &[f64], bank: &PromptBank) -> Result<()> {
    match bank.embeddings.first() {
        Some(t) if t.dim() != e.len() => Err(Error::Shape(format!(
            "embedding of dim {} against prompt bank of dim {}",
            e.len(),
            t.dim()
        ))),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LateScores {
    pub s_ti: Vec<f64>,
    pub s_tc: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn score_late_fusion(
    image: &[f64],
    content: &[f64],
    bank: &PromptBank,
    temps: Temperatures,
    mode: ScoreMode,
) -> Result<LateScores> {
    check_dim(image, bank)?;
    check_dim(content, bank)?;
    let (a, b) = (scaled(temps.tau_ic, mode), scaled(temps.tau_tc, mode));
    let s_ti: Vec<f64> = bank.embeddings.iter().map(|t| a * dot(image, t.as_slice())).collect();
    let s_tc: Vec<f64> = bank.embeddings.iter().map(|t| b * dot(content, t.as_slice())).collect();
    let s = combine_late(&s_ti, &s_tc);
    Ok(LateScores { s_ti, s_tc, s })
}

/// Elementwise mean of two logit vectors.
pub fn combine_late(s_ti: &[f64], s_tc: &[f64]) -> Vec<f64> {
    s_ti.iter().zip(s_tc).map(|(x, y)| (x + y) / 2.0).collect()
}

pub fn score_early_fusion(
    image: &[f64],
    content: &[f64],
    bank: &PromptBank,
    temps: Temperatures,
    mode: ScoreMode,
) -> Result<Vec<f64>> {
    check_dim(image, bank)?;
    check_dim(content, bank)?;
    let sum: Vec<f64> = image.iter().zip(content).map(|(a, b)| a + b).collect();
    let fused = JointEmbedding::normalize(sum).map_err(|e| match e {
        Error::DegenerateEmbedding => Error::DegenerateFusion,
        other => other,
    })?;
    let tau = scaled((temps.tau_ic + temps.tau_tc) / 2.0, mode);
    Ok(bank.embeddings.iter().map(|t| tau * fused.dot(t)).collect())
}

/// Index of the largest score; the lowest index wins ties.
pub fn predict(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Subtracts γ from every seen-class score.
pub fn calibrate(scores: &[f64], seen: &[bool], gamma: f64) -> Vec<f64> {
    assert_eq!(scores.len(), seen.len(), "seen mask must match scores");
    scores
        .iter()
        .zip(seen)
        .map(|(&s, &is_seen)| if is_seen { s - gamma } else { s })
        .collect()
}

/// Image and content embeddings of one record.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordEmbedding {
    pub record: usize,
    pub image: JointEmbedding,
    pub content: JointEmbedding,
}

pub fn record_patches(manifest: &CorpusManifest, record: usize) -> Result<PatchSequence> {
    let image = manifest.load_image(&manifest.records[record])?;
    patchify(&image, manifest.geometry.patch)
}

/// Embeds image and selected content channel of each record in the view.
pub fn embed_records(view: &DatasetView<'_>, params: &ModelParams) -> Result<Vec<RecordEmbedding>> {
    let manifest = view.manifest();
    view.indices()
        .iter()
        .map(|&i| {
            let record = &manifest.records[i];
            let content = view.content(record);
            if content.trim().is_empty() {
                return Err(Error::validation(
                    "content",
                    format!("record `{}` has no content; inference needs it", record.id),
                ));
            }
            let patches = record_patches(manifest, i)?;
            let tokens = content_tokens(content, params);
            Ok(RecordEmbedding {
                record: i,
                image: params.embed(Modality::Image, EncoderInput::Patches(&patches))?,
                content: params.embed(Modality::Content, EncoderInput::Tokens(&tokens))?,
            })
        })
        .collect()
}

/// Scores of one record against a bank; `s` holds the fused scores used
/// for prediction under the chosen fusion.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordScores {
    pub record: usize,
    pub s_ti: Vec<f64>,
    pub s_tc: Vec<f64>,
    pub s: Vec<f64>,
}

pub fn score_records(
    embeddings: &[RecordEmbedding],
    bank: &PromptBank,
    temps: Temperatures,
    fusion: Fusion,
    mode: ScoreMode,
) -> Result<Vec<RecordScores>> {
    embeddings
        .iter()
        .map(|e| {
            let late = score_late_fusion(e.image.as_slice(), e.content.as_slice(), bank, temps, mode)?;
            let s = match fusion {
                Fusion::Late => late.s,
                Fusion::Early => score_early_fusion(e.image.as_slice(), e.content.as_slice(), bank, temps, mode)?,
            };
            Ok(RecordScores {
                record: e.record,
                s_ti: late.s_ti,
                s_tc: late.s_tc,
                s,
            })
        })
        .collect()
}

/// Writes `record_id,true_label,pred_label` followed by one S_TI, S_TC and
/// S column per bank class. `predictions` are bank positions.
pub fn write_predictions_csv(
    path: &Path,
    manifest: &CorpusManifest,
    bank: &PromptBank,
    scores: &[RecordScores],
    predictions: &[usize],
) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["record_id".to_string(), "true_label".into(), "pred_label".into()];
    for prefix in ["S_TI", "S_TC", "S"] {
        header.extend(bank.names.iter().map(|n| format!("{prefix}[{n}]")));
    }
    writer.write_record(&header)?;
    for (row, &pred) in scores.iter().zip(predictions) {
        let record = &manifest.records[row.record];
        let mut fields = vec![
            record.id.clone(),
            manifest.classes[record.label].name.clone(),
            bank.names[pred].clone(),
        ];
        for values in [&row.s_ti, &row.s_tc, &row.s] {
            fields.extend(values.iter().map(|v| format!("{v:.6}")));
        }
        writer.write_record(&fields)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
