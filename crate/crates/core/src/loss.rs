//! Coupled contrastive loss aligning content with images and with prompt
//! text, with exact gradients.

use serde::{Deserialize, Serialize};

use crate::autograd::dot;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum Alignment {
    /// Content aligned with both images and prompt text.
    #[default]
    #[serde(rename = "both")]
    Both,
    /// Content-to-image term only.
    #[serde(rename = "c2i")]
    ContentToImage,
    /// Content-to-text term only.
    #[serde(rename = "c2t")]
    ContentToText,
}

impl Alignment {
    pub const ALL: [Alignment; 3] = [Alignment::Both, Alignment::ContentToImage, Alignment::ContentToText];

    pub fn as_str(self) -> &'static str {
        match self {
            Alignment::Both => "both",
            Alignment::ContentToImage => "c2i",
            Alignment::ContentToText => "c2t",
        }
    }

    fn weights(self) -> (f64, f64) {
        match self {
            Alignment::Both => (0.5, 0.5),
            Alignment::ContentToImage => (0.5, 0.0),
            Alignment::ContentToText => (0.0, 0.5),
        }
    }
}

impl std::str::FromStr for Alignment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Alignment::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::validation("alignment", format!("`{s}` is not one of both, c2i, c2t")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alignment: Alignment,
    /// Count the positive pair in the softmax denominator (standard
    /// InfoNCE). Off by default: each row's denominator runs over the
    /// other samples only.
    pub include_positive: bool,
}

/// Log-temperatures; τ = exp(log τ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperaturePair {
    pub log_tau_ic: f64,
    pub log_tau_tc: f64,
}

/// N×N cosine similarities of unit vectors, entry (i, j) = ⟨a_i, b_j⟩.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(a: &[Vec<f64>], b: &[Vec<f64>]) -> Self {
        assert_eq!(a.len(), b.len(), "similarity matrix needs equal batches");
        let n = a.len();
        let mut data = Vec::with_capacity(n * n);
        for ai in a {
            for bj in b {
                data.push(dot(ai, bj));
            }
        }
        Self { n, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        assert!(rows.iter().all(|r| r.len() == n), "similarity matrix must be square");
        Self {
            n,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }
}

/// Loss of row i plus dL/ds_ij for every j, where s_ij = sim_ij / τ.
fn row_with_grad(i: usize, sims: &SimilarityMatrix, tau: f64, include_positive: bool) -> Result<(f64, Vec<f64>)> {
    let n = sims.len();
    if i >= n {
        return Err(Error::Shape(format!("row {i} outside batch of {n}")));
    }
    if n < 2 && !include_positive {
        return Err(Error::EmptyDenominator);
    }
    let scores: Vec<f64> = sims.row(i).iter().map(|s| s / tau).collect();
    let in_denominator = |j: usize| include_positive || j != i;
    let max = (0..n)
        .filter(|&j| in_denominator(j))
        .map(|j| scores[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = (0..n)
        .filter(|&j| in_denominator(j))
        .map(|j| (scores[j] - max).exp())
        .sum();
    let log_denominator = max + total.ln();
    let loss = log_denominator - scores[i];
    let grad = (0..n)
        .map(|j| {
            let p = if in_denominator(j) {
                (scores[j] - log_denominator).exp()
            } else {
                0.0
            };
            p - if j == i { 1.0 } else { 0.0 }
        })
        .collect();
    Ok((loss, grad))
}

/// −log(exp(s_ii/τ) / Σ_j exp(s_ij/τ)) over an image-content similarity
/// matrix.
pub fn image_content_loss_row(i: usize, sims: &SimilarityMatrix, tau_ic: f64, cfg: &LossConfig) -> Result<f64> {
    row_with_grad(i, sims, tau_ic, cfg.include_positive).map(|r| r.0)
}

/// Same as [`image_content_loss_row`] over a text-content matrix.
pub fn text_content_loss_row(i: usize, sims: &SimilarityMatrix, tau_tc: f64, cfg: &LossConfig) -> Result<f64> {
    row_with_grad(i, sims, tau_tc, cfg.include_positive).map(|r| r.0)
}

/// Unit-norm image, text and content embeddings of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTriplet {
    pub image: Vec<Vec<f64>>,
    pub text: Vec<Vec<f64>>,
    pub content: Vec<Vec<f64>>,
}

impl BatchTriplet {
    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.image.len();
        if self.text.len() != n || self.content.len() != n {
            return Err(Error::Shape("image, text and content batches differ in size".into()));
        }
        let d = self.content.first().map_or(0, Vec::len);
        let all = self.image.iter().chain(&self.text).chain(&self.content);
        if all.clone().any(|v| v.len() != d) {
            return Err(Error::Shape("embedding dimensions differ within the batch".into()));
        }
        if all.flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("loss input".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Σ_i ½(L_ic + L_tc), with a dropped term weighted zero.
    pub total: f64,
    pub image_content: f64,
    pub text_content: f64,
    pub grad_image: Vec<Vec<f64>>,
    pub grad_text: Vec<Vec<f64>>,
    pub grad_content: Vec<Vec<f64>>,
    pub grad_log_tau_ic: f64,
    pub grad_log_tau_tc: f64,
}

impl LossOutput {
    /// Total divided by the batch size.
    pub fn mean(&self) -> f64 {
        self.total / self.grad_content.len().max(1) as f64
    }
}

/// Accumulates one weighted contrastive term (anchors `a` against contents
/// `c`) into the output gradients. Returns the unweighted sum of row losses.
#[allow(clippy::too_many_arguments)]
fn contrastive_term(
    a: &[Vec<f64>],
    c: &[Vec<f64>],
    log_tau: f64,
    weight: f64,
    include_positive: bool,
    grad_a: &mut [Vec<f64>],
    grad_c: &mut [Vec<f64>],
    grad_log_tau: &mut f64,
) -> Result<f64> {
    let tau = log_tau.exp();
    let sims = SimilarityMatrix::new(a, c);
    let mut sum = 0.0;
    for i in 0..a.len() {
        let (loss, ds) = row_with_grad(i, &sims, tau, include_positive)?;
        sum += loss;
        if weight == 0.0 {
            continue;
        }
        for (j, &g) in ds.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let g = weight * g;
            for (ga, cj) in grad_a[i].iter_mut().zip(&c[j]) {
                *ga += g * cj / tau;
            }
            for (gc, ai) in grad_c[j].iter_mut().zip(&a[i]) {
                *gc += g * ai / tau;
            }
            *grad_log_tau -= g * sims.get(i, j) / tau;
        }
    }
    Ok(sum)
}

pub fn coupled_loss(batch: &BatchTriplet, temps: TemperaturePair, cfg: &LossConfig) -> Result<LossOutput> {
    batch.validate()?;
    let n = batch.len();
    if n < 2 && !cfg.include_positive {
        return Err(Error::EmptyDenominator);
    }
    let d = batch.content.first().map_or(0, Vec::len);
    let zeros = || vec![vec![0.0; d]; n];
    let (mut grad_image, mut grad_text, mut grad_content) = (zeros(), zeros(), zeros());
    let (mut g_ic, mut g_tc) = (0.0, 0.0);
    let (w_ic, w_tc) = cfg.alignment.weights();
    let image_content = contrastive_term(
        &batch.image,
        &batch.content,
        temps.log_tau_ic,
        w_ic,
        cfg.include_positive,
        &mut grad_image,
        &mut grad_content,
        &mut g_ic,
    )?;
    let text_content = contrastive_term(
        &batch.text,
        &batch.content,
        temps.log_tau_tc,
        w_tc,
        cfg.include_positive,
        &mut grad_text,
        &mut grad_content,
        &mut g_tc,
    )?;
    let total = w_ic * image_content + w_tc * text_content;
    if !total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(LossOutput {
        total,
        image_content,
        text_content,
        grad_image,
        grad_text,
        grad_content,
        grad_log_tau_ic: g_ic,
        grad_log_tau_tc: g_tc,
    })
}
