//! ZSL and GZSL evaluation, calibrated-stacking selection and the ablation
//! harness.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{stratified_split, CorpusManifest, DatasetView};
use crate::error::{Error, Result};
use crate::infer::{
    build_prompt_bank, calibrate, embed_records, labels_for, predict, score_records, Fusion, PromptBank,
    PromptTemplate, RecordEmbedding, RecordScores, ScoreMode, Temperatures,
};
use crate::loss::Alignment;
use crate::model::{ModelParams, Provenance};
use crate::splits::SplitSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    /// Percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerClassAccuracy {
    pub classes: Vec<ClassAccuracy>,
    /// Unweighted mean of the per-class accuracies, percent.
    pub mean: f64,
}

/// Per-class top-1 accuracy over `class_set`. Samples whose label lies
/// outside the set are ignored; a class without samples is an error.
pub fn per_class_top1(predictions: &[usize], labels: &[usize], class_set: &[usize]) -> Result<PerClassAccuracy> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if class_set.is_empty() {
        return Err(Error::validation("classes", "no classes to evaluate"));
    }
    let mut counts: BTreeMap<usize, (usize, usize)> = class_set.iter().map(|&c| (c, (0, 0))).collect();
    for (&p, &y) in predictions.iter().zip(labels) {
        if let Some((correct, total)) = counts.get_mut(&y) {
            *total += 1;
            if p == y {
                *correct += 1;
            }
        }
    }
    let mut classes = Vec::with_capacity(counts.len());
    for &c in class_set {
        let (correct, total) = counts[&c];
        if total == 0 {
            return Err(Error::validation("classes", format!("class index {c} has no samples")));
        }
        classes.push(ClassAccuracy {
            class: c,
            correct,
            total,
            accuracy: 100.0 * correct as f64 / total as f64,
        });
    }
    let mean = classes.iter().map(|c| c.accuracy).sum::<f64>() / classes.len() as f64;
    Ok(PerClassAccuracy { classes, mean })
}

/// 2us / (u + s), or 0 when both are 0.
pub fn harmonic_mean(u: f64, s: f64) -> Result<f64> {
    if !(u >= 0.0 && s >= 0.0) {
        return Err(Error::validation("accuracy", format!("harmonic mean of {u} and {s}")));
    }
    if u + s == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * u * s / (u + s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub fusion: Fusion,
    pub score_mode: ScoreMode,
    pub template: PromptTemplate,
    /// Fraction of each seen class held out of training for GZSL.
    pub holdout: f64,
    /// Fraction of the GZSL pool used to select γ.
    pub validation: f64,
    /// Explicit γ values; otherwise an evenly spaced grid.
    pub gamma_grid: Option<Vec<f64>>,
    pub gamma_points: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            fusion: Fusion::Late,
            score_mode: ScoreMode::Multiply,
            template: PromptTemplate::default(),
            holdout: 0.2,
            validation: 0.5,
            gamma_grid: None,
            gamma_points: 41,
            seed: 0,
        }
    }
}

impl EvalOptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.holdout) || self.holdout == 0.0 {
            return Err(Error::validation("eval.holdout", "must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.validation) || self.validation == 0.0 {
            return Err(Error::validation("eval.validation", "must lie in (0, 1)"));
        }
        if let Some(grid) = &self.gamma_grid {
            if grid.is_empty() {
                return Err(Error::validation("eval.gamma_grid", "must not be empty"));
            }
            if grid.iter().any(|g| !(g.is_finite() && *g >= 0.0)) {
                return Err(Error::validation(
                    "eval.gamma_grid",
                    "values must be finite and non-negative",
                ));
            }
        } else if self.gamma_points < 1 {
            return Err(Error::validation("eval.gamma_points", "must be at least 1"));
        }
        Ok(())
    }
}

/// Splits the seen-class records into (training, GZSL holdout).
pub fn seen_partition(
    manifest: &CorpusManifest,
    split: &SplitSpec,
    holdout: f64,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let seen: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| split.is_seen(manifest.records[i].label))
        .collect();
    stratified_split(manifest, &seen, holdout, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Setting {
    Zsl,
    Gzsl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub u: f64,
    pub s: f64,
    #[serde(rename = "H")]
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub seen: bool,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub split: String,
    pub channel: String,
    pub fusion: Fusion,
    pub score_mode: ScoreMode,
    /// ZSL top-1, percent.
    pub t1: Option<f64>,
    pub u: Option<f64>,
    pub s: Option<f64>,
    #[serde(rename = "H")]
    pub h: Option<f64>,
    pub gamma: Option<f64>,
    pub records: usize,
    pub per_class: Vec<ClassRow>,
    /// Calibration sweep on the validation partition.
    pub sweep: Vec<SweepRow>,
    pub tau_ic: f64,
    pub tau_tc: f64,
    pub provenance_warning: Option<String>,
    pub options: EvalOptions,
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn write_sweep_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["gamma", "u", "s", "H"])?;
        for r in &self.sweep {
            writer.write_record([r.gamma, r.u, r.s, r.h].map(|v| format!("{v:.6}")))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let setting = match self.setting {
            Setting::Zsl => "ZSL",
            Setting::Gzsl => "GZSL",
        };
        let _ = writeln!(
            md,
            "## {setting}: split {}, channel {}, {} fusion\n",
            self.split,
            self.channel,
            self.fusion.as_str()
        );
        match self.setting {
            Setting::Zsl => {
                let _ = writeln!(md, "| T1 |\n|---:|\n| {} |\n", pct(self.t1));
            }
            Setting::Gzsl => {
                let _ = writeln!(
                    md,
                    "| u | s | H | gamma |\n|---:|---:|---:|---:|\n| {} | {} | {} | {} |\n",
                    pct(self.u),
                    pct(self.s),
                    pct(self.h),
                    self.gamma.map_or("-".into(), |g| format!("{g:.4}"))
                );
            }
        }
        let _ = writeln!(
            md,
            "| class | seen | correct | total | accuracy |\n|---|---|---:|---:|---:|"
        );
        for c in &self.per_class {
            let _ = writeln!(
                md,
                "| {} | {} | {} | {} | {:.2} |",
                c.name,
                if c.seen { "yes" } else { "no" },
                c.correct,
                c.total,
                c.accuracy
            );
        }
        md
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.2}"))
}

/// Scores produced for one evaluation, with bank positions predicted.
#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub bank: PromptBank,
    pub scores: Vec<RecordScores>,
    pub predictions: Vec<usize>,
}

fn provenance_warning(provenance: Option<&Provenance>, split: &SplitSpec, manifest: &CorpusManifest) -> Option<String> {
    let expected: BTreeSet<String> = split.seen.iter().map(|&c| manifest.classes[c].name.clone()).collect();
    match provenance {
        None => Some("checkpoint carries no split provenance".into()),
        Some(p) => {
            let trained: BTreeSet<String> = p.seen.iter().cloned().collect();
            (trained != expected).then(|| {
                format!(
                    "checkpoint was trained on split `{}` whose seen classes differ from split `{}`",
                    p.split, split.name
                )
            })
        }
    }
}

/// Caches record embeddings of one checkpoint so several fusion modes and
/// settings can be scored without re-encoding.
pub struct Evaluator<'a> {
    params: &'a ModelParams,
    manifest: &'a CorpusManifest,
    channel: String,
    split: SplitSpec,
    options: EvalOptions,
    embeddings: BTreeMap<usize, RecordEmbedding>,
    unseen_records: Vec<usize>,
    validation: Vec<usize>,
    test: Vec<usize>,
    warning: Option<String>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        params: &'a ModelParams,
        provenance: Option<&Provenance>,
        view: &DatasetView<'a>,
        split: &SplitSpec,
        options: &EvalOptions,
    ) -> Result<Self> {
        options.validate()?;
        let manifest = view.manifest();
        crate::splits::check_split(split, manifest)?;
        let warning = provenance_warning(provenance, split, manifest);
        if let Some(w) = &warning {
            warn!("{w}");
        }
        let unseen_records: Vec<usize> = (0..manifest.records.len())
            .filter(|&i| split.is_unseen(manifest.records[i].label))
            .collect();
        let (_, holdout) = seen_partition(manifest, split, options.holdout, options.seed);
        let mut pool: Vec<usize> = holdout.iter().chain(&unseen_records).copied().collect();
        pool.sort_unstable();
        let (test, validation) = stratified_split(manifest, &pool, options.validation, options.seed.wrapping_add(1));
        let view = view.with_indices(pool);
        let embeddings = embed_records(&view, params)?
            .into_iter()
            .map(|e| (e.record, e))
            .collect();
        Ok(Self {
            params,
            manifest,
            channel: view.channel().to_string(),
            split: split.clone(),
            options: options.clone(),
            embeddings,
            unseen_records,
            validation,
            test,
            warning,
        })
    }

    pub fn options(&self) -> &EvalOptions {
        &self.options
    }

    pub fn warning(&self) -> Option<&str> {
        self.warning.as_deref()
    }

    fn embedded(&self, records: &[usize]) -> Vec<RecordEmbedding> {
        records.iter().map(|i| self.embeddings[i].clone()).collect()
    }

    fn labels(&self, records: &[usize]) -> Vec<usize> {
        records.iter().map(|&i| self.manifest.records[i].label).collect()
    }

    fn report(&self, setting: Setting, fusion: Fusion, records: usize) -> EvalReport {
        let temps = Temperatures::of(self.params);
        EvalReport {
            setting,
            split: self.split.name.clone(),
            channel: self.channel.clone(),
            fusion,
            score_mode: self.options.score_mode,
            t1: None,
            u: None,
            s: None,
            h: None,
            gamma: None,
            records,
            per_class: Vec::new(),
            sweep: Vec::new(),
            tau_ic: temps.tau_ic,
            tau_tc: temps.tau_tc,
            provenance_warning: self.warning.clone(),
            options: EvalOptions {
                fusion,
                ..self.options.clone()
            },
        }
    }

    fn class_rows(&self, acc: &PerClassAccuracy) -> Vec<ClassRow> {
        acc.classes
            .iter()
            .map(|c| ClassRow {
                name: self.manifest.classes[c.class].name.clone(),
                seen: self.split.is_seen(c.class),
                correct: c.correct,
                total: c.total,
                accuracy: c.accuracy,
            })
            .collect()
    }

    /// Every unseen-class record scored against a bank of unseen classes.
    pub fn zsl(&self, fusion: Fusion) -> Result<EvalOutcome> {
        let unseen: Vec<usize> = self.split.unseen.iter().copied().collect();
        let bank = build_prompt_bank(
            &labels_for(self.manifest, unseen.iter().copied()),
            &self.options.template,
            self.params,
        )?;
        let scores = score_records(
            &self.embedded(&self.unseen_records),
            &bank,
            Temperatures::of(self.params),
            fusion,
            self.options.score_mode,
        )?;
        let predictions: Vec<usize> = scores.iter().map(|s| predict(&s.s)).collect();
        let predicted: Vec<usize> = predictions.iter().map(|&p| bank.classes[p]).collect();
        let acc = per_class_top1(&predicted, &self.labels(&self.unseen_records), &unseen)?;
        let mut report = self.report(Setting::Zsl, fusion, scores.len());
        report.t1 = Some(acc.mean);
        report.per_class = self.class_rows(&acc);
        Ok(EvalOutcome {
            report,
            bank,
            scores,
            predictions,
        })
    }

    /// Held-out seen and all unseen records scored against every class,
    /// with γ chosen on the validation partition and reported on test.
    pub fn gzsl(&self, fusion: Fusion) -> Result<EvalOutcome> {
        let all: Vec<usize> = (0..self.manifest.classes.len()).collect();
        let bank = build_prompt_bank(
            &labels_for(self.manifest, all.iter().copied()),
            &self.options.template,
            self.params,
        )?;
        let seen_mask: Vec<bool> = bank.classes.iter().map(|&c| self.split.is_seen(c)).collect();
        let temps = Temperatures::of(self.params);
        let score =
            |records: &[usize]| score_records(&self.embedded(records), &bank, temps, fusion, self.options.score_mode);
        let val_scores = score(&self.validation)?;
        let val_labels = self.labels(&self.validation);
        let grid = match &self.options.gamma_grid {
            Some(grid) => {
                let mut g = grid.clone();
                g.sort_by(f64::total_cmp);
                g.dedup();
                g
            }
            None => default_gamma_grid(&val_scores, self.options.gamma_points),
        };
        let seen: Vec<usize> = self.split.seen.iter().copied().collect();
        let unseen: Vec<usize> = self.split.unseen.iter().copied().collect();
        let mut sweep = Vec::with_capacity(grid.len());
        for &gamma in &grid {
            let predicted = calibrated_predictions(&val_scores, &seen_mask, gamma, &bank);
            let (u, s, h) = gzsl_metrics(&predicted, &val_labels, &seen, &unseen)?;
            sweep.push(SweepRow { gamma, u, s, h });
        }
        let best = sweep
            .iter()
            .enumerate()
            .fold(0, |best, (i, r)| if r.h > sweep[best].h { i } else { best });
        let gamma = sweep[best].gamma;

        let scores = score(&self.test)?;
        let labels = self.labels(&self.test);
        let predicted = calibrated_predictions(&scores, &seen_mask, gamma, &bank);
        let (u, s, h) = gzsl_metrics(&predicted, &labels, &seen, &unseen)?;
        let acc = per_class_top1(&predicted, &labels, &all)?;
        let predictions = predicted
            .iter()
            .map(|&c| bank.position(c).expect("predicted class is in the bank"))
            .collect();
        let mut report = self.report(Setting::Gzsl, fusion, scores.len());
        report.u = Some(u);
        report.s = Some(s);
        report.h = Some(h);
        report.gamma = Some(gamma);
        report.per_class = self.class_rows(&acc);
        report.sweep = sweep;
        Ok(EvalOutcome {
            report,
            bank,
            scores,
            predictions,
        })
    }
}

/// Evenly spaced γ from 0 to the largest per-record score spread, beyond
/// which calibration cannot change any prediction further.
pub fn default_gamma_grid(scores: &[RecordScores], points: usize) -> Vec<f64> {
    let spread = scores
        .iter()
        .map(|r| {
            let max = r.s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = r.s.iter().copied().fold(f64::INFINITY, f64::min);
            max - min
        })
        .fold(0.0, f64::max);
    if points <= 1 || spread == 0.0 {
        return vec![0.0];
    }
    (0..points).map(|k| spread * k as f64 / (points - 1) as f64).collect()
}

/// Manifest class predicted for each record after calibration.
fn calibrated_predictions(scores: &[RecordScores], seen_mask: &[bool], gamma: f64, bank: &PromptBank) -> Vec<usize> {
    scores
        .iter()
        .map(|r| bank.classes[predict(&calibrate(&r.s, seen_mask, gamma))])
        .collect()
}

fn gzsl_metrics(predicted: &[usize], labels: &[usize], seen: &[usize], unseen: &[usize]) -> Result<(f64, f64, f64)> {
    let u = per_class_top1(predicted, labels, unseen)?.mean;
    let s = per_class_top1(predicted, labels, seen)?.mean;
    Ok((u, s, harmonic_mean(u, s)?))
}

pub fn run_zsl(
    params: &ModelParams,
    provenance: Option<&Provenance>,
    view: &DatasetView<'_>,
    split: &SplitSpec,
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    Evaluator::new(params, provenance, view, split, options)?.zsl(options.fusion)
}

pub fn run_gzsl(
    params: &ModelParams,
    provenance: Option<&Provenance>,
    view: &DatasetView<'_>,
    split: &SplitSpec,
    options: &EvalOptions,
) -> Result<EvalOutcome> {
    Evaluator::new(params, provenance, view, split, options)?.gzsl(options.fusion)
}

/// Axes of the ablation matrix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMatrix {
    pub splits: Vec<String>,
    pub alignments: Vec<Alignment>,
    pub channels: Vec<String>,
    pub fusions: Vec<Fusion>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        Self {
            splits: vec!["A".into()],
            alignments: Alignment::ALL.to_vec(),
            channels: vec![crate::corpus::CLEAN.into(), crate::corpus::NOISY.into()],
            fusions: Fusion::ALL.to_vec(),
        }
    }
}

impl AblationMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() || self.alignments.is_empty() || self.channels.is_empty() || self.fusions.is_empty() {
            return Err(Error::validation("ablation", "every axis needs at least one value"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub split: String,
    pub alignment: Alignment,
    pub channel: String,
    pub fusion: Fusion,
    pub zsl: EvalReport,
    pub gzsl: EvalReport,
}

impl CellReport {
    pub fn key(&self) -> String {
        format!(
            "{}_{}_{}_{}",
            self.split,
            self.alignment.as_str(),
            self.channel,
            self.fusion.as_str()
        )
    }
}

/// Trains (through `train`) one model per (split, alignment, channel) and
/// evaluates it under every fusion mode.
pub fn run_ablation_suite(
    manifest: &CorpusManifest,
    splits: &[SplitSpec],
    matrix: &AblationMatrix,
    options: &EvalOptions,
    mut train: impl FnMut(&SplitSpec, Alignment, &str) -> Result<(ModelParams, Provenance)>,
) -> Result<Vec<CellReport>> {
    matrix.validate()?;
    let mut cells = Vec::new();
    for name in &matrix.splits {
        let split = splits
            .iter()
            .find(|s| &s.name == name)
            .ok_or_else(|| Error::validation("ablation.splits", format!("unknown split `{name}`")))?;
        for &alignment in &matrix.alignments {
            for channel in &matrix.channels {
                let view = crate::corpus::select_channel(manifest, channel)?;
                let (params, provenance) = train(split, alignment, channel)?;
                let evaluator = Evaluator::new(&params, Some(&provenance), &view, split, options)?;
                for &fusion in &matrix.fusions {
                    cells.push(CellReport {
                        split: split.name.clone(),
                        alignment,
                        channel: channel.clone(),
                        fusion,
                        zsl: evaluator.zsl(fusion)?.report,
                        gzsl: evaluator.gzsl(fusion)?.report,
                    });
                }
            }
        }
    }
    Ok(cells)
}

fn fmt6(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// `split,alignment,channel,fusion,zsl_t1,gzsl_u,gzsl_s,gzsl_h,gamma`.
pub fn write_metrics_csv(cells: &[CellReport], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record([
        "split",
        "alignment",
        "channel",
        "fusion",
        "zsl_t1",
        "gzsl_u",
        "gzsl_s",
        "gzsl_h",
        "gamma",
    ])?;
    for c in cells {
        writer.write_record([
            c.split.clone(),
            c.alignment.as_str().into(),
            c.channel.clone(),
            c.fusion.as_str().into(),
            fmt6(c.zsl.t1),
            fmt6(c.gzsl.u),
            fmt6(c.gzsl.s),
            fmt6(c.gzsl.h),
            fmt6(c.gzsl.gamma),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `split_index,zsl_t1,gzsl_h` for cells of incremental splits (`S_I_i`).
pub fn write_incremental_curve(cells: &[CellReport], path: &Path) -> Result<()> {
    let mut rows: Vec<(usize, f64, f64)> = cells
        .iter()
        .filter_map(|c| {
            let i = c.split.strip_prefix("S_I_")?.parse().ok()?;
            Some((i, c.zsl.t1?, c.gzsl.h?))
        })
        .collect();
    rows.sort_by_key(|r| r.0);
    rows.dedup_by_key(|r| r.0);
    let mut writer = csv::Writer::from_path(path)?;
    writer.write_record(["split_index", "zsl_t1", "gzsl_h"])?;
    for (i, t1, h) in rows {
        writer.write_record([i.to_string(), format!("{t1:.6}"), format!("{h:.6}")])?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Markdown comparison tables: everything, then one table per ablation axis
/// holding the other axes at their first value.
pub fn ablation_tables(cells: &[CellReport], matrix: &AblationMatrix) -> String {
    let mut md = String::new();
    let row = |c: &CellReport| {
        format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |",
            c.split,
            c.alignment.as_str(),
            c.channel,
            c.fusion.as_str(),
            pct(c.zsl.t1),
            pct(c.gzsl.u),
            pct(c.gzsl.s),
            pct(c.gzsl.h)
        )
    };
    let header = "| split | alignment | channel | fusion | ZSL T1 | u | s | H |\n|---|---|---|---|---:|---:|---:|---:|";
    let table = |md: &mut String, title: &str, keep: &dyn Fn(&CellReport) -> bool| {
        let rows: Vec<String> = cells.iter().filter(|c| keep(c)).map(row).collect();
        if rows.is_empty() {
            return;
        }
        let _ = writeln!(md, "## {title}\n\n{header}");
        for r in rows {
            let _ = writeln!(md, "{r}");
        }
        let _ = writeln!(md);
    };
    let (a0, c0, f0) = (
        matrix.alignments.first().copied(),
        matrix.channels.first().cloned(),
        matrix.fusions.first().copied(),
    );
    table(&mut md, "All cells", &|_| true);
    table(&mut md, "By split", &|c| {
        Some(c.alignment) == a0 && Some(&c.channel) == c0.as_ref() && Some(c.fusion) == f0
    });
    if matrix.alignments.len() > 1 {
        table(&mut md, "Alignment", &|c| {
            Some(&c.channel) == c0.as_ref() && Some(c.fusion) == f0
        });
    }
    if matrix.channels.len() > 1 {
        table(&mut md, "Content channel", &|c| {
            Some(c.alignment) == a0 && Some(c.fusion) == f0
        });
    }
    if matrix.fusions.len() > 1 {
        table(&mut md, "Fusion", &|c| {
            Some(c.alignment) == a0 && Some(&c.channel) == c0.as_ref()
        });
    }
    md
}
