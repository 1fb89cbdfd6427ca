//! Run configuration and the gen → splits → train → eval → ablate
//! commands, with artifacts cached under a directory named by config hash.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{generate_synthetic_corpus, load_manifest, select_channel, CorpusManifest, SyntheticSpec, CLEAN};
use crate::error::{Error, Result};
use crate::eval::{
    ablation_tables, run_ablation_suite, seen_partition, write_incremental_curve, write_metrics_csv, AblationMatrix,
    CellReport, EvalOptions, EvalOutcome, Evaluator,
};
use crate::image::ImageGeometry;
use crate::infer::{write_predictions_csv, Fusion, PromptTemplate, ScoreMode};
use crate::loss::{Alignment, LossConfig};
use crate::model::{load_checkpoint, save_checkpoint, EncoderConfig, ModelParams, Provenance};
use crate::splits::{
    check_split, load_rank_ordering, load_split, make_incremental_split, make_sequential_splits, save_split,
    IncrementalBounds, SplitSpec,
};
use crate::tokenize::{CONTENT_CONTEXT, TEXT_CONTEXT};
use crate::train::{fit, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Use an existing manifest instead of generating the synthetic corpus.
    pub manifest: Option<PathBuf>,
    pub classes: usize,
    pub docs_per_class: usize,
    pub vocab_size: usize,
    pub keywords_per_class: usize,
    pub noise_rate: f64,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    #[serde(rename = "Ch")]
    pub channels: usize,
    #[serde(rename = "P")]
    pub patch: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let spec = SyntheticSpec::default();
        Self {
            manifest: None,
            classes: spec.classes,
            docs_per_class: spec.docs_per_class,
            vocab_size: spec.vocab_size,
            keywords_per_class: spec.keywords_per_class,
            noise_rate: spec.noise_rate,
            height: spec.geometry.height,
            width: spec.geometry.width,
            channels: spec.geometry.channels,
            patch: spec.geometry.patch,
        }
    }
}

impl CorpusSection {
    pub fn synthetic_spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            docs_per_class: self.docs_per_class,
            vocab_size: self.vocab_size,
            keywords_per_class: self.keywords_per_class,
            noise_rate: self.noise_rate,
            seed,
            geometry: ImageGeometry {
                height: self.height,
                width: self.width,
                channels: self.channels,
                patch: self.patch,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub joint_dim: usize,
    /// Hash buckets; defaults to the corpus's recorded bucket count.
    pub vocab_size: Option<usize>,
    pub text_context: usize,
    pub content_context: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 1,
            heads: 4,
            ff_dim: 128,
            joint_dim: 64,
            vocab_size: None,
            text_context: TEXT_CONTEXT,
            content_context: CONTENT_CONTEXT,
        }
    }
}

const FALLBACK_VOCAB: usize = 1024;

impl ModelSection {
    pub fn encoder_config(&self, manifest: &CorpusManifest) -> EncoderConfig {
        EncoderConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
            joint_dim: self.joint_dim,
            vocab_size: self.vocab_size.or(manifest.vocab_buckets).unwrap_or(FALLBACK_VOCAB),
            text_context: self.text_context,
            content_context: self.content_context,
            geometry: manifest.geometry,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub decay_after: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_image_text: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_after: t.decay_after,
            epochs: t.epochs,
            batch_size: t.batch_size,
            freeze_image_text: t.freeze_image_text,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitsSection {
    pub group_size: usize,
    /// Class names in the order sequential splits group them; defaults to
    /// manifest order.
    pub order: Option<Vec<String>>,
    /// Inclusive range `"lo..hi"` of incremental split indices.
    pub incremental: Option<String>,
    pub rank_csv: Option<PathBuf>,
}

impl Default for SplitsSection {
    fn default() -> Self {
        Self {
            group_size: 4,
            order: None,
            incremental: None,
            rank_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub fusion: Fusion,
    pub score_mode: ScoreMode,
    pub template: PromptTemplate,
    pub holdout: f64,
    pub validation: f64,
    pub gamma_grid: Option<Vec<f64>>,
    pub gamma_points: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        Self {
            fusion: e.fusion,
            score_mode: e.score_mode,
            template: e.template,
            holdout: e.holdout,
            validation: e.validation,
            gamma_grid: e.gamma_grid,
            gamma_points: e.gamma_points,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Split used by `train` and `eval`.
    pub split: String,
    /// Content channel used by `train` and `eval`.
    pub channel: String,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub loss: LossConfig,
    pub splits: SplitsSection,
    pub eval: EvalSection,
    pub ablation: AblationMatrix,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            out_dir: PathBuf::from("runs"),
            split: "A".into(),
            channel: CLEAN.into(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            loss: LossConfig::default(),
            splits: SplitsSection::default(),
            eval: EvalSection::default(),
            ablation: AblationMatrix::default(),
        }
    }
}

/// The fields that determine artifacts; `out_dir`, `split` and `channel`
/// only select among them.
#[derive(Serialize)]
struct HashedConfig<'a> {
    seed: u64,
    corpus: &'a CorpusSection,
    model: &'a ModelSection,
    train: &'a TrainSection,
    loss: &'a LossConfig,
    splits: &'a SplitsSection,
    eval: &'a EvalSection,
    ablation: &'a AblationMatrix,
}

/// Parses `"lo..hi"` (inclusive) into bounds.
pub fn parse_range(s: &str) -> Result<IncrementalBounds> {
    let bad = || Error::validation("incremental", format!("`{s}` is not a range like 2..8"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let hi = hi.strip_prefix('=').unwrap_or(hi);
    let min: usize = lo.trim().parse().map_err(|_| bad())?;
    let max: usize = hi.trim().parse().map_err(|_| bad())?;
    if min < 1 || min > max {
        return Err(bad());
    }
    Ok(IncrementalBounds { min, max })
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.corpus.manifest.is_none() {
            self.corpus.synthetic_spec(self.seed).validate()?;
        }
        self.train_config(Alignment::Both).validate()?;
        self.eval_options().validate()?;
        self.ablation.validate()?;
        if self.split.is_empty() {
            return Err(Error::validation("split", "must name a split"));
        }
        if self.channel.is_empty() {
            return Err(Error::validation("channel", "must name a content channel"));
        }
        if self.splits.group_size == 0 {
            return Err(Error::validation("splits.group_size", "must be positive"));
        }
        if let Some(r) = &self.splits.incremental {
            parse_range(r)?;
            if self.splits.rank_csv.is_none() {
                return Err(Error::validation(
                    "splits.rank_csv",
                    "incremental splits need a rank-ordering CSV",
                ));
            }
        }
        let m = &self.model;
        if m.embed_dim == 0 || m.heads == 0 || !m.embed_dim.is_multiple_of(m.heads) {
            return Err(Error::validation(
                "model.heads",
                "embed_dim must be a positive multiple of heads",
            ));
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the artifact-determining fields.
    pub fn hash(&self) -> String {
        let hashed = HashedConfig {
            seed: self.seed,
            corpus: &self.corpus,
            model: &self.model,
            train: &self.train,
            loss: &self.loss,
            splits: &self.splits,
            eval: &self.eval,
            ablation: &self.ablation,
        };
        let json = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.hash())
    }

    pub fn train_config(&self, alignment: Alignment) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            lr_decay: t.lr_decay,
            decay_after: t.decay_after,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            freeze_image_text: t.freeze_image_text,
            loss: LossConfig { alignment, ..self.loss },
            ..TrainConfig::default()
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        let e = &self.eval;
        EvalOptions {
            fusion: e.fusion,
            score_mode: e.score_mode,
            template: e.template.clone(),
            holdout: e.holdout,
            validation: e.validation,
            gamma_grid: e.gamma_grid.clone(),
            gamma_points: e.gamma_points,
            seed: self.seed,
        }
    }
}

/// Exclusive hold on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// A locked run directory plus the config that names it.
pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
    _lock: RunLock,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Summary of a trained cell.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub provenance: Provenance,
    pub checkpoint: PathBuf,
    pub report: Option<TrainReport>,
}

impl Run {
    pub fn open(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let dir = config.run_dir();
        let lock = RunLock::acquire(&dir)?;
        write_text(&dir.join("config.toml"), &config.to_toml()?)?;
        Ok(Self {
            config,
            dir,
            _lock: lock,
        })
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir.join("corpus")
    }

    pub fn manifest_path(&self) -> PathBuf {
        match &self.config.corpus.manifest {
            Some(p) => p.clone(),
            None => self.corpus_dir().join("manifest.jsonl"),
        }
    }

    /// Loads the corpus, generating it first when absent.
    pub fn corpus(&self) -> Result<CorpusManifest> {
        let path = self.manifest_path();
        if path.is_file() {
            return load_manifest(&path);
        }
        if self.config.corpus.manifest.is_some() {
            return Err(Error::MissingArtifact {
                path,
                hint: "the configured manifest does not exist".into(),
            });
        }
        let spec = self.config.corpus.synthetic_spec(self.config.seed);
        info!("generating synthetic corpus in {}", self.corpus_dir().display());
        generate_synthetic_corpus(&spec, &self.corpus_dir())
    }

    fn class_order(&self, manifest: &CorpusManifest) -> Result<Vec<usize>> {
        match &self.config.splits.order {
            None => Ok((0..manifest.classes.len()).collect()),
            Some(names) => names
                .iter()
                .map(|n| manifest.class_index(n).ok_or_else(|| Error::UnknownClass(n.clone())))
                .collect(),
        }
    }

    /// Sequential splits plus any configured incremental splits.
    pub fn make_splits(&self, manifest: &CorpusManifest) -> Result<Vec<SplitSpec>> {
        let mut splits = make_sequential_splits(&self.class_order(manifest)?, self.config.splits.group_size)?;
        if let Some(range) = &self.config.splits.incremental {
            let bounds = parse_range(range)?;
            let rank_path =
                self.config.splits.rank_csv.as_ref().ok_or_else(|| {
                    Error::validation("splits.rank_csv", "incremental splits need a rank-ordering CSV")
                })?;
            if !rank_path.is_file() {
                return Err(Error::validation(
                    "splits.rank_csv",
                    format!("{} does not exist", rank_path.display()),
                ));
            }
            let rank = load_rank_ordering(rank_path, &manifest.class_names())?;
            for i in bounds.min..=bounds.max {
                splits.push(make_incremental_split(&rank, i, bounds)?);
            }
        }
        for s in &splits {
            check_split(s, manifest)?;
        }
        Ok(splits)
    }

    pub fn split_path(&self, name: &str) -> PathBuf {
        self.dir.join("splits").join(format!("{name}.json"))
    }

    /// Writes every split file and returns the paths.
    pub fn write_splits(&self, manifest: &CorpusManifest) -> Result<Vec<(SplitSpec, PathBuf)>> {
        let splits = self.make_splits(manifest)?;
        let dir = self.dir.join("splits");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let names = manifest.class_names();
        splits
            .into_iter()
            .map(|s| {
                let path = self.split_path(&s.name);
                save_split(&s, &names, &path)?;
                Ok((s, path))
            })
            .collect()
    }

    /// The named split, read from disk when present.
    pub fn split(&self, manifest: &CorpusManifest, name: &str) -> Result<SplitSpec> {
        let path = self.split_path(name);
        let split = if path.is_file() {
            load_split(&path, &manifest.class_names())?
        } else {
            self.make_splits(manifest)?
                .into_iter()
                .find(|s| s.name == name)
                .ok_or_else(|| Error::validation("split", format!("no split named `{name}`")))?
        };
        check_split(&split, manifest)?;
        Ok(split)
    }

    pub fn model_dir(&self, split: &str, alignment: Alignment, channel: &str) -> PathBuf {
        self.dir
            .join("models")
            .join(format!("{split}_{}_{channel}", alignment.as_str()))
    }

    /// Loads the cell's checkpoint or trains it on the split's seen classes
    /// minus the GZSL holdout.
    pub fn model(
        &self,
        manifest: &CorpusManifest,
        split: &SplitSpec,
        alignment: Alignment,
        channel: &str,
    ) -> Result<TrainedModel> {
        let dir = self.model_dir(&split.name, alignment, channel);
        let checkpoint = dir.join("checkpoint.json");
        let report_path = dir.join("train_report.json");
        if checkpoint.is_file() {
            info!("reusing {}", checkpoint.display());
            let (params, provenance) = load_checkpoint(&checkpoint)?;
            let provenance =
                provenance.ok_or_else(|| Error::Provenance("cached checkpoint lacks provenance".into()))?;
            let report = report_path.is_file().then(|| read_json(&report_path)).transpose()?;
            return Ok(TrainedModel {
                params,
                provenance,
                checkpoint,
                report,
            });
        }
        let view = select_channel(manifest, channel)?;
        let options = self.config.eval_options();
        let (train_idx, _) = seen_partition(manifest, split, options.holdout, options.seed);
        let train_view = view.with_indices(train_idx);
        let mut params = ModelParams::init(self.config.model.encoder_config(manifest), self.config.seed)?;
        let cfg = self.config.train_config(alignment);
        info!(
            "training split {} ({} records, alignment {}, channel {channel})",
            split.name,
            train_view.len(),
            alignment.as_str()
        );
        let mut report = fit(&train_view, split, &mut params, &cfg, &options.template)?;
        let provenance = Provenance {
            split: split.name.clone(),
            seen: split.seen.iter().map(|&c| manifest.classes[c].name.clone()).collect(),
        };
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        report.write_loss_curve(&dir.join("loss_curve.csv"))?;
        report.checkpoint = Some(checkpoint.clone());
        write_json(&report_path, &report)?;
        // The checkpoint goes last: its presence marks the cell complete.
        save_checkpoint(&params, Some(&provenance), &checkpoint)?;
        Ok(TrainedModel {
            params,
            provenance,
            checkpoint,
            report: Some(report),
        })
    }
}

#[derive(Debug, Clone)]
pub struct GenSummary {
    pub manifest: PathBuf,
    pub records: usize,
    pub classes: usize,
    pub channels: Vec<String>,
}

pub fn cmd_gen(config: RunConfig) -> Result<GenSummary> {
    let run = Run::open(config)?;
    let manifest = run.corpus()?;
    Ok(GenSummary {
        manifest: run.manifest_path(),
        records: manifest.records.len(),
        classes: manifest.classes.len(),
        channels: manifest.channels.clone(),
    })
}

pub fn cmd_splits(config: RunConfig) -> Result<Vec<PathBuf>> {
    let run = Run::open(config)?;
    let manifest = run.corpus()?;
    Ok(run.write_splits(&manifest)?.into_iter().map(|(_, p)| p).collect())
}

pub fn cmd_train(config: RunConfig) -> Result<TrainedModel> {
    let run = Run::open(config)?;
    let manifest = run.corpus()?;
    let split = run.split(&manifest, &run.config.split)?;
    run.model(&manifest, &split, run.config.loss.alignment, &run.config.channel)
}

#[derive(Debug, Clone)]
pub struct EvalArtifacts {
    pub dir: PathBuf,
    pub zsl: crate::eval::EvalReport,
    pub gzsl: crate::eval::EvalReport,
}

fn write_outcome(dir: &Path, stem: &str, outcome: &EvalOutcome, manifest: &CorpusManifest) -> Result<()> {
    outcome.report.write_json(&dir.join(format!("{stem}.json")))?;
    write_text(&dir.join(format!("{stem}.md")), &outcome.report.to_markdown())?;
    write_predictions_csv(
        &dir.join(format!("{stem}_predictions.csv")),
        manifest,
        &outcome.bank,
        &outcome.scores,
        &outcome.predictions,
    )
}

/// Runs ZSL and GZSL for the configured split and channel. A `checkpoint`
/// overrides the run's own model; with `strict`, a checkpoint trained on
/// different seen classes is an error instead of a warning.
pub fn cmd_eval(config: RunConfig, checkpoint: Option<&Path>, strict: bool) -> Result<EvalArtifacts> {
    let run = Run::open(config)?;
    let manifest = run.corpus()?;
    let split = run.split(&manifest, &run.config.split)?;
    let channel = run.config.channel.clone();
    let alignment = run.config.loss.alignment;
    let (params, provenance) = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => {
            let m = run.model(&manifest, &split, alignment, &channel)?;
            (m.params, Some(m.provenance))
        }
    };
    let view = select_channel(&manifest, &channel)?;
    let options = run.config.eval_options();
    let evaluator = Evaluator::new(&params, provenance.as_ref(), &view, &split, &options)?;
    if let (true, Some(w)) = (strict, evaluator.warning()) {
        return Err(Error::Provenance(w.to_string()));
    }
    let fusion = options.fusion;
    let dir = run.dir.join("eval").join(format!(
        "{}_{}_{channel}_{}",
        split.name,
        alignment.as_str(),
        fusion.as_str()
    ));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let zsl = evaluator.zsl(fusion)?;
    let gzsl = evaluator.gzsl(fusion)?;
    write_outcome(&dir, "zsl", &zsl, &manifest)?;
    write_outcome(&dir, "gzsl", &gzsl, &manifest)?;
    gzsl.report.write_sweep_csv(&dir.join("sweep.csv"))?;
    Ok(EvalArtifacts {
        dir,
        zsl: zsl.report,
        gzsl: gzsl.report,
    })
}

#[derive(Debug, Clone)]
pub struct AblationArtifacts {
    pub dir: PathBuf,
    pub cells: Vec<CellReport>,
    pub metrics: PathBuf,
    pub tables: PathBuf,
    pub curve: PathBuf,
}

/// Trains every (split, alignment, channel) cell that has no checkpoint
/// yet, evaluates each under every fusion mode and writes the comparison
/// tables, `metrics.csv` and `incremental_curve.csv`.
pub fn cmd_ablate(config: RunConfig) -> Result<AblationArtifacts> {
    let run = Run::open(config)?;
    let manifest = run.corpus()?;
    let splits = run.make_splits(&manifest)?;
    let matrix = run.config.ablation.clone();
    let options = run.config.eval_options();
    let cells = run_ablation_suite(&manifest, &splits, &matrix, &options, |split, alignment, channel| {
        let m = run.model(&manifest, split, alignment, channel)?;
        Ok((m.params, m.provenance))
    })?;
    let dir = run.dir.join("ablation");
    let cell_dir = dir.join("cells");
    fs::create_dir_all(&cell_dir).map_err(|e| Error::io(&cell_dir, e))?;
    for c in &cells {
        write_json(&cell_dir.join(format!("{}.json", c.key())), c)?;
    }
    let metrics = dir.join("metrics.csv");
    write_metrics_csv(&cells, &metrics)?;
    let tables = dir.join("tables.md");
    write_text(&tables, &ablation_tables(&cells, &matrix))?;
    let curve = dir.join("incremental_curve.csv");
    write_incremental_curve(&cells, &curve)?;
    Ok(AblationArtifacts {
        dir,
        cells,
        metrics,
        tables,
        curve,
    })
}
