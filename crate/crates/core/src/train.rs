//! Mini-batch Adam training of all three encoders under the coupled loss.

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamGrads, ParamStore, Tape};
use crate::corpus::DatasetView;
use crate::error::{Error, Result};
use crate::infer::{content_tokens, prompt_tokens, record_patches, PromptTemplate};
use crate::loss::{coupled_loss, BatchTriplet, LossConfig, TemperaturePair};
use crate::model::{EncoderInput, Modality, ModelParams};
use crate::splits::SplitSpec;
use crate::tokenize::{PatchSequence, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Epochs run at the full rate; later epochs use `learning_rate · lr_decay`.
    pub decay_after: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Only update the content tower and the temperatures.
    pub freeze_image_text: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            lr_decay: 0.1,
            decay_after: 5,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            freeze_image_text: false,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::validation(
                "train.learning_rate",
                "must be a non-negative number",
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay.is_finite()) {
            return Err(Error::validation("train.lr_decay", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("train.epochs", "must be at least 1"));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("train.batch_size", "must be at least 2"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::validation(
                "train",
                "Adam moments must lie in [0, 1) and eps be positive",
            ));
        }
        Ok(())
    }
}

/// Learning rate for 1-based epoch `e`.
pub fn lr_at_epoch(e: usize, cfg: &TrainConfig) -> f64 {
    if e <= cfg.decay_after {
        cfg.learning_rate
    } else {
        cfg.learning_rate * cfg.lr_decay
    }
}

/// Adam state over a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, _, t)| Matrix::zeros(t.rows(), t.cols()))
            .collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id);
            for (((p, m), v), g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean over batches of the summed batch loss, per epoch.
    pub epoch_loss: Vec<f64>,
    /// Same, divided by batch size.
    pub epoch_loss_per_sample: Vec<f64>,
    pub steps: Vec<StepLoss>,
    pub tau_ic: f64,
    pub tau_tc: f64,
    pub seed: u64,
    pub records: usize,
    pub wall_clock_secs: f64,
    pub checkpoint: Option<PathBuf>,
    pub config: TrainConfig,
}

impl TrainReport {
    pub fn write_loss_curve(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(["epoch", "step", "loss"])?;
        for s in &self.steps {
            writer.write_record([s.epoch.to_string(), s.step.to_string(), s.loss.to_string()])?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

struct Example {
    patches: PatchSequence,
    content: TokenSequence,
    label: usize,
}

/// Errors if the view holds a record outside the split's seen classes.
pub fn check_seen_only(view: &DatasetView<'_>, split: &SplitSpec) -> Result<()> {
    let manifest = view.manifest();
    match view.records().find(|r| !split.is_seen(r.label)) {
        Some(r) => Err(Error::SplitLeakage {
            record: r.id.clone(),
            class: manifest.classes[r.label].name.clone(),
        }),
        None => Ok(()),
    }
}

/// Trains `params` in place on the view, which must only contain records of
/// the split's seen classes.
pub fn fit(
    view: &DatasetView<'_>,
    split: &SplitSpec,
    params: &mut ModelParams,
    cfg: &TrainConfig,
    template: &PromptTemplate,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_seen_only(view, split)?;
    if view.len() < 2 {
        return Err(Error::validation("train", "need at least two training records"));
    }
    let started = Instant::now();
    let manifest = view.manifest();
    let examples: Vec<Example> = view
        .indices()
        .iter()
        .map(|&i| {
            let record = &manifest.records[i];
            Ok(Example {
                patches: record_patches(manifest, i)?,
                content: content_tokens(view.content(record), params),
                label: record.label,
            })
        })
        .collect::<Result<_>>()?;
    let prompts: BTreeMap<usize, TokenSequence> = split
        .seen
        .iter()
        .map(|&c| (c, prompt_tokens(template, &manifest.classes[c].name, params)))
        .collect();

    let mut adam = Adam::new(params.store(), cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        epoch_loss_per_sample: Vec::new(),
        steps: Vec::new(),
        tau_ic: params.tau_ic(),
        tau_tc: params.tau_tc(),
        seed: cfg.seed,
        records: examples.len(),
        wall_clock_secs: 0.0,
        checkpoint: None,
        config: cfg.clone(),
    };
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let lr = lr_at_epoch(epoch, cfg);
        let (mut total, mut per_sample, mut batches) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let batch: Vec<&Example> = batch.iter().map(|&i| &examples[i]).collect();
            let (loss, grads) = batch_gradients(params, &batch, &prompts, cfg)?;
            adam.step(params.store_mut(), &grads, lr);
            params.clamp_temperatures();
            if !params.is_finite() {
                return Err(Error::NonFinite(format!("parameters after step {}", step + 1)));
            }
            step += 1;
            total += loss;
            per_sample += loss / batch.len() as f64;
            batches += 1;
            report.steps.push(StepLoss { epoch, step, loss });
        }
        let mean = total / batches.max(1) as f64;
        report.epoch_loss.push(mean);
        report.epoch_loss_per_sample.push(per_sample / batches.max(1) as f64);
        info!(
            "epoch {epoch}/{}: loss {mean:.4} (per sample {:.4}), tau_ic {:.4}, tau_tc {:.4}",
            cfg.epochs,
            per_sample / batches.max(1) as f64,
            params.tau_ic(),
            params.tau_tc()
        );
    }
    report.tau_ic = params.tau_ic();
    report.tau_tc = params.tau_tc();
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Forward and backward pass over one batch: returns the loss and the
/// gradient of every parameter that influenced it.
fn batch_gradients(
    params: &ModelParams,
    batch: &[&Example],
    prompts: &BTreeMap<usize, TokenSequence>,
    cfg: &TrainConfig,
) -> Result<(f64, ParamGrads)> {
    let store = params.store();
    let mut sample_tapes = Vec::with_capacity(batch.len());
    let (mut image, mut content) = (Vec::new(), Vec::new());
    for ex in batch {
        let mut tape = Tape::new(store);
        let i = params.embed_on_tape(&mut tape, Modality::Image, EncoderInput::Patches(&ex.patches))?;
        let c = params.embed_on_tape(&mut tape, Modality::Content, EncoderInput::Tokens(&ex.content))?;
        image.push(tape.value(i).data().to_vec());
        content.push(tape.value(c).data().to_vec());
        sample_tapes.push((tape, i, c));
    }
    // Prompts repeat within a batch; each class's prompt is encoded once and
    // receives the summed gradient of its occurrences.
    let mut class_tapes = BTreeMap::new();
    for ex in batch {
        if let Entry::Vacant(slot) = class_tapes.entry(ex.label) {
            let mut tape = Tape::new(store);
            let t = params.embed_on_tape(&mut tape, Modality::Text, EncoderInput::Tokens(&prompts[&ex.label]))?;
            slot.insert((tape, t));
        }
    }
    let text = batch
        .iter()
        .map(|ex| {
            let (tape, t) = &class_tapes[&ex.label];
            tape.value(*t).data().to_vec()
        })
        .collect();
    let (log_ic, log_tc) = params.log_tau_ids();
    let temps = TemperaturePair {
        log_tau_ic: store.get(log_ic).data()[0],
        log_tau_tc: store.get(log_tc).data()[0],
    };
    let out = coupled_loss(&BatchTriplet { image, text, content }, temps, &cfg.loss)?;

    let mut grads = ParamGrads::for_store(store);
    for (k, (tape, i, c)) in sample_tapes.iter().enumerate() {
        let gi = Matrix::row_vector(out.grad_image[k].clone());
        let gc = Matrix::row_vector(out.grad_content[k].clone());
        tape.backward(&[(*i, &gi), (*c, &gc)], &mut grads);
    }
    for (label, (tape, t)) in &class_tapes {
        let mut g = vec![0.0; out.grad_text[0].len()];
        for (k, ex) in batch.iter().enumerate() {
            if ex.label == *label {
                for (a, b) in g.iter_mut().zip(&out.grad_text[k]) {
                    *a += b;
                }
            }
        }
        tape.backward(&[(*t, &Matrix::row_vector(g))], &mut grads);
    }
    grads.accumulate_scalar(log_ic, out.grad_log_tau_ic);
    grads.accumulate_scalar(log_tc, out.grad_log_tau_tc);
    if cfg.freeze_image_text {
        grads.retain(|id| !params.is_image_or_text(id));
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradients".into()));
    }
    debug!("batch of {}: loss {:.5}", batch.len(), out.total);
    Ok((out.total, grads))
}
