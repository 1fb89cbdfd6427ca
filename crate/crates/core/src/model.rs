//! Image, prompt-text and content encoders with their projections into the
//! joint embedding space.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{dot, Matrix, ParamGrads, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::image::ImageGeometry;
use crate::tokenize::{PatchSequence, TokenSequence, Vocabulary, CONTENT_CONTEXT, TEXT_CONTEXT};

pub const CHECKPOINT_FORMAT: &str = "docalign-checkpoint/1";

/// Temperatures live in log space and are clamped to `[1e-3, 10]`.
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;
pub const TAU_INIT: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Text,
    Content,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Text, Modality::Content];

    pub fn prefix(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
            Modality::Content => "content",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of every encoder, d_enc.
    pub embed_dim: usize,
    /// Transformer blocks per encoder; 0 selects mean pooling.
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Dimension d of the joint space.
    pub joint_dim: usize,
    /// Hash buckets V shared by the text and content tokenizers.
    pub vocab_size: usize,
    pub text_context: usize,
    pub content_context: usize,
    #[serde(flatten)]
    pub geometry: ImageGeometry,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            layers: 0,
            heads: 4,
            ff_dim: 128,
            joint_dim: 64,
            vocab_size: 1024,
            text_context: TEXT_CONTEXT,
            content_context: CONTENT_CONTEXT,
            geometry: ImageGeometry {
                height: 32,
                width: 32,
                channels: 1,
                patch: 8,
            },
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.embed_dim == 0 || self.joint_dim == 0 || self.ff_dim == 0 {
            return Err(Error::validation("model", "dimensions must be positive"));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::validation(
                "model.heads",
                format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads),
            ));
        }
        Vocabulary::new(self.vocab_size)?;
        if self.text_context < 1 || self.content_context < 1 {
            return Err(Error::validation("model", "context lengths must be positive"));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::new(self.vocab_size).expect("validated vocabulary size")
    }

    fn positions(&self, modality: Modality) -> usize {
        match modality {
            Modality::Image => self.geometry.patch_count() + 1,
            Modality::Text => self.text_context,
            Modality::Content => self.content_context,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
enum InputIds {
    Patch { weight: ParamId, bias: ParamId },
    Token { table: ParamId },
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderIds {
    input: InputIds,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    final_ln: (ParamId, ParamId),
    proj: ParamId,
}

/// All trainable tensors: three encoders, three projections and the two
/// log-temperatures.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: EncoderConfig,
    store: ParamStore,
    encoders: [EncoderIds; 3],
    log_tau_ic: ParamId,
    log_tau_tc: ParamId,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| dist.sample(&mut self.rng)).collect();
        Matrix::from_vec(rows, cols, data).expect("shape")
    }

    fn constant(rows: usize, cols: usize, value: f64) -> Matrix {
        Matrix::from_vec(rows, cols, vec![value; rows * cols]).expect("shape")
    }
}

const EMBED_STD: f64 = 0.02;
const POS_STD: f64 = 0.01;

fn build_encoder(store: &mut ParamStore, init: &mut Init, config: &EncoderConfig, modality: Modality) -> EncoderIds {
    let d = config.embed_dim;
    let p = modality.prefix();
    let name = |s: &str| format!("{p}.{s}");
    let input = match modality {
        Modality::Image => InputIds::Patch {
            weight: store.add(name("patch_w"), init.normal(config.geometry.patch_dim(), d, EMBED_STD)),
            bias: store.add(name("patch_b"), Init::constant(1, d, 0.0)),
        },
        Modality::Text | Modality::Content => InputIds::Token {
            table: store.add(name("token"), init.normal(config.vocab_size, d, EMBED_STD)),
        },
    };
    let cls = store.add(name("cls"), init.normal(1, d, EMBED_STD));
    let pos = store.add(name("pos"), init.normal(config.positions(modality), d, POS_STD));
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let mut add = |s: &str, m: Matrix| store.add(format!("{p}.block{l}.{s}"), m);
        let ones = || Init::constant(1, d, 1.0);
        let zeros = |n: usize| Init::constant(1, n, 0.0);
        blocks.push(BlockIds {
            ln1_g: add("ln1_g", ones()),
            ln1_b: add("ln1_b", zeros(d)),
            wq: add("wq", init.normal(d, d, EMBED_STD)),
            bq: add("bq", zeros(d)),
            wk: add("wk", init.normal(d, d, EMBED_STD)),
            bk: add("bk", zeros(d)),
            wv: add("wv", init.normal(d, d, EMBED_STD)),
            bv: add("bv", zeros(d)),
            wo: add("wo", init.normal(d, d, EMBED_STD)),
            bo: add("bo", zeros(d)),
            ln2_g: add("ln2_g", ones()),
            ln2_b: add("ln2_b", zeros(d)),
            w1: add("w1", init.normal(d, config.ff_dim, EMBED_STD)),
            b1: add("b1", zeros(config.ff_dim)),
            w2: add("w2", init.normal(config.ff_dim, d, EMBED_STD)),
            b2: add("b2", zeros(d)),
        });
    }
    // The pooling encoder (layers = 0) leaves the final norm unused; it is
    // still allocated so checkpoints share one tensor layout.
    let final_ln = (
        store.add(name("ln_f_g"), Init::constant(1, d, 1.0)),
        store.add(name("ln_f_b"), Init::constant(1, d, 0.0)),
    );
    let proj = store.add(name("proj"), init.normal(d, config.joint_dim, (d as f64).powf(-0.5)));
    EncoderIds {
        input,
        cls,
        pos,
        blocks,
        final_ln,
        proj,
    }
}

/// Encoder input for one modality.
#[derive(Debug, Clone, Copy)]
pub enum EncoderInput<'a> {
    Patches(&'a PatchSequence),
    Tokens(&'a TokenSequence),
}

impl ModelParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let mut store = ParamStore::new();
        let encoders = Modality::ALL.map(|m| build_encoder(&mut store, &mut init, &config, m));
        let log_tau_ic = store.add("log_tau_ic", Init::constant(1, 1, TAU_INIT.ln()));
        let log_tau_tc = store.add("log_tau_tc", Init::constant(1, 1, TAU_INIT.ln()));
        Ok(Self {
            config,
            store,
            encoders,
            log_tau_ic,
            log_tau_tc,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn log_tau_ids(&self) -> (ParamId, ParamId) {
        (self.log_tau_ic, self.log_tau_tc)
    }

    pub fn tau_ic(&self) -> f64 {
        self.store.get(self.log_tau_ic).data()[0].exp()
    }

    pub fn tau_tc(&self) -> f64 {
        self.store.get(self.log_tau_tc).data()[0].exp()
    }

    pub fn set_log_taus(&mut self, ic: f64, tc: f64) {
        self.store.get_mut(self.log_tau_ic).data_mut()[0] = ic;
        self.store.get_mut(self.log_tau_tc).data_mut()[0] = tc;
    }

    /// Pulls both log-temperatures back into `[ln 1e-3, ln 10]`.
    pub fn clamp_temperatures(&mut self) {
        let (lo, hi) = (TAU_MIN.ln(), TAU_MAX.ln());
        for id in [self.log_tau_ic, self.log_tau_tc] {
            let v = &mut self.store.get_mut(id).data_mut()[0];
            *v = v.clamp(lo, hi);
        }
    }

    /// Whether a parameter belongs to the image or prompt-text tower.
    pub fn is_image_or_text(&self, id: ParamId) -> bool {
        let name = self.store.name(id);
        name.starts_with("image.") || name.starts_with("text.")
    }

    pub fn is_finite(&self) -> bool {
        self.store.iter().all(|(_, _, t)| t.is_finite())
    }

    fn check_input(&self, modality: Modality, input: EncoderInput<'_>) -> Result<()> {
        match (modality, input) {
            (Modality::Image, EncoderInput::Patches(p)) => {
                let g = &self.config.geometry;
                if p.count() != g.patch_count() || p.dim() != g.patch_dim() {
                    return Err(Error::Shape(format!(
                        "patch sequence {}x{} does not match geometry {}x{}",
                        p.count(),
                        p.dim(),
                        g.patch_count(),
                        g.patch_dim()
                    )));
                }
                if p.values().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("patches".into()));
                }
            }
            (Modality::Text | Modality::Content, EncoderInput::Tokens(t)) => {
                let context = self.config.positions(modality);
                if t.context() > context {
                    return Err(Error::Shape(format!(
                        "{} sequence of length {} exceeds context {context}",
                        modality.prefix(),
                        t.context()
                    )));
                }
                if let Some(bad) = t.ids().iter().find(|&&id| id as usize >= self.config.vocab_size) {
                    return Err(Error::Shape(format!("token id {bad} outside vocabulary")));
                }
            }
            _ => {
                return Err(Error::Shape(format!(
                    "wrong input kind for the {} encoder",
                    modality.prefix()
                )))
            }
        }
        Ok(())
    }

    /// Builds the encoder graph and returns the raw CLS output (1×d_enc).
    pub fn encode_on_tape(&self, tape: &mut Tape<'_>, modality: Modality, input: EncoderInput<'_>) -> Result<Var> {
        self.check_input(modality, input)?;
        let enc = &self.encoders[modality as usize];
        // Rows after the CLS slot. PAD positions are dropped outright, which
        // is equivalent to masking them out of attention and pooling.
        let body = match (&enc.input, input) {
            (InputIds::Patch { weight, bias }, EncoderInput::Patches(p)) => {
                let x = tape.input(Matrix::from_vec(p.count(), p.dim(), p.values().to_vec())?);
                let w = tape.param(*weight);
                let b = tape.param(*bias);
                let xw = tape.matmul(x, w);
                Some(tape.add_row(xw, b))
            }
            (InputIds::Token { table }, EncoderInput::Tokens(t)) => {
                let ids: Vec<usize> = t.ids()[1..t.active_len()].iter().map(|&i| i as usize).collect();
                (!ids.is_empty()).then(|| tape.gather(*table, &ids))
            }
            _ => unreachable!("checked above"),
        };
        let cls = tape.param(enc.cls);
        let h = match body {
            Some(b) => tape.concat_rows(cls, b),
            None => cls,
        };
        if self.config.layers == 0 {
            return Ok(tape.mean_rows(h));
        }
        let n = tape.value(h).rows();
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(enc.pos, &positions);
        let mut h = tape.add(h, pos);
        for block in &enc.blocks {
            h = self.block(tape, block, h);
        }
        let (g, b) = (tape.param(enc.final_ln.0), tape.param(enc.final_ln.1));
        let h = tape.layer_norm(h, g, b);
        Ok(tape.row(h, 0))
    }

    fn block(&self, tape: &mut Tape<'_>, ids: &BlockIds, x: Var) -> Var {
        let affine = |tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId| {
            let w = tape.param(w);
            let b = tape.param(b);
            let xw = tape.matmul(x, w);
            tape.add_row(xw, b)
        };
        let (g1, b1) = (tape.param(ids.ln1_g), tape.param(ids.ln1_b));
        let a = tape.layer_norm(x, g1, b1);
        let q = affine(tape, a, ids.wq, ids.bq);
        let k = affine(tape, a, ids.wk, ids.bk);
        let v = affine(tape, a, ids.wv, ids.bv);
        let att = tape.attention(q, k, v, self.config.heads);
        let att = affine(tape, att, ids.wo, ids.bo);
        let x = tape.add(x, att);
        let (g2, b2) = (tape.param(ids.ln2_g), tape.param(ids.ln2_b));
        let m = tape.layer_norm(x, g2, b2);
        let m = affine(tape, m, ids.w1, ids.b1);
        let m = tape.gelu(m);
        let m = affine(tape, m, ids.w2, ids.b2);
        tape.add(x, m)
    }

    /// Projects a raw CLS output on the tape and normalizes it.
    pub fn project_on_tape(&self, tape: &mut Tape<'_>, modality: Modality, raw: Var) -> Result<Var> {
        let proj = tape.param(self.encoders[modality as usize].proj);
        let z = tape.matmul(raw, proj);
        tape.l2_normalize(z)
    }

    pub fn embed_on_tape(&self, tape: &mut Tape<'_>, modality: Modality, input: EncoderInput<'_>) -> Result<Var> {
        let raw = self.encode_on_tape(tape, modality, input)?;
        self.project_on_tape(tape, modality, raw)
    }

    fn encode(&self, modality: Modality, input: EncoderInput<'_>) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.store);
        let v = self.encode_on_tape(&mut tape, modality, input)?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn encode_image(&self, patches: &PatchSequence) -> Result<Vec<f64>> {
        self.encode(Modality::Image, EncoderInput::Patches(patches))
    }

    pub fn encode_text(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.encode(Modality::Text, EncoderInput::Tokens(tokens))
    }

    pub fn encode_content(&self, tokens: &TokenSequence) -> Result<Vec<f64>> {
        self.encode(Modality::Content, EncoderInput::Tokens(tokens))
    }

    /// Proj·raw scaled to unit length.
    pub fn project_normalize(&self, raw: &[f64], modality: Modality) -> Result<JointEmbedding> {
        if raw.len() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "raw vector has {} entries, expected {}",
                raw.len(),
                self.config.embed_dim
            )));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("raw encoder output".into()));
        }
        let proj = self.store.get(self.encoders[modality as usize].proj);
        let z = Matrix::row_vector(raw.to_vec()).matmul(proj);
        JointEmbedding::normalize(z.into_data())
    }

    pub fn embed(&self, modality: Modality, input: EncoderInput<'_>) -> Result<JointEmbedding> {
        let raw = self.encode(modality, input)?;
        self.project_normalize(&raw, modality)
    }

    /// Adds `scale ·` `grads` into the parameters; used by finite-difference
    /// checks and simple updates.
    pub fn apply(&mut self, grads: &ParamGrads, scale: f64) {
        for id in self.store.ids().collect::<Vec<_>>() {
            if let Some(g) = grads.get(id) {
                for (p, d) in self.store.get_mut(id).data_mut().iter_mut().zip(g.data()) {
                    *p += scale * d;
                }
            }
        }
    }
}

/// A unit-norm vector in the joint space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointEmbedding(Vec<f64>);

impl JointEmbedding {
    pub fn normalize(v: Vec<f64>) -> Result<Self> {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::DegenerateEmbedding);
        }
        if !norm.is_finite() {
            return Err(Error::NonFinite("embedding".into()));
        }
        Ok(Self(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &JointEmbedding) -> f64 {
        dot(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub split: String,
    /// Seen class names the model was trained on.
    pub seen: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    config: EncoderConfig,
    #[serde(default)]
    provenance: Option<Provenance>,
    tensors: Vec<TensorRecord>,
}

/// Writes parameters as JSON via a temporary file and rename.
pub fn save_checkpoint(params: &ModelParams, provenance: Option<&Provenance>, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        config: params.config,
        provenance: provenance.cloned(),
        tensors: params
            .store
            .iter()
            .map(|(_, name, t)| TensorRecord {
                name: name.to_string(),
                rows: t.rows(),
                cols: t.cols(),
                data: t.data().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&file)?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Option<Provenance>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_slice(&bytes)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Config(format!(
            "{}: unsupported checkpoint format `{}`",
            path.display(),
            file.format
        )));
    }
    let mut params = ModelParams::init(file.config, 0)?;
    if file.tensors.len() != params.store.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, config implies {}",
            file.tensors.len(),
            params.store.len()
        )));
    }
    for t in file.tensors {
        let id = params
            .store
            .find(&t.name)
            .ok_or_else(|| Error::Shape(format!("unexpected tensor `{}`", t.name)))?;
        let slot = params.store.get_mut(id);
        if slot.shape() != (t.rows, t.cols) {
            return Err(Error::Shape(format!(
                "tensor `{}` has shape {}x{}",
                t.name, t.rows, t.cols
            )));
        }
        *slot = Matrix::from_vec(t.rows, t.cols, t.data)?;
    }
    if !params.is_finite() {
        return Err(Error::NonFinite(format!("checkpoint {}", path.display())));
    }
    Ok((params, file.provenance))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::tokenize::{patchify, tokenize, unpatchify};

    fn small(layers: usize) -> EncoderConfig {
        EncoderConfig {
            embed_dim: 8,
            layers,
            heads: 2,
            ff_dim: 12,
            joint_dim: 6,
            vocab_size: 32,
            text_context: 8,
            content_context: 8,
            geometry: ImageGeometry::new(4, 4, 1, 2).unwrap(),
        }
    }

    fn tokens(ids: &[u32], context: usize) -> TokenSequence {
        let mut v = vec![crate::tokenize::CLS];
        v.extend_from_slice(ids);
        v.resize(context, crate::tokenize::PAD);
        TokenSequence::from_ids(v, &Vocabulary::new(32).unwrap()).unwrap()
    }

    #[test]
    fn blank_image_and_empty_text_are_finite() {
        for layers in [0, 1] {
            let p = ModelParams::init(small(layers), 1).unwrap();
            let blank = patchify(&Image::filled(4, 4, 1, 1.0), 2).unwrap();
            let out = p.encode_image(&blank).unwrap();
            assert_eq!(out.len(), 8);
            assert!(out.iter().all(|v| v.is_finite()));
            assert_eq!(out, p.encode_image(&blank).unwrap());
            let empty = tokens(&[], 8);
            let t = p.encode_text(&empty).unwrap();
            assert!(t.iter().all(|v| v.is_finite()));
            assert_eq!(t, p.encode_text(&empty).unwrap());
            assert!(p.encode_content(&empty).unwrap().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn pooling_encoder_ignores_patch_order() {
        let p = ModelParams::init(small(0), 2).unwrap();
        let g = p.config().geometry;
        let img = Image::from_data(4, 4, 1, (0..16).map(|v| v as f32 / 16.0).collect()).unwrap();
        let patches = patchify(&img, 2).unwrap();
        let mut values = patches.values().to_vec();
        let dim = patches.dim();
        // Swap patch 0 and patch 3.
        for i in 0..dim {
            values.swap(i, 3 * dim + i);
        }
        let permuted = PatchSequence::from_values(patches.count(), dim, values).unwrap();
        let img2 = unpatchify(&permuted, &g).unwrap();
        assert_ne!(img, img2);
        let a = p.encode_image(&patches).unwrap();
        let b = p.encode_image(&permuted).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn padded_position_embeddings_do_not_matter() {
        let mut p = ModelParams::init(small(1), 3).unwrap();
        let seq = tokens(&[5, 6, 7], 8);
        let before = p.encode_content(&seq).unwrap();
        let pos = p.store().find("content.pos").unwrap();
        for v in p.store_mut().get_mut(pos).row_mut(6) {
            *v += 3.0;
        }
        assert_eq!(before, p.encode_content(&seq).unwrap());
        for v in p.store_mut().get_mut(pos).row_mut(2) {
            *v += 3.0;
        }
        assert_ne!(before, p.encode_content(&seq).unwrap());
    }

    #[test]
    fn content_and_text_towers_are_separate() {
        let p = ModelParams::init(small(1), 4).unwrap();
        let seq = tokens(&[5, 6], 8);
        assert_ne!(p.encode_text(&seq).unwrap(), p.encode_content(&seq).unwrap());
        assert!(p.store().find("content.token").is_some());
        assert!(p.store().find("text.token").is_some());
    }

    #[test]
    fn projection_normalizes() {
        let mut p = ModelParams::init(small(0), 5).unwrap();
        let proj = p.store().find("text.proj").unwrap();
        let mut m = Matrix::zeros(8, 6);
        m.row_mut(0)[0] = 3.0;
        m.row_mut(1)[1] = 4.0;
        *p.store_mut().get_mut(proj) = m;
        let raw = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let e = p.project_normalize(&raw, Modality::Text).unwrap();
        assert!((e.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((e.as_slice()[1] - 0.8).abs() < 1e-15);
        let doubled: Vec<f64> = raw.iter().map(|v| v * 2.0).collect();
        assert_eq!(e, p.project_normalize(&doubled, Modality::Text).unwrap());
        let zero = [0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            p.project_normalize(&zero, Modality::Text),
            Err(Error::DegenerateEmbedding)
        ));
    }

    #[test]
    fn shape_mismatches_rejected() {
        let p = ModelParams::init(small(0), 6).unwrap();
        let big = patchify(&Image::filled(8, 8, 1, 0.5), 2).unwrap();
        assert!(matches!(p.encode_image(&big), Err(Error::Shape(_))));
        let vocab = Vocabulary::new(32).unwrap();
        let long = tokenize("a b c d e f g h i j", &vocab, 12);
        assert!(matches!(p.encode_text(&long), Err(Error::Shape(_))));
        assert!(ModelParams::init(EncoderConfig { heads: 3, ..small(1) }, 0).is_err());
    }

    #[test]
    fn initial_temperatures() {
        let mut p = ModelParams::init(small(0), 7).unwrap();
        assert!((p.tau_ic() - 0.07).abs() < 1e-12);
        p.set_log_taus(-20.0, 5.0);
        p.clamp_temperatures();
        assert!((p.tau_ic() - TAU_MIN).abs() < 1e-12);
        assert!((p.tau_tc() - TAU_MAX).abs() < 1e-9);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let p = ModelParams::init(small(1), 8).unwrap();
        let prov = Provenance {
            split: "A".into(),
            seen: vec!["x".into()],
        };
        save_checkpoint(&p, Some(&prov), &path).unwrap();
        let (q, got) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(got, Some(prov));
        assert!(!path.with_extension("json.tmp").exists());
    }
}
