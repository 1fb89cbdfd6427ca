//! Encoder gradients against central finite differences.

use docalign::autograd::{Matrix, ParamGrads, Tape};
use docalign::image::ImageGeometry;
use docalign::model::{EncoderConfig, EncoderInput, Modality, ModelParams};
use docalign::tokenize::{tokenize, PatchSequence, TokenSequence};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-4;

enum Owned {
    Patches(PatchSequence),
    Tokens(TokenSequence),
}

impl Owned {
    fn input(&self) -> EncoderInput<'_> {
        match self {
            Owned::Patches(p) => EncoderInput::Patches(p),
            Owned::Tokens(t) => EncoderInput::Tokens(t),
        }
    }
}

fn config(embed_dim: usize, heads: usize, layers: usize, context: usize) -> EncoderConfig {
    EncoderConfig {
        embed_dim,
        layers,
        heads,
        ff_dim: 2 * embed_dim,
        joint_dim: 5,
        vocab_size: 16,
        text_context: context,
        content_context: context,
        geometry: ImageGeometry::new(8, 8, 1, 4).unwrap(),
    }
}

/// Scalar test function: fixed random weights on the raw CLS output plus
/// fixed weights on the normalized joint embedding.
fn objective(params: &ModelParams, modality: Modality, input: &Owned, w_raw: &[f64], w_joint: &[f64]) -> f64 {
    let raw = match modality {
        Modality::Image => match input {
            Owned::Patches(p) => params.encode_image(p).unwrap(),
            Owned::Tokens(_) => unreachable!(),
        },
        Modality::Text | Modality::Content => match input {
            Owned::Tokens(t) if modality == Modality::Text => params.encode_text(t).unwrap(),
            Owned::Tokens(t) => params.encode_content(t).unwrap(),
            Owned::Patches(_) => unreachable!(),
        },
    };
    let joint = params.project_normalize(&raw, modality).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    dot(&raw, w_raw) + dot(joint.as_slice(), w_joint)
}

fn check_encoder(cfg: EncoderConfig, modality: Modality, words: usize, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(cfg, seed).map_err(|e| e.to_string())?;
    // Move away from the tiny initial weights so every nonlinearity matters.
    for id in params.store().ids().collect::<Vec<_>>() {
        for v in params.store_mut().get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let input = match modality {
        Modality::Image => {
            let g = cfg.geometry;
            let values = (0..g.patch_count() * g.patch_dim())
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            Owned::Patches(PatchSequence::from_values(g.patch_count(), g.patch_dim(), values).unwrap())
        }
        _ => {
            let text: Vec<String> = (0..words)
                .map(|i| format!("w{}", rng.random_range(0..40) + i))
                .collect();
            Owned::Tokens(tokenize(&text.join(" "), &cfg.vocabulary(), cfg.text_context))
        }
    };
    let w_raw: Vec<f64> = (0..cfg.embed_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w_joint: Vec<f64> = (0..cfg.joint_dim).map(|_| rng.random_range(-1.0..1.0)).collect();

    let mut grads = ParamGrads::for_store(params.store());
    {
        let mut tape = Tape::new(params.store());
        let raw = params
            .encode_on_tape(&mut tape, modality, input.input())
            .map_err(|e| e.to_string())?;
        let joint = params
            .project_on_tape(&mut tape, modality, raw)
            .map_err(|e| e.to_string())?;
        let seed_raw = Matrix::row_vector(w_raw.clone());
        let seed_joint = Matrix::row_vector(w_joint.clone());
        tape.backward(&[(raw, &seed_raw), (joint, &seed_joint)], &mut grads);
    }

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.store().ids().collect();
    for id in ids {
        let name = params.store().name(id).to_string();
        let len = params.store().get(id).data().len();
        for k in 0..len {
            let original = params.store().get(id).data()[k];
            params.store_mut().get_mut(id).data_mut()[k] = original + STEP;
            let up = objective(&params, modality, &input, &w_raw, &w_joint);
            params.store_mut().get_mut(id).data_mut()[k] = original - STEP;
            let down = objective(&params, modality, &input, &w_raw, &w_joint);
            params.store_mut().get_mut(id).data_mut()[k] = original;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[k]);
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
            if err >= 1e-4 {
                return Err(format!("{name}[{k}]: analytic {analytic}, numeric {numeric}"));
            }
        }
    }
    Ok(worst)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn encoder_gradients_match_finite_differences(
        width in prop::sample::select(vec![(4usize, 1usize), (8, 2), (16, 4)]),
        layers in 0usize..=1,
        modality in prop::sample::select(Modality::ALL.to_vec()),
        words in 0usize..=7,
        seed in any::<u64>(),
    ) {
        let (embed_dim, heads) = width;
        let cfg = config(embed_dim, heads, layers, 8);
        let worst = check_encoder(cfg, modality, words, seed);
        prop_assert!(worst.is_ok(), "{:?} layers={} d={}: {}", modality, layers, embed_dim, worst.unwrap_err());
    }
}

#[test]
fn full_context_text_gradients() {
    // Eight words overflow the 8-slot context (CLS + 7): truncation path.
    for layers in [0, 1] {
        check_encoder(config(8, 2, layers, 8), Modality::Text, 8, 11).unwrap();
    }
}
