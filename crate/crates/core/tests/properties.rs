//! Property tests for the tokenizer, encoders, loss, inference and splits.

use std::collections::{BTreeMap, BTreeSet};

use docalign::corpus::{ClassLabel, CorpusManifest, DocumentRecord, ImageSource};
use docalign::eval::{harmonic_mean, per_class_top1};
use docalign::image::{Image, ImageGeometry};
use docalign::infer::{
    calibrate, predict, score_early_fusion, score_late_fusion, PromptBank, PromptTemplate, ScoreMode, Temperatures,
};
use docalign::loss::{coupled_loss, Alignment, BatchTriplet, LossConfig, TemperaturePair};
use docalign::model::{EncoderConfig, EncoderInput, JointEmbedding, Modality, ModelParams, TAU_MIN};
use docalign::splits::{
    make_incremental_split, make_sequential_splits, validate_split, IncrementalBounds, RankOrdering,
};
use docalign::tokenize::{patchify, tokenize, unpatchify, Vocabulary};
use proptest::prelude::*;

fn unit(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// `n` unit vectors of dimension `d`, none near zero before normalizing.
fn unit_rows(n: usize, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(
        prop::collection::vec(-1.0f64..1.0, d)
            .prop_filter("non-degenerate", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3),
        n,
    )
    .prop_map(|rows| rows.into_iter().map(unit).collect())
}

fn triplet(n: usize, d: usize) -> impl Strategy<Value = BatchTriplet> {
    (unit_rows(n, d), unit_rows(n, d), unit_rows(n, d)).prop_map(|(image, text, content)| BatchTriplet {
        image,
        text,
        content,
    })
}

fn temps() -> impl Strategy<Value = TemperaturePair> {
    (0.05f64.ln()..0.0, 0.05f64.ln()..0.0).prop_map(|(ic, tc)| TemperaturePair {
        log_tau_ic: ic,
        log_tau_tc: tc,
    })
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Direct softmax cross-entropy, no log-sum-exp tricks.
fn cross_entropy_total(a: &[Vec<f64>], c: &[Vec<f64>], tau: f64) -> f64 {
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    (0..a.len())
        .map(|i| {
            let denom: f64 = c.iter().map(|cj| (dot(&a[i], cj) / tau).exp()).sum();
            -((dot(&a[i], &c[i]) / tau).exp() / denom).ln()
        })
        .sum()
}

fn bank(embeddings: Vec<Vec<f64>>) -> PromptBank {
    let k = embeddings.len();
    PromptBank {
        template: PromptTemplate::default(),
        classes: (0..k).collect(),
        names: (0..k).map(|i| format!("class {i}")).collect(),
        embeddings: embeddings
            .into_iter()
            .map(|e| JointEmbedding::normalize(e).unwrap())
            .collect(),
    }
}

fn manifest_with_classes(k: usize) -> CorpusManifest {
    CorpusManifest {
        classes: (0..k)
            .map(|index| ClassLabel {
                index,
                name: format!("class {index}"),
            })
            .collect(),
        channels: vec!["clean".into()],
        geometry: ImageGeometry::new(4, 4, 1, 2).unwrap(),
        vocab_buckets: None,
        records: (0..k)
            .map(|label| DocumentRecord {
                id: format!("r{label}"),
                label,
                content: BTreeMap::from([("clean".to_string(), "words".to_string())]),
                image: ImageSource::Inline(Image::filled(4, 4, 1, 1.0)),
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    #[test]
    fn patchify_round_trips(
        grid in (1usize..5, 1usize..5, 1usize..4, 1usize..3),
        seed in any::<u64>(),
    ) {
        let (rows, cols, patch, channels) = grid;
        let geometry = ImageGeometry::new(rows * patch, cols * patch, channels, patch).unwrap();
        let data: Vec<f32> = (0..geometry.pixel_count())
            .map(|i| ((seed.wrapping_add(i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) >> 40) as f32) / 16_777_216.0)
            .collect();
        let image = Image::from_data(geometry.height, geometry.width, channels, data).unwrap();
        let patches = patchify(&image, patch).unwrap();
        prop_assert_eq!(patches.count(), rows * cols);
        prop_assert_eq!(unpatchify(&patches, &geometry).unwrap(), image);
    }

    #[test]
    fn tokenization_is_total(text in any::<String>(), context in 1usize..40, size in 4usize..5000) {
        let vocab = Vocabulary::new(size).unwrap();
        let seq = tokenize(&text, &vocab, context);
        prop_assert_eq!(seq.ids().len(), context);
        prop_assert!(seq.ids().iter().all(|&id| (id as usize) < size));
        prop_assert_eq!(seq, tokenize(&text, &vocab, context));
    }

    #[test]
    fn joint_embeddings_are_unit_norm(v in prop::collection::vec(-1e3f64..1e3, 1..64)) {
        prop_assume!(v.iter().any(|&x| x != 0.0));
        let e = JointEmbedding::normalize(v).unwrap();
        let norm = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn loss_is_permutation_invariant(
        batch in (2usize..8).prop_flat_map(|n| triplet(n, 4)),
        temps in temps(),
        include_positive in any::<bool>(),
        rotate in 1usize..8,
    ) {
        let cfg = LossConfig { alignment: Alignment::Both, include_positive };
        let n = batch.len();
        let perm = |rows: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            (0..n).map(|i| rows[(i * 3 + rotate) % n].clone()).collect()
        };
        // i ↦ 3i + r is a bijection only when gcd(3, n) = 1.
        prop_assume!(n % 3 != 0);
        let shuffled = BatchTriplet { image: perm(&batch.image), text: perm(&batch.text), content: perm(&batch.content) };
        let a = coupled_loss(&batch, temps, &cfg).unwrap().total;
        let b = coupled_loss(&shuffled, temps, &cfg).unwrap().total;
        prop_assert!(close(a, b, 1e-12), "{} vs {}", a, b);
    }

    #[test]
    fn both_alignment_is_sum_of_single_terms(
        batch in (2usize..8).prop_flat_map(|n| triplet(n, 3)),
        temps in temps(),
        include_positive in any::<bool>(),
    ) {
        let total = |alignment| coupled_loss(&batch, temps, &LossConfig { alignment, include_positive }).unwrap();
        let both = total(Alignment::Both);
        let c2i = total(Alignment::ContentToImage);
        let c2t = total(Alignment::ContentToText);
        prop_assert!(close(both.total, c2i.total + c2t.total, 1e-12));
        for (g, (x, y)) in both.grad_content.iter().flatten().zip(c2i.grad_content.iter().flatten().zip(c2t.grad_content.iter().flatten())) {
            prop_assert!((g - (x + y)).abs() <= 1e-12 * g.abs().max(1.0));
        }
    }

    #[test]
    fn positive_inclusive_loss_is_softmax_cross_entropy(
        batch in (1usize..6).prop_flat_map(|n| triplet(n, 3)),
        tau in (0.2f64..2.0, 0.2f64..2.0),
    ) {
        let temps = TemperaturePair { log_tau_ic: tau.0.ln(), log_tau_tc: tau.1.ln() };
        let cfg = LossConfig { alignment: Alignment::Both, include_positive: true };
        let got = coupled_loss(&batch, temps, &cfg).unwrap().total;
        let want = 0.5 * (cross_entropy_total(&batch.image, &batch.content, tau.0)
            + cross_entropy_total(&batch.text, &batch.content, tau.1));
        prop_assert!(close(got, want, 1e-12), "{} vs {}", got, want);
    }

    #[test]
    fn loss_finite_at_temperature_floor(
        batch in (2usize..8).prop_flat_map(|n| triplet(n, 5)),
        include_positive in any::<bool>(),
    ) {
        let floor = TemperaturePair { log_tau_ic: TAU_MIN.ln(), log_tau_tc: TAU_MIN.ln() };
        let out = coupled_loss(&batch, floor, &LossConfig { alignment: Alignment::Both, include_positive }).unwrap();
        prop_assert!(out.total.is_finite());
        prop_assert!(out.grad_image.iter().chain(&out.grad_text).chain(&out.grad_content).flatten().all(|g| g.is_finite()));
        prop_assert!(out.grad_log_tau_ic.is_finite() && out.grad_log_tau_tc.is_finite());
    }

    #[test]
    fn late_fusion_follows_bank_order(
        rows in (2usize..8).prop_flat_map(|k| unit_rows(k + 2, 6)),
        tau in (0.01f64..1.0, 0.01f64..1.0),
        rotate in 0usize..8,
    ) {
        let (image, content, prompts) = (&rows[0], &rows[1], rows[2..].to_vec());
        let k = prompts.len();
        let temps = Temperatures { tau_ic: tau.0, tau_tc: tau.1 };
        let order: Vec<usize> = (0..k).map(|i| (i + rotate) % k).collect();
        let forward = score_late_fusion(image, content, &bank(prompts.clone()), temps, ScoreMode::Multiply).unwrap();
        let permuted_bank = bank(order.iter().map(|&i| prompts[i].clone()).collect());
        let permuted = score_late_fusion(image, content, &permuted_bank, temps, ScoreMode::Multiply).unwrap();
        for (pos, &i) in order.iter().enumerate() {
            prop_assert_eq!(permuted.s[pos], forward.s[i]);
        }
        prop_assert_eq!(order[predict(&permuted.s)], predict(&forward.s));
    }

    #[test]
    fn early_and_late_rank_alike_for_matching_towers(
        rows in (2usize..8).prop_flat_map(|k| unit_rows(k + 1, 6)),
        tau in 0.01f64..1.0,
    ) {
        let (image, prompts) = (&rows[0], rows[1..].to_vec());
        let b = bank(prompts);
        let temps = Temperatures { tau_ic: tau, tau_tc: tau };
        let late = score_late_fusion(image, image, &b, temps, ScoreMode::Multiply).unwrap().s;
        let early = score_early_fusion(image, image, &b, temps, ScoreMode::Multiply).unwrap();
        let ranking = |s: &[f64]| {
            let mut idx: Vec<usize> = (0..s.len()).collect();
            idx.sort_by(|&x, &y| s[y].total_cmp(&s[x]).then(x.cmp(&y)));
            idx
        };
        for (x, y) in late.iter().zip(&early) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert_eq!(ranking(&late), ranking(&early));
    }

    #[test]
    fn calibration_moves_predictions_to_unseen(
        scores in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..30),
        seen in prop::collection::vec(any::<bool>(), 6),
        gammas in prop::collection::vec(0.0f64..10.0, 2..10),
    ) {
        for s in &scores {
            prop_assert_eq!(predict(&calibrate(s, &seen, 0.0)), predict(s));
        }
        let mut gammas = gammas;
        gammas.sort_by(f64::total_cmp);
        let seen_count = |g: f64| scores.iter().filter(|s| seen[predict(&calibrate(s, &seen, g))]).count();
        for w in gammas.windows(2) {
            prop_assert!(seen_count(w[1]) <= seen_count(w[0]));
        }
    }

    #[test]
    fn sequential_splits_partition_the_classes(
        (groups, size) in (2usize..6, 1usize..5),
        keys in prop::collection::vec(any::<u32>(), 30),
    ) {
        let k = groups * size;
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by_key(|&c| (keys[c], c));
        let manifest = manifest_with_classes(k);
        let splits = make_sequential_splits(&order, size).unwrap();
        prop_assert_eq!(splits.len(), groups);
        let mut counts = vec![0; k];
        for split in &splits {
            for &c in &split.unseen {
                counts[c] += 1;
            }
            prop_assert!(validate_split(split, &manifest).is_ok());
        }
        prop_assert!(counts.iter().all(|&n| n == 1));
    }

    #[test]
    fn incremental_splits_form_a_chain(accuracies in prop::collection::vec(0u8..20, 10..17)) {
        let k = accuracies.len();
        let entries: Vec<(usize, f64)> = accuracies.iter().enumerate().map(|(c, &a)| (c, f64::from(a))).collect();
        let rank = RankOrdering::new(entries, k).unwrap();
        let manifest = manifest_with_classes(k);
        let bounds = IncrementalBounds::default();
        let mut previous: BTreeSet<usize> = BTreeSet::new();
        for i in bounds.min..=bounds.max {
            let split = make_incremental_split(&rank, i, bounds).unwrap();
            prop_assert!(previous.is_subset(&split.unseen));
            prop_assert_eq!(split.unseen.len(), i);
            // Everything unseen ranks no higher than anything seen.
            let worst_seen = split.seen.iter().map(|&c| accuracies[c]).min().unwrap();
            prop_assert!(split.unseen.iter().all(|&c| accuracies[c] <= worst_seen));
            prop_assert!(validate_split(&split, &manifest).is_ok());
            previous = split.unseen;
        }
    }

    #[test]
    fn per_class_accuracy_matches_counting(
        pairs in prop::collection::vec((0usize..6, 0usize..8), 1..120),
    ) {
        let labels: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let predictions: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let classes: Vec<usize> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let got = per_class_top1(&predictions, &labels, &classes).unwrap();
        let mut sum = 0.0;
        for &c in &classes {
            let total = labels.iter().filter(|&&y| y == c).count();
            let hits = labels.iter().zip(&predictions).filter(|(&y, &p)| y == c && p == c).count();
            sum += 100.0 * hits as f64 / total as f64;
        }
        prop_assert_eq!(got.mean, sum / classes.len() as f64);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn encoders_are_pure(layers in 0usize..=1, seed in any::<u64>(), text in "[a-z ]{0,40}") {
        let cfg = EncoderConfig {
            embed_dim: 8,
            layers,
            heads: 2,
            ff_dim: 16,
            joint_dim: 4,
            vocab_size: 64,
            text_context: 12,
            content_context: 12,
            geometry: ImageGeometry::new(8, 8, 1, 4).unwrap(),
        };
        let params = ModelParams::init(cfg, seed).unwrap();
        let tokens = tokenize(&text, &cfg.vocabulary(), 12);
        let a = params.embed(Modality::Content, EncoderInput::Tokens(&tokens)).unwrap();
        let b = params.embed(Modality::Content, EncoderInput::Tokens(&tokens)).unwrap();
        prop_assert_eq!(a.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        let twin = ModelParams::init(cfg, seed).unwrap();
        prop_assert_eq!(twin.encode_text(&tokens).unwrap(), params.encode_text(&tokens).unwrap());
    }
}

/// (u, s, printed H) for every GZSL row of the published ablation tables.
const ABLATION_ROWS: [(f64, f64, f64); 16] = [
    (55.21, 49.85, 52.39),
    (57.37, 69.56, 62.88),
    (65.25, 50.80, 57.13),
    (65.13, 75.28, 69.84),
    (55.94, 50.79, 53.24),
    (45.76, 69.55, 55.21),
    (50.21, 46.47, 48.27),
    (45.92, 66.47, 54.31),
    (54.70, 51.53, 53.07),
    (57.13, 59.61, 58.35),
    (52.12, 57.92, 54.87),
    (52.17, 51.38, 51.77),
    (65.86, 59.22, 62.36),
    (76.34, 42.01, 54.20),
    (59.01, 45.25, 51.22),
    (56.32, 53.42, 54.83),
];

#[test]
fn harmonic_mean_matches_ablation_tables() {
    for (u, s, h) in ABLATION_ROWS {
        let got = harmonic_mean(u, s).unwrap();
        assert!((got - h).abs() <= 0.01, "H({u}, {s}) = {got}, printed {h}");
    }
}
