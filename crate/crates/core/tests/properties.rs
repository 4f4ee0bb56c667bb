use std::collections::HashSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protomail_core::corpus::{balance_and_split, Email, LabeledEmail, SourceCorpus, SplitCorpus, SplitRatios};
use protomail_core::encoders::EncoderConfig;
use protomail_core::explain::explain;
use protomail_core::model::{ModelConfig, ProtoModel};
use protomail_core::protonet::{similarity, similarity_from_sq_distance, Granularity};
use protomail_core::synthetic::{generate, SyntheticConfig};
use protomail_core::training::{paired_t_test, Metrics};

fn corpus(labels: &[bool]) -> Vec<LabeledEmail> {
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| LabeledEmail {
            email: Email::new(format!("e{i}"), "s", "Body text."),
            label: u8::from(l),
            source_corpus: SourceCorpus::Generic,
        })
        .collect()
}

fn positives(v: &[LabeledEmail]) -> usize {
    v.iter().filter(|e| e.label == 1).count()
}

proptest! {
    #[test]
    fn splits_are_balanced_disjoint_and_sized_by_the_minority(
        labels in prop::collection::vec(any::<bool>(), 20..300),
        seed in any::<u64>(),
    ) {
        let n = labels.iter().filter(|l| **l).count().min(labels.iter().filter(|l| !**l).count());
        let r = balance_and_split(&corpus(&labels), seed, SplitRatios::default());
        prop_assume!(r.is_ok() || n < 10);
        if let Ok(SplitCorpus { train, val, test, .. }) = r {
            let mut ids = HashSet::new();
            for part in [&train, &val, &test] {
                prop_assert_eq!(positives(part) * 2, part.len());
                for e in part.iter() {
                    prop_assert!(ids.insert(e.email.id.clone()));
                }
            }
            prop_assert_eq!(ids.len(), 2 * n);
            let again = balance_and_split(&corpus(&labels), seed, SplitRatios::default()).unwrap();
            prop_assert_eq!(again.manifest(), SplitCorpus { train, val, test, seed, ratios: SplitRatios::default() }.manifest());
        }
    }

    #[test]
    fn similarity_is_positive_and_decreasing(a in 0.0f64..1e8, b in 0.0f64..1e8) {
        let (sa, sb) = (similarity_from_sq_distance(a, 1e-4), similarity_from_sq_distance(b, 1e-4));
        prop_assert!(sa > 0.0 && sb > 0.0);
        prop_assert!(sa <= 1e4f64.ln() + 1e-12);
        if a < b {
            prop_assert!(sa >= sb);
        }
    }

    #[test]
    fn similarity_is_symmetric(p in prop::collection::vec(-10.0f64..10.0, 6), e in prop::collection::vec(-10.0f64..10.0, 6)) {
        prop_assert_eq!(similarity(&p, &e, 1e-4).unwrap(), similarity(&e, &p, 1e-4).unwrap());
    }

    #[test]
    fn metrics_stay_in_range_and_agree_on_balanced_sets(
        pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..100),
    ) {
        let y_true: Vec<u8> = pairs.iter().map(|p| u8::from(p.0)).collect();
        let y_pred: Vec<u8> = pairs.iter().map(|p| u8::from(p.1)).collect();
        let m = Metrics::from_labels(&y_true, &y_pred);
        prop_assert_eq!(m.total(), pairs.len() as u64);
        for v in [m.macro_f1, m.weighted_f1, m.per_class[0].f1, m.per_class[1].f1] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((m.macro_f1 - (m.per_class[0].f1 + m.per_class[1].f1) / 2.0).abs() < 1e-12);
        // mirror the labels to make the set exactly balanced
        let bt: Vec<u8> = y_true.iter().copied().chain(y_true.iter().map(|y| 1 - y)).collect();
        let bp: Vec<u8> = y_pred.iter().copied().chain(y_pred.iter().map(|y| 1 - y)).collect();
        let b = Metrics::from_labels(&bt, &bp);
        prop_assert!((b.macro_f1 - b.weighted_f1).abs() < 1e-12);
    }
}

/// Two-sided p of Student's t with 4 degrees of freedom, by Simpson
/// integration of the density `3/8 (1 + t^2/4)^(-5/2)`.
fn p_value_df4(t: f64) -> f64 {
    let f = |x: f64| 0.375 * (1.0 + x * x / 4.0).powf(-2.5);
    let n = 20_000;
    let h = t.abs() / n as f64;
    let mut s = f(0.0) + f(t.abs());
    for i in 1..n {
        s += f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

#[test]
fn paired_t_test_matches_an_integrated_density() {
    // table values first: t = 2.776 is the 5% two-sided point at 4 df
    assert!((p_value_df4(2.776445105) - 0.05).abs() < 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10 {
        let a: Vec<f64> = (0..5).map(|_| rng.random_range(0.6..0.9)).collect();
        let b: Vec<f64> = (0..5).map(|_| rng.random_range(0.6..0.9)).collect();
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        let mean = d.iter().sum::<f64>() / 5.0;
        let sd = (d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0).sqrt();
        let t = mean / (sd / 5f64.sqrt());
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.degrees_of_freedom, 4);
        assert!((r.t - t).abs() < 1e-12);
        assert!((r.p_value - p_value_df4(t)).abs() < 1e-6, "{} vs {}", r.p_value, p_value_df4(t));
    }
}

fn toy_projected_model() -> (ProtoModel, Vec<protomail_core::model::PreparedEmail>) {
    let c = generate(&SyntheticConfig {
        count: 16,
        seed: 4,
        ..Default::default()
    });
    let mut model = ProtoModel::new(ModelConfig {
        encoder: EncoderConfig {
            d: 4,
            text_heads: 2,
            graph_heads: 2,
            ffn_dim: 8,
            hash_buckets: 64,
            max_document_tokens: 48,
            max_sentence_tokens: 16,
            text_layers: 1,
            graph_layers: 1,
            ..Default::default()
        },
        document_prototypes: 4,
        sentence_prototypes: 4,
        phrase_prototypes: 4,
        seed: 4,
        ..Default::default()
    })
    .unwrap();
    let prepared: Vec<_> = c.emails.iter().map(|e| model.prepare_labeled(&e.email, e.label, Some(&c.parses))).collect();
    model.initialize_prototypes(&prepared, 4, 1).unwrap();
    model.project(&prepared, 1).unwrap();
    (model, prepared)
}

#[test]
fn explanation_ranking_equals_brute_force_sort() {
    let (model, prepared) = toy_projected_model();
    for p in &prepared {
        let report = explain(&model, p, 10).unwrap();
        let mv = model.encode_views(p);
        for g in Granularity::ALL {
            let bank = model.banks.get(g).unwrap();
            let units: Vec<&Vec<f64>> = match g {
                Granularity::Document => vec![&mv.document],
                Granularity::Sentence => mv.sentences.iter().collect(),
                Granularity::Phrase => mv.phrases.iter().collect(),
            };
            let mut scored: Vec<(usize, f64)> = bank
                .vectors
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let best = units.iter().map(|u| similarity(v, u, 1e-4).unwrap()).fold(f64::NEG_INFINITY, f64::max);
                    (i, best)
                })
                .collect();
            // stable sort keeps index order among ties
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            let want: Vec<usize> = scored.iter().map(|s| s.0).collect();
            let got: Vec<usize> = report.prototypes[&g].iter().map(|c| c.prototype).collect();
            // topN above the bank size returns the whole bank
            assert_eq!(got, want, "{} {g:?}", p.id());
        }
    }
}

#[test]
fn explaining_a_prototype_source_scores_the_zero_distance_similarity() {
    let (model, prepared) = toy_projected_model();
    let bank = model.banks.get(Granularity::Document).unwrap();
    let source = &bank.projection.as_ref().unwrap()[2].email_id;
    let p = prepared.iter().find(|p| p.id() == source).unwrap();
    let top = &explain(&model, p, 1).unwrap().prototypes[&Granularity::Document][0];
    assert!((top.similarity - 1e4f64.ln()).abs() < 1e-9);
}

#[test]
fn unprojected_models_refuse_to_explain() {
    let (mut model, prepared) = toy_projected_model();
    model.initialize_prototypes(&prepared, 9, 1).unwrap();
    assert!(matches!(explain(&model, &prepared[0], 3), Err(protomail_core::Error::NotProjected)));
}
