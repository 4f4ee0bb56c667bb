//! Deterministic inputs shared by the benchmarks.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protomail_core::encoders::EncoderConfig;
use protomail_core::model::{ModelConfig, PreparedEmail, ProtoModel};
use protomail_core::protonet::{Granularity, PoolUnit, PrototypeBank};
use protomail_core::synthetic::{generate, SyntheticConfig};

pub fn random_vectors(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

/// A bank of `count` random prototypes and a pool of `units` labeled units.
pub fn projection_case(count: usize, units: usize, d: usize) -> (PrototypeBank, Vec<PoolUnit>) {
    let mut bank = PrototypeBank::new(Granularity::Sentence, count, d, 1e-4).expect("valid bank");
    bank.vectors = random_vectors(count, d, 1);
    let doc = Arc::new(vec![0.0; d]);
    let pool = random_vectors(units, d, 2)
        .into_iter()
        .enumerate()
        .map(|(i, embedding)| PoolUnit {
            embedding,
            label: (i % 2) as u8,
            email_id: format!("e{i}"),
            unit_index: 0,
            surface_text: String::new(),
            source_document: doc.clone(),
        })
        .collect();
    (bank, pool)
}

/// Untrained desk-scale model and a handful of prepared synthetic emails.
pub fn model_case(emails: usize) -> (ProtoModel, Vec<PreparedEmail>) {
    let corpus = generate(&SyntheticConfig {
        count: emails,
        seed: 7,
        ..Default::default()
    });
    let d = 16;
    let model = ProtoModel::new(ModelConfig {
        encoder: EncoderConfig {
            d,
            ffn_dim: 2 * d,
            text_heads: 2,
            graph_heads: 2,
            text_layers: 1,
            graph_layers: 1,
            hash_buckets: 512,
            max_document_tokens: 96,
            max_sentence_tokens: 24,
            ..Default::default()
        },
        ..Default::default()
    })
    .expect("valid model");
    let prepared = corpus
        .emails
        .iter()
        .map(|e| model.prepare_labeled(&e.email, e.label, Some(&corpus.parses)))
        .collect();
    (model, prepared)
}
