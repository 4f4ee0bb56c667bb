//! The assembled network: encoders, prototype banks and head over one
//! parameter store, plus checkpoint I/O.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::Email;
use crate::encoders::{
    compose_document_sequence, compose_sentence_sequence, AttentionRecord, ComponentSet, DocumentSequence, EncoderConfig,
    GraphEncoder, GraphFeatures, MultiViewEmbedding, TextEncoder, TextEncoderKind,
};
use crate::error::{Error, Result};
use crate::parsing::{extract_subgraphs, tokenize, DependencyGraph, ParseMap, SentenceSlot, DEFAULT_ANCHORS};
use crate::protonet::{
    granularity_scores, softmax2, Aggregation, ClassifierHead, Granularity, PoolUnit, PrototypeBank, PrototypeBanks,
    SimilarityVector, DEFAULT_EPSILON,
};
use crate::tensor::Matrix;

pub const CHECKPOINT_FORMAT: u32 = 1;
const WEIGHTS_MAGIC: &[u8; 8] = b"PMWEIGHT";

/// Which views feed the head and whether they pass through prototypes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    /// Document and sentence views from the text encoders.
    pub text: bool,
    /// Phrase view from the graph encoder.
    pub graph: bool,
    pub prototypes: bool,
}

impl Default for Variant {
    fn default() -> Self {
        Self::FULL
    }
}

impl Variant {
    pub const FULL: Self = Self {
        text: true,
        graph: true,
        prototypes: true,
    };

    pub fn name(&self) -> String {
        let views = match (self.text, self.graph) {
            (true, true) => "text+graph",
            (true, false) => "text",
            (false, true) => "graph",
            (false, false) => "none",
        };
        if self.prototypes {
            format!("{views}+prototypes")
        } else {
            views.to_string()
        }
    }

    /// Parses names such as `text+graph+prototypes` or `graph`.
    pub fn parse(name: &str) -> Result<Self> {
        let mut v = Self {
            text: false,
            graph: false,
            prototypes: false,
        };
        for part in name.split('+').map(str::trim) {
            match part {
                "text" => v.text = true,
                "graph" => v.graph = true,
                "prototypes" | "proto" => v.prototypes = true,
                other => return Err(Error::Config(format!("unknown variant part {other:?}"))),
            }
        }
        if !v.text && !v.graph {
            return Err(Error::Config(format!("variant {name:?} enables no view")));
        }
        Ok(v)
    }

    pub fn has(&self, g: Granularity) -> bool {
        match g {
            Granularity::Document | Granularity::Sentence => self.text,
            Granularity::Phrase => self.graph,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub variant: Variant,
    pub components: ComponentSet,
    pub document_prototypes: usize,
    pub sentence_prototypes: usize,
    pub phrase_prototypes: usize,
    pub epsilon: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub aggregation: Aggregation,
    pub anchors: Vec<String>,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            variant: Variant::FULL,
            components: ComponentSet::ALL,
            document_prototypes: 10,
            sentence_prototypes: 10,
            phrase_prototypes: 10,
            epsilon: DEFAULT_EPSILON,
            lambda1: 0.3,
            lambda2: 0.5,
            aggregation: Aggregation::Mean,
            anchors: DEFAULT_ANCHORS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn prototype_count(&self, g: Granularity) -> usize {
        match g {
            Granularity::Document => self.document_prototypes,
            Granularity::Sentence => self.sentence_prototypes,
            Granularity::Phrase => self.phrase_prototypes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().map_err(Error::Config)?;
        Variant::parse(&self.variant.name())?;
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config("fusion weights must be finite and non-negative".into()));
        }
        if self.variant.prototypes {
            for g in Granularity::ALL {
                let c = self.prototype_count(g);
                if self.variant.has(g) && (c == 0 || c % 2 != 0) {
                    return Err(Error::Config(format!("{g} prototype count must be even and positive, got {c}")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSentence {
    pub text: String,
    pub graph: DependencyGraph,
    /// Text-encoder ids of `[CLS] forms [SEP]`.
    pub ids: Vec<usize>,
    /// False when the graph is the flat fallback parse.
    pub parsed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPhrase {
    pub sentence: usize,
    /// Sorted token indices in the sentence.
    pub nodes: Vec<usize>,
    pub surface: String,
    pub features: GraphFeatures,
}

/// An email turned into encoder inputs once, reused across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEmail {
    pub email: Email,
    pub label: Option<u8>,
    pub document: DocumentSequence,
    pub document_ids: Vec<usize>,
    pub sentences: Vec<PreparedSentence>,
    pub phrases: Vec<PreparedPhrase>,
    pub subject: Option<DependencyGraph>,
    /// Whether any sentence fell back to the flat parse.
    pub degraded: bool,
}

impl PreparedEmail {
    pub fn id(&self) -> &str {
        &self.email.id
    }

    pub fn sentence_texts(&self) -> Vec<String> {
        self.sentences.iter().map(|s| s.text.clone()).collect()
    }
}

/// Token-embedding nodes standing in for the embedding lookup, used for
/// attribution.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub document: Option<Var>,
    pub sentence: Option<(usize, Var)>,
}

/// View matrices recorded on a tape: `1 x d`, `n_s x d`, `n_p x d`.
pub struct ViewVars {
    pub document: Option<Var>,
    pub sentences: Option<Var>,
    pub phrases: Option<Var>,
    pub sentence_count: usize,
    pub phrase_count: usize,
}

impl ViewVars {
    pub fn get(&self, g: Granularity) -> Option<Var> {
        match g {
            Granularity::Document => self.document,
            Granularity::Sentence => self.sentences,
            Granularity::Phrase => self.phrases,
        }
    }
}

pub struct TapeForward {
    pub views: ViewVars,
    /// `1 x 2` head output before softmax.
    pub logits: Var,
    /// Unit-to-prototype squared distances per granularity.
    pub sq_dists: [Option<Var>; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: [f64; 2],
    pub label: u8,
    pub similarity: Option<SimilarityVector>,
}

impl Prediction {
    pub fn positive(&self) -> f64 {
        self.probabilities[1]
    }
}

pub fn argmax2(p: [f64; 2]) -> u8 {
    u8::from(p[1] > p[0])
}

#[derive(Clone, Debug)]
pub struct ProtoModel {
    pub config: ModelConfig,
    store: ParamStore,
    document_encoder: Option<TextEncoder>,
    sentence_encoder: Option<TextEncoder>,
    graph_encoder: Option<GraphEncoder>,
    prototype_ids: [Option<ParamId>; 3],
    head_weight: ParamId,
    head_bias: ParamId,
    /// Bank metadata and provenance; vectors mirror the parameter store.
    pub banks: PrototypeBanks,
}

impl ProtoModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let (document_encoder, sentence_encoder) = if config.variant.text {
            (
                Some(TextEncoder::new(&mut store, "doc", enc, enc.max_document_tokens, &mut rng)),
                Some(TextEncoder::new(&mut store, "sent", enc, enc.max_sentence_tokens, &mut rng)),
            )
        } else {
            (None, None)
        };
        let graph_encoder = config.variant.graph.then(|| GraphEncoder::new(&mut store, "graph", enc, &mut rng));

        let mut banks = PrototypeBanks::default();
        let mut prototype_ids = [None; 3];
        let mut head_rows = 0;
        let mut class_rows = Vec::new();
        if config.variant.prototypes {
            for g in Granularity::ALL {
                if !config.variant.has(g) {
                    continue;
                }
                let bank = PrototypeBank::new(g, config.prototype_count(g), enc.d, config.epsilon)?;
                prototype_ids[g.index()] = Some(store.add(format!("prototypes.{}", g.letter()), bank.matrix()));
                head_rows += bank.len();
                class_rows.extend(bank.class_of.iter().copied());
                *slot_mut(&mut banks, g) = Some(bank);
            }
        } else {
            let views = usize::from(config.variant.text) * 2 + usize::from(config.variant.graph);
            head_rows = views * enc.d;
        }
        let weight = if config.variant.prototypes {
            // class-connection init: +1 to the prototype's own class, -0.5 to the other
            let mut w = Matrix::zeros(head_rows, 2);
            for (r, &c) in class_rows.iter().enumerate() {
                w.set(r, c as usize, 1.0);
                w.set(r, 1 - c as usize, -0.5);
            }
            w
        } else {
            Matrix::xavier(head_rows, 2, &mut rng)
        };
        let head_weight = store.add("head.weight", weight);
        let head_bias = store.add("head.bias", Matrix::zeros(1, 2));
        let mut model = Self {
            config,
            store,
            document_encoder,
            sentence_encoder,
            graph_encoder,
            prototype_ids,
            head_weight,
            head_bias,
            banks,
        };
        if let TextEncoderKind::PretrainedTransformer { checkpoint } = &model.config.encoder.text_encoder_kind {
            let path = checkpoint.clone();
            model.load_text_encoders_from(Path::new(&path))?;
        }
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn d(&self) -> usize {
        self.config.encoder.d
    }

    pub fn document_encoder(&self) -> Option<&TextEncoder> {
        self.document_encoder.as_ref()
    }

    pub fn sentence_encoder(&self) -> Option<&TextEncoder> {
        self.sentence_encoder.as_ref()
    }

    pub fn graph_encoder(&self) -> Option<&GraphEncoder> {
        self.graph_encoder.as_ref()
    }

    pub fn prototype_param(&self, g: Granularity) -> Option<ParamId> {
        self.prototype_ids[g.index()]
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    pub fn active_granularities(&self) -> Vec<Granularity> {
        Granularity::ALL.into_iter().filter(|g| self.config.variant.has(*g)).collect()
    }

    pub fn head(&self) -> ClassifierHead {
        let b = self.store.get(self.head_bias);
        ClassifierHead {
            weight: self.store.get(self.head_weight).clone(),
            bias: [b.get(0, 0), b.get(0, 1)],
            lambda1: self.config.lambda1,
            lambda2: self.config.lambda2,
        }
    }

    /// Copies prototype vectors from the parameter store into `banks`.
    pub fn sync_banks(&mut self) {
        for g in Granularity::ALL {
            if let (Some(id), Some(bank)) = (self.prototype_ids[g.index()], slot_mut(&mut self.banks, g).as_mut()) {
                bank.set_matrix(self.store.get(id));
            }
        }
    }

    /// Writes `banks` vectors into the parameter store.
    pub fn write_banks(&mut self) {
        for g in Granularity::ALL {
            if let (Some(id), Some(bank)) = (self.prototype_ids[g.index()], self.banks.get(g)) {
                *self.store.get_mut(id) = bank.matrix();
            }
        }
    }

    pub fn set_store(&mut self, store: ParamStore) {
        self.store = store;
        self.sync_banks();
    }

    // ---- preparation ----

    pub fn prepare(&self, email: &Email, parses: Option<&ParseMap>) -> PreparedEmail {
        let mut sentences = Vec::new();
        let mut subject = None;
        if let Some(map) = parses {
            let lo = (email.id.clone(), SentenceSlot::Subject);
            let hi = (email.id.clone(), SentenceSlot::Body(usize::MAX));
            for ((_, slot), g) in map.range(lo..=hi) {
                match slot {
                    SentenceSlot::Subject => subject = Some(g.clone()),
                    SentenceSlot::Body(_) => sentences.push((g.clone(), true)),
                }
            }
        }
        if sentences.is_empty() {
            sentences = email
                .sentences
                .iter()
                .filter_map(|s| DependencyGraph::flat(&tokenize(s)).map(|g| (g, false)))
                .collect();
        }
        let subject = subject.or_else(|| DependencyGraph::flat(&tokenize(&email.subject)));
        self.prepare_from_graphs(email.clone(), sentences, subject)
    }

    pub fn prepare_labeled(&self, email: &Email, label: u8, parses: Option<&ParseMap>) -> PreparedEmail {
        let mut p = self.prepare(email, parses);
        p.label = Some(label);
        p
    }

    /// Builds encoder inputs from explicit sentence graphs.
    pub fn prepare_from_graphs(
        &self,
        email: Email,
        sentences: Vec<(DependencyGraph, bool)>,
        subject: Option<DependencyGraph>,
    ) -> PreparedEmail {
        let enc = &self.config.encoder;
        let document = compose_document_sequence(&email, self.config.components, enc.max_document_tokens);
        let hasher = crate::encoders::TokenHasher {
            buckets: enc.hash_buckets,
            salt: enc.hash_salt,
        };
        let document_ids = document.tokens.iter().map(|t| hasher.token_id(t)).collect();
        let degraded = sentences.iter().any(|(_, parsed)| !parsed);
        let sentences: Vec<PreparedSentence> = sentences
            .into_iter()
            .map(|(graph, parsed)| {
                let seq = compose_sentence_sequence(&graph.forms(), enc.max_sentence_tokens);
                PreparedSentence {
                    text: graph.text(),
                    ids: seq.iter().map(|t| hasher.token_id(t)).collect(),
                    graph,
                    parsed,
                }
            })
            .collect();
        let mut phrases = Vec::new();
        if let Some(genc) = &self.graph_encoder {
            if self.config.components.content {
                let anchors: Vec<&str> = self.config.anchors.iter().map(String::as_str).collect();
                for (si, s) in sentences.iter().enumerate() {
                    for sg in extract_subgraphs(&s.graph, &anchors, &email.id, SentenceSlot::Body(si)) {
                        phrases.push(PreparedPhrase {
                            sentence: si,
                            features: genc.features(&sg.graph),
                            nodes: sg.nodes,
                            surface: sg.surface_text,
                        });
                    }
                }
            }
        }
        PreparedEmail {
            email,
            label: None,
            document,
            document_ids,
            sentences,
            phrases,
            subject,
            degraded,
        }
    }

    // ---- forward passes ----

    /// Records all views of one email on `tape`.
    pub fn encode_views_tape(&self, tape: &mut Tape<'_>, p: &PreparedEmail, ov: Overrides) -> ViewVars {
        let mut out = ViewVars {
            document: None,
            sentences: None,
            phrases: None,
            sentence_count: 0,
            phrase_count: 0,
        };
        if let (Some(denc), Some(senc)) = (&self.document_encoder, &self.sentence_encoder) {
            let emb = match ov.document {
                Some(v) => v,
                None => denc.embed(tape, &p.document_ids),
            };
            out.document = Some(denc.encode_embedded(tape, emb));
            if self.config.components.content && !p.sentences.is_empty() {
                let rows: Vec<Var> = p
                    .sentences
                    .iter()
                    .enumerate()
                    .map(|(i, s)| match ov.sentence {
                        Some((j, emb)) if j == i => senc.encode_embedded(tape, emb),
                        _ => senc.encode(tape, &s.ids),
                    })
                    .collect();
                out.sentence_count = rows.len();
                out.sentences = Some(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) });
            }
        }
        if let Some(genc) = &self.graph_encoder {
            if !p.phrases.is_empty() {
                let rows: Vec<Var> = p.phrases.iter().map(|ph| genc.encode(tape, &ph.features).0).collect();
                out.phrase_count = rows.len();
                out.phrases = Some(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) });
            }
        }
        out
    }

    pub fn forward_tape(&self, tape: &mut Tape<'_>, p: &PreparedEmail, ov: Overrides) -> TapeForward {
        let views = self.encode_views_tape(tape, p, ov);
        let mut sq_dists = [None; 3];
        let mut parts = Vec::new();
        if self.config.variant.prototypes {
            for g in self.active_granularities() {
                let pid = self.prototype_ids[g.index()].expect("active bank");
                let count = self.store.get(pid).rows();
                let scores = match views.get(g) {
                    Some(units) => {
                        let protos = tape.param(pid);
                        let d2 = tape.sq_dist(units, protos);
                        sq_dists[g.index()] = Some(d2);
                        let sims = tape.log_ratio(d2, self.config.epsilon);
                        match self.config.aggregation {
                            Aggregation::Mean => tape.mean_rows(sims),
                            Aggregation::Max => tape.max_rows(sims),
                        }
                    }
                    None => tape.constant(Matrix::zeros(1, count)),
                };
                let scale = match g {
                    Granularity::Document => 1.0,
                    Granularity::Sentence => self.config.lambda1,
                    Granularity::Phrase => self.config.lambda2,
                };
                parts.push(if scale == 1.0 { scores } else { tape.scale(scores, scale) });
            }
        } else {
            let d = self.d();
            for g in self.active_granularities() {
                parts.push(match views.get(g) {
                    Some(v) if g == Granularity::Document => v,
                    Some(v) => tape.mean_rows(v),
                    None => tape.constant(Matrix::zeros(1, d)),
                });
            }
        }
        let fused = if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) };
        let w = tape.param(self.head_weight);
        let b = tape.param(self.head_bias);
        let z = tape.matmul(fused, w);
        let logits = tape.add_row(z, b);
        TapeForward { views, logits, sq_dists }
    }

    pub fn encode_views(&self, p: &PreparedEmail) -> MultiViewEmbedding {
        let mut tape = Tape::new(&self.store);
        let v = self.encode_views_tape(&mut tape, p, Overrides::default());
        let rows = |var: Option<Var>| -> Vec<Vec<f64>> {
            var.map(|x| {
                let m = tape.value(x);
                (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
            })
            .unwrap_or_default()
        };
        let document = v.document.map(|x| tape.value(x).row(0).to_vec()).unwrap_or_else(|| vec![0.0; self.d()]);
        let sentences = rows(v.sentences);
        let phrases = rows(v.phrases);
        MultiViewEmbedding {
            sentence_text: if sentences.is_empty() { Vec::new() } else { p.sentence_texts() },
            phrase_source: if phrases.is_empty() {
                Vec::new()
            } else {
                p.phrases.iter().map(|ph| (ph.sentence, ph.surface.clone())).collect()
            },
            document,
            sentences,
            phrases,
        }
    }

    /// Attention of the graph encoder over a whole sentence or subject graph.
    pub fn graph_attention(&self, graph: &DependencyGraph) -> Option<AttentionRecord> {
        let genc = self.graph_encoder.as_ref()?;
        let f = genc.features(&graph.to_encodable());
        let mut tape = Tape::new(&self.store);
        genc.encode(&mut tape, &f).1
    }

    pub fn similarity_vector(&self, mv: &MultiViewEmbedding) -> Option<SimilarityVector> {
        self.config
            .variant
            .prototypes
            .then(|| granularity_scores(mv, &self.banks, self.config.aggregation))
    }

    pub fn predict_views(&self, mv: &MultiViewEmbedding) -> Prediction {
        let head = self.head();
        let (logits, similarity) = match self.similarity_vector(mv) {
            Some(sv) => (head.logits(&head.fuse(&sv)), Some(sv)),
            None => {
                let d = self.d();
                let mean = |units: &[Vec<f64>]| -> Vec<f64> {
                    let mut m = vec![0.0; d];
                    for u in units {
                        for (a, b) in m.iter_mut().zip(u) {
                            *a += b;
                        }
                    }
                    if !units.is_empty() {
                        m.iter_mut().for_each(|a| *a /= units.len() as f64);
                    }
                    m
                };
                let mut fused = Vec::new();
                if self.config.variant.text {
                    fused.extend_from_slice(&mv.document);
                    fused.extend(mean(&mv.sentences));
                }
                if self.config.variant.graph {
                    fused.extend(mean(&mv.phrases));
                }
                (head.logits(&fused), None)
            }
        };
        let probabilities = softmax2(logits);
        Prediction {
            probabilities,
            label: argmax2(probabilities),
            similarity,
        }
    }

    pub fn predict(&self, p: &PreparedEmail) -> Prediction {
        self.predict_views(&self.encode_views(p))
    }

    // ---- prototypes ----

    /// Embeds every training unit, grouped by granularity.
    pub fn unit_pool(&self, train: &[PreparedEmail], threads: usize) -> Result<[Vec<PoolUnit>; 3]> {
        let embedded = parallel_map(train, threads, |p| self.encode_views(p));
        let mut pools: [Vec<PoolUnit>; 3] = Default::default();
        for (p, mv) in train.iter().zip(embedded) {
            let label = p
                .label
                .ok_or_else(|| Error::Projection(format!("training email {} has no label", p.id())))?;
            let doc = Arc::new(mv.document.clone());
            if self.config.variant.text {
                pools[0].push(PoolUnit {
                    embedding: mv.document.clone(),
                    label,
                    email_id: p.id().to_string(),
                    unit_index: 0,
                    surface_text: p.document.tokens[1..].join(" "),
                    source_document: doc.clone(),
                });
            }
            for (i, e) in mv.sentences.into_iter().enumerate() {
                pools[1].push(PoolUnit {
                    embedding: e,
                    label,
                    email_id: p.id().to_string(),
                    unit_index: i,
                    surface_text: mv.sentence_text[i].clone(),
                    source_document: doc.clone(),
                });
            }
            for (i, e) in mv.phrases.into_iter().enumerate() {
                pools[2].push(PoolUnit {
                    embedding: e,
                    label,
                    email_id: p.id().to_string(),
                    unit_index: i,
                    surface_text: mv.phrase_source[i].1.clone(),
                    source_document: doc.clone(),
                });
            }
        }
        Ok(pools)
    }

    pub fn initialize_prototypes(&mut self, train: &[PreparedEmail], seed: u64, threads: usize) -> Result<()> {
        if !self.config.variant.prototypes {
            return Ok(());
        }
        let pools = self.unit_pool(train, threads)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1417);
        for g in self.active_granularities() {
            let bank = slot_mut(&mut self.banks, g).as_mut().expect("active bank");
            bank.initialize_from_pool(&pools[g.index()], &mut rng)?;
            bank.projection = None;
        }
        self.write_banks();
        Ok(())
    }

    /// Projects every bank onto its nearest same-class training units.
    pub fn project(&mut self, train: &[PreparedEmail], threads: usize) -> Result<()> {
        if !self.config.variant.prototypes {
            return Ok(());
        }
        self.sync_banks();
        let pools = self.unit_pool(train, threads)?;
        for g in self.active_granularities() {
            let bank = slot_mut(&mut self.banks, g).as_mut().expect("active bank");
            crate::protonet::project_prototypes(bank, &pools[g.index()])?;
        }
        self.write_banks();
        Ok(())
    }

    pub fn require_projected(&self) -> Result<()> {
        if self.config.variant.prototypes && !self.banks.all_projected() {
            return Err(Error::NotProjected);
        }
        Ok(())
    }

    // ---- checkpoints ----

    /// Short content hash of the weights and banks.
    pub fn version(&self) -> String {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        for (_, name, m) in self.store.iter() {
            h.write(name.as_bytes());
            for x in m.data() {
                h.write_u64(x.to_bits());
            }
        }
        if let Ok(banks) = serde_json::to_vec(&self.banks) {
            h.write(&banks);
        }
        format!("pm-{:016x}", h.finish())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let cfg = CheckpointConfig {
            format: CHECKPOINT_FORMAT,
            model_version: self.version(),
            model: self.config.clone(),
        };
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
        let mut f = std::io::BufWriter::new(fs::File::create(dir.join("weights.bin"))?);
        write_weights(&self.store, &mut f)?;
        f.flush()?;
        fs::write(dir.join("prototypes.json"), serde_json::to_string_pretty(&self.banks)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg: CheckpointConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        if cfg.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", cfg.format)));
        }
        let mut model_cfg = cfg.model;
        // weights come from this checkpoint, not from the text encoder's source
        model_cfg.encoder.text_encoder_kind = TextEncoderKind::TinyTrainable;
        let mut model = Self::new(model_cfg)?;
        let weights = read_weights(&mut std::io::BufReader::new(fs::File::open(dir.join("weights.bin"))?))?;
        model.assign_weights(&weights, |_| true, true)?;
        let banks: PrototypeBanks = serde_json::from_str(&fs::read_to_string(dir.join("prototypes.json"))?)?;
        for g in Granularity::ALL {
            let (a, b) = (banks.get(g), model.banks.get(g));
            if a.map(|x| (x.len(), x.dim())) != b.map(|x| (x.len(), x.dim())) {
                return Err(Error::Checkpoint(format!("{g} prototype bank does not match the configuration")));
            }
        }
        model.banks = banks;
        model.write_banks();
        // keep the original text-encoder kind in the echoed config
        model.config.encoder.text_encoder_kind = serde_json::from_str::<CheckpointConfig>(&fs::read_to_string(dir.join("config.json"))?)?
            .model
            .encoder
            .text_encoder_kind;
        if model.version() != cfg.model_version {
            return Err(Error::Checkpoint("weights do not match the recorded model version".into()));
        }
        Ok(model)
    }

    fn assign_weights(&mut self, weights: &BTreeMap<String, Matrix>, select: impl Fn(&str) -> bool, exhaustive: bool) -> Result<()> {
        let ids: Vec<(ParamId, String)> = self.store.iter().map(|(id, n, _)| (id, n.to_string())).collect();
        for (id, name) in ids {
            if !select(&name) {
                continue;
            }
            match weights.get(&name) {
                Some(m) if m.shape() == self.store.get(id).shape() => *self.store.get_mut(id) = m.clone(),
                Some(m) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        m.shape(),
                        self.store.get(id).shape()
                    )))
                }
                None if exhaustive => return Err(Error::Checkpoint(format!("parameter {name} missing from weights"))),
                None => return Err(Error::Checkpoint(format!("pretrained checkpoint lacks {name}"))),
            }
        }
        self.sync_banks();
        Ok(())
    }

    fn load_text_encoders_from(&mut self, dir: &Path) -> Result<()> {
        let cfg: CheckpointConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let (a, b) = (&cfg.model.encoder, &self.config.encoder);
        if (a.d, a.hash_buckets, a.hash_salt, a.text_layers, a.text_heads, a.ffn_dim)
            != (b.d, b.hash_buckets, b.hash_salt, b.text_layers, b.text_heads, b.ffn_dim)
        {
            return Err(Error::Checkpoint(format!(
                "text encoders in {} have a different architecture",
                dir.display()
            )));
        }
        let weights = read_weights(&mut std::io::BufReader::new(fs::File::open(dir.join("weights.bin"))?))?;
        self.assign_weights(&weights, |n| n.starts_with("doc.") || n.starts_with("sent."), false)
    }
}

fn slot_mut(banks: &mut PrototypeBanks, g: Granularity) -> &mut Option<PrototypeBank> {
    match g {
        Granularity::Document => &mut banks.document,
        Granularity::Sentence => &mut banks.sentence,
        Granularity::Phrase => &mut banks.phrase,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub format: u32,
    pub model_version: String,
    pub model: ModelConfig,
}

/// Writes named matrices as little-endian `f64` records.
pub fn write_weights<W: Write>(store: &ParamStore, w: &mut W) -> Result<()> {
    w.write_all(WEIGHTS_MAGIC)?;
    w.write_u32::<LittleEndian>(store.len() as u32)?;
    for (_, name, m) in store.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(m.rows() as u32)?;
        w.write_u32::<LittleEndian>(m.cols() as u32)?;
        for &x in m.data() {
            w.write_f64::<LittleEndian>(x)?;
        }
    }
    Ok(())
}

pub fn read_weights<R: Read>(r: &mut R) -> Result<BTreeMap<String, Matrix>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::Checkpoint("weights file has the wrong magic bytes".into()));
    }
    let n = r.read_u32::<LittleEndian>()?;
    let mut out = BTreeMap::new();
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 parameter name".into()))?;
        let rows = r.read_u32::<LittleEndian>()? as usize;
        let cols = r.read_u32::<LittleEndian>()? as usize;
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        out.insert(name, Matrix::from_vec(rows, cols, data));
    }
    Ok(out)
}

/// Order-preserving map over contiguous chunks on scoped threads.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::GraphEncoderKind;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d: 8,
                text_heads: 2,
                graph_heads: 2,
                ffn_dim: 8,
                hash_buckets: 64,
                max_document_tokens: 48,
                max_sentence_tokens: 16,
                graph_encoder_kind: GraphEncoderKind::GatStyle,
                ..EncoderConfig::default()
            },
            document_prototypes: 2,
            sentence_prototypes: 2,
            phrase_prototypes: 2,
            ..ModelConfig::default()
        }
    }

    fn email() -> Email {
        Email::new("e1", "Quarterly review", "Hi Ann. Sam eats red apples. The meeting moved to Friday. Regards.")
    }

    #[test]
    fn prepared_counts_follow_segmentation() {
        let m = ProtoModel::new(toy_config()).unwrap();
        let p = m.prepare(&email(), None);
        assert_eq!(p.sentences.len(), 4);
        assert!(p.degraded);
        // flat parses have no anchors, so each sentence yields one fallback phrase
        assert_eq!(p.phrases.len(), 4);
        let mv = m.encode_views(&p);
        assert!(mv.dims_consistent(8));
        assert_eq!(mv.sentences.len(), 4);
        assert_eq!(mv.phrases.len(), 4);
    }

    #[test]
    fn probabilities_form_a_simplex() {
        let m = ProtoModel::new(toy_config()).unwrap();
        let pr = m.predict(&m.prepare(&email(), None));
        assert!(pr.probabilities.iter().all(|p| *p > 0.0 && *p < 1.0));
        assert!((pr.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tape_and_value_paths_agree() {
        let m = ProtoModel::new(toy_config()).unwrap();
        let p = m.prepare(&email(), None);
        let mut tape = Tape::new(m.store());
        let f = m.forward_tape(&mut tape, &p, Overrides::default());
        let tape_probs = softmax2([tape.value(f.logits).get(0, 0), tape.value(f.logits).get(0, 1)]);
        let pr = m.predict(&p);
        for (a, b) in tape_probs.iter().zip(pr.probabilities) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn variants_build_and_predict() {
        for name in ["text", "graph", "text+graph", "text+prototypes", "graph+prototypes", "text+graph+prototypes"] {
            let cfg = ModelConfig {
                variant: Variant::parse(name).unwrap(),
                ..toy_config()
            };
            let m = ProtoModel::new(cfg).unwrap();
            let pr = m.predict(&m.prepare(&email(), None));
            assert!((pr.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12, "{name}");
            assert_eq!(Variant::parse(name).unwrap().name(), name);
        }
        assert!(Variant::parse("prototypes").is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut m = ProtoModel::new(toy_config()).unwrap();
        let mut train = vec![m.prepare_labeled(&email(), 0, None)];
        let mut other = email();
        other.id = "e2".into();
        other.body = "Get your free pass before the offer expires.".into();
        other.segment();
        train.push(m.prepare_labeled(&other, 1, None));
        m.initialize_prototypes(&train, 1, 1).unwrap();
        m.project(&train, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = ProtoModel::load(dir.path()).unwrap();
        assert_eq!(back.version(), m.version());
        let p = m.prepare(&email(), None);
        assert_eq!(back.predict(&p), m.predict(&p));
        assert!(back.banks.all_projected());
    }

    #[test]
    fn parallel_map_preserves_order() {
        let v: Vec<usize> = (0..17).collect();
        assert_eq!(parallel_map(&v, 4, |x| x * 2), v.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
