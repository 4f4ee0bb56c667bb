//! Text and graph encoders producing the document, sentence and phrase views.

use std::ops::Range;

use fnv::FnvHasher;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::corpus::{Email, Interests};
use crate::parsing::{tokenize, EncodableGraph};
use crate::tensor::Matrix;

pub const PAD: &str = "[PAD]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";

const PAD_ID: usize = 0;
const CLS_ID: usize = 1;
const SEP_ID: usize = 2;
const SPECIAL_COUNT: usize = 4;

/// Universal POS inventory; anything else maps to `X`.
pub const UPOS_TAGS: &[&str] = &[
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM", "PART", "PRON", "PROPN", "PUNCT",
    "SCONJ", "SYM", "VERB", "X",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum TextEncoderKind {
    /// Small self-attention encoder trained from scratch.
    TinyTrainable,
    /// Initialized from the text encoders of an existing checkpoint directory.
    PretrainedTransformer { checkpoint: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GraphEncoderKind {
    GcnStyle,
    GatStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub text_encoder_kind: TextEncoderKind,
    pub graph_encoder_kind: GraphEncoderKind,
    pub d: usize,
    pub max_document_tokens: usize,
    pub max_sentence_tokens: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub ffn_dim: usize,
    pub graph_layers: usize,
    pub graph_heads: usize,
    pub hash_buckets: usize,
    pub hash_salt: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            text_encoder_kind: TextEncoderKind::TinyTrainable,
            graph_encoder_kind: GraphEncoderKind::GatStyle,
            d: 32,
            max_document_tokens: 512,
            max_sentence_tokens: 128,
            text_layers: 2,
            text_heads: 4,
            ffn_dim: 64,
            graph_layers: 2,
            graph_heads: 4,
            hash_buckets: 2048,
            hash_salt: 0x5eed_0f_e4a11,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.d == 0 {
            return Err("d must be positive".into());
        }
        if self.text_heads == 0 || self.d % self.text_heads != 0 {
            return Err(format!("d={} not divisible by text_heads={}", self.d, self.text_heads));
        }
        if self.graph_encoder_kind == GraphEncoderKind::GatStyle && (self.graph_heads == 0 || self.d % self.graph_heads != 0) {
            return Err(format!("d={} not divisible by graph_heads={}", self.d, self.graph_heads));
        }
        if self.d < 2 {
            return Err("d must be at least 2 for split node features".into());
        }
        if self.max_document_tokens < 2 || self.max_sentence_tokens < 3 {
            return Err("token budgets too small".into());
        }
        if self.text_layers == 0 || self.graph_layers == 0 || self.hash_buckets == 0 {
            return Err("layer counts and hash buckets must be positive".into());
        }
        Ok(())
    }
}

/// Salted FNV hashing of lowercased tokens into a fixed vocabulary.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenHasher {
    pub buckets: usize,
    pub salt: u64,
}

impl TokenHasher {
    pub fn bucket(&self, token: &str) -> usize {
        use std::hash::Hasher;
        let mut h = FnvHasher::default();
        h.write_u64(self.salt);
        h.write(token.to_lowercase().as_bytes());
        (h.finish() % self.buckets as u64) as usize
    }

    /// Text-encoder vocabulary id, with the special tokens reserved up front.
    pub fn token_id(&self, token: &str) -> usize {
        match token {
            PAD => PAD_ID,
            CLS => CLS_ID,
            SEP => SEP_ID,
            t => SPECIAL_COUNT + self.bucket(t),
        }
    }

    pub fn vocab_size(&self) -> usize {
        SPECIAL_COUNT + self.buckets
    }
}

/// Which email fields enter the document sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentSet {
    pub subject: bool,
    pub organization: bool,
    pub content: bool,
    pub interests: bool,
}

impl Default for ComponentSet {
    fn default() -> Self {
        Self::ALL
    }
}

impl ComponentSet {
    pub const ALL: Self = Self {
        subject: true,
        organization: true,
        content: true,
        interests: true,
    };

    /// Parses letter codes such as `"S+C"` or `"SOCE"`.
    pub fn parse(code: &str) -> Result<Self, String> {
        let mut c = Self {
            subject: false,
            organization: false,
            content: false,
            interests: false,
        };
        for ch in code.chars().filter(|c| !matches!(c, '+' | ' ' | ',')) {
            match ch.to_ascii_uppercase() {
                'S' => c.subject = true,
                'O' => c.organization = true,
                'C' => c.content = true,
                'E' => c.interests = true,
                other => return Err(format!("unknown email component {other:?}")),
            }
        }
        Ok(c)
    }

    pub fn code(&self) -> String {
        let mut parts = Vec::new();
        for (on, s) in [(self.subject, "S"), (self.organization, "O"), (self.content, "C"), (self.interests, "E")] {
            if on {
                parts.push(s);
            }
        }
        parts.join("+")
    }
}

/// Token sequence `[CLS] S [SEP] C [SEP] O [SEP] E` with segment spans.
#[derive(Clone, Debug, PartialEq)]
pub struct DocumentSequence {
    pub tokens: Vec<String>,
    pub subject: Option<Range<usize>>,
    pub body: Option<Range<usize>>,
}

/// Composes the document sequence, omitting absent segments together with
/// their separators. Over-budget sequences lose body tokens from the end
/// first, then trailing tokens of whatever remains.
pub fn compose_document_sequence(email: &Email, components: ComponentSet, max_tokens: usize) -> DocumentSequence {
    let subject = if components.subject { tokenize(&email.subject) } else { Vec::new() };
    let mut body = if components.content { tokenize(&email.body) } else { Vec::new() };
    let org = match (&email.recipient_org, components.organization) {
        (Some(o), true) => tokenize(o),
        _ => Vec::new(),
    };
    let interests = if components.interests {
        match &email.interests {
            Interests::Absent => Vec::new(),
            Interests::Unknown => vec!["unknown".to_string()],
            Interests::Known(v) => v.iter().flat_map(|s| tokenize(s)).collect(),
        }
    } else {
        Vec::new()
    };

    let segments_len = |body_len: usize| {
        let lens = [subject.len(), body_len, org.len(), interests.len()];
        let present = lens.iter().filter(|&&l| l > 0).count();
        1 + lens.iter().sum::<usize>() + present.saturating_sub(1)
    };
    let total = segments_len(body.len());
    if total > max_tokens && !body.is_empty() {
        let excess = total - max_tokens;
        let keep = body.len().saturating_sub(excess).max(1);
        body.truncate(keep);
    }

    let mut tokens = vec![CLS.to_string()];
    let mut subject_span = None;
    let mut body_span = None;
    let mut first = true;
    for (seg, is_subject, is_body) in [
        (&subject, true, false),
        (&body, false, true),
        (&org, false, false),
        (&interests, false, false),
    ] {
        if seg.is_empty() {
            continue;
        }
        if !first {
            tokens.push(SEP.to_string());
        }
        first = false;
        let start = tokens.len();
        tokens.extend(seg.iter().cloned());
        if is_subject {
            subject_span = Some(start..tokens.len());
        }
        if is_body {
            body_span = Some(start..tokens.len());
        }
    }
    tokens.truncate(max_tokens);
    let clip = |r: Option<Range<usize>>| {
        r.and_then(|r| {
            let end = r.end.min(tokens.len());
            (r.start < end).then_some(r.start..end)
        })
    };
    DocumentSequence {
        subject: clip(subject_span),
        body: clip(body_span),
        tokens,
    }
}

/// `[CLS] tokens [SEP]`, truncated to the budget while keeping the final `[SEP]`.
pub fn compose_sentence_sequence<S: AsRef<str>>(tokens: &[S], max_tokens: usize) -> Vec<String> {
    let keep = tokens.len().min(max_tokens.saturating_sub(2));
    let mut out = Vec::with_capacity(keep + 2);
    out.push(CLS.to_string());
    out.extend(tokens[..keep].iter().map(|t| t.as_ref().to_string()));
    out.push(SEP.to_string());
    out
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
}

/// Post-norm transformer encoder over hashed tokens; the `[CLS]` row is the
/// sequence embedding.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    prefix: String,
    pub hasher: TokenHasher,
    d: usize,
    heads: usize,
    max_len: usize,
    tok_emb: ParamId,
    pos_emb: ParamId,
    ln0_g: ParamId,
    ln0_b: ParamId,
    layers: Vec<AttentionLayer>,
}

fn linear<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, rows: usize, cols: usize, rng: &mut R) -> (ParamId, ParamId) {
    let w = store.add(format!("{name}.weight"), Matrix::xavier(rows, cols, rng));
    let b = store.add(format!("{name}.bias"), Matrix::zeros(1, cols));
    (w, b)
}

fn norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    let g = store.add(format!("{name}.gain"), Matrix::filled(1, d, 1.0));
    let b = store.add(format!("{name}.bias"), Matrix::zeros(1, d));
    (g, b)
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, max_len: usize, rng: &mut R) -> Self {
        let hasher = TokenHasher {
            buckets: cfg.hash_buckets,
            salt: cfg.hash_salt,
        };
        let d = cfg.d;
        let tok_emb = store.add(format!("{prefix}.token_embedding"), Matrix::random_uniform(hasher.vocab_size(), d, 0.1, rng));
        let pos_emb = store.add(format!("{prefix}.position_embedding"), Matrix::random_uniform(max_len, d, 0.1, rng));
        let (ln0_g, ln0_b) = norm_params(store, &format!("{prefix}.embedding_norm"), d);
        let layers = (0..cfg.text_layers)
            .map(|l| {
                let p = format!("{prefix}.layer{l}");
                let (wq, bq) = linear(store, &format!("{p}.query"), d, d, rng);
                let (wk, bk) = linear(store, &format!("{p}.key"), d, d, rng);
                let (wv, bv) = linear(store, &format!("{p}.value"), d, d, rng);
                let (wo, bo) = linear(store, &format!("{p}.output"), d, d, rng);
                let (ln1_g, ln1_b) = norm_params(store, &format!("{p}.attention_norm"), d);
                let (w1, b1) = linear(store, &format!("{p}.ffn_in"), d, cfg.ffn_dim, rng);
                let (w2, b2) = linear(store, &format!("{p}.ffn_out"), cfg.ffn_dim, d, rng);
                let (ln2_g, ln2_b) = norm_params(store, &format!("{p}.ffn_norm"), d);
                AttentionLayer {
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln1_g,
                    ln1_b,
                    w1,
                    b1,
                    w2,
                    b2,
                    ln2_g,
                    ln2_b,
                }
            })
            .collect();
        Self {
            prefix: prefix.to_string(),
            hasher,
            d,
            heads: cfg.text_heads,
            max_len,
            tok_emb,
            pos_emb,
            ln0_g,
            ln0_b,
            layers,
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.hasher.token_id(t.as_ref())).collect()
    }

    /// Token-embedding layer output (`n x d`) for the given ids.
    pub fn embed(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var {
        tape.gather(self.tok_emb, ids)
    }

    /// Embedding rows of `[PAD]`, the attribution baseline.
    pub fn pad_embeddings(&self, store: &ParamStore, n: usize) -> Matrix {
        let table = store.get(self.tok_emb);
        let mut out = Matrix::zeros(n, self.d);
        for r in 0..n {
            out.row_mut(r).copy_from_slice(table.row(PAD_ID));
        }
        out
    }

    /// Encodes token ids; returns the `1 x d` `[CLS]` representation.
    pub fn encode(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Var {
        let emb = self.embed(tape, ids);
        self.encode_embedded(tape, emb)
    }

    /// Runs the encoder from token-embedding-layer outputs.
    pub fn encode_embedded(&self, tape: &mut Tape<'_>, token_embeddings: Var) -> Var {
        let hidden = self.hidden_states(tape, token_embeddings);
        tape.slice_rows(hidden, 0, 1)
    }

    pub fn hidden_states(&self, tape: &mut Tape<'_>, token_embeddings: Var) -> Var {
        let n = tape.value(token_embeddings).rows();
        assert!(n > 0 && n <= self.max_len, "sequence length {n} outside 1..={}", self.max_len);
        let positions: Vec<usize> = (0..n).collect();
        let pos = tape.gather(self.pos_emb, &positions);
        let h = tape.add(token_embeddings, pos);
        let (g, b) = (tape.param(self.ln0_g), tape.param(self.ln0_b));
        let mut h = tape.layer_norm(h, g, b);
        let dh = self.d / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for l in &self.layers {
            let q = affine(tape, h, l.wq, l.bq);
            let k = affine(tape, h, l.wk, l.bk);
            let v = affine(tape, h, l.wv, l.bv);
            let mut outs = Vec::with_capacity(self.heads);
            for hd in 0..self.heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let s = tape.matmul_t(qh, kh);
                let s = tape.scale(s, scale);
                let a = tape.softmax_rows(s);
                outs.push(tape.matmul(a, vh));
            }
            let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
            let o = affine(tape, o, l.wo, l.bo);
            let r = tape.add(h, o);
            let (g, b) = (tape.param(l.ln1_g), tape.param(l.ln1_b));
            h = tape.layer_norm(r, g, b);
            let f = affine(tape, h, l.w1, l.b1);
            let f = tape.relu(f);
            let f = affine(tape, f, l.w2, l.b2);
            let r = tape.add(h, f);
            let (g, b) = (tape.param(l.ln2_g), tape.param(l.ln2_b));
            h = tape.layer_norm(r, g, b);
        }
        h
    }
}

fn affine(tape: &mut Tape<'_>, x: Var, w: ParamId, b: ParamId) -> Var {
    let w = tape.param(w);
    let b = tape.param(b);
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

/// Per-node attention aggregated for keyphrase extraction: mean over heads
/// of the attention each node receives, final layer only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub scores: Vec<f64>,
    /// Final-layer attention matrices, one per head; row `i` is node `i`'s
    /// distribution over its neighborhood.
    #[serde(skip)]
    pub heads: Vec<Matrix>,
}

#[derive(Clone, Debug)]
struct GatLayer {
    weight: ParamId,
    bias: ParamId,
    att_src: Vec<ParamId>,
    att_dst: Vec<ParamId>,
}

#[derive(Clone, Debug)]
enum GraphLayers {
    Gcn(Vec<(ParamId, ParamId)>),
    Gat(Vec<GatLayer>),
}

/// Graph encoder over dependency (sub)graphs with mean readout.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    pub kind: GraphEncoderKind,
    hasher: TokenHasher,
    d: usize,
    heads: usize,
    pos_emb: ParamId,
    word_emb: ParamId,
    layers: GraphLayers,
}

/// Precomputed per-graph inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeatures {
    pub pos_ids: Vec<usize>,
    pub word_ids: Vec<usize>,
    /// Undirected adjacency with self loops, row-major `n x n`.
    pub mask: Vec<bool>,
    /// Symmetrically normalized adjacency with self loops.
    pub norm_adj: Matrix,
}

impl GraphFeatures {
    pub fn len(&self) -> usize {
        self.pos_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pos_ids.is_empty()
    }
}

pub fn upos_id(tag: &str) -> usize {
    UPOS_TAGS
        .iter()
        .position(|t| t.eq_ignore_ascii_case(tag))
        .unwrap_or(UPOS_TAGS.len() - 1)
}

impl GraphEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Self {
        let d = cfg.d;
        let pos_dim = d / 2;
        let word_dim = d - pos_dim;
        let hasher = TokenHasher {
            buckets: cfg.hash_buckets,
            salt: cfg.hash_salt ^ 0x9e37_79b9_7f4a_7c15,
        };
        let pos_emb = store.add(format!("{prefix}.pos_embedding"), Matrix::random_uniform(UPOS_TAGS.len(), pos_dim, 0.1, rng));
        let word_emb = store.add(format!("{prefix}.word_embedding"), Matrix::random_uniform(cfg.hash_buckets, word_dim, 0.1, rng));
        let layers = match cfg.graph_encoder_kind {
            GraphEncoderKind::GcnStyle => GraphLayers::Gcn(
                (0..cfg.graph_layers)
                    .map(|l| linear(store, &format!("{prefix}.gcn{l}"), d, d, rng))
                    .collect(),
            ),
            GraphEncoderKind::GatStyle => {
                let dh = d / cfg.graph_heads;
                GraphLayers::Gat(
                    (0..cfg.graph_layers)
                        .map(|l| {
                            let (weight, bias) = linear(store, &format!("{prefix}.gat{l}"), d, d, rng);
                            let att_src = (0..cfg.graph_heads)
                                .map(|h| store.add(format!("{prefix}.gat{l}.att_src{h}"), Matrix::xavier(dh, 1, rng)))
                                .collect();
                            let att_dst = (0..cfg.graph_heads)
                                .map(|h| store.add(format!("{prefix}.gat{l}.att_dst{h}"), Matrix::xavier(dh, 1, rng)))
                                .collect();
                            GatLayer {
                                weight,
                                bias,
                                att_src,
                                att_dst,
                            }
                        })
                        .collect(),
                )
            }
        };
        Self {
            kind: cfg.graph_encoder_kind,
            hasher,
            d,
            heads: cfg.graph_heads,
            pos_emb,
            word_emb,
            layers,
        }
    }

    pub fn features(&self, g: &EncodableGraph) -> GraphFeatures {
        let n = g.len();
        let pos_ids = g.tokens.iter().map(|t| upos_id(&t.upos)).collect();
        let word_ids = g.tokens.iter().map(|t| self.hasher.bucket(&t.form)).collect();
        let mut mask = vec![false; n * n];
        for i in 0..n {
            mask[i * n + i] = true;
        }
        for &(a, b) in &g.edges {
            mask[a * n + b] = true;
            mask[b * n + a] = true;
        }
        let deg: Vec<f64> = (0..n).map(|i| mask[i * n..(i + 1) * n].iter().filter(|&&m| m).count() as f64).collect();
        let mut norm_adj = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if mask[i * n + j] {
                    norm_adj.set(i, j, 1.0 / (deg[i] * deg[j]).sqrt());
                }
            }
        }
        GraphFeatures {
            pos_ids,
            word_ids,
            mask,
            norm_adj,
        }
    }

    /// Encodes one graph into a `1 x d` vector; the GAT variant also reports
    /// per-node attention.
    pub fn encode(&self, tape: &mut Tape<'_>, f: &GraphFeatures) -> (Var, Option<AttentionRecord>) {
        let (h, att) = self.node_states(tape, f);
        (tape.mean_rows(h), att)
    }

    pub fn node_states(&self, tape: &mut Tape<'_>, f: &GraphFeatures) -> (Var, Option<AttentionRecord>) {
        assert!(!f.is_empty(), "cannot encode an empty graph");
        let n = f.len();
        let pos = tape.gather(self.pos_emb, &f.pos_ids);
        let word = tape.gather(self.word_emb, &f.word_ids);
        let mut h = tape.concat_cols(&[pos, word]);
        match &self.layers {
            GraphLayers::Gcn(layers) => {
                let adj = tape.constant(f.norm_adj.clone());
                for (l, &(w, b)) in layers.iter().enumerate() {
                    let w = tape.param(w);
                    let b = tape.param(b);
                    let hw = tape.matmul(h, w);
                    let agg = tape.matmul(adj, hw);
                    h = tape.add_row(agg, b);
                    if l + 1 < layers.len() {
                        h = tape.relu(h);
                    }
                }
                (h, None)
            }
            GraphLayers::Gat(layers) => {
                let dh = self.d / self.heads;
                let mut record = None;
                for (l, layer) in layers.iter().enumerate() {
                    let w = tape.param(layer.weight);
                    let z = tape.matmul(h, w);
                    let mut outs = Vec::with_capacity(self.heads);
                    let mut alphas = Vec::with_capacity(self.heads);
                    for hd in 0..self.heads {
                        let zh = tape.slice_cols(z, hd * dh, dh);
                        let a_src = tape.param(layer.att_src[hd]);
                        let a_dst = tape.param(layer.att_dst[hd]);
                        let s_src = tape.matmul(zh, a_src);
                        let s_dst = tape.matmul(zh, a_dst);
                        let s_dst = tape.transpose(s_dst);
                        let e = tape.add_col_row(s_src, s_dst);
                        let e = tape.leaky_relu(e, 0.2);
                        let alpha = tape.masked_softmax_rows(e, &f.mask);
                        alphas.push(tape.value(alpha).clone());
                        outs.push(tape.matmul(alpha, zh));
                    }
                    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
                    let b = tape.param(layer.bias);
                    h = tape.add_row(cat, b);
                    if l + 1 < layers.len() {
                        h = tape.relu(h);
                    } else {
                        let mut scores = vec![0.0; n];
                        for a in &alphas {
                            for i in 0..n {
                                for (j, s) in scores.iter_mut().enumerate() {
                                    *s += a.get(i, j);
                                }
                            }
                        }
                        for s in &mut scores {
                            *s /= self.heads as f64;
                        }
                        record = Some(AttentionRecord { scores, heads: alphas });
                    }
                }
                (h, record)
            }
        }
    }
}

/// Document, sentence and phrase embeddings of one email.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiViewEmbedding {
    pub document: Vec<f64>,
    pub sentences: Vec<Vec<f64>>,
    pub phrases: Vec<Vec<f64>>,
    /// Text of each sentence, aligned with `sentences`.
    pub sentence_text: Vec<String>,
    /// `(body sentence index, surface text)` of each phrase, aligned with `phrases`.
    pub phrase_source: Vec<(usize, String)>,
}

impl MultiViewEmbedding {
    pub fn dims_consistent(&self, d: usize) -> bool {
        self.document.len() == d
            && self.sentences.iter().all(|v| v.len() == d)
            && self.phrases.iter().all(|v| v.len() == d)
            && self.sentences.len() == self.sentence_text.len()
            && self.phrases.len() == self.phrase_source.len()
    }

    pub fn is_finite(&self) -> bool {
        self.document
            .iter()
            .chain(self.sentences.iter().flatten())
            .chain(self.phrases.iter().flatten())
            .all(|x| x.is_finite())
    }
}
