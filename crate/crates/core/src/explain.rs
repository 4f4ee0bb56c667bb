//! Prototype-based explanations, integrated-gradients attribution and
//! attention keyphrases.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::model::{Overrides, PreparedEmail, ProtoModel};
use crate::parsing::{base_relation, detokenize, extract_subgraphs, DependencyGraph, SentenceSlot};
use crate::protonet::{similarity_from_sq_distance, Granularity, Provenance};
use crate::tensor::{squared_distance, Matrix};

pub const DEFAULT_IG_STEPS: usize = 50;

/// Dependents of a noun that join it in a keyphrase.
pub const KEYPHRASE_RELATIONS: &[&str] = &["amod", "compound", "det", "nummod"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeCitation {
    pub prototype: usize,
    pub class: u8,
    /// The model's similarity-vector entry for this prototype.
    pub similarity: f64,
    /// Similarity to the best matching unit; equals `similarity` for documents.
    pub best_unit_similarity: f64,
    /// Fused input times the head weight of the predicted class.
    pub contribution: f64,
    pub matched_unit: usize,
    pub matched_text: String,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationReport {
    pub email_id: String,
    pub model_version: String,
    pub predicted_label: u8,
    pub probability: f64,
    pub positive_probability: f64,
    pub top_n: usize,
    pub prototypes: BTreeMap<Granularity, Vec<PrototypeCitation>>,
}

fn class_name(c: u8) -> &'static str {
    if c == 1 {
        "positive"
    } else {
        "negative"
    }
}

impl ExplanationReport {
    /// Plain-text rendering: input, prediction, then one table per granularity.
    pub fn to_text(&self, subject: &str, sentences: &[String]) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "email: {}", self.email_id);
        let _ = writeln!(s, "subject: {subject}");
        for (i, t) in sentences.iter().enumerate() {
            let _ = writeln!(s, "S{}: {t}", i + 1);
        }
        let _ = writeln!(
            s,
            "prediction: {} (p={:.4})   model {}",
            class_name(self.predicted_label),
            self.probability,
            self.model_version
        );
        for (g, rows) in &self.prototypes {
            let _ = writeln!(s, "\n[{g} prototypes]");
            let _ = writeln!(s, "rank\tproto\tlabel\tscore\tbest_unit\tcontribution\tmatched\tprototype_source");
            for (rank, c) in rows.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{}\t{}{}\t{}\t{:.4}\t{:.4}\t{:+.4}\t{}\t{} ({}#{})",
                    rank + 1,
                    g.letter(),
                    c.prototype,
                    class_name(c.class),
                    c.similarity,
                    c.best_unit_similarity,
                    c.contribution,
                    c.matched_text,
                    c.provenance.surface_text,
                    c.provenance.email_id,
                    c.provenance.unit_index
                );
            }
        }
        s
    }
}

/// Ranks document prototypes by their score and sentence/phrase prototypes
/// by their best matching unit.
pub fn explain(model: &ProtoModel, p: &PreparedEmail, top_n: usize) -> Result<ExplanationReport> {
    if !model.config.variant.prototypes {
        return Err(Error::Config("explanations need a model with prototype banks".into()));
    }
    model.require_projected()?;
    let mv = model.encode_views(p);
    let pred = model.predict_views(&mv);
    let sv = pred.similarity.clone().expect("prototype model yields similarities");
    let head = model.head();
    let fused = head.fuse(&sv);
    let mut offset = 0;
    let mut prototypes = BTreeMap::new();
    for g in model.active_granularities() {
        let bank = model.banks.get(g).expect("active bank");
        let provenance = bank.projection.as_ref().ok_or(Error::NotProjected)?;
        let units: Vec<(&[f64], String)> = match g {
            Granularity::Document => vec![(mv.document.as_slice(), detokenize(&p.document.tokens[1..]))],
            Granularity::Sentence => mv.sentences.iter().map(Vec::as_slice).zip(mv.sentence_text.iter().cloned()).collect(),
            Granularity::Phrase => mv
                .phrases
                .iter()
                .map(Vec::as_slice)
                .zip(mv.phrase_source.iter().map(|(_, t)| t.clone()))
                .collect(),
        };
        let mut rows: Vec<PrototypeCitation> = (0..bank.len())
            .map(|i| {
                let (best_unit, best) = units
                    .iter()
                    .enumerate()
                    .map(|(u, (e, _))| (u, similarity_from_sq_distance(squared_distance(&bank.vectors[i], e), bank.epsilon)))
                    .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc });
                let similarity = sv.get(g)[i];
                PrototypeCitation {
                    prototype: i,
                    class: bank.class_of[i],
                    similarity,
                    best_unit_similarity: if g == Granularity::Document { similarity } else { best.max(0.0) },
                    contribution: fused[offset + i] * head.weight.get(offset + i, pred.label as usize),
                    matched_unit: best_unit,
                    matched_text: units.get(best_unit).map(|u| u.1.clone()).unwrap_or_default(),
                    provenance: provenance[i].clone(),
                }
            })
            .collect();
        rows.sort_by(|a, b| b.best_unit_similarity.total_cmp(&a.best_unit_similarity).then(a.prototype.cmp(&b.prototype)));
        rows.truncate(top_n);
        prototypes.insert(g, rows);
        offset += bank.len();
    }
    Ok(ExplanationReport {
        email_id: p.id().to_string(),
        model_version: model.version(),
        predicted_label: pred.label,
        probability: pred.probabilities[pred.label as usize],
        positive_probability: pred.probabilities[1],
        top_n,
        prototypes,
    })
}

// ---- integrated gradients ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub tokens: Vec<String>,
    pub scores: Vec<f64>,
    pub baseline: String,
    pub steps: usize,
    pub input_score: f64,
    pub baseline_score: f64,
}

impl Attribution {
    /// `|sum of attributions - (f(x) - f(baseline))|`.
    pub fn completeness_gap(&self) -> f64 {
        (self.scores.iter().sum::<f64>() - (self.input_score - self.baseline_score)).abs()
    }
}

/// Per-row attributions `(x - x') * mean gradient` over the midpoint
/// Riemann grid of the straight path, summed over columns. `f` returns the
/// score and its gradient at a point. Also returns `f(x)` and `f(x')`.
pub fn integrated_gradients(
    mut f: impl FnMut(&Matrix) -> (f64, Matrix),
    input: &Matrix,
    baseline: &Matrix,
    steps: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs at least one step".into()));
    }
    if input.shape() != baseline.shape() {
        return Err(Error::DimensionMismatch {
            expected: input.len(),
            found: baseline.len(),
        });
    }
    let mut delta = input.clone();
    let mut neg = baseline.clone();
    neg.scale_assign(-1.0);
    delta.add_assign(&neg);
    let mut total = Matrix::zeros(input.rows(), input.cols());
    for k in 0..steps {
        let a = (k as f64 + 0.5) / steps as f64;
        let mut point = baseline.clone();
        let mut step = delta.clone();
        step.scale_assign(a);
        point.add_assign(&step);
        let (_, g) = f(&point);
        if !g.is_finite() {
            return Err(Error::NonFinite("gradient along the attribution path".into()));
        }
        total.add_assign(&g);
    }
    total.scale_assign(1.0 / steps as f64);
    let scores = (0..input.rows())
        .map(|r| delta.row(r).iter().zip(total.row(r)).map(|(d, g)| d * g).sum())
        .collect();
    let (fx, _) = f(input);
    let (fb, _) = f(baseline);
    Ok((scores, fx, fb))
}

/// Positive-class logit and its gradient with respect to substituted token embeddings.
fn logit_and_grad(model: &ProtoModel, p: &PreparedEmail, sentence: Option<usize>, emb: &Matrix) -> (f64, Matrix) {
    let mut tape = Tape::new(model.store());
    let v = tape.constant(emb.clone());
    let ov = match sentence {
        None => Overrides {
            document: Some(v),
            sentence: None,
        },
        Some(i) => Overrides {
            document: None,
            sentence: Some((i, v)),
        },
    };
    let f = model.forward_tape(&mut tape, p, ov);
    let logit = tape.pick(f.logits, &[1]);
    let back = tape.backward(logit);
    let g = back.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(emb.rows(), emb.cols()));
    (tape.scalar(logit), g)
}

fn attribution_for(model: &ProtoModel, p: &PreparedEmail, sentence: Option<usize>, steps: usize) -> Result<Attribution> {
    let (enc, ids, tokens) = match sentence {
        None => (
            model.document_encoder(),
            p.document_ids.clone(),
            p.document.tokens.clone(),
        ),
        Some(i) => {
            let s = p
                .sentences
                .get(i)
                .ok_or_else(|| Error::EmptyInput(format!("sentence {i} of email {}", p.id())))?;
            let mut toks = vec![crate::encoders::CLS.to_string()];
            toks.extend(s.graph.forms().iter().take(s.ids.len().saturating_sub(2)).map(|t| t.to_string()));
            toks.push(crate::encoders::SEP.to_string());
            (model.sentence_encoder(), s.ids.clone(), toks)
        }
    };
    let enc = enc.ok_or_else(|| Error::Config("attribution needs the text encoders".into()))?;
    if sentence.is_some() && !model.config.components.content {
        return Err(Error::Config("sentence attribution needs the content component".into()));
    }
    let input = {
        let mut tape = Tape::new(model.store());
        let v = enc.embed(&mut tape, &ids);
        tape.value(v).clone()
    };
    let baseline = enc.pad_embeddings(model.store(), ids.len());
    let (scores, input_score, baseline_score) =
        integrated_gradients(|x| logit_and_grad(model, p, sentence, x), &input, &baseline, steps)?;
    Ok(Attribution {
        tokens,
        scores,
        baseline: "[PAD] embedding at every position".into(),
        steps,
        input_score,
        baseline_score,
    })
}

/// Attribution of the positive-class logit to document-sequence tokens.
pub fn document_attribution(model: &ProtoModel, p: &PreparedEmail, steps: usize) -> Result<Attribution> {
    attribution_for(model, p, None, steps)
}

/// Attribution to the tokens of one sentence (`[CLS]` and `[SEP]` included).
pub fn sentence_attribution(model: &ProtoModel, p: &PreparedEmail, sentence: usize, steps: usize) -> Result<Attribution> {
    attribution_for(model, p, Some(sentence), steps)
}

// ---- keyphrases ----

/// True when keyword selection cannot be settled by attention alone.
pub fn needs_attribution(graph: &DependencyGraph, attention: Option<&[f64]>) -> bool {
    let nouns: Vec<usize> = (0..graph.len()).filter(|&i| graph.tokens()[i].is_noun()).collect();
    let Some(att) = attention else { return true };
    if nouns.is_empty() {
        return true;
    }
    let best = nouns.iter().map(|&i| att[i]).fold(f64::NEG_INFINITY, f64::max);
    nouns.iter().filter(|&&i| att[i] == best).count() > 1
}

fn argmax_by(candidates: &[usize], score: impl Fn(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &i in candidates {
        let s = score(i);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Highest-attention noun, ties broken by attribution then index. Without
/// nouns, the highest-attribution token of any part of speech.
pub fn select_keyword(graph: &DependencyGraph, attention: Option<&[f64]>, attribution: Option<&[f64]>) -> usize {
    let nouns: Vec<usize> = (0..graph.len()).filter(|&i| graph.tokens()[i].is_noun()).collect();
    let attr = |i: usize| attribution.and_then(|a| a.get(i).copied()).unwrap_or(0.0);
    if nouns.is_empty() {
        let all: Vec<usize> = (0..graph.len()).collect();
        return match (attribution, attention) {
            (Some(_), _) => argmax_by(&all, attr),
            (None, Some(att)) => argmax_by(&all, |i| att[i]),
            (None, None) => Some(0),
        }
        .unwrap_or(0);
    }
    let Some(att) = attention else {
        return argmax_by(&nouns, attr).unwrap_or(nouns[0]);
    };
    let best = nouns.iter().map(|&i| att[i]).fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = nouns.iter().copied().filter(|&i| att[i] == best).collect();
    argmax_by(&tied, attr).unwrap_or(tied[0])
}

/// The keyword with its adjacent modifier dependents, as a contiguous
/// inclusive token span.
pub fn keyphrase_span(graph: &DependencyGraph, keyword: usize) -> (usize, usize) {
    let related = |i: usize| {
        graph.head(i) == Some(keyword) && KEYPHRASE_RELATIONS.contains(&base_relation(graph.relation(i)))
    };
    let (mut start, mut end) = (keyword, keyword);
    while start > 0 && related(start - 1) {
        start -= 1;
    }
    while end + 1 < graph.len() && related(end + 1) {
        end += 1;
    }
    (start, end)
}

/// Keyword and keyphrase of one sentence from attention, with optional
/// attribution for ties and the no-noun fallback.
pub fn attention_keyphrases(
    graph: &DependencyGraph,
    attention: Option<&[f64]>,
    attribution: Option<&[f64]>,
) -> (usize, (usize, usize)) {
    let k = select_keyword(graph, attention, attribution);
    (k, keyphrase_span(graph, k))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keyphrase {
    /// Body sentence index, or `None` for the subject.
    pub sentence: Option<usize>,
    pub keyword: usize,
    pub keyword_text: String,
    pub span: (usize, usize),
    pub text: String,
    pub attention: Option<Vec<f64>>,
    pub used_attribution: bool,
}

fn build_keyphrase(
    graph: &DependencyGraph,
    sentence: Option<usize>,
    attention: Option<Vec<f64>>,
    attribution: impl FnOnce() -> Option<Vec<f64>>,
) -> Keyphrase {
    let needs = needs_attribution(graph, attention.as_deref());
    let attr = if needs { attribution() } else { None };
    let (k, span) = attention_keyphrases(graph, attention.as_deref(), attr.as_deref());
    let forms = graph.forms();
    Keyphrase {
        sentence,
        keyword: k,
        keyword_text: forms[k].to_string(),
        span,
        text: detokenize(&forms[span.0..=span.1]),
        attention,
        used_attribution: attr.is_some(),
    }
}

/// Top-1 keyword and keyphrase of a body sentence.
pub fn sentence_keyphrase(model: &ProtoModel, p: &PreparedEmail, sentence: usize, ig_steps: usize) -> Keyphrase {
    let graph = &p.sentences[sentence].graph;
    let attention = model.graph_attention(graph).map(|a| a.scores);
    build_keyphrase(graph, Some(sentence), attention, || {
        let a = sentence_attribution(model, p, sentence, ig_steps).ok()?;
        // drop [CLS]; tokens past the budget get no attribution
        let mut scores: Vec<f64> = a.scores.iter().skip(1).take(a.scores.len().saturating_sub(2)).copied().collect();
        scores.resize(graph.len(), 0.0);
        Some(scores)
    })
}

/// Top-1 keyword and keyphrase of the subject, using document attribution.
pub fn subject_keyphrase(model: &ProtoModel, p: &PreparedEmail, ig_steps: usize) -> Option<Keyphrase> {
    let graph = p.subject.as_ref()?;
    let attention = model.graph_attention(graph).map(|a| a.scores);
    Some(build_keyphrase(graph, None, attention, || {
        let span = p.document.subject.clone()?;
        if span.len() != graph.len() {
            return None;
        }
        let a = document_attribution(model, p, ig_steps).ok()?;
        Some(a.scores[span].to_vec())
    }))
}

/// Smallest phrase subgraph of the sentence containing `token`, as sorted nodes.
pub fn phrase_containing(model: &ProtoModel, graph: &DependencyGraph, token: usize) -> Vec<usize> {
    let anchors: Vec<&str> = model.config.anchors.iter().map(String::as_str).collect();
    extract_subgraphs(graph, &anchors, "", SentenceSlot::Body(0))
        .into_iter()
        .map(|s| s.nodes)
        .filter(|n| n.contains(&token))
        .min_by_key(|n| n.len())
        .unwrap_or_else(|| {
            let (a, b) = keyphrase_span(graph, token);
            (a..=b).collect()
        })
}
