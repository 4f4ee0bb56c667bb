//! Prototype-driven edit suggestions at four email positions and the batch
//! flip-ratio simulation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fmt::Write as _;
use std::hash::Hasher;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Email;
use crate::error::{Error, Result};
use crate::explain::{phrase_containing, sentence_keyphrase, subject_keyphrase};
use crate::model::{parallel_map, PreparedEmail, ProtoModel};
use crate::parsing::{detokenize, DependencyGraph};
use crate::protonet::{EditMaterial, Granularity, Provenance};
use crate::tensor::cosine;
use crate::training::mean_sd;

pub const DEFAULT_TOPIC_THRESHOLD: f64 = 0.5;
/// Integrated-gradients steps used when keyword ties need attribution.
pub const EDIT_IG_STEPS: usize = 16;

pub const DEFAULT_GREETINGS: &[&str] = &[
    "hi",
    "hello",
    "hey",
    "dear",
    "greetings",
    "good morning",
    "good afternoon",
    "good evening",
    "i hope you are doing well",
    "i hope you are well",
    "i hope this email finds you well",
    "hope you are well",
    "hope all is well",
];

pub const DEFAULT_SIGNOFFS: &[&str] = &[
    "regards",
    "best regards",
    "kind regards",
    "warm regards",
    "best wishes",
    "best",
    "cheers",
    "sincerely",
    "thanks",
    "thank you",
    "many thanks",
    "talk soon",
    "take care",
    "yours truly",
    "all the best",
];

/// Words a sign-off sentence may carry after its lexicon entry ("Best regards, Sam Lee").
const SIGNOFF_EXTRA_WORDS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EditPosition {
    Subject,
    Opening,
    Main,
    Closing,
}

impl EditPosition {
    pub const ALL: [EditPosition; 4] = [Self::Subject, Self::Opening, Self::Main, Self::Closing];

    pub fn name(self) -> &'static str {
        match self {
            Self::Subject => "subject",
            Self::Opening => "opening",
            Self::Main => "main",
            Self::Closing => "closing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown edit position {s:?}")))
    }
}

impl fmt::Display for EditPosition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Greeting and sign-off word lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lexicons {
    pub greetings: Vec<String>,
    pub signoffs: Vec<String>,
}

impl Default for Lexicons {
    fn default() -> Self {
        Self {
            greetings: DEFAULT_GREETINGS.iter().map(|s| s.to_string()).collect(),
            signoffs: DEFAULT_SIGNOFFS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !(c.is_alphanumeric() || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

impl Lexicons {
    /// One entry per line; blank lines and `#` comments are ignored.
    pub fn from_lists(greetings: &str, signoffs: &str) -> Self {
        let read = |t: &str| {
            t.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_string)
                .collect()
        };
        Self {
            greetings: read(greetings),
            signoffs: read(signoffs),
        }
    }

    fn matches(entries: &[String], sentence: &str, extra: Option<usize>) -> bool {
        let ws = words(sentence);
        entries.iter().any(|e| {
            let ew = words(e);
            !ew.is_empty() && ws.starts_with(&ew) && extra.is_none_or(|x| ws.len() <= ew.len() + x)
        })
    }

    pub fn is_greeting(&self, sentence: &str) -> bool {
        Self::matches(&self.greetings, sentence, None)
    }

    pub fn is_signoff(&self, sentence: &str) -> bool {
        Self::matches(&self.signoffs, sentence, Some(SIGNOFF_EXTRA_WORDS))
    }
}

/// Body sentence indices per position; the subject is the S field itself.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionSpans {
    pub opening: Option<usize>,
    pub main: Vec<usize>,
    pub closing: Option<usize>,
}

impl PositionSpans {
    pub fn position_of(&self, sentence: usize) -> EditPosition {
        if self.opening == Some(sentence) {
            EditPosition::Opening
        } else if self.closing == Some(sentence) {
            EditPosition::Closing
        } else {
            EditPosition::Main
        }
    }

    pub fn sentences_at(&self, position: EditPosition) -> Vec<usize> {
        match position {
            EditPosition::Subject => Vec::new(),
            EditPosition::Opening => self.opening.into_iter().collect(),
            EditPosition::Main => self.main.clone(),
            EditPosition::Closing => self.closing.into_iter().collect(),
        }
    }
}

pub fn classify_sentences<S: AsRef<str>>(sentences: &[S], lex: &Lexicons) -> PositionSpans {
    let n = sentences.len();
    if n <= 1 {
        return PositionSpans {
            opening: None,
            main: (0..n).collect(),
            closing: None,
        };
    }
    let opening = lex.is_greeting(sentences[0].as_ref()).then_some(0);
    let closing = lex.is_signoff(sentences[n - 1].as_ref()).then_some(n - 1);
    PositionSpans {
        opening,
        main: (0..n).filter(|&i| Some(i) != opening && Some(i) != closing).collect(),
        closing,
    }
}

pub fn classify_positions(email: &Email, lex: &Lexicons) -> PositionSpans {
    classify_sentences(&email.sentences, lex)
}

/// The token span an edit replaces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditTarget {
    pub position: EditPosition,
    /// Body sentence index, `None` for the subject.
    pub sentence: Option<usize>,
    pub keyword: usize,
    /// Inclusive token range.
    pub start: usize,
    pub end: usize,
}

fn phrase_range(model: &ProtoModel, graph: &DependencyGraph, keyword: usize) -> (usize, usize) {
    let nodes = phrase_containing(model, graph, keyword);
    (nodes[0], *nodes.last().expect("phrase has nodes"))
}

/// The span holding the position's top-1 keyword. Main content uses the main
/// sentence whose keyword has the highest attention.
pub fn position_target(
    model: &ProtoModel,
    p: &PreparedEmail,
    position: EditPosition,
    lex: &Lexicons,
    ig_steps: usize,
) -> Option<EditTarget> {
    if position == EditPosition::Subject {
        let graph = p.subject.as_ref()?;
        let kp = subject_keyphrase(model, p, ig_steps)?;
        let (start, end) = if graph.len() <= 2 { (0, graph.len() - 1) } else { kp.span };
        return Some(EditTarget {
            position,
            sentence: None,
            keyword: kp.keyword,
            start,
            end,
        });
    }
    let spans = classify_sentences(&p.sentence_texts(), lex);
    let mut best: Option<(f64, usize, usize)> = None;
    for i in spans.sentences_at(position) {
        let kp = sentence_keyphrase(model, p, i, ig_steps);
        let att = kp.attention.as_ref().map_or(0.0, |a| a[kp.keyword]);
        if best.is_none_or(|(b, _, _)| att > b) {
            best = Some((att, i, kp.keyword));
        }
    }
    let (_, i, keyword) = best?;
    let (start, end) = phrase_range(model, &p.sentences[i].graph, keyword);
    Some(EditTarget {
        position,
        sentence: Some(i),
        keyword,
        start,
        end,
    })
}

fn range_material(graph: &DependencyGraph, start: usize, end: usize, sentence_level: bool) -> EditMaterial {
    let nodes: Vec<usize> = (start..=end).collect();
    let forms = graph.forms();
    EditMaterial {
        text: detokenize(&forms[start..=end]),
        syntax: graph.fragment(&nodes),
        sentence_level,
    }
}

/// Replacement material a projected prototype offers, keyed by position.
/// Document prototypes offer every position of their source email; sentence
/// and phrase prototypes offer their own unit at its own position.
pub fn edit_material(
    model: &ProtoModel,
    source: &PreparedEmail,
    granularity: Granularity,
    unit_index: usize,
    lex: &Lexicons,
) -> BTreeMap<EditPosition, EditMaterial> {
    let mut out = BTreeMap::new();
    let spans = classify_sentences(&source.sentence_texts(), lex);
    match granularity {
        Granularity::Document => {
            if let (Some(g), Some(kp)) = (&source.subject, subject_keyphrase(model, source, EDIT_IG_STEPS)) {
                out.insert(EditPosition::Subject, range_material(g, kp.span.0, kp.span.1, false));
            }
            for pos in [EditPosition::Opening, EditPosition::Main, EditPosition::Closing] {
                if let Some(t) = position_target(model, source, pos, lex, EDIT_IG_STEPS) {
                    let g = &source.sentences[t.sentence.expect("body target")].graph;
                    out.insert(pos, range_material(g, t.start, t.end, false));
                }
            }
        }
        Granularity::Sentence => {
            if let Some(s) = source.sentences.get(unit_index) {
                out.insert(spans.position_of(unit_index), range_material(&s.graph, 0, s.graph.len() - 1, true));
            }
        }
        Granularity::Phrase => {
            if let Some(ph) = source.phrases.get(unit_index) {
                let g = &source.sentences[ph.sentence].graph;
                let end = *ph.nodes.last().expect("phrase has nodes");
                out.insert(spans.position_of(ph.sentence), range_material(g, ph.nodes[0], end, false));
            }
        }
    }
    out
}

/// Fills `material` on every projected prototype from its source email.
/// Sources missing from `train` keep empty material.
pub fn attach_edit_material(model: &mut ProtoModel, train: &[PreparedEmail], lex: &Lexicons) {
    let by_id: HashMap<&str, &PreparedEmail> = train.iter().map(|p| (p.id(), p)).collect();
    let mut updates = Vec::new();
    for g in model.active_granularities() {
        let Some(prov) = model.banks.get(g).and_then(|b| b.projection.as_ref()) else {
            continue;
        };
        for (i, pv) in prov.iter().enumerate() {
            if let Some(src) = by_id.get(pv.email_id.as_str()) {
                updates.push((g, i, edit_material(model, src, g, pv.unit_index, lex)));
            }
        }
    }
    for (g, i, m) in updates {
        if let Some(p) = model.banks.get_mut(g).and_then(|b| b.projection.as_mut()) {
            p[i].material = m;
        }
    }
    model.write_banks();
}

// ---- applying edits ----

/// Byte ranges of each sentence's tokens found left to right in `text`.
pub fn align_tokens(text: &str, sentences: &[Vec<&str>]) -> Option<Vec<Vec<(usize, usize)>>> {
    let mut cursor = 0;
    let mut out = Vec::with_capacity(sentences.len());
    for forms in sentences {
        let mut spans = Vec::with_capacity(forms.len());
        for f in forms {
            let at = cursor + text[cursor..].find(f)?;
            cursor = at + f.len();
            spans.push((at, cursor));
        }
        out.push(spans);
    }
    Some(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OriginalSpan {
    pub text: String,
    /// Body sentence index, `None` for the subject.
    pub sentence: Option<usize>,
    /// Inclusive token range within the sentence or subject.
    pub tokens: (usize, usize),
    /// Byte range within the subject or body field.
    pub bytes: (usize, usize),
}

/// Replaces tokens `start..=end` of a subject or body sentence, keeping
/// every other byte of the email.
pub fn apply_edit(
    model: &ProtoModel,
    p: &PreparedEmail,
    sentence: Option<usize>,
    start: usize,
    end: usize,
    material: &EditMaterial,
) -> Option<(OriginalSpan, PreparedEmail)> {
    let mut email = p.email.clone();
    let mut graphs: Vec<(DependencyGraph, bool)> = p.sentences.iter().map(|s| (s.graph.clone(), s.parsed)).collect();
    let mut subject = p.subject.clone();
    let (field, graph) = match sentence {
        None => (&mut email.subject, subject.as_mut()?),
        Some(i) => (&mut email.body, &mut graphs.get_mut(i)?.0),
    };
    if end >= graph.len() {
        return None;
    }
    let offsets = match sentence {
        None => align_tokens(field, &[graph.forms()])?.remove(0),
        Some(i) => {
            let forms: Vec<Vec<&str>> = p.sentences.iter().map(|s| s.graph.forms()).collect();
            align_tokens(field, &forms)?.swap_remove(i)
        }
    };
    let bytes = (offsets[start].0, offsets[end].1);
    let original = OriginalSpan {
        text: field[bytes.0..bytes.1].to_string(),
        sentence,
        tokens: (start, end),
        bytes,
    };
    field.replace_range(bytes.0..bytes.1, &material.text);
    *graph = graph.splice(start, end, &material.syntax);
    if let Some(i) = sentence {
        if email.sentences.len() == graphs.len() {
            email.sentences[i] = graphs[i].0.text();
        } else {
            email.segment();
        }
    }
    let mut edited = model.prepare_from_graphs(email, graphs, subject);
    edited.label = p.label;
    Some((original, edited))
}

// ---- suggestions ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuggestOptions {
    pub topic_threshold: f64,
    pub seed: u64,
    pub ig_steps: usize,
    /// Refuse emails the model already predicts positive.
    pub require_negative: bool,
    pub lexicons: Lexicons,
}

impl Default for SuggestOptions {
    fn default() -> Self {
        Self {
            topic_threshold: DEFAULT_TOPIC_THRESHOLD,
            seed: 0,
            ig_steps: EDIT_IG_STEPS,
            require_negative: false,
            lexicons: Lexicons::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSuggestion {
    pub position: EditPosition,
    pub original: OriginalSpan,
    pub replacement: String,
    pub granularity: Granularity,
    pub prototype: usize,
    pub provenance: Provenance,
    pub before: f64,
    pub after: f64,
    pub after_label: u8,
    pub topic_match: f64,
    /// False when the prototype was drawn at random for lack of a topic match.
    pub topic_matched: bool,
    pub edited_subject: String,
    pub edited_body: String,
}

fn position_seed(seed: u64, id: &str, position: EditPosition) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(id.as_bytes());
    h.write(position.name().as_bytes());
    seed ^ h.finish()
}

/// Positive prototypes offering material at `position`, with their topic
/// match against the input document, or one random candidate when none match.
fn candidates(
    model: &ProtoModel,
    document: &[f64],
    position: EditPosition,
    opts: &SuggestOptions,
    email_id: &str,
) -> Result<Vec<(Granularity, usize, f64, bool)>> {
    let mut any_positive = false;
    let mut all = Vec::new();
    for g in model.active_granularities() {
        let bank = model.banks.get(g).expect("active bank");
        let prov = bank.projection.as_ref().ok_or(Error::NotProjected)?;
        for i in bank.of_class(1) {
            any_positive = true;
            if prov[i].material.contains_key(&position) {
                all.push((g, i, cosine(&prov[i].source_document, document)));
            }
        }
    }
    if !any_positive {
        return Err(Error::NoPositivePrototypes);
    }
    let matched: Vec<_> = all
        .iter()
        .filter(|c| c.2 >= opts.topic_threshold)
        .map(|&(g, i, s)| (g, i, s, true))
        .collect();
    if !matched.is_empty() || all.is_empty() {
        return Ok(matched);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(position_seed(opts.seed, email_id, position));
    let (g, i, s) = all[rng.random_range(0..all.len())];
    Ok(vec![(g, i, s, false)])
}

/// Substitutes the position's top-1 keyphrase span with positive prototypes'
/// material, re-predicts, and sorts by after-probability descending.
pub fn suggest_edits(
    model: &ProtoModel,
    p: &PreparedEmail,
    position: EditPosition,
    opts: &SuggestOptions,
) -> Result<Vec<EditSuggestion>> {
    if !model.config.variant.prototypes {
        return Err(Error::Config("edit suggestions need a model with prototype banks".into()));
    }
    model.require_projected()?;
    let mv = model.encode_views(p);
    let before = model.predict_views(&mv);
    if opts.require_negative && before.label == 1 {
        return Err(Error::Rejected {
            location: p.id().to_string(),
            message: "email is already predicted positive".into(),
        });
    }
    let cands = candidates(model, &mv.document, position, opts, p.id())?;
    let Some(target) = position_target(model, p, position, &opts.lexicons, opts.ig_steps) else {
        return Ok(Vec::new());
    };
    let mut seen = Vec::new();
    let mut out = Vec::new();
    for (g, i, topic, matched) in cands {
        let prov = &model.banks.get(g).expect("active bank").projection.as_ref().expect("projected")[i];
        let material = &prov.material[&position];
        let (start, end) = match target.sentence {
            Some(s) if material.sentence_level => (0, p.sentences[s].graph.len() - 1),
            _ => (target.start, target.end),
        };
        if seen.contains(&(start, end, material.text.clone())) {
            continue;
        }
        seen.push((start, end, material.text.clone()));
        let Some((original, edited)) = apply_edit(model, p, target.sentence, start, end, material) else {
            tracing::debug!(email = p.id(), %position, "span could not be aligned to the email text");
            continue;
        };
        if original.text == material.text {
            continue;
        }
        let after = model.predict(&edited);
        let mut provenance = prov.clone();
        provenance.material.clear();
        out.push(EditSuggestion {
            position,
            original,
            replacement: material.text.clone(),
            granularity: g,
            prototype: i,
            provenance,
            before: before.probabilities[1],
            after: after.probabilities[1],
            after_label: after.label,
            topic_match: topic,
            topic_matched: matched,
            edited_subject: edited.email.subject,
            edited_body: edited.email.body,
        });
    }
    out.sort_by(|a, b| {
        b.after
            .total_cmp(&a.after)
            .then(a.granularity.cmp(&b.granularity))
            .then(a.prototype.cmp(&b.prototype))
    });
    Ok(out)
}

// ---- simulation ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionOutcome {
    pub position: EditPosition,
    /// Predicted negatives considered.
    pub negatives: usize,
    /// Negatives that received at least one applicable edit.
    pub edited: usize,
    pub flipped: usize,
    /// `flipped / negatives`; `None` when there are no negatives.
    pub ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSimulationRun {
    pub seed: u64,
    pub outcomes: Vec<PositionOutcome>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionSummary {
    pub position: EditPosition,
    pub negatives: usize,
    pub edited: usize,
    pub flipped: usize,
    pub mean: Option<f64>,
    pub sd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSimulationReport {
    pub corpus: String,
    pub runs: Vec<EditSimulationRun>,
    pub summary: Vec<PositionSummary>,
    /// Set when some run had no predicted negatives to edit.
    pub zero_denominator: bool,
}

impl EditSimulationReport {
    pub fn from_runs(corpus: impl Into<String>, runs: Vec<EditSimulationRun>) -> Self {
        let mut positions: Vec<EditPosition> = runs.iter().flat_map(|r| r.outcomes.iter().map(|o| o.position)).collect();
        positions.sort();
        positions.dedup();
        let summary = positions
            .into_iter()
            .map(|pos| {
                let outs: Vec<&PositionOutcome> =
                    runs.iter().flat_map(|r| r.outcomes.iter().filter(|o| o.position == pos)).collect();
                let ratios: Vec<f64> = outs.iter().filter_map(|o| o.ratio).collect();
                let (mean, sd) = if ratios.is_empty() {
                    (None, None)
                } else {
                    let (m, s) = mean_sd(&ratios);
                    (Some(m), Some(s))
                };
                PositionSummary {
                    position: pos,
                    negatives: outs.iter().map(|o| o.negatives).sum(),
                    edited: outs.iter().map(|o| o.edited).sum(),
                    flipped: outs.iter().map(|o| o.flipped).sum(),
                    mean,
                    sd,
                }
            })
            .collect();
        let zero_denominator = runs.is_empty() || runs.iter().any(|r| r.outcomes.iter().any(|o| o.negatives == 0));
        Self {
            corpus: corpus.into(),
            runs,
            summary,
            zero_denominator,
        }
    }

    /// Pools runs from separately trained models.
    pub fn merge(corpus: impl Into<String>, reports: Vec<EditSimulationReport>) -> Self {
        Self::from_runs(corpus, reports.into_iter().flat_map(|r| r.runs).collect())
    }

    pub fn summary_for(&self, position: EditPosition) -> Option<&PositionSummary> {
        self.summary.iter().find(|s| s.position == position)
    }

    /// One row per position; ratios in percent.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "corpus\tposition\tnegatives\tedited\tflipped\tflip ratio (%)");
        for r in &self.summary {
            let ratio = match (r.mean, r.sd) {
                (Some(m), Some(sd)) => format!("{:.1} ± {:.1}", 100.0 * m, 100.0 * sd),
                _ => "n/a (no predicted negatives)".to_string(),
            };
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}\t{}", self.corpus, r.position, r.negatives, r.edited, r.flipped, ratio);
        }
        if self.zero_denominator {
            let _ = writeln!(s, "note: at least one run had zero predicted negatives");
        }
        s
    }
}

/// For each seed and position, applies the top suggestion to every
/// predicted-negative email and counts flips to positive.
pub fn simulate_edits(
    model: &ProtoModel,
    emails: &[PreparedEmail],
    positions: &[EditPosition],
    seeds: &[u64],
    opts: &SuggestOptions,
    threads: usize,
) -> Result<Vec<EditSimulationRun>> {
    model.require_projected()?;
    let labels = parallel_map(emails, threads, |p| model.predict(p).label);
    let negatives: Vec<&PreparedEmail> = emails.iter().zip(&labels).filter(|(_, &l)| l == 0).map(|(p, _)| p).collect();
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let o = SuggestOptions { seed, ..opts.clone() };
        let mut outcomes = Vec::with_capacity(positions.len());
        for &position in positions {
            let results = parallel_map(&negatives, threads, |p| {
                suggest_edits(model, p, position, &o).map(|s| s.first().map(|top| top.after_label))
            });
            let (mut edited, mut flipped) = (0, 0);
            for r in results {
                if let Some(label) = r? {
                    edited += 1;
                    flipped += usize::from(label == 1);
                }
            }
            outcomes.push(PositionOutcome {
                position,
                negatives: negatives.len(),
                edited,
                flipped,
                ratio: (!negatives.is_empty()).then(|| flipped as f64 / negatives.len() as f64),
            });
        }
        runs.push(EditSimulationRun { seed, outcomes });
    }
    Ok(runs)
}
