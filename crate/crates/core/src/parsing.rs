//! Dependency parses, sentence segmentation and phrase-subgraph extraction.
//!
//! Parses are produced offline and read from a CoNLL-U subset: tab-separated
//! `ID FORM UPOS HEAD DEPREL` rows (full ten-column CoNLL-U is accepted too),
//! blank-line separated blocks, and per-block `# email_id = …` /
//! `# sent_index = …` comments. `sent_index` is a zero-based body sentence
//! index or the literal `subject`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, ParseError};

/// Relations anchoring phrase subgraphs when none are configured.
pub const DEFAULT_ANCHORS: &[&str] = &["nsubj", "dobj"];

/// Lowercased abbreviations that never end a sentence.
pub const ABBREVIATIONS: &[&str] = &[
    "e.g.", "i.e.", "etc.", "vs.", "mr.", "mrs.", "ms.", "dr.", "prof.", "inc.", "ltd.", "co.",
    "corp.", "jr.", "sr.", "st.", "no.", "approx.", "dept.", "est.", "jan.", "feb.", "mar.",
    "apr.", "jun.", "jul.", "aug.", "sep.", "sept.", "oct.", "nov.", "dec.", "a.m.", "p.m.",
    "u.s.",
];

static TOKEN_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\w+(?:['’.&-]\w+)*|[^\w\s]").expect("token regex"));

/// Word/punctuation tokenizer shared by the text encoder and the parse shim.
pub fn tokenize(text: &str) -> Vec<String> {
    TOKEN_RE.find_iter(text).map(|m| m.as_str().to_string()).collect()
}

/// Joins tokens with single spaces, attaching closing punctuation to the
/// preceding token.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let attach = matches!(t, "." | "," | "!" | "?" | ";" | ":" | ")" | "'s" | "%");
        if i > 0 && !attach && !out.ends_with('(') {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Which sentence of an email a parse belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SentenceSlot {
    Subject,
    Body(usize),
}

impl fmt::Display for SentenceSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SentenceSlot::Subject => f.write_str("subject"),
            SentenceSlot::Body(i) => write!(f, "{i}"),
        }
    }
}

impl FromStr for SentenceSlot {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("subject") {
            return Ok(SentenceSlot::Subject);
        }
        s.parse::<usize>()
            .map(SentenceSlot::Body)
            .map_err(|_| format!("invalid sent_index {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub form: String,
    pub upos: String,
}

impl Token {
    pub fn new(form: impl Into<String>, upos: impl Into<String>) -> Self {
        Self {
            form: form.into(),
            upos: upos.into(),
        }
    }

    pub fn is_noun(&self) -> bool {
        matches!(self.upos.as_str(), "NOUN" | "PROPN")
    }
}

/// A typed dependency edge `(dependent, relation, governor)` over token indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub dependent: usize,
    pub relation: String,
    pub governor: usize,
}

/// Base label of a relation, e.g. `det` for `det:poss`.
pub fn base_relation(rel: &str) -> &str {
    rel.split(':').next().unwrap_or(rel)
}

/// A single-rooted dependency tree over one sentence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DependencyGraph {
    tokens: Vec<Token>,
    /// Governor of each token; `None` only for the root.
    heads: Vec<Option<usize>>,
    relations: Vec<String>,
    root: usize,
}

impl DependencyGraph {
    /// Builds a graph from CoNLL-style heads (1-based, `0` meaning root).
    pub fn from_conll(tokens: Vec<Token>, heads: &[usize], relations: Vec<String>) -> Result<Self, ParseError> {
        let n = tokens.len();
        if n == 0 {
            return Err(ParseError::Invalid("empty sentence".into()));
        }
        if heads.len() != n || relations.len() != n {
            return Err(ParseError::Invalid("column count mismatch".into()));
        }
        let mut root = None;
        let mut gov = Vec::with_capacity(n);
        for (i, (&h, rel)) in heads.iter().zip(&relations).enumerate() {
            if h == 0 || rel.eq_ignore_ascii_case("root") {
                if h != 0 || !rel.eq_ignore_ascii_case("root") {
                    return Err(ParseError::Invalid(format!(
                        "token {} has head {h} with relation {rel:?}",
                        i + 1
                    )));
                }
                if root.replace(i).is_some() {
                    return Err(ParseError::Invalid("multiple root tokens".into()));
                }
                gov.push(None);
            } else {
                if h > n {
                    return Err(ParseError::Invalid(format!("token {} has out-of-range head {h}", i + 1)));
                }
                if h == i + 1 {
                    return Err(ParseError::Invalid(format!("token {} governs itself", i + 1)));
                }
                gov.push(Some(h - 1));
            }
        }
        let root = root.ok_or_else(|| ParseError::Invalid("no root token".into()))?;
        let g = Self {
            tokens,
            heads: gov,
            relations,
            root,
        };
        g.check_acyclic()?;
        Ok(g)
    }

    fn check_acyclic(&self) -> Result<(), ParseError> {
        for start in 0..self.tokens.len() {
            let mut cur = start;
            let mut steps = 0;
            while let Some(h) = self.heads[cur] {
                cur = h;
                steps += 1;
                if steps > self.tokens.len() {
                    return Err(ParseError::Invalid(format!("cycle through token {}", start + 1)));
                }
            }
        }
        Ok(())
    }

    /// Parse shim for unparsed text: the first token is the root and every
    /// other token attaches to it with the generic `dep` relation.
    pub fn flat<S: AsRef<str>>(forms: &[S]) -> Option<Self> {
        if forms.is_empty() {
            return None;
        }
        let tokens = forms.iter().map(|f| Token::new(f.as_ref(), "X")).collect();
        let heads: Vec<usize> = (0..forms.len()).map(|i| if i == 0 { 0 } else { 1 }).collect();
        let rels = (0..forms.len())
            .map(|i| if i == 0 { "root".to_string() } else { "dep".to_string() })
            .collect();
        Self::from_conll(tokens, &heads, rels).ok()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn head(&self, i: usize) -> Option<usize> {
        self.heads[i]
    }

    pub fn relation(&self, i: usize) -> &str {
        &self.relations[i]
    }

    pub fn forms(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.form.as_str()).collect()
    }

    pub fn edges(&self) -> Vec<Edge> {
        (0..self.tokens.len())
            .filter_map(|i| {
                self.heads[i].map(|g| Edge {
                    dependent: i,
                    relation: self.relations[i].clone(),
                    governor: g,
                })
            })
            .collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.tokens.len()).filter(|&c| self.heads[c] == Some(i)).collect()
    }

    /// `i` together with all its transitive dependents, in sentence order.
    pub fn subtree(&self, i: usize) -> Vec<usize> {
        let mut out = BTreeSet::new();
        let mut stack = vec![i];
        while let Some(n) = stack.pop() {
            if out.insert(n) {
                stack.extend(self.children(n));
            }
        }
        out.into_iter().collect()
    }

    pub fn text(&self) -> String {
        detokenize(&self.forms())
    }

    /// Nodes and undirected adjacency for a graph encoder.
    pub fn to_encodable(&self) -> EncodableGraph {
        let nodes: Vec<usize> = (0..self.tokens.len()).collect();
        EncodableGraph::induced(self, &nodes)
    }

    /// Writes the graph as a CoNLL-U subset block.
    pub fn write_conll(&self, email_id: &str, slot: SentenceSlot, out: &mut String) {
        use std::fmt::Write;
        let _ = writeln!(out, "# email_id = {email_id}");
        let _ = writeln!(out, "# sent_index = {slot}");
        for (i, t) in self.tokens.iter().enumerate() {
            let head = self.heads[i].map_or(0, |h| h + 1);
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", i + 1, t.form, t.upos, head, self.relations[i]);
        }
        out.push('\n');
    }

    pub fn depth(&self, mut i: usize) -> usize {
        let mut d = 0;
        while let Some(h) = self.heads[i] {
            i = h;
            d += 1;
        }
        d
    }

    /// Shallowest node of `nodes`, lowest index on ties.
    fn top_of(&self, nodes: &[usize]) -> usize {
        *nodes
            .iter()
            .min_by_key(|&&n| (self.depth(n), n))
            .expect("non-empty node set")
    }

    /// Standalone tree over a sorted node subset. Nodes whose governor lies
    /// outside the subset attach to the subset's shallowest node.
    pub fn fragment(&self, nodes: &[usize]) -> DependencyGraph {
        let top = self.top_of(nodes);
        let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(l, &n)| (n, l)).collect();
        let tokens = nodes.iter().map(|&n| self.tokens[n].clone()).collect();
        let mut heads = Vec::with_capacity(nodes.len());
        let mut relations = Vec::with_capacity(nodes.len());
        for &n in nodes {
            if n == top {
                heads.push(None);
                relations.push("root".to_string());
            } else {
                let h = self.heads[n].and_then(|h| local.get(&h).copied()).unwrap_or(local[&top]);
                heads.push(Some(h));
                relations.push(self.relations[n].clone());
            }
        }
        DependencyGraph {
            tokens,
            heads,
            relations,
            root: local[&top],
        }
    }

    /// Replaces tokens `start..=end` by `replacement`. The replacement's root
    /// takes the place of the span's shallowest node and adopts every
    /// outside dependent of the span.
    pub fn splice(&self, start: usize, end: usize, replacement: &DependencyGraph) -> DependencyGraph {
        assert!(start <= end && end < self.len(), "span {start}..={end} outside sentence");
        let span: Vec<usize> = (start..=end).collect();
        let top = self.top_of(&span);
        let width = end - start + 1;
        let r_len = replacement.len();
        let map_old = |i: usize| if i < start { i } else { i - width + r_len };
        let in_span = |i: usize| (start..=end).contains(&i);
        let new_root = start + replacement.root;
        let mut tokens = Vec::with_capacity(self.len() - width + r_len);
        let mut heads = Vec::with_capacity(tokens.capacity());
        let mut relations = Vec::with_capacity(tokens.capacity());
        let push_outside = |i: usize, tokens: &mut Vec<Token>, heads: &mut Vec<Option<usize>>, relations: &mut Vec<String>| {
            tokens.push(self.tokens[i].clone());
            heads.push(self.heads[i].map(|h| if in_span(h) { new_root } else { map_old(h) }));
            relations.push(self.relations[i].clone());
        };
        for i in 0..start {
            push_outside(i, &mut tokens, &mut heads, &mut relations);
        }
        for (j, t) in replacement.tokens.iter().enumerate() {
            tokens.push(t.clone());
            if j == replacement.root {
                heads.push(self.heads[top].map(map_old));
                relations.push(self.relations[top].clone());
            } else {
                heads.push(replacement.heads[j].map(|h| start + h));
                relations.push(replacement.relations[j].clone());
            }
        }
        for i in end + 1..self.len() {
            push_outside(i, &mut tokens, &mut heads, &mut relations);
        }
        let root = heads.iter().position(Option::is_none).expect("spliced tree keeps a root");
        DependencyGraph {
            tokens,
            heads,
            relations,
            root,
        }
    }
}

/// Token features and local edges of any graph handed to a graph encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodableGraph {
    pub tokens: Vec<Token>,
    /// Local `(dependent, governor)` index pairs.
    pub edges: Vec<(usize, usize)>,
}

impl EncodableGraph {
    /// Subgraph of `g` induced by `nodes` (sorted sentence indices).
    pub fn induced(g: &DependencyGraph, nodes: &[usize]) -> Self {
        let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(l, &n)| (n, l)).collect();
        let tokens = nodes.iter().map(|&n| g.tokens[n].clone()).collect();
        let edges = nodes
            .iter()
            .filter_map(|&n| {
                let gov = g.heads[n]?;
                Some((local[&n], *local.get(&gov)?))
            })
            .collect();
        Self { tokens, edges }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// A phrase-level unit: the root, an anchor dependent and the anchor's subtree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhraseSubgraph {
    /// Anchor relation, or `root` for the fallback subgraph.
    pub anchor_relation: String,
    /// Sorted sentence token indices.
    pub nodes: Vec<usize>,
    /// Induced edges over sentence token indices.
    pub edges: Vec<Edge>,
    pub email_id: String,
    pub slot: SentenceSlot,
    pub surface_text: String,
    pub graph: EncodableGraph,
}

impl PhraseSubgraph {
    fn build(g: &DependencyGraph, nodes: Vec<usize>, anchor: &str, email_id: &str, slot: SentenceSlot) -> Self {
        let set: HashSet<usize> = nodes.iter().copied().collect();
        let edges = g
            .edges()
            .into_iter()
            .filter(|e| set.contains(&e.dependent) && set.contains(&e.governor))
            .collect();
        let forms: Vec<&str> = nodes.iter().map(|&n| g.tokens[n].form.as_str()).collect();
        Self {
            anchor_relation: anchor.to_string(),
            graph: EncodableGraph::induced(g, &nodes),
            surface_text: detokenize(&forms),
            nodes,
            edges,
            email_id: email_id.to_string(),
            slot,
        }
    }
}

/// Extracts one subgraph per anchored dependent, or a single fallback
/// subgraph (root plus its direct dependents) when no anchor occurs.
pub fn extract_subgraphs(
    g: &DependencyGraph,
    anchors: &[&str],
    email_id: &str,
    slot: SentenceSlot,
) -> Vec<PhraseSubgraph> {
    let root = g.root();
    let mut out = Vec::new();
    for i in 0..g.len() {
        let rel = g.relation(i);
        if i == root || !anchors.iter().any(|a| base_relation(rel) == *a || rel == *a) {
            continue;
        }
        let mut nodes = g.subtree(i);
        if let Err(pos) = nodes.binary_search(&root) {
            nodes.insert(pos, root);
        }
        out.push(PhraseSubgraph::build(g, nodes, rel, email_id, slot));
    }
    if out.is_empty() {
        let mut nodes = g.children(root);
        nodes.push(root);
        nodes.sort_unstable();
        out.push(PhraseSubgraph::build(g, nodes, "root", email_id, slot));
    }
    out
}

/// Parses keyed by `(email id, sentence slot)`.
pub type ParseMap = BTreeMap<(String, SentenceSlot), DependencyGraph>;

/// Reads a CoNLL-U subset document. Invalid blocks are dropped with a
/// diagnostic; when `known_ids` is given, blocks for other emails are dropped.
pub fn load_parses(text: &str, known_ids: Option<&HashSet<String>>) -> (ParseMap, Vec<Diagnostic>) {
    let mut map = ParseMap::new();
    let mut diags = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let lines: Vec<&str> = text.lines().collect();
    for (ln, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            if !block.is_empty() {
                ingest_block(&block, known_ids, &mut map, &mut diags);
                block.clear();
            }
        } else {
            block.push((ln + 1, line));
        }
    }
    if !block.is_empty() {
        ingest_block(&block, known_ids, &mut map, &mut diags);
    }
    (map, diags)
}

fn ingest_block(
    block: &[(usize, &str)],
    known_ids: Option<&HashSet<String>>,
    map: &mut ParseMap,
    diags: &mut Vec<Diagnostic>,
) {
    let first_line = block[0].0;
    let mut email_id = None;
    let mut slot = None;
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    let mut rels = Vec::new();
    let fail = |diags: &mut Vec<Diagnostic>, msg: String| {
        diags.push(Diagnostic::new(format!("line {first_line}"), msg));
    };
    for &(ln, line) in block {
        if let Some(comment) = line.strip_prefix('#') {
            if let Some((k, v)) = comment.split_once('=') {
                match k.trim() {
                    "email_id" => email_id = Some(v.trim().to_string()),
                    "sent_index" => match v.parse::<SentenceSlot>() {
                        Ok(s) => slot = Some(s),
                        Err(e) => return fail(diags, e),
                    },
                    _ => {}
                }
            }
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        let (id, form, upos, head, rel) = match cols.len() {
            5 => (cols[0], cols[1], cols[2], cols[3], cols[4]),
            10 => (cols[0], cols[1], cols[3], cols[6], cols[7]),
            n => return fail(diags, format!("line {ln}: expected 5 or 10 columns, found {n}")),
        };
        // multiword-token ranges and empty nodes carry no tree structure
        if id.contains('-') || id.contains('.') {
            continue;
        }
        let Ok(id) = id.parse::<usize>() else {
            return fail(diags, format!("line {ln}: bad token id {id:?}"));
        };
        if id != tokens.len() + 1 {
            return fail(diags, format!("line {ln}: token ids not consecutive"));
        }
        let Ok(head) = head.parse::<usize>() else {
            return fail(diags, format!("line {ln}: bad head {head:?}"));
        };
        tokens.push(Token::new(form, upos));
        heads.push(head);
        rels.push(rel.to_string());
    }
    let (Some(email_id), Some(slot)) = (email_id, slot) else {
        return fail(diags, "block lacks email_id or sent_index comment".into());
    };
    if known_ids.is_some_and(|ids| !ids.contains(&email_id)) {
        return fail(diags, format!("parse references unknown email id {email_id:?}"));
    }
    match DependencyGraph::from_conll(tokens, &heads, rels) {
        Ok(g) => {
            map.insert((email_id, slot), g);
        }
        Err(e) => fail(diags, format!("email {email_id} sentence {slot}: {e}")),
    }
}

/// Splits a body into sentences at terminal punctuation followed by
/// whitespace and at blank lines. Known abbreviations suppress a split.
pub fn sentence_segment(body: &str) -> Vec<String> {
    let mut out = Vec::new();
    for para in split_paragraphs(body) {
        let chars: Vec<(usize, char)> = para.char_indices().collect();
        let mut start = 0;
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i].1;
            if matches!(c, '.' | '!' | '?') {
                let mut j = i + 1;
                while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '"' | '\'' | ')') {
                    j += 1;
                }
                let at_boundary = j == chars.len() || chars[j].1.is_whitespace();
                let end = if j == chars.len() { para.len() } else { chars[j].0 };
                if at_boundary && !(c == '.' && ends_with_abbreviation(&para[start..end])) {
                    push_sentence(&mut out, &para[start..end]);
                    start = end;
                }
                i = j;
                continue;
            }
            i += 1;
        }
        push_sentence(&mut out, &para[start..]);
    }
    out
}

fn split_paragraphs(body: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = body.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'\n' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j] == b' ' || bytes[j] == b'\t' || bytes[j] == b'\r') {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'\n' {
                out.push(&body[start..i]);
                start = j + 1;
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out.push(&body[start..]);
    out
}

fn push_sentence(out: &mut Vec<String>, s: &str) {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ");
    if !collapsed.is_empty() {
        out.push(collapsed);
    }
}

fn ends_with_abbreviation(s: &str) -> bool {
    let last = s.split_whitespace().last().unwrap_or("").to_lowercase();
    let last = last.trim_start_matches(['(', '"', '\'']);
    ABBREVIATIONS.contains(&last)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sam_eats_apples() -> DependencyGraph {
        DependencyGraph::from_conll(
            vec![Token::new("Sam", "NOUN"), Token::new("eats", "VERB"), Token::new("apples", "NOUN")],
            &[2, 0, 2],
            vec!["nsubj".into(), "root".into(), "dobj".into()],
        )
        .unwrap()
    }

    #[test]
    fn loads_single_sentence_block() {
        let text = "# email_id = e1\n# sent_index = 0\n1\tSam\tNOUN\t2\tnsubj\n2\teats\tVERB\t0\troot\n3\tapples\tNOUN\t2\tdobj\n";
        let (map, diags) = load_parses(text, None);
        assert!(diags.is_empty(), "{diags:?}");
        let g = &map[&("e1".to_string(), SentenceSlot::Body(0))];
        assert_eq!(g.tokens()[g.root()].form, "eats");
        assert_eq!(g, &sam_eats_apples());
        assert_eq!(g.edges().len(), g.len() - 1);
    }

    #[test]
    fn rejects_multi_root_and_cycles() {
        let multi = "# email_id = e1\n# sent_index = 0\n1\ta\tX\t0\troot\n2\tb\tX\t0\troot\n";
        let (map, diags) = load_parses(multi, None);
        assert!(map.is_empty());
        assert_eq!(diags.len(), 1);

        let cyc = "# email_id = e1\n# sent_index = 0\n1\ta\tX\t2\tdep\n2\tb\tX\t1\tdep\n3\tc\tX\t0\troot\n";
        let (map, diags) = load_parses(cyc, None);
        assert!(map.is_empty());
        assert!(diags[0].message.contains("cycle"), "{:?}", diags);
    }

    #[test]
    fn two_governors_for_one_token_is_rejected() {
        // a token listed twice with different heads shows up as a non-consecutive id
        let text = "# email_id = e1\n# sent_index = 0\n1\ta\tX\t2\tdep\n1\ta\tX\t3\tdep\n2\tb\tX\t0\troot\n3\tc\tX\t2\tdep\n";
        let (map, diags) = load_parses(text, None);
        assert!(map.is_empty());
        assert_eq!(diags.len(), 1);
    }

    #[test]
    fn unknown_email_ids_are_dropped() {
        let text = "# email_id = ghost\n# sent_index = 0\n1\ta\tX\t0\troot\n";
        let known: HashSet<String> = ["e1".to_string()].into();
        let (map, diags) = load_parses(text, Some(&known));
        assert!(map.is_empty());
        assert!(diags[0].message.contains("unknown email id"));
    }

    #[test]
    fn subject_slot_round_trips() {
        let g = sam_eats_apples();
        let mut out = String::new();
        g.write_conll("e9", SentenceSlot::Subject, &mut out);
        let (map, diags) = load_parses(&out, None);
        assert!(diags.is_empty());
        assert_eq!(map[&("e9".to_string(), SentenceSlot::Subject)], g);
    }

    #[test]
    fn segmentation_examples() {
        assert_eq!(sentence_segment("Hi. Thanks!"), vec!["Hi.", "Thanks!"]);
        assert_eq!(sentence_segment("no terminal punctuation here"), vec!["no terminal punctuation here"]);
        assert_eq!(sentence_segment("Bring snacks, e.g. this one."), vec!["Bring snacks, e.g. this one."]);
        assert_eq!(sentence_segment("Line one\n\nLine two."), vec!["Line one", "Line two."]);
        assert!(sentence_segment("   ").is_empty());
    }

    #[test]
    fn sam_eats_apples_subgraphs() {
        let subs = extract_subgraphs(&sam_eats_apples(), DEFAULT_ANCHORS, "e", SentenceSlot::Body(0));
        let sets: Vec<(&str, Vec<usize>)> = subs.iter().map(|s| (s.anchor_relation.as_str(), s.nodes.clone())).collect();
        assert_eq!(sets, vec![("nsubj", vec![0, 1]), ("dobj", vec![1, 2])]);
        assert_eq!(subs[0].surface_text, "Sam eats");
        assert_eq!(subs[1].edges.len(), 1);
    }

    #[test]
    fn rootless_dependents_give_singleton_fallback() {
        let g = DependencyGraph::from_conll(vec![Token::new("Thanks", "NOUN")], &[0], vec!["root".into()]).unwrap();
        let subs = extract_subgraphs(&g, DEFAULT_ANCHORS, "e", SentenceSlot::Body(0));
        assert_eq!(subs.len(), 1);
        assert_eq!(subs[0].nodes, vec![0]);
        assert_eq!(subs[0].anchor_relation, "root");
    }

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("Hi Ann, it's 5.30!"), vec!["Hi", "Ann", ",", "it's", "5.30", "!"]);
        assert_eq!(detokenize(&["Hi", "Ann", ",", "bye", "."]), "Hi Ann, bye.");
    }

    fn conll(rows: &[(&str, &str, usize, &str)]) -> DependencyGraph {
        DependencyGraph::from_conll(
            rows.iter().map(|(f, p, _, _)| Token::new(*f, *p)).collect(),
            &rows.iter().map(|r| r.2).collect::<Vec<_>>(),
            rows.iter().map(|r| r.3.to_string()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn fragment_reattaches_orphans_to_top() {
        let g = conll(&[
            ("Sam", "PROPN", 3, "nsubj"),
            ("quickly", "ADV", 3, "advmod"),
            ("eats", "VERB", 0, "root"),
            ("red", "ADJ", 5, "amod"),
            ("apples", "NOUN", 3, "dobj"),
        ]);
        let f = g.fragment(&[3, 4]);
        assert_eq!(f.forms(), vec!["red", "apples"]);
        assert_eq!(f.root(), 1);
        assert_eq!(f.head(0), Some(1));
        let f = g.fragment(&[0, 3]);
        assert_eq!(f.root(), 0);
        assert_eq!(f.head(1), Some(0));
    }

    #[test]
    fn splice_keeps_a_valid_tree() {
        let g = conll(&[
            ("Register", "VERB", 0, "root"),
            ("for", "ADP", 4, "case"),
            ("your", "PRON", 4, "det:poss"),
            ("pass", "NOUN", 1, "obl"),
            ("today", "NOUN", 1, "obl:tmod"),
        ]);
        let r = conll(&[("free", "ADJ", 2, "amod"), ("passes", "NOUN", 0, "root")]);
        let s = g.splice(1, 3, &r);
        assert_eq!(s.forms(), vec!["Register", "free", "passes", "today"]);
        assert_eq!(s.root(), 0);
        assert_eq!(s.head(2), Some(0));
        assert_eq!(s.relation(2), "obl");
        assert_eq!(s.head(1), Some(2));
        assert_eq!(s.head(3), Some(0));

        // replacing the root span moves the root into the replacement
        let s = g.splice(0, 0, &conll(&[("Get", "VERB", 0, "root")]));
        assert_eq!(s.root(), 0);
        assert_eq!(s.head(3), Some(0));
        let heads: Vec<usize> = (0..s.len()).map(|i| s.head(i).map_or(0, |h| h + 1)).collect();
        let rels = (0..s.len()).map(|i| s.relation(i).to_string()).collect();
        assert!(DependencyGraph::from_conll(s.tokens().to_vec(), &heads, rels).is_ok());
    }
}
