//! Email ingestion, response labeling, balanced splitting and interest
//! enrichment.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Diagnostic, Error, Result};
use crate::parsing::sentence_segment;

/// Interest metadata for a recipient organization.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Interests {
    /// No organization to look up.
    #[default]
    Absent,
    /// Organization known but its interests could not be determined.
    Unknown,
    Known(Vec<String>),
}

impl Interests {
    pub fn as_slice(&self) -> &[String] {
        match self {
            Interests::Known(v) => v,
            _ => &[],
        }
    }
}

/// `null`/absent, the string `"unknown"`, or a list of strings.
#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum InterestsRepr {
    Marker(String),
    List(Vec<String>),
}

impl Serialize for Interests {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Interests::Absent => s.serialize_none(),
            Interests::Unknown => s.serialize_str("unknown"),
            Interests::Known(v) => v.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Interests {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Option::<InterestsRepr>::deserialize(d)? {
            None => Ok(Interests::Absent),
            Some(InterestsRepr::Marker(m)) if m.eq_ignore_ascii_case("unknown") => Ok(Interests::Unknown),
            Some(InterestsRepr::Marker(m)) => Err(serde::de::Error::custom(format!(
                "interests must be a list or \"unknown\", got {m:?}"
            ))),
            Some(InterestsRepr::List(v)) => Ok(Interests::Known(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Email {
    pub id: String,
    pub subject: String,
    pub body: String,
    #[serde(default)]
    pub recipient_org: Option<String>,
    #[serde(default)]
    pub interests: Interests,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sentences: Vec<String>,
}

impl Email {
    pub fn new(id: impl Into<String>, subject: impl Into<String>, body: impl Into<String>) -> Self {
        let mut e = Self {
            id: id.into(),
            subject: subject.into(),
            body: body.into(),
            recipient_org: None,
            interests: Interests::Absent,
            sentences: Vec::new(),
        };
        e.segment();
        e
    }

    /// Recomputes `sentences` from the body.
    pub fn segment(&mut self) {
        self.sentences = sentence_segment(&self.body);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceCorpus {
    Enron,
    Generic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledEmail {
    pub email: Email,
    /// 1 = responded, 0 = no response.
    pub label: u8,
    pub source_corpus: SourceCorpus,
}

impl LabeledEmail {
    pub fn id(&self) -> &str {
        &self.email.id
    }
}

/// Parses one raw RFC-822-style message (header block, blank line, body).
///
/// `Subject` and the domain of the first `To` address are extracted; the body
/// is kept verbatim.
pub fn parse_raw_email(id: &str, raw: &str) -> Result<Email> {
    let reject = |message: &str| Error::Rejected {
        location: id.to_string(),
        message: message.to_string(),
    };
    let raw = raw.strip_prefix('\u{feff}').unwrap_or(raw);
    let (header_block, body) = split_header_body(raw).ok_or_else(|| reject("no blank line separating headers from body"))?;
    let headers = parse_headers(header_block);
    if headers.is_empty() {
        return Err(reject("no header lines found"));
    }
    if body.trim().is_empty() {
        return Err(reject("empty body"));
    }
    let subject = header(&headers, "subject").unwrap_or_default().trim().to_string();
    let recipient_org = header(&headers, "to").and_then(first_address_domain);
    let mut email = Email::new(id, subject, body);
    email.recipient_org = recipient_org;
    Ok(email)
}

/// Builds an email from text that carries no header block at all.
pub fn parse_headerless(id: &str, text: &str) -> Result<Email> {
    if text.trim().is_empty() {
        return Err(Error::Rejected {
            location: id.to_string(),
            message: "empty body".into(),
        });
    }
    Ok(Email::new(id, "", text))
}

fn split_header_body(raw: &str) -> Option<(&str, &str)> {
    let mut offset = 0;
    for line in raw.split_inclusive('\n') {
        if line.trim_end_matches(['\r', '\n']).is_empty() {
            return Some((&raw[..offset], &raw[offset + line.len()..]));
        }
        offset += line.len();
    }
    None
}

fn parse_headers(block: &str) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for line in block.lines() {
        if line.starts_with([' ', '\t']) {
            if let Some(last) = out.last_mut() {
                last.1.push(' ');
                last.1.push_str(line.trim());
            }
            continue;
        }
        if let Some((k, v)) = line.split_once(':') {
            if !k.is_empty() && !k.contains(char::is_whitespace) {
                out.push((k.to_ascii_lowercase(), v.trim().to_string()));
            }
        }
    }
    out
}

fn header(headers: &[(String, String)], name: &str) -> Option<String> {
    headers.iter().find(|(k, _)| k == name).map(|(_, v)| v.clone())
}

/// Text before the first comma that is outside quotes and angle brackets.
fn first_address(list: &str) -> &str {
    let (mut quoted, mut angled) = (false, false);
    for (i, c) in list.char_indices() {
        match c {
            '"' => quoted = !quoted,
            '<' if !quoted => angled = true,
            '>' if !quoted => angled = false,
            ',' if !quoted && !angled => return &list[..i],
            _ => {}
        }
    }
    list
}

fn first_address_domain(to: String) -> Option<String> {
    let first = first_address(&to).trim();
    let addr = match (first.find('<'), first.find('>')) {
        (Some(a), Some(b)) if a < b => &first[a + 1..b],
        _ => first,
    };
    let (_, domain) = addr.rsplit_once('@')?;
    let domain = domain.trim().trim_end_matches(['>', '"', '\'']).to_ascii_lowercase();
    (!domain.is_empty()).then_some(domain)
}

/// Reply/forward markers for Enron labeling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplyMarkers {
    /// Case-insensitive subject prefixes.
    pub subject_prefixes: Vec<String>,
    /// Body lines whose presence marks a quoted original or forward.
    pub body_lines: Vec<String>,
}

impl Default for ReplyMarkers {
    fn default() -> Self {
        Self {
            subject_prefixes: vec!["RE:".into(), "FW:".into(), "FWD:".into()],
            body_lines: vec![
                "-----Original Message-----".into(),
                "---------------------- Forwarded by".into(),
            ],
        }
    }
}

/// Assigns the response label. A body marker line also truncates the body to
/// the text after that line; a subject prefix alone leaves the body intact.
pub fn label_enron(email: Email, markers: &ReplyMarkers) -> LabeledEmail {
    let mut email = email;
    let subject = email.subject.trim_start().to_uppercase();
    let subject_hit = markers
        .subject_prefixes
        .iter()
        .any(|p| subject.starts_with(&p.to_uppercase()));

    let mut cut = None;
    let mut offset = 0;
    'lines: for line in email.body.split_inclusive('\n') {
        let trimmed = line.trim();
        for m in &markers.body_lines {
            if trimmed.starts_with(m.as_str()) {
                cut = Some(offset + line.len());
                break 'lines;
            }
        }
        offset += line.len();
    }

    let label = if let Some(cut) = cut {
        email.body = email.body[cut..].to_string();
        email.segment();
        1
    } else {
        u8::from(subject_hit)
    };
    LabeledEmail {
        email,
        label,
        source_corpus: SourceCorpus::Enron,
    }
}

/// Parses and labels every regular file below `dir`; ids are relative paths.
pub fn ingest_enron_dir(dir: &Path, markers: &ReplyMarkers) -> Result<(Vec<LabeledEmail>, Vec<Diagnostic>)> {
    let mut out = Vec::new();
    let mut diags = Vec::new();
    let mut paths: Vec<_> = walkdir::WalkDir::new(dir)
        .into_iter()
        .filter_map(|e| match e {
            Ok(e) if e.file_type().is_file() => Some(e.into_path()),
            Ok(_) => None,
            Err(err) => {
                diags.push(Diagnostic::new(dir.display().to_string(), err.to_string()));
                None
            }
        })
        .collect();
    paths.sort();
    for path in paths {
        let id = path.strip_prefix(dir).unwrap_or(&path).to_string_lossy().replace('\\', "/");
        let bytes = std::fs::read(&path)?;
        let raw = String::from_utf8_lossy(&bytes);
        match parse_raw_email(&id, &raw) {
            Ok(email) => {
                let labeled = label_enron(email, markers);
                if labeled.email.body.trim().is_empty() {
                    diags.push(Diagnostic::new(&id, "empty body after reply truncation"));
                } else {
                    out.push(labeled);
                }
            }
            Err(e) => diags.push(Diagnostic::new(&id, e.to_string())),
        }
    }
    Ok((out, diags))
}

/// One line of the generic corpus format.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GenericRecord {
    pub id: String,
    pub subject: String,
    pub body: String,
    #[serde(default)]
    pub recipient_org: Option<String>,
    #[serde(default)]
    pub interests: Interests,
    pub label: u8,
}

impl From<&LabeledEmail> for GenericRecord {
    fn from(l: &LabeledEmail) -> Self {
        Self {
            id: l.email.id.clone(),
            subject: l.email.subject.clone(),
            body: l.email.body.clone(),
            recipient_org: l.email.recipient_org.clone(),
            interests: l.email.interests.clone(),
            label: l.label,
        }
    }
}

/// Fraction of invalid lines above which loading fails outright.
pub const MAX_INVALID_FRACTION: f64 = 0.10;

/// Reads line-delimited JSON records. Invalid records are skipped with a
/// diagnostic naming the line.
pub fn load_generic_corpus(text: &str) -> Result<(Vec<LabeledEmail>, Vec<Diagnostic>)> {
    let mut out = Vec::new();
    let mut diags = Vec::new();
    let mut seen = HashSet::new();
    let mut total = 0;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let loc = format!("line {}", i + 1);
        let rec: GenericRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                diags.push(Diagnostic::new(loc, e.to_string()));
                continue;
            }
        };
        let problem = if rec.body.trim().is_empty() {
            Some("empty body".to_string())
        } else if rec.label > 1 {
            Some(format!("label {} not in {{0,1}}", rec.label))
        } else if rec.id.is_empty() {
            Some("empty id".to_string())
        } else if !seen.insert(rec.id.clone()) {
            Some(format!("duplicate id {:?}", rec.id))
        } else {
            None
        };
        if let Some(p) = problem {
            diags.push(Diagnostic::new(loc, p));
            continue;
        }
        let mut email = Email::new(rec.id, rec.subject, rec.body);
        email.recipient_org = rec.recipient_org.map(|o| o.to_lowercase());
        email.interests = rec.interests;
        out.push(LabeledEmail {
            email,
            label: rec.label,
            source_corpus: SourceCorpus::Generic,
        });
    }
    if total > 0 && diags.len() as f64 > MAX_INVALID_FRACTION * total as f64 {
        return Err(Error::MalformedCorpus {
            invalid: diags.len(),
            total,
            first: diags[0].to_string(),
        });
    }
    Ok((out, diags))
}

pub fn load_generic_corpus_file(path: &Path) -> Result<(Vec<LabeledEmail>, Vec<Diagnostic>)> {
    load_generic_corpus(&std::fs::read_to_string(path)?)
}

/// Serializes emails in the generic corpus format.
pub fn write_generic_corpus(emails: &[LabeledEmail]) -> Result<String> {
    let mut out = String::new();
    for e in emails {
        out.push_str(&serde_json::to_string(&GenericRecord::from(e))?);
        out.push('\n');
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub const fn new(train: f64, val: f64, test: f64) -> Self {
        Self { train, val, test }
    }
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self::new(0.8, 0.1, 0.1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCorpus {
    pub train: Vec<LabeledEmail>,
    pub val: Vec<LabeledEmail>,
    pub test: Vec<LabeledEmail>,
    pub seed: u64,
    pub ratios: SplitRatios,
}

/// Ids per split; enough to replay a split exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitCorpus {
    pub fn manifest(&self) -> SplitManifest {
        let ids = |v: &[LabeledEmail]| v.iter().map(|e| e.email.id.clone()).collect();
        SplitManifest {
            seed: self.seed,
            ratios: self.ratios,
            train: ids(&self.train),
            val: ids(&self.val),
            test: ids(&self.test),
        }
    }

    /// Rebuilds a split from a manifest and the corpus it was drawn from.
    pub fn from_manifest(manifest: &SplitManifest, corpus: &[LabeledEmail]) -> Result<Self> {
        let by_id: BTreeMap<&str, &LabeledEmail> = corpus.iter().map(|e| (e.email.id.as_str(), e)).collect();
        let pick = |ids: &[String]| -> Result<Vec<LabeledEmail>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|e| (*e).clone())
                        .ok_or_else(|| Error::Split(format!("manifest id {id:?} not in corpus")))
                })
                .collect()
        };
        Ok(Self {
            train: pick(&manifest.train)?,
            val: pick(&manifest.val)?,
            test: pick(&manifest.test)?,
            seed: manifest.seed,
            ratios: manifest.ratios,
        })
    }
}

/// Downsamples the majority class to the minority count and splits each class
/// by `ratios`, so every split is balanced.
pub fn balance_and_split(corpus: &[LabeledEmail], seed: u64, ratios: SplitRatios) -> Result<SplitCorpus> {
    let sum = ratios.train + ratios.val + ratios.test;
    if [ratios.train, ratios.val, ratios.test].iter().any(|r| *r < 0.0 || !r.is_finite()) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let mut seen = HashSet::new();
    for e in corpus {
        if !seen.insert(e.email.id.as_str()) {
            return Err(Error::Split(format!("duplicate email id {:?}", e.email.id)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: [Vec<&LabeledEmail>; 2] = [Vec::new(), Vec::new()];
    for e in corpus {
        by_class[usize::from(e.label.min(1))].push(e);
    }
    let n = by_class[0].len().min(by_class[1].len());
    if n < 2 {
        return Err(Error::Split(format!(
            "need at least 2 examples per class, have {} negative / {} positive",
            by_class[0].len(),
            by_class[1].len()
        )));
    }
    let n_train = (n as f64 * ratios.train).round() as usize;
    let n_val = ((n as f64 * ratios.val).round() as usize).min(n - n_train.min(n));
    let n_train = n_train.min(n);
    let n_test = n - n_train - n_val;
    for (name, count, r) in [("train", n_train, ratios.train), ("val", n_val, ratios.val), ("test", n_test, ratios.test)] {
        if count == 0 && r > 0.0 {
            return Err(Error::Split(format!("{name} split would receive zero examples of a class")));
        }
    }

    let mut parts: [Vec<LabeledEmail>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for class in &mut by_class {
        class.shuffle(&mut rng);
        let kept = &class[..n];
        parts[0].extend(kept[..n_train].iter().map(|e| (*e).clone()));
        parts[1].extend(kept[n_train..n_train + n_val].iter().map(|e| (*e).clone()));
        parts[2].extend(kept[n_train + n_val..].iter().map(|e| (*e).clone()));
    }
    for p in &mut parts {
        p.shuffle(&mut rng);
    }
    let [train, val, test] = parts;
    Ok(SplitCorpus {
        train,
        val,
        test,
        seed,
        ratios,
    })
}

/// Offline organization-interest table.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EnrichmentTable {
    entries: BTreeMap<String, Vec<String>>,
}

impl EnrichmentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, org: &str, interests: Vec<String>) {
        self.entries.insert(org.trim().to_lowercase(), interests);
    }

    /// Absent organizations yield [`Interests::Unknown`].
    pub fn lookup(&self, org: &str) -> Interests {
        match self.entries.get(&org.trim().to_lowercase()) {
            Some(v) => Interests::Known(v.clone()),
            None => Interests::Unknown,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: BTreeMap<String, Vec<String>> = serde_json::from_str(text)?;
        let mut t = Self::new();
        for (k, v) in raw {
            t.insert(&k, v);
        }
        Ok(t)
    }
}

pub fn enrich_interests(mut email: Email, table: &EnrichmentTable) -> Email {
    if let Some(org) = &email.recipient_org {
        email.interests = table.lookup(org);
    }
    email
}
