//! Planted-trigger marketing corpus with gold dependency parses.
//!
//! Every email carries exactly one trigger sentence in its main content and
//! the trigger's class is the label. Greetings, sign-offs, subjects, filler
//! sentences and recipient metadata are drawn independently of the label.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Email, Interests, LabeledEmail, SourceCorpus};
use crate::parsing::{DependencyGraph, ParseMap, SentenceSlot, Token};

/// A sentence template: space-separated `form/UPOS/head/relation` tokens with
/// 1-based heads (0 = root). `{slot}` forms are filled from [`slot_values`].
type Template = &'static str;

pub const POSITIVE_TRIGGERS: &[Template] = &[
    "Get/VERB/0/root your/PRON/4/det:poss free/ADJ/4/amod pass/NOUN/1/dobj before/SCONJ/8/mark the/DET/7/det offer/NOUN/8/nsubj expires/VERB/1/advcl ./PUNCT/1/punct",
    "Claim/VERB/0/root your/PRON/4/det:poss exclusive/ADJ/4/amod discount/NOUN/1/dobj today/NOUN/1/obl:tmod ./PUNCT/1/punct",
    "Reply/VERB/0/root to/PART/3/mark reserve/VERB/1/advcl your/PRON/5/det:poss seat/NOUN/3/dobj ./PUNCT/1/punct",
    "Book/VERB/0/root a/DET/4/det quick/ADJ/4/amod call/NOUN/1/dobj with/ADP/7/case our/PRON/7/det:poss {team}/NOUN/4/nmod ./PUNCT/1/punct",
];

pub const NEGATIVE_TRIGGERS: &[Template] = &[
    "Register/VERB/0/root for/ADP/5/case your/PRON/5/det:poss free/ADJ/5/amod pass/NOUN/1/obl ./PUNCT/1/punct",
    "Read/VERB/0/root our/PRON/4/det:poss quarterly/ADJ/4/amod newsletter/NOUN/1/dobj online/ADV/1/advmod ./PUNCT/1/punct",
    "Browse/VERB/0/root the/DET/3/det catalog/NOUN/1/dobj at/ADP/6/case your/PRON/6/det:poss leisure/NOUN/1/obl ./PUNCT/1/punct",
    "Visit/VERB/0/root our/PRON/3/det:poss website/NOUN/1/dobj for/ADP/6/case general/ADJ/6/amod information/NOUN/1/obl ./PUNCT/1/punct",
];

pub const FILLERS: &[Template] = &[
    "Our/PRON/2/det:poss team/NOUN/3/nsubj shipped/VERB/0/root a/DET/6/det new/ADJ/6/amod {product}/NOUN/3/dobj ./PUNCT/3/punct",
    "The/DET/3/det {topic}/NOUN/3/compound report/NOUN/5/nsubj is/AUX/5/cop ready/ADJ/0/root ./PUNCT/5/punct",
    "We/PRON/2/nsubj updated/VERB/0/root the/DET/5/det {topic}/NOUN/5/compound page/NOUN/2/dobj ./PUNCT/2/punct",
    "The/DET/2/det webinar/NOUN/3/nsubj starts/VERB/0/root at/ADP/5/case {time}/NOUN/3/obl ./PUNCT/3/punct",
    "Last/ADJ/2/amod month/NOUN/4/obl:tmod {name}/PROPN/4/nsubj joined/VERB/0/root the/DET/7/det {topic}/NOUN/7/compound group/NOUN/4/dobj ./PUNCT/4/punct",
];

pub const GREETINGS: &[Template] = &[
    "Hi/INTJ/0/root {name}/PROPN/1/vocative ./PUNCT/1/punct",
    "Hello/INTJ/0/root {name}/PROPN/1/vocative ./PUNCT/1/punct",
    "Dear/ADJ/2/amod customer/NOUN/0/root ./PUNCT/2/punct",
    "I/PRON/2/nsubj hope/VERB/0/root you/PRON/5/nsubj are/AUX/5/aux doing/VERB/2/ccomp well/ADV/5/advmod ./PUNCT/2/punct",
];

pub const SIGNOFFS: &[Template] = &[
    "Best/ADJ/2/amod regards/NOUN/0/root ./PUNCT/2/punct",
    "Thanks/NOUN/0/root ./PUNCT/1/punct",
    "Cheers/INTJ/0/root ,/PUNCT/3/punct {name}/PROPN/1/vocative ./PUNCT/1/punct",
    "Kind/ADJ/2/amod regards/NOUN/0/root ,/PUNCT/5/punct the/DET/5/det {team}/NOUN/2/appos ./PUNCT/2/punct",
];

pub const SUBJECTS: &[Template] = &[
    "{product}/NOUN/2/compound update/NOUN/0/root",
    "News/NOUN/0/root from/ADP/4/case our/PRON/4/det:poss {team}/NOUN/1/nmod",
    "Your/PRON/3/det:poss weekly/ADJ/3/amod digest/NOUN/0/root",
    "Invitation/NOUN/0/root to/ADP/4/case our/PRON/4/det:poss event/NOUN/1/nmod",
    "{topic}/NOUN/2/compound highlights/NOUN/0/root",
];

pub fn slot_values(slot: &str) -> &'static [&'static str] {
    match slot {
        "name" => &["Ann", "Sam", "Priya", "Luis", "Mei", "Tom", "Olga", "Kofi"],
        "team" => &["team", "partners", "experts", "staff"],
        "product" => &["dashboard", "app", "planner", "tracker", "editor"],
        "topic" => &["sales", "travel", "design", "finance", "hiring", "security"],
        "time" => &["noon", "nine", "dawn", "midnight"],
        _ => &["item"],
    }
}

const ORGS: &[&str] = &["acme.com", "globex.com", "initech.com", "umbrella.org", "hooli.io", "stark.net"];
const INTERESTS: &[&str] = &["logistics", "retail", "software", "energy", "media", "health"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub positive_fraction: f64,
    pub seed: u64,
    pub greeting_probability: f64,
    pub signoff_probability: f64,
    pub min_fillers: usize,
    pub max_fillers: usize,
    pub id_prefix: String,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            positive_fraction: 0.5,
            seed: 0,
            greeting_probability: 0.7,
            signoff_probability: 0.7,
            min_fillers: 1,
            max_fillers: 2,
            id_prefix: "syn".into(),
        }
    }
}

impl SyntheticConfig {
    /// Positive count implied by the configuration.
    pub fn positives(&self) -> usize {
        ((self.count as f64) * self.positive_fraction.clamp(0.0, 1.0)).round() as usize
    }
}

/// Generated emails, their gold parses and which trigger each carries.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub emails: Vec<LabeledEmail>,
    pub parses: ParseMap,
    /// Index into the positive or negative trigger list, per email.
    pub triggers: Vec<usize>,
}

impl SyntheticCorpus {
    pub fn to_conll(&self) -> String {
        let mut out = String::new();
        for ((id, slot), g) in &self.parses {
            g.write_conll(id, *slot, &mut out);
        }
        out
    }
}

/// Instantiates a template, filling slots from `rng`.
pub fn instantiate<R: Rng + ?Sized>(template: &str, rng: &mut R) -> DependencyGraph {
    let mut tokens = Vec::new();
    let mut heads = Vec::new();
    let mut relations = Vec::new();
    for part in template.split_whitespace() {
        let mut f = part.rsplitn(4, '/');
        let rel = f.next().expect("relation");
        let head: usize = f.next().expect("head").parse().expect("numeric head");
        let upos = f.next().expect("upos");
        let form = f.next().expect("form");
        let form = match form.strip_prefix('{').and_then(|s| s.strip_suffix('}')) {
            Some(slot) => slot_values(slot).choose(rng).expect("slot values").to_string(),
            None => form.to_string(),
        };
        tokens.push(Token::new(form, upos));
        heads.push(head);
        relations.push(rel.to_string());
    }
    DependencyGraph::from_conll(tokens, &heads, relations).expect("templates are valid trees")
}

pub fn generate(cfg: &SyntheticConfig) -> SyntheticCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positives = cfg.positives();
    let mut labels: Vec<u8> = (0..cfg.count).map(|i| u8::from(i < positives)).collect();
    labels.shuffle(&mut rng);
    let mut out = SyntheticCorpus {
        emails: Vec::with_capacity(cfg.count),
        parses: ParseMap::new(),
        triggers: Vec::with_capacity(cfg.count),
    };
    let width = cfg.count.max(1).to_string().len();
    for (n, &label) in labels.iter().enumerate() {
        let id = format!("{}-{:0width$}", cfg.id_prefix, n);
        let subject = instantiate(SUBJECTS.choose(&mut rng).expect("subjects"), &mut rng);
        let mut body: Vec<DependencyGraph> = Vec::new();
        if rng.random_bool(cfg.greeting_probability) {
            body.push(instantiate(GREETINGS.choose(&mut rng).expect("greetings"), &mut rng));
        }
        let fillers = rng.random_range(cfg.min_fillers..=cfg.max_fillers.max(cfg.min_fillers));
        let mut main: Vec<DependencyGraph> =
            (0..fillers).map(|_| instantiate(FILLERS.choose(&mut rng).expect("fillers"), &mut rng)).collect();
        let pool = if label == 1 { POSITIVE_TRIGGERS } else { NEGATIVE_TRIGGERS };
        let t = rng.random_range(0..pool.len());
        let at = rng.random_range(0..=main.len());
        main.insert(at, instantiate(pool[t], &mut rng));
        body.extend(main);
        if rng.random_bool(cfg.signoff_probability) {
            body.push(instantiate(SIGNOFFS.choose(&mut rng).expect("sign-offs"), &mut rng));
        }
        let texts: Vec<String> = body.iter().map(DependencyGraph::text).collect();
        let mut email = Email::new(id.clone(), subject.text(), texts.join(" "));
        email.sentences = texts;
        email.recipient_org = Some(ORGS.choose(&mut rng).expect("orgs").to_string());
        let k = rng.random_range(1..=2);
        email.interests = Interests::Known(INTERESTS.choose_multiple(&mut rng, k).map(|s| s.to_string()).collect());
        out.parses.insert((id.clone(), SentenceSlot::Subject), subject);
        for (i, g) in body.into_iter().enumerate() {
            out.parses.insert((id.clone(), SentenceSlot::Body(i)), g);
        }
        out.emails.push(LabeledEmail {
            email,
            label,
            source_corpus: SourceCorpus::Generic,
        });
        out.triggers.push(t);
    }
    out
}

/// Trigger texts of each class, used as the oracle for learning and edits.
pub fn trigger_texts(label: u8) -> Vec<String> {
    let pool = if label == 1 { POSITIVE_TRIGGERS } else { NEGATIVE_TRIGGERS };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    pool.iter().map(|t| instantiate(t, &mut rng).text()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parsing::sentence_segment;
    use crate::parsing::load_parses;

    #[test]
    fn templates_parse_and_segment() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in POSITIVE_TRIGGERS.iter().chain(NEGATIVE_TRIGGERS).chain(FILLERS).chain(GREETINGS).chain(SIGNOFFS) {
            let g = instantiate(t, &mut rng);
            assert_eq!(sentence_segment(&g.text()), vec![g.text()], "{t}");
        }
        for t in SUBJECTS {
            instantiate(t, &mut rng);
        }
    }

    #[test]
    fn class_ratio_and_conll_round_trip() {
        let c = generate(&SyntheticConfig {
            count: 101,
            positive_fraction: 0.3,
            ..SyntheticConfig::default()
        });
        assert_eq!(c.emails.len(), 101);
        assert_eq!(c.emails.iter().filter(|e| e.label == 1).count(), 30);
        for e in &c.emails {
            assert_eq!(sentence_segment(&e.email.body), e.email.sentences);
        }
        let (back, diags) = load_parses(&c.to_conll(), None);
        assert!(diags.is_empty(), "{diags:?}");
        assert_eq!(back, c.parses);
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = generate(&SyntheticConfig { count: 20, ..Default::default() });
        let b = generate(&SyntheticConfig { count: 20, ..Default::default() });
        assert_eq!(a.emails, b.emails);
    }
}
