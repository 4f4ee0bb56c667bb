//! Prototype banks, the log-ratio similarity, granularity scores, the fused
//! classification head and prototype projection.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::edits::EditPosition;
use crate::encoders::MultiViewEmbedding;
use crate::error::{Error, Result};
use crate::parsing::DependencyGraph;
use crate::tensor::{squared_distance, Matrix};

pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Granularity {
    #[serde(rename = "D")]
    Document,
    #[serde(rename = "S")]
    Sentence,
    #[serde(rename = "P")]
    Phrase,
}

impl Granularity {
    pub const ALL: [Granularity; 3] = [Granularity::Document, Granularity::Sentence, Granularity::Phrase];

    pub fn letter(self) -> char {
        match self {
            Granularity::Document => 'D',
            Granularity::Sentence => 'S',
            Granularity::Phrase => 'P',
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Granularity::Document => "document",
            Granularity::Sentence => "sentence",
            Granularity::Phrase => "phrase",
        };
        f.write_str(name)
    }
}

/// `ln((‖p−e‖² + 1) / (‖p−e‖² + ε))`.
pub fn similarity(p: &[f64], e: &[f64], epsilon: f64) -> Result<f64> {
    if p.len() != e.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            found: e.len(),
        });
    }
    Ok(similarity_from_sq_distance(squared_distance(p, e), epsilon))
}

#[inline]
pub fn similarity_from_sq_distance(d2: f64, epsilon: f64) -> f64 {
    // ln1p form stays positive for very large distances
    ((1.0 - epsilon) / (d2 + epsilon)).ln_1p()
}

/// Replacement text and its syntax for one edit position of a prototype's
/// source email.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditMaterial {
    pub text: String,
    pub syntax: DependencyGraph,
    /// Whole-sentence material replaces a whole target sentence rather than
    /// its keyphrase unit.
    #[serde(default)]
    pub sentence_level: bool,
}

/// Where a projected prototype came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub email_id: String,
    /// Sentence or phrase index within the source email; 0 for documents.
    pub unit_index: usize,
    pub surface_text: String,
    /// Euclidean distance between the latent prototype and the unit.
    pub distance: f64,
    pub source_document: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub material: BTreeMap<EditPosition, EditMaterial>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub granularity: Granularity,
    pub vectors: Vec<Vec<f64>>,
    pub class_of: Vec<u8>,
    pub epsilon: f64,
    #[serde(default)]
    pub projection: Option<Vec<Provenance>>,
}

impl PrototypeBank {
    /// Zero-initialized bank with the first half of the prototypes assigned
    /// to class 0 and the second half to class 1.
    pub fn new(granularity: Granularity, count: usize, d: usize, epsilon: f64) -> Result<Self> {
        if count == 0 || count % 2 != 0 {
            return Err(Error::Config(format!("{granularity} prototype count must be even and positive, got {count}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {epsilon}")));
        }
        Ok(Self {
            granularity,
            vectors: vec![vec![0.0; d]; count],
            class_of: (0..count).map(|i| u8::from(i >= count / 2)).collect(),
            epsilon,
            projection: None,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.first().map_or(0, Vec::len)
    }

    pub fn matrix(&self) -> Matrix {
        Matrix::from_rows(&self.vectors)
    }

    pub fn set_matrix(&mut self, m: &Matrix) {
        assert_eq!(m.rows(), self.len());
        for (r, v) in self.vectors.iter_mut().enumerate() {
            v.copy_from_slice(m.row(r));
        }
    }

    pub fn is_projected(&self) -> bool {
        self.projection.is_some()
    }

    pub fn of_class(&self, class: u8) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(move |&i| self.class_of[i] == class)
    }

    /// Similarity of every prototype to every unit, aggregated over units.
    pub fn scores(&self, units: &[Vec<f64>], aggregation: Aggregation) -> Vec<f64> {
        if units.is_empty() {
            return vec![0.0; self.len()];
        }
        self.vectors
            .iter()
            .map(|p| {
                let sims = units.iter().map(|e| similarity_from_sq_distance(squared_distance(p, e), self.epsilon));
                match aggregation {
                    Aggregation::Mean => sims.sum::<f64>() / units.len() as f64,
                    Aggregation::Max => sims.fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }

    /// Initializes each class's prototypes from distinct random same-class
    /// units, sampling with replacement only when the class has too few.
    pub fn initialize_from_pool<R: Rng + ?Sized>(&mut self, pool: &[PoolUnit], rng: &mut R) -> Result<()> {
        for class in [0u8, 1] {
            let members: Vec<usize> = pool.iter().enumerate().filter(|(_, u)| u.label == class).map(|(i, _)| i).collect();
            if members.is_empty() {
                return Err(Error::Projection(format!("no class-{class} {} units to initialize from", self.granularity)));
            }
            let protos: Vec<usize> = self.of_class(class).collect();
            let picks: Vec<usize> = if members.len() >= protos.len() {
                sample(rng, members.len(), protos.len()).into_iter().map(|i| members[i]).collect()
            } else {
                (0..protos.len()).map(|_| members[rng.random_range(0..members.len())]).collect()
            };
            for (&p, &u) in protos.iter().zip(&picks) {
                self.vectors[p].clone_from(&pool[u].embedding);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Per-granularity similarity scores; disabled granularities are empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityVector {
    pub document: Vec<f64>,
    pub sentence: Vec<f64>,
    pub phrase: Vec<f64>,
}

impl SimilarityVector {
    pub fn get(&self, g: Granularity) -> &[f64] {
        match g {
            Granularity::Document => &self.document,
            Granularity::Sentence => &self.sentence,
            Granularity::Phrase => &self.phrase,
        }
    }

    pub fn len(&self) -> usize {
        self.document.len() + self.sentence.len() + self.phrase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The three banks; a `None` bank belongs to a disabled view.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBanks {
    pub document: Option<PrototypeBank>,
    pub sentence: Option<PrototypeBank>,
    pub phrase: Option<PrototypeBank>,
}

impl PrototypeBanks {
    pub fn get(&self, g: Granularity) -> Option<&PrototypeBank> {
        match g {
            Granularity::Document => self.document.as_ref(),
            Granularity::Sentence => self.sentence.as_ref(),
            Granularity::Phrase => self.phrase.as_ref(),
        }
    }

    pub fn get_mut(&mut self, g: Granularity) -> Option<&mut PrototypeBank> {
        match g {
            Granularity::Document => self.document.as_mut(),
            Granularity::Sentence => self.sentence.as_mut(),
            Granularity::Phrase => self.phrase.as_mut(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &PrototypeBank> {
        [&self.document, &self.sentence, &self.phrase].into_iter().flatten()
    }

    pub fn total(&self) -> usize {
        self.iter().map(PrototypeBank::len).sum()
    }

    pub fn all_projected(&self) -> bool {
        self.iter().all(PrototypeBank::is_projected)
    }
}

pub fn granularity_scores(mv: &MultiViewEmbedding, banks: &PrototypeBanks, aggregation: Aggregation) -> SimilarityVector {
    SimilarityVector {
        document: banks
            .document
            .as_ref()
            .map(|b| b.scores(std::slice::from_ref(&mv.document), aggregation))
            .unwrap_or_default(),
        sentence: banks.sentence.as_ref().map(|b| b.scores(&mv.sentences, aggregation)).unwrap_or_default(),
        phrase: banks.phrase.as_ref().map(|b| b.scores(&mv.phrases, aggregation)).unwrap_or_default(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    /// `(j+k+m) x 2`.
    pub weight: Matrix,
    pub bias: [f64; 2],
    pub lambda1: f64,
    pub lambda2: f64,
}

impl ClassifierHead {
    pub fn fuse(&self, sv: &SimilarityVector) -> Vec<f64> {
        let mut fused = Vec::with_capacity(sv.len());
        fused.extend_from_slice(&sv.document);
        fused.extend(sv.sentence.iter().map(|s| self.lambda1 * s));
        fused.extend(sv.phrase.iter().map(|s| self.lambda2 * s));
        fused
    }

    pub fn logits(&self, fused: &[f64]) -> [f64; 2] {
        assert_eq!(fused.len(), self.weight.rows(), "head expects {} inputs", self.weight.rows());
        let mut out = self.bias;
        for (i, x) in fused.iter().enumerate() {
            out[0] += x * self.weight.get(i, 0);
            out[1] += x * self.weight.get(i, 1);
        }
        out
    }

    pub fn l1_norm(&self) -> f64 {
        self.weight.data().iter().map(|w| w.abs()).sum()
    }
}

pub fn softmax2(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let a = (logits[0] - m).exp();
    let b = (logits[1] - m).exp();
    [a / (a + b), b / (a + b)]
}

pub fn fuse_and_classify(sv: &SimilarityVector, head: &ClassifierHead) -> [f64; 2] {
    softmax2(head.logits(&head.fuse(sv)))
}

/// A training unit eligible as a projection target.
#[derive(Clone, Debug)]
pub struct PoolUnit {
    pub embedding: Vec<f64>,
    pub label: u8,
    pub email_id: String,
    pub unit_index: usize,
    pub surface_text: String,
    pub source_document: Arc<Vec<f64>>,
}

/// For each prototype, the pool index of its nearest same-class unit and the
/// squared distance. Ties go to the lowest pool index.
pub fn nearest_same_class(bank: &PrototypeBank, pool: &[PoolUnit]) -> Result<Vec<(usize, f64)>> {
    bank.vectors
        .iter()
        .zip(&bank.class_of)
        .enumerate()
        .map(|(pi, (p, &class))| {
            let mut best: Option<(usize, f64)> = None;
            for (ui, u) in pool.iter().enumerate() {
                if u.label != class {
                    continue;
                }
                if u.embedding.len() != p.len() {
                    return Err(Error::DimensionMismatch {
                        expected: p.len(),
                        found: u.embedding.len(),
                    });
                }
                let d = squared_distance(p, &u.embedding);
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((ui, d));
                }
            }
            best.ok_or_else(|| {
                Error::Projection(format!("no class-{class} {} units for prototype {pi}", bank.granularity))
            })
        })
        .collect()
}

/// Replaces every prototype with its nearest same-class pool embedding and
/// records provenance.
pub fn project_prototypes(bank: &mut PrototypeBank, pool: &[PoolUnit]) -> Result<Vec<usize>> {
    let nearest = nearest_same_class(bank, pool)?;
    let mut provenance = Vec::with_capacity(nearest.len());
    for (p, &(ui, d2)) in nearest.iter().enumerate() {
        let u = &pool[ui];
        bank.vectors[p].clone_from(&u.embedding);
        provenance.push(Provenance {
            email_id: u.email_id.clone(),
            unit_index: u.unit_index,
            surface_text: u.surface_text.clone(),
            distance: d2.sqrt(),
            source_document: u.source_document.as_ref().clone(),
            material: BTreeMap::new(),
        });
    }
    bank.projection = Some(provenance);
    Ok(nearest.into_iter().map(|(ui, _)| ui).collect())
}
