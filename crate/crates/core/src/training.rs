//! Objective, optimization loop, metrics, significance testing, random
//! search and ablations.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::autograd::{AdamW, Gradients, Tape, Var};
use crate::error::{Diagnostic, Error, Result};
use crate::model::{parallel_map, ModelConfig, Overrides, PreparedEmail, ProtoModel};
use crate::protonet::{ClassifierHead, Granularity, PrototypeBank};
use crate::tensor::{cosine, squared_distance, Matrix};

const LOG_CLAMP: f64 = 1e-12;
/// Examples per gradient chunk; fixed so the summation order never depends
/// on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the positive class in the cross entropy; the negative class
    /// gets `1 - w`.
    pub positive_class_weight: f64,
    pub j: usize,
    pub k: usize,
    pub m: usize,
    pub theta: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub projection_interval: usize,
    /// Optional clamp `max(L_sep, -margin)`.
    pub sep_margin: Option<f64>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            batch_size: 32,
            learning_rate: 2e-3,
            positive_class_weight: 0.5,
            j: 10,
            k: 10,
            m: 10,
            theta: 0.3,
            alpha: 0.01,
            beta: 0.01,
            gamma: 0.01,
            delta: 0.001,
            lambda1: 0.3,
            lambda2: 0.5,
            weight_decay: 0.1,
            epochs: 30,
            seed: 0,
            patience: 5,
            projection_interval: 5,
            sep_margin: None,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let coeffs = [self.alpha, self.beta, self.gamma, self.delta, self.lambda1, self.lambda2, self.weight_decay];
        if coeffs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Config("loss coefficients and fusion weights must be finite and non-negative".into()));
        }
        if !(-1.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [-1, 1], got {}", self.theta)));
        }
        for (n, v) in [("j", self.j), ("k", self.k), ("m", self.m)] {
            if v == 0 || v % 2 != 0 {
                return Err(Error::Config(format!("{n} must be an even positive integer, got {v}")));
            }
        }
        if self.batch_size == 0 || self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("batch size and learning rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.positive_class_weight) {
            return Err(Error::Config("positive class weight must lie in [0, 1]".into()));
        }
        if self.projection_interval == 0 {
            return Err(Error::Config("projection interval must be positive".into()));
        }
        Ok(())
    }

    /// Copies prototype counts and fusion weights into a model configuration.
    pub fn apply(&self, cfg: &mut ModelConfig) {
        cfg.document_prototypes = self.j;
        cfg.sentence_prototypes = self.k;
        cfg.phrase_prototypes = self.m;
        cfg.lambda1 = self.lambda1;
        cfg.lambda2 = self.lambda2;
    }

    fn class_weight(&self, label: u8) -> f64 {
        if label == 1 {
            self.positive_class_weight
        } else {
            1.0 - self.positive_class_weight
        }
    }
}

// ---- plain-value losses ----

/// Weighted cross entropy, normalized by the summed weights of the batch.
pub fn loss_ce(probabilities: &[[f64; 2]], labels: &[u8], positive_class_weight: f64) -> f64 {
    assert_eq!(probabilities.len(), labels.len());
    let (mut num, mut den) = (0.0, 0.0);
    for (p, &y) in probabilities.iter().zip(labels) {
        let c = if y == 1 { positive_class_weight } else { 1.0 - positive_class_weight };
        num += c * -p[y as usize].max(LOG_CLAMP).ln();
        den += c;
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Sum over ordered same-class pairs of `max(0, cos - theta)`. Zero-norm
/// prototypes count as cosine 0 and are reported.
pub fn loss_div(bank: &PrototypeBank, theta: f64) -> (f64, Vec<Diagnostic>) {
    let mut diags = Vec::new();
    for (i, v) in bank.vectors.iter().enumerate() {
        if v.iter().all(|x| *x == 0.0) {
            diags.push(Diagnostic::new(
                format!("{} prototype {i}", bank.granularity),
                "zero-norm prototype; cosine treated as 0",
            ));
        }
    }
    let mut total = 0.0;
    for q in 0..bank.len() {
        for r in 0..bank.len() {
            if q != r && bank.class_of[q] == bank.class_of[r] {
                total += (cosine(&bank.vectors[q], &bank.vectors[r]) - theta).max(0.0);
            }
        }
    }
    (total, diags)
}

fn min_distance(e: &[f64], bank: &PrototypeBank, keep: impl Fn(u8) -> bool) -> f64 {
    bank.vectors
        .iter()
        .zip(&bank.class_of)
        .filter(|(_, c)| keep(**c))
        .map(|(p, _)| squared_distance(e, p))
        .fold(f64::INFINITY, f64::min)
}

/// Mean over units of the squared distance to the nearest own-class prototype.
pub fn loss_cls(units: &[Vec<f64>], labels: &[u8], bank: &PrototypeBank) -> f64 {
    if units.is_empty() {
        return 0.0;
    }
    let s: f64 = units.iter().zip(labels).map(|(e, &y)| min_distance(e, bank, |c| c == y)).sum();
    s / units.len() as f64
}

/// Negative mean over units of the squared distance to the nearest
/// other-class prototype.
pub fn loss_sep(units: &[Vec<f64>], labels: &[u8], bank: &PrototypeBank) -> f64 {
    if units.is_empty() {
        return 0.0;
    }
    let s: f64 = units.iter().zip(labels).map(|(e, &y)| min_distance(e, bank, |c| c != y)).sum();
    -s / units.len() as f64
}

/// L1 norm of the head weights, bias excluded.
pub fn loss_spa(head: &ClassifierHead) -> f64 {
    head.l1_norm()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ce: f64,
    pub div: f64,
    pub cls: f64,
    pub sep: f64,
    pub spa: f64,
}

impl LossTerms {
    pub fn total(&self, hp: &Hyperparams) -> f64 {
        self.ce + hp.alpha * self.div + hp.beta * self.cls + hp.gamma * self.sep + hp.delta * self.spa
    }

    fn add(&mut self, o: &LossTerms) {
        self.ce += o.ce;
        self.div += o.div;
        self.cls += o.cls;
        self.sep += o.sep;
        self.spa += o.spa;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.ce *= s;
        self.div *= s;
        self.cls *= s;
        self.sep *= s;
        self.spa *= s;
        self
    }
}

/// Every term of the objective on a batch, computed from plain values
/// through the inference path.
pub fn batch_loss_terms(model: &ProtoModel, batch: &[&PreparedEmail], hp: &Hyperparams) -> LossTerms {
    let mut probs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    let mut units: [(Vec<Vec<f64>>, Vec<u8>); 3] = Default::default();
    for p in batch {
        let y = p.label.expect("labeled example");
        let mv = model.encode_views(p);
        probs.push(model.predict_views(&mv).probabilities);
        labels.push(y);
        if model.config.variant.text {
            units[0].0.push(mv.document.clone());
            units[0].1.push(y);
        }
        for s in mv.sentences {
            units[1].0.push(s);
            units[1].1.push(y);
        }
        for s in mv.phrases {
            units[2].0.push(s);
            units[2].1.push(y);
        }
    }
    let mut t = LossTerms {
        ce: loss_ce(&probs, &labels, hp.positive_class_weight),
        spa: loss_spa(&model.head()),
        ..Default::default()
    };
    if model.config.variant.prototypes {
        for g in model.active_granularities() {
            let bank = model.banks.get(g).expect("active bank");
            let (u, l) = &units[g.index()];
            t.div += loss_div(bank, hp.theta).0;
            t.cls += loss_cls(u, l, bank);
            let sep = loss_sep(u, l, bank);
            t.sep += hp.sep_margin.map_or(sep, |m| sep.max(-m));
        }
    }
    t
}

// ---- gradients ----

fn unit_counts(model: &ProtoModel, batch: &[&PreparedEmail]) -> [usize; 3] {
    let text = model.config.variant.text;
    let content = model.config.components.content;
    let mut n = [0; 3];
    for p in batch {
        if text {
            n[0] += 1;
            if content {
                n[1] += p.sentences.len();
            }
        }
        if model.graph_encoder().is_some() {
            n[2] += p.phrases.len();
        }
    }
    n
}

fn class_mask(rows: usize, class_of: &[u8], label: u8, own: bool) -> Vec<bool> {
    let mut m = Vec::with_capacity(rows * class_of.len());
    for _ in 0..rows {
        m.extend(class_of.iter().map(|&c| (c == label) == own));
    }
    m
}

/// Per-granularity coefficient on the separation term, zeroed where the
/// optional margin clamp is active on this batch.
fn sep_coefficients(model: &ProtoModel, batch: &[&PreparedEmail], hp: &Hyperparams) -> [f64; 3] {
    let mut coef = [hp.gamma; 3];
    let Some(margin) = hp.sep_margin else {
        return coef;
    };
    let mut units: [(Vec<Vec<f64>>, Vec<u8>); 3] = Default::default();
    for p in batch {
        let y = p.label.expect("labeled example");
        let mv = model.encode_views(p);
        if model.config.variant.text {
            units[0].0.push(mv.document);
            units[0].1.push(y);
        }
        units[1].1.extend(std::iter::repeat_n(y, mv.sentences.len()));
        units[1].0.extend(mv.sentences);
        units[2].1.extend(std::iter::repeat_n(y, mv.phrases.len()));
        units[2].0.extend(mv.phrases);
    }
    for g in model.active_granularities() {
        if let Some(bank) = model.banks.get(g) {
            let (u, l) = &units[g.index()];
            if loss_sep(u, l, bank) < -margin {
                coef[g.index()] = 0.0;
            }
        }
    }
    coef
}

struct ExampleContext<'a> {
    model: &'a ProtoModel,
    hp: &'a Hyperparams,
    weight_sum: f64,
    unit_counts: [usize; 3],
    sep_coef: [f64; 3],
}

impl ExampleContext<'_> {
    /// CE, clustering and separation contributions of one example.
    fn example(&self, p: &PreparedEmail) -> (LossTerms, Gradients) {
        let model = self.model;
        let y = p.label.expect("labeled example");
        let mut tape = Tape::new(model.store());
        let f = model.forward_tape(&mut tape, p, Overrides::default());
        let mut terms = LossTerms::default();
        let mut parts: Vec<Var> = Vec::new();
        let c = self.hp.class_weight(y);
        if self.weight_sum > 0.0 && c > 0.0 {
            let ls = tape.log_softmax_rows(f.logits);
            let nll = tape.pick(ls, &[y as usize]);
            let s = -c / self.weight_sum;
            terms.ce = -tape.scalar(nll) * c / self.weight_sum;
            parts.push(tape.scale(nll, s));
        }
        for g in Granularity::ALL {
            let Some(d2) = f.sq_dists[g.index()] else { continue };
            let bank = model.banks.get(g).expect("active bank");
            let rows = tape.value(d2).rows();
            let n = self.unit_counts[g.index()] as f64;
            let own = tape.min_masked(d2, &class_mask(rows, &bank.class_of, y, true));
            let own = tape.sum_all(own);
            terms.cls += tape.scalar(own) / n;
            parts.push(tape.scale(own, self.hp.beta / n));
            let other = tape.min_masked(d2, &class_mask(rows, &bank.class_of, y, false));
            let other = tape.sum_all(other);
            terms.sep -= tape.scalar(other) / n;
            let coef = self.sep_coef[g.index()];
            if coef != 0.0 {
                parts.push(tape.scale(other, -coef / n));
            }
        }
        if parts.is_empty() {
            return (terms, Gradients::new(model.store().len()));
        }
        let mut total = parts[0];
        for &v in &parts[1..] {
            total = tape.add(total, v);
        }
        (terms, tape.backward(total).params)
    }
}

/// Diversity and sparsity terms, which depend only on parameters.
fn parameter_terms(model: &ProtoModel, hp: &Hyperparams) -> (LossTerms, Gradients) {
    let mut tape = Tape::new(model.store());
    let mut terms = LossTerms::default();
    let mut parts = Vec::new();
    if model.config.variant.prototypes {
        for g in model.active_granularities() {
            let (Some(pid), Some(bank)) = (model.prototype_param(g), model.banks.get(g)) else { continue };
            let n = bank.len();
            let mut mask = Matrix::zeros(n, n);
            for q in 0..n {
                for r in 0..n {
                    if q != r && bank.class_of[q] == bank.class_of[r] {
                        mask.set(q, r, 1.0);
                    }
                }
            }
            let p = tape.param(pid);
            let cos = tape.cosine_matrix(p);
            let shifted = tape.add_scalar(cos, -hp.theta);
            let hinge = tape.relu(shifted);
            let mask = tape.constant(mask);
            let within = tape.mul(hinge, mask);
            let div = tape.sum_all(within);
            terms.div += tape.scalar(div);
            parts.push(tape.scale(div, hp.alpha));
        }
    }
    let (w, _) = model.head_params();
    let w = tape.param(w);
    let a = tape.abs(w);
    let spa = tape.sum_all(a);
    terms.spa = tape.scalar(spa);
    parts.push(tape.scale(spa, hp.delta));
    let mut total = parts[0];
    for &v in &parts[1..] {
        total = tape.add(total, v);
    }
    (terms, tape.backward(total).params)
}

/// Objective terms and parameter gradients of the total loss on one batch.
pub fn batch_gradients(
    model: &ProtoModel,
    batch: &[&PreparedEmail],
    hp: &Hyperparams,
    threads: usize,
) -> (LossTerms, Gradients) {
    let ctx = ExampleContext {
        model,
        hp,
        weight_sum: batch.iter().map(|p| hp.class_weight(p.label.expect("labeled example"))).sum(),
        unit_counts: unit_counts(model, batch),
        sep_coef: sep_coefficients(model, batch, hp),
    };
    let chunks: Vec<&[&PreparedEmail]> = batch.chunks(GRAD_CHUNK).collect();
    let partial = parallel_map(&chunks, threads, |chunk| {
        let mut terms = LossTerms::default();
        let mut grads = Gradients::new(model.store().len());
        for p in chunk.iter() {
            let (t, g) = ctx.example(p);
            terms.add(&t);
            grads.merge(&g);
        }
        (terms, grads)
    });
    let (mut terms, mut grads) = parameter_terms(model, hp);
    for (t, g) in &partial {
        terms.add(t);
        grads.merge(g);
    }
    if let Some(m) = hp.sep_margin {
        terms.sep = terms.sep.max(-m * model.active_granularities().len() as f64);
    }
    (terms, grads)
}

// ---- metrics ----

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: [ClassMetrics; 2],
    /// `confusion[true][predicted]`.
    pub confusion: [[u64; 2]; 2],
}

impl Metrics {
    /// Standard definitions; a zero denominator yields 0.
    pub fn from_labels(y_true: &[u8], y_pred: &[u8]) -> Self {
        assert_eq!(y_true.len(), y_pred.len());
        let mut confusion = [[0u64; 2]; 2];
        for (&t, &p) in y_true.iter().zip(y_pred) {
            confusion[t as usize][p as usize] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn from_confusion(confusion: [[u64; 2]; 2]) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let n: u64 = confusion.iter().flatten().sum();
        let mut per_class = [ClassMetrics::default(); 2];
        for (c, m) in per_class.iter_mut().enumerate() {
            let tp = confusion[c][c];
            let predicted = confusion[0][c] + confusion[1][c];
            let support = confusion[c][0] + confusion[c][1];
            m.precision = ratio(tp, predicted);
            m.recall = ratio(tp, support);
            m.f1 = if m.precision + m.recall == 0.0 {
                0.0
            } else {
                2.0 * m.precision * m.recall / (m.precision + m.recall)
            };
            m.support = support;
        }
        let macro_f1 = (per_class[0].f1 + per_class[1].f1) / 2.0;
        let weighted_f1 = if n == 0 {
            0.0
        } else {
            per_class.iter().map(|m| m.f1 * m.support as f64).sum::<f64>() / n as f64
        };
        Self {
            macro_f1,
            weighted_f1,
            accuracy: ratio(confusion[0][0] + confusion[1][1], n),
            per_class,
            confusion,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "weighted_f1\t{:.6}", self.weighted_f1);
        let _ = writeln!(s, "macro_f1\t{:.6}", self.macro_f1);
        let _ = writeln!(s, "accuracy\t{:.6}", self.accuracy);
        for (c, m) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                s,
                "class_{c}\tprecision={:.6}\trecall={:.6}\tf1={:.6}\tsupport={}",
                m.precision, m.recall, m.f1, m.support
            );
        }
        let _ = writeln!(s, "confusion\t[[{}, {}], [{}, {}]]", self.confusion[0][0], self.confusion[0][1], self.confusion[1][0], self.confusion[1][1]);
        s
    }
}

pub fn evaluate(model: &ProtoModel, examples: &[PreparedEmail], threads: usize) -> Metrics {
    let preds = parallel_map(examples, threads, |p| model.predict(p).label);
    let truth: Vec<u8> = examples.iter().map(|p| p.label.expect("labeled example")).collect();
    Metrics::from_labels(&truth, &preds)
}

// ---- training loop ----

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: LossTerms,
    pub total_loss: f64,
    /// Validation scores of the epoch's checkpoint after projection.
    pub validation_weighted_f1: f64,
    pub validation_macro_f1: f64,
    /// Whether the training state itself was projected after this epoch.
    pub projected: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epochs after which prototypes were projected.
    pub projection_events: Vec<usize>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    /// Validation metrics of the returned, finally projected model.
    pub final_validation: Option<Metrics>,
    pub wall_clock_seconds: f64,
}

impl RunHistory {
    /// Tab-separated per-epoch log.
    pub fn to_text(&self) -> String {
        let mut s = String::from("epoch\ttotal\tce\tdiv\tcls\tsep\tspa\tval_weighted_f1\tval_macro_f1\tprojected\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                e.epoch,
                e.total_loss,
                e.losses.ce,
                e.losses.div,
                e.losses.cls,
                e.losses.sep,
                e.losses.spa,
                e.validation_weighted_f1,
                e.validation_macro_f1,
                e.projected
            );
        }
        s
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub threads: usize,
    /// Store keyphrase material for edit suggestions after the final projection.
    pub edit_material: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            threads: crate::model::default_threads(),
            edit_material: true,
        }
    }
}

#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub history: RunHistory,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "training aborted after {} epochs: {}", self.history.epochs.len(), self.error)
    }
}

impl std::error::Error for TrainAbort {}

/// Trains in place. On a non-finite loss the model is restored to the last
/// good state before returning the abort.
pub fn train(
    model: &mut ProtoModel,
    train_set: &[PreparedEmail],
    validation: &[PreparedEmail],
    hp: &Hyperparams,
    opts: TrainOptions,
) -> std::result::Result<RunHistory, TrainAbort> {
    let start = Instant::now();
    let mut history = RunHistory::default();
    let abort = |error: Error, history: RunHistory| TrainAbort { error, history };
    if let Err(e) = hp.validate() {
        return Err(abort(e, history));
    }
    if train_set.iter().chain(validation).any(|p| p.label.is_none()) {
        return Err(abort(Error::Config("training and validation examples need labels".into()), history));
    }
    if hp.epochs == 0 {
        history.wall_clock_seconds = start.elapsed().as_secs_f64();
        return Ok(history);
    }
    if train_set.is_empty() {
        return Err(abort(Error::EmptyInput("training set".into()), history));
    }
    let threads = opts.threads.max(1);
    if let Err(e) = model.initialize_prototypes(train_set, hp.seed, threads) {
        return Err(abort(e, history));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);
    let mut optimizer = AdamW::new(hp.learning_rate, hp.weight_decay);
    let mut best: Option<(f64, crate::autograd::ParamStore, crate::protonet::PrototypeBanks)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut batches = 0usize;
        for idx in order.chunks(hp.batch_size) {
            let batch: Vec<&PreparedEmail> = idx.iter().map(|&i| &train_set[i]).collect();
            let (terms, grads) = batch_gradients(model, &batch, hp, threads);
            let total = terms.total(hp);
            if !total.is_finite() || !grads.all_finite() {
                restore(model, &best);
                history.wall_clock_seconds = start.elapsed().as_secs_f64();
                return Err(abort(Error::NonFinite(format!("loss {total} at epoch {epoch}")), history));
            }
            optimizer.step(model.store_mut(), &grads, &[]);
            model.sync_banks();
            // updated prototypes no longer coincide with their projected units
            for g in Granularity::ALL {
                if let Some(b) = bank_mut(model, g) {
                    b.projection = None;
                }
            }
            sum.add(&terms);
            batches += 1;
        }
        let projected = (epoch + 1) % hp.projection_interval == 0;
        if projected {
            if let Err(e) = model.project(train_set, threads) {
                restore(model, &best);
                return Err(abort(e, history));
            }
            history.projection_events.push(epoch);
        }
        // score the checkpoint we would return: a projected copy of the model
        let candidate = if projected || !model.config.variant.prototypes {
            None
        } else {
            let mut c = model.clone();
            if let Err(e) = c.project(train_set, threads) {
                restore(model, &best);
                return Err(abort(e, history));
            }
            Some(c)
        };
        let scored = candidate.as_ref().unwrap_or(model);
        let val = evaluate(scored, validation, threads);
        let losses = sum.scaled(1.0 / batches as f64);
        history.epochs.push(EpochRecord {
            epoch,
            losses,
            total_loss: losses.total(hp),
            validation_weighted_f1: val.weighted_f1,
            validation_macro_f1: val.macro_f1,
            projected,
        });
        tracing::debug!(epoch, loss = losses.total(hp), val_f1 = val.weighted_f1, "epoch finished");
        if best.as_ref().is_none_or(|(f, _, _)| val.weighted_f1 > *f) {
            best = Some((val.weighted_f1, scored.store().clone(), scored.banks.clone()));
            history.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hp.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    restore(model, &best);
    if let Err(e) = model.project(train_set, threads) {
        return Err(abort(e, history));
    }
    history.projection_events.push(history.epochs.len().saturating_sub(1));
    if opts.edit_material && model.config.variant.prototypes {
        crate::edits::attach_edit_material(model, train_set, &crate::edits::Lexicons::default());
    }
    history.final_validation = Some(evaluate(model, validation, threads));
    history.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(history)
}

fn bank_mut(model: &mut ProtoModel, g: Granularity) -> Option<&mut PrototypeBank> {
    match g {
        Granularity::Document => model.banks.document.as_mut(),
        Granularity::Sentence => model.banks.sentence.as_mut(),
        Granularity::Phrase => model.banks.phrase.as_mut(),
    }
}

fn restore(model: &mut ProtoModel, best: &Option<(f64, crate::autograd::ParamStore, crate::protonet::PrototypeBanks)>) {
    if let Some((_, store, banks)) = best {
        model.banks = banks.clone();
        model.set_store(store.clone());
    }
}

// ---- significance ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub p_value: f64,
    pub degrees_of_freedom: usize,
    pub diagnostic: Option<String>,
}

/// Two-sided paired t-test with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::EmptyInput("paired t-test needs at least two pairs".into()));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        return Ok(if mean == 0.0 {
            TTest {
                t: 0.0,
                p_value: 1.0,
                degrees_of_freedom: df,
                diagnostic: None,
            }
        } else {
            TTest {
                t: mean.signum() * f64::INFINITY,
                p_value: 0.0,
                degrees_of_freedom: df,
                diagnostic: Some("differences have zero variance; t is infinite".into()),
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| Error::Config(e.to_string()))?;
    let p_value = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTest {
        t,
        p_value,
        degrees_of_freedom: df,
        diagnostic: None,
    })
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let sd = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
    };
    (mean, sd)
}

// ---- random search ----

/// Value grids for random search; defaults are the published search space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSpace {
    pub batch_size: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub positive_class_weight: Vec<f64>,
    pub prototypes: Vec<usize>,
    pub theta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<f64>,
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            batch_size: vec![16, 32, 64, 128],
            learning_rate: vec![1e-5, 2e-5, 5e-5],
            positive_class_weight: vec![0.2, 0.3, 0.4, 0.5],
            prototypes: vec![6, 10, 20, 30, 40, 50],
            theta: vec![0.2, 0.3, 0.4],
            alpha: vec![0.001, 0.005, 0.01, 0.015, 0.02],
            beta: vec![0.005, 0.01, 0.02, 0.05, 0.1],
            gamma: vec![0.001, 0.005, 0.01, 0.015, 0.02],
            delta: vec![0.001, 0.005, 0.01, 0.015, 0.02],
            lambda1: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            lambda2: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        let lens = [
            self.batch_size.len(),
            self.learning_rate.len(),
            self.positive_class_weight.len(),
            self.prototypes.len(),
            self.theta.len(),
            self.alpha.len(),
            self.beta.len(),
            self.gamma.len(),
            self.delta.len(),
            self.lambda1.len(),
            self.lambda2.len(),
        ];
        if lens.contains(&0) {
            return Err(Error::Config("every search grid needs at least one value".into()));
        }
        Ok(())
    }

    /// Draws one configuration uniformly from the grids; non-searched fields
    /// come from `base`.
    pub fn sample<R: Rng + ?Sized>(&self, base: &Hyperparams, rng: &mut R) -> Hyperparams {
        fn pick<T: Copy, R: Rng + ?Sized>(v: &[T], rng: &mut R) -> T {
            v[rng.random_range(0..v.len())]
        }
        Hyperparams {
            batch_size: pick(&self.batch_size, rng),
            learning_rate: pick(&self.learning_rate, rng),
            positive_class_weight: pick(&self.positive_class_weight, rng),
            j: pick(&self.prototypes, rng),
            k: pick(&self.prototypes, rng),
            m: pick(&self.prototypes, rng),
            theta: pick(&self.theta, rng),
            alpha: pick(&self.alpha, rng),
            beta: pick(&self.beta, rng),
            gamma: pick(&self.gamma, rng),
            delta: pick(&self.delta, rng),
            lambda1: pick(&self.lambda1, rng),
            lambda2: pick(&self.lambda2, rng),
            ..base.clone()
        }
    }

    pub fn contains(&self, hp: &Hyperparams) -> bool {
        self.batch_size.contains(&hp.batch_size)
            && self.learning_rate.contains(&hp.learning_rate)
            && self.positive_class_weight.contains(&hp.positive_class_weight)
            && [hp.j, hp.k, hp.m].iter().all(|c| self.prototypes.contains(c))
            && self.theta.contains(&hp.theta)
            && self.alpha.contains(&hp.alpha)
            && self.beta.contains(&hp.beta)
            && self.gamma.contains(&hp.gamma)
            && self.delta.contains(&hp.delta)
            && self.lambda1.contains(&hp.lambda1)
            && self.lambda2.contains(&hp.lambda2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub hyperparams: Hyperparams,
    pub validation_weighted_f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Hyperparams,
    /// Trials by validation weighted F1, best first; ties keep sampling order.
    pub leaderboard: Vec<Trial>,
}

/// Samples `budget` configurations and ranks them with `score`, which
/// returns the validation weighted F1 of one trial.
pub fn random_search(
    space: &SearchSpace,
    base: &Hyperparams,
    budget: usize,
    seed: u64,
    mut score: impl FnMut(&Hyperparams) -> Result<f64>,
) -> Result<SearchResult> {
    space.validate()?;
    if budget == 0 {
        return Err(Error::Config("search budget must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut leaderboard = Vec::with_capacity(budget);
    for index in 0..budget {
        let hp = space.sample(base, &mut rng);
        let f1 = score(&hp)?;
        leaderboard.push(Trial {
            index,
            hyperparams: hp,
            validation_weighted_f1: f1,
        });
    }
    leaderboard.sort_by(|a, b| b.validation_weighted_f1.total_cmp(&a.validation_weighted_f1).then(a.index.cmp(&b.index)));
    Ok(SearchResult {
        best: leaderboard[0].hyperparams.clone(),
        leaderboard,
    })
}

// ---- ablations ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub name: String,
    pub variant: crate::model::Variant,
    pub components: crate::encoders::ComponentSet,
}

impl AblationSpec {
    pub fn new(variant: crate::model::Variant, components: crate::encoders::ComponentSet) -> Self {
        Self {
            name: format!("{} [{}]", variant.name(), components.code()),
            variant,
            components,
        }
    }
}

/// Model variants with and without prototypes over all components, then
/// component subsets under the full model.
pub fn ablation_grid() -> Vec<AblationSpec> {
    use crate::encoders::ComponentSet;
    use crate::model::Variant;
    let mut out = Vec::new();
    for (text, graph) in [(true, false), (false, true), (true, true)] {
        for prototypes in [false, true] {
            out.push(AblationSpec::new(Variant { text, graph, prototypes }, ComponentSet::ALL));
        }
    }
    for code in ["S", "O", "C", "S+C", "S+O+C"] {
        out.push(AblationSpec::new(Variant::FULL, ComponentSet::parse(code).expect("valid component code")));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub scores: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("configuration\tweighted_f1_mean\tweighted_f1_sd\truns\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{:.4}\t{:.4}\t{}", r.spec.name, r.mean, r.sd, r.scores.len());
        }
        s
    }
}

/// Runs every spec under every seed; `run` returns the test weighted F1.
pub fn ablation_run(
    specs: &[AblationSpec],
    seeds: &[u64],
    mut run: impl FnMut(&AblationSpec, u64) -> Result<f64>,
) -> Result<AblationReport> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let scores = seeds.iter().map(|&s| run(spec, s)).collect::<Result<Vec<_>>>()?;
        let (mean, sd) = mean_sd(&scores);
        rows.push(AblationRow {
            spec: spec.clone(),
            scores,
            mean,
            sd,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_reference_values() {
        assert!(loss_ce(&[[0.0, 1.0], [1.0, 0.0]], &[1, 0], 0.5) < 1e-6);
        assert!((loss_ce(&[[0.5, 0.5], [0.5, 0.5]], &[1, 0], 0.5) - 2f64.ln()).abs() < 1e-12);
        assert!((loss_ce(&[[0.75, 0.25]], &[1], 1.0) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss_ce(&[[0.75, 0.25]], &[0], 1.0), 0.0);
    }

    #[test]
    fn metrics_fixture() {
        let m = Metrics::from_labels(&[1, 1, 0, 0], &[1, 0, 0, 0]);
        assert!((m.per_class[1].f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((m.per_class[0].f1 - 0.8).abs() < 1e-12);
        assert!((m.weighted_f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        let ones = Metrics::from_labels(&[1, 1, 0, 0], &[1, 1, 1, 1]);
        assert!((ones.weighted_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn t_test_degenerate_cases() {
        let same = paired_t_test(&[0.5, 0.6, 0.7], &[0.5, 0.6, 0.7]).unwrap();
        assert_eq!((same.t, same.p_value), (0.0, 1.0));
        let shifted = paired_t_test(&[2.0; 5], &[1.0; 5]).unwrap();
        assert!(shifted.t.is_infinite() && shifted.p_value == 0.0 && shifted.diagnostic.is_some());
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
    }

    #[test]
    fn search_samples_stay_in_grid_and_repeat() {
        let space = SearchSpace::default();
        let run = |seed| random_search(&space, &Hyperparams::default(), 6, seed, |hp| Ok(hp.alpha)).unwrap();
        let a = run(3);
        assert_eq!(a, run(3));
        assert!(a.leaderboard.iter().all(|t| space.contains(&t.hyperparams)));
        assert!(a.leaderboard.windows(2).all(|w| w[0].validation_weighted_f1 >= w[1].validation_weighted_f1));
        let one = random_search(&space, &Hyperparams::default(), 1, 9, |_| Ok(0.5)).unwrap();
        assert_eq!(one.leaderboard.len(), 1);
        assert_eq!(one.best, one.leaderboard[0].hyperparams);
    }

    #[test]
    fn ablation_single_toggle_gives_one_row() {
        let specs = &ablation_grid()[..1];
        let r = ablation_run(specs, &[0, 1, 2, 3, 4], |_, s| Ok(s as f64 / 10.0)).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert!((r.rows[0].mean - 0.2).abs() < 1e-12);
        assert!(r.to_text().lines().count() == 2);
    }
}
