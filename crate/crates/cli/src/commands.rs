//! Subcommand implementations.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use protomail_core::corpus::{
    balance_and_split, enrich_interests, ingest_enron_dir, load_generic_corpus_file, write_generic_corpus, Email,
    EnrichmentTable, LabeledEmail, ReplyMarkers, SplitCorpus, SplitManifest,
};
use protomail_core::edits::{simulate_edits, suggest_edits, EditPosition, EditSimulationReport};
use protomail_core::explain::explain;
use protomail_core::model::{ModelConfig, PreparedEmail, ProtoModel};
use protomail_core::parsing::{load_parses, tokenize, ParseMap, SentenceSlot};
use protomail_core::synthetic::{generate, SyntheticConfig};
use protomail_core::training::{
    ablation_grid, ablation_run, evaluate, paired_t_test, random_search, train, Hyperparams, Metrics, RunHistory,
    TrainOptions,
};

use crate::config::Config;
use crate::service::{self, AppState};

#[derive(Debug, Parser)]
#[command(name = "protomail", version, about = "Interpretable email response prediction with prototype networks")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Configuration override, e.g. `--set training.epochs=5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// More log output; repeat for more.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, clap::Args)]
pub struct EmailArgs {
    /// Email id from the configured corpus.
    #[arg(long, conflicts_with_all = ["subject", "body"])]
    pub email_id: Option<String>,
    #[arg(long)]
    pub subject: Option<String>,
    #[arg(long)]
    pub body: Option<String>,
    #[arg(long)]
    pub recipient_org: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a planted-trigger synthetic corpus and its gold parses.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0.5)]
        positive_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Build a corpus file from an Enron maildir or a generic corpus file.
    Ingest {
        #[arg(long, conflicts_with = "generic", required_unless_present = "generic")]
        enron_dir: Option<PathBuf>,
        #[arg(long)]
        generic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit sentences for an external parser, or import its CoNLL-U output.
    ParsePrep {
        #[command(subcommand)]
        action: ParsePrepAction,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        /// Seeds the split, the weights and training order.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint on one split.
    Evaluate {
        #[arg(long, env = "PROTOMAIL_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitName,
        /// Directory for metrics.json and metrics.txt; stdout when unset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random hyperparameter search over the configured space.
    Search {
        #[arg(long)]
        out: PathBuf,
    },
    /// Variant and component ablations over several seeds.
    Ablate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Prototype evidence for one email.
    Explain {
        #[arg(long, env = "PROTOMAIL_CHECKPOINT")]
        checkpoint: PathBuf,
        #[command(flatten)]
        email: EmailArgs,
        #[arg(long, default_value_t = 3)]
        top_n: usize,
        #[arg(long)]
        json: bool,
    },
    /// Prototype-based edit suggestions for one email.
    Suggest {
        #[arg(long, env = "PROTOMAIL_CHECKPOINT")]
        checkpoint: PathBuf,
        #[command(flatten)]
        email: EmailArgs,
        /// subject, opening, main or closing; all positions when unset.
        #[arg(long)]
        position: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Flip ratio of predicted negatives in the test split per edit position.
    SimulateEdits {
        #[arg(long, env = "PROTOMAIL_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve a checkpoint over HTTP.
    Serve {
        #[arg(long, env = "PROTOMAIL_CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum ParsePrepAction {
    /// Write one tokenized block per subject and body sentence.
    Emit {
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate a CoNLL-U file against the corpus and write the valid blocks.
    Import {
        #[arg(long)]
        parses: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Corpus, parses and split for a configuration.
pub struct Dataset {
    pub corpus: Vec<LabeledEmail>,
    pub parses: Option<ParseMap>,
    pub split: SplitCorpus,
}

impl Dataset {
    pub fn load(cfg: &Config) -> Result<Self> {
        let corpus = load_corpus(cfg)?;
        let parses = load_parse_file(cfg, &corpus)?;
        let split = match &cfg.data.manifest {
            Some(p) => {
                let m: SplitManifest = serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
                SplitCorpus::from_manifest(&m, &corpus)?
            }
            None => balance_and_split(&corpus, cfg.data.seed, cfg.data.ratios)?,
        };
        Ok(Self { corpus, parses, split })
    }

    pub fn split(&self, name: SplitName) -> &[LabeledEmail] {
        match name {
            SplitName::Train => &self.split.train,
            SplitName::Val => &self.split.val,
            SplitName::Test => &self.split.test,
        }
    }

    pub fn prepare(&self, model: &ProtoModel, emails: &[LabeledEmail]) -> Vec<PreparedEmail> {
        emails
            .iter()
            .map(|e| model.prepare_labeled(&e.email, e.label, self.parses.as_ref()))
            .collect()
    }
}

fn load_corpus(cfg: &Config) -> Result<Vec<LabeledEmail>> {
    let Some(path) = &cfg.data.corpus else {
        bail!("no corpus configured; set data.corpus in the config or pass --set data.corpus=PATH");
    };
    let (mut emails, diags) = load_generic_corpus_file(path).with_context(|| format!("loading {}", path.display()))?;
    for d in &diags {
        tracing::warn!("{d}");
    }
    if let Some(p) = &cfg.data.enrichment {
        let table = EnrichmentTable::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?;
        for e in &mut emails {
            e.email = enrich_interests(e.email.clone(), &table);
        }
    }
    Ok(emails)
}

fn load_parse_file(cfg: &Config, corpus: &[LabeledEmail]) -> Result<Option<ParseMap>> {
    let Some(path) = &cfg.data.parses else {
        return Ok(None);
    };
    let ids: HashSet<String> = corpus.iter().map(|e| e.id().to_string()).collect();
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (map, diags) = load_parses(&text, Some(&ids));
    if !diags.is_empty() {
        tracing::warn!(count = diags.len(), first = %diags[0], "parse blocks dropped");
    }
    Ok(Some(map))
}

/// Trains a fresh model; the model, data and training seeds all follow `hp.seed`.
pub fn train_model(
    mut mcfg: ModelConfig,
    hp: &Hyperparams,
    data: &Dataset,
    threads: usize,
) -> Result<(ProtoModel, RunHistory)> {
    hp.apply(&mut mcfg);
    mcfg.seed = hp.seed;
    let mut model = ProtoModel::new(mcfg)?;
    let train_set = data.prepare(&model, &data.split.train);
    let val_set = data.prepare(&model, &data.split.val);
    let history = train(
        &mut model,
        &train_set,
        &val_set,
        hp,
        TrainOptions {
            threads,
            edit_material: true,
        },
    )?;
    Ok((model, history))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn select_email(cfg: &Config, model: &ProtoModel, args: &EmailArgs) -> Result<PreparedEmail> {
    if let Some(id) = &args.email_id {
        let corpus = load_corpus(cfg)?;
        let parses = load_parse_file(cfg, &corpus)?;
        let e = corpus
            .iter()
            .find(|e| e.id() == id)
            .with_context(|| format!("email {id} is not in the corpus"))?;
        return Ok(model.prepare_labeled(&e.email, e.label, parses.as_ref()));
    }
    let (Some(subject), Some(body)) = (&args.subject, &args.body) else {
        bail!("pass --email-id, or both --subject and --body");
    };
    let mut email = Email::new("cli", subject.clone(), body.clone());
    email.recipient_org = args.recipient_org.clone();
    Ok(model.prepare(&email, None))
}

pub fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    let _ = tracing_subscriber::fmt()
        .with_max_level(level)
        .with_writer(std::io::stderr)
        .try_init();
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.overrides.clone();
    if let Some(t) = cli.threads {
        overrides.push(format!("threads={t}"));
    }
    match &cli.command {
        Command::Train { epochs, seed, .. } => {
            if let Some(e) = epochs {
                overrides.push(format!("training.epochs={e}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("training.seed={s}"));
                overrides.push(format!("data.seed={s}"));
            }
        }
        Command::Serve { bind: Some(b), .. } => overrides.push(format!("service.bind={:?}", b)),
        _ => {}
    }
    let cfg = Config::load(cli.config.as_deref(), &overrides)?;
    let threads = cfg.threads();
    match cli.command {
        Command::Generate {
            out,
            count,
            positive_fraction,
            seed,
        } => {
            let c = generate(&SyntheticConfig {
                count,
                positive_fraction,
                seed,
                ..SyntheticConfig::default()
            });
            write(&out.join("corpus.jsonl"), write_generic_corpus(&c.emails)?)?;
            write(&out.join("parses.conllu"), c.to_conll())?;
            println!("wrote {} emails to {}", c.emails.len(), out.display());
        }
        Command::Ingest { enron_dir, generic, out } => {
            let (emails, diags) = match (enron_dir, generic) {
                (Some(dir), _) => ingest_enron_dir(&dir, &ReplyMarkers::default())?,
                (None, Some(file)) => load_generic_corpus_file(&file)?,
                (None, None) => bail!("pass --enron-dir or --generic"),
            };
            for d in &diags {
                eprintln!("warning: {d}");
            }
            write(&out, write_generic_corpus(&emails)?)?;
            let positives = emails.iter().filter(|e| e.label == 1).count();
            println!("{} emails ({} response, {} no response)", emails.len(), positives, emails.len() - positives);
        }
        Command::ParsePrep { action } => match action {
            ParsePrepAction::Emit { out } => {
                let corpus = load_corpus(&cfg)?;
                let mut s = String::new();
                for e in &corpus {
                    let slots = std::iter::once((SentenceSlot::Subject, e.email.subject.clone()))
                        .chain(e.email.sentences.iter().cloned().enumerate().map(|(i, t)| (SentenceSlot::Body(i), t)));
                    for (slot, text) in slots {
                        let toks = tokenize(&text);
                        if toks.is_empty() {
                            continue;
                        }
                        s.push_str(&format!("# email_id = {}\n# sent_index = {slot}\n# text = {text}\n", e.id()));
                        for (i, t) in toks.iter().enumerate() {
                            s.push_str(&format!("{}\t{t}\t_\t_\t_\n", i + 1));
                        }
                        s.push('\n');
                    }
                }
                write(&out, s)?;
            }
            ParsePrepAction::Import { parses, out } => {
                let corpus = load_corpus(&cfg)?;
                let ids: HashSet<String> = corpus.iter().map(|e| e.id().to_string()).collect();
                let (map, diags) = load_parses(&fs::read_to_string(&parses)?, Some(&ids));
                for d in &diags {
                    eprintln!("warning: {d}");
                }
                let mut s = String::new();
                for ((id, slot), g) in &map {
                    g.write_conll(id, *slot, &mut s);
                }
                write(&out, s)?;
                println!("{} parses imported, {} blocks dropped", map.len(), diags.len());
            }
        },
        Command::Train { out, .. } => {
            let data = Dataset::load(&cfg)?;
            let (model, history) = train_model(cfg.model_config(), &cfg.training, &data, threads)?;
            model.save(&out.join("checkpoint"))?;
            write(&out.join("manifest.json"), serde_json::to_string_pretty(&data.split.manifest())?)?;
            write(&out.join("history.tsv"), history.to_text())?;
            write(&out.join("history.json"), serde_json::to_string_pretty(&history_without_clock(&history))?)?;
            if let Some(m) = &history.final_validation {
                write(&out.join("validation_metrics.json"), serde_json::to_string_pretty(m)?)?;
                println!("validation weighted F1 {:.4}", m.weighted_f1);
            }
            println!("checkpoint {} written to {}", model.version(), out.join("checkpoint").display());
        }
        Command::Evaluate { checkpoint, split, out } => {
            let model = ProtoModel::load(&checkpoint)?;
            let data = Dataset::load(&cfg)?;
            let examples = data.prepare(&model, data.split(split));
            let m = evaluate(&model, &examples, threads);
            emit_metrics(&m, out.as_deref())?;
        }
        Command::Search { out } => {
            let data = Dataset::load(&cfg)?;
            let base = cfg.model_config();
            let result = random_search(&cfg.search.space, &cfg.training, cfg.search.budget, cfg.search.seed, |hp| {
                let (_, h) = train_model(base.clone(), hp, &data, threads).map_err(to_core)?;
                Ok(h.final_validation.map_or(0.0, |m| m.weighted_f1))
            })?;
            write(&out.join("search.json"), serde_json::to_string_pretty(&result)?)?;
            let mut s = String::from("rank\ttrial\tval_weighted_f1\tlearning_rate\tbatch_size\tj\tk\tm\n");
            for (r, t) in result.leaderboard.iter().enumerate() {
                let h = &t.hyperparams;
                s.push_str(&format!(
                    "{}\t{}\t{:.4}\t{}\t{}\t{}\t{}\t{}\n",
                    r + 1,
                    t.index,
                    t.validation_weighted_f1,
                    h.learning_rate,
                    h.batch_size,
                    h.j,
                    h.k,
                    h.m
                ));
            }
            write(&out.join("search.tsv"), &s)?;
            print!("{s}");
        }
        Command::Ablate { out } => {
            let mut specs = ablation_grid();
            if !cfg.ablation.only.is_empty() {
                specs.retain(|s| cfg.ablation.only.contains(&s.name));
            }
            let report = ablation_run(&specs, &cfg.ablation.seeds, |spec, seed| {
                let mut c = cfg.clone();
                c.data.seed = seed;
                let data = Dataset::load(&c).map_err(to_core)?;
                let mut mcfg = cfg.model_config();
                mcfg.variant = spec.variant;
                mcfg.components = spec.components;
                let hp = Hyperparams { seed, ..cfg.training.clone() };
                let (model, _) = train_model(mcfg, &hp, &data, threads).map_err(to_core)?;
                let test = data.prepare(&model, &data.split.test);
                Ok(evaluate(&model, &test, threads).weighted_f1)
            })?;
            let mut text = report.to_text();
            if let Some(full) = report.rows.iter().find(|r| r.spec.variant == protomail_core::model::Variant::FULL && r.spec.components == protomail_core::encoders::ComponentSet::ALL) {
                text.push_str("\npaired t-test against the full model\nconfiguration\tt\tp\n");
                for r in report.rows.iter().filter(|r| r.spec != full.spec) {
                    match paired_t_test(&full.scores, &r.scores) {
                        Ok(t) => text.push_str(&format!("{}\t{:.4}\t{:.4}\n", r.spec.name, t.t, t.p_value)),
                        Err(e) => text.push_str(&format!("{}\tn/a ({e})\n", r.spec.name)),
                    }
                }
            }
            write(&out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
            write(&out.join("ablation.txt"), &text)?;
            print!("{text}");
        }
        Command::Explain {
            checkpoint,
            email,
            top_n,
            json,
        } => {
            let model = ProtoModel::load(&checkpoint)?;
            let p = select_email(&cfg, &model, &email)?;
            let report = explain(&model, &p, top_n)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.to_text(&p.email.subject, &p.sentence_texts()));
            }
        }
        Command::Suggest {
            checkpoint,
            email,
            position,
            json,
        } => {
            let model = ProtoModel::load(&checkpoint)?;
            let p = select_email(&cfg, &model, &email)?;
            let positions = match position {
                Some(name) => vec![EditPosition::parse(&name)?],
                None => cfg.edits.positions.clone(),
            };
            let opts = cfg.edits.suggest_options(cfg.data.seed)?;
            let mut all = Vec::new();
            for pos in positions {
                all.extend(suggest_edits(&model, &p, pos, &opts)?);
            }
            all.sort_by(|a, b| b.after.total_cmp(&a.after));
            if json {
                println!("{}", serde_json::to_string_pretty(&all)?);
            } else if all.is_empty() {
                println!("no applicable suggestions");
            } else {
                println!("position\tbefore\tafter\tprototype\toriginal\treplacement");
                for s in &all {
                    println!(
                        "{}\t{:.4}\t{:.4}\t{}{}\t{}\t{}",
                        s.position,
                        s.before,
                        s.after,
                        s.granularity.letter(),
                        s.prototype,
                        s.original.text,
                        s.replacement
                    );
                }
            }
        }
        Command::SimulateEdits { checkpoint, out } => {
            let model = ProtoModel::load(&checkpoint)?;
            let data = Dataset::load(&cfg)?;
            let test = data.prepare(&model, &data.split.test);
            let opts = cfg.edits.suggest_options(0)?;
            let runs = simulate_edits(&model, &test, &cfg.edits.positions, &cfg.edits.seeds, &opts, threads)?;
            let report = EditSimulationReport::from_runs(cfg.data.name.clone(), runs);
            match out {
                Some(dir) => {
                    write(&dir.join("edit_simulation.json"), serde_json::to_string_pretty(&report)?)?;
                    write(&dir.join("edit_simulation.txt"), report.to_text())?;
                }
                None => print!("{}", report.to_text()),
            }
        }
        Command::Serve { checkpoint, .. } => {
            let model = ProtoModel::load(&checkpoint)?;
            if let Err(e) = model.require_projected() {
                tracing::warn!("{e}; /explain and /suggest will answer 503");
            }
            let state = Arc::new(AppState::new(model, cfg.edits.suggest_options(0)?, cfg.service.default_top_n));
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(threads).enable_all().build()?;
            rt.block_on(service::serve(state, &cfg.service.bind))?;
        }
    }
    Ok(())
}

fn to_core(e: anyhow::Error) -> protomail_core::Error {
    match e.downcast::<protomail_core::Error>() {
        Ok(e) => e,
        Err(e) => protomail_core::Error::Config(format!("{e:#}")),
    }
}

/// History with the wall-clock field zeroed, so repeated runs compare byte for byte.
fn history_without_clock(h: &RunHistory) -> RunHistory {
    RunHistory {
        wall_clock_seconds: 0.0,
        ..h.clone()
    }
}

fn emit_metrics(m: &Metrics, out: Option<&Path>) -> Result<()> {
    match out {
        Some(dir) => {
            write(&dir.join("metrics.json"), serde_json::to_string_pretty(m)?)?;
            write(&dir.join("metrics.txt"), m.to_text())?;
        }
        None => print!("{}", m.to_text()),
    }
    Ok(())
}
