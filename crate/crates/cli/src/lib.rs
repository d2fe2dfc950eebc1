//! Subcommands of the `rulechat` binary.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rulechat_core::bertqa::BertQa;
use rulechat_core::decision::{Decision, ModelMove};
use rulechat_core::eval::{evaluate_predictions, EvalReport, PredictedMove};
use rulechat_core::model::{load_editor, save_editor, RuleReader};
use rulechat_core::sharc::{build_all_supervision, parse_dataset, reconstruct_trees, RawExample};
use rulechat_core::text::{DialogueState, Vocabulary};
use rulechat_core::train::{fit_bertqa, fit_editor, fit_reader, RunConfig, TrainOutcome};
use rulechat_core::{model, synthetic};
use rulechat_service::{parse_transcript, replay, Answer, Engine, Session, Sessions, Status};

#[derive(Debug, Parser)]
#[command(name = "rulechat", version, about = "Conversational machine reading over rule documents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Derive rule-span supervision from dataset files.
    Preprocess {
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the rule reader or the extractive baseline.
    Train(TrainArgs),
    /// Train the question editor next to an existing checkpoint.
    TrainEditor {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        max_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a predictions file for a dataset.
    Predict {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions (from a file or a checkpoint) against gold data.
    Evaluate {
        #[arg(long)]
        gold: PathBuf,
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ModelKind::Reader)]
        model: ModelKind,
        #[arg(long, value_enum, default_value_t = EditorUse::Auto)]
        editor: EditorUse,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Interactive dialogue in the terminal.
    Dialogue {
        #[arg(long)]
        checkpoint: PathBuf,
        /// File holding the rule document; prompted for when absent.
        #[arg(long)]
        snippet: Option<PathBuf>,
        #[arg(long)]
        question: Option<String>,
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        no_editor: bool,
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
    /// Serve the HTTP API and, optionally, a static web bundle.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long)]
        transcript: Option<PathBuf>,
        #[arg(long)]
        no_editor: bool,
    },
    /// Re-run a recorded transcript and compare every move.
    Replay {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        transcript: PathBuf,
        #[arg(long)]
        no_editor: bool,
    },
    /// Generate a synthetic corpus in dataset format.
    Synth {
        #[arg(long, default_value_t = 8)]
        trees: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Reader,
    Bertqa,
}

/// `auto`: the reader uses an editor when one is saved; the baseline emits raw spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EditorUse {
    Auto,
    On,
    Off,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Reader)]
    pub model: ModelKind,
    #[arg(long, value_enum, default_value_t = EditorUse::Auto)]
    pub editor: EditorUse,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub dev: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModelKind::Reader)]
    pub model: ModelKind,
    /// Line-delimited JSON training log.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub lambda_re: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub eval_interval: Option<u64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl TrainArgs {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut run = load_config(self.config.as_deref())?;
        let t = &mut run.train;
        macro_rules! set {
            ($($field:ident <- $flag:ident),*) => {
                $(if let Some(v) = self.$flag { t.$field = v; })*
            };
        }
        set!(lambda_re <- lambda_re, tau <- tau, learning_rate <- lr, dropout <- dropout,
             batch_size <- batch_size, max_steps <- max_steps, eval_interval <- eval_interval,
             patience <- patience, seed <- seed);
        t.validate()?;
        Ok(run)
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

fn load_data(path: &Path) -> Result<Vec<RawExample>> {
    parse_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn load_datasets(paths: &[PathBuf]) -> Result<Vec<RawExample>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(load_data(p)?);
    }
    Ok(all)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Preprocess { datasets, out } => preprocess(&datasets, &out),
        Command::Train(args) => train(&args),
        Command::TrainEditor {
            config,
            train,
            checkpoint,
            max_steps,
            seed,
        } => train_editor(config.as_deref(), &train, &checkpoint, max_steps, seed),
        Command::Predict { model, data, out } => {
            let predictor = Predictor::load(&model.checkpoint, model.model, model.editor)?;
            write_json(&out, &predictor.predict_all(&load_data(&data)?)?)
        }
        Command::Evaluate {
            gold,
            predictions,
            checkpoint,
            model,
            editor,
            report,
        } => {
            let gold = load_data(&gold)?;
            let preds = match (predictions, checkpoint) {
                (Some(p), _) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                (None, Some(dir)) => Predictor::load(&dir, model, editor)?.predict_all(&gold)?,
                (None, None) => bail!("either --predictions or --checkpoint is required"),
            };
            let result = evaluate_predictions(&gold, &preds)?;
            emit_report(&result, report.as_deref())
        }
        Command::Dialogue {
            checkpoint,
            snippet,
            question,
            scenario,
            no_editor,
            transcript,
        } => {
            let mut sessions = Sessions::new(Arc::new(Engine::load(&checkpoint, !no_editor)?));
            if let Some(path) = transcript {
                sessions = sessions.with_log(Box::new(append(&path)?));
            }
            let snippet = snippet
                .map(|p| fs::read_to_string(&p).with_context(|| format!("reading {}", p.display())))
                .transpose()?;
            let opening = Opening {
                snippet,
                question,
                scenario,
            };
            let stdin = io::stdin();
            dialogue(&sessions, opening, &mut stdin.lock(), &mut io::stdout().lock())
        }
        Command::Serve {
            port,
            host,
            checkpoint,
            static_dir,
            transcript,
            no_editor,
        } => {
            let mut sessions = Sessions::new(Arc::new(Engine::load(&checkpoint, !no_editor)?));
            if let Some(path) = transcript {
                sessions = sessions.with_log(Box::new(append(&path)?));
            }
            let addr: SocketAddr = format!("{host}:{port}").parse().context("listen address")?;
            log::info!("listening on http://{addr}");
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(rulechat_service::http::serve(addr, Arc::new(sessions), static_dir))?;
            Ok(())
        }
        Command::Replay {
            checkpoint,
            transcript,
            no_editor,
        } => {
            let engine = Arc::new(Engine::load(&checkpoint, !no_editor)?);
            let records = parse_transcript(&fs::read_to_string(&transcript)?)?;
            let report = replay(engine, &records)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.reproduced() {
                bail!("{} of {} moves differ", report.mismatches.len(), report.records);
            }
            Ok(())
        }
        Command::Synth { trees, seed, out } => write_json(&out, &synthetic::generate(trees, seed)),
    }
}

fn append(path: &Path) -> Result<File> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .with_context(|| format!("opening transcript {}", path.display()))
}

fn emit_report(report: &EvalReport, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            write_json(p, report)?;
            println!("{}", report.table());
        }
        None => {
            println!("{}", serde_json::to_string_pretty(report)?);
            eprintln!("{}", report.table());
        }
    }
    Ok(())
}

pub fn preprocess(datasets: &[PathBuf], out: &Path) -> Result<()> {
    let data = load_datasets(datasets)?;
    let supervision = build_all_supervision(&reconstruct_trees(&data));
    let spans: usize = supervision.values().map(Vec::len).sum();
    log::info!("{} trees, {} spans", supervision.len(), spans);
    write_json(out, &supervision)
}

fn summarize(outcome: &TrainOutcome) {
    let b = &outcome.best;
    println!(
        "steps {}  best step {}  micro {:.1}  macro {:.1}  bleu4 {:.1}  combined {:.1}  span f1 {:.1}",
        outcome.steps_run, b.step, b.report.micro_acc, b.report.macro_acc, b.report.bleu4, b.report.combined,
        b.spans.f1
    );
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let run = args.run_config()?;
    let train_raw = load_data(&args.train)?;
    let dev_raw = load_data(&args.dev)?;
    let mut log_file = args
        .log
        .as_ref()
        .map(|p| File::create(p).map(BufWriter::new).with_context(|| format!("creating {}", p.display())))
        .transpose()?;
    let log = log_file.as_mut().map(|w| w as &mut dyn Write);
    match args.model {
        ModelKind::Reader => {
            let fitted = fit_reader(&train_raw, &dev_raw, &run, log)?;
            fitted.reader.save_dir(&args.out, fitted.outcome.steps_run)?;
            summarize(&fitted.outcome);
        }
        ModelKind::Bertqa => {
            let (qa, outcome) = fit_bertqa(&train_raw, &dev_raw, &run, log)?;
            qa.save_dir(&args.out, outcome.steps_run)?;
            summarize(&outcome);
        }
    }
    if let Some(mut w) = log_file {
        w.flush()?;
    }
    Ok(())
}

pub fn train_editor(
    config: Option<&Path>,
    train_path: &Path,
    checkpoint: &Path,
    max_steps: Option<u64>,
    seed: Option<u64>,
) -> Result<()> {
    let mut run = load_config(config)?;
    if let Some(n) = max_steps {
        run.editor_train.max_steps = n;
    }
    if let Some(s) = seed {
        run.editor_train.seed = s;
    }
    let vocab = Vocabulary::load(&checkpoint.join(model::VOCAB_FILE))
        .with_context(|| format!("reading vocabulary from {}", checkpoint.display()))?;
    let (editor, losses) = fit_editor(&load_data(train_path)?, &vocab, &run)?;
    save_editor(&editor, &vocab, checkpoint, losses.len() as u64)?;
    if let Some(last) = losses.last() {
        println!("editor steps {}  final loss {:.4}", losses.len(), last);
    }
    Ok(())
}

/// A loaded checkpoint that maps dialogue states to moves.
pub enum Predictor {
    Reader(RuleReader, Option<rulechat_core::editor::Editor>),
    Bertqa(BertQa, Option<rulechat_core::editor::Editor>),
}

impl Predictor {
    pub fn load(dir: &Path, kind: ModelKind, editor: EditorUse) -> Result<Self> {
        let want = |default: bool| match editor {
            EditorUse::Auto => default,
            EditorUse::On => true,
            EditorUse::Off => false,
        };
        let load = |vocab: &Vocabulary, default: bool| -> Result<_> {
            if !want(default) {
                return Ok(None);
            }
            let ed = load_editor(dir, vocab)?;
            if ed.is_none() && editor == EditorUse::On {
                bail!("no {} in {}", model::EDITOR_FILE, dir.display());
            }
            Ok(ed)
        };
        Ok(match kind {
            ModelKind::Reader => {
                let reader = RuleReader::load_dir(dir)?;
                let ed = load(&reader.vocab, true)?;
                Predictor::Reader(reader, ed)
            }
            ModelKind::Bertqa => {
                let qa = BertQa::load_dir(dir)?;
                let ed = load(&qa.vocab, false)?;
                Predictor::Bertqa(qa, ed)
            }
        })
    }

    pub fn predict(&self, state: &DialogueState) -> Result<ModelMove> {
        Ok(match self {
            Predictor::Reader(r, ed) => r.predict(state, ed.as_ref())?.model_move,
            Predictor::Bertqa(q, ed) => q.predict(state, ed.as_ref())?.model_move,
        })
    }

    pub fn predict_all(&self, data: &[RawExample]) -> Result<BTreeMap<String, PredictedMove>> {
        data.iter()
            .map(|raw| {
                let m = self.predict(&raw.dialogue_state())?;
                Ok((
                    raw.utterance_id.clone(),
                    PredictedMove {
                        decision: m.decision,
                        question: m.question,
                    },
                ))
            })
            .collect()
    }
}

/// Opening fields of a terminal dialogue; missing ones are read from the input.
#[derive(Debug, Default)]
pub struct Opening {
    pub snippet: Option<String>,
    pub question: Option<String>,
    pub scenario: Option<String>,
}

fn prompt(input: &mut dyn BufRead, out: &mut dyn Write, label: &str) -> Result<Option<String>> {
    write!(out, "{label}> ")?;
    out.flush()?;
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Ok(None);
    }
    Ok(Some(line.trim().to_string()))
}

fn show(out: &mut dyn Write, session: &Session) -> Result<()> {
    let m = &session.last_move;
    match (m.decision, &m.question) {
        (Decision::Inquire, Some(q)) => writeln!(out, "system: {q}")?,
        (d, _) => writeln!(out, "system: {}", d.label())?,
    }
    Ok(())
}

/// Runs one dialogue: answers `yes`/`no`, `:explain` prints the scores, `:quit` ends early.
pub fn dialogue(sessions: &Sessions, opening: Opening, input: &mut dyn BufRead, out: &mut dyn Write) -> Result<()> {
    let mut field = |given: Option<String>, label: &str| -> Result<Option<String>> {
        match given {
            Some(v) => Ok(Some(v)),
            None => prompt(input, out, label),
        }
    };
    let (Some(snippet), Some(question), Some(scenario)) = (
        field(opening.snippet, "document")?,
        field(opening.question, "question")?,
        field(opening.scenario, "scenario")?,
    ) else {
        return Ok(());
    };
    let mut session = sessions.create(&snippet, &question, &scenario)?;
    show(out, &session)?;
    while session.status == Status::AwaitingUser {
        let Some(line) = prompt(input, out, "answer")? else {
            break;
        };
        match line.as_str() {
            ":quit" | ":q" => break,
            ":explain" => {
                writeln!(out, "{}", serde_json::to_string_pretty(&sessions.explain(&session.id)?)?)?;
                continue;
            }
            _ => {}
        }
        match line.parse::<Answer>() {
            Ok(a) => {
                session = sessions.answer(&session.id, a)?;
                show(out, &session)?;
            }
            Err(_) => writeln!(out, "please answer yes or no")?,
        }
    }
    Ok(())
}
