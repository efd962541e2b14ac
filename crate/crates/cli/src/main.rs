use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use chrono::NaiveDate;
use clap::{Parser, Subcommand, ValueEnum};

use hockeygen::game::{derive_features, GameRecord};
use hockeygen::linearize::detokenize;
use hockeygen::metrics::{corpus_wer, nist, rouge_l, bleu, cider, EvalPair};
use hockeygen::pgen::{self, load_model, load_state, save_model, PgModel, TrainState};
use hockeygen::pipeline::{
    corpus_stats, encode_examples, evaluate_generator, new_generator, run_report, Dataset, PipelineConfig,
    PipelineError,
};
use hockeygen::select::{crf_train, evaluate_selection, featurize_sequence, CrfModel};
use hockeygen::stats::{pair_articles, parse_stats_file, ArticleDocument, StatsDocument};
use hockeygen::synth::{build_corpus, Split};

#[derive(Parser)]
#[command(name = "hockeygen", version, about = "Ice hockey statistics to news text")]
struct Cli {
    /// TOML configuration; `HOCKEYGEN_<SECTION>_<KEY>` variables override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log verbosity (repeat for more).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Valid => Split::Valid,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Parse statistics files into game JSONL.
    Parse {
        files: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pair games with news articles by date and team mentions.
    Pair {
        #[arg(long)]
        games: PathBuf,
        /// JSONL with `id`, `date` and `raw_text` per article.
        #[arg(long)]
        articles: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the synthetic corpus.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        games: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the event selector on a corpus directory.
    SelectTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the event selector on a split.
    SelectEval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Train the generator; resumes from a training-state checkpoint if given.
    GenTrain {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Train up to this step instead of the configured maximum.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score the generator on a split, each event generated with its
    /// reference length bucket.
    GenEval {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        /// Write detokenized outputs, one per line.
        #[arg(long)]
        hyp_out: Option<PathBuf>,
    },
    /// Generate a report for a statistics file.
    Report {
        stats: PathBuf,
        #[arg(long)]
        crf: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        beam: Option<usize>,
    },
    /// Corpus counts and lexical diversity.
    Stats {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Metric suite on line-aligned hypothesis and reference files.
    Eval {
        #[arg(long)]
        hyp: PathBuf,
        /// One or more reference files, each line-aligned with `--hyp`.
        #[arg(long, required = true, num_args = 1..)]
        reference: Vec<PathBuf>,
        #[arg(long)]
        wer: bool,
    },
}

/// A failure with its category for the error line.
#[derive(Debug)]
struct Fault {
    kind: &'static str,
    message: String,
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Fault {}

fn data_fault(message: impl Into<String>) -> anyhow::Error {
    Fault { kind: "data", message: message.into() }.into()
}

fn exit_code(kind: &str) -> u8 {
    match kind {
        "usage" | "config" => 2,
        "data" => 3,
        "io" => 4,
        _ => 5,
    }
}

fn classify(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Fault>() {
            return f.kind;
        }
        if let Some(p) = cause.downcast_ref::<PipelineError>() {
            return p.kind();
        }
        if let Some(e) = cause.downcast_ref::<pgen::PgError>() {
            return match e {
                pgen::PgError::Config(_) => "config",
                pgen::PgError::Checkpoint(_) => "model",
                pgen::PgError::Io(_) => "io",
                _ => "data",
            };
        }
        if let Some(e) = cause.downcast_ref::<hockeygen::select::CrfError>() {
            use hockeygen::select::CrfError;
            return match e {
                CrfError::Format(_) => "model",
                CrfError::Io(_) => "io",
                _ => "data",
            };
        }
        if let Some(e) = cause.downcast_ref::<hockeygen::synth::SynthError>() {
            use hockeygen::synth::SynthError;
            return match e {
                SynthError::Config(_) => "config",
                SynthError::Io(_) => "io",
                _ => "data",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "data"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string();
            eprintln!("{}", e.render());
            eprintln!("error: kind=usage message={}", serde_json::to_string(&first).unwrap_or_default());
            return ExitCode::from(exit_code("usage"));
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = classify(&e);
            let message = format!("{e:#}");
            eprintln!("error: kind={kind} message={}", serde_json::to_string(&message).unwrap_or_default());
            ExitCode::from(exit_code(kind))
        }
    }
}

fn output(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn read_text(path: &Path) -> anyhow::Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_games(path: &Path) -> anyhow::Result<Vec<GameRecord>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| GameRecord::from_json_line(l).map_err(|e| data_fault(format!("{}:{}: {e}", path.display(), i + 1))))
        .collect()
}

fn load_crf(path: &Path) -> anyhow::Result<CrfModel> {
    let f = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(CrfModel::load(BufReader::new(f)).with_context(|| format!("loading {}", path.display()))?)
}

fn load_generator(path: &Path) -> anyhow::Result<PgModel<f32>> {
    load_model(path).with_context(|| format!("loading {}", path.display()))
}

fn parse_game(path: &Path) -> anyhow::Result<GameRecord> {
    let doc = StatsDocument { raw_text: read_text(path)?, source_path: path.display().to_string() };
    let game = parse_stats_file(&doc).map_err(|e| data_fault(format!("{}: {e}", path.display())))?;
    derive_features(&game).map_err(|e| data_fault(format!("{}: {e}", path.display())))
}

#[derive(serde::Deserialize)]
struct ArticleLine {
    id: String,
    date: NaiveDate,
    raw_text: String,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = PipelineConfig::load(cli.config.as_deref())?;
    let data_dir = |d: Option<PathBuf>| d.unwrap_or_else(|| config.paths.data_dir.clone());
    match cli.command {
        Command::Parse { files, out } => {
            let mut text = String::new();
            for f in &files {
                text.push_str(&parse_game(f)?.to_json_line());
                text.push('\n');
            }
            output(out.as_deref(), &text)
        }
        Command::Pair { games, articles, out } => {
            let games = load_games(&games)?;
            let teams: Vec<String> = games
                .iter()
                .filter_map(GameRecord::context)
                .flat_map(|c| [c.home_team, c.guest_team])
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .collect();
            let mut docs = Vec::new();
            for (i, line) in read_text(&articles)?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let a: ArticleLine = serde_json::from_str(line)
                    .map_err(|e| data_fault(format!("{}:{}: {e}", articles.display(), i + 1)))?;
                docs.push(ArticleDocument::new(a.id, a.raw_text, a.date, &teams));
            }
            let pairing = pair_articles(&games, &docs);
            output(out.as_deref(), &(serde_json::to_string_pretty(&pairing)? + "\n"))
        }
        Command::Synth { out, games, seed } => {
            let mut cfg = config.synth.clone();
            cfg.n_games = games.unwrap_or(cfg.n_games);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let corpus = build_corpus(&cfg)?;
            let dir = data_dir(out);
            corpus.write(&dir)?;
            println!("wrote {} games and {} aligned events to {}", corpus.games.len(), corpus.examples.len(), dir.display());
            Ok(())
        }
        Command::SelectTrain { data, out } => {
            let ds = Dataset::load(&data_dir(data))?;
            let seqs: Vec<_> = ds
                .games_in(Split::Train)
                .into_iter()
                .map(|g| (featurize_sequence(g), ds.gold_labels(g)))
                .collect();
            if seqs.is_empty() {
                return Err(data_fault("no training games"));
            }
            let outcome = crf_train(&seqs, &config.crf)?;
            let f = fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            outcome.model.save(std::io::BufWriter::new(f))?;
            println!(
                "iterations={} converged={} objective={:.6} model={}",
                outcome.iterations,
                outcome.converged,
                outcome.final_objective,
                out.display()
            );
            Ok(())
        }
        Command::SelectEval { data, model, split } => {
            let ds = Dataset::load(&data_dir(data))?;
            let crf = load_crf(&model)?;
            let (mut pred, mut gold, mut kinds) = (Vec::new(), Vec::new(), Vec::new());
            for g in ds.games_in(split.into()) {
                pred.push(crf.predict(&featurize_sequence(g)));
                gold.push(ds.gold_labels(g));
                kinds.push(g.events.iter().map(|e| e.kind()).collect::<Vec<_>>());
            }
            let scores = evaluate_selection(&pred, &gold, &kinds)?;
            let mut text = String::new();
            let line = |name: &str, p: &hockeygen::select::Prf| {
                format!("{name}\tprecision={:.4}\trecall={:.4}\tf1={:.4}\n", p.precision, p.recall, p.f1)
            };
            text.push_str(&line("overall", &scores.overall));
            for (k, p) in &scores.per_type {
                text.push_str(&line(k.as_str(), p));
            }
            output(None, &text)
        }
        Command::GenTrain { data, out, checkpoint_dir, resume, steps } => {
            let ds = Dataset::load(&data_dir(data))?;
            let train = ds.examples_in(Split::Train);
            let valid = ds.examples_in(Split::Valid);
            if train.is_empty() {
                return Err(data_fault("no training examples"));
            }
            let state: TrainState<f32> = match &resume {
                Some(p) => load_state(p).with_context(|| format!("resuming from {}", p.display()))?,
                None => TrainState::new(new_generator(&config.generator, &train, ds.manifest.buckets)?),
            };
            let tr = encode_examples(&state.model, &train)?;
            let va = encode_examples(&state.model, &valid)?;
            let until = steps.unwrap_or(state.model.config.max_steps);
            let outcome = pgen::train_resume(state, &tr, &va, checkpoint_dir.as_deref(), until)?;
            let mut log = String::new();
            for entry in &outcome.log {
                log.push_str(&format!("{entry}\n"));
            }
            output(None, &log)?;
            save_model(&outcome.model, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("best_step={} model={}", outcome.best_step, out.display());
            Ok(())
        }
        Command::GenEval { data, model, split, beam, limit, hyp_out } => {
            let ds = Dataset::load(&data_dir(data))?;
            let pg = load_generator(&model)?;
            let mut examples = ds.examples_in(split.into());
            examples.truncate(limit.unwrap_or(usize::MAX));
            let beam = beam.unwrap_or(pg.config.beam_size);
            let names: HashSet<String> = ds
                .examples_in(split.into())
                .iter()
                .flat_map(|e| e.target())
                .filter(|t| pg.tgt_vocab.get(t).is_none() && t.chars().next().is_some_and(char::is_uppercase))
                .collect();
            let ev = evaluate_generator(&pg, &examples, None, beam, &names)?;
            if let Some(p) = hyp_out {
                let lines: String = ev.pairs.iter().map(|x| detokenize(&x.hypothesis) + "\n").collect();
                fs::write(&p, lines).with_context(|| format!("writing {}", p.display()))?;
            }
            output(
                None,
                &format!(
                    "examples={} bleu={:.4} wer={:.4} exact={} truncated={} unseen_names_emitted={}/{}\n",
                    ev.pairs.len(),
                    ev.bleu,
                    ev.wer,
                    ev.exact,
                    ev.truncated,
                    ev.name_emitted,
                    ev.name_total
                ),
            )
        }
        Command::Report { stats, crf, generator, beam } => {
            let game = parse_game(&stats)?;
            let crf = load_crf(&crf)?;
            let pg = load_generator(&generator)?;
            let report = run_report(&game, &crf, &pg, beam.unwrap_or(pg.config.beam_size))?;
            for s in report.sentences.iter().filter(|s| s.flag.is_some()) {
                log::warn!("event {} not verbalized: {}", s.event_index, s.flag.as_deref().unwrap_or_default());
            }
            if report.unk_count > 0 {
                log::warn!("{} unknown-word tokens in the report", report.unk_count);
            }
            output(None, &format!("{}\n", report.text()))
        }
        Command::Stats { data } => {
            let ds = Dataset::load(&data_dir(data))?;
            let s = corpus_stats(&ds.games, &ds.examples, None, config.metrics.sttr_segment);
            output(None, &format!("{s}\n"))
        }
        Command::Eval { hyp, reference, wer } => {
            let hyps: Vec<String> = read_text(&hyp)?.lines().map(str::to_string).collect();
            let mut refs: Vec<Vec<String>> = Vec::new();
            for r in &reference {
                let lines: Vec<String> = read_text(r)?.lines().map(str::to_string).collect();
                if lines.len() != hyps.len() {
                    return Err(data_fault(format!(
                        "line count mismatch: {} has {} lines, {} has {}",
                        hyp.display(),
                        hyps.len(),
                        r.display(),
                        lines.len()
                    )));
                }
                refs.push(lines);
            }
            let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
            let corpus: Vec<EvalPair> = hyps
                .iter()
                .enumerate()
                .map(|(i, h)| EvalPair::new(split(h), refs.iter().map(|r| split(&r[i])).collect()))
                .collect();
            let m = &config.metrics;
            let mut scores = BTreeMap::new();
            scores.insert("BLEU", bleu(&corpus, m.bleu_max_n)?);
            scores.insert("NIST", nist(&corpus, m.nist_max_n)?);
            scores.insert("ROUGE_L", rouge_l(&corpus)?);
            scores.insert("CIDEr", cider(&corpus, m.cider_max_n)?.value);
            if wer {
                scores.insert("WER", corpus_wer(&corpus, m.wer_ignore_punctuation)?);
            }
            let text: String = scores.iter().map(|(k, v)| format!("{k}: {v:.4}\n")).collect();
            output(None, &text)
        }
    }
}
