//! End-to-end orchestration shared by the command-line tool and the tests:
//! configuration, report assembly, corpus statistics and generator data
//! preparation and evaluation.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::game::{derive_features, Event, EventKind, GameRecord};
use crate::linearize::{detokenize, tokenize_target, LengthBucket};
use crate::metrics::{bleu, corpus_wer, sttr, EvalPair, MetricError, STTR_SEGMENT};
use crate::pgen::{
    generate, generate_with_bucket, Example, PgConfig, PgError, PgModel, Real, Vocabulary, UNK,
};
use crate::select::{featurize_sequence, CrfModel, CrfTrainConfig, Label};
use crate::synth::{AlignedExample, Split, SplitManifest, SynthConfig, SynthCorpus};

/// Environment variables starting with this override config keys:
/// `HOCKEYGEN_<SECTION>_<KEY>`, e.g. `HOCKEYGEN_GENERATOR_MAX_STEPS=100`.
pub const ENV_PREFIX: &str = "HOCKEYGEN_";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Generator(#[from] PgError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl PipelineError {
    /// Short category for machine-readable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            PipelineError::Config(_) | PipelineError::Generator(PgError::Config(_)) => "config",
            PipelineError::Io(_) | PipelineError::Generator(PgError::Io(_)) => "io",
            PipelineError::Generator(PgError::Checkpoint(_)) => "model",
            _ => "data",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig { data_dir: "data".into(), model_dir: "models".into(), output_dir: "out".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricOptions {
    pub bleu_max_n: usize,
    pub nist_max_n: usize,
    pub cider_max_n: usize,
    pub wer_ignore_punctuation: bool,
    pub sttr_segment: usize,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions { bleu_max_n: 4, nist_max_n: 5, cider_max_n: 4, wer_ignore_punctuation: false, sttr_segment: STTR_SEGMENT }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub crf: CrfTrainConfig,
    pub generator: PgConfig,
    pub synth: SynthConfig,
    pub metrics: MetricOptions,
}

impl PipelineConfig {
    /// Parses TOML text, then applies overrides from `env`.
    pub fn from_toml_with_env<I>(text: &str, env: I) -> Result<Self, PipelineError>
    where
        I: IntoIterator<Item = (String, String)>,
    {
        let mut root: toml::Table = text.parse().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        let sections = ["paths", "crf", "generator", "synth", "metrics"];
        let mut overrides: Vec<(String, String)> = env.into_iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
        overrides.sort();
        for (key, raw) in overrides {
            let rest = key[ENV_PREFIX.len()..].to_lowercase();
            let (section, field) = sections
                .iter()
                .find_map(|s| rest.strip_prefix(s).and_then(|f| f.strip_prefix('_')).map(|f| (*s, f.to_string())))
                .ok_or_else(|| PipelineError::Config(format!("{key}: no such config section")))?;
            let value = format!("v = {raw}")
                .parse::<toml::Table>()
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or(toml::Value::String(raw.clone()));
            let table = root
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| PipelineError::Config(format!("{section} must be a table")))?;
            table.insert(field, value);
        }
        let config: PipelineConfig =
            toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| PipelineError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    /// Reads a config file (or defaults when `path` is `None`) and applies
    /// the process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, PipelineError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_env(&text, std::env::vars())
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.generator.validate()?;
        self.synth.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        let m = &self.metrics;
        if m.bleu_max_n == 0 || m.nist_max_n == 0 || m.cider_max_n == 0 || m.sttr_segment == 0 {
            return Err(PipelineError::Config("metric n-gram orders and sttr_segment must be positive".into()));
        }
        if !(self.crf.c1 >= 0.0 && self.crf.c2 >= 0.0 && self.crf.positive_label_weight > 0.0) {
            return Err(PipelineError::Config("crf c1, c2 must be non-negative and the label weight positive".into()));
        }
        Ok(())
    }
}

/// One generated sentence of a report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportSentence {
    pub event_index: usize,
    pub kind: EventKind,
    pub bucket: Option<LengthBucket>,
    pub confidence: f64,
    pub text: String,
    /// Why this event produced no usable text, if it did not.
    pub flag: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub game_id: String,
    pub sentences: Vec<ReportSentence>,
    /// Nothing but the end result was selected.
    pub fallback: bool,
    /// Unknown-word tokens left in the output.
    pub unk_count: usize,
}

impl Report {
    pub fn text(&self) -> String {
        self.sentences.iter().filter(|s| s.flag.is_none()).map(|s| s.text.as_str()).collect::<Vec<_>>().join(" ")
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.text())
    }
}

/// Order of events in a report: the end result, then timed events by time,
/// then game summaries.
fn report_order(event: &Event) -> (u8, u32) {
    match event {
        Event::EndResult { .. } => (0, 0),
        Event::Save { .. } => (2, 0),
        e => (1, e.time().map_or(0, |t| t.total_seconds())),
    }
}

/// Selects events with the CRF, verbalizes each one picking the most
/// confident length variant, and joins the sentences chronologically with
/// the end result first.
pub fn run_report<R: Real>(
    game: &GameRecord,
    crf: &CrfModel,
    pg: &PgModel<R>,
    beam_size: usize,
) -> Result<Report, PipelineError> {
    let game = derive_features(game).map_err(|e| PipelineError::Data(e.to_string()))?;
    let ctx = game.context().ok_or_else(|| PipelineError::Data(format!("game {} has no end result", game.id)))?;
    let labels = crf.predict(&featurize_sequence(&game));
    let mut selected: Vec<usize> =
        labels.iter().enumerate().filter(|(_, l)| **l == Label::Select).map(|(i, _)| i).collect();
    let only_result = selected.iter().all(|&i| game.events[i].kind() == EventKind::EndResult);
    if !selected.iter().any(|&i| game.events[i].kind() == EventKind::EndResult) {
        selected.extend(game.events.iter().position(|e| e.kind() == EventKind::EndResult));
    }
    selected.sort_by_key(|&i| (report_order(&game.events[i]), i));
    let mut sentences = Vec::with_capacity(selected.len());
    let mut unk_count = 0;
    for i in selected {
        let event = &game.events[i];
        let s = match generate(pg, event, &ctx, beam_size) {
            Ok(g) => {
                unk_count += g.decoded.ids.iter().filter(|&&id| id == UNK).count();
                let flag = if g.decoded.truncated {
                    Some("length limit reached".to_string())
                } else if g.text.is_empty() {
                    Some("empty output".to_string())
                } else {
                    None
                };
                ReportSentence {
                    event_index: i,
                    kind: event.kind(),
                    bucket: Some(g.bucket),
                    confidence: g.decoded.confidence,
                    text: g.text,
                    flag,
                }
            }
            Err(e) => {
                log::warn!("game {} event {i}: {e}", game.id);
                ReportSentence {
                    event_index: i,
                    kind: event.kind(),
                    bucket: None,
                    confidence: f64::NEG_INFINITY,
                    text: String::new(),
                    flag: Some(e.to_string()),
                }
            }
        };
        sentences.push(s);
    }
    Ok(Report { game_id: game.id.clone(), sentences, fallback: only_result, unk_count })
}

/// Size and diversity figures of an aligned corpus.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub games: usize,
    pub events: usize,
    pub events_by_type: BTreeMap<EventKind, usize>,
    pub aligned_by_type: BTreeMap<EventKind, usize>,
    pub aligned_spans: usize,
    pub sentences: usize,
    pub tokens: usize,
    pub unique_tokens: usize,
    pub sttr: f64,
    pub lemma_sttr: Option<f64>,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "games\t{}", self.games)?;
        writeln!(f, "events\t{}", self.events)?;
        for (k, n) in &self.events_by_type {
            writeln!(f, "events.{k}\t{n}")?;
        }
        for (k, n) in &self.aligned_by_type {
            writeln!(f, "aligned.{k}\t{n}")?;
        }
        writeln!(f, "aligned_spans\t{}", self.aligned_spans)?;
        writeln!(f, "sentences\t{}", self.sentences)?;
        writeln!(f, "tokens\t{}", self.tokens)?;
        writeln!(f, "unique_tokens\t{}", self.unique_tokens)?;
        write!(f, "sttr\t{:.4}", self.sttr)?;
        if let Some(l) = self.lemma_sttr {
            write!(f, "\nlemma_sttr\t{l:.4}")?;
        }
        Ok(())
    }
}

fn sentence_count(tokens: &[String]) -> usize {
    let ends = tokens.iter().filter(|t| matches!(t.as_str(), "." | "!" | "?")).count();
    let open_tail = tokens.last().is_some_and(|t| !matches!(t.as_str(), "." | "!" | "?"));
    ends + usize::from(open_tail)
}

/// Counts games, events, aligned spans, sentences and tokens, with STTR over
/// the concatenated span tokens. `lemmas`, parallel to `spans`, adds a
/// lemma-level STTR.
pub fn corpus_stats(
    games: &[GameRecord],
    spans: &[AlignedExample],
    lemmas: Option<&[Vec<String>]>,
    sttr_segment: usize,
) -> CorpusStats {
    let mut s = CorpusStats { games: games.len(), aligned_spans: spans.len(), ..Default::default() };
    for g in games {
        s.events += g.events.len();
        for e in &g.events {
            *s.events_by_type.entry(e.kind()).or_default() += 1;
        }
    }
    let mut all = Vec::new();
    for span in spans {
        *s.aligned_by_type.entry(span.event.kind()).or_default() += 1;
        let toks = tokenize_target(&span.text);
        s.sentences += sentence_count(&toks);
        all.extend(toks);
    }
    s.tokens = all.len();
    s.unique_tokens = all.iter().collect::<HashSet<_>>().len();
    s.sttr = sttr(&all, sttr_segment).value;
    s.lemma_sttr = lemmas.map(|l| sttr(&l.concat(), sttr_segment).value);
    s
}

/// A corpus directory: games, aligned spans and the split manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub games: Vec<GameRecord>,
    pub examples: Vec<AlignedExample>,
    pub manifest: SplitManifest,
}

impl Dataset {
    pub fn from_corpus(corpus: &SynthCorpus) -> Self {
        Dataset {
            games: corpus.games.clone(),
            examples: corpus.examples.clone(),
            manifest: SplitManifest::from_corpus(corpus),
        }
    }

    /// Reads `games.jsonl`, `aligned.jsonl` and `splits.json` from `dir`.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| PipelineError::Data(format!("{}: {e}", p.display())))
        };
        let data_err = |name: &str, line: usize, e: &dyn fmt::Display| PipelineError::Data(format!("{name}:{line}: {e}"));
        let mut games = Vec::new();
        for (i, line) in read("games.jsonl")?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            games.push(GameRecord::from_json_line(line).map_err(|e| data_err("games.jsonl", i + 1, &e))?);
        }
        let mut examples = Vec::new();
        for (i, line) in read("aligned.jsonl")?.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            examples.push(serde_json::from_str(line).map_err(|e| data_err("aligned.jsonl", i + 1, &e))?);
        }
        let manifest: SplitManifest =
            serde_json::from_str(&read("splits.json")?).map_err(|e| data_err("splits.json", 0, &e))?;
        Ok(Dataset { games, examples, manifest })
    }

    fn split_ids(&self, split: Split) -> HashSet<&str> {
        self.manifest.splits.get(&split).map(|v| v.iter().map(String::as_str).collect()).unwrap_or_default()
    }

    pub fn games_in(&self, split: Split) -> Vec<&GameRecord> {
        let ids = self.split_ids(split);
        self.games.iter().filter(|g| ids.contains(g.id.as_str())).collect()
    }

    pub fn examples_in(&self, split: Split) -> Vec<AlignedExample> {
        let ids = self.split_ids(split);
        self.examples.iter().filter(|e| ids.contains(e.game_id.as_str())).cloned().collect()
    }

    /// Gold labels of a game: events with an aligned span are selected.
    pub fn gold_labels(&self, game: &GameRecord) -> Vec<Label> {
        let aligned: HashSet<usize> =
            self.examples.iter().filter(|e| e.game_id == game.id).map(|e| e.event_index).collect();
        (0..game.events.len()).map(|i| Label::from_bool(aligned.contains(&i))).collect()
    }
}

/// Vocabularies built from training pairs with the configured floor.
pub fn build_vocabularies(train: &[AlignedExample], min_freq: usize) -> (Vocabulary, Vocabulary) {
    let src: Vec<Vec<String>> = train.iter().map(AlignedExample::source).collect();
    let tgt: Vec<Vec<String>> = train.iter().map(AlignedExample::target).collect();
    (Vocabulary::build(&src, min_freq), Vocabulary::build(&tgt, min_freq))
}

/// Encodes aligned examples for a model.
pub fn encode_examples<R: Real>(model: &PgModel<R>, data: &[AlignedExample]) -> Result<Vec<Example>, PgError> {
    data.iter().map(|e| model.example(&e.source(), &e.target())).collect()
}

/// Decoded test outputs and their scores.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorEval {
    pub pairs: Vec<EvalPair>,
    pub buckets: Vec<LengthBucket>,
    pub bleu: f64,
    pub wer: f64,
    /// References containing one of `watch_names`, and how many of those
    /// name occurrences appear in the output.
    pub name_total: usize,
    pub name_emitted: usize,
    pub exact: usize,
    pub truncated: usize,
}

impl GeneratorEval {
    pub fn name_rate(&self) -> f64 {
        if self.name_total == 0 {
            1.0
        } else {
            self.name_emitted as f64 / self.name_total as f64
        }
    }
}

/// Generates each example with `bucket` (the reference's own bucket when
/// `None`) and scores against the references.
pub fn evaluate_generator<R: Real>(
    model: &PgModel<R>,
    data: &[AlignedExample],
    bucket: Option<LengthBucket>,
    beam_size: usize,
    watch_names: &HashSet<String>,
) -> Result<GeneratorEval, PipelineError> {
    let mut pairs = Vec::with_capacity(data.len());
    let mut buckets = Vec::with_capacity(data.len());
    let (mut name_total, mut name_emitted, mut exact, mut truncated) = (0, 0, 0, 0);
    for e in data {
        let b = bucket.unwrap_or(e.bucket);
        let g = generate_with_bucket(model, &e.event, &e.context, b, beam_size)?;
        let reference = e.target();
        for name in reference.iter().filter(|t| watch_names.contains(*t)).collect::<HashSet<_>>() {
            let want = reference.iter().filter(|t| *t == name).count();
            let got = g.decoded.tokens.iter().filter(|t| *t == name).count();
            name_total += want;
            name_emitted += got.min(want);
        }
        exact += usize::from(g.text == e.text);
        truncated += usize::from(g.decoded.truncated);
        buckets.push(b);
        pairs.push(EvalPair::new(g.decoded.tokens, vec![reference]));
    }
    Ok(GeneratorEval {
        bleu: bleu(&pairs, 4)?,
        wer: corpus_wer(&pairs, false)?,
        pairs,
        buckets,
        name_total,
        name_emitted,
        exact,
        truncated,
    })
}

/// Fresh generator over the vocabularies of `train`, with `buckets` recorded.
pub fn new_generator<R: Real>(
    config: &PgConfig,
    train: &[AlignedExample],
    buckets: crate::linearize::LengthBuckets,
) -> Result<PgModel<R>, PgError> {
    let (sv, tv) = build_vocabularies(train, config.min_token_freq);
    let mut model = PgModel::new(config.clone(), sv, tv)?;
    model.buckets = Some(buckets);
    Ok(model)
}

/// Detokenized hypothesis text of each evaluated pair.
pub fn hypothesis_texts(eval: &GeneratorEval) -> Vec<String> {
    eval.pairs.iter().map(|p| detokenize(&p.hypothesis)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn env_overrides_and_unknown_keys() {
        let env = vec![
            ("HOCKEYGEN_GENERATOR_MAX_STEPS".to_string(), "77".to_string()),
            ("HOCKEYGEN_PATHS_MODEL_DIR".to_string(), "/tmp/m".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let c = PipelineConfig::from_toml_with_env("[crf]\nc1 = 2.0\n", env).unwrap();
        assert_eq!(c.generator.max_steps, 77);
        assert_eq!(c.paths.model_dir, PathBuf::from("/tmp/m"));
        assert_eq!(c.crf.c1, 2.0);
        assert_eq!(c.crf.c2, CrfTrainConfig::default().c2);

        let bad = PipelineConfig::from_toml_with_env("[crf]\nc3 = 1\n", Vec::new()).unwrap_err();
        assert_eq!(bad.kind(), "config");
        let bad_env = vec![("HOCKEYGEN_NOPE_X".to_string(), "1".to_string())];
        assert!(PipelineConfig::from_toml_with_env("", bad_env).is_err());
        let invalid = PipelineConfig::from_toml_with_env("[generator]\ndropout = 1.5\n", Vec::new()).unwrap_err();
        assert_eq!(invalid.kind(), "config");
    }

    #[test]
    fn sentence_counting() {
        let t = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        assert_eq!(sentence_count(&t("a b . c d .")), 2);
        assert_eq!(sentence_count(&t("a b")), 1);
        assert_eq!(sentence_count(&[]), 0);
    }
}
