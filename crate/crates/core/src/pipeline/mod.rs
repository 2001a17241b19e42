//! File-level commands: annotate, apply, train, predict, eval, stats and
//! synthetic corpus generation. Inputs and outputs are line-delimited JSON;
//! records are processed in parallel and written in input order.

pub mod records;

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use log::{info, warn};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compiler::{check_coverage, compile_tags, CompileError};
use crate::dialogue::{corpus_stats, CorpusStats, DialogueInstance, StatsError, Token, TokenizationMode};
use crate::metrics::{evaluate, EvalReport, MetricsError};
use crate::model::train::{tag_accuracy, train};
use crate::model::{ModelError, ModelInput, Tagger, TrainConfig, TrainingExample, Vocab};
use crate::reconstruct::apply_tags;
use crate::rl::{RLConfig, RewardFunction, RewardKind, RlExample, RlTrainer, Scorer, ScorerError, TcpScorer};
use crate::synth::{synth_corpus, SynthConfig};
use crate::tags::TagProgram;
use records::*;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
}

type Result<T> = std::result::Result<T, PipelineError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Parses every non-blank line of `path`, returning 1-based line numbers.
pub fn read_jsonl<T: DeserializeOwned + Send>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(i, line)| {
            serde_json::from_str(line)
                .map(|v| (i + 1, v))
                .map_err(|e| PipelineError::Malformed { path: path.to_path_buf(), line: i + 1, message: e.to_string() })
        })
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| PipelineError::Io { path: path.to_path_buf(), source: e.into() })?;
        out.write_all(b"\n").map_err(io_err(path))?;
    }
    out.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub line: usize,
    pub id: String,
    pub instance: DialogueInstance,
}

/// Reads a corpus file. Records without an `id` are named by line number.
pub fn read_corpus(path: &Path, mode: TokenizationMode) -> Result<Vec<CorpusEntry>> {
    let records: Vec<(usize, CorpusRecord)> = read_jsonl(path)?;
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(records.len());
    for (line, rec) in records {
        let malformed = |message: String| PipelineError::Malformed { path: path.to_path_buf(), line, message };
        if rec.version != SCHEMA_VERSION {
            return Err(malformed(format!("unsupported schema version {}", rec.version)));
        }
        let instance = rec.to_instance(mode);
        if instance.utterance.is_empty() {
            return Err(malformed("utterance is empty".into()));
        }
        let id = rec.id.unwrap_or_else(|| line.to_string());
        if !seen.insert(id.clone()) {
            return Err(malformed(format!("duplicate id `{id}`")));
        }
        out.push(CorpusEntry { line, id, instance });
    }
    Ok(out)
}

fn require_reference(path: &Path, e: &CorpusEntry) -> Result<()> {
    match e.instance.reference {
        Some(_) => Ok(()),
        None => Err(PipelineError::Malformed {
            path: path.to_path_buf(),
            line: e.line,
            message: format!("instance `{}` has no reference", e.id),
        }),
    }
}

/// Sidecar listing uncovered instances: `<tags file>.uncovered.jsonl`.
pub fn uncovered_path(tags_path: &Path) -> PathBuf {
    let mut name = tags_path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".uncovered.jsonl");
    tags_path.with_file_name(name)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub covered: usize,
    pub uncovered: usize,
    pub pct_uncovered: f64,
}

impl AnnotateSummary {
    pub fn from_counts(covered: usize, uncovered: usize) -> Self {
        let total = covered + uncovered;
        let pct_uncovered = if total == 0 { 0.0 } else { 100.0 * uncovered as f64 / total as f64 };
        Self { covered, uncovered, pct_uncovered }
    }
}

/// Compiles gold programs. Covered instances go to `tags_path`, uncovered
/// ones with their failing phrase to the sidecar.
pub fn annotate(corpus_path: &Path, tags_path: &Path, mode: TokenizationMode) -> Result<AnnotateSummary> {
    let corpus = read_corpus(corpus_path, mode)?;
    corpus.iter().try_for_each(|e| require_reference(corpus_path, e))?;
    let compiled: Vec<_> = corpus.par_iter().map(|e| compile_tags(&e.instance)).collect();
    let mut tags = Vec::new();
    let mut uncovered = Vec::new();
    for (e, result) in corpus.iter().zip(compiled) {
        match result {
            Ok(p) => tags.push(TagRecord { version: SCHEMA_VERSION, id: e.id.clone(), tags: p.to_triples(), covered: true }),
            Err(CompileError::Uncovered(phrase)) => {
                uncovered.push(UncoveredRecord { version: SCHEMA_VERSION, id: e.id.clone(), failing_phrase: phrase })
            }
            Err(CompileError::MissingReference) => unreachable!("references checked above"),
        }
    }
    write_jsonl(tags_path, &tags)?;
    write_jsonl(&uncovered_path(tags_path), &uncovered)?;
    Ok(AnnotateSummary::from_counts(tags.len(), uncovered.len()))
}

/// Executes every tag record against its corpus instance.
pub fn apply(tags_path: &Path, corpus_path: &Path, out_path: &Path, mode: TokenizationMode) -> Result<usize> {
    let tags: Vec<(usize, TagRecord)> = read_jsonl(tags_path)?;
    if tags.is_empty() {
        write_jsonl::<RewriteRecord>(out_path, &[])?;
        return Ok(0);
    }
    let corpus = read_corpus(corpus_path, mode)?;
    let by_id: HashMap<&str, &DialogueInstance> = corpus.iter().map(|e| (e.id.as_str(), &e.instance)).collect();
    let rewrites: Vec<RewriteRecord> = tags
        .par_iter()
        .map(|(line, rec)| {
            let malformed = |message: String| PipelineError::Malformed { path: tags_path.to_path_buf(), line: *line, message };
            let inst = by_id.get(rec.id.as_str()).ok_or_else(|| {
                PipelineError::Data(format!(
                    "{}:{line}: tag record `{}` has no instance in {}",
                    tags_path.display(),
                    rec.id,
                    corpus_path.display()
                ))
            })?;
            let program = TagProgram::from_triples(&rec.tags).map_err(malformed)?;
            let text = apply_tags(&inst.utterance, &inst.flat_context(), &program).map_err(|e| malformed(e.to_string()))?;
            Ok(RewriteRecord { version: SCHEMA_VERSION, id: rec.id.clone(), text: mode.join(&text) })
        })
        .collect::<Result<_>>()?;
    write_jsonl(out_path, &rewrites)?;
    Ok(rewrites.len())
}

#[derive(Debug, Clone)]
pub struct ScorerOptions {
    pub endpoint: String,
    pub timeout: Duration,
    pub retries: u32,
}

#[derive(Debug, Clone)]
pub struct RlOptions {
    pub config: RLConfig,
    pub epochs: usize,
    pub lr: f64,
    pub scorer: Option<ScorerOptions>,
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub mode: TokenizationMode,
    pub train: TrainConfig,
    pub rl: Option<RlOptions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub instances: usize,
    pub covered: usize,
    pub epoch_losses: Vec<f64>,
    pub train_tag_accuracy: f64,
    pub train_exact_match: f64,
    pub rl_batches: usize,
    pub rl_batches_skipped: usize,
}

/// Stage one on the covered part of the corpus, then optionally stage two,
/// then writes the checkpoint.
pub fn train_cmd(corpus_path: &Path, checkpoint: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    let corpus = read_corpus(corpus_path, opts.mode)?;
    corpus.iter().try_for_each(|e| require_reference(corpus_path, e))?;
    let covered: Vec<&CorpusEntry> = corpus.iter().filter(|e| compile_tags(&e.instance).is_ok()).collect();
    if covered.len() < corpus.len() {
        warn!("{} uncovered instance(s) excluded from training", corpus.len() - covered.len());
    }
    if covered.is_empty() {
        return Err(PipelineError::Data(format!("{}: no covered instances to train on", corpus_path.display())));
    }
    let reward_scorer = match &opts.rl {
        Some(rl) if rl.config.reward_kind == RewardKind::Lm => {
            let s = rl.scorer.as_ref().ok_or_else(|| PipelineError::Usage("--reward lm requires --lm-endpoint".into()))?;
            let scorer = TcpScorer { endpoint: s.endpoint.clone(), timeout: s.timeout, retries: s.retries };
            // fail fast if the scorer is not there at all
            scorer.perplexities(&[String::new()])?;
            Some(scorer)
        }
        _ => None,
    };

    let vocab = Vocab::build(covered.iter().map(|e| &e.instance));
    let examples: Vec<TrainingExample> = covered
        .par_iter()
        .map(|e| TrainingExample {
            input: ModelInput::new(&e.instance, &vocab),
            gold: compile_tags(&e.instance).expect("filtered to covered"),
        })
        .collect();
    info!("training on {} instances, vocabulary {}", examples.len(), vocab.len());
    let (mut params, report) = train::<f32>(&examples, vocab.len(), &opts.train)?;

    let (mut rl_batches, mut rl_skipped) = (0, 0);
    if let Some(rl) = &opts.rl {
        let reward = match &reward_scorer {
            Some(s) => RewardFunction::Lm { scorer: s, mode: opts.mode },
            None => RewardFunction::Bleu,
        };
        let rl_examples: Vec<RlExample> = covered
            .iter()
            .map(|e| RlExample::new(e.instance.clone(), &vocab).expect("filtered to covered"))
            .collect();
        let mut trainer = RlTrainer::<f32>::new(rl.config, rl.lr)?;
        let reports = trainer.fine_tune(&mut params, &rl_examples, rl.epochs, opts.train.batch, &reward)?;
        rl_batches = reports.len();
        rl_skipped = reports.iter().filter(|r| !r.rl_applied).count();
        if rl_skipped > 0 {
            warn!("{rl_skipped} of {rl_batches} batches fell back to the tagging loss");
        }
    }

    let (acc, em) = tag_accuracy(&params, &examples)?;
    let tagger = Tagger { mode: opts.mode, vocab, params };
    tagger.save(checkpoint).map_err(|e| match e {
        ModelError::Io(source) => PipelineError::Io { path: checkpoint.to_path_buf(), source },
        other => other.into(),
    })?;
    Ok(TrainSummary {
        instances: corpus.len(),
        covered: covered.len(),
        epoch_losses: report.epoch_losses,
        train_tag_accuracy: acc,
        train_exact_match: em,
        rl_batches,
        rl_batches_skipped: rl_skipped,
    })
}

/// Decodes every instance with the checkpoint's tokenization mode.
pub fn predict(checkpoint: &Path, corpus_path: &Path, out_path: &Path) -> Result<usize> {
    let tagger = Tagger::<f32>::load(checkpoint)?;
    let corpus = read_corpus(corpus_path, tagger.mode)?;
    let preds: Vec<PredictionRecord> = corpus
        .par_iter()
        .map(|e| {
            let (program, text) = tagger.rewrite(&e.instance)?;
            Ok(PredictionRecord {
                version: SCHEMA_VERSION,
                id: e.id.clone(),
                tags: program.to_triples(),
                prediction: tagger.mode.join(&text),
            })
        })
        .collect::<Result<_>>()?;
    write_jsonl(out_path, &preds)?;
    Ok(preds.len())
}

/// Scores predictions against the references of the corpus, matched by id.
pub fn eval(predictions_path: &Path, corpus_path: &Path, mode: TokenizationMode) -> Result<EvalReport> {
    let preds: Vec<(usize, PredictionRecord)> = read_jsonl(predictions_path)?;
    let corpus = read_corpus(corpus_path, mode)?;
    let refs: HashMap<&str, &CorpusEntry> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut hyp: Vec<Vec<Token>> = Vec::with_capacity(preds.len());
    let mut gold: Vec<Vec<Token>> = Vec::with_capacity(preds.len());
    for (line, p) in &preds {
        let entry = refs.get(p.id.as_str()).ok_or_else(|| {
            PipelineError::Data(format!("{}:{line}: prediction `{}` has no corpus instance", predictions_path.display(), p.id))
        })?;
        require_reference(corpus_path, entry)?;
        hyp.push(crate::dialogue::tokenize(&p.prediction, mode));
        gold.push(entry.instance.reference.clone().expect("checked"));
    }
    Ok(evaluate(&hyp, &gold)?)
}

/// Header and one row, tab separated, percentages with two decimals.
pub fn format_eval(report: &EvalReport) -> String {
    let mut out = EvalReport::HEADER.join("\t");
    out.push('\n');
    let row: Vec<String> = report.row().iter().map(|v| format!("{v:.2}")).collect();
    out.push_str(&row.join("\t"));
    out
}

/// Corpus statistics. An instance without a reference counts as covered and
/// as changed.
pub fn stats(corpus_path: &Path, mode: TokenizationMode) -> Result<CorpusStats> {
    let corpus = read_corpus(corpus_path, mode)?;
    let instances: Vec<DialogueInstance> = corpus.into_iter().map(|e| e.instance).collect();
    let coverage: Vec<bool> = instances
        .par_iter()
        .map(|i| match check_coverage(i) {
            Ok(r) => r.covered,
            Err(_) => true,
        })
        .collect();
    let no_change: Vec<bool> = instances.iter().map(DialogueInstance::is_no_change).collect();
    Ok(corpus_stats(&instances, &coverage, &no_change)?)
}

pub fn format_stats(s: &CorpusStats) -> String {
    let mut out = String::new();
    writeln!(out, "instances\t{}", s.n_instances).unwrap();
    writeln!(out, "turns_per_instance\t{:.2}", s.turns_per_instance).unwrap();
    writeln!(out, "context_tokens_mu\t{:.2}", s.context_tokens_mu).unwrap();
    writeln!(out, "context_tokens_sigma\t{:.2}", s.context_tokens_sigma).unwrap();
    writeln!(out, "pct_no_change\t{:.2}", s.pct_no_change).unwrap();
    write!(out, "pct_uncovered\t{:.2}", s.pct_uncovered).unwrap();
    out
}

/// Writes a synthetic corpus with tokens separated by spaces.
pub fn generate(out_path: &Path, n: usize, seed: u64, cfg: &SynthConfig) -> Result<()> {
    let join = |t: &[Token]| t.join(" ");
    let records: Vec<CorpusRecord> = synth_corpus(n, seed, cfg)
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            CorpusRecord::new(
                Some(format!("syn-{i}")),
                inst.context_turns.iter().map(|t| join(t)).collect(),
                join(&inst.utterance),
                inst.reference.as_deref().map(join),
            )
        })
        .collect();
    write_jsonl(out_path, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::winter_weather_dialogue;

    fn winter_record() -> CorpusRecord {
        CorpusRecord::new(
            Some("fig2".into()),
            vec!["上海 最近 天气 怎么样 ？".into(), "最近 经常 阴天 下雨 。".into()],
            "冬天 就是 这样 。".into(),
            Some("上海 冬天 就是 经常 阴天 下雨 。".into()),
        )
    }

    #[test]
    fn annotate_and_apply_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        let omega = CorpusRecord::new(Some("w".into()), vec!["a b".into()], "c".into(), Some("c ω".into()));
        write_jsonl(&corpus, &[winter_record(), omega]).unwrap();
        let tags = dir.path().join("t.jsonl");
        let summary = annotate(&corpus, &tags, TokenizationMode::Word).unwrap();
        assert_eq!(summary, AnnotateSummary { covered: 1, uncovered: 1, pct_uncovered: 50.0 });
        let sidecar: Vec<(usize, UncoveredRecord)> = read_jsonl(&uncovered_path(&tags)).unwrap();
        assert_eq!(sidecar[0].1.failing_phrase, vec!["ω".to_string()]);
        let tag_records: Vec<(usize, TagRecord)> = read_jsonl(&tags).unwrap();
        assert_eq!(tag_records[0].1.tags[0], [0, 0, 0]);
        assert_eq!(tag_records[0].1.tags[2], [1, 6, 8]);

        let out = dir.path().join("o.jsonl");
        assert_eq!(apply(&tags, &corpus, &out, TokenizationMode::Word).unwrap(), 1);
        let rewrites: Vec<(usize, RewriteRecord)> = read_jsonl(&out).unwrap();
        assert_eq!(rewrites[0].1.text, "上海 冬天 就是 经常 阴天 下雨 。");
        let inst = winter_weather_dialogue();
        assert_eq!(crate::dialogue::tokenize(&rewrites[0].1.text, TokenizationMode::Word), inst.reference.unwrap());
    }

    #[test]
    fn malformed_lines_report_their_number() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        let good = serde_json::to_string(&winter_record()).unwrap();
        fs::write(&corpus, format!("{good}\n\n{{\"context\": 3}}\n")).unwrap();
        match read_corpus(&corpus, TokenizationMode::Word) {
            Err(PipelineError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected malformed, got {other:?}"),
        }
    }

    #[test]
    fn apply_rejects_unknown_ids_and_accepts_empty_tags() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        write_jsonl(&corpus, &[winter_record()]).unwrap();
        let tags = dir.path().join("t.jsonl");
        let out = dir.path().join("o.jsonl");
        fs::write(&tags, "").unwrap();
        assert_eq!(apply(&tags, &corpus, &out, TokenizationMode::Word).unwrap(), 0);
        assert_eq!(fs::read_to_string(&out).unwrap(), "");
        let stray = TagRecord { version: 1, id: "nope".into(), tags: vec![[0, -1, -1]], covered: true };
        write_jsonl(&tags, &[stray]).unwrap();
        assert!(matches!(apply(&tags, &corpus, &out, TokenizationMode::Word), Err(PipelineError::Data(_))));
    }

    #[test]
    fn generated_corpus_is_fully_covered_in_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("syn.jsonl");
        generate(&corpus, 300, 4, &SynthConfig::default()).unwrap();
        for mode in [TokenizationMode::Char, TokenizationMode::Word] {
            let s = annotate(&corpus, &dir.path().join("t.jsonl"), mode).unwrap();
            assert_eq!((s.covered, s.uncovered), (300, 0));
        }
    }

    #[test]
    fn stats_on_the_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = dir.path().join("c.jsonl");
        write_jsonl(&corpus, &[winter_record()]).unwrap();
        let s = stats(&corpus, TokenizationMode::Word).unwrap();
        assert_eq!(s.n_instances, 1);
        assert_eq!(s.context_tokens_mu, 10.0);
        assert_eq!(s.turns_per_instance, 3.0);
        assert!(format_stats(&s).contains("context_tokens_mu\t10.00"));
    }

    #[test]
    fn eval_layout() {
        let report = evaluate(&[vec!["a", "b"]], &[vec!["a", "b"]]).unwrap();
        let text = format_eval(&report);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "BLEU1\tBLEU2\tBLEU3\tBLEU4\tR1\tR2\tR-L\tEM");
        assert!(lines[1].split('\t').all(|v| v == "100.00"));
    }
}
