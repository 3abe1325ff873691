//! Subcommands of the `sadkit` binary: corpus generation, preprocessing,
//! training, evaluation, mask auditing and the variant sweep.
//!
//! Every command is a plain function so it can be driven from tests without
//! spawning a process. File layout of each output directory:
//!
//! | command      | files                                                             |
//! |--------------|-------------------------------------------------------------------|
//! | `generate`   | `corpus.jsonl`                                                    |
//! | `preprocess` | `prepared.jsonl`, `vocab.json`, `rules.json`                      |
//! | `train`      | `checkpoint.json`, `vocab.json`, `train_log.csv`, `plan.json`, `manifest.json` |
//! | `eval`       | `metrics.json`                                                    |
//! | `audit`      | `audit.json`, `overlay.html`                                      |
//! | `experiment` | `results.csv`, `summary.csv`, `table.txt`, `experiment.json`      |

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use sadkit::envkit::{evaluate_policy, generate_corpus, DifficultyMix};
use sadkit::losses::LossMode;
use sadkit::metrics::{MetricsBundle, MetricsReport, OverlapMode};
use sadkit::segmenter::{self, load_jsonl, save_jsonl, RawTrajectory, RulesFile, SegmentationRules, ValidationReport};
use sadkit::supervision::{build_masks, span_stats, validate_masks, SpanStats};
use sadkit::tokenizer::{label_tokens, tokenize_with_offsets, Vocab};
use sadkit::trainer::{
    corpus_vocab, load_checkpoint, load_prepared, plan_for, prepare, save_checkpoint, save_prepared, Teacher, TrainConfig,
    TrainLog, TrainState, Trainer, Variant,
};

pub mod experiment;
pub mod render;

pub use experiment::{cmd_experiment, ExperimentConfig, ExperimentReport};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] sadkit::Error),
}

impl CliError {
    /// 1 for validation failures, 2 for I/O errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) | CliError::Core(sadkit::Error::Io { .. }) => 2,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(io_error(path))
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_error(dir))
}

fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Core(e.into()))
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(io_error(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Parser)]
#[command(name = "sadkit", version, about = "Span-aware distillation of ReAct agents at desk scale")]
pub struct Cli {
    /// Seed for every random choice; for `train` it overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Roll out the scripted teacher and write a trajectory corpus.
    Generate {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = DifficultyMix::default(), value_parser = DifficultyMix::parse)]
        difficulty: DifficultyMix,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment, tokenize and mask a corpus; fails on any validation finding.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// JSON rules file (defaults to the Reasoning:/Action: line rules).
        #[arg(long)]
        rules: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on a preprocessed corpus.
    Train {
        /// Output directory of `preprocess`.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop evaluation of a trained student.
    Eval {
        /// Output directory of `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = DifficultyMix::default(), value_parser = DifficultyMix::parse)]
        difficulty: DifficultyMix,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate masks, summarize spans and render colour overlays.
    Audit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Trajectories printed to the terminal with ANSI colours.
        #[arg(long, default_value_t = 3)]
        show: usize,
        /// Trajectories rendered into overlay.html.
        #[arg(long, default_value_t = 20)]
        html_limit: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every supervision variant over several seeds and tabulate success.
    Experiment {
        #[command(flatten)]
        overrides: TrainOverrides,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
        #[arg(long, default_value_t = 2000)]
        corpus_size: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = DifficultyMix::default(), value_parser = DifficultyMix::parse)]
        difficulty: DifficultyMix,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Training options settable from the command line; each overrides the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct TrainOverrides {
    /// TOML or JSON file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long, value_parser = parse_loss_mode)]
    pub loss_mode: Option<LossMode>,
    #[arg(long)]
    pub lambda_r: Option<f64>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

fn parse_loss_mode(s: &str) -> std::result::Result<LossMode, String> {
    match s.to_ascii_lowercase().as_str() {
        "kl" => Ok(LossMode::Kl),
        "ce" => Ok(LossMode::Ce),
        _ => Err(format!("unknown loss mode {s:?} (expected kl or ce)")),
    }
}

pub fn load_config(path: &Path) -> CliResult<TrainConfig> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

impl TrainOverrides {
    pub fn resolve(&self, seed: Option<u64>) -> CliResult<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => load_config(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(m) = self.loss_mode {
            c.loss_mode = m;
        }
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(x) = self.$f { c.$f = x; })* };
        }
        set!(lambda_r, lambda_a, alpha, beta, gamma, epochs, lr);
        if let Some(s) = seed {
            c.seed = s;
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn cmd_generate(n: usize, seed: u64, mix: &DifficultyMix, out: &Path) -> CliResult<PathBuf> {
    ensure_dir(out)?;
    let corpus = generate_corpus(n, seed, mix)?;
    let path = out.join("corpus.jsonl");
    save_jsonl(&corpus, &path)?;
    info!("wrote {} trajectories to {}", corpus.len(), path.display());
    Ok(path)
}

/// 1-based file line of each non-blank line, in record order.
fn record_lines(path: &Path) -> CliResult<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(io_error(path))?;
    Ok(text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect())
}

fn load_rules(path: Option<&Path>) -> CliResult<(SegmentationRules, RulesFile)> {
    match path {
        None => Ok((SegmentationRules::default(), RulesFile::default())),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_error(p))?;
            let file: RulesFile =
                serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?;
            Ok((SegmentationRules::from_file(&file)?, file))
        }
    }
}

fn with_line(line: usize, e: sadkit::Error) -> CliError {
    match e {
        sadkit::Error::Io { .. } => CliError::Core(e),
        other => CliError::Validation(format!("record at line {line}: {other}")),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub records: usize,
    pub vocab_size: usize,
    pub warnings: usize,
}

pub fn cmd_preprocess(input: &Path, rules: Option<&Path>, min_count: usize, out: &Path) -> CliResult<PreprocessSummary> {
    let (rules, rules_file) = load_rules(rules)?;
    let corpus = load_jsonl(input).map_err(|e| match e {
        sadkit::Error::MalformedRecord { .. } => CliError::Validation(e.to_string()),
        other => other.into(),
    })?;
    let lines = record_lines(input)?;
    let vocab = corpus_vocab(&corpus, min_count)?;
    let mut prepared = Vec::with_capacity(corpus.len());
    let mut warnings = 0;
    for (raw, &line) in corpus.iter().zip(&lines) {
        let (p, report) = prepare(raw, &rules, &vocab).map_err(|e| with_line(line, e))?;
        if !report.is_empty() {
            return Err(CliError::Validation(format!("record at line {line}: {:?}", report.findings)));
        }
        for w in &report.warnings {
            warn!("record at line {line}: {w:?}");
        }
        warnings += report.warnings.len();
        prepared.push(p);
    }
    ensure_dir(out)?;
    save_prepared(&prepared, &out.join("prepared.jsonl"))?;
    vocab.save(&out.join("vocab.json"))?;
    write_file(&out.join("rules.json"), to_json(&rules_file)?)?;
    info!("prepared {} trajectories, vocab {}", prepared.len(), vocab.len());
    Ok(PreprocessSummary {
        records: prepared.len(),
        vocab_size: vocab.len(),
        warnings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRef {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub train_log: PathBuf,
    pub plan: PathBuf,
}

/// Provenance of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub corpus: CorpusRef,
    pub artifacts: Artifacts,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(io_error(path))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// True when the referenced corpus still hashes to the recorded digest.
    pub fn corpus_matches(&self) -> CliResult<bool> {
        Ok(sha256_file(&self.corpus.path)? == self.corpus.sha256)
    }
}

/// Train on `data` (a `preprocess` output directory) and write the run to `out`.
pub fn cmd_train(config: &TrainConfig, data: &Path, out: &Path) -> CliResult<RunManifest> {
    config.validate()?;
    let corpus_path = data.join("prepared.jsonl");
    let corpus = load_prepared(&corpus_path)?;
    let vocab = Vocab::load(&data.join("vocab.json"))?;
    let teacher = Teacher::Scripted {
        epsilon: config.teacher_epsilon,
    };
    let plan = plan_for(&corpus, &teacher, vocab.len(), config)?;
    let params = sadkit::model::init_params(config.model_config(&vocab))?;
    let trainer = Trainer::new(&corpus, &plan, &teacher, config.clone())?;
    let mut state = TrainState::new(params, config.seed);
    let mut log = TrainLog::default();
    info!("training {} on {} trajectories", config.variant, corpus.len());
    trainer.run(&mut state, &mut log)?;

    ensure_dir(out)?;
    let artifacts = Artifacts {
        checkpoint: out.join("checkpoint.json"),
        vocab: out.join("vocab.json"),
        train_log: out.join("train_log.csv"),
        plan: out.join("plan.json"),
    };
    save_checkpoint(&artifacts.checkpoint, config, &state)?;
    vocab.save(&artifacts.vocab)?;
    log.write_csv(&artifacts.train_log)?;
    write_file(&artifacts.plan, plan.to_json()?)?;
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        config: config.clone(),
        seeds: vec![config.seed],
        corpus: CorpusRef {
            sha256: sha256_file(&corpus_path)?,
            path: corpus_path,
        },
        artifacts,
        wall_clock_secs: log.wall_clock_secs,
    };
    write_file(&out.join("manifest.json"), to_json(&manifest)?)?;
    info!("finished in {:.1}s", log.wall_clock_secs);
    Ok(manifest)
}

/// Evaluate the student stored in `run` (a `train` output directory).
pub fn cmd_eval(run: &Path, episodes: usize, seed: u64, mix: &DifficultyMix, out: &Path) -> CliResult<MetricsReport> {
    let ckpt = load_checkpoint(&run.join("checkpoint.json"))?;
    let vocab = Vocab::load(&run.join("vocab.json"))?;
    if vocab.len() != ckpt.state.params.config.vocab_size {
        return Err(CliError::Validation(format!(
            "vocab has {} tokens but the checkpoint expects {}",
            vocab.len(),
            ckpt.state.params.config.vocab_size
        )));
    }
    let results = evaluate_policy(&ckpt.state.params, &vocab, &SegmentationRules::default(), episodes, seed, mix)?;
    let bundle = MetricsBundle::from_episodes(&results, OverlapMode::Multiset)?;
    let report = MetricsReport::new(bundle, ckpt.train_config.variant.name(), seed);
    ensure_dir(out)?;
    write_file(&out.join("metrics.json"), to_json(&report)?)?;
    info!("tsr {:.1}% over {} episodes", report.tsr, report.n);
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFindings {
    pub line: usize,
    pub task_id: String,
    pub report: ValidationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub records: usize,
    pub records_with_findings: usize,
    pub findings: usize,
    pub warnings: usize,
    pub problems: Vec<RecordFindings>,
    pub stats: SpanStats,
}

struct AuditedRecord {
    doc: String,
    offsets: Vec<std::ops::Range<usize>>,
    masks: sadkit::supervision::SupervisionMasks,
}

fn audit_record(raw: &RawTrajectory, rules: &SegmentationRules, vocab: &Vocab) -> sadkit::Result<(AuditedRecord, ValidationReport)> {
    let seg = segmenter::segment(raw, rules)?;
    let mut report = segmenter::round_trip_validate(&seg);
    let tok = label_tokens(tokenize_with_offsets(&seg.document, vocab), &seg)?;
    let masks = build_masks(&tok);
    report.merge(validate_masks(&masks, &tok));
    Ok((
        AuditedRecord {
            doc: seg.document,
            offsets: tok.offsets,
            masks,
        },
        report,
    ))
}

/// Validate every record of a raw corpus, print ANSI overlays of the first
/// `show` records and write `audit.json` plus `overlay.html` to `out`.
/// Fails with a validation error if any record has findings.
pub fn cmd_audit(input: &Path, rules: Option<&Path>, show: usize, html_limit: usize, out: &Path) -> CliResult<AuditSummary> {
    let (rules, _) = load_rules(rules)?;
    let corpus = load_jsonl(input).map_err(|e| match e {
        sadkit::Error::MalformedRecord { .. } => CliError::Validation(e.to_string()),
        other => other.into(),
    })?;
    let lines = record_lines(input)?;
    let vocab = corpus_vocab(&corpus, 1)?;
    let mut problems = Vec::new();
    let mut masks = Vec::with_capacity(corpus.len());
    let mut html = Vec::new();
    let mut warnings = 0;
    for (i, (raw, &line)) in corpus.iter().zip(&lines).enumerate() {
        let (rec, report) = audit_record(raw, &rules, &vocab).map_err(|e| with_line(line, e))?;
        warnings += report.warnings.len();
        if !report.is_empty() {
            problems.push(RecordFindings {
                line,
                task_id: raw.task_id.clone(),
                report,
            });
        }
        if i < show {
            println!("{}", render::ansi(&raw.task_id, &rec.doc, &rec.offsets, &rec.masks));
        }
        if i < html_limit {
            html.push(render::html_block(&raw.task_id, &rec.doc, &rec.offsets, &rec.masks));
        }
        masks.push(rec.masks);
    }
    let summary = AuditSummary {
        records: corpus.len(),
        records_with_findings: problems.len(),
        findings: problems.iter().map(|p| p.report.findings.len()).sum(),
        warnings,
        problems,
        stats: span_stats(&masks),
    };
    ensure_dir(out)?;
    write_file(&out.join("audit.json"), to_json(&summary)?)?;
    write_file(&out.join("overlay.html"), render::html_page(&html))?;
    println!(
        "{} records, {} with findings; reason tokens mean {:.2}, action tokens mean {:.2}",
        summary.records, summary.records_with_findings, summary.stats.reason.mean, summary.stats.action.mean
    );
    if summary.findings > 0 {
        return Err(CliError::Validation(format!(
            "{} findings in {} records (first at line {})",
            summary.findings, summary.records_with_findings, summary.problems[0].line
        )));
    }
    Ok(summary)
}

/// Parse arguments already split into a [`Cli`] and dispatch.
pub fn run(cli: Cli) -> CliResult<()> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Generate { n, difficulty, out } => {
            let path = cmd_generate(n, seed, &difficulty, &out)?;
            println!("{}", path.display());
        }
        Command::Preprocess {
            input,
            rules,
            min_count,
            out,
        } => {
            let s = cmd_preprocess(&input, rules.as_deref(), min_count, &out)?;
            println!("{} records, vocab {}, {} warnings", s.records, s.vocab_size, s.warnings);
        }
        Command::Train { data, overrides, out } => {
            let config = overrides.resolve(cli.seed)?;
            let m = cmd_train(&config, &data, &out)?;
            println!("{}", m.artifacts.checkpoint.display());
        }
        Command::Eval {
            run,
            episodes,
            difficulty,
            out,
        } => {
            let r = cmd_eval(&run, episodes, seed, &difficulty, &out)?;
            println!(
                "tsr {:.2}  arl {:.2}  cot_match {:.2}  avg_steps {:.2}  (n={})",
                r.tsr, r.arl, r.cot_match, r.avg_steps, r.n
            );
        }
        Command::Audit {
            input,
            rules,
            show,
            html_limit,
            out,
        } => {
            cmd_audit(&input, rules.as_deref(), show, html_limit, &out)?;
        }
        Command::Experiment {
            overrides,
            seeds,
            corpus_size,
            episodes,
            difficulty,
            out,
        } => {
            let config = ExperimentConfig {
                train: overrides.resolve(None)?,
                base_seed: seed,
                seeds,
                corpus_size,
                episodes,
                mix: difficulty,
                variants: Variant::ALL.to_vec(),
            };
            let report = cmd_experiment(&config, &out)?;
            print!("{}", report.table());
        }
    }
    Ok(())
}
