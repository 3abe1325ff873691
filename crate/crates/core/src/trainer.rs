//! Curriculum-driven span-gated distillation of the student model.
//!
//! Each step draws a batch of whole trajectories from the curriculum, runs the
//! student under teacher forcing on the teacher's tokens, applies the
//! reasoning/action masks to the per-token divergences and takes one clipped
//! SGD step on the batch-mean loss.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{self, ComplexityWeights, CurriculumPlan, ScoredTrajectory};
use crate::error::{io_err, Error, Result};
use crate::losses::{row_loss_and_grad, LossMode};
use crate::model::{self, Logits, ModelConfig, ModelParams, ParamGradients};
use crate::segmenter::{self, round_trip_validate, RawTrajectory, SegmentLabel, SegmentationRules, ValidationReport};
use crate::supervision::{build_masks, validate_masks, SupervisionMasks};
use crate::tokenizer::{label_tokens, tokenize_with_offsets, Vocab};

/// Which tokens receive supervision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    ReasonOnly,
    ActOnly,
    NoSegmentation,
    RandomMask,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::ReasonOnly,
        Variant::ActOnly,
        Variant::NoSegmentation,
        Variant::RandomMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ReasonOnly => "reason-only",
            Variant::ActOnly => "act-only",
            Variant::NoSegmentation => "no-segmentation",
            Variant::RandomMask => "random-mask",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let norm = s.to_ascii_lowercase().replace(['_', ' '], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm || format!("{v:?}").to_ascii_lowercase() == norm.replace('-', ""))
            .ok_or_else(|| format!("unknown variant {s:?}"))
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub lambda_r: f64,
    pub lambda_a: f64,
    pub loss_mode: LossMode,
    pub variant: Variant,
    /// Smoothing mass the scripted teacher spreads off its own token.
    pub teacher_epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub pacing_start: f64,
    pub embed_dim: usize,
    pub context: usize,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            steps_per_epoch: 80,
            batch_size: 4,
            lr: 0.5,
            clip: 1.0,
            lambda_r: 1.0,
            lambda_a: 1.0,
            loss_mode: LossMode::Kl,
            variant: Variant::Full,
            teacher_epsilon: 0.05,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
            pacing_start: 0.3,
            embed_dim: 12,
            context: 24,
            hidden: 48,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, steps_per_epoch and batch_size must be >= 1");
        }
        if !(self.lr >= 0.0) {
            return bad("lr must be non-negative");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if !(self.lambda_r >= 0.0 && self.lambda_a >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if !(0.0..1.0).contains(&self.teacher_epsilon) {
            return bad("teacher_epsilon must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn weights(&self) -> ComplexityWeights {
        ComplexityWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        ModelConfig {
            vocab_size: vocab.len(),
            embed_dim: self.embed_dim,
            context: self.context,
            hidden: self.hidden,
            bos_id: vocab.bos,
            seed: self.seed,
        }
    }

    /// Effective `(lambda_r, lambda_a)` once the variant is applied.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        match self.variant {
            Variant::NoSegmentation => (1.0, 0.0),
            _ => (self.lambda_r, self.lambda_a),
        }
    }
}

/// Source of the per-position target distribution `p_T`.
#[derive(Debug, Clone, PartialEq)]
pub enum Teacher {
    /// `1 - epsilon` on the teacher's own token, `epsilon` spread evenly over the rest.
    Scripted { epsilon: f64 },
    /// A trained model's predictive distribution.
    Model(Box<ModelParams>),
}

impl Teacher {
    /// Teacher log-probabilities at `positions` of `ids`, one row per position.
    pub fn logits(&self, ids: &[u32], positions: &[usize], vocab: usize) -> Result<Logits> {
        match self {
            Teacher::Scripted { epsilon } => {
                let (on, off) = smoothed_log_probs(*epsilon, vocab);
                let mut out = Logits::zeros(positions.len(), vocab);
                for (r, &t) in positions.iter().enumerate() {
                    let row = out.row_mut(r);
                    row.fill(off);
                    row[ids[t] as usize] = on;
                }
                Ok(out)
            }
            Teacher::Model(params) => Ok(model::forward_positions(params, ids, positions)?.logits),
        }
    }
}

fn smoothed_log_probs(epsilon: f64, vocab: usize) -> (f64, f64) {
    let off = if vocab > 1 {
        (epsilon / (vocab - 1) as f64).ln()
    } else {
        f64::NEG_INFINITY
    };
    ((1.0 - epsilon).ln(), off)
}

/// A trajectory ready for training: token ids and its true segment masks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreparedTrajectory {
    pub task_id: String,
    pub token_ids: Vec<u32>,
    pub m_r: Vec<u8>,
    pub m_a: Vec<u8>,
}

impl PreparedTrajectory {
    pub fn masks(&self) -> SupervisionMasks {
        SupervisionMasks {
            m_r: self.m_r.clone(),
            m_a: self.m_a.clone(),
        }
    }
}

/// Segment, tokenize, label and mask one trajectory, validating every stage.
pub fn prepare(raw: &RawTrajectory, rules: &SegmentationRules, vocab: &Vocab) -> Result<(PreparedTrajectory, ValidationReport)> {
    let seg = segmenter::segment(raw, rules)?;
    let mut report = round_trip_validate(&seg);
    let tok = label_tokens(tokenize_with_offsets(&seg.document, vocab), &seg)?;
    let masks = build_masks(&tok);
    report.merge(validate_masks(&masks, &tok));
    Ok((
        PreparedTrajectory {
            task_id: raw.task_id.clone(),
            token_ids: tok.token_ids,
            m_r: masks.m_r,
            m_a: masks.m_a,
        },
        report,
    ))
}

/// Build a vocabulary over the documents of `corpus`.
pub fn corpus_vocab(corpus: &[RawTrajectory], min_count: usize) -> Result<Vocab> {
    let docs: Vec<String> = corpus.iter().map(RawTrajectory::document).collect();
    Vocab::build(&docs, min_count)
}

pub fn save_prepared(records: &[PreparedTrajectory], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn load_prepared(path: &Path) -> Result<Vec<PreparedTrajectory>> {
    let reader = BufReader::new(File::open(path).map_err(io_err(path))?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PreparedTrajectory = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.m_r.len() != rec.token_ids.len() || rec.m_a.len() != rec.token_ids.len() {
            return Err(Error::MalformedRecord {
                line: i + 1,
                reason: "mask length differs from token count".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

/// Rewrite masks for an ablation variant.
pub fn apply_variant(masks: &SupervisionMasks, variant: Variant, seed: u64) -> SupervisionMasks {
    let n = masks.len();
    match variant {
        Variant::Full => masks.clone(),
        Variant::ReasonOnly => SupervisionMasks {
            m_r: masks.m_r.clone(),
            m_a: vec![0; n],
        },
        Variant::ActOnly => SupervisionMasks {
            m_r: vec![0; n],
            m_a: masks.m_a.clone(),
        },
        Variant::NoSegmentation => SupervisionMasks {
            m_r: masks.union(),
            m_a: vec![0; n],
        },
        Variant::RandomMask => {
            // permute per-position labels over the whole sequence; counts are preserved
            let mut labels: Vec<Option<SegmentLabel>> = (0..n)
                .map(|t| match (masks.m_r[t], masks.m_a[t]) {
                    (1, _) => Some(SegmentLabel::Reason),
                    (_, 1) => Some(SegmentLabel::Action),
                    _ => None,
                })
                .collect();
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            SupervisionMasks {
                m_r: labels.iter().map(|l| u8::from(*l == Some(SegmentLabel::Reason))).collect(),
                m_a: labels.iter().map(|l| u8::from(*l == Some(SegmentLabel::Action))).collect(),
            }
        }
    }
}

/// Clip `grads` to global L2 norm `clip`, then `params -= lr * grads`. Returns the pre-clip norm.
pub fn sgd_step(params: &mut ModelParams, grads: &mut ParamGradients, lr: f64, clip: f64) -> f64 {
    let norm = grads.l2_norm();
    if norm > clip {
        grads.scale(clip / norm);
    }
    params.add_scaled(grads, -lr);
    norm
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub cot: f64,
    pub act: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub available: usize,
    pub threshold: f64,
    /// Corpus indices drawn this epoch, in order.
    pub draws: Vec<usize>,
    pub mean_total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLoss>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        let mut body = String::from("step,cot,act,total\n");
        for s in &self.steps {
            body.push_str(&format!("{},{},{},{}\n", s.step, s.cot, s.act, s.total));
        }
        w.write_all(body.as_bytes()).map_err(io_err(path))?;
        w.flush().map_err(io_err(path))
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self {
            params,
            epoch: 0,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e65_72),
        }
    }
}

/// Loss and gradient of one trajectory, accumulated into `grads` with factor `scale`.
pub fn trajectory_loss_grad(
    params: &ModelParams,
    teacher: &Teacher,
    ids: &[u32],
    masks: &SupervisionMasks,
    mode: LossMode,
    lambdas: (f64, f64),
    scale: f64,
    grads: &mut ParamGradients,
) -> Result<(f64, f64)> {
    let v = params.config.vocab_size;
    let positions: Vec<usize> = (0..ids.len())
        .filter(|&t| masks.m_r[t] != 0 || masks.m_a[t] != 0)
        .collect();
    if positions.is_empty() {
        return Ok((0.0, 0.0));
    }
    let act = model::forward_positions(params, ids, &positions)?;
    let teach = teacher.logits(ids, &positions, v)?;
    let mut dlogits = Logits::zeros(positions.len(), v);
    let (mut cot, mut actl) = (0.0, 0.0);
    for (r, &t) in positions.iter().enumerate() {
        let (mr, ma) = (f64::from(masks.m_r[t]), f64::from(masks.m_a[t]));
        let weight = (lambdas.0 * mr + lambdas.1 * ma) * scale;
        let l = row_loss_and_grad(mode, teach.row(r), act.logits.row(r), ids[t] as usize, weight, dlogits.row_mut(r));
        cot += mr * l;
        actl += ma * l;
    }
    model::backward_positions(params, ids, &act, &dlogits, grads)?;
    Ok((cot, actl))
}

/// Score every trajectory with its true masks and build the curriculum.
pub fn plan_for(corpus: &[PreparedTrajectory], teacher: &Teacher, vocab_size: usize, config: &TrainConfig) -> Result<CurriculumPlan> {
    let scored = score_corpus(corpus, teacher, vocab_size, config.weights())?;
    curriculum::build_plan(
        &scored,
        &curriculum::linear_pacing(config.epochs, config.pacing_start),
        config.weights(),
    )
}

pub fn score_corpus(
    corpus: &[PreparedTrajectory],
    teacher: &Teacher,
    vocab_size: usize,
    weights: ComplexityWeights,
) -> Result<Vec<ScoredTrajectory>> {
    corpus
        .iter()
        .map(|p| {
            let masks = p.masks();
            let union = masks.union();
            let positions: Vec<usize> = (0..union.len()).filter(|&t| union[t] != 0).collect();
            let rows = teacher.logits(&p.token_ids, &positions, vocab_size)?;
            let entropy = crate::losses::teacher_entropy(&rows, None);
            Ok(curriculum::score_from_parts(
                p.task_id.clone(),
                masks.reason_count(),
                masks.action_count(),
                entropy,
                weights,
            ))
        })
        .collect()
}

/// Drives training over a fixed corpus, plan and teacher.
pub struct Trainer<'a> {
    pub corpus: &'a [PreparedTrajectory],
    pub plan: &'a CurriculumPlan,
    pub teacher: &'a Teacher,
    pub config: TrainConfig,
    masks: Vec<SupervisionMasks>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        corpus: &'a [PreparedTrajectory],
        plan: &'a CurriculumPlan,
        teacher: &'a Teacher,
        config: TrainConfig,
    ) -> Result<Self> {
        config.validate()?;
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let masks = corpus
            .iter()
            .enumerate()
            .map(|(i, p)| apply_variant(&p.masks(), config.variant, mask_seed(config.seed, i)))
            .collect();
        Ok(Self {
            corpus,
            plan,
            teacher,
            config,
            masks,
        })
    }

    pub fn effective_masks(&self, index: usize) -> &SupervisionMasks {
        &self.masks[index]
    }

    /// One optimizer step on the given corpus indices.
    pub fn step(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepLoss> {
        let mut grads = ModelParams::zeros(state.params.config);
        let scale = 1.0 / batch.len() as f64;
        let lambdas = self.config.effective_lambdas();
        let (mut cot, mut act) = (0.0, 0.0);
        for &i in batch {
            let (c, a) = trajectory_loss_grad(
                &state.params,
                self.teacher,
                &self.corpus[i].token_ids,
                &self.masks[i],
                self.config.loss_mode,
                lambdas,
                scale,
                &mut grads,
            )?;
            if !(c.is_finite() && a.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: state.step,
                    task_id: self.corpus[i].task_id.clone(),
                    detail: format!("cot={c} act={a} param_norm={}", state.params.l2_norm()),
                });
            }
            cot += c * scale;
            act += a * scale;
        }
        let total = lambdas.0 * cot + lambdas.1 * act;
        let grad_norm = sgd_step(&mut state.params, &mut grads, self.config.lr, self.config.clip);
        if !state.params.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: state.step,
                task_id: String::new(),
                detail: format!("parameters diverged (grad norm {grad_norm})"),
            });
        }
        let rec = StepLoss {
            step: state.step,
            epoch: state.epoch + 1,
            cot,
            act,
            total,
            grad_norm,
        };
        state.step += 1;
        Ok(rec)
    }

    pub fn run_epoch(&self, state: &mut TrainState, log: &mut TrainLog) -> Result<()> {
        let epoch = state.epoch + 1;
        let mut draws = Vec::with_capacity(self.config.steps_per_epoch * self.config.batch_size);
        let mut sum = 0.0;
        for _ in 0..self.config.steps_per_epoch {
            let batch = self.plan.sample(epoch, self.config.batch_size, &mut state.rng);
            let rec = self.step(state, &batch)?;
            sum += rec.total;
            draws.extend(batch);
            log.steps.push(rec);
        }
        log.epochs.push(EpochRecord {
            epoch,
            available: self.plan.available_count(epoch),
            threshold: self.plan.threshold(epoch),
            draws,
            mean_total: sum / self.config.steps_per_epoch as f64,
        });
        state.epoch = epoch;
        Ok(())
    }

    /// Run the remaining epochs (up to `config.epochs`).
    pub fn run(&self, state: &mut TrainState, log: &mut TrainLog) -> Result<()> {
        let start = Instant::now();
        while state.epoch < self.config.epochs {
            self.run_epoch(state, log)?;
        }
        log.wall_clock_secs += start.elapsed().as_secs_f64();
        Ok(())
    }
}

fn mask_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9)
}

/// Train a fresh student from `config` on a prepared corpus.
pub fn train(
    corpus: &[PreparedTrajectory],
    vocab: &Vocab,
    teacher: &Teacher,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    let plan = plan_for(corpus, teacher, vocab.len(), config)?;
    let params = model::init_params(config.model_config(vocab))?;
    let trainer = Trainer::new(corpus, &plan, teacher, config.clone())?;
    let mut state = TrainState::new(params, config.seed);
    let mut log = TrainLog::default();
    trainer.run(&mut state, &mut log)?;
    Ok((state.params, log))
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngSnapshot {
    seed: [u8; 32],
    stream: u64,
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    train_config: TrainConfig,
    epoch: usize,
    step: usize,
    rng: RngSnapshot,
    params: ModelParams,
}

/// Training checkpoint: parameters, progress counters and RNG position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub state: TrainState,
}

pub fn save_checkpoint(path: &Path, config: &TrainConfig, state: &TrainState) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        train_config: config.clone(),
        epoch: state.epoch,
        step: state.step,
        rng: RngSnapshot {
            seed: state.rng.get_seed(),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        params: state.params.clone(),
    };
    let text = serde_json::to_string(&file)?;
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    parse_checkpoint(&text)
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::CorruptFile(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::CorruptFile("missing version".into()))?;
    if version != u64::from(CHECKPOINT_VERSION) {
        return Err(Error::VersionMismatch {
            found: version as u32,
            expected: CHECKPOINT_VERSION,
        });
    }
    let file: CheckpointFile = serde_json::from_value(value).map_err(|e| Error::CorruptFile(e.to_string()))?;
    let word_pos: u128 = file
        .rng
        .word_pos
        .parse()
        .map_err(|_| Error::CorruptFile("bad rng position".into()))?;
    let mut rng = ChaCha8Rng::from_seed(file.rng.seed);
    rng.set_stream(file.rng.stream);
    rng.set_word_pos(word_pos);
    let c = &file.params.config;
    let expected = ModelParams::zeros(*c);
    if file.params.groups().iter().zip(expected.groups()).any(|((_, a), (_, b))| a.len() != b.len()) {
        return Err(Error::CorruptFile("parameter shapes do not match config".into()));
    }
    Ok(Checkpoint {
        train_config: file.train_config,
        state: TrainState {
            params: file.params,
            epoch: file.epoch,
            step: file.step,
            rng,
        },
    })
}
