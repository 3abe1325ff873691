//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashMap;
use std::fs;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sadkit::curriculum::{build_plan, ComplexityWeights};
use sadkit::envkit::{generate_corpus, DifficultyMix};
use sadkit::losses::{ce_per_token, kl_per_token, masked_objective, LossMode, Objective};
use sadkit::metrics::{avg_reasoning_length, avg_steps, cot_match_rate, task_success_rate, OverlapMode};
use sadkit::model::{backward, forward, init_params, Logits, ModelConfig, ModelParams};
use sadkit::segmenter::{load_jsonl, save_jsonl, segment, SegmentLabel, SegmentationRules};
use sadkit::supervision::build_masks;
use sadkit::tokenizer::{label_tokens, split_offsets, tokenize_with_offsets};
use sadkit::trainer::{
    corpus_vocab, load_checkpoint, plan_for, prepare, save_checkpoint, score_corpus, PreparedTrajectory, Teacher,
    TrainConfig, TrainLog, TrainState, Trainer,
};
use sadkit_cli::experiment::UNTRAINED;
use sadkit_cli::{cmd_eval, cmd_experiment, cmd_generate, cmd_preprocess, cmd_train, ExperimentConfig};

// tolerances and budgets
const METRIC_TOL: f64 = 0.005;
const KL_SELF_TOL: f64 = 1e-12;
const KL_REF: f64 = 0.130812;
const KL_REF_TOL: f64 = 1e-6;
const CE_UNIFORM_TOL: f64 = 1e-12;
const MASKED_LOSS_TOL: f64 = 1e-10;
const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;
const MASK_CORPUS: usize = 10_000;
const DESK_CORPUS: usize = 2000;
const SEEDS: usize = 5;
const TSR_GAIN: f64 = 30.0;
const RANDOM_MASK_GAP: f64 = 3.0;
const JSONL_RECORDS: usize = 1000;
const BUDGET_1: f64 = 1.0;
const BUDGET_2: f64 = 30.0;
const BUDGET_3: f64 = 5.0;
const BUDGET_4: f64 = 10.0;
const BUDGET_5: f64 = 5.0;
const BUDGET_7: f64 = 300.0;
const BUDGET_8: f64 = 1500.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn within_budget(o: Outcome, secs: f64, budget: f64) -> Outcome {
    let detail = format!("{}; {secs:.2}s (budget {budget}s)", o.detail);
    outcome(o.pass && secs < budget, detail)
}

fn c1_metric_oracles() -> Outcome {
    let arl = avg_reasoning_length(&[12, 15, 14]).unwrap();
    let steps = avg_steps(&[16, 13, 20]).unwrap();
    let tsr = task_success_rate(&[true, true, true, false]).unwrap();
    let teacher: Vec<u32> = (0..9).collect();
    let student: Vec<u32> = vec![0, 1, 2, 3, 4, 5, 40, 41];
    let cot = cot_match_rate(&[(student, teacher)], OverlapMode::Multiset).unwrap();
    let pass = (arl - 13.67).abs() <= METRIC_TOL
        && (cot - 66.67).abs() <= METRIC_TOL
        && (steps - 16.33).abs() <= METRIC_TOL
        && tsr == 75.0;
    outcome(pass, format!("arl {arl:.4}, cot {cot:.4}, steps {steps:.4}, tsr {tsr}"))
}

fn c2_mask_invariants() -> Outcome {
    let raws = generate_corpus(MASK_CORPUS, 101, &DifficultyMix::default()).unwrap();
    let vocab = corpus_vocab(&raws, 1).unwrap();
    let rules = SegmentationRules::default();
    let (mut overlaps, mut uncovered, mut count_mismatch) = (0usize, 0usize, 0usize);
    for raw in &raws {
        let seg = segment(raw, &rules).unwrap();
        let tok = label_tokens(tokenize_with_offsets(&seg.document, &vocab), &seg).unwrap();
        let m = build_masks(&tok);
        for t in 0..tok.len() {
            if m.m_r[t] + m.m_a[t] > 1 {
                overlaps += 1;
            }
            if tok.labels[t].is_some() && m.m_r[t] == 0 && m.m_a[t] == 0 {
                uncovered += 1;
            }
        }
        let recount = |label| -> usize { seg.spans_with(label).map(|s| split_offsets(&s.text).len()).sum() };
        if m.reason_count() != recount(SegmentLabel::Reason) || m.action_count() != recount(SegmentLabel::Action) {
            count_mismatch += 1;
        }
    }
    outcome(
        overlaps + uncovered + count_mismatch == 0,
        format!("{MASK_CORPUS} episodes: {overlaps} overlaps, {uncovered} uncovered, {count_mismatch} count mismatches"),
    )
}

fn softmax_direct(row: &[f64]) -> Vec<f64> {
    let z: f64 = row.iter().map(|x| x.exp()).sum();
    row.iter().map(|x| x.exp() / z).collect()
}

fn random_logits(rows: usize, v: usize, rng: &mut ChaCha8Rng) -> Logits {
    let mut l = Logits::zeros(rows, v);
    for x in l.data.iter_mut() {
        *x = rng.gen_range(-4.0..4.0);
    }
    l
}

fn random_masks(t: usize, rng: &mut ChaCha8Rng) -> (Vec<u8>, Vec<u8>) {
    let labels: Vec<u8> = (0..t).map(|_| rng.gen_range(0..3)).collect();
    (
        labels.iter().map(|&l| u8::from(l == 1)).collect(),
        labels.iter().map(|&l| u8::from(l == 2)).collect(),
    )
}

fn c3_losses() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut self_kl = 0.0f64;
    for _ in 0..100 {
        let row: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
        self_kl = self_kl.max(kl_per_token(&row, &row).abs());
    }
    let (pt, ps) = ([0.75f64, 0.25], [0.5f64, 0.5]);
    let oracle: f64 = pt.iter().zip(&ps).map(|(p, q)| p * (p / q).ln()).sum();
    let kl = kl_per_token(&pt.map(f64::ln), &ps.map(f64::ln));
    let ce = ce_per_token(&[0.0; 4], 2);

    let obj = Objective {
        mode: LossMode::Kl,
        lambda_r: 1.0,
        lambda_a: 1.0,
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.gen_range(1..30);
        let v = rng.gen_range(2..12);
        let teacher = random_logits(t, v, &mut rng);
        let student = random_logits(t, v, &mut rng);
        let (m_r, m_a) = random_masks(t, &mut rng);
        let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..v as u32)).collect();
        let (b, _) = masked_objective(&obj, &teacher, &student, &ids, &m_r, &m_a).unwrap();
        let (mut cot, mut act) = (0.0, 0.0);
        for i in 0..t {
            let p = softmax_direct(teacher.row(i));
            let q = softmax_direct(student.row(i));
            let kl: f64 = p.iter().zip(&q).map(|(p, q)| p * (p / q).ln()).sum();
            cot += f64::from(m_r[i]) * kl;
            act += f64::from(m_a[i]) * kl;
        }
        worst = worst.max((b.cot - cot).abs()).max((b.act - act).abs()).max((b.total - cot - act).abs());
    }
    let pass = self_kl <= KL_SELF_TOL
        && (kl - oracle).abs() <= KL_REF_TOL
        && (kl - KL_REF).abs() <= KL_REF_TOL
        && (ce - 4f64.ln()).abs() <= CE_UNIFORM_TOL
        && worst <= MASKED_LOSS_TOL;
    outcome(
        pass,
        format!("KL(p,p) max {self_kl:.1e}, KL ref {kl:.7} (oracle {oracle:.7}), CE {ce:.12}, masked max diff {worst:.1e}"),
    )
}

fn loss_at(p: &ModelParams, ids: &[u32], teacher: &Logits, m_r: &[u8], m_a: &[u8], obj: &Objective) -> f64 {
    let s = forward(p, ids).unwrap();
    masked_objective(obj, teacher, &s, ids, m_r, m_a).unwrap().0.total
}

fn c4_gradients() -> Outcome {
    let config = ModelConfig {
        vocab_size: 11,
        embed_dim: 8,
        context: 4,
        hidden: 16,
        bos_id: 1,
        seed: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut p = init_params(config).unwrap();
    for (_, g) in p.groups_mut() {
        for x in g.iter_mut() {
            *x = rng.gen_range(-0.8..0.8);
        }
    }
    let t = 12;
    let ids: Vec<u32> = (0..t).map(|_| rng.gen_range(0..11)).collect();
    let teacher = random_logits(t, 11, &mut rng);
    let (m_r, m_a) = random_masks(t, &mut rng);
    let obj = Objective {
        mode: LossMode::Kl,
        lambda_r: 1.0,
        lambda_a: 1.0,
    };
    let student = forward(&p, &ids).unwrap();
    let (_, dlogits) = masked_objective(&obj, &teacher, &student, &ids, &m_r, &m_a).unwrap();
    let grads = backward(&p, &ids, &dlogits).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (gi, (_, analytic)) in grads.groups().iter().enumerate() {
        for i in 0..analytic.len() {
            let mut plus = p.clone();
            plus.groups_mut()[gi].1[i] += FD_STEP;
            let mut minus = p.clone();
            minus.groups_mut()[gi].1[i] -= FD_STEP;
            let numeric = (loss_at(&plus, &ids, &teacher, &m_r, &m_a, &obj)
                - loss_at(&minus, &ids, &teacher, &m_r, &m_a, &obj))
                / (2.0 * FD_STEP);
            let a = analytic[i];
            worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6));
            checked += 1;
        }
    }
    let gated = (0..t)
        .filter(|&i| m_r[i] == 0 && m_a[i] == 0)
        .all(|i| dlogits.row(i).iter().all(|&g| g == 0.0));
    outcome(
        worst < FD_REL_TOL && gated,
        format!("{checked} params, max rel err {worst:.2e}, unsupervised rows zero: {gated}"),
    )
}

fn prepared_corpus(n: usize, seed: u64) -> (Vec<PreparedTrajectory>, sadkit::tokenizer::Vocab) {
    let raws = generate_corpus(n, seed, &DifficultyMix::default()).unwrap();
    let vocab = corpus_vocab(&raws, 1).unwrap();
    let rules = SegmentationRules::default();
    (raws.iter().map(|r| prepare(r, &rules, &vocab).unwrap().0).collect(), vocab)
}

fn c5_curriculum() -> Outcome {
    let teacher = Teacher::Scripted { epsilon: 0.05 };
    let (corpus, vocab) = prepared_corpus(150, 5);
    let w = ComplexityWeights {
        alpha: 1.0,
        beta: 0.5,
        gamma: 2.0,
    };
    let scored = score_corpus(&corpus, &teacher, vocab.len(), w).unwrap();
    let plan = build_plan(&scored, &[1.0], w).unwrap();
    let sorted = plan.scores.windows(2).all(|p| p[0] <= p[1]);
    let scored3 = score_corpus(&corpus, &teacher, vocab.len(), w.scaled(3.0)).unwrap();
    let same_order = build_plan(&scored3, &[1.0], w.scaled(3.0)).unwrap().order == plan.order;

    let config = TrainConfig {
        epochs: 50,
        steps_per_epoch: 2,
        batch_size: 4,
        ..TrainConfig::default()
    };
    let plan = plan_for(&corpus, &teacher, vocab.len(), &config).unwrap();
    let score: HashMap<usize, f64> = plan.order.iter().copied().zip(plan.scores.iter().copied()).collect();
    let trainer = Trainer::new(&corpus, &plan, &teacher, config.clone()).unwrap();
    let mut state = TrainState::new(init_params(config.model_config(&vocab)).unwrap(), 0);
    let mut log = TrainLog::default();
    trainer.run(&mut state, &mut log).unwrap();
    let violations: usize = log
        .epochs
        .iter()
        .map(|e| e.draws.iter().filter(|i| score[i] > e.threshold).count())
        .sum();
    outcome(
        sorted && same_order && violations == 0 && log.epochs.len() == 50,
        format!("sorted {sorted}, x3 order unchanged {same_order}, {violations} pacing violations over {} epochs", log.epochs.len()),
    )
}

fn c6_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = cmd_generate(DESK_CORPUS, 6, &DifficultyMix::default(), &d.join("gen")).unwrap();
    cmd_preprocess(&corpus, None, 1, &d.join("prep")).unwrap();
    let config = TrainConfig {
        seed: 6,
        ..TrainConfig::default()
    };
    let mut ckpts = Vec::new();
    let mut metrics = Vec::new();
    for run in ["a", "b"] {
        let out = d.join(run);
        cmd_train(&config, &d.join("prep"), &out).unwrap();
        cmd_eval(&out, 100, 6, &DifficultyMix::default(), &out.join("eval")).unwrap();
        ckpts.push(fs::read(out.join("checkpoint.json")).unwrap());
        metrics.push(fs::read(out.join("eval/metrics.json")).unwrap());
    }
    let pass = ckpts[0] == ckpts[1] && metrics[0] == metrics[1];
    outcome(
        pass,
        format!("checkpoint bytes identical {}, metrics bytes identical {}", ckpts[0] == ckpts[1], metrics[0] == metrics[1]),
    )
}

fn c7_c8_experiment() -> (Outcome, Outcome) {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        seeds: SEEDS,
        corpus_size: DESK_CORPUS,
        ..ExperimentConfig::default()
    };
    let report = cmd_experiment(&config, dir.path()).unwrap();
    print!("{}", report.table());
    let mean = |v: &str| report.mean_tsr(v).unwrap();
    let secs_of = |v: &str| report.row(v).unwrap().secs;
    let setup: f64 = report.setup_secs.iter().sum();

    let (full, untrained) = (mean("full"), mean(UNTRAINED));
    let gain = full - untrained;
    let c7_secs = setup + secs_of(UNTRAINED) + secs_of("full");
    let c7 = within_budget(
        outcome(gain >= TSR_GAIN, format!("full {full:.2}% vs untrained {untrained:.2}%, gain {gain:.2} points")),
        c7_secs,
        BUDGET_7,
    );

    let others = ["reason-only", "act-only", "no-segmentation", "random-mask"];
    let dominated = others.iter().all(|v| full >= mean(v));
    let gap = full - mean("random-mask");
    let all_secs = setup + report.summary.iter().map(|r| r.secs).sum::<f64>();
    let detail = others
        .iter()
        .map(|v| format!("{v} {:.2}", mean(v)))
        .collect::<Vec<_>>()
        .join(", ");
    let c8 = within_budget(
        outcome(
            dominated && gap >= RANDOM_MASK_GAP,
            format!("full {full:.2} vs {detail}; full - random-mask = {gap:.2}"),
        ),
        all_secs,
        BUDGET_8,
    );
    (c7, c8)
}

fn c9_round_trips() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let raws = generate_corpus(JSONL_RECORDS, 9, &DifficultyMix::default()).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_jsonl(&raws, &a).unwrap();
    let loaded = load_jsonl(&a).unwrap();
    save_jsonl(&loaded, &b).unwrap();
    let jsonl_ok = loaded == raws && fs::read(&a).unwrap() == fs::read(&b).unwrap();

    let teacher = Teacher::Scripted { epsilon: 0.05 };
    let (corpus, vocab) = prepared_corpus(80, 9);
    let config = TrainConfig {
        epochs: 4,
        steps_per_epoch: 6,
        seed: 9,
        ..TrainConfig::default()
    };
    let plan = plan_for(&corpus, &teacher, vocab.len(), &config).unwrap();
    let trainer = Trainer::new(&corpus, &plan, &teacher, config.clone()).unwrap();
    let init = init_params(config.model_config(&vocab)).unwrap();
    let mut straight = TrainState::new(init.clone(), config.seed);
    trainer.run(&mut straight, &mut TrainLog::default()).unwrap();
    let mut half = TrainState::new(init, config.seed);
    let mut log = TrainLog::default();
    trainer.run_epoch(&mut half, &mut log).unwrap();
    trainer.run_epoch(&mut half, &mut log).unwrap();
    let ckpt = dir.path().join("ckpt.json");
    save_checkpoint(&ckpt, &config, &half).unwrap();
    let mut resumed = load_checkpoint(&ckpt).unwrap().state;
    trainer.run(&mut resumed, &mut log).unwrap();
    let resume_ok = resumed == straight;
    outcome(
        jsonl_ok && resume_ok,
        format!("{JSONL_RECORDS}-record JSONL identical {jsonl_ok}, resumed run bitwise equal {resume_ok}"),
    )
}

fn report(id: &str, name: &str, o: &Outcome) -> bool {
    println!("[{}] criterion {id} ({name}): {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn timed(f: fn() -> Outcome) -> (Outcome, f64) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed().as_secs_f64())
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filter.is_empty() || filter.iter().any(|f| f == id);
    let mut all = true;
    let quick: [(&str, &str, fn() -> Outcome, Option<f64>); 6] = [
        ("1", "metric oracles", c1_metric_oracles, Some(BUDGET_1)),
        ("2", "mask invariants", c2_mask_invariants, Some(BUDGET_2)),
        ("3", "loss correctness", c3_losses, Some(BUDGET_3)),
        ("4", "gradient gating and exactness", c4_gradients, Some(BUDGET_4)),
        ("5", "curriculum", c5_curriculum, Some(BUDGET_5)),
        ("6", "determinism", c6_determinism, None),
    ];
    for (id, name, f, budget) in quick {
        if !wanted(id) {
            continue;
        }
        let (o, secs) = timed(f);
        let o = match budget {
            Some(b) => within_budget(o, secs, b),
            None => outcome(o.pass, format!("{}; {secs:.2}s", o.detail)),
        };
        all &= report(id, name, &o);
    }
    if wanted("7") || wanted("8") {
        let (c7, c8) = c7_c8_experiment();
        all &= report("7", "end-to-end learning", &c7);
        all &= report("8", "ablation trend", &c8);
    }
    if wanted("9") {
        let (o, secs) = timed(c9_round_trips);
        all &= report("9", "round-trip and format stability", &outcome(o.pass, format!("{}; {secs:.2}s", o.detail)));
    }
    if !all {
        std::process::exit(1);
    }
}
