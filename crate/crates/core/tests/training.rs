use std::collections::HashMap;

use sadkit::curriculum::{build_plan, ComplexityWeights};
use sadkit::envkit::{generate_corpus, DifficultyMix};
use sadkit::model::init_params;
use sadkit::segmenter::SegmentationRules;
use sadkit::tokenizer::Vocab;
use sadkit::trainer::{
    corpus_vocab, load_checkpoint, plan_for, prepare, save_checkpoint, score_corpus, train, PreparedTrajectory,
    Teacher, TrainConfig, TrainLog, TrainState, Trainer, Variant,
};

fn corpus(n: usize, seed: u64) -> (Vec<PreparedTrajectory>, Vocab) {
    let raws = generate_corpus(n, seed, &DifficultyMix::default()).unwrap();
    let vocab = corpus_vocab(&raws, 1).unwrap();
    let rules = SegmentationRules::default();
    let prepared = raws.iter().map(|r| prepare(r, &rules, &vocab).unwrap().0).collect();
    (prepared, vocab)
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        steps_per_epoch: 5,
        ..TrainConfig::default()
    }
}

const TEACHER: Teacher = Teacher::Scripted { epsilon: 0.05 };

#[test]
fn plan_is_sorted_and_scale_invariant() {
    let (prepared, vocab) = corpus(200, 2);
    let w = ComplexityWeights {
        alpha: 1.0,
        beta: 2.0,
        gamma: 5.0,
    };
    let scored = score_corpus(&prepared, &TEACHER, vocab.len(), w).unwrap();
    let plan = build_plan(&scored, &[1.0], w).unwrap();
    assert!(plan.scores.windows(2).all(|p| p[0] <= p[1]));
    let scored3 = score_corpus(&prepared, &TEACHER, vocab.len(), w.scaled(3.0)).unwrap();
    assert_eq!(build_plan(&scored3, &[1.0], w.scaled(3.0)).unwrap().order, plan.order);
}

#[test]
fn draws_respect_pacing_over_fifty_epochs() {
    let (prepared, vocab) = corpus(120, 3);
    let config = TrainConfig {
        epochs: 50,
        steps_per_epoch: 2,
        batch_size: 3,
        ..TrainConfig::default()
    };
    let plan = plan_for(&prepared, &TEACHER, vocab.len(), &config).unwrap();
    let score: HashMap<usize, f64> = plan.order.iter().copied().zip(plan.scores.iter().copied()).collect();
    let trainer = Trainer::new(&prepared, &plan, &TEACHER, config.clone()).unwrap();
    let mut state = TrainState::new(init_params(config.model_config(&vocab)).unwrap(), 0);
    let mut log = TrainLog::default();
    trainer.run(&mut state, &mut log).unwrap();
    assert_eq!(log.epochs.len(), 50);
    assert_eq!(log.steps.len(), 100);
    let mut prev = 0;
    for e in &log.epochs {
        assert!(e.available >= prev);
        prev = e.available;
        for i in &e.draws {
            assert!(score[i] <= e.threshold, "epoch {}: draw {i} above threshold", e.epoch);
        }
    }
    assert_eq!(log.epochs.last().unwrap().available, prepared.len());
}

#[test]
fn training_is_deterministic() {
    let (prepared, vocab) = corpus(60, 4);
    let a = train(&prepared, &vocab, &TEACHER, &quick_config()).unwrap();
    let b = train(&prepared, &vocab, &TEACHER, &quick_config()).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!(a.1.steps, b.1.steps);
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let (prepared, vocab) = corpus(60, 5);
    for variant in [Variant::Full, Variant::RandomMask] {
        let config = TrainConfig {
            variant,
            ..quick_config()
        };
        let plan = plan_for(&prepared, &TEACHER, vocab.len(), &config).unwrap();
        let trainer = Trainer::new(&prepared, &plan, &TEACHER, config.clone()).unwrap();
        let init = init_params(config.model_config(&vocab)).unwrap();

        let mut straight = TrainState::new(init.clone(), config.seed);
        trainer.run(&mut straight, &mut TrainLog::default()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut half = TrainState::new(init, config.seed);
        let mut log = TrainLog::default();
        trainer.run_epoch(&mut half, &mut log).unwrap();
        trainer.run_epoch(&mut half, &mut log).unwrap();
        save_checkpoint(&path, &config, &half).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.state, half);
        assert_eq!(loaded.train_config, config);
        let mut resumed = loaded.state;
        trainer.run(&mut resumed, &mut log).unwrap();
        assert_eq!(resumed, straight, "{variant}");
    }
}

#[test]
fn loss_descends_on_desk_corpus() {
    let (prepared, vocab) = corpus(2000, 0);
    let config = TrainConfig {
        epochs: 10,
        ..TrainConfig::default()
    };
    let (_, log) = train(&prepared, &vocab, &TEACHER, &config).unwrap();
    let k = log.steps.len() / 10;
    let mean = |s: &[sadkit::trainer::StepLoss]| s.iter().map(|x| x.total).sum::<f64>() / s.len() as f64;
    let first = mean(&log.steps[..k]);
    let last = mean(&log.steps[log.steps.len() - k..]);
    assert!(last < first, "first {first} last {last}");
}

#[test]
fn act_only_leaves_reason_only_embeddings_untouched() {
    let (prepared, vocab) = corpus(40, 6);
    let config = TrainConfig {
        variant: Variant::ActOnly,
        context: 1,
        ..quick_config()
    };
    let init = init_params(config.model_config(&vocab)).unwrap();
    let (trained, _) = train(&prepared, &vocab, &TEACHER, &config).unwrap();
    // with a one-token window, a token's embedding only feeds the prediction right after it
    let mut feeds_action = vec![false; vocab.len()];
    for p in &prepared {
        for t in 1..p.token_ids.len() {
            if p.m_a[t] == 1 {
                feeds_action[p.token_ids[t - 1] as usize] = true;
            }
        }
    }
    let d = config.embed_dim;
    for (id, feeds) in feeds_action.iter().enumerate() {
        let row = |p: &sadkit::model::ModelParams| p.embedding[id * d..(id + 1) * d].to_vec();
        if !feeds {
            assert_eq!(row(&trained), row(&init), "token {}", vocab.token(id as u32));
        }
    }
    assert!(feeds_action.iter().any(|&f| f));
}
