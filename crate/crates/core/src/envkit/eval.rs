//! Closed-loop rollouts of a trained student.

use crate::error::Result;
use crate::metrics::EpisodeResult;
use crate::model::{self, ModelParams};
use crate::segmenter::{segment, RawTrajectory, SegmentationRules};
use crate::supervision::build_masks;
use crate::tokenizer::{label_tokens, tokenize_with_offsets, Vocab};

use super::{reset, run_episode, scripted_teacher, task_instances, DifficultyMix, Policy, WorldState};

const EVAL_SEED_SALT: u64 = 0x0e7a_1000_5eed;
const MAX_REASON_TOKENS: usize = 32;

/// Greedy-decoding student: writes `Reasoning:` then decodes to the first `.`;
/// writes `Action:` then decodes a verb and as many arguments as it takes.
pub struct StudentPolicy<'a> {
    params: &'a ModelParams,
    vocab: &'a Vocab,
    reasoning: [u32; 2],
    action: [u32; 2],
    period: u32,
}

impl<'a> StudentPolicy<'a> {
    pub fn new(params: &'a ModelParams, vocab: &'a Vocab) -> Self {
        Self {
            params,
            vocab,
            reasoning: [vocab.id("Reasoning"), vocab.id(":")],
            action: [vocab.id("Action"), vocab.id(":")],
            period: vocab.id("."),
        }
    }

    fn arity(verb: &str) -> usize {
        match verb {
            "goto" | "take" | "open" => 1,
            "place" => 2,
            _ => 0,
        }
    }
}

impl Policy for StudentPolicy<'_> {
    fn turn(&mut self, _state: &WorldState, transcript: &[String]) -> Result<(String, String)> {
        let doc = transcript.join("\n");
        let mut ids = tokenize_with_offsets(&doc, self.vocab).token_ids;

        ids.extend(self.reasoning);
        let start = ids.len();
        ids = model::greedy_decode(self.params, &ids, MAX_REASON_TOKENS, Some(self.period))?;
        let reason = format!("Reasoning: {}", self.vocab.detokenize(&ids[start..]));

        ids.extend(self.action);
        let start = ids.len();
        ids = model::greedy_decode(self.params, &ids, 1, None)?;
        let verb = self.vocab.token(ids[start]).to_string();
        ids = model::greedy_decode(self.params, &ids, Self::arity(&verb), None)?;
        let action = format!("Action: {}", self.vocab.detokenize(&ids[start..]));
        Ok((reason, action))
    }
}

/// Token ids of the reasoning spans of `lines`, using the same segmentation as training.
pub fn reason_token_ids(lines: &[String], rules: &SegmentationRules, vocab: &Vocab) -> Vec<u32> {
    let raw = RawTrajectory {
        env_name: super::ENV_NAME.into(),
        task_id: String::new(),
        goal: String::new(),
        lines: lines.to_vec(),
        final_success: false,
    };
    let Ok(seg) = segment(&raw, rules) else {
        return Vec::new();
    };
    let Ok(tok) = label_tokens(tokenize_with_offsets(&seg.document, vocab), &seg) else {
        return Vec::new();
    };
    let masks = build_masks(&tok);
    tok.token_ids
        .iter()
        .zip(&masks.m_r)
        .filter(|(_, &m)| m == 1)
        .map(|(&id, _)| id)
        .collect()
}

/// Roll out `policy` on `n_episodes` fresh worlds and collect per-episode metric inputs.
pub fn evaluate_with(
    policy: &mut dyn Policy,
    vocab: &Vocab,
    rules: &SegmentationRules,
    n_episodes: usize,
    seed: u64,
    mix: &DifficultyMix,
) -> Result<Vec<EpisodeResult>> {
    task_instances(n_episodes, seed ^ EVAL_SEED_SALT, mix)
        .into_iter()
        .map(|(id, s, d)| {
            let mut reference = Vec::new();
            let ep = run_episode(reset(s, d), id, policy, &mut |st| {
                if let Ok((r, _)) = scripted_teacher(st) {
                    reference.push(r);
                }
            })?;
            let student_reason = reason_token_ids(&ep.raw.lines, rules, vocab);
            Ok(EpisodeResult {
                success: ep.success,
                steps: ep.steps,
                reason_tokens: student_reason.len(),
                student_reason,
                teacher_reason: reason_token_ids(&reference, rules, vocab),
            })
        })
        .collect()
}

/// Evaluate a student model in closed loop.
pub fn evaluate_policy(
    params: &ModelParams,
    vocab: &Vocab,
    rules: &SegmentationRules,
    n_episodes: usize,
    seed: u64,
    mix: &DifficultyMix,
) -> Result<Vec<EpisodeResult>> {
    evaluate_with(&mut StudentPolicy::new(params, vocab), vocab, rules, n_episodes, seed, mix)
}
