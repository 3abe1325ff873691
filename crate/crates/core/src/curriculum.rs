//! Complexity scoring and easy-to-hard scheduling of training trajectories.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::teacher_entropy;
use crate::model::Logits;
use crate::supervision::SupervisionMasks;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for ComplexityWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }
}

impl ComplexityWeights {
    pub fn scaled(self, k: f64) -> Self {
        Self {
            alpha: self.alpha * k,
            beta: self.beta * k,
            gamma: self.gamma * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTrajectory {
    pub task_id: String,
    pub len_r: usize,
    pub len_a: usize,
    pub entropy: f64,
    pub score: f64,
}

/// `alpha * |reason tokens| + beta * |action tokens| + gamma * mean teacher entropy`,
/// the entropy averaged over supervised positions.
pub fn complexity(masks: &SupervisionMasks, teacher: &Logits, w: ComplexityWeights) -> ScoredTrajectory {
    let union = masks.union();
    let entropy = teacher_entropy(teacher, Some(&union));
    score_from_parts(String::new(), masks.reason_count(), masks.action_count(), entropy, w)
}

pub fn score_from_parts(
    task_id: String,
    len_r: usize,
    len_a: usize,
    entropy: f64,
    w: ComplexityWeights,
) -> ScoredTrajectory {
    // summation-order noise would otherwise split ties between equivalent trajectories
    let entropy = (entropy * 1e9).round() / 1e9;
    ScoredTrajectory {
        task_id,
        len_r,
        len_a,
        entropy,
        score: w.alpha * len_r as f64 + w.beta * len_a as f64 + w.gamma * entropy,
    }
}

/// Linear pacing `min(1, start + (1 - start) * e / E)` for `e = 1..=E`.
pub fn linear_pacing(epochs: usize, start: f64) -> Vec<f64> {
    (1..=epochs)
        .map(|e| (start + (1.0 - start) * e as f64 / epochs as f64).min(1.0))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumPlan {
    /// Corpus indices sorted by ascending score (ties by task id).
    pub order: Vec<usize>,
    pub task_ids: Vec<String>,
    pub scores: Vec<f64>,
    /// Fraction of the corpus available at epoch `e` is `pacing[e - 1]`.
    pub pacing: Vec<f64>,
    pub weights: ComplexityWeights,
}

#[derive(Serialize)]
struct PlanDump<'a> {
    alpha: f64,
    beta: f64,
    gamma: f64,
    order: &'a [String],
    pacing: &'a [f64],
}

pub fn build_plan(scored: &[ScoredTrajectory], pacing: &[f64], weights: ComplexityWeights) -> Result<CurriculumPlan> {
    if scored.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a]
            .score
            .total_cmp(&scored[b].score)
            .then_with(|| scored[a].task_id.cmp(&scored[b].task_id))
    });
    // exposure may only grow
    let mut running = 0.0f64;
    let pacing = pacing
        .iter()
        .map(|&p| {
            running = running.max(p.clamp(0.0, 1.0));
            running
        })
        .collect();
    Ok(CurriculumPlan {
        task_ids: order.iter().map(|&i| scored[i].task_id.clone()).collect(),
        scores: order.iter().map(|&i| scored[i].score).collect(),
        order,
        pacing,
        weights,
    })
}

impl CurriculumPlan {
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn epochs(&self) -> usize {
        self.pacing.len()
    }

    /// Number of lowest-scoring trajectories available at 1-based `epoch`.
    pub fn available_count(&self, epoch: usize) -> usize {
        let frac = self
            .pacing
            .get(epoch.saturating_sub(1))
            .or(self.pacing.last())
            .copied()
            .unwrap_or(1.0);
        ((frac * self.len() as f64).ceil() as usize).clamp(1, self.len())
    }

    /// Highest score a draw at `epoch` may have.
    pub fn threshold(&self, epoch: usize) -> f64 {
        self.scores[self.available_count(epoch) - 1]
    }

    /// `count` corpus indices drawn uniformly with replacement from the available prefix.
    pub fn sample<R: Rng>(&self, epoch: usize, count: usize, rng: &mut R) -> Vec<usize> {
        let n = self.available_count(epoch);
        (0..count).map(|_| self.order[rng.gen_range(0..n)]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PlanDump {
            alpha: self.weights.alpha,
            beta: self.weights.beta,
            gamma: self.weights.gamma,
            order: &self.task_ids,
            pacing: &self.pacing,
        })?)
    }
}
