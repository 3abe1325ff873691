//! Task success, reasoning length, CoT match and step-latency metrics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsBundle {
    /// Task success rate, percent.
    pub tsr: f64,
    /// Average reasoning length, tokens.
    pub arl: f64,
    /// CoT match rate, percent.
    pub cot_match: f64,
    pub avg_steps: f64,
    pub n: usize,
}

/// How the student/teacher reasoning overlap is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlapMode {
    /// Multiset intersection, position-agnostic.
    #[default]
    Multiset,
    /// Distinct-token intersection over distinct teacher tokens.
    Set,
    /// Same token at the same offset.
    Positional,
}

/// What one evaluated episode contributes to the metrics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps: usize,
    pub reason_tokens: usize,
    pub student_reason: Vec<u32>,
    pub teacher_reason: Vec<u32>,
}

pub fn task_success_rate(successes: &[bool]) -> Result<f64> {
    if successes.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(100.0 * successes.iter().filter(|&&s| s).count() as f64 / successes.len() as f64)
}

fn mean(xs: &[usize]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(xs.iter().sum::<usize>() as f64 / xs.len() as f64)
}

pub fn avg_reasoning_length(reason_tokens: &[usize]) -> Result<f64> {
    mean(reason_tokens)
}

pub fn avg_steps(steps: &[usize]) -> Result<f64> {
    mean(steps)
}

/// Overlap count between a student and a teacher token sequence.
pub fn overlap(student: &[u32], teacher: &[u32], mode: OverlapMode) -> usize {
    match mode {
        OverlapMode::Multiset => {
            let mut counts: HashMap<u32, usize> = HashMap::new();
            for &t in student {
                *counts.entry(t).or_default() += 1;
            }
            teacher
                .iter()
                .filter(|t| match counts.get_mut(t) {
                    Some(c) if *c > 0 => {
                        *c -= 1;
                        true
                    }
                    _ => false,
                })
                .count()
        }
        OverlapMode::Set => {
            let s: HashSet<u32> = student.iter().copied().collect();
            let t: HashSet<u32> = teacher.iter().copied().collect();
            s.intersection(&t).count()
        }
        OverlapMode::Positional => student.iter().zip(teacher).filter(|(a, b)| a == b).count(),
    }
}

fn denominator(teacher: &[u32], mode: OverlapMode) -> usize {
    match mode {
        OverlapMode::Set => teacher.iter().collect::<HashSet<_>>().len(),
        _ => teacher.len(),
    }
}

/// Mean over episodes of overlap / teacher span length, in percent.
pub fn cot_match_rate<S: AsRef<[u32]>, T: AsRef<[u32]>>(pairs: &[(S, T)], mode: OverlapMode) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sum = 0.0;
    for (i, (s, t)) in pairs.iter().enumerate() {
        let (s, t) = (s.as_ref(), t.as_ref());
        if t.is_empty() {
            return Err(Error::EmptyTeacherSpan(i));
        }
        sum += overlap(s, t, mode) as f64 / denominator(t, mode) as f64;
    }
    Ok(100.0 * sum / pairs.len() as f64)
}

impl MetricsBundle {
    pub fn from_episodes(episodes: &[EpisodeResult], mode: OverlapMode) -> Result<Self> {
        let successes: Vec<bool> = episodes.iter().map(|e| e.success).collect();
        let lengths: Vec<usize> = episodes.iter().map(|e| e.reason_tokens).collect();
        let steps: Vec<usize> = episodes.iter().map(|e| e.steps).collect();
        let pairs: Vec<(&[u32], &[u32])> = episodes
            .iter()
            .map(|e| (e.student_reason.as_slice(), e.teacher_reason.as_slice()))
            .collect();
        Ok(Self {
            tsr: task_success_rate(&successes)?,
            arl: avg_reasoning_length(&lengths)?,
            cot_match: cot_match_rate(&pairs, mode)?,
            avg_steps: avg_steps(&steps)?,
            n: episodes.len(),
        })
    }
}

/// Metrics report as written to disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tsr: f64,
    pub arl: f64,
    pub cot_match: f64,
    pub avg_steps: f64,
    pub n: usize,
    pub variant: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(m: MetricsBundle, variant: impl Into<String>, seed: u64) -> Self {
        Self {
            tsr: m.tsr,
            arl: m.arl,
            cot_match: m.cot_match,
            avg_steps: m.avg_steps,
            n: m.n,
            variant: variant.into(),
            seed,
        }
    }
}
