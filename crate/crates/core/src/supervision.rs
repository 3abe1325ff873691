//! Segment-aware token masks, their validation, overlays and span statistics.

use serde::{Deserialize, Serialize};

use crate::segmenter::{Finding, SegmentLabel, ValidationReport};
use crate::tokenizer::{TokenizedTrajectory, Vocab};

/// Binary per-token gates for the reasoning and action losses.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupervisionMasks {
    pub m_r: Vec<u8>,
    pub m_a: Vec<u8>,
}

impl SupervisionMasks {
    pub fn len(&self) -> usize {
        self.m_r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_r.is_empty()
    }

    pub fn reason_count(&self) -> usize {
        self.m_r.iter().map(|&b| b as usize).sum()
    }

    pub fn action_count(&self) -> usize {
        self.m_a.iter().map(|&b| b as usize).sum()
    }

    /// Positions where either mask is set.
    pub fn union(&self) -> Vec<u8> {
        self.m_r.iter().zip(&self.m_a).map(|(&r, &a)| r | a).collect()
    }
}

pub fn build_masks(tok: &TokenizedTrajectory) -> SupervisionMasks {
    let bit = |want: SegmentLabel| tok.labels.iter().map(|l| u8::from(*l == Some(want))).collect();
    SupervisionMasks {
        m_r: bit(SegmentLabel::Reason),
        m_a: bit(SegmentLabel::Action),
    }
}

pub fn validate_masks(masks: &SupervisionMasks, tok: &TokenizedTrajectory) -> ValidationReport {
    let mut report = ValidationReport::default();
    let t = tok.len();
    if masks.m_r.len() != t || masks.m_a.len() != t {
        report.findings.push(Finding::MaskLengthMismatch {
            tokens: t,
            m_r: masks.m_r.len(),
            m_a: masks.m_a.len(),
        });
        return report;
    }
    for (i, label) in tok.labels.iter().enumerate() {
        let (r, a) = (masks.m_r[i], masks.m_a[i]);
        if r as u32 + a as u32 > 1 {
            report.findings.push(Finding::MaskOverlap { token: i });
            continue;
        }
        match label {
            Some(_) if r == 0 && a == 0 => report.findings.push(Finding::UncoveredSupervised { token: i }),
            None if r != 0 || a != 0 => report.findings.push(Finding::MaskOnUnsupervised { token: i }),
            _ => {}
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayColor {
    Reason,
    Action,
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlayEntry {
    pub text: String,
    pub color: OverlayColor,
}

pub type OverlaySpec = Vec<OverlayEntry>;

/// Token texts paired with their mask colour. `doc` supplies the source text
/// so UNK tokens still render their original spelling.
pub fn overlay_data(tok: &TokenizedTrajectory, masks: &SupervisionMasks, doc: &str) -> OverlaySpec {
    tok.offsets
        .iter()
        .enumerate()
        .map(|(t, r)| OverlayEntry {
            text: doc.get(r.clone()).unwrap_or_default().to_string(),
            color: if masks.m_r[t] == 1 {
                OverlayColor::Reason
            } else if masks.m_a[t] == 1 {
                OverlayColor::Action
            } else {
                OverlayColor::None
            },
        })
        .collect()
}

/// Same as [`overlay_data`] but spelled from vocabulary ids.
pub fn overlay_from_ids(tok: &TokenizedTrajectory, masks: &SupervisionMasks, vocab: &Vocab) -> OverlaySpec {
    tok.token_ids
        .iter()
        .enumerate()
        .map(|(t, &id)| OverlayEntry {
            text: vocab.token(id).to_string(),
            color: match (masks.m_r[t], masks.m_a[t]) {
                (1, _) => OverlayColor::Reason,
                (_, 1) => OverlayColor::Action,
                _ => OverlayColor::None,
            },
        })
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub mean: f64,
    /// Population variance.
    pub variance: f64,
    pub min: usize,
    pub max: usize,
    /// `(length, episodes)` pairs sorted by length.
    pub histogram: Vec<(usize, usize)>,
}

impl LabelStats {
    fn from_counts(counts: &[usize]) -> Self {
        if counts.is_empty() {
            return Self::default();
        }
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let variance = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / n;
        let mut hist = std::collections::BTreeMap::new();
        for &c in counts {
            *hist.entry(c).or_insert(0usize) += 1;
        }
        Self {
            mean,
            variance,
            min: *counts.iter().min().unwrap(),
            max: *counts.iter().max().unwrap(),
            histogram: hist.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SpanStats {
    pub reason_tokens: Vec<usize>,
    pub action_tokens: Vec<usize>,
    pub reason: LabelStats,
    pub action: LabelStats,
}

pub fn span_stats<'a>(corpus: impl IntoIterator<Item = &'a SupervisionMasks>) -> SpanStats {
    let (reason_tokens, action_tokens): (Vec<_>, Vec<_>) = corpus
        .into_iter()
        .map(|m| (m.reason_count(), m.action_count()))
        .unzip();
    SpanStats {
        reason: LabelStats::from_counts(&reason_tokens),
        action: LabelStats::from_counts(&action_tokens),
        reason_tokens,
        action_tokens,
    }
}
