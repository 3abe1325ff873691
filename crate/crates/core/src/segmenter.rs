//! Rule-based segmentation of teacher trajectories into reasoning and action spans.
//!
//! A trajectory is a list of text lines. Lines matching the reasoning pattern
//! become `Reason` spans, lines matching the action (or answer) pattern become
//! `Action` spans, and everything else (goal headers, observations) stays outside
//! every span. The document that spans index into is the lines joined by `\n`;
//! [`linearize`] renders the bracket-marker form `[REASON] ... [ACT] ...`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};

pub const REASON_MARKER: &str = "[REASON]";
pub const ACT_MARKER: &str = "[ACT]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentLabel {
    Reason,
    Action,
}

/// A teacher episode before segmentation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawTrajectory {
    #[serde(rename = "env")]
    pub env_name: String,
    pub task_id: String,
    pub goal: String,
    pub lines: Vec<String>,
    #[serde(rename = "success")]
    pub final_success: bool,
}

impl RawTrajectory {
    /// The flattened document that span offsets refer to.
    pub fn document(&self) -> String {
        self.lines.join("\n")
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.lines.is_empty() {
            return Err("\"lines\" is empty".into());
        }
        if let Some(i) = self.lines.iter().position(|l| l.contains('\n')) {
            return Err(format!("line {i} contains a newline"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub label: SegmentLabel,
    /// Exact document slice at `char_range`.
    pub text: String,
    /// Byte range into the document.
    pub char_range: Range<usize>,
    pub line_indices: Vec<usize>,
    /// Line bodies with their `Reasoning:`/`Action:` prefixes stripped, joined by one space.
    pub content: String,
}

/// Whether the line prefix (`Reasoning:`, `Action:`) belongs to the span it introduces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerPolicy {
    #[default]
    MarkersInSpan,
    MarkersUnsupervised,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedTrajectory {
    pub source: RawTrajectory,
    pub document: String,
    pub spans: Vec<Span>,
    pub marker_policy: MarkerPolicy,
}

impl SegmentedTrajectory {
    pub fn spans_with(&self, label: SegmentLabel) -> impl Iterator<Item = &Span> {
        self.spans.iter().filter(move |s| s.label == label)
    }
}

/// How matched lines are mapped to labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleMode {
    /// Each line is labeled by its own prefix.
    #[default]
    LinePrefix,
    /// Everything matched before the final answer line is reasoning; the answer is the action.
    TwoPhase,
}

/// On-disk form of [`SegmentationRules`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RulesFile {
    pub reason_pattern: String,
    pub action_pattern: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_pattern: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<RuleMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub marker_policy: Option<MarkerPolicy>,
}

impl Default for RulesFile {
    fn default() -> Self {
        Self {
            reason_pattern: r"^Reasoning:\s*(.+)".into(),
            action_pattern: r"^Action:\s*(.+)".into(),
            answer_pattern: Some(r"^Answer:\s*(.+)".into()),
            mode: None,
            marker_policy: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationRules {
    reason: Regex,
    action: Regex,
    answer: Option<Regex>,
    pub mode: RuleMode,
    pub marker_policy: MarkerPolicy,
}

impl Default for SegmentationRules {
    fn default() -> Self {
        Self::from_file(&RulesFile::default()).expect("built-in rules compile")
    }
}

impl SegmentationRules {
    pub fn from_file(file: &RulesFile) -> Result<Self> {
        let compile = |name: &str, pat: &str| -> Result<Regex> {
            if !pat.starts_with('^') {
                return Err(Error::InvalidRules(format!(
                    "{name} must be line-anchored with '^', got {pat:?}"
                )));
            }
            Regex::new(pat).map_err(|e| Error::InvalidRules(format!("{name}: {e}")))
        };
        Ok(Self {
            reason: compile("reason_pattern", &file.reason_pattern)?,
            action: compile("action_pattern", &file.action_pattern)?,
            answer: file
                .answer_pattern
                .as_deref()
                .map(|p| compile("answer_pattern", p))
                .transpose()?,
            mode: file.mode.unwrap_or_default(),
            marker_policy: file.marker_policy.unwrap_or_default(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let file: RulesFile = serde_json::from_str(&text)?;
        Self::from_file(&file)
    }

    pub fn two_phase() -> Self {
        Self {
            mode: RuleMode::TwoPhase,
            ..Self::default()
        }
    }

    pub fn with_marker_policy(mut self, policy: MarkerPolicy) -> Self {
        self.marker_policy = policy;
        self
    }

    /// Byte offset within `line` where the span body starts, if the pattern matches.
    fn body_start(re: &Regex, line: &str) -> Option<usize> {
        let caps = re.captures(line)?;
        Some(caps.get(1).map_or_else(|| caps.get(0).unwrap().end(), |m| m.start()))
    }
}

struct LineMatch {
    label: SegmentLabel,
    body_start: usize,
}

fn classify_lines(raw: &RawTrajectory, rules: &SegmentationRules) -> Result<Vec<Option<LineMatch>>> {
    let mut out = Vec::with_capacity(raw.lines.len());
    let mut answer_lines = Vec::new();
    for (i, line) in raw.lines.iter().enumerate() {
        let r = SegmentationRules::body_start(&rules.reason, line);
        let a = SegmentationRules::body_start(&rules.action, line);
        let ans = rules
            .answer
            .as_ref()
            .and_then(|re| SegmentationRules::body_start(re, line));
        if r.is_some() && (a.is_some() || ans.is_some()) {
            return Err(Error::ConflictingMatch { line: i });
        }
        if ans.is_some() {
            answer_lines.push(i);
        }
        out.push(match (r, a.or(ans)) {
            (Some(body_start), _) => Some(LineMatch {
                label: SegmentLabel::Reason,
                body_start,
            }),
            (None, Some(body_start)) => Some(LineMatch {
                label: SegmentLabel::Action,
                body_start,
            }),
            (None, None) => None,
        });
    }
    if rules.mode == RuleMode::TwoPhase {
        let final_answer = answer_lines.last().copied();
        for (i, m) in out.iter_mut().enumerate() {
            match (m.as_mut(), final_answer) {
                (Some(m), Some(f)) if i == f => m.label = SegmentLabel::Action,
                (Some(_), Some(f)) if i > f => *m = None,
                (Some(m), _) => m.label = SegmentLabel::Reason,
                (None, _) => {}
            }
        }
    }
    Ok(out)
}

/// Split a raw trajectory into labeled spans.
pub fn segment(raw: &RawTrajectory, rules: &SegmentationRules) -> Result<SegmentedTrajectory> {
    let matches = classify_lines(raw, rules)?;
    let document = raw.document();

    let mut line_start = Vec::with_capacity(raw.lines.len());
    let mut off = 0;
    for line in &raw.lines {
        line_start.push(off);
        off += line.len() + 1;
    }

    let mut spans: Vec<Span> = Vec::new();
    let mut prev_labeled: Option<usize> = None;
    for (i, m) in matches.iter().enumerate() {
        let Some(m) = m else {
            prev_labeled = None;
            continue;
        };
        let line = &raw.lines[i];
        let body = line[m.body_start..].trim_end();
        let start = match rules.marker_policy {
            MarkerPolicy::MarkersInSpan => line_start[i],
            MarkerPolicy::MarkersUnsupervised => line_start[i] + m.body_start,
        };
        let end = line_start[i] + line.len();
        // Only contiguous ranges merge; with unsupervised markers the next prefix sits in between.
        let extends = prev_labeled == Some(i.wrapping_sub(1))
            && rules.marker_policy == MarkerPolicy::MarkersInSpan
            && spans.last().is_some_and(|s| s.label == m.label);
        if extends {
            let last = spans.last_mut().unwrap();
            last.char_range.end = end;
            last.text = document[last.char_range.clone()].to_string();
            last.line_indices.push(i);
            if !body.is_empty() {
                if !last.content.is_empty() {
                    last.content.push(' ');
                }
                last.content.push_str(body);
            }
        } else if start < end {
            spans.push(Span {
                label: m.label,
                text: document[start..end].to_string(),
                char_range: start..end,
                line_indices: vec![i],
                content: body.to_string(),
            });
        }
        prev_labeled = Some(i);
    }

    if spans.is_empty() {
        return Err(Error::NoSupervisedSpans);
    }
    Ok(SegmentedTrajectory {
        source: raw.clone(),
        document,
        spans,
        marker_policy: rules.marker_policy,
    })
}

/// Render spans in bracket-marker form: `[REASON] body [ACT] body ...`.
pub fn linearize(seg: &SegmentedTrajectory) -> String {
    let mut out = String::new();
    for span in &seg.spans {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(match span.label {
            SegmentLabel::Reason => REASON_MARKER,
            SegmentLabel::Action => ACT_MARKER,
        });
        if !span.content.is_empty() {
            out.push(' ');
            out.push_str(&span.content);
        }
    }
    out
}

/// Parse bracket-marker text (as produced by [`linearize`]) back into spans.
///
/// The returned trajectory's document is `text` itself. Text before the first
/// marker is left outside every span.
pub fn parse_linearized(text: &str, policy: MarkerPolicy) -> Result<SegmentedTrajectory> {
    if text.contains('\n') {
        return Err(Error::MalformedRecord {
            line: 0,
            reason: "linearized text must be a single line".into(),
        });
    }
    let mut markers: Vec<(usize, SegmentLabel, usize)> = text
        .match_indices(REASON_MARKER)
        .map(|(i, m)| (i, SegmentLabel::Reason, m.len()))
        .chain(
            text.match_indices(ACT_MARKER)
                .map(|(i, m)| (i, SegmentLabel::Action, m.len())),
        )
        .collect();
    markers.sort_by_key(|m| m.0);
    if markers.is_empty() {
        return Err(Error::NoSupervisedSpans);
    }

    let mut spans = Vec::with_capacity(markers.len());
    for (k, &(pos, label, len)) in markers.iter().enumerate() {
        let seg_end = markers.get(k + 1).map_or(text.len(), |m| m.0);
        let end = pos + text[pos..seg_end].trim_end().len();
        let body_start = (pos + len + 1).min(end);
        let content = text[body_start..end].trim().to_string();
        let start = match policy {
            MarkerPolicy::MarkersInSpan => pos,
            MarkerPolicy::MarkersUnsupervised => body_start,
        };
        if start < end {
            spans.push(Span {
                label,
                text: text[start..end].to_string(),
                char_range: start..end,
                line_indices: vec![0],
                content,
            });
        }
    }
    if spans.is_empty() {
        return Err(Error::NoSupervisedSpans);
    }
    Ok(SegmentedTrajectory {
        source: RawTrajectory {
            env_name: "linearized".into(),
            task_id: String::new(),
            goal: String::new(),
            lines: vec![text.to_string()],
            final_success: false,
        },
        document: text.to_string(),
        spans,
        marker_policy: policy,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Finding {
    DocumentMismatch,
    EmptySpan { span: usize },
    OutOfBounds { span: usize },
    Unordered { span: usize },
    Overlap { span: usize },
    SliceMismatch { span: usize },
    LineOutsideSpan { span: usize, line: usize },
    MaskLengthMismatch { tokens: usize, m_r: usize, m_a: usize },
    MaskOverlap { token: usize },
    UncoveredSupervised { token: usize },
    MaskOnUnsupervised { token: usize },
}

/// Soft observations that do not invalidate a trajectory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Warning {
    ActionBeforeReason { span: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
    pub warnings: Vec<Warning>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn merge(&mut self, other: ValidationReport) {
        self.findings.extend(other.findings);
        self.warnings.extend(other.warnings);
    }
}

/// Check every [`SegmentedTrajectory`] invariant; the report is empty iff they all hold.
pub fn round_trip_validate(seg: &SegmentedTrajectory) -> ValidationReport {
    let mut report = ValidationReport::default();
    let is_linearized = seg.source.lines.len() == 1 && seg.source.lines[0] == seg.document;
    if !is_linearized && seg.document != seg.source.document() {
        report.findings.push(Finding::DocumentMismatch);
    }

    let mut line_start = Vec::with_capacity(seg.source.lines.len());
    let mut off = 0;
    for line in &seg.source.lines {
        line_start.push(off);
        off += line.len() + 1;
    }

    let mut prev_end = 0;
    for (i, span) in seg.spans.iter().enumerate() {
        let r = &span.char_range;
        if r.start >= r.end {
            report.findings.push(Finding::EmptySpan { span: i });
            continue;
        }
        if r.end > seg.document.len() {
            report.findings.push(Finding::OutOfBounds { span: i });
            continue;
        }
        if i > 0 {
            let prev = &seg.spans[i - 1].char_range;
            if r.start < prev.start {
                report.findings.push(Finding::Unordered { span: i });
            } else if r.start < prev_end {
                report.findings.push(Finding::Overlap { span: i });
            }
        }
        prev_end = prev_end.max(r.end);
        match seg.document.get(r.clone()) {
            Some(slice) if slice == span.text => {}
            _ => report.findings.push(Finding::SliceMismatch { span: i }),
        }
        for &line in &span.line_indices {
            let Some(&ls) = line_start.get(line) else {
                report.findings.push(Finding::LineOutsideSpan { span: i, line });
                continue;
            };
            let le = ls + seg.source.lines[line].len();
            if le <= r.start || ls >= r.end || (!is_linearized && le > r.end) {
                report.findings.push(Finding::LineOutsideSpan { span: i, line });
            }
        }
    }
    if let Some(first) = seg.spans.first() {
        if first.label == SegmentLabel::Action && seg.spans.iter().any(|s| s.label == SegmentLabel::Reason) {
            report.warnings.push(Warning::ActionBeforeReason { span: 0 });
        }
    }
    report
}

/// Read one [`RawTrajectory`] per line. Blank lines are skipped.
pub fn load_jsonl(path: &Path) -> Result<Vec<RawTrajectory>> {
    let file = File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(file), path)
}

pub(crate) fn read_jsonl(reader: impl BufRead, path: &Path) -> Result<Vec<RawTrajectory>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawTrajectory = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            reason: e.to_string(),
        })?;
        rec.check().map_err(|reason| Error::MalformedRecord { line: i + 1, reason })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_jsonl(records: &[RawTrajectory], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
