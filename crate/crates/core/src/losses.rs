//! Span-gated distillation objectives.
//!
//! All per-token quantities are computed from logits through a log-sum-exp
//! shifted log-softmax, so large scores never overflow.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Logits;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `KL(p_T || p_S)` against the teacher distribution.
    #[default]
    Kl,
    /// Cross-entropy against the teacher's token.
    Ce,
}

/// Per-trajectory loss terms in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cot: f64,
    pub act: f64,
    pub total: f64,
    pub per_token: Vec<f64>,
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

/// `KL(softmax(teacher) || softmax(student))`.
pub fn kl_per_token(teacher: &[f64], student: &[f64]) -> f64 {
    debug_assert_eq!(teacher.len(), student.len());
    let lt = log_softmax(teacher);
    let ls = log_softmax(student);
    let kl: f64 = lt
        .iter()
        .zip(&ls)
        .filter(|(t, _)| t.is_finite())
        .map(|(&t, &s)| t.exp() * (t - s))
        .sum();
    kl.max(0.0)
}

/// `-log softmax(student)[target]`.
pub fn ce_per_token(student: &[f64], target: usize) -> f64 {
    -log_softmax(student)[target]
}

/// Shannon entropy of `softmax(row)`.
pub fn entropy(row: &[f64]) -> f64 {
    log_softmax(row)
        .iter()
        .filter(|l| l.is_finite())
        .map(|&l| -l.exp() * l)
        .sum()
}

fn check_shapes(teacher: &Logits, student: &Logits, mask: &[u8]) -> Result<()> {
    if teacher.rows != student.rows || teacher.vocab != student.vocab || mask.len() != student.rows {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} with mask {}", teacher.rows, teacher.vocab, teacher.rows),
            got: format!("{}x{} with mask {}", student.rows, student.vocab, mask.len()),
        });
    }
    Ok(())
}

fn masked_kl_sum(teacher: &Logits, student: &Logits, mask: &[u8]) -> Result<f64> {
    check_shapes(teacher, student, mask)?;
    Ok((0..student.rows)
        .filter(|&t| mask[t] != 0)
        .map(|t| f64::from(mask[t]) * kl_per_token(teacher.row(t), student.row(t)))
        .sum())
}

/// Reasoning-span alignment: `sum_t m_r(t) * KL_t`.
pub fn cot_loss(teacher: &Logits, student: &Logits, m_r: &[u8]) -> Result<f64> {
    masked_kl_sum(teacher, student, m_r)
}

/// Action-span consistency: `sum_t m_a(t) * KL_t`.
pub fn act_loss(teacher: &Logits, student: &Logits, m_a: &[u8]) -> Result<f64> {
    masked_kl_sum(teacher, student, m_a)
}

pub fn total_loss(cot: f64, act: f64, lambda_r: f64, lambda_a: f64) -> Result<f64> {
    for w in [lambda_r, lambda_a] {
        if !(w >= 0.0) {
            return Err(Error::NegativeWeight(w));
        }
    }
    Ok(lambda_r * cot + lambda_a * act)
}

/// Mean entropy of the teacher rows selected by `mask` (all rows when `None`).
pub fn teacher_entropy(teacher: &Logits, mask: Option<&[u8]>) -> f64 {
    let rows: Vec<usize> = (0..teacher.rows)
        .filter(|&t| mask.is_none_or(|m| m[t] != 0))
        .collect();
    if rows.is_empty() {
        return 0.0;
    }
    rows.iter().map(|&t| entropy(teacher.row(t))).sum::<f64>() / rows.len() as f64
}

/// Loss weights and mode for [`masked_objective`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub mode: LossMode,
    pub lambda_r: f64,
    pub lambda_a: f64,
}

/// Row-wise loss and its gradient w.r.t. the student logits.
///
/// `teacher_row` is used in KL mode, `target` in CE mode. The gradient of
/// `weight * loss` is written into `grad`.
pub fn row_loss_and_grad(
    mode: LossMode,
    teacher_row: &[f64],
    student_row: &[f64],
    target: usize,
    weight: f64,
    grad: &mut [f64],
) -> f64 {
    let ls = log_softmax(student_row);
    match mode {
        LossMode::Kl => {
            let lt = log_softmax(teacher_row);
            let mut kl = 0.0;
            for ((g, &t), &s) in grad.iter_mut().zip(&lt).zip(&ls) {
                let pt = t.exp();
                if t.is_finite() {
                    kl += pt * (t - s);
                }
                *g = weight * (s.exp() - pt);
            }
            kl.max(0.0)
        }
        LossMode::Ce => {
            for (g, &s) in grad.iter_mut().zip(&ls) {
                *g = weight * s.exp();
            }
            grad[target] -= weight;
            -ls[target]
        }
    }
}

/// Full span-gated objective on whole-sequence logits, plus `dL_total/dlogits`.
pub fn masked_objective(
    obj: &Objective,
    teacher: &Logits,
    student: &Logits,
    targets: &[u32],
    m_r: &[u8],
    m_a: &[u8],
) -> Result<(LossBreakdown, Logits)> {
    check_shapes(teacher, student, m_r)?;
    check_shapes(teacher, student, m_a)?;
    total_loss(0.0, 0.0, obj.lambda_r, obj.lambda_a)?;
    let mut grad = Logits::zeros(student.rows, student.vocab);
    let mut per_token = vec![0.0; student.rows];
    let (mut cot, mut act) = (0.0, 0.0);
    for t in 0..student.rows {
        let (r, a) = (f64::from(m_r[t]), f64::from(m_a[t]));
        if r == 0.0 && a == 0.0 {
            continue;
        }
        let weight = obj.lambda_r * r + obj.lambda_a * a;
        let l = row_loss_and_grad(
            obj.mode,
            teacher.row(t),
            student.row(t),
            targets[t] as usize,
            weight,
            grad.row_mut(t),
        );
        cot += r * l;
        act += a * l;
        per_token[t] = weight * l;
    }
    let total = total_loss(cot, act, obj.lambda_r, obj.lambda_a)?;
    Ok((LossBreakdown { cot, act, total, per_token }, grad))
}
