//! Distillation-style losses over vocabulary logits, in nats.

use crate::error::{invalid, mismatch, Result};
use crate::linalg::Matrix;

/// `T × V` logits, optionally with next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitSequence {
    pub logits: Matrix,
    pub targets: Option<Vec<usize>>,
}

impl LogitSequence {
    pub fn new(logits: Matrix, targets: Option<Vec<usize>>) -> Result<Self> {
        if let Some(t) = &targets {
            if t.len() != logits.rows() {
                return Err(mismatch(format!(
                    "{} targets for {} positions",
                    t.len(),
                    logits.rows()
                )));
            }
            if let Some(bad) = t.iter().find(|&&i| i >= logits.cols()) {
                return Err(invalid(format!(
                    "target {bad} outside vocabulary of {}",
                    logits.cols()
                )));
            }
        }
        Ok(Self { logits, targets })
    }

    pub fn positions(&self) -> usize {
        self.logits.rows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParams {
    pub tau: f64,
    pub beta: f64,
}

impl LossParams {
    pub fn new(tau: f64, beta: f64) -> Result<Self> {
        check_tau(tau)?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(invalid(format!("beta must be non-negative, got {beta}")));
        }
        Ok(Self { tau, beta })
    }
}

impl Default for LossParams {
    fn default() -> Self {
        Self {
            tau: 1.0,
            beta: 1.0,
        }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `softmax(row / τ)` with the max subtracted first.
pub fn softmax(row: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(softmax_unchecked(row, tau))
}

fn softmax_unchecked(row: &[f64], tau: f64) -> Vec<f64> {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| ((v - max) / tau).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `ln Σ exp((row − max)/τ)` plus the shifted max, i.e. the log-partition.
fn log_partition(row: &[f64], tau: f64) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let z: f64 = row.iter().map(|&v| ((v - max) / tau).exp()).sum();
    max / tau + z.ln()
}

/// Mean negative log-probability of the targets under `softmax(z/τ)`.
pub fn cross_entropy(student: &LogitSequence, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let targets = student
        .targets
        .as_ref()
        .ok_or_else(|| invalid("cross entropy needs targets"))?;
    let t = student.positions();
    if t == 0 {
        return Err(invalid("empty logit sequence"));
    }
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = student.logits.row(i);
            log_partition(row, tau) - row[y] / tau
        })
        .sum();
    Ok(total / t as f64)
}

/// Mean over positions of `KL(softmax(z_T/τ) ‖ softmax(z_S/τ))`.
pub fn kd_loss(teacher: &LogitSequence, student: &LogitSequence, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if teacher.logits.shape() != student.logits.shape() {
        return Err(mismatch(format!(
            "teacher logits {:?} vs student {:?}",
            teacher.logits.shape(),
            student.logits.shape()
        )));
    }
    let t = teacher.positions();
    if t == 0 {
        return Err(invalid("empty logit sequence"));
    }
    let mut total = 0.0;
    for i in 0..t {
        let p = softmax_unchecked(teacher.logits.row(i), tau);
        let q = softmax_unchecked(student.logits.row(i), tau);
        for (&pt, &ps) in p.iter().zip(&q) {
            if pt > 0.0 {
                total += pt * (pt.ln() - ps.max(1e-300).ln());
            }
        }
    }
    // KL ≥ 0; clamp the sub-ulp negatives that rounding can produce
    Ok((total / t as f64).max(0.0))
}

/// `L_CE + β τ² L_KD`.
pub fn total_loss(ce: f64, kd: f64, params: &LossParams) -> f64 {
    ce + params.beta * params.tau * params.tau * kd
}
