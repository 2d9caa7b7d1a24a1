//! Periodic re-tuning of the judge threshold `tau_lsm`.
//!
//! A diverse subset of recently served hits is labeled against ground truth
//! and appended to a standing validation set. The judge re-scores the combined
//! set, precision is computed at every distinct score, and the smallest
//! threshold whose precision reaches the target wins. When no threshold is
//! good enough the result is flagged and placed strictly above every observed
//! score, which disables semantic hits until the judge improves.

use thiserror::Error;

use crate::judge::{Judge, JudgeError};
use crate::model::EmbeddingVector;

/// Margin by which an infeasible threshold exceeds the largest score.
pub const INFEASIBLE_MARGIN: f64 = 1e-6;

/// Cosine distance at or below which two log queries count as duplicates.
pub const DUPLICATE_DISTANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum RecalibrationError {
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error("ground truth unavailable for all {0} sampled entries")]
    AllSamplesDropped(usize),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

/// A hit the cache served recently.
#[derive(Debug, Clone, PartialEq)]
pub struct LogEntry {
    pub query: String,
    pub cached_query: String,
    pub served_result: String,
    pub s_lsm: f64,
    pub embedding: EmbeddingVector,
}

/// A judged pair with a ground-truth label.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub query: String,
    pub cached_query: String,
    pub cached_result: String,
    pub s_lsm: f64,
    pub label: bool,
}

/// Source of reference answers.
pub trait GroundTruth {
    /// `None` when the reference answer cannot be obtained.
    fn fetch(&self, query: &str) -> Option<String>;

    fn evaluate(&self, _query: &str, cached_result: &str, ground: &str) -> bool {
        cached_result == ground
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub threshold: f64,
    /// Precision of the samples scoring `>= threshold`.
    pub precision: f64,
    pub accepted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub value: f64,
    /// False when no observed score reaches the precision target.
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recalibration {
    pub threshold: Threshold,
    pub sampled: usize,
    pub dropped: usize,
    pub validation_size: usize,
    pub curve: Vec<CurvePoint>,
}

/// Precision at every distinct score, ascending by threshold. Precision is a
/// step function between observed scores, so this is exhaustive.
pub fn precision_curve(scored: &[(f64, bool)]) -> Vec<CurvePoint> {
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = Vec::new();
    let (mut accepted, mut correct) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == t {
            accepted += 1;
            correct += usize::from(sorted[i].1);
            i += 1;
        }
        points.push(CurvePoint {
            threshold: t,
            precision: correct as f64 / accepted as f64,
            accepted,
        });
    }
    points.reverse();
    points
}

/// Smallest curve threshold with precision `>= p_target`.
pub fn find_threshold(curve: &[CurvePoint], p_target: f64) -> Threshold {
    match curve.iter().find(|p| p.precision >= p_target) {
        Some(p) => Threshold {
            value: p.threshold,
            feasible: true,
        },
        None => Threshold {
            value: curve
                .iter()
                .map(|p| p.threshold)
                .fold(f64::NEG_INFINITY, f64::max)
                .max(0.0)
                + INFEASIBLE_MARGIN,
            feasible: false,
        },
    }
}

pub fn threshold_for(scored: &[(f64, bool)], p_target: f64) -> Threshold {
    find_threshold(&precision_curve(scored), p_target)
}

/// Greedy farthest-point selection in embedding space, starting from the
/// first entry. Each step adds the entry whose nearest selected neighbour is
/// farthest away (earliest wins ties). Stops at `n` or when every remaining
/// entry duplicates a selected one.
pub fn sample_diverse(log: &[LogEntry], n: usize) -> Vec<&LogEntry> {
    if log.is_empty() || n == 0 {
        return Vec::new();
    }
    let dist = |a: &LogEntry, b: &LogEntry| {
        if a.embedding == b.embedding {
            0.0
        } else {
            (1.0 - a.embedding.cosine(&b.embedding)).max(0.0)
        }
    };
    let mut selected = vec![0usize];
    let mut nearest: Vec<f64> = log.iter().map(|e| dist(e, &log[0])).collect();
    while selected.len() < n {
        let mut best: Option<(usize, f64)> = None;
        for (i, &d) in nearest.iter().enumerate() {
            if d > best.map_or(DUPLICATE_DISTANCE, |b| b.1) {
                best = Some((i, d));
            }
        }
        let Some((pick, _)) = best else { break };
        selected.push(pick);
        for (i, e) in log.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(e, &log[pick]));
        }
    }
    selected.into_iter().map(|i| &log[i]).collect()
}

/// Full recalibration pass. `sample_budget` caps how many log entries are
/// sent for ground truth.
pub fn recalibrate(
    judge: &dyn Judge,
    ground_truth: &dyn GroundTruth,
    recent_log: &[LogEntry],
    validation_set: &[AnnotatedSample],
    sample_budget: usize,
    p_target: f64,
) -> Result<Recalibration, RecalibrationError> {
    if validation_set.is_empty() {
        return Err(RecalibrationError::EmptyValidationSet);
    }
    let sample = sample_diverse(recent_log, sample_budget);
    let mut combined: Vec<AnnotatedSample> = validation_set.to_vec();
    let mut dropped = 0;
    for entry in &sample {
        match ground_truth.fetch(&entry.query) {
            Some(ground) => combined.push(AnnotatedSample {
                query: entry.query.clone(),
                cached_query: entry.cached_query.clone(),
                cached_result: entry.served_result.clone(),
                s_lsm: entry.s_lsm,
                label: ground_truth.evaluate(&entry.query, &entry.served_result, &ground),
            }),
            None => dropped += 1,
        }
    }
    if !sample.is_empty() && dropped == sample.len() {
        return Err(RecalibrationError::AllSamplesDropped(dropped));
    }
    let mut scored = Vec::with_capacity(combined.len());
    for s in &combined {
        let score = judge.score(&s.query, &s.cached_query, &s.cached_result)?;
        scored.push((score, s.label));
    }
    let curve = precision_curve(&scored);
    Ok(Recalibration {
        threshold: find_threshold(&curve, p_target),
        sampled: sample.len(),
        dropped,
        validation_size: combined.len(),
        curve,
    })
}
