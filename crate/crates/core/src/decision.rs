//! Convention fusion: picks the left or right ID as the single reported
//! estimate for a frame.
//!
//! Each head's probability vector gets a confidence score (five selectable
//! criteria, all higher-is-better), weighted by a temporal penalty
//! `P = 1 / (1 + |jump|)` against implausible lane jumps within the same
//! convention. The convention with the higher weighted score wins; ties go
//! to the left convention.

use alloc::str::FromStr;
use alloc::string::String;

use crate::conventions::{Convention, MAX_LANES};
use crate::graph::PROB_EPS;
use crate::math;
use crate::objective::argmax;

/// Confidence criterion over one probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum DecisionCriterion {
    /// Maximum probability.
    Max,
    /// Maximum minus mean.
    MaxMinusMean,
    /// Negated Shannon entropy (sharper vector, higher score).
    Entropy,
    /// Maximum minus entropy.
    MaxMinusEntropy,
    /// `(max - mean) / std` with population std.
    ZScore,
}

impl DecisionCriterion {
    pub const ALL: [DecisionCriterion; 5] = [
        DecisionCriterion::Max,
        DecisionCriterion::MaxMinusMean,
        DecisionCriterion::Entropy,
        DecisionCriterion::MaxMinusEntropy,
        DecisionCriterion::ZScore,
    ];

    /// Short report/CLI name.
    pub fn name(&self) -> &'static str {
        match self {
            DecisionCriterion::Max => "max",
            DecisionCriterion::MaxMinusMean => "max-m",
            DecisionCriterion::Entropy => "e",
            DecisionCriterion::MaxMinusEntropy => "max-e",
            DecisionCriterion::ZScore => "z-score",
        }
    }
}

impl FromStr for DecisionCriterion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "max" => Ok(DecisionCriterion::Max),
            "max-m" => Ok(DecisionCriterion::MaxMinusMean),
            "e" => Ok(DecisionCriterion::Entropy),
            "max-e" => Ok(DecisionCriterion::MaxMinusEntropy),
            "z-score" => Ok(DecisionCriterion::ZScore),
            other => Err(alloc::format!(
                "unknown criterion {other:?} (expected max | max-m | e | max-e | z-score)"
            )),
        }
    }
}

/// Last emitted raw ID per convention; empty at stream start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DecisionState {
    pub prev_left: Option<u8>,
    pub prev_right: Option<u8>,
}

impl DecisionState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// The fused per-frame estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalEstimate {
    /// Winning convention.
    pub convention: Convention,
    /// Argmax ID of the winning convention's vector, 1-based.
    pub lane_id: u8,
    /// Argmax of the lane-count vector, 1-based.
    pub lane_count: u8,
    /// The other convention's ID implied by the constraint, clamped to range.
    pub companion_id: u8,
    pub score_left: f64,
    pub score_right: f64,
}

/// Shannon entropy with the probability floor shared by the loss.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| v * math::ln(v.max(PROB_EPS))).sum::<f64>()
}

/// Criterion score; for every criterion a higher value means more confident.
pub fn criterion_score(p: &[f64], criterion: DecisionCriterion) -> f64 {
    criterion_score_with(p, criterion, false)
}

/// Like [`criterion_score`] with an escape hatch for the entropy reading:
/// `flip_entropy` scores raw entropy instead of its negation.
pub fn criterion_score_with(p: &[f64], criterion: DecisionCriterion, flip_entropy: bool) -> f64 {
    let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    match criterion {
        DecisionCriterion::Max => max,
        DecisionCriterion::MaxMinusMean => max - mean(p),
        DecisionCriterion::Entropy => {
            let h = entropy(p);
            if flip_entropy {
                h
            } else {
                -h
            }
        }
        DecisionCriterion::MaxMinusEntropy => max - entropy(p),
        DecisionCriterion::ZScore => (max - mean(p)) / std_dev(p).max(1e-12),
    }
}

fn mean(p: &[f64]) -> f64 {
    p.iter().sum::<f64>() / p.len() as f64
}

/// Population standard deviation.
fn std_dev(p: &[f64]) -> f64 {
    let m = mean(p);
    let var = p.iter().map(|&v| (v - m) * (v - m)).sum::<f64>() / p.len() as f64;
    math::sqrt(var)
}

/// Temporal penalty `P = 1 / (1 + |o_t - o_prev|)`; 1 on the first frame.
pub fn temporal_penalty(o_t: u8, o_prev: Option<u8>) -> f64 {
    match o_prev {
        None => 1.0,
        Some(prev) => 1.0 / (1.0 + (o_t as f64 - prev as f64).abs()),
    }
}

/// Fuses one frame's head outputs into a single estimate and the updated
/// per-convention memory. Pure: identical inputs give identical outputs.
pub fn decide(
    left: &[f64],
    right: &[f64],
    count: &[f64],
    state: &DecisionState,
    criterion: DecisionCriterion,
) -> (FinalEstimate, DecisionState) {
    decide_with(left, right, count, state, criterion, false)
}

/// [`decide`] with the entropy-sign escape hatch.
pub fn decide_with(
    left: &[f64],
    right: &[f64],
    count: &[f64],
    state: &DecisionState,
    criterion: DecisionCriterion,
    flip_entropy: bool,
) -> (FinalEstimate, DecisionState) {
    let o_left = argmax(left) as u8 + 1;
    let o_right = argmax(right) as u8 + 1;
    let lane_count = argmax(count) as u8 + 1;

    let score_left =
        temporal_penalty(o_left, state.prev_left) * criterion_score_with(left, criterion, flip_entropy);
    let score_right =
        temporal_penalty(o_right, state.prev_right) * criterion_score_with(right, criterion, flip_entropy);

    let (convention, lane_id) = if score_left >= score_right {
        (Convention::Left, o_left)
    } else {
        (Convention::Right, o_right)
    };

    // Companion via the triangular relation, clamped into the class range.
    let companion = (lane_count as i16 - lane_id as i16 + 1).clamp(1, MAX_LANES as i16) as u8;

    let estimate = FinalEstimate {
        convention,
        lane_id,
        lane_count,
        companion_id: companion,
        score_left,
        score_right,
    };
    // Both raw argmaxes are remembered regardless of which side won.
    let next = DecisionState { prev_left: Some(o_left), prev_right: Some(o_right) };
    (estimate, next)
}
