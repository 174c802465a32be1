//! Composite training loss: adaptively weighted cross-entropies for the two
//! ID heads, a plain cross-entropy for the lane count, and the absolute
//! triangular-constraint residual tying the three scalar estimates together.
//!
//! The adaptive weights are piecewise constant (computed from the argmax
//! scalar estimate, no gradient through them); the constraint uses the
//! differentiable expectation estimates, so it shapes gradients.

use alloc::vec;
use alloc::vec::Vec;

use crate::conventions::{triangular_residual, LaneLabel};
use crate::error::err_invalid;
use crate::graph::{Graph, NodeId, PROB_EPS};
use crate::model::ModelOutput;
use crate::{math, Result};

/// How a probability vector is reduced to a scalar lane estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateMode {
    /// `sum_k (k+1) * p_k` — differentiable, feeds the constraint term.
    Expectation,
    /// `1 + argmax` with ties to the smaller index — feeds the adaptive
    /// weights and all reporting.
    Argmax,
}

/// All terms of one loss evaluation. `total` always equals
/// `w_left*ce_left + w_right*ce_right + ce_count + constraint`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce_left: f64,
    pub ce_right: f64,
    pub ce_count: f64,
    pub w_left: f64,
    pub w_right: f64,
    pub constraint: f64,
    pub total: f64,
}

/// `-sum_i y_i * ln(max(p_i, 1e-12))` for a one-hot target `y`.
pub fn cross_entropy(p: &[f64], y: &[f64]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(err_invalid!("cross_entropy", "p has {} entries, y has {}", p.len(), y.len()));
    }
    let ones = y.iter().filter(|&&v| v == 1.0).count();
    if ones != 1 || y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(err_invalid!("cross_entropy", "target is not one-hot: {y:?}"));
    }
    let class = y.iter().position(|&v| v == 1.0).expect("checked");
    Ok(-math::ln(p[class].max(PROB_EPS)))
}

/// Adaptive penalty weight `1 + e^(-5z)`; decreasing in `z`, range (1, 2]
/// for `z >= 0`. Treated as a constant during backpropagation.
pub fn adaptive_weight(z: f64) -> f64 {
    1.0 + math::exp(-5.0 * z)
}

/// Scalar lane estimate of a probability vector under the requested mode.
pub fn scalar_estimate(p: &[f64], mode: EstimateMode) -> f64 {
    match mode {
        EstimateMode::Expectation => p
            .iter()
            .enumerate()
            .map(|(k, &v)| (k + 1) as f64 * v)
            .sum(),
        EstimateMode::Argmax => (argmax(p) + 1) as f64,
    }
}

/// Index of the maximum, ties to the smaller index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

fn one_hot(n: usize, class: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[class] = 1.0;
    v
}

/// Expectation weights `[1, 2, ..., n]` for the differentiable estimate.
fn id_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64).collect()
}

/// Full loss with the default z-offset of 0 (argmax IDs are 1-based as-is).
pub fn total_loss(output: &ModelOutput, label: &LaneLabel) -> Result<LossBreakdown> {
    total_loss_with(output, label, 0.0)
}

/// Full loss; `z_offset` shifts the scalar fed to the adaptive weight
/// (e.g. -1.0 reproduces a 0-based reading of the predicted ID).
pub fn total_loss_with(output: &ModelOutput, label: &LaneLabel, z_offset: f64) -> Result<LossBreakdown> {
    let n = output.left_probs.len();
    let ce_left = cross_entropy(&output.left_probs, &one_hot(n, LaneLabel::class_of(label.delta_l)))?;
    let ce_right = cross_entropy(&output.right_probs, &one_hot(n, LaneLabel::class_of(label.delta_r)))?;
    let ce_count = cross_entropy(&output.count_probs, &one_hot(n, LaneLabel::class_of(label.lane_count)))?;

    let w_left = adaptive_weight(scalar_estimate(&output.left_probs, EstimateMode::Argmax) + z_offset);
    let w_right = adaptive_weight(scalar_estimate(&output.right_probs, EstimateMode::Argmax) + z_offset);

    let s_l = scalar_estimate(&output.left_probs, EstimateMode::Expectation);
    let s_r = scalar_estimate(&output.right_probs, EstimateMode::Expectation);
    let s_c = scalar_estimate(&output.count_probs, EstimateMode::Expectation);
    let constraint = math::abs(triangular_residual(s_l, s_r, s_c));

    let total = w_left * ce_left + w_right * ce_right + ce_count + constraint;
    Ok(LossBreakdown { ce_left, ce_right, ce_count, w_left, w_right, constraint, total })
}

/// Graph nodes of the three head probability vectors for one frame.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    pub left: NodeId,
    pub right: NodeId,
    pub count: NodeId,
}

/// Builds the loss on the tape so gradients flow into the head probabilities
/// (and from there through the model). Returns the scalar loss node plus the
/// same breakdown [`total_loss_with`] would produce; the two agree exactly.
pub fn trace_total_loss(
    g: &mut Graph,
    heads: &HeadNodes,
    label: &LaneLabel,
    z_offset: f64,
) -> Result<(NodeId, LossBreakdown)> {
    let n = g.value(heads.left).numel();
    let ce_l = g.cross_entropy_one_hot(heads.left, LaneLabel::class_of(label.delta_l))?;
    let ce_r = g.cross_entropy_one_hot(heads.right, LaneLabel::class_of(label.delta_r))?;
    let ce_c = g.cross_entropy_one_hot(heads.count, LaneLabel::class_of(label.lane_count))?;

    let w_left = adaptive_weight(scalar_estimate(g.value(heads.left).data(), EstimateMode::Argmax) + z_offset);
    let w_right = adaptive_weight(scalar_estimate(g.value(heads.right).data(), EstimateMode::Argmax) + z_offset);

    let s_l = g.dot_const(heads.left, id_weights(n))?;
    let s_r = g.dot_const(heads.right, id_weights(n))?;
    let s_c = g.dot_const(heads.count, id_weights(n))?;
    // Same accumulation order as `triangular_residual`.
    let residual = g.affine_scalars(&[s_r, s_c, s_l], &[1.0, -1.0, 1.0], -1.0)?;
    let constraint = g.abs_scalar(residual)?;

    let total = g.affine_scalars(
        &[ce_l, ce_r, ce_c, constraint],
        &[w_left, w_right, 1.0, 1.0],
        0.0,
    )?;

    let breakdown = LossBreakdown {
        ce_left: g.value(ce_l).item(),
        ce_right: g.value(ce_r).item(),
        ce_count: g.value(ce_c).item(),
        w_left,
        w_right,
        constraint: g.value(constraint).item(),
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::Tensor;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0 / n as f64; n]
    }

    fn output(left: Vec<f64>, right: Vec<f64>, count: Vec<f64>) -> ModelOutput {
        ModelOutput { left_probs: left, right_probs: right, count_probs: count }
    }

    #[test]
    fn cross_entropy_examples() {
        let y = one_hot(8, 2);
        assert!(cross_entropy(&y, &y).unwrap().abs() < 1e-9);
        let ce = cross_entropy(&uniform(8), &y).unwrap();
        assert!((ce - 8.0f64.ln()).abs() < 1e-12);
        assert!((ce - 2.0794415).abs() < 1e-7);
        // Zero probability at the true class: clamped, finite.
        let mut p = uniform(8);
        p[2] = 0.0;
        let ce = cross_entropy(&p, &y).unwrap();
        assert!((ce - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!((ce - 27.63).abs() < 0.01);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        assert!(cross_entropy(&uniform(8), &uniform(8)).is_err());
        let mut two = one_hot(8, 1);
        two[3] = 1.0;
        assert!(cross_entropy(&uniform(8), &two).is_err());
        assert!(cross_entropy(&uniform(8), &one_hot(4, 1)).is_err());
    }

    #[test]
    fn adaptive_weight_examples() {
        assert_eq!(adaptive_weight(0.0), 2.0);
        assert!((adaptive_weight(1.0) - (1.0 + (-5.0f64).exp())).abs() < 1e-15);
        assert!((adaptive_weight(1.0) - 1.0067379).abs() < 1e-7);
        assert!(adaptive_weight(1.0) > adaptive_weight(2.0));
        assert!(adaptive_weight(2.0) > adaptive_weight(3.0));
    }

    #[test]
    fn scalar_estimate_examples() {
        let p = one_hot(8, 2);
        assert_eq!(scalar_estimate(&p, EstimateMode::Expectation), 3.0);
        assert_eq!(scalar_estimate(&p, EstimateMode::Argmax), 3.0);
        assert!((scalar_estimate(&uniform(8), EstimateMode::Expectation) - 4.5).abs() < 1e-12);
        let tie = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(scalar_estimate(&tie, EstimateMode::Argmax), 1.0);
    }

    #[test]
    fn total_loss_perfect_prediction_is_zero() {
        let label = LaneLabel::new(2, 3, 4).unwrap();
        let out = output(one_hot(8, 1), one_hot(8, 2), one_hot(8, 3));
        let b = total_loss(&out, &label).unwrap();
        assert!(b.ce_left.abs() < 1e-9 && b.ce_right.abs() < 1e-9 && b.ce_count.abs() < 1e-9);
        assert!(b.constraint.abs() < 1e-9);
        assert!(b.total.abs() < 1e-8);
    }

    #[test]
    fn total_loss_uniform_case_matches_hand_computation() {
        let label = LaneLabel::new(1, 1, 1).unwrap();
        let out = output(uniform(8), uniform(8), uniform(8));
        let b = total_loss(&out, &label).unwrap();
        let ln8 = 8.0f64.ln();
        assert!((b.ce_left - ln8).abs() < 1e-12);
        assert!((b.constraint - 3.5).abs() < 1e-12);
        let w = 1.0 + (-5.0f64).exp();
        assert!((b.w_left - w).abs() < 1e-12);
        let expect = (2.0 * w + 1.0) * ln8 + 3.5;
        assert!((b.total - expect).abs() < 1e-12);
        assert!((b.total - 9.7663).abs() < 1e-3);
    }

    fn random_probs(rng: &mut Rng, n: usize) -> Vec<f64> {
        let mut g = Graph::new();
        let logits = Tensor::from_vec((0..n).map(|_| rng.range_f64(-2.0, 2.0)).collect());
        let l = g.leaf(logits);
        let s = g.softmax(l).unwrap();
        g.value(s).data().to_vec()
    }

    #[test]
    fn recombination_identity_on_random_outputs() {
        let mut rng = Rng::new(77);
        for _ in 0..200 {
            let out = output(random_probs(&mut rng, 8), random_probs(&mut rng, 8), random_probs(&mut rng, 8));
            let label = LaneLabel::from_left(2, 5).unwrap();
            let b = total_loss(&out, &label).unwrap();
            let recombined = b.w_left * b.ce_left + b.w_right * b.ce_right + b.ce_count + b.constraint;
            assert!((b.total - recombined).abs() < 1e-12);
            assert!(b.total >= 0.0);
        }
    }

    #[test]
    fn traced_loss_matches_value_level_exactly() {
        let mut rng = Rng::new(31);
        for _ in 0..50 {
            let left = random_probs(&mut rng, 8);
            let right = random_probs(&mut rng, 8);
            let count = random_probs(&mut rng, 8);
            let label = LaneLabel::from_left(3, 6).unwrap();
            let out = output(left.clone(), right.clone(), count.clone());
            let value = total_loss(&out, &label).unwrap();

            let mut g = Graph::new();
            let l = g.leaf(Tensor::from_vec(left));
            let r = g.leaf(Tensor::from_vec(right));
            let c = g.leaf(Tensor::from_vec(count));
            let (node, traced) = trace_total_loss(&mut g, &HeadNodes { left: l, right: r, count: c }, &label, 0.0).unwrap();
            assert_eq!(g.value(node).item(), value.total);
            assert_eq!(traced, value);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_through_softmax() {
        let label = LaneLabel::from_left(2, 4).unwrap();
        let mut rng = Rng::new(5);
        let logits: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..8).map(|_| rng.range_f64(-1.0, 1.0)).collect())
            .collect();

        let eval = |ls: &[Vec<f64>]| -> f64 {
            let mut g = Graph::new();
            let heads: Vec<NodeId> = ls
                .iter()
                .map(|l| {
                    let leaf = g.leaf(Tensor::from_vec(l.clone()));
                    g.softmax(leaf).unwrap()
                })
                .collect();
            let hn = HeadNodes { left: heads[0], right: heads[1], count: heads[2] };
            trace_total_loss(&mut g, &hn, &label, 0.0).unwrap().1.total
        };

        // Analytic gradients w.r.t. the logit leaves.
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = logits.iter().map(|l| g.leaf(Tensor::from_vec(l.clone()))).collect();
        let probs: Vec<NodeId> = leaves.iter().map(|&l| g.softmax(l).unwrap()).collect();
        let hn = HeadNodes { left: probs[0], right: probs[1], count: probs[2] };
        let (loss, _) = trace_total_loss(&mut g, &hn, &label, 0.0).unwrap();
        let grads = g.backward(loss).unwrap();

        let eps = 1e-5;
        for (hi, leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(*leaf).unwrap().data();
            for i in 0..8 {
                let mut plus = logits.clone();
                plus[hi][i] += eps;
                let mut minus = logits.clone();
                minus[hi][i] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (analytic[i] - numeric).abs() / denom < 1e-4,
                    "head {hi} coord {i}: analytic {} vs numeric {numeric}",
                    analytic[i]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative_and_weights_in_range(seed in 0u64..1000) {
            let mut rng = Rng::new(seed);
            let out = output(random_probs(&mut rng, 8), random_probs(&mut rng, 8), random_probs(&mut rng, 8));
            let dl = rng.range_u64(1, 4) as u8;
            let count = rng.range_u64(dl as u64, 8) as u8;
            let label = LaneLabel::from_left(dl, count).unwrap();
            let b = total_loss(&out, &label).unwrap();
            prop_assert!(b.total >= 0.0);
            // Mathematically (1, 2]; for z >= ~7.4 the e^(-5z) term is below
            // one ulp of 1.0, so the representable bound is inclusive.
            prop_assert!(b.w_left >= 1.0 && b.w_left <= 2.0);
            prop_assert!(b.w_right >= 1.0 && b.w_right <= 2.0);
        }

        #[test]
        fn swap_and_mirror_symmetry(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let left = random_probs(&mut rng, 8);
            let right = random_probs(&mut rng, 8);
            let count = random_probs(&mut rng, 8);
            let dl = rng.range_u64(1, 5) as u8;
            let lc = rng.range_u64(dl as u64, 8) as u8;
            let label = LaneLabel::from_left(dl, lc).unwrap();

            let a = total_loss(&output(left.clone(), right.clone(), count.clone()), &label).unwrap();
            let mirrored = crate::conventions::mirror(label);
            let b = total_loss(&output(right, left, count), &mirrored).unwrap();
            prop_assert!((a.total - b.total).abs() < 1e-12);
        }
    }
}
