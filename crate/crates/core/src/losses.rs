//! Confidence-thresholded pseudo-labels, the KL distillation loss and the
//! soft Dice loss.
//!
//! Pseudo-labels stay soft: a kept voxel's training target is the teacher
//! probability itself, never a hardened 0/1. Teacher probabilities always
//! enter the KL loss as constants; only the assistant side receives
//! gradients.

use thiserror::Error;

use crate::tensor::{Graph, NodeId, Tensor, TensorError, PROB_EPS};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("tau must lie strictly inside (0, 1), got {0}")]
    TauOutOfRange(f64),
    #[error("tau schedule invalid: {0}")]
    BadSchedule(String),
    #[error("epoch {epoch} outside schedule of {total} epochs")]
    EpochOutOfRange { epoch: usize, total: usize },
    #[error("no voxels kept: pseudo-label batch is empty")]
    EmptyPseudoBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which voxels count as confident enough to keep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoMode {
    /// Keep voxel `i` iff `max(p_i, 1 - p_i) > tau`: confident foreground
    /// *and* confident background both survive.
    TwoSided,
    /// Keep voxel `i` iff `p_i > tau`: only confident foreground survives.
    ForegroundOnly,
}

/// Thresholded soft labels for one unlabeled batch.
#[derive(Debug, Clone)]
pub struct PseudoLabelBatch {
    /// Teacher probabilities, retained as-is for the kept voxels.
    pub soft_labels: Tensor,
    /// True where the voxel is retained; dropped voxels contribute to no loss.
    pub keep_mask: Vec<bool>,
    pub tau_used: f64,
}

impl PseudoLabelBatch {
    pub fn kept_count(&self) -> usize {
        self.keep_mask.iter().filter(|k| **k).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        if self.keep_mask.is_empty() {
            0.0
        } else {
            self.kept_count() as f64 / self.keep_mask.len() as f64
        }
    }
}

/// Apply the confidence threshold to teacher probabilities.
pub fn make_pseudo_labels(
    teacher_probs: &Tensor,
    tau: f64,
    mode: PseudoMode,
) -> Result<PseudoLabelBatch> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(LossError::TauOutOfRange(tau));
    }
    let keep_mask = teacher_probs
        .values()
        .iter()
        .map(|p| match mode {
            PseudoMode::TwoSided => p.max(1.0 - p) > tau,
            PseudoMode::ForegroundOnly => *p > tau,
        })
        .collect();
    Ok(PseudoLabelBatch {
        soft_labels: teacher_probs.clone(),
        keep_mask,
        tau_used: tau,
    })
}

/// Threshold schedule over epochs.
#[derive(Debug, Clone, PartialEq)]
pub enum TauSchedule {
    Constant { tau: f64 },
    LinearRamp { tau_start: f64, tau_end: f64, total_epochs: usize },
}

impl TauSchedule {
    pub fn constant(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(LossError::BadSchedule(format!("tau {tau} outside (0, 1]")));
        }
        Ok(Self::Constant { tau })
    }

    pub fn linear_ramp(tau_start: f64, tau_end: f64, total_epochs: usize) -> Result<Self> {
        // Linear: extremes sit at the endpoints, so checking those suffices.
        for tau in [tau_start, tau_end] {
            if !(tau > 0.0 && tau <= 1.0) {
                return Err(LossError::BadSchedule(format!("tau {tau} outside (0, 1]")));
            }
        }
        if total_epochs < 2 {
            return Err(LossError::BadSchedule(
                "a ramp needs at least two epochs".into(),
            ));
        }
        Ok(Self::LinearRamp { tau_start, tau_end, total_epochs })
    }

    pub fn total_epochs(&self) -> Option<usize> {
        match self {
            Self::Constant { .. } => None,
            Self::LinearRamp { total_epochs, .. } => Some(*total_epochs),
        }
    }

    /// Threshold in effect at `epoch` (0-based).
    pub fn tau_at_epoch(&self, epoch: usize) -> Result<f64> {
        match self {
            Self::Constant { tau } => Ok(*tau),
            Self::LinearRamp { tau_start, tau_end, total_epochs } => {
                if epoch >= *total_epochs {
                    return Err(LossError::EpochOutOfRange {
                        epoch,
                        total: *total_epochs,
                    });
                }
                Ok(tau_start
                    + (tau_end - tau_start) * epoch as f64 / (*total_epochs as f64 - 1.0))
            }
        }
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// KL divergence from the teacher's per-voxel class distribution `(q, 1-q)`
/// to the assistant's `(r, 1-r)`, averaged over kept voxels.
///
/// The teacher tensor is inserted as a constant, so gradients flow only into
/// the assistant branch.
pub fn kl_loss(
    graph: &mut Graph,
    teacher_probs: &Tensor,
    assistant_probs: NodeId,
    keep_mask: &[bool],
) -> Result<NodeId> {
    if keep_mask.iter().all(|k| !k) {
        return Err(LossError::EmptyPseudoBatch);
    }
    let q_vals: Vec<f64> = teacher_probs.values().iter().map(|p| clamp_prob(*p)).collect();
    let q = graph.leaf(&Tensor::new(teacher_probs.shape().to_vec(), q_vals).expect("same shape"));
    let r = graph.clamp_prob(assistant_probs);

    let one_m_q = graph.sub_from_scalar(q, 1.0);
    let one_m_r = graph.sub_from_scalar(r, 1.0);
    let ln_q = graph.log(q);
    let ln_r = graph.log(r);
    let ln_1mq = graph.log(one_m_q);
    let ln_1mr = graph.log(one_m_r);

    // q (ln q - ln r) + (1-q)(ln(1-q) - ln(1-r)), per voxel
    let d_fg = graph.sub(ln_q, ln_r)?;
    let d_bg = graph.sub(ln_1mq, ln_1mr)?;
    let fg = graph.mul(q, d_fg)?;
    let bg = graph.mul(one_m_q, d_bg)?;
    let per_voxel = graph.add(fg, bg)?;
    Ok(graph.mean(per_voxel, Some(keep_mask))?)
}

/// Soft Dice loss `1 - 2 sum(y p) / (sum(y^2) + sum(p^2) + eps)`.
pub const DICE_EPS: f64 = 1e-7;

pub fn dice_loss(graph: &mut Graph, ground_truth: &Tensor, prediction: NodeId) -> Result<NodeId> {
    debug_assert!(
        ground_truth.values().iter().all(|v| *v == 0.0 || *v == 1.0),
        "ground truth must be binary"
    );
    let y = graph.leaf(ground_truth);
    let yp = graph.mul(y, prediction)?;
    let yy = graph.mul(y, y)?;
    let pp = graph.mul(prediction, prediction)?;
    let s_yp = graph.sum(yp, None)?;
    let s_yy = graph.sum(yy, None)?;
    let s_pp = graph.sum(pp, None)?;
    let num = graph.mul_scalar(s_yp, 2.0);
    let den = graph.add(s_yy, s_pp)?;
    let den = graph.add_scalar(den, DICE_EPS);
    let overlap = graph.div(num, den)?;
    Ok(graph.sub_from_scalar(overlap, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(values: &[f64]) -> Tensor {
        Tensor::new(vec![values.len()], values.to_vec()).unwrap()
    }

    #[test]
    fn pseudo_labels_two_sided_keeps_confident_background() {
        let probs = t(&[0.9, 0.6, 0.2]);
        let batch = make_pseudo_labels(&probs, 0.7, PseudoMode::TwoSided).unwrap();
        assert_eq!(batch.keep_mask, vec![true, false, true]);
        assert_eq!(batch.soft_labels.values(), &[0.9, 0.6, 0.2]);
        assert_eq!(batch.tau_used, 0.7);
    }

    #[test]
    fn pseudo_labels_foreground_only_drops_background() {
        let probs = t(&[0.9, 0.6, 0.2]);
        let batch = make_pseudo_labels(&probs, 0.7, PseudoMode::ForegroundOnly).unwrap();
        assert_eq!(batch.keep_mask, vec![true, false, false]);
    }

    #[test]
    fn tau_half_two_sided_keeps_everything_off_center() {
        let probs = t(&[0.1, 0.49, 0.51, 0.97]);
        let batch = make_pseudo_labels(&probs, 0.5, PseudoMode::TwoSided).unwrap();
        assert_eq!(batch.kept_count(), 4);
    }

    #[test]
    fn tau_outside_unit_interval_is_rejected() {
        let probs = t(&[0.5]);
        assert!(matches!(
            make_pseudo_labels(&probs, 1.0, PseudoMode::TwoSided),
            Err(LossError::TauOutOfRange(_))
        ));
        assert!(matches!(
            make_pseudo_labels(&probs, 0.0, PseudoMode::TwoSided),
            Err(LossError::TauOutOfRange(_))
        ));
    }

    #[test]
    fn raising_tau_never_keeps_more() {
        let mut rng = crate::rng::stream(31, 0);
        let probs = t(&(0..64)
            .map(|_| crate::rng::uniform_in(&mut rng, 0.01, 0.99))
            .collect::<Vec<_>>());
        for mode in [PseudoMode::TwoSided, PseudoMode::ForegroundOnly] {
            let mut prev = usize::MAX;
            for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
                let kept = make_pseudo_labels(&probs, tau, mode).unwrap().kept_count();
                assert!(kept <= prev, "{mode:?} tau {tau}");
                prev = kept;
            }
        }
    }

    #[test]
    fn tau_schedule_constant_and_ramp() {
        let c = TauSchedule::constant(0.7).unwrap();
        assert_eq!(c.tau_at_epoch(0).unwrap(), 0.7);
        assert_eq!(c.tau_at_epoch(1000).unwrap(), 0.7);

        let r = TauSchedule::linear_ramp(0.6, 0.9, 4).unwrap();
        assert!((r.tau_at_epoch(0).unwrap() - 0.6).abs() < 1e-12);
        assert!((r.tau_at_epoch(1).unwrap() - 0.7).abs() < 1e-12);
        assert!((r.tau_at_epoch(3).unwrap() - 0.9).abs() < 1e-12);
        assert!(matches!(
            r.tau_at_epoch(4),
            Err(LossError::EpochOutOfRange { .. })
        ));
    }

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        let probs = t(&[0.3, 0.5, 0.8]);
        let mut g = Graph::new();
        let r = g.leaf(&probs);
        let loss = kl_loss(&mut g, &probs, r, &[true, true, true]).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-12);
    }

    #[test]
    fn kl_hand_computed_single_voxel() {
        // 0.75 ln(0.75/0.5) + 0.25 ln(0.25/0.5) = 0.13081203...
        let teacher = t(&[0.75]);
        let mut g = Graph::new();
        let r = g.leaf(&t(&[0.5]));
        let loss = kl_loss(&mut g, &teacher, r, &[true]).unwrap();
        let expect = 0.75f64 * (0.75f64 / 0.5).ln() + 0.25 * (0.25f64 / 0.5).ln();
        assert!((g.scalar_value(loss) - expect).abs() < 1e-9);
        assert!((g.scalar_value(loss) - 0.130_812_035_9).abs() < 1e-6);
    }

    #[test]
    fn kl_saturated_teacher_approaches_ln2() {
        let teacher = t(&[1.0 - 1e-7]);
        let mut g = Graph::new();
        let r = g.leaf(&t(&[0.5]));
        let loss = kl_loss(&mut g, &teacher, r, &[true]).unwrap();
        assert!((g.scalar_value(loss) - std::f64::consts::LN_2).abs() < 1e-4);
    }

    #[test]
    fn kl_empty_keep_mask_is_an_error() {
        let teacher = t(&[0.9]);
        let mut g = Graph::new();
        let r = g.leaf(&t(&[0.5]));
        assert!(matches!(
            kl_loss(&mut g, &teacher, r, &[false]),
            Err(LossError::EmptyPseudoBatch)
        ));
    }

    #[test]
    fn kl_is_nonnegative_on_random_inputs() {
        let mut rng = crate::rng::stream(17, 0);
        for _ in 0..200 {
            let n = 5;
            let q = t(&(0..n)
                .map(|_| crate::rng::uniform_in(&mut rng, 0.01, 0.99))
                .collect::<Vec<_>>());
            let r_vals: Vec<f64> = (0..n)
                .map(|_| crate::rng::uniform_in(&mut rng, 0.01, 0.99))
                .collect();
            let mask: Vec<bool> = (0..n).map(|i| i != 2).collect();
            let mut g = Graph::new();
            let r = g.leaf(&t(&r_vals));
            let loss = kl_loss(&mut g, &q, r, &mask).unwrap();
            assert!(g.scalar_value(loss) >= -1e-12);
        }
    }

    #[test]
    fn kl_gradients_flow_only_into_assistant() {
        // Assistant passes the check; a teacher bound as a parameter would
        // get zero gradient because kl_loss re-inserts it as a constant.
        let teacher = t(&[0.8, 0.3]);
        let params = vec![("assistant".to_string(), t(&[0.55, 0.45]))];
        let report = grad_check(
            |g, ps| {
                let r = g.param(&ps[0].1);
                kl_loss(g, &teacher, r, &[true, true]).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => panic!("unexpected: {other}"),
                })
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn dice_loss_perfect_and_disjoint() {
        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        let mut g = Graph::new();
        let p = g.leaf(&y);
        let loss = dice_loss(&mut g, &y, p).unwrap();
        assert!(g.scalar_value(loss).abs() < 1e-6);

        let y = t(&[1.0, 1.0, 0.0, 0.0]);
        let p_vals = t(&[0.0, 0.0, 1.0, 1.0]);
        let mut g = Graph::new();
        let p = g.leaf(&p_vals);
        let loss = dice_loss(&mut g, &y, p).unwrap();
        assert!((g.scalar_value(loss) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_loss_hand_computed() {
        // y = [1,0,0,0], p = [0.5,0.5,0,0] -> 1 - (2*0.5)/(1 + 0.5) = 1/3
        let y = t(&[1.0, 0.0, 0.0, 0.0]);
        let p_vals = t(&[0.5, 0.5, 0.0, 0.0]);
        let mut g = Graph::new();
        let p = g.leaf(&p_vals);
        let loss = dice_loss(&mut g, &y, p).unwrap();
        assert!((g.scalar_value(loss) - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn dice_loss_stays_in_unit_interval() {
        let mut rng = crate::rng::stream(23, 0);
        for _ in 0..200 {
            let n = 12;
            let y = t(&(0..n)
                .map(|_| f64::from(u8::from(crate::rng::uniform(&mut rng) > 0.5)))
                .collect::<Vec<_>>());
            let p_vals: Vec<f64> = (0..n)
                .map(|_| crate::rng::uniform_in(&mut rng, 0.001, 0.999))
                .collect();
            let mut g = Graph::new();
            let p = g.leaf(&t(&p_vals));
            let loss = dice_loss(&mut g, &y, p).unwrap();
            let v = g.scalar_value(loss);
            assert!((0.0..=1.0).contains(&v), "dice loss {v}");
        }
    }

    #[test]
    fn dice_loss_empty_ground_truth_is_finite() {
        let y = t(&[0.0, 0.0, 0.0]);
        let p_vals = t(&[0.2, 0.8, 0.5]);
        let mut g = Graph::new();
        let p = g.leaf(&p_vals);
        let loss = dice_loss(&mut g, &y, p).unwrap();
        assert!(g.scalar_value(loss).is_finite());
    }

    #[test]
    fn dice_loss_gradients_match_finite_differences() {
        let mut rng = crate::rng::stream(29, 0);
        let n = 9;
        let y = t(&(0..n)
            .map(|_| f64::from(u8::from(crate::rng::uniform(&mut rng) > 0.6)))
            .collect::<Vec<_>>());
        let params = vec![(
            "pred".to_string(),
            t(&(0..n)
                .map(|_| crate::rng::uniform_in(&mut rng, 0.05, 0.95))
                .collect::<Vec<_>>()),
        )];
        let report = grad_check(
            |g, ps| {
                let p = g.param(&ps[0].1);
                dice_loss(g, &y, p).map_err(|e| match e {
                    LossError::Tensor(t) => t,
                    other => panic!("unexpected: {other}"),
                })
            },
            &params,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
    }
}
