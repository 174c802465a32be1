//! Dual left-right lane ID arithmetic.
//!
//! A lane ID is counted either from the left road border (`delta_l`) or from
//! the right one (`delta_r`); with `lane_count` lanes the two are tied by
//! `delta_r = lane_count - delta_l + 1`. IDs are 1-based everywhere outside
//! the model; the 0-based class index mapping lives here and only here.

use crate::error::err_invalid;
use crate::Result;

/// Maximum lane count / number of classes per head.
pub const MAX_LANES: u8 = 8;

/// Which road border an ID is counted from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum Convention {
    Left,
    Right,
}

/// Ground-truth triple: lane ID from the left, from the right, and the total
/// lane count. Always satisfies `delta_r = lane_count - delta_l + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LaneLabel {
    pub delta_l: u8,
    pub delta_r: u8,
    pub lane_count: u8,
}

impl LaneLabel {
    /// Builds a label from the left-convention ID and the lane count; the
    /// right ID is derived.
    pub fn from_left(delta_l: u8, lane_count: u8) -> Result<Self> {
        let delta_r = right_from_left(delta_l, lane_count)?;
        Ok(LaneLabel { delta_l, delta_r, lane_count })
    }

    /// Validates an explicit triple.
    pub fn new(delta_l: u8, delta_r: u8, lane_count: u8) -> Result<Self> {
        let label = Self::from_left(delta_l, lane_count)?;
        if label.delta_r != delta_r {
            return Err(err_invalid!(
                "lane_label",
                "delta_r = {delta_r} but lane_count - delta_l + 1 = {}",
                label.delta_r
            ));
        }
        Ok(label)
    }

    /// ID under the given convention.
    pub fn id(&self, convention: Convention) -> u8 {
        match convention {
            Convention::Left => self.delta_l,
            Convention::Right => self.delta_r,
        }
    }

    /// 0-based class index for a 1-based lane ID.
    pub fn class_of(id: u8) -> usize {
        debug_assert!((1..=MAX_LANES).contains(&id));
        (id - 1) as usize
    }

    /// 1-based lane ID for a 0-based class index.
    pub fn id_of_class(class: usize) -> u8 {
        debug_assert!(class < MAX_LANES as usize);
        class as u8 + 1
    }
}

/// The right-convention ID implied by a left ID and lane count.
pub fn right_from_left(delta_l: u8, lane_count: u8) -> Result<u8> {
    if lane_count == 0 || lane_count > MAX_LANES {
        return Err(err_invalid!(
            "right_from_left",
            "lane_count {lane_count} out of 1..={MAX_LANES}"
        ));
    }
    if delta_l == 0 || delta_l > lane_count {
        return Err(err_invalid!(
            "right_from_left",
            "delta_l {delta_l} out of 1..={lane_count}"
        ));
    }
    Ok(lane_count - delta_l + 1)
}

/// Label transform matching a horizontal image flip: the two conventions
/// swap, the lane count is unchanged.
pub fn mirror(label: LaneLabel) -> LaneLabel {
    LaneLabel {
        delta_l: label.delta_r,
        delta_r: label.delta_l,
        lane_count: label.lane_count,
    }
}

/// Signed residual of the triangular constraint: `s_r - s_c + s_l - 1`.
/// Zero exactly when the three scalars form a consistent triple.
pub fn triangular_residual(s_l: f64, s_r: f64, s_c: f64) -> f64 {
    s_r - s_c + s_l - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn right_from_left_examples() {
        assert_eq!(right_from_left(1, 1).unwrap(), 1);
        assert_eq!(right_from_left(2, 4).unwrap(), 3);
        assert_eq!(right_from_left(4, 4).unwrap(), 1);
    }

    #[test]
    fn right_from_left_rejects_out_of_range() {
        assert!(right_from_left(0, 4).is_err());
        assert!(right_from_left(5, 4).is_err());
        assert!(right_from_left(1, 0).is_err());
        assert!(right_from_left(1, 9).is_err());
    }

    #[test]
    fn mirror_examples() {
        let l = LaneLabel::new(2, 3, 4).unwrap();
        assert_eq!(mirror(l), LaneLabel { delta_l: 3, delta_r: 2, lane_count: 4 });
        let single = LaneLabel::new(1, 1, 1).unwrap();
        assert_eq!(mirror(single), single);
    }

    #[test]
    fn triangular_residual_examples() {
        assert_eq!(triangular_residual(2.0, 3.0, 4.0), 0.0);
        assert_eq!(triangular_residual(1.0, 1.0, 1.0), 0.0);
        assert_eq!(triangular_residual(2.0, 2.0, 4.0), -1.0);
    }

    #[test]
    fn label_rejects_inconsistent_triple() {
        assert!(LaneLabel::new(2, 2, 4).is_err());
    }

    proptest! {
        #[test]
        fn every_valid_label_has_zero_residual(count in 1u8..=8, dl in 1u8..=8) {
            prop_assume!(dl <= count);
            let label = LaneLabel::from_left(dl, count).unwrap();
            prop_assert_eq!(
                triangular_residual(label.delta_l as f64, label.delta_r as f64, label.lane_count as f64),
                0.0
            );
        }

        #[test]
        fn right_from_left_is_involutive(count in 1u8..=8, dl in 1u8..=8) {
            prop_assume!(dl <= count);
            let dr = right_from_left(dl, count).unwrap();
            prop_assert_eq!(right_from_left(dr, count).unwrap(), dl);
        }

        #[test]
        fn mirror_is_involutive(count in 1u8..=8, dl in 1u8..=8) {
            prop_assume!(dl <= count);
            let label = LaneLabel::from_left(dl, count).unwrap();
            prop_assert_eq!(mirror(mirror(label)), label);
        }
    }
}
