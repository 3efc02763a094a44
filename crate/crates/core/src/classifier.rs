//! Per-pixel decisions: the hierarchical rule over nested-region
//! probabilities, and plain argmax over class probabilities.

use crate::autodiff::channel_layout;
use crate::error::{invalid, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::NUM_CLASSES;

/// One of four mutually exclusive outcomes. Ordered from least to most specific.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RegionDecision {
    NonTumor,
    EdemaOnly,
    CoreNonEnhancing,
    Enhancing,
}

impl RegionDecision {
    /// Membership in (complete, core, enhancing).
    pub fn masks(self) -> [bool; 3] {
        match self {
            Self::NonTumor => [false, false, false],
            Self::EdemaOnly => [true, false, false],
            Self::CoreNonEnhancing => [true, true, false],
            Self::Enhancing => [true, true, true],
        }
    }

    /// A representative label for display: 0, 2, 3 or 4.
    pub fn display_label(self) -> u8 {
        match self {
            Self::NonTumor => 0,
            Self::EdemaOnly => 2,
            Self::CoreNonEnhancing => 3,
            Self::Enhancing => 4,
        }
    }
}

/// Strict-inequality gates; a tie stops at the less specific class.
pub fn hierarchical_decide(p0: f64, p1: f64, p2: f64) -> Result<RegionDecision> {
    for (name, p) in [("p0", p0), ("p1", p1), ("p2", p2)] {
        if !(0.0..=1.0).contains(&p) {
            return invalid(format!("{name} = {p} outside [0, 1]"));
        }
    }
    Ok(if !(p0 > 1.0 - p0) {
        RegionDecision::NonTumor
    } else if !(p1 > p0 - p1) {
        RegionDecision::EdemaOnly
    } else if !(p2 > p1 - p2) {
        RegionDecision::CoreNonEnhancing
    } else {
        RegionDecision::Enhancing
    })
}

/// Index of the largest probability; the lowest index wins ties.
pub fn argmax_decide<T: Real>(probs: &[T]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// Hierarchical decisions for every pixel of a `(B, 5, H, W)` (or `(N, 5)`)
/// class-probability tensor, in `outer * inner` order.
pub fn decide_hierarchical_map<T: Real>(probs: &Tensor<T>) -> Result<Vec<RegionDecision>> {
    let (outer, c, inner) = class_layout(probs)?;
    let q = probs.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for s in 0..inner {
            let at = |k: usize| q[(o * c + k) * inner + s].to_f64();
            let p2 = at(4);
            let p1 = at(1) + at(3) + p2;
            let p0 = p1 + at(2);
            // Summation can overshoot 1 by a rounding step.
            out.push(hierarchical_decide(p0.min(1.0), p1.min(1.0), p2.min(1.0))?);
        }
    }
    Ok(out)
}

/// Argmax labels for every pixel, in `outer * inner` order.
pub fn decide_argmax_map<T: Real>(probs: &Tensor<T>) -> Result<Vec<u8>> {
    let (outer, c, inner) = class_layout(probs)?;
    let q = probs.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut column = [T::ZERO; NUM_CLASSES];
    for o in 0..outer {
        for s in 0..inner {
            for (k, v) in column.iter_mut().enumerate() {
                *v = q[(o * c + k) * inner + s];
            }
            out.push(argmax_decide(&column) as u8);
        }
    }
    Ok(out)
}

fn class_layout<T: Real>(probs: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (outer, c, inner) = channel_layout(probs.shape())?;
    if c != NUM_CLASSES {
        return shape_err(format!("expected {NUM_CLASSES} class channels, got {c}"));
    }
    Ok((outer, c, inner))
}

/// Three region masks (complete, core, enhancing) from per-pixel decisions.
pub fn decision_masks(decisions: &[RegionDecision]) -> [Vec<bool>; 3] {
    let mut m: [Vec<bool>; 3] = Default::default();
    for d in decisions {
        for (k, v) in d.masks().into_iter().enumerate() {
            m[k].push(v);
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use RegionDecision::*;

    #[test]
    fn hierarchical_examples() {
        assert_eq!(hierarchical_decide(0.4, 0.3, 0.1).unwrap(), NonTumor);
        assert_eq!(hierarchical_decide(0.6, 0.2, 0.1).unwrap(), EdemaOnly);
        assert_eq!(hierarchical_decide(0.9, 0.6, 0.4).unwrap(), Enhancing);
        assert_eq!(hierarchical_decide(0.9, 0.6, 0.2).unwrap(), CoreNonEnhancing);
    }

    #[test]
    fn ties_go_to_less_specific() {
        assert_eq!(hierarchical_decide(0.5, 0.5, 0.5).unwrap(), NonTumor);
        assert_eq!(hierarchical_decide(0.8, 0.4, 0.4).unwrap(), EdemaOnly);
        assert_eq!(hierarchical_decide(0.8, 0.6, 0.3).unwrap(), CoreNonEnhancing);
    }

    #[test]
    fn rejects_out_of_range() {
        assert!(hierarchical_decide(1.1, 0.0, 0.0).is_err());
        assert!(hierarchical_decide(0.5, -0.1, 0.0).is_err());
        assert!(hierarchical_decide(f64::NAN, 0.0, 0.0).is_err());
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_decide(&[0.9, 0.025, 0.025, 0.025, 0.025]), 0);
        assert_eq!(argmax_decide(&[0.2f32; 5]), 0);
        assert_eq!(argmax_decide(&[0.1, 0.1, 0.5, 0.2, 0.1]), 2);
    }

    #[test]
    fn masks_are_nested() {
        for d in [NonTumor, EdemaOnly, CoreNonEnhancing, Enhancing] {
            let [a, b, c] = d.masks();
            assert!((!c || b) && (!b || a));
        }
    }

    #[test]
    fn maps_over_nchw() {
        // Two pixels: pure enhancing, pure background.
        let q = Tensor::<f64>::from_f64(&[1, 5, 1, 2], &[0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(decide_hierarchical_map(&q).unwrap(), vec![Enhancing, NonTumor]);
        assert_eq!(decide_argmax_map(&q).unwrap(), vec![4, 0]);
    }
}
