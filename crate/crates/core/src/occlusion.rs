//! Forward-backward consistency occlusion detection.
//!
//! A pixel is flagged occluded in the forward direction when
//!
//! ```text
//! |Mf + Mb(p + Mf)|^2 >= alpha1 * (|Mf|^2 + |Mb(p + Mf)|^2) + alpha2
//! ```
//!
//! i.e. when the backward flow sampled at the forward target fails to undo
//! the forward flow. Equality counts as a violation.

use crate::error::{Error, Result};
use crate::fields::{FlowField, OcclusionMask};

pub const DEFAULT_ALPHA1: f64 = 0.01;
pub const DEFAULT_ALPHA2: f64 = 0.5;

/// The backward field bilinearly sampled at every pixel's forward target.
pub fn backward_at_forward(forward: &FlowField, backward: &FlowField) -> Result<FlowField> {
    backward.ensure_dims(forward.width(), forward.height())?;
    FlowField::from_fn(forward.width(), forward.height(), |x, y| {
        let (sx, sy) = forward.source_coord(x, y);
        backward.sample(sx, sy)
    })
}

/// Forward occlusion mask of `forward` against `backward`.
pub fn occlusion_mask(
    forward: &FlowField,
    backward: &FlowField,
    alpha1: f64,
    alpha2: f64,
) -> Result<OcclusionMask> {
    if !(alpha1 >= 0.0 && alpha2 >= 0.0) {
        return Err(Error::invalid(format!(
            "occlusion thresholds must be nonnegative, got {alpha1}, {alpha2}"
        )));
    }
    let warped = backward_at_forward(forward, backward)?;
    let flags = (0..forward.len())
        .map(|p| {
            let (fu, fv) = (forward.u()[p], forward.v()[p]);
            let (bu, bv) = (warped.u()[p], warped.v()[p]);
            let mismatch = (fu + bu).powi(2) + (fv + bv).powi(2);
            let bound = alpha1 * (fu * fu + fv * fv + bu * bu + bv * bv) + alpha2;
            mismatch >= bound
        })
        .collect();
    OcclusionMask::new(forward.width(), forward.height(), flags)
}

/// Forward and backward masks; the backward mask swaps the roles.
pub fn occlusion_masks(
    forward: &FlowField,
    backward: &FlowField,
    alpha1: f64,
    alpha2: f64,
) -> Result<(OcclusionMask, OcclusionMask)> {
    Ok((
        occlusion_mask(forward, backward, alpha1, alpha2)?,
        occlusion_mask(backward, forward, alpha1, alpha2)?,
    ))
}

/// Result of [`occlusion_aware_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OcclusionLoss {
    pub value: f64,
    pub forward: f64,
    pub backward: f64,
    /// Set when every pixel of that direction is occluded; its term is 0.
    pub forward_degenerate: bool,
    pub backward_degenerate: bool,
}

/// Masked mean of the per-pixel losses over non-occluded pixels.
/// Returns `None` if no pixel survives.
pub fn masked_mean(values: &[f64], occluded: &OcclusionMask) -> Result<Option<f64>> {
    if values.len() != occluded.flags().len() {
        return Err(Error::shape(
            format!("{} loss entries", occluded.flags().len()),
            values.len(),
        ));
    }
    let (sum, n) = values
        .iter()
        .zip(occluded.flags())
        .filter(|(_, &o)| !o)
        .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
    Ok((n > 0).then(|| sum / n as f64))
}

/// Sum of the forward and backward masked-mean reconstruction losses.
pub fn occlusion_aware_loss(
    forward_map: &[f64],
    backward_map: &[f64],
    forward_occ: &OcclusionMask,
    backward_occ: &OcclusionMask,
) -> Result<OcclusionLoss> {
    let f = masked_mean(forward_map, forward_occ)?;
    let b = masked_mean(backward_map, backward_occ)?;
    let (fv, bv) = (f.unwrap_or(0.0), b.unwrap_or(0.0));
    Ok(OcclusionLoss {
        value: fv + bv,
        forward: fv,
        backward: bv,
        forward_degenerate: f.is_none(),
        backward_degenerate: b.is_none(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_backward_cases() {
        let b = FlowField::from_fn(4, 4, |x, y| (x as f64, -(y as f64))).unwrap();
        assert_eq!(backward_at_forward(&FlowField::zeros(4, 4), &b).unwrap(), b);

        let c = FlowField::constant(4, 4, 1.5, -0.5);
        let f = FlowField::from_fn(4, 4, |x, y| (x as f64 * 0.3, 1.0 - y as f64)).unwrap();
        assert_eq!(backward_at_forward(&f, &c).unwrap(), c);

        let ramp = FlowField::from_fn(4, 4, |x, _| (x as f64, 0.0)).unwrap();
        let shifted = backward_at_forward(&FlowField::constant(4, 4, 1.0, 0.0), &ramp).unwrap();
        for y in 0..4 {
            let row: Vec<f64> = (0..4).map(|x| shifted.at(x, y).0).collect();
            assert_eq!(row, vec![1.0, 2.0, 3.0, 3.0]);
        }
    }

    #[test]
    fn mask_closed_forms() {
        let fwd = FlowField::constant(5, 5, 5.0, 0.0);
        let cancel = FlowField::constant(5, 5, -5.0, 0.0);
        assert_eq!(occlusion_mask(&fwd, &cancel, 0.01, 0.5).unwrap().count(), 0);
        let zero = FlowField::zeros(5, 5);
        assert_eq!(occlusion_mask(&fwd, &zero, 0.01, 0.5).unwrap().count(), 25);
        assert_eq!(occlusion_mask(&zero, &zero, 0.01, 0.5).unwrap().count(), 0);
        assert!(occlusion_mask(&fwd, &FlowField::zeros(4, 5), 0.01, 0.5).is_err());
    }

    #[test]
    fn equality_counts_as_occluded() {
        // |0 + 0|^2 = 0 >= 0 * ... + 0
        let zero = FlowField::zeros(2, 2);
        assert_eq!(occlusion_mask(&zero, &zero, 0.01, 0.0).unwrap().count(), 4);
    }

    #[test]
    fn masked_loss_cases() {
        let lf = [1.0, 2.0, 3.0, 4.0];
        let lb = [0.5; 4];
        let none = OcclusionMask::filled(2, 2, false);
        let all = OcclusionMask::filled(2, 2, true);
        let r = occlusion_aware_loss(&lf, &lb, &none, &none).unwrap();
        assert_eq!(r.value, 2.5 + 0.5);
        assert!(!r.forward_degenerate && !r.backward_degenerate);

        let r = occlusion_aware_loss(&lf, &lb, &all, &all).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.forward_degenerate && r.backward_degenerate);

        let half = OcclusionMask::new(2, 2, vec![true, false, true, false]).unwrap();
        let r = occlusion_aware_loss(&[1.0; 4], &[0.0; 4], &half, &none).unwrap();
        assert_eq!(r.forward, 1.0);
        assert!(occlusion_aware_loss(&[1.0; 3], &lb, &none, &none).is_err());
    }
}
