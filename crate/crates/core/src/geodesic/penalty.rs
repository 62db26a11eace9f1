//! Edge-weighted speed and the combined marker/anti-marker distance penalty.

use serde::{Deserialize, Serialize};

use super::annotation::{AnnotationKind, AnnotationSet};
use super::sweep::{fast_sweep, DistanceField};
use crate::error::{Error, Result};
use crate::volume::{MaskVolume, ScalarVolume};

/// How raw geodesic distances are brought to `[0, 1]` before they are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceNormalization {
    /// Divide by the maximum over the whole grid.
    DomainMax,
    /// Divide the marker distance by a quantile of its values on the anti-marker
    /// voxels and vice versa, then clamp to 1. Falls back to the domain maximum
    /// when the opposite set is missing.
    OppositeSeeds,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyParams {
    pub eps: f64,
    pub omega: f64,
    pub alpha_d: f64,
    pub normalization: DistanceNormalization,
    /// Quantile used by [`DistanceNormalization::OppositeSeeds`].
    pub opposite_quantile: f64,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        PenaltyParams {
            eps: 0.1,
            omega: 10.0,
            alpha_d: 20.0,
            normalization: DistanceNormalization::OppositeSeeds,
            opposite_quantile: 1.0,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0 && self.omega > 0.0) {
            return Err(Error::Param("eps and omega must be positive".into()));
        }
        if !(self.alpha_d > 0.0) {
            return Err(Error::Param(format!("alpha_d must be positive, got {}", self.alpha_d)));
        }
        if !(self.opposite_quantile > 0.0 && self.opposite_quantile <= 1.0) {
            return Err(Error::Param(format!(
                "opposite_quantile must lie in (0, 1], got {}",
                self.opposite_quantile
            )));
        }
        Ok(())
    }
}

/// `f = eps + omega · edge`.
pub fn geodesic_speed(edge: &ScalarVolume, p: &PenaltyParams) -> ScalarVolume {
    edge.map(|e| p.eps + p.omega * e.max(0.0))
}

/// Divides by the domain maximum; an all-zero field stays zero.
pub fn normalize_distance(d: &ScalarVolume) -> ScalarVolume {
    let max = d.data().iter().copied().fold(0.0f64, f64::max);
    if max > 0.0 {
        d.map(|v| v / max)
    } else {
        d.clone()
    }
}

/// `min(d / q, 1)` with `q` the `quantile` of `d` over `reference`; the domain
/// maximum when `reference` is empty or `q` is zero.
pub fn normalize_against(d: &ScalarVolume, reference: &MaskVolume, quantile: f64) -> ScalarVolume {
    let mut values: Vec<f64> = d
        .data()
        .iter()
        .zip(reference.data())
        .filter(|(_, &r)| r)
        .map(|(&v, _)| v)
        .collect();
    if values.is_empty() {
        return normalize_distance(d);
    }
    let pos = ((values.len() - 1) as f64 * quantile.clamp(0.0, 1.0)).round() as usize;
    let (_, &mut q, _) = values.select_nth_unstable_by(pos, |a, b| a.total_cmp(b));
    if q > 0.0 {
        d.map(|v| (v / q).min(1.0))
    } else {
        normalize_distance(d)
    }
}

/// Penalty for normalised marker distance `dm` and anti-marker distance `dam`.
#[inline]
pub fn penalty_value(dm: f64, dam: f64, alpha_d: f64) -> f64 {
    let floor = (-alpha_d).exp();
    0.5 * (dm + ((-alpha_d * dam).exp() - floor) / (1.0 - floor))
}

/// Combines normalised distance fields.
pub fn distance_penalty(dm: &ScalarVolume, dam: &ScalarVolume, alpha_d: f64) -> Result<ScalarVolume> {
    dm.geometry()
        .ensure_same(dam.geometry(), "marker vs anti-marker distance")?;
    if !(alpha_d > 0.0) {
        return Err(Error::Param(format!("alpha_d must be positive, got {alpha_d}")));
    }
    let data = dm
        .data()
        .iter()
        .zip(dam.data())
        .map(|(&m, &a)| penalty_value(m, a, alpha_d))
        .collect();
    ScalarVolume::new(*dm.geometry(), data)
}

#[derive(Clone, Debug)]
pub struct GroupDistances {
    pub group: u8,
    pub markers: MaskVolume,
    pub antimarkers: MaskVolume,
    pub marker_distance: DistanceField,
    /// `None` when the group has no anti-markers; the anti-marker term is then zero.
    pub antimarker_distance: Option<DistanceField>,
    pub penalty: ScalarVolume,
}

pub fn group_distances(
    annotations: &AnnotationSet,
    group: u8,
    speed: &ScalarVolume,
    params: &PenaltyParams,
) -> Result<GroupDistances> {
    params.validate()?;
    let g = speed.geometry();
    let markers = annotations.rasterize(g, AnnotationKind::Marker, group)?;
    let antimarkers = annotations.rasterize(g, AnnotationKind::AntiMarker, group)?;
    if markers.is_empty_mask() {
        return Err(Error::Empty("marker set"));
    }
    let marker_distance = fast_sweep(&markers, speed)?;
    let opposite = params.normalization == DistanceNormalization::OppositeSeeds;
    let (antimarker_distance, dm, dam) = if antimarkers.is_empty_mask() {
        log::warn!("group {group} has no anti-markers; anti-marker term disabled");
        let dm = normalize_distance(&marker_distance.distance);
        (None, dm, ScalarVolume::filled(*g, 1.0))
    } else {
        let d = fast_sweep(&antimarkers, speed)?;
        let (dm, dam) = if opposite {
            (
                normalize_against(&marker_distance.distance, &antimarkers, params.opposite_quantile),
                normalize_against(&d.distance, &markers, params.opposite_quantile),
            )
        } else {
            (
                normalize_distance(&marker_distance.distance),
                normalize_distance(&d.distance),
            )
        };
        (Some(d), dm, dam)
    };
    let penalty = distance_penalty(&dm, &dam, params.alpha_d)?;
    Ok(GroupDistances {
        group,
        markers,
        antimarkers,
        marker_distance,
        antimarker_distance,
        penalty,
    })
}
