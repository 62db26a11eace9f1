//! Marker rasterization, geodesic distances and the distance penalty.

mod annotation;
mod contour;
mod penalty;
mod sweep;

pub use annotation::{AnnotationKind, AnnotationSet, PolygonAnnotation, ValidationReport};
pub use contour::mask_to_polygons;
pub use penalty::{
    distance_penalty, geodesic_speed, group_distances, normalize_against, normalize_distance, penalty_value,
    DistanceNormalization, GroupDistances, PenaltyParams,
};
pub use sweep::{fast_sweep, DistanceField};
