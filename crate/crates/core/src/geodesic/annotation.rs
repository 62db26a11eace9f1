//! Polygon markers and anti-markers drawn on individual slices.
//!
//! Vertices are in voxel coordinates: voxel `(i, j)` covers `[i, i+1] × [j, j+1]`
//! and its centre sits at `(i + 0.5, j + 0.5)`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, VolumeGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnnotationKind {
    Marker,
    #[serde(alias = "anti-marker", alias = "anti_marker")]
    AntiMarker,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolygonAnnotation {
    pub group: u8,
    pub kind: AnnotationKind,
    pub slice: usize,
    pub vertices: Vec<[f64; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AnnotationSet {
    polygons: Vec<PolygonAnnotation>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub groups: Vec<u8>,
    pub missing_markers: Vec<u8>,
    pub missing_antimarkers: Vec<u8>,
    pub warnings: Vec<String>,
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn segments_cross(a: [f64; 2], b: [f64; 2], c: [f64; 2], d: [f64; 2]) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

impl PolygonAnnotation {
    /// Rejects fewer than three distinct vertices, non-finite vertices and proper self-crossings.
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err("non-finite vertex".into());
        }
        let mut distinct: Vec<[f64; 2]> = Vec::new();
        for v in &self.vertices {
            if !distinct.contains(v) {
                distinct.push(*v);
            }
        }
        if distinct.len() < 3 {
            return Err(format!("needs at least 3 distinct vertices, has {}", distinct.len()));
        }
        let n = self.vertices.len();
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_cross(a, b, c, d) {
                    return Err(format!("edges {i} and {j} intersect"));
                }
            }
        }
        Ok(())
    }

    /// Even-odd fill of voxel centres into one slice of `mask`.
    fn fill(&self, mask: &mut MaskVolume) {
        let g = *mask.geometry();
        let [nx, ny, _] = g.dims;
        let n = self.vertices.len();
        let mut xs = Vec::new();
        for y in 0..ny {
            let yc = y as f64 + 0.5;
            xs.clear();
            for i in 0..n {
                let a = self.vertices[i];
                let b = self.vertices[(i + 1) % n];
                if (a[1] > yc) != (b[1] > yc) {
                    xs.push(a[0] + (yc - a[1]) * (b[0] - a[0]) / (b[1] - a[1]));
                }
            }
            xs.sort_by(|p, q| p.total_cmp(q));
            for pair in xs.chunks_exact(2) {
                // Voxel centres x + 0.5 inside [pair[0], pair[1]).
                let lo = (pair[0] - 0.5).ceil().max(0.0);
                let hi = (pair[1] - 0.5).ceil().min(nx as f64);
                if hi <= lo {
                    continue;
                }
                for x in lo as usize..hi as usize {
                    mask.data_mut()[g.index(x, y, self.slice)] = true;
                }
            }
        }
    }
}

impl AnnotationSet {
    pub fn new(polygons: Vec<PolygonAnnotation>) -> Self {
        AnnotationSet { polygons }
    }

    pub fn polygons(&self) -> &[PolygonAnnotation] {
        &self.polygons
    }

    pub fn is_empty(&self) -> bool {
        self.polygons.is_empty()
    }

    pub fn groups(&self) -> Vec<u8> {
        let set: BTreeSet<u8> = self.polygons.iter().map(|p| p.group).collect();
        set.into_iter().collect()
    }

    pub fn annotated_slices(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.polygons.iter().map(|p| p.slice).collect();
        set.into_iter().collect()
    }

    /// Drops every polygon of the given kind, e.g. to study the effect of anti-markers.
    pub fn without_kind(&self, kind: AnnotationKind) -> AnnotationSet {
        AnnotationSet::new(self.polygons.iter().filter(|p| p.kind != kind).cloned().collect())
    }

    pub fn has(&self, group: u8, kind: AnnotationKind) -> bool {
        self.polygons.iter().any(|p| p.group == group && p.kind == kind)
    }

    pub fn validate(&self, geometry: &VolumeGeometry) -> Result<ValidationReport> {
        for (index, p) in self.polygons.iter().enumerate() {
            p.check().map_err(|reason| Error::Polygon { index, reason })?;
            if p.slice >= geometry.dims[2] {
                return Err(Error::Polygon {
                    index,
                    reason: format!("slice {} outside volume with {} slices", p.slice, geometry.dims[2]),
                });
            }
            if p.group == 0 {
                return Err(Error::Polygon {
                    index,
                    reason: "group 0 is reserved for background".into(),
                });
            }
        }
        let mut report = ValidationReport {
            groups: self.groups(),
            ..ValidationReport::default()
        };
        for &g in &report.groups.clone() {
            if !self.has(g, AnnotationKind::Marker) {
                report.missing_markers.push(g);
                report.warnings.push(format!("group {g} has no markers"));
            }
            if !self.has(g, AnnotationKind::AntiMarker) {
                report.missing_antimarkers.push(g);
                report.warnings.push(format!("group {g} has no anti-markers"));
            }
        }
        Ok(report)
    }

    /// Voxels whose centre lies inside any polygon of `kind` for `group`.
    pub fn rasterize(&self, geometry: &VolumeGeometry, kind: AnnotationKind, group: u8) -> Result<MaskVolume> {
        let mut mask = MaskVolume::empty(*geometry);
        for (index, p) in self.polygons.iter().enumerate() {
            if p.group != group || p.kind != kind {
                continue;
            }
            p.check().map_err(|reason| Error::Polygon { index, reason })?;
            if p.slice >= geometry.dims[2] {
                return Err(Error::Polygon {
                    index,
                    reason: format!("slice {} outside volume", p.slice),
                });
            }
            p.fill(&mut mask);
        }
        Ok(mask)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("annotations serialize");
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }
}
