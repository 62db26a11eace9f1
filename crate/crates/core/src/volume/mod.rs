//! Volumetric data model.
//!
//! All volumes store voxels x-fastest, then y, then z. Physical coordinates are
//! millimetres measured from the centre of the field of view, so two grids with
//! different matrix sizes but overlapping FOVs line up at their centres.

mod io;
mod resample;

pub use io::{
    load_labels, load_mask, load_volume, save_labels, save_mask, save_volume, volume_paths, Dtype, VolumeHeader,
};
pub use resample::resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGeometry {
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
}

impl VolumeGeometry {
    pub fn new(dims: [usize; 3], fov_mm: [f64; 3]) -> Result<Self> {
        let geometry = VolumeGeometry { dims, fov_mm };
        geometry.validate()?;
        Ok(geometry)
    }

    /// Geometry with 1 mm isotropic spacing.
    pub fn unit(dims: [usize; 3]) -> Self {
        VolumeGeometry {
            dims,
            fov_mm: [dims[0] as f64, dims[1] as f64, dims[2] as f64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::Geometry(format!("dims must be >= 1, got {:?}", self.dims)));
        }
        if self.fov_mm.iter().any(|&f| !(f.is_finite() && f > 0.0)) {
            return Err(Error::Geometry(format!(
                "fov must be positive and finite, got {:?}",
                self.fov_mm
            )));
        }
        Ok(())
    }

    pub fn spacing(&self) -> [f64; 3] {
        [
            self.fov_mm[0] / self.dims[0] as f64,
            self.fov_mm[1] / self.dims[1] as f64,
            self.fov_mm[2] / self.dims[2] as f64,
        ]
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline(always)]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline(always)]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Physical position of a voxel centre, relative to the FOV centre.
    pub fn voxel_center_mm(&self, ijk: [usize; 3]) -> [f64; 3] {
        let sp = self.spacing();
        let mut p = [0.0; 3];
        for a in 0..3 {
            p[a] = (ijk[a] as f64 + 0.5) * sp[a] - 0.5 * self.fov_mm[a];
        }
        p
    }

    /// Continuous voxel index of a physical position (inverse of `voxel_center_mm`).
    pub fn continuous_index(&self, p: [f64; 3]) -> [f64; 3] {
        let sp = self.spacing();
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = (p[a] + 0.5 * self.fov_mm[a]) / sp[a] - 0.5;
        }
        c
    }

    pub fn same_grid(&self, other: &VolumeGeometry) -> bool {
        self.dims == other.dims
            && self
                .fov_mm
                .iter()
                .zip(other.fov_mm.iter())
                .all(|(a, b)| (a - b).abs() <= 1e-9 * a.abs().max(1.0))
    }

    pub(crate) fn ensure_same(&self, other: &VolumeGeometry, what: &str) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.fov_mm, other.dims, other.fov_mm
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    geometry: VolumeGeometry,
    data: Vec<f64>,
}

impl ScalarVolume {
    pub fn new(geometry: VolumeGeometry, data: Vec<f64>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "data length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Geometry(format!("non-finite value at voxel {i}")));
        }
        Ok(ScalarVolume { geometry, data })
    }

    pub fn filled(geometry: VolumeGeometry, value: f64) -> Self {
        ScalarVolume {
            geometry,
            data: vec![value; geometry.len()],
        }
    }

    pub fn from_fn(geometry: VolumeGeometry, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        ScalarVolume { geometry, data }
    }

    pub(crate) fn from_vec_unchecked(geometry: VolumeGeometry, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), geometry.len());
        ScalarVolume { geometry, data }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geometry.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn slice(&self, z: usize) -> &[f64] {
        let n = self.geometry.slice_len();
        &self.data[z * n..(z + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarVolume {
        ScalarVolume {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Min-max rescale to [0, 1]; a constant volume maps to all zeros.
    pub fn normalized(&self) -> ScalarVolume {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if span <= 0.0 {
            return ScalarVolume::filled(self.geometry, 0.0);
        }
        self.map(|v| (v - lo) / span)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    geometry: VolumeGeometry,
    data: Vec<bool>,
}

impl MaskVolume {
    pub fn new(geometry: VolumeGeometry, data: Vec<bool>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "mask length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        Ok(MaskVolume { geometry, data })
    }

    pub fn empty(geometry: VolumeGeometry) -> Self {
        MaskVolume {
            geometry,
            data: vec![false; geometry.len()],
        }
    }

    pub fn from_fn(geometry: VolumeGeometry, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let [nx, ny, nz] = geometry.dims;
        let mut data = Vec::with_capacity(geometry.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(f(x, y, z));
                }
            }
        }
        MaskVolume { geometry, data }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn union(&self, other: &MaskVolume) -> MaskVolume {
        MaskVolume {
            geometry: self.geometry,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a || b).collect(),
        }
    }

    pub fn to_scalar(&self) -> ScalarVolume {
        ScalarVolume {
            geometry: self.geometry,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// Small non-negative labels; 0 means unlabeled.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    geometry: VolumeGeometry,
    data: Vec<u8>,
    labels: Vec<u8>,
}

impl LabelVolume {
    /// `labels` is the declared dictionary of non-zero labels.
    pub fn new(geometry: VolumeGeometry, data: Vec<u8>, mut labels: Vec<u8>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.len() {
            return Err(Error::Geometry(format!(
                "label length {} does not match dims {:?}",
                data.len(),
                geometry.dims
            )));
        }
        labels.retain(|&l| l != 0);
        labels.sort_unstable();
        labels.dedup();
        if let Some(&bad) = data.iter().find(|&&v| v != 0 && labels.binary_search(&v).is_err()) {
            return Err(Error::Param(format!("label {bad} not in dictionary {labels:?}")));
        }
        Ok(LabelVolume { geometry, data, labels })
    }

    /// Builds a label volume declaring every label that occurs.
    pub fn from_data(geometry: VolumeGeometry, data: Vec<u8>) -> Result<Self> {
        let mut labels: Vec<u8> = data.iter().copied().filter(|&l| l != 0).collect();
        labels.sort_unstable();
        labels.dedup();
        LabelVolume::new(geometry, data, labels)
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.geometry.index(x, y, z)]
    }

    pub fn mask_of(&self, label: u8) -> MaskVolume {
        MaskVolume {
            geometry: self.geometry,
            data: self.data.iter().map(|&v| v == label).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spacing_of_the_high_resolution_grid() {
        let g = VolumeGeometry::new([512, 299, 28], [400.0, 312.0, 140.0]).unwrap();
        let sp = g.spacing();
        assert!((sp[0] - 0.78125).abs() < 1e-12);
        assert!((sp[1] - 312.0 / 299.0).abs() < 1e-12);
        assert!((sp[1] - 1.04348).abs() < 1e-5);
        assert!((sp[2] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_degenerate_geometry() {
        assert!(VolumeGeometry::new([0, 4, 4], [1.0, 1.0, 1.0]).is_err());
        assert!(VolumeGeometry::new([4, 4, 4], [1.0, -1.0, 1.0]).is_err());
    }

    #[test]
    fn index_and_coords_are_inverse() {
        let g = VolumeGeometry::unit([5, 3, 4]);
        for idx in 0..g.len() {
            let [x, y, z] = g.coords(idx);
            assert_eq!(g.index(x, y, z), idx);
        }
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 5);
        assert_eq!(g.index(0, 0, 1), 15);
    }

    #[test]
    fn label_dictionary_is_enforced() {
        let g = VolumeGeometry::unit([2, 1, 1]);
        assert!(LabelVolume::new(g, vec![0, 3], vec![1, 2]).is_err());
        let l = LabelVolume::new(g, vec![0, 2], vec![1, 2]).unwrap();
        assert_eq!(l.mask_of(2).count(), 1);
    }

    #[test]
    fn non_finite_data_is_rejected() {
        let g = VolumeGeometry::unit([2, 1, 1]);
        assert!(ScalarVolume::new(g, vec![0.0, f64::NAN]).is_err());
    }
}
