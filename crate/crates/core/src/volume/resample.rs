use super::{ScalarVolume, VolumeGeometry};
use crate::error::{Error, Result};

/// Trilinear resampling onto `target`, aligning both grids at their FOV centres.
///
/// Target voxels whose physical position falls outside the source FOV take the
/// nearest in-FOV value.
pub fn resample(vol: &ScalarVolume, target: &VolumeGeometry) -> Result<ScalarVolume> {
    target.validate()?;
    let src = vol.geometry();
    let overlaps = (0..3).all(|a| target.fov_mm[a] > 0.0 && src.fov_mm[a] > 0.0);
    if !overlaps {
        return Err(Error::Geometry("source and target FOVs do not overlap".into()));
    }
    if src.same_grid(target) {
        return Ok(vol.clone());
    }

    // Per-axis lookup tables: lower index and weight of the upper neighbour.
    let axis_table = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..target.dims[a])
            .map(|i| {
                let mut ijk = [0usize; 3];
                ijk[a] = i;
                let p = target.voxel_center_mm(ijk);
                let c = src.continuous_index(p)[a];
                let n = src.dims[a];
                let c = c.clamp(0.0, (n - 1) as f64);
                let lo = (c.floor() as usize).min(n - 1);
                let hi = (lo + 1).min(n - 1);
                (lo, hi, c - lo as f64)
            })
            .collect()
    };
    let tx = axis_table(0);
    let ty = axis_table(1);
    let tz = axis_table(2);

    let s = vol.data();
    let mut out = Vec::with_capacity(target.len());
    for &(z0, z1, wz) in &tz {
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let at = |x, y, z| s[src.index(x, y, z)];
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                out.push(c0 * (1.0 - wz) + c1 * wz);
            }
        }
    }
    Ok(ScalarVolume::from_vec_unchecked(*target, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(g: VolumeGeometry) -> ScalarVolume {
        ScalarVolume::from_fn(g, |x, y, z| {
            let p = g.voxel_center_mm([x, y, z]);
            0.3 * p[0] - 1.7 * p[1] + 0.05 * p[2] + 12.0
        })
    }

    #[test]
    fn identity_on_matching_geometry() {
        let g = VolumeGeometry::new([7, 5, 3], [7.0, 10.0, 9.0]).unwrap();
        let v = ramp(g);
        let r = resample(&v, &g).unwrap();
        for (a, b) in v.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_stays_constant() {
        let g = VolumeGeometry::new([6, 6, 2], [12.0, 12.0, 4.0]).unwrap();
        let v = ScalarVolume::filled(g, 3.25);
        let t = VolumeGeometry::new([13, 4, 5], [30.0, 7.0, 5.0]).unwrap();
        let r = resample(&v, &t).unwrap();
        assert!(r.data().iter().all(|&x| (x - 3.25).abs() < 1e-12));
    }

    #[test]
    fn dixon_grid_onto_t1_grid_reproduces_affine_ramp() {
        let low = VolumeGeometry::new([256, 191, 28], [400.0, 300.0, 140.0]).unwrap();
        let high = VolumeGeometry::new([512, 299, 28], [400.0, 312.0, 140.0]).unwrap();
        let v = ramp(low);
        let r = resample(&v, &high).unwrap();
        let mut checked = 0usize;
        for z in 0..28 {
            for y in 0..299 {
                for x in 0..512 {
                    let p = high.voxel_center_mm([x, y, z]);
                    let c = low.continuous_index(p);
                    let inside = (0..3).all(|a| c[a] >= 0.0 && c[a] <= (low.dims[a] - 1) as f64);
                    if !inside {
                        continue;
                    }
                    let expect = 0.3 * p[0] - 1.7 * p[1] + 0.05 * p[2] + 12.0;
                    assert!((r.get(x, y, z) - expect).abs() < 1e-6, "at {x},{y},{z}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 3_000_000);
    }

    #[test]
    fn values_stay_within_source_range() {
        let g = VolumeGeometry::new([5, 4, 3], [5.0, 4.0, 3.0]).unwrap();
        let v = ScalarVolume::from_fn(g, |x, y, z| ((x * 7 + y * 3 + z * 11) % 5) as f64);
        let (lo, hi) = v.min_max();
        let t = VolumeGeometry::new([11, 9, 4], [6.0, 5.0, 3.5]).unwrap();
        let r = resample(&v, &t).unwrap();
        assert!(r.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }
}
