//! Small neighbourhood filters shared by several stages.

use crate::volume::{MaskVolume, ScalarVolume};

/// In-plane median over a `window`×`window` box with clamp-to-edge borders.
pub fn median_inplane(vol: &ScalarVolume, window: usize) -> ScalarVolume {
    assert!(window % 2 == 1, "median window must be odd");
    if window == 1 {
        return vol.clone();
    }
    let g = *vol.geometry();
    let [nx, ny, nz] = g.dims;
    let r = (window / 2) as isize;
    let src = vol.data();
    let mut out = vec![0.0; src.len()];
    let mut buf = Vec::with_capacity(window * window);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                buf.clear();
                for dy in -r..=r {
                    let yy = (y as isize + dy).clamp(0, ny as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x as isize + dx).clamp(0, nx as isize - 1) as usize;
                        buf.push(src[g.index(xx, yy, z)]);
                    }
                }
                let mid = buf.len() / 2;
                let (_, m, _) = buf.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
                out[g.index(x, y, z)] = *m;
            }
        }
    }
    ScalarVolume::from_vec_unchecked(g, out)
}

fn gaussian_taps(sigma_vox: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_vox).ceil().max(1.0) as usize;
    let taps: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-0.5 * d * d / (sigma_vox * sigma_vox)).exp()
        })
        .collect();
    taps
}

/// Separable Gaussian smoothing with a physical width; weights are renormalised
/// at the borders so constants are preserved.
pub fn gaussian_smooth(vol: &ScalarVolume, sigma_mm: f64) -> ScalarVolume {
    let g = *vol.geometry();
    let sp = g.spacing();
    let mut data = vol.data().to_vec();
    let mut tmp = vec![0.0; data.len()];
    for axis in 0..3 {
        let n = g.dims[axis];
        let sigma_vox = sigma_mm / sp[axis];
        if n == 1 || sigma_vox < 1e-3 {
            continue;
        }
        let taps = gaussian_taps(sigma_vox);
        let radius = (taps.len() / 2) as isize;
        let stride = match axis {
            0 => 1,
            1 => g.dims[0],
            _ => g.dims[0] * g.dims[1],
        };
        for idx in 0..data.len() {
            let c = g.coords(idx)[axis] as isize;
            let base = idx as isize - c * stride as isize;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            for (t, w) in taps.iter().enumerate() {
                let p = c + t as isize - radius;
                if p < 0 || p >= n as isize {
                    continue;
                }
                acc += w * data[(base + p * stride as isize) as usize];
                wsum += w;
            }
            tmp[idx] = acc / wsum;
        }
        std::mem::swap(&mut data, &mut tmp);
    }
    ScalarVolume::from_vec_unchecked(g, data)
}

/// In-plane binary erosion by a disk of `radius` voxels; outside the grid counts as background.
pub fn erode_inplane(mask: &MaskVolume, radius: usize) -> MaskVolume {
    if radius == 0 {
        return mask.clone();
    }
    let g = *mask.geometry();
    let [nx, ny, _] = g.dims;
    let r = radius as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
        .collect();
    let src = mask.data();
    MaskVolume::from_fn(g, |x, y, z| {
        if !src[g.index(x, y, z)] {
            return false;
        }
        offsets.iter().all(|&(dx, dy)| {
            let xx = x as isize + dx;
            let yy = y as isize + dy;
            xx >= 0 && yy >= 0 && xx < nx as isize && yy < ny as isize && src[g.index(xx as usize, yy as usize, z)]
        })
    })
}
