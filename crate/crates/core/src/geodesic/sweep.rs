//! Fast sweeping solver for `|∇D| = f` with `D = 0` on a source set.

use crate::error::{Error, Result};
use crate::volume::{MaskVolume, ScalarVolume};

const MAX_ROUNDS: usize = 20;
const REL_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct DistanceField {
    pub distance: ScalarVolume,
    /// Completed rounds of the 8 sweep orderings.
    pub rounds: usize,
    pub converged: bool,
}

/// Godunov update from the smallest upwind value per axis.
#[inline]
fn local_solve(mut a: [(f64, f64); 3], f: f64) -> f64 {
    // (value, spacing) sorted by value; unreachable axes carry +inf.
    a.sort_by(|p, q| p.0.total_cmp(&q.0));
    let (a1, h1) = a[0];
    let mut u = a1 + f * h1;
    if u <= a[1].0 {
        return u;
    }
    // Two axes: (u-a1)²/h1² + (u-a2)²/h2² = f².
    let (a2, h2) = a[1];
    let (w1, w2) = (1.0 / (h1 * h1), 1.0 / (h2 * h2));
    let sw = w1 + w2;
    let b = w1 * a1 + w2 * a2;
    let c = w1 * a1 * a1 + w2 * a2 * a2 - f * f;
    let disc = b * b - sw * c;
    u = (b + disc.max(0.0).sqrt()) / sw;
    if u <= a[2].0 {
        return u;
    }
    let (a3, h3) = a[2];
    let w3 = 1.0 / (h3 * h3);
    let sw = sw + w3;
    let b = b + w3 * a3;
    let c = c + w3 * a3 * a3;
    let disc = b * b - sw * c;
    (b + disc.max(0.0).sqrt()) / sw
}

/// Seeds the 26-neighbour ring of the source with straight-segment costs
/// (length × mean speed). The first-order update overshoots badly right next
/// to a point source; the sweeps can only lower these values.
fn init_ring(d: &mut [f64], src: &[bool], speed: &[f64], dims: [usize; 3], h: [f64; 3]) {
    let [nx, ny, nz] = dims;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let s = (z * ny + y) * nx + x;
                if !src[s] {
                    continue;
                }
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                            if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                                continue;
                            }
                            let k = ((zz as usize * ny) + yy as usize) * nx + xx as usize;
                            if src[k] {
                                continue;
                            }
                            let len =
                                ((dx as f64 * h[0]).powi(2) + (dy as f64 * h[1]).powi(2) + (dz as f64 * h[2]).powi(2))
                                    .sqrt();
                            d[k] = d[k].min(0.5 * (speed[s] + speed[k]) * len);
                        }
                    }
                }
            }
        }
    }
}

pub fn fast_sweep(source: &MaskVolume, f: &ScalarVolume) -> Result<DistanceField> {
    source.geometry().ensure_same(f.geometry(), "source vs speed")?;
    if source.is_empty_mask() {
        return Err(Error::Empty("source set"));
    }
    if let Some(k) = f.data().iter().position(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Param(format!("speed must be positive and finite (voxel {k})")));
    }
    let g = *f.geometry();
    let [nx, ny, nz] = g.dims;
    let h = g.spacing();
    let (sx, sy) = (1usize, nx);
    let sz = nx * ny;
    let src = source.data();
    let speed = f.data();
    let mut d: Vec<f64> = src.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    init_ring(&mut d, src, speed, g.dims, h);

    let z_dirs: &[bool] = if nz == 1 { &[true] } else { &[true, false] };
    let mut rounds = 0;
    let mut converged = false;
    while rounds < MAX_ROUNDS {
        let mut max_change = 0.0f64;
        let mut newly_reached = false;
        for &zf in z_dirs {
            for yf in [true, false] {
                for xf in [true, false] {
                    for zi in 0..nz {
                        let z = if zf { zi } else { nz - 1 - zi };
                        for yi in 0..ny {
                            let y = if yf { yi } else { ny - 1 - yi };
                            let row = z * sz + y * sy;
                            for xi in 0..nx {
                                let x = if xf { xi } else { nx - 1 - xi };
                                let k = row + x;
                                if src[k] {
                                    continue;
                                }
                                let ax = {
                                    let l = if x > 0 { d[k - sx] } else { f64::INFINITY };
                                    let r = if x + 1 < nx { d[k + sx] } else { f64::INFINITY };
                                    l.min(r)
                                };
                                let ay = {
                                    let l = if y > 0 { d[k - sy] } else { f64::INFINITY };
                                    let r = if y + 1 < ny { d[k + sy] } else { f64::INFINITY };
                                    l.min(r)
                                };
                                let az = {
                                    let l = if z > 0 { d[k - sz] } else { f64::INFINITY };
                                    let r = if z + 1 < nz { d[k + sz] } else { f64::INFINITY };
                                    l.min(r)
                                };
                                if ax.min(ay).min(az) == f64::INFINITY {
                                    continue;
                                }
                                let cand = local_solve([(ax, h[0]), (ay, h[1]), (az, h[2])], speed[k]);
                                if cand < d[k] {
                                    if d[k] == f64::INFINITY {
                                        newly_reached = true;
                                    } else {
                                        max_change = max_change.max(d[k] - cand);
                                    }
                                    d[k] = cand;
                                }
                            }
                        }
                    }
                }
            }
        }
        rounds += 1;
        let dmax = d.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
        if !newly_reached && max_change <= REL_TOL * dmax {
            converged = true;
            break;
        }
    }
    // Voxels never reached (cannot happen on a connected grid) are capped at the maximum.
    let dmax = d.iter().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    d.iter_mut().filter(|v| !v.is_finite()).for_each(|v| *v = dmax);
    Ok(DistanceField {
        distance: ScalarVolume::new(g, d)?,
        rounds,
        converged,
    })
}
