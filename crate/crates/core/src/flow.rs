//! Level-set flow: `φ_t = (F + q·κ)·|∇φ|` with a static force
//! `F = g − γ_d·D_P − η_i·I`, one field per muscle group.
//!
//! φ is interior-positive and is clamped to `[−1, 1]` after every step instead
//! of being reinitialised. With that orientation `κ = div(∇φ/|∇φ|)` is negative
//! on convex fronts, so `q > 0` shrinks protrusions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::median_inplane;
use crate::volume::{LabelVolume, MaskVolume, ScalarVolume, VolumeGeometry};

const CURVATURE_EPS: f64 = 1e-8;

/// Largest `|κ|` a unit-spacing grid resolves; the Euler step clamps to it.
const CURVATURE_BOUND: f64 = 3.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub gamma_dist: f64,
    pub eta_int: f64,
    /// Weight of intensities brighter than the seed mean.
    pub psi_asym: f64,
    /// Contrast of the edge-stopping function `g = 1/(1 + α_e·E)`.
    pub alpha_edge: f64,
    pub q_curv: f64,
    pub step: f64,
    pub median_window: usize,
    pub max_iter: usize,
    pub stop_flip_fraction: f64,
    pub stop_window: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            gamma_dist: 7.0,
            eta_int: 7.0,
            psi_asym: 0.5,
            alpha_edge: 20.0,
            q_curv: 0.5,
            step: 0.1,
            median_window: 3,
            max_iter: 2000,
            stop_flip_fraction: 1e-4,
            stop_window: 10,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.psi_asym > 0.0 && self.psi_asym < 1.0) {
            return Err(Error::Param(format!(
                "psi_asym must lie in (0, 1), got {}",
                self.psi_asym
            )));
        }
        if !(self.gamma_dist >= 0.0 && self.eta_int >= 0.0 && self.q_curv >= 0.0) {
            return Err(Error::Param(
                "gamma_dist, eta_int and q_curv must be non-negative".into(),
            ));
        }
        if !(self.alpha_edge > 0.0) {
            return Err(Error::Param(format!(
                "alpha_edge must be positive, got {}",
                self.alpha_edge
            )));
        }
        if self.median_window.is_multiple_of(2) {
            return Err(Error::Param(format!(
                "median window must be odd, got {}",
                self.median_window
            )));
        }
        if self.stop_window == 0 || !(self.stop_flip_fraction >= 0.0) {
            return Err(Error::Param(
                "stop_window must be positive and stop_flip_fraction non-negative".into(),
            ));
        }
        let limit = stable_step_limit(1.0, self.q_curv);
        if !(self.step > 0.0 && self.step <= limit) {
            return Err(Error::Param(format!("step {} outside (0, {limit}]", self.step)));
        }
        Ok(())
    }
}

/// Largest stable Euler step for forces bounded by `max_force`, with spacing scaled to unit minimum.
pub fn stable_step_limit(max_force: f64, q_curv: f64) -> f64 {
    0.5 / (max_force.abs() + q_curv * CURVATURE_BOUND)
}

#[derive(Clone, Debug)]
pub struct LevelSetField {
    pub group: u8,
    pub phi: ScalarVolume,
}

pub fn init_phi(markers: &MaskVolume, group: u8) -> Result<LevelSetField> {
    if markers.is_empty_mask() {
        return Err(Error::Empty("marker mask"));
    }
    let data = markers.data().iter().map(|&m| if m { 1.0 } else { -1.0 }).collect();
    Ok(LevelSetField {
        group,
        phi: ScalarVolume::new(*markers.geometry(), data)?,
    })
}

/// Seed mean `ξ` and the asymmetric deviation `I`.
pub fn intensity_fit(z: &ScalarVolume, seeds: &MaskVolume, psi_asym: f64) -> Result<(f64, ScalarVolume)> {
    if !z.geometry().same_grid(seeds.geometry()) {
        return Err(Error::GeometryMismatch("intensity and seed grids differ".into()));
    }
    let (sum, n) = z
        .data()
        .iter()
        .zip(seeds.data())
        .filter(|(_, &s)| s)
        .fold((0.0, 0usize), |(a, n), (&v, _)| (a + v, n + 1));
    if n == 0 {
        return Err(Error::Empty("seed mask"));
    }
    let xi = sum / n as f64;
    let i = z.map(|v| {
        let d = v - xi;
        if d < 0.0 {
            -d
        } else {
            psi_asym * d
        }
    });
    Ok((xi, i))
}

pub fn assemble_force(
    g: &ScalarVolume,
    dp: &ScalarVolume,
    i: &ScalarVolume,
    params: &FlowParams,
) -> Result<ScalarVolume> {
    let geo = g.geometry();
    if !geo.same_grid(dp.geometry()) || !geo.same_grid(i.geometry()) {
        return Err(Error::GeometryMismatch("force inputs do not share a grid".into()));
    }
    let raw: Vec<f64> = g
        .data()
        .iter()
        .zip(dp.data())
        .zip(i.data())
        .map(|((&g, &d), &i)| (g - params.gamma_dist * d - params.eta_int * i).clamp(-1.0, 1.0))
        .collect();
    let f = ScalarVolume::new(*geo, raw)?;
    Ok(median_inplane(&f, params.median_window.max(1)))
}

/// Spacing scaled so the smallest axis is 1.
fn unit_spacing(g: &VolumeGeometry) -> [f64; 3] {
    let sp = g.spacing();
    let m = sp[0].min(sp[1]).min(sp[2]);
    [sp[0] / m, sp[1] / m, sp[2] / m]
}

struct Stencil<'a> {
    data: &'a [f64],
    dims: [usize; 3],
    h: [f64; 3],
}

impl Stencil<'_> {
    #[inline]
    fn at(&self, x: isize, y: isize, z: isize) -> f64 {
        let [nx, ny, nz] = self.dims;
        let x = x.clamp(0, nx as isize - 1) as usize;
        let y = y.clamp(0, ny as isize - 1) as usize;
        let z = z.clamp(0, nz as isize - 1) as usize;
        self.data[(z * ny + y) * nx + x]
    }

    fn curvature(&self, x: usize, y: usize, z: usize) -> f64 {
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let [hx, hy, hz] = self.h;
        let c = self.at(x, y, z);
        let (xp, xm) = (self.at(x + 1, y, z), self.at(x - 1, y, z));
        let (yp, ym) = (self.at(x, y + 1, z), self.at(x, y - 1, z));
        let (zp, zm) = (self.at(x, y, z + 1), self.at(x, y, z - 1));
        let px = (xp - xm) / (2.0 * hx);
        let py = (yp - ym) / (2.0 * hy);
        let pz = (zp - zm) / (2.0 * hz);
        let pxx = (xp - 2.0 * c + xm) / (hx * hx);
        let pyy = (yp - 2.0 * c + ym) / (hy * hy);
        let pzz = (zp - 2.0 * c + zm) / (hz * hz);
        let mixed = |a: [isize; 3], b: [isize; 3], ha: f64, hb: f64| {
            let p = |sa: isize, sb: isize| {
                self.at(
                    x + sa * a[0] + sb * b[0],
                    y + sa * a[1] + sb * b[1],
                    z + sa * a[2] + sb * b[2],
                )
            };
            (p(1, 1) - p(1, -1) - p(-1, 1) + p(-1, -1)) / (4.0 * ha * hb)
        };
        let pxy = mixed([1, 0, 0], [0, 1, 0], hx, hy);
        let pxz = mixed([1, 0, 0], [0, 0, 1], hx, hz);
        let pyz = mixed([0, 1, 0], [0, 0, 1], hy, hz);
        let num = pxx * (py * py + pz * pz) + pyy * (px * px + pz * pz) + pzz * (px * px + py * py)
            - 2.0 * (px * py * pxy + px * pz * pxz + py * pz * pyz);
        let g2 = px * px + py * py + pz * pz;
        num / (g2 + CURVATURE_EPS).powf(1.5)
    }

    /// Godunov upwind `|∇φ|` for a front moving with the sign of `speed`.
    fn upwind_gradient(&self, x: usize, y: usize, z: usize, speed: f64) -> f64 {
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let c = self.at(x, y, z);
        let axes = [
            (self.at(x - 1, y, z), self.at(x + 1, y, z), self.h[0]),
            (self.at(x, y - 1, z), self.at(x, y + 1, z), self.h[1]),
            (self.at(x, y, z - 1), self.at(x, y, z + 1), self.h[2]),
        ];
        let mut s = 0.0;
        for (m, p, h) in axes {
            let back = (c - m) / h;
            let fwd = (p - c) / h;
            // φ grows where speed > 0, so information flows from larger values.
            let (a, b) = if speed > 0.0 {
                (back.min(0.0), fwd.max(0.0))
            } else {
                (back.max(0.0), fwd.min(0.0))
            };
            s += a * a + b * b;
        }
        s.sqrt()
    }

    /// All six face neighbours equal the centre; the update is then exactly zero.
    fn frozen(&self, x: usize, y: usize, z: usize) -> bool {
        let (x, y, z) = (x as isize, y as isize, z as isize);
        let c = self.at(x, y, z);
        self.at(x - 1, y, z) == c
            && self.at(x + 1, y, z) == c
            && self.at(x, y - 1, z) == c
            && self.at(x, y + 1, z) == c
            && self.at(x, y, z - 1) == c
            && self.at(x, y, z + 1) == c
    }
}

/// `div(∇φ/|∇φ|)` with central differences on the unit-scaled grid.
pub fn curvature(phi: &ScalarVolume) -> ScalarVolume {
    let g = *phi.geometry();
    let st = Stencil {
        data: phi.data(),
        dims: g.dims,
        h: unit_spacing(&g),
    };
    ScalarVolume::from_fn(g, |x, y, z| st.curvature(x, y, z))
}

#[derive(Clone, Debug)]
pub struct Evolution {
    pub field: LevelSetField,
    pub iterations: usize,
    pub converged: bool,
    /// Sign flips of φ at each iteration.
    pub flips: Vec<usize>,
}

pub fn evolve(phi0: &LevelSetField, force: &ScalarVolume, params: &FlowParams) -> Result<Evolution> {
    evolve_with_progress(phi0, force, params, &|_, _| {})
}

/// As [`evolve`], calling `progress(iteration, max_iter)` after every step.
pub fn evolve_with_progress(
    phi0: &LevelSetField,
    force: &ScalarVolume,
    params: &FlowParams,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<Evolution> {
    params.validate()?;
    let g = *phi0.phi.geometry();
    if !g.same_grid(force.geometry()) {
        return Err(Error::GeometryMismatch("level set and force grids differ".into()));
    }
    let max_f = force.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let limit = stable_step_limit(max_f, params.q_curv);
    if params.step > limit {
        return Err(Error::Param(format!(
            "step {} exceeds stability limit {limit}",
            params.step
        )));
    }
    let [nx, ny, _] = g.dims;
    let h = unit_spacing(&g);
    let f = force.data();
    let mut cur = phi0.phi.data().to_vec();
    let mut next = cur.clone();
    let threshold = params.stop_flip_fraction * g.len() as f64;
    let mut flips = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < params.max_iter {
        let st = Stencil {
            data: &cur,
            dims: g.dims,
            h,
        };
        let flipped: usize = next
            .par_chunks_mut(nx * ny)
            .enumerate()
            .map(|(z, out)| {
                let mut n = 0;
                for y in 0..ny {
                    for x in 0..nx {
                        let k = y * nx + x;
                        let idx = z * nx * ny + k;
                        let old = st.data[idx];
                        if st.frozen(x, y, z) {
                            out[k] = old;
                            continue;
                        }
                        let kappa = st.curvature(x, y, z).clamp(-CURVATURE_BOUND, CURVATURE_BOUND);
                        let speed = f[idx] + params.q_curv * kappa;
                        let grad = st.upwind_gradient(x, y, z, speed);
                        let new = (old + params.step * speed * grad).clamp(-1.0, 1.0);
                        if (new > 0.0) != (old > 0.0) {
                            n += 1;
                        }
                        out[k] = new;
                    }
                }
                n
            })
            .sum();
        std::mem::swap(&mut cur, &mut next);
        iterations += 1;
        flips.push(flipped);
        progress(iterations, params.max_iter);
        if flips.len() >= params.stop_window {
            let recent: usize = flips[flips.len() - params.stop_window..].iter().sum();
            if (recent as f64) < threshold {
                converged = true;
                break;
            }
        }
    }
    if !converged {
        log::warn!(
            "group {} level set did not settle within {} iterations",
            phi0.group,
            params.max_iter
        );
    }
    Ok(Evolution {
        field: LevelSetField {
            group: phi0.group,
            phi: ScalarVolume::new(g, cur)?,
        },
        iterations,
        converged,
        flips,
    })
}

#[derive(Clone, Debug)]
pub struct GroupSegmentation {
    pub group: u8,
    pub mask: MaskVolume,
    pub iterations: usize,
    pub converged: bool,
    /// Dice against a reference, when one was supplied.
    pub dice: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SegmentationResult {
    pub groups: Vec<GroupSegmentation>,
    /// Largest φ wins where groups overlap; exact ties go to the lowest group id.
    pub labels: LabelVolume,
}

impl SegmentationResult {
    pub fn group(&self, id: u8) -> Option<&GroupSegmentation> {
        self.groups.iter().find(|g| g.group == id)
    }
}

pub fn extract_segmentation(runs: &[Evolution]) -> Result<SegmentationResult> {
    let first = runs.first().ok_or(Error::Empty("level set list"))?;
    let geo = *first.field.phi.geometry();
    if runs.iter().any(|r| !r.field.phi.geometry().same_grid(&geo)) {
        return Err(Error::GeometryMismatch("level sets do not share a grid".into()));
    }
    let mut order: Vec<&Evolution> = runs.iter().collect();
    order.sort_by_key(|r| r.field.group);
    let mut labels = vec![0u8; geo.len()];
    for (k, l) in labels.iter_mut().enumerate() {
        let mut best = 0.0;
        for r in &order {
            let v = r.field.phi.data()[k];
            if v > best {
                best = v;
                *l = r.field.group;
            }
        }
    }
    let groups = order
        .iter()
        .map(|r| {
            Ok(GroupSegmentation {
                group: r.field.group,
                mask: MaskVolume::new(geo, r.field.phi.data().iter().map(|&v| v > 0.0).collect())?,
                iterations: r.iterations,
                converged: r.converged,
                dice: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ids = order.iter().map(|r| r.field.group).collect();
    Ok(SegmentationResult {
        groups,
        labels: LabelVolume::new(geo, labels, ids)?,
    })
}
