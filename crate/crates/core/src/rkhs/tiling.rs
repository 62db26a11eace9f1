//! Slice-wise patch tiling with cosine-tapered, normalised blending.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::patch::PatchOperator;
use super::RkhsParams;
use crate::error::Result;
use crate::volume::ScalarVolume;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchDiagnostics {
    pub id: usize,
    pub slice: usize,
    pub x0: usize,
    pub y0: usize,
    pub iterations: usize,
    pub residual: f64,
    pub sparsity: f64,
}

#[derive(Clone, Debug)]
pub struct EdgeMap {
    /// Edge descriptor `|∇(Ψb)|` on the full grid.
    pub edges: ScalarVolume,
    pub diagnostics: Vec<PatchDiagnostics>,
}

/// Patch start positions along an axis of length `n`; the last patch is flush with the end.
pub fn patch_origins(n: usize, size: usize, overlap: usize) -> Vec<usize> {
    if n <= size {
        return vec![0];
    }
    let stride = size - overlap;
    let mut out = Vec::new();
    let mut o = 0;
    while o + size < n {
        out.push(o);
        o += stride;
    }
    out.push(n - size);
    out
}

fn taper(i: usize, len: usize, ramp: usize, left: bool, right: bool) -> f64 {
    let rise = |k: usize| {
        if ramp == 0 || k >= ramp {
            1.0
        } else {
            0.5 - 0.5 * (std::f64::consts::PI * (k as f64 + 0.5) / ramp as f64).cos()
        }
    };
    let mut w = 1.0;
    if left {
        w *= rise(i);
    }
    if right {
        w *= rise(len - 1 - i);
    }
    w
}

pub fn edge_map(z: &ScalarVolume, params: &RkhsParams) -> Result<EdgeMap> {
    edge_map_with_progress(z, params, &|_, _| {})
}

/// As [`edge_map`], calling `progress(done, total)` as patches finish.
pub fn edge_map_with_progress(
    z: &ScalarVolume,
    params: &RkhsParams,
    progress: &(dyn Fn(usize, usize) + Sync),
) -> Result<EdgeMap> {
    params.validate()?;
    let g = *z.geometry();
    let [nx, ny, nz] = g.dims;
    let pw = params.patch_size.min(nx);
    let ph = params.patch_size.min(ny);
    let op = PatchOperator::new(pw, ph, params)?;
    let xs = patch_origins(nx, params.patch_size, params.patch_overlap);
    let ys = patch_origins(ny, params.patch_size, params.patch_overlap);

    let mut items = Vec::with_capacity(nz * xs.len() * ys.len());
    for zz in 0..nz {
        for &y0 in &ys {
            for &x0 in &xs {
                items.push((zz, y0, x0));
            }
        }
    }
    let total = items.len();
    let done = std::sync::atomic::AtomicUsize::new(0);
    let results: Vec<Result<(Vec<f64>, PatchDiagnostics)>> = items
        .par_iter()
        .enumerate()
        .map(|(id, &(zz, y0, x0))| {
            let mut patch = Vec::with_capacity(pw * ph);
            for y in y0..y0 + ph {
                let row = g.index(x0, y, zz);
                patch.extend_from_slice(&z.data()[row..row + pw]);
            }
            let (lo, hi) = patch
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let out = if hi - lo <= 1e-12 * hi.abs().max(1.0) {
                (
                    vec![0.0; pw * ph],
                    PatchDiagnostics {
                        id,
                        slice: zz,
                        x0,
                        y0,
                        iterations: 0,
                        residual: 0.0,
                        sparsity: 0.0,
                    },
                )
            } else {
                let sol = op.solve(&patch, params, (zz, y0, x0), false)?;
                (
                    sol.edge,
                    PatchDiagnostics {
                        id,
                        slice: zz,
                        x0,
                        y0,
                        iterations: sol.iterations,
                        residual: sol.residual,
                        sparsity: sol.sparsity,
                    },
                )
            };
            let k = done.fetch_add(1, std::sync::atomic::Ordering::Relaxed) + 1;
            progress(k, total);
            Ok(out)
        })
        .collect();

    let mut acc = vec![0.0; g.len()];
    let mut wsum = vec![0.0; g.len()];
    let mut diagnostics = Vec::with_capacity(total);
    for (res, &(zz, y0, x0)) in results.into_iter().zip(&items) {
        let (edge, diag) = res?;
        for j in 0..ph {
            let wy = taper(j, ph, params.patch_overlap, y0 > 0, y0 + ph < ny);
            for i in 0..pw {
                let wx = taper(i, pw, params.patch_overlap, x0 > 0, x0 + pw < nx);
                let k = g.index(x0 + i, y0 + j, zz);
                acc[k] += wx * wy * edge[j * pw + i];
                wsum[k] += wx * wy;
            }
        }
        diagnostics.push(diag);
    }
    let data = acc.iter().zip(&wsum).map(|(a, w)| (a / w).max(0.0)).collect();
    Ok(EdgeMap {
        edges: ScalarVolume::new(g, data)?,
        diagnostics,
    })
}
