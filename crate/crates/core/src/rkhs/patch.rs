//! Per-patch model fit by ADMM.
//!
//! Unknowns are the kernel part in the kernel's eigenbasis, `Kd = Q a` with
//! `dᵀKd = aᵀΛ⁻¹a`, and the step weights `b`. Atoms whose step lines coincide
//! (same orientation, same projected offset) are merged, so `Ψ` has at most a few
//! columns per orientation and pixel row. ADMM splits `s = b` for the ℓ1 term
//! and `w = ∇(Kd + Ψb)` for the weighted total variation; the remaining
//! quadratic has a fixed matrix, inverted once per patch shape. The patch mean
//! is taken out before the fit and returned with the smooth part.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::{approx_heaviside, gradient_magnitude_2d, RkhsParams};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EdgeModelCoefficients {
    /// Kernel weights, one per pixel.
    pub d: Vec<f64>,
    /// Step weights indexed `i * N + j` for orientation `i` and pixel `j`.
    pub b: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct PatchSolution {
    pub coeffs: EdgeModelCoefficients,
    /// `|∇(Ψb)|` on the patch.
    pub edge: Vec<f64>,
    /// Smooth part `Kd` plus the patch mean.
    pub smooth: Vec<f64>,
    /// Step layer `Ψb`.
    pub steps: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Fraction of step weights above 1e-4 in magnitude.
    pub sparsity: f64,
    /// Objective after each inner iteration of the last outer pass (only when requested).
    pub objective_trace: Vec<f64>,
}

/// Matrices shared by every patch of one shape.
pub struct PatchOperator {
    w: usize,
    h: usize,
    n_orientations: usize,
    rank: usize,
    /// Eigenvalues of `K` kept in the basis.
    eigvals: Vec<f64>,
    /// `(orientation, representative pixel)` of each merged step atom.
    atoms: Vec<(usize, usize)>,
    /// `[Q | Ψ]`, one row per pixel.
    basis: DMatrix<f64>,
    /// Forward differences of the basis: x-differences for all pixels, then y.
    grad: Option<DMatrix<f64>>,
    h_inv: DMatrix<f64>,
    rho: f64,
}

impl PatchOperator {
    pub fn new(w: usize, h: usize, params: &RkhsParams) -> Result<Self> {
        params.validate()?;
        if w == 0 || h == 0 {
            return Err(Error::Param("empty patch".into()));
        }
        let n = w * h;
        let extent = (w.max(h) - 1).max(1) as f64;
        let sigma = params.sigma / extent;

        // Separable kernel: K = c · (Ey ⊗ Ex).
        let axis_eigen = |m: usize| {
            let e = DMatrix::from_fn(m, m, |i, j| {
                let d = (i as f64 - j as f64) / extent;
                (-d * d / (2.0 * sigma * sigma)).exp()
            });
            SymmetricEigen::new(e)
        };
        let ex = axis_eigen(w);
        let ey = axis_eigen(h);
        let c = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
        let mut pairs = Vec::new();
        let mut lmax = 0.0f64;
        for bi in 0..h {
            for ai in 0..w {
                let l = c * ey.eigenvalues[bi] * ex.eigenvalues[ai];
                lmax = lmax.max(l);
                pairs.push((l, ai, bi));
            }
        }
        pairs.retain(|&(l, _, _)| l > 0.0 && l > params.kernel_tol * lmax);
        pairs.sort_by(|p, q| q.0.total_cmp(&p.0).then(p.1.cmp(&q.1)).then(p.2.cmp(&q.2)));
        let rank = pairs.len();

        // One atom per distinct step line.
        let coords: Vec<[f64; 2]> = (0..n)
            .map(|j| [(j % w) as f64 / extent, (j / w) as f64 / extent])
            .collect();
        let mut atoms = Vec::new();
        let mut offsets = Vec::new();
        for i in 0..params.n_orientations {
            let theta = 2.0 * std::f64::consts::PI * i as f64 / params.n_orientations as f64;
            let nrm = [theta.cos(), theta.sin()];
            let mut seen: Vec<i64> = Vec::new();
            for (j, t) in coords.iter().enumerate() {
                let p = nrm[0] * t[0] + nrm[1] * t[1];
                let key = (p * 1e9).round() as i64;
                if !seen.contains(&key) {
                    seen.push(key);
                    atoms.push((i, j));
                    offsets.push((nrm, p));
                }
            }
        }
        let m = atoms.len();

        let mut basis = DMatrix::zeros(n, rank + m);
        for (col, &(_, ai, bi)) in pairs.iter().enumerate() {
            for y in 0..h {
                for x in 0..w {
                    basis[(y * w + x, col)] = ey.eigenvectors[(y, bi)] * ex.eigenvectors[(x, ai)];
                }
            }
        }
        for (k, &(nrm, p)) in offsets.iter().enumerate() {
            for (j, t) in coords.iter().enumerate() {
                basis[(j, rank + k)] = approx_heaviside(nrm[0] * t[0] + nrm[1] * t[1] - p, params.heaviside_eps);
            }
        }

        let rho = params.admm_rho;
        let grad = (params.nu_edge > 0.0).then(|| {
            let mut g = DMatrix::zeros(2 * n, rank + m);
            for col in 0..rank + m {
                for y in 0..h {
                    for x in 0..w {
                        let p = y * w + x;
                        if x + 1 < w {
                            g[(p, col)] = basis[(p + 1, col)] - basis[(p, col)];
                        }
                        if y + 1 < h {
                            g[(n + p, col)] = basis[(p + w, col)] - basis[(p, col)];
                        }
                    }
                }
            }
            g
        });

        let mut sys = basis.tr_mul(&basis);
        if let Some(g) = &grad {
            sys += g.tr_mul(g) * rho;
        }
        let eigvals: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        for (i, l) in eigvals.iter().enumerate() {
            sys[(i, i)] += 2.0 * params.gamma_smooth / l;
        }
        for k in 0..m {
            sys[(rank + k, rank + k)] += rho;
        }
        let h_inv = sys
            .cholesky()
            .ok_or_else(|| Error::Param("patch system is not positive definite".into()))?
            .inverse();

        Ok(PatchOperator {
            w,
            h,
            n_orientations: params.n_orientations,
            rank,
            eigvals,
            atoms,
            basis,
            grad,
            h_inv,
            rho,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.w, self.h)
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    fn steps_of(&self, s: &DVector<f64>) -> Vec<f64> {
        let psi = self.basis.columns(self.rank, self.atoms.len());
        (psi * s).as_slice().to_vec()
    }

    fn tv_weights(&self, s: &DVector<f64>, alpha: f64) -> Vec<f64> {
        gradient_magnitude_2d(&self.steps_of(s), self.w, self.h)
            .into_iter()
            .map(|e| 1.0 / (1.0 + alpha * e * e))
            .collect()
    }

    /// Fits one patch; `id` is reported on divergence.
    pub fn solve(
        &self,
        z: &[f64],
        params: &RkhsParams,
        id: (usize, usize, usize),
        trace: bool,
    ) -> Result<PatchSolution> {
        let n = self.w * self.h;
        if z.len() != n {
            return Err(Error::GeometryMismatch(format!(
                "patch has {} values, operator expects {n}",
                z.len()
            )));
        }
        let r = self.rank;
        let m = self.atoms.len();
        let rho = self.rho;
        let mean = z.iter().sum::<f64>() / n as f64;
        let zv = DVector::from_iterator(n, z.iter().map(|v| v - mean));
        let bz = self.basis.tr_mul(&zv);

        let mut x: DVector<f64> = DVector::zeros(r + m);
        let mut s: DVector<f64> = DVector::zeros(m);
        let mut ls: DVector<f64> = DVector::zeros(m);
        let tv = self.grad.is_some();
        let mut w = DVector::zeros(if tv { 2 * n } else { 0 });
        let mut lw = DVector::zeros(w.len());
        let mut gu = DVector::zeros(w.len());
        let mut rhs = DVector::zeros(r + m);
        let mut tmp = DVector::zeros(w.len());

        let mut iterations = 0;
        let mut residual = 0.0;
        let mut initial: Option<f64> = None;
        let mut history = Vec::new();
        let mut trace_out = Vec::new();
        let dim = ((m + w.len()) as f64).sqrt().max(1.0);

        for outer in 0..params.outer_iters {
            let weights = if tv {
                self.tv_weights(&s, params.tv_edge_alpha)
            } else {
                Vec::new()
            };
            let last = outer + 1 == params.outer_iters;
            for _ in 0..params.admm_iters {
                rhs.copy_from(&bz);
                for k in 0..m {
                    rhs[r + k] += rho * (s[k] - ls[k]);
                }
                if let Some(g) = &self.grad {
                    tmp.copy_from(&w);
                    tmp -= &lw;
                    rhs.gemv_tr(rho, g, &tmp, 1.0);
                }
                x.gemv(1.0, &self.h_inv, &rhs, 0.0);

                let mut primal = 0.0;
                let mut dual = 0.0;
                if let Some(g) = &self.grad {
                    gu.gemv(1.0, g, &x, 0.0);
                    for p in 0..n {
                        let vx = gu[p] + lw[p];
                        let vy = gu[n + p] + lw[n + p];
                        let mag = vx.hypot(vy);
                        let tau = params.nu_edge * weights[p] / rho;
                        let f = if mag > tau { 1.0 - tau / mag } else { 0.0 };
                        let (nx, ny) = (f * vx, f * vy);
                        dual += (nx - w[p]).powi(2) + (ny - w[n + p]).powi(2);
                        w[p] = nx;
                        w[n + p] = ny;
                        lw[p] += gu[p] - nx;
                        lw[n + p] += gu[n + p] - ny;
                        primal += (gu[p] - nx).powi(2) + (gu[n + p] - ny).powi(2);
                    }
                }
                let thr = params.alpha_l1 / rho;
                for k in 0..m {
                    let b = x[r + k];
                    let v = b + ls[k];
                    let ns = v.signum() * (v.abs() - thr).max(0.0);
                    dual += (ns - s[k]).powi(2);
                    s[k] = ns;
                    ls[k] += b - ns;
                    primal += (b - ns).powi(2);
                }
                let primal = primal.sqrt() / dim;
                let dual = rho * dual.sqrt() / dim;
                iterations += 1;
                residual = primal;
                history.push(primal);
                let init = *initial.get_or_insert(primal.max(1e-8));
                if primal > 1e3 * init {
                    return Err(Error::AdmmDiverged {
                        patch: id,
                        iteration: iterations,
                        trace: history,
                    });
                }
                if trace && last {
                    trace_out.push(self.objective(&zv, &x, &weights, params));
                }
                if primal < params.admm_tol && dual < params.admm_tol {
                    break;
                }
            }
        }

        let steps = self.steps_of(&s);
        let edge = gradient_magnitude_2d(&steps, self.w, self.h);
        let a = x.rows(0, r);
        let q = self.basis.columns(0, r);
        let smooth = (q * a).iter().map(|v| v + mean).collect();
        let mut scaled = a.clone_owned();
        for i in 0..r {
            scaled[i] /= self.eigvals[i];
        }
        let d = (q * scaled).as_slice().to_vec();
        let mut b = vec![0.0; self.n_orientations * n];
        for (k, &(i, j)) in self.atoms.iter().enumerate() {
            b[i * n + j] = s[k];
        }
        let sparsity = b.iter().filter(|v| v.abs() > 1e-4).count() as f64 / b.len() as f64;
        Ok(PatchSolution {
            coeffs: EdgeModelCoefficients { d, b },
            edge,
            smooth,
            steps,
            iterations,
            residual,
            sparsity,
            objective_trace: trace_out,
        })
    }

    fn objective(&self, z: &DVector<f64>, x: &DVector<f64>, weights: &[f64], params: &RkhsParams) -> f64 {
        let n = self.w * self.h;
        let r = self.rank;
        let u = &self.basis * x;
        let mut j = 0.5 * (z - &u).norm_squared();
        for i in 0..r {
            j += params.gamma_smooth * x[i] * x[i] / self.eigvals[i];
        }
        j += params.alpha_l1 * x.rows(r, self.atoms.len()).iter().map(|v| v.abs()).sum::<f64>();
        if let Some(g) = &self.grad {
            let gu = g * x;
            for p in 0..n {
                j += params.nu_edge * weights[p] * gu[p].hypot(gu[n + p]);
            }
        }
        j
    }
}

/// Fits a single `w × h` patch (row-major values).
pub fn solve_rkhs_patch(z: &[f64], w: usize, h: usize, params: &RkhsParams) -> Result<PatchSolution> {
    PatchOperator::new(w, h, params)?.solve(z, params, (0, 0, 0), false)
}
