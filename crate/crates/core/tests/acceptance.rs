//! Acceptance suite. Every criterion prints one `PASS`/`FAIL` line; the test
//! fails at the end if any criterion failed.
//!
//! Run with `cargo test -p geoflow-core --test acceptance -- --nocapture`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use geoflow_core::flow::{assemble_force, curvature, evolve, FlowParams, LevelSetField};
use geoflow_core::geodesic::{fast_sweep, penalty_value, PenaltyParams};
use geoflow_core::metrics::dice;
use geoflow_core::pbcfcm::{
    build_masks, estimate_priors, initial_state, pbcfcm_objective, pbcfcm_step, run_pbcfcm, update_centroids,
    update_memberships, ClassPriorField, FuzzyState, Neighborhood, PbcfcmParams,
};
use geoflow_core::phantom::{
    default_annotated_slices, generate_phantom, AutoAnnotationParams, PhantomParams, TISSUE_BACKGROUND,
};
use geoflow_core::pipeline::{
    distance_stage, flow_stage, run_pipeline, write_phantom_case, NoProgress, PipelineConfig,
};
use geoflow_core::rkhs::{gaussian_kernel, solve_rkhs_patch, RkhsParams};
use geoflow_core::volume::resample;
use geoflow_core::{AnnotationKind, AnnotationSet, MaskVolume, ScalarVolume, VolumeGeometry};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Box<dyn Fn() -> Outcome>);

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn all(parts: Vec<Outcome>) -> Outcome {
    let ok = parts.iter().all(|p| p.is_ok());
    let text = parts
        .into_iter()
        .map(|p| match p {
            Ok(s) => s,
            Err(s) => format!("[failed] {s}"),
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, text)
}

// ---------------------------------------------------------------- eikonal

fn eikonal_accuracy() -> Outcome {
    let n = 101;
    let g = VolumeGeometry::new([n, n, 1], [n as f64, n as f64, 1.0]).unwrap();
    let mut src = MaskVolume::empty(g);
    src.data_mut()[g.index(50, 50, 0)] = true;
    let f = ScalarVolume::filled(g, 1.0);
    let t = Instant::now();
    let d = fast_sweep(&src, &f).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let mut worst: f64 = 0.0;
    for y in 0..n {
        for x in 0..n {
            let exact = ((x as f64 - 50.0).powi(2) + (y as f64 - 50.0).powi(2)).sqrt();
            worst = worst.max((d.distance.get(x, y, 0) - exact).abs());
        }
    }

    let g3 = VolumeGeometry::new([33, 33, 33], [33.0, 33.0, 49.5]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let f3 = ScalarVolume::from_fn(g3, |_, _, _| rng.random_range(0.2..3.0));
    let mut s3 = MaskVolume::empty(g3);
    s3.data_mut()[g3.index(5, 20, 9)] = true;
    s3.data_mut()[g3.index(30, 2, 30)] = true;
    let base = fast_sweep(&s3, &f3).unwrap();
    let mut homog: f64 = 0.0;
    for c in [0.37, 2.5] {
        let scaled = fast_sweep(&s3, &f3.map(|v| c * v)).unwrap();
        for (a, b) in scaled.distance.data().iter().zip(base.distance.data()) {
            homog = homog.max((a - c * b).abs());
        }
    }
    all(vec![
        check(worst <= 2.0, format!("max |D - euclid| = {worst:.3} h (<= 2 h)")),
        check(elapsed < 1.0, format!("101x101 in {elapsed:.3} s (< 1 s)")),
        check(
            homog <= 1e-9,
            format!("homogeneity error {homog:.2e} on 33^3 (<= 1e-9)"),
        ),
    ])
}

#[derive(PartialEq)]
struct Node(f64, usize);

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

impl Ord for Node {
    fn cmp(&self, o: &Self) -> Ordering {
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

/// Shortest paths on the 26-neighbour grid graph, edge weight = mean speed × edge length.
fn grid_dijkstra(f: &ScalarVolume, source: usize) -> Vec<f64> {
    let g = *f.geometry();
    let sp = g.spacing();
    let [nx, ny, nz] = g.dims;
    let mut dist = vec![f64::INFINITY; g.len()];
    let mut heap = BinaryHeap::new();
    dist[source] = 0.0;
    heap.push(Node(0.0, source));
    while let Some(Node(d, k)) = heap.pop() {
        if d > dist[k] {
            continue;
        }
        let [x, y, z] = g.coords(k);
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    if dx == 0 && dy == 0 && dz == 0 {
                        continue;
                    }
                    let (xx, yy, zz) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as i64 || yy >= ny as i64 || zz >= nz as i64 {
                        continue;
                    }
                    let j = g.index(xx as usize, yy as usize, zz as usize);
                    let len = ((dx as f64 * sp[0]).powi(2) + (dy as f64 * sp[1]).powi(2) + (dz as f64 * sp[2]).powi(2))
                        .sqrt();
                    let nd = d + 0.5 * (f.data()[k] + f.data()[j]) * len;
                    if nd < dist[j] {
                        dist[j] = nd;
                        heap.push(Node(nd, j));
                    }
                }
            }
        }
    }
    dist
}

fn eikonal_bracketing() -> Outcome {
    let g = VolumeGeometry::new([9, 9, 5], [9.0, 9.0, 5.0]).unwrap();
    let mut lo = f64::INFINITY;
    let mut hi: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(1.0..2.0));
        let s = g.index(rng.random_range(0..9), rng.random_range(0..9), rng.random_range(0..5));
        let mut src = MaskVolume::empty(g);
        src.data_mut()[s] = true;
        let d = fast_sweep(&src, &f).unwrap();
        let oracle = grid_dijkstra(&f, s);
        for (k, (&a, &b)) in d.distance.data().iter().zip(&oracle).enumerate() {
            if k == s {
                continue;
            }
            lo = lo.min(a / b);
            hi = hi.max(a / b);
        }
    }
    check(
        lo >= 0.5 && hi <= 1.5,
        format!("D / shortest-path in [{lo:.3}, {hi:.3}] over 20 random 9x9x5 fields, f in [1, 2) (within [0.5, 1.5])"),
    )
}

// ---------------------------------------------------------------- pbcfcm

fn random_instance(rng: &mut ChaCha8Rng) -> (ScalarVolume, ClassPriorField, FuzzyState, PbcfcmParams) {
    let g = VolumeGeometry::new([4, 4, 4], [4.0, 4.0, 8.0]).unwrap();
    let c = rng.random_range(2..=4);
    let y = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(0.0..1.0));
    let p: Vec<f64> = (0..g.len() * c).map(|_| rng.random_range(0.05..1.0)).collect();
    let priors = ClassPriorField::new(g, c, p).unwrap();
    let mut u: Vec<f64> = (0..g.len() * c).map(|_| rng.random_range(0.01..1.0)).collect();
    for chunk in u.chunks_mut(c) {
        let s: f64 = chunk.iter().sum();
        chunk.iter_mut().for_each(|x| *x /= s);
    }
    let state = FuzzyState {
        u,
        v: (0..c).map(|_| rng.random_range(0.0..1.0)).collect(),
        bias: ScalarVolume::from_fn(g, |_, _, _| rng.random_range(-0.1..0.1)),
    };
    let params = PbcfcmParams {
        n_clusters: c,
        fuzziness: rng.random_range(1.5..3.0),
        neighbor_weight: rng.random_range(0.0..1.0),
        neighborhood: if rng.random_bool(0.5) {
            Neighborhood::Six
        } else {
            Neighborhood::InPlane8
        },
        bias_smoothing_mm: None,
        ..PbcfcmParams::default()
    };
    (y, priors, state, params)
}

fn pbcfcm_descent() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst_u = f64::NEG_INFINITY;
    let mut worst_v = f64::NEG_INFINITY;
    for _ in 0..100 {
        let (y, priors, mut state, params) = random_instance(&mut rng);
        let j0 = pbcfcm_objective(&y, &state, &priors, &params).unwrap();
        update_memberships(&y, &mut state, &priors, &params).unwrap();
        let j1 = pbcfcm_objective(&y, &state, &priors, &params).unwrap();
        update_centroids(&y, &mut state, &priors, &params).unwrap();
        let j2 = pbcfcm_objective(&y, &state, &priors, &params).unwrap();
        worst_u = worst_u.max(j1 - j0);
        worst_v = worst_v.max(j2 - j1);
    }
    let reduction = uniform_prior_reduction();
    all(vec![
        check(
            worst_u <= 1e-8 && worst_v <= 1e-8,
            format!(
                "largest objective increase: u-step {worst_u:.2e}, v-step {worst_v:.2e} over 100 instances (<= 1e-8)"
            ),
        ),
        reduction,
    ])
}

/// Plain neighbourhood-regularised fuzzy C-means with bias, written without priors.
struct PlainFcm {
    geometry: VolumeGeometry,
    hood: Vec<[isize; 3]>,
    alpha: f64,
    q: f64,
}

impl PlainFcm {
    fn neighbours(&self, k: usize) -> Vec<usize> {
        let [nx, ny, nz] = self.geometry.dims;
        let [x, y, z] = self.geometry.coords(k);
        self.hood
            .iter()
            .filter_map(|o| {
                let (a, b, c) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                (a >= 0 && b >= 0 && c >= 0 && a < nx as isize && b < ny as isize && c < nz as isize)
                    .then(|| self.geometry.index(a as usize, b as usize, c as usize))
            })
            .collect()
    }

    fn step(&self, y: &[f64], u: &mut [f64], v: &mut [f64], bias: &mut [f64]) {
        let n = y.len();
        let c = v.len();
        let nr = self.hood.len() as f64;
        let e: Vec<f64> = (0..n).map(|k| y[k] - bias[k]).collect();
        let dist = |k: usize, vi: f64| {
            let own = (e[k] - vi).powi(2);
            let nb: f64 = self.neighbours(k).iter().map(|&r| (e[r] - vi).powi(2)).sum();
            own + self.alpha / nr * nb
        };
        for k in 0..n {
            let d: Vec<f64> = (0..c).map(|i| dist(k, v[i])).collect();
            for i in 0..c {
                let s: f64 = (0..c).map(|j| (d[i] / d[j]).powf(1.0 / (self.q - 1.0))).sum();
                u[k * c + i] = 1.0 / s;
            }
        }
        for i in 0..c {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..n {
                let uq = u[k * c + i].powf(self.q);
                let nb = self.neighbours(k);
                let nbsum: f64 = nb.iter().map(|&r| e[r]).sum();
                num += uq * (e[k] + self.alpha / nr * nbsum);
                den += uq * (1.0 + self.alpha / nr * nb.len() as f64);
            }
            v[i] = num / den;
        }
        for k in 0..n {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..c {
                let uq = u[k * c + i].powf(self.q);
                num += uq * v[i];
                den += uq;
            }
            bias[k] = y[k] - num / den;
        }
        let mean = bias.iter().sum::<f64>() / n as f64;
        bias.iter_mut().for_each(|b| *b -= mean);
        v.iter_mut().for_each(|x| *x += mean);
    }
}

fn offsets(hood: Neighborhood) -> Vec<[isize; 3]> {
    let mut out = Vec::new();
    for dz in -1isize..=1 {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let n = dx.abs() + dy.abs() + dz.abs();
                let keep = match hood {
                    Neighborhood::Six => n == 1,
                    Neighborhood::InPlane8 => dz == 0 && n > 0,
                };
                if keep {
                    out.push([dx, dy, dz]);
                }
            }
        }
    }
    out
}

fn uniform_prior_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for hood in [Neighborhood::Six, Neighborhood::InPlane8] {
        for _ in 0..5 {
            let g = VolumeGeometry::new([4, 4, 4], [4.0, 4.0, 4.0]).unwrap();
            let y = ScalarVolume::from_fn(g, |x, _, _| if x < 2 { 0.2 } else { 0.8 } + rng.random_range(-0.1..0.1));
            let params = PbcfcmParams {
                n_clusters: 3,
                neighborhood: hood,
                neighbor_weight: 0.4,
                bias_smoothing_mm: None,
                ..PbcfcmParams::default()
            };
            let priors = ClassPriorField::new(g, 3, vec![1.0; g.len() * 3]).unwrap();
            let mut state = initial_state(&y, &priors, &params).unwrap();
            let plain = PlainFcm {
                geometry: g,
                hood: offsets(hood),
                alpha: params.neighbor_weight,
                q: params.fuzziness,
            };
            let (mut u, mut v, mut b) = (state.u.clone(), state.v.clone(), state.bias.data().to_vec());
            for _ in 0..10 {
                state = pbcfcm_step(&y, &state, &priors, &params).unwrap();
                plain.step(y.data(), &mut u, &mut v, &mut b);
                for (a, o) in state.u.iter().zip(&u) {
                    worst = worst.max((a - o).abs());
                }
                for (a, o) in state.v.iter().zip(&v) {
                    worst = worst.max((a - o).abs());
                }
                for (a, o) in state.bias.data().iter().zip(&b) {
                    worst = worst.max((a - o).abs());
                }
            }
        }
    }
    check(
        worst <= 1e-8,
        format!("unit priors vs prior-free FCM: max deviation {worst:.2e} (<= 1e-8)"),
    )
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

fn bias_recovery() -> Outcome {
    let phantom = PhantomParams::default();
    let bundle = generate_phantom(&phantom).unwrap();
    let t = Instant::now();
    let params = PbcfcmParams::default();
    let ff = resample(&bundle.fat_fraction_like, bundle.t1_like.geometry()).unwrap();
    let masks = build_masks(&bundle.t1_like, &ff, &params).unwrap();
    let priors = estimate_priors(&masks, params.prior_confidence).unwrap();
    let out = run_pbcfcm(&bundle.t1_like, &priors, &params).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let fg: Vec<usize> = (0..bundle.tissue.data().len())
        .filter(|&k| bundle.tissue.data()[k] != TISSUE_BACKGROUND)
        .collect();
    let est: Vec<f64> = fg.iter().map(|&k| out.state.bias.data()[k]).collect();
    let truth: Vec<f64> = fg.iter().map(|&k| bundle.additive_bias.data()[k]).collect();
    let r = correlation(&est, &truth);
    all(vec![
        check(
            r >= 0.95,
            format!(
                "foreground correlation {r:.4} (>= 0.95), {:?} phantom, bias {}, noise {:.2}",
                phantom.dims, phantom.bias_amplitude, phantom.noise_sigma
            ),
        ),
        check(
            elapsed < 60.0,
            format!("{} iterations in {elapsed:.1} s (< 60 s)", out.iterations),
        ),
    ])
}

// ---------------------------------------------------------------- rkhs

fn rkhs_localization() -> Outcome {
    let params = RkhsParams::default();
    let mut worst_offset = 0isize;
    for c0 in [4usize, 5, 8, 11, 12] {
        let z: Vec<f64> = (0..256).map(|p| if p % 16 >= c0 { 0.9 } else { 0.1 }).collect();
        let sol = solve_rkhs_patch(&z, 16, 16, &params).unwrap();
        let cols: Vec<f64> = (0..16).map(|x| (0..16).map(|y| sol.edge[y * 16 + x]).sum()).collect();
        let arg = (0..16)
            .max_by(|&a, &b| cols[a].total_cmp(&cols[b]).then(b.cmp(&a)))
            .unwrap();
        worst_offset = worst_offset.max((arg as isize - c0 as isize).abs());
    }
    let mut worst_row = 0isize;
    for r0 in [5usize, 9] {
        let z: Vec<f64> = (0..256).map(|p| if p / 16 >= r0 { 1.0 } else { 0.0 }).collect();
        let sol = solve_rkhs_patch(&z, 16, 16, &params).unwrap();
        let rows: Vec<f64> = (0..16).map(|y| (0..16).map(|x| sol.edge[y * 16 + x]).sum()).collect();
        let arg = (0..16)
            .max_by(|&a, &b| rows[a].total_cmp(&rows[b]).then(b.cmp(&a)))
            .unwrap();
        worst_row = worst_row.max((arg as isize - r0 as isize).abs());
    }

    let constant = solve_rkhs_patch(&vec![0.37; 256], 16, 16, &params).unwrap();
    let bmax = constant.coeffs.b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let recon = constant
        .smooth
        .iter()
        .zip(&constant.steps)
        .fold(0.0f64, |m, (a, b)| m.max((0.37 - a - b).abs()));

    let ridge = RkhsParams {
        nu_edge: 0.0,
        alpha_l1: 1e6,
        admm_iters: 5000,
        admm_tol: 1e-13,
        outer_iters: 1,
        kernel_tol: 0.0,
        ..RkhsParams::default()
    };
    let (w, h) = (9, 8);
    let z: Vec<f64> = (0..w * h).map(|p| ((p * 29 % 13) as f64 / 7.0).cos()).collect();
    let sol = solve_rkhs_patch(&z, w, h, &ridge).unwrap();
    let extent = (w.max(h) - 1) as f64;
    let t = |p: usize| [(p % w) as f64 / extent, (p / w) as f64 / extent];
    let k = DMatrix::from_fn(w * h, w * h, |i, j| gaussian_kernel(t(i), t(j), ridge.sigma / extent));
    let mean = z.iter().sum::<f64>() / z.len() as f64;
    let a = &k + DMatrix::identity(w * h, w * h) * (2.0 * ridge.gamma_smooth);
    let d = a
        .lu()
        .solve(&DVector::from_iterator(z.len(), z.iter().map(|v| v - mean)))
        .unwrap();
    let kd = &k * d;
    let ridge_err = kd
        .iter()
        .zip(&sol.smooth)
        .fold(0.0f64, |m, (x, y)| m.max((x + mean - y).abs()));
    let b_zero = sol.coeffs.b.iter().all(|&v| v == 0.0);

    all(vec![
        check(
            worst_offset <= 1 && worst_row <= 1,
            format!("step edge argmax offset {worst_offset} px (columns), {worst_row} px (rows) (<= 1)"),
        ),
        check(
            bmax <= 1e-6 && recon <= 1e-3,
            format!("constant patch |b|_inf = {bmax:.1e} (<= 1e-6), residual {recon:.1e}"),
        ),
        check(
            ridge_err <= 1e-6 && b_zero,
            format!("large-l1 limit vs kernel ridge: {ridge_err:.2e} (<= 1e-6), b = 0: {b_zero}"),
        ),
    ])
}

// ---------------------------------------------------------------- penalty

fn penalty_identities() -> Outcome {
    let a = PenaltyParams::default().alpha_d;
    let exact =
        penalty_value(0.0, 1.0, a) == 0.0 && penalty_value(0.0, 0.0, a) == 0.5 && penalty_value(1.0, 1.0, a) == 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut violations = 0;
    for _ in 0..10_000 {
        let alpha = rng.random_range(0.1..30.0);
        let (m1, m2): (f64, f64) = (rng.random(), rng.random());
        let (a1, a2): (f64, f64) = (rng.random(), rng.random());
        let (mlo, mhi) = (m1.min(m2), m1.max(m2));
        let (alo, ahi) = (a1.min(a2), a1.max(a2));
        if penalty_value(mlo, a1, alpha) > penalty_value(mhi, a1, alpha) {
            violations += 1;
        }
        if penalty_value(m1, alo, alpha) < penalty_value(m1, ahi, alpha) {
            violations += 1;
        }
    }
    all(vec![
        check(exact, "(0,1) -> 0, (0,0) -> 0.5, (1,1) -> 0.5 exactly".into()),
        check(
            violations == 0,
            format!("{violations} monotonicity violations in 10^4 sampled pairs"),
        ),
    ])
}

// ---------------------------------------------------------------- flow

fn disk(n: usize, r: f64) -> ScalarVolume {
    let c = (n as f64 - 1.0) / 2.0;
    ScalarVolume::from_fn(VolumeGeometry::unit([n, n, 1]), |x, y, _| {
        if ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt() <= r {
            1.0
        } else {
            -1.0
        }
    })
}

fn flow_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let g = VolumeGeometry::unit([12, 12, 3]);
    let mut out_of_range = 0;
    for _ in 0..200 {
        let p = FlowParams {
            gamma_dist: rng.random_range(0.0..10.0),
            eta_int: rng.random_range(0.0..10.0),
            ..FlowParams::default()
        };
        let gs = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(0.0..=1.0));
        let dp = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(0.0..=1.0));
        let i = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(0.0..2.0));
        let f = assemble_force(&gs, &dp, &i, &p).unwrap();
        out_of_range += f.data().iter().filter(|v| !(-1.0..=1.0).contains(*v)).count();
    }

    let still = FlowParams {
        q_curv: 0.0,
        max_iter: 50,
        stop_flip_fraction: 0.0,
        ..FlowParams::default()
    };
    let phi = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(-1.0..1.0));
    let zero = ScalarVolume::filled(g, 0.0);
    let moved = evolve(
        &LevelSetField {
            group: 1,
            phi: phi.clone(),
        },
        &zero,
        &still,
    )
    .unwrap();
    let identity = moved.field.phi.data() == phi.data() && moved.iterations == 50;

    let n = 64;
    let c = 31.5;
    let sdf = ScalarVolume::from_fn(VolumeGeometry::unit([n, n, 1]), |x, y, _| {
        20.0 - ((x as f64 - c).powi(2) + (y as f64 - c).powi(2)).sqrt()
    });
    let kappa = curvature(&sdf);
    let mut rel: f64 = 0.0;
    for k in 0..sdf.data().len() {
        if sdf.data()[k].abs() < 0.5 {
            rel = rel.max((kappa.data()[k].abs() - 0.05).abs() / 0.05);
        }
    }

    let step = FlowParams {
        max_iter: 1,
        ..FlowParams::default()
    };
    let mut phi = disk(n, 20.0);
    let zero = ScalarVolume::filled(*phi.geometry(), 0.0);
    let area = |p: &ScalarVolume| p.data().iter().filter(|&&v| v > 0.0).count();
    let start = area(&phi);
    let mut prev = start;
    let mut monotone = true;
    for _ in 0..100 {
        phi = evolve(&LevelSetField { group: 1, phi }, &zero, &step)
            .unwrap()
            .field
            .phi;
        let a = area(&phi);
        monotone &= a <= prev;
        prev = a;
    }
    all(vec![
        check(
            out_of_range == 0,
            format!("{out_of_range} force values outside [-1, 1] in 200 random assemblies"),
        ),
        check(identity, "F = 0, q = 0: 50 steps leave phi bit-identical".into()),
        check(
            rel <= 0.15,
            format!("circle r = 20: curvature relative error {rel:.3} (<= 0.15)"),
        ),
        check(
            monotone && prev < start,
            format!("curvature-only flow: disk area {start} -> {prev} over 100 steps, monotone {monotone}"),
        ),
    ])
}

// ---------------------------------------------------------------- end to end

fn gap_adjacent_groups(bundle: &geoflow_core::phantom::PhantomBundle) -> Vec<u8> {
    let g = *bundle.truth_labels.geometry();
    let [nx, ny, _] = g.dims;
    let mut out = std::collections::BTreeSet::new();
    for k in 0..g.len() {
        if !bundle.erased.data()[k] {
            continue;
        }
        let [x, y, z] = g.coords(k);
        for (dx, dy) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1)] {
            let (xx, yy) = (x as i64 + dx, y as i64 + dy);
            if xx >= 0 && yy >= 0 && xx < nx as i64 && yy < ny as i64 {
                let l = bundle.truth_labels.get(xx as usize, yy as usize, z);
                if l != 0 {
                    out.insert(l);
                }
            }
        }
    }
    out.into_iter().collect()
}

fn end_to_end(dir: &Path) -> Outcome {
    let phantom = PhantomParams::default();
    let slices = default_annotated_slices(phantom.dims[2]);
    let t = Instant::now();
    let cfg_path = write_phantom_case(dir, &phantom, &slices, AutoAnnotationParams::default()).unwrap();
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let out = run_pipeline(&cfg).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    let scores: Vec<(u8, f64)> = out.manifest.groups.iter().map(|g| (g.group, g.dice.unwrap())).collect();
    let worst = scores.iter().map(|s| s.1).fold(1.0, f64::min);

    let bundle = generate_phantom(&phantom).unwrap();
    let truth = &bundle.truth_labels;
    let reduced = AnnotationSet::load(&cfg.annotations)
        .unwrap()
        .without_kind(AnnotationKind::AntiMarker);
    let distances = distance_stage(&out.edges, &reduced, &cfg.penalty).unwrap();
    let seg = flow_stage(
        &out.corrected,
        &out.edges,
        &distances,
        &|g| cfg.flow_for(g).clone(),
        &NoProgress,
    )
    .unwrap();
    let adjacent = gap_adjacent_groups(&bundle);
    let mut drops = Vec::new();
    let mut degraded = !adjacent.is_empty();
    for &g in &adjacent {
        let full = scores.iter().find(|s| s.0 == g).map(|s| s.1).unwrap_or(0.0);
        let without = dice(&seg.labels.mask_of(g), &truth.mask_of(g)).unwrap();
        degraded &= without < full;
        drops.push(format!("group {g} {full:.3} -> {without:.3}"));
    }
    let table = scores
        .iter()
        .map(|(g, d)| format!("group {g} {d:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    all(vec![
        check(worst >= 0.90, format!("per-group Dice {table} (>= 0.90)")),
        check(elapsed < 600.0, format!("pipeline total {elapsed:.1} s (< 600 s)")),
        check(degraded, format!("without anti-markers: {}", drops.join(", "))),
    ])
}

fn files_under(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Outcome {
    let phantom = PhantomParams {
        dims: [64, 64, 10],
        fov_mm: [200.0, 156.0, 50.0],
        ..PhantomParams::default()
    };
    let cfg_path = write_phantom_case(
        dir,
        &phantom,
        &default_annotated_slices(10),
        AutoAnnotationParams::default(),
    )
    .unwrap();
    let mut cfg = PipelineConfig::load(&cfg_path).unwrap();
    let a = dir.join("run_a");
    let b = dir.join("run_b");
    cfg.output_dir = a.clone();
    run_pipeline(&cfg).unwrap();
    cfg.output_dir = b.clone();
    run_pipeline(&cfg).unwrap();
    let fa = files_under(&a);
    let fb = files_under(&b);
    let mut differing = Vec::new();
    for f in &fa {
        if std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() {
            differing.push(f.display().to_string());
        }
    }
    check(
        fa == fb && differing.is_empty(),
        format!(
            "{} output files compared, {} differ {:?}",
            fa.len(),
            differing.len(),
            differing
        ),
    )
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let e2e_dir = tmp.path().join("e2e");
    let det_dir = tmp.path().join("determinism");
    let criteria: Vec<Criterion> = vec![
        ("eikonal correctness", Box::new(eikonal_accuracy)),
        ("eikonal shortest-path bracketing", Box::new(eikonal_bracketing)),
        ("pbcfcm descent and prior-free reduction", Box::new(pbcfcm_descent)),
        ("pbcfcm bias recovery", Box::new(bias_recovery)),
        ("rkhs edge localization", Box::new(rkhs_localization)),
        ("distance penalty identities", Box::new(penalty_identities)),
        ("flow invariants", Box::new(flow_invariants)),
        ("end-to-end phantom", Box::new(move || end_to_end(&e2e_dir))),
        ("determinism", Box::new(move || determinism(&det_dir))),
    ];
    let mut failed = Vec::new();
    for (name, run) in &criteria {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name} ({secs:.1} s): {detail}"),
            Err(detail) => {
                println!("FAIL  {name} ({secs:.1} s): {detail}");
                failed.push(*name);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
