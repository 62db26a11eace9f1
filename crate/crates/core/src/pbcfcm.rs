//! Fuzzy C-means with class priors and an additive bias field.
//!
//! Memberships are stored voxel-major: `u[k * C + i]` is the membership of
//! voxel `k` in cluster `i`. Clusters are ordered by ascending intensity, so
//! with three clusters they are background, muscle, fat.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::gaussian_smooth;
use crate::volume::{MaskVolume, ScalarVolume, VolumeGeometry};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Neighborhood {
    /// 8 in-plane neighbours.
    InPlane8,
    /// 6 face neighbours in 3D.
    Six,
}

impl Neighborhood {
    pub fn cardinality(self) -> usize {
        match self {
            Neighborhood::InPlane8 => 8,
            Neighborhood::Six => 6,
        }
    }

    fn offsets(self) -> &'static [[isize; 3]] {
        match self {
            Neighborhood::InPlane8 => &[
                [-1, -1, 0],
                [0, -1, 0],
                [1, -1, 0],
                [-1, 0, 0],
                [1, 0, 0],
                [-1, 1, 0],
                [0, 1, 0],
                [1, 1, 0],
            ],
            Neighborhood::Six => &[[-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]],
        }
    }
}

/// Threshold given either in image units or relative to the image's 99th percentile.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Absolute(f64),
    FractionOfP99(f64),
}

impl Threshold {
    pub fn resolve(self, vol: &ScalarVolume) -> f64 {
        match self {
            Threshold::Absolute(t) => t,
            Threshold::FractionOfP99(f) => f * percentile(vol.data(), 0.99),
        }
    }
}

fn percentile(data: &[f64], p: f64) -> f64 {
    let mut sorted = data.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = (p * (sorted.len() - 1) as f64).round() as usize;
    sorted[pos]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PbcfcmParams {
    pub n_clusters: usize,
    pub fuzziness: f64,
    pub neighbor_weight: f64,
    pub neighborhood: Neighborhood,
    pub prior_confidence: f64,
    pub tau_bg: Threshold,
    pub tau_fat: f64,
    pub max_iter: usize,
    pub centroid_tol: f64,
    /// Width of the Gaussian-weighted fit that regularises the bias each iteration (`None` keeps the raw residual).
    pub bias_smoothing_mm: Option<f64>,
    /// Work on `ln(1 + y)` so that the additive bias becomes multiplicative.
    pub log_domain: bool,
}

impl Default for PbcfcmParams {
    fn default() -> Self {
        PbcfcmParams {
            n_clusters: 3,
            fuzziness: 2.0,
            neighbor_weight: 0.3,
            neighborhood: Neighborhood::InPlane8,
            prior_confidence: 0.9,
            tau_bg: Threshold::FractionOfP99(0.2),
            tau_fat: 0.5,
            max_iter: 100,
            centroid_tol: 1e-2,
            bias_smoothing_mm: Some(12.0),
            log_domain: false,
        }
    }
}

impl PbcfcmParams {
    pub fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.n_clusters) {
            return Err(Error::Param("n_clusters must lie in 2..=16".into()));
        }
        if !(self.fuzziness > 1.0) {
            return Err(Error::Param(format!("fuzziness must exceed 1, got {}", self.fuzziness)));
        }
        if !(self.neighbor_weight >= 0.0) {
            return Err(Error::Param("neighbor_weight must be non-negative".into()));
        }
        if !(self.centroid_tol > 0.0) {
            return Err(Error::Param("centroid_tol must be positive".into()));
        }
        Ok(())
    }
}

/// Threshold masks in cluster order: background, muscle, fat.
#[derive(Clone, Debug)]
pub struct ClassMasks {
    pub background: MaskVolume,
    pub muscle: MaskVolume,
    pub fat: MaskVolume,
}

impl ClassMasks {
    /// Cluster index per voxel.
    pub fn class_of(&self, k: usize) -> usize {
        if self.background.data()[k] {
            0
        } else if self.fat.data()[k] {
            2
        } else {
            1
        }
    }
}

pub fn build_masks(t1: &ScalarVolume, fat_fraction: &ScalarVolume, params: &PbcfcmParams) -> Result<ClassMasks> {
    t1.geometry()
        .ensure_same(fat_fraction.geometry(), "fat-fraction vs T1")?;
    let g = *t1.geometry();
    let tau_bg = params.tau_bg.resolve(t1);
    let background = MaskVolume::new(g, t1.data().iter().map(|&v| v < tau_bg).collect())?;
    let fat = MaskVolume::new(
        g,
        fat_fraction
            .data()
            .iter()
            .zip(background.data())
            .map(|(&f, &bg)| f > params.tau_fat && !bg)
            .collect(),
    )?;
    let muscle = MaskVolume::new(
        g,
        background
            .data()
            .iter()
            .zip(fat.data())
            .map(|(&b, &f)| !b && !f)
            .collect(),
    )?;
    for (name, m) in [("background", &background), ("muscle", &muscle), ("fat", &fat)] {
        if m.is_empty_mask() {
            log::warn!("{name} threshold mask is empty");
        }
    }
    Ok(ClassMasks {
        background,
        muscle,
        fat,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPriorField {
    geometry: VolumeGeometry,
    n_classes: usize,
    p: Vec<f64>,
}

impl ClassPriorField {
    pub fn new(geometry: VolumeGeometry, n_classes: usize, p: Vec<f64>) -> Result<Self> {
        if p.len() != geometry.len() * n_classes {
            return Err(Error::GeometryMismatch(format!(
                "prior field has {} entries, expected {}",
                p.len(),
                geometry.len() * n_classes
            )));
        }
        if let Some(bad) = p.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::Param(format!("prior entry {bad} is not strictly positive")));
        }
        Ok(ClassPriorField { geometry, n_classes, p })
    }

    pub fn uniform(geometry: VolumeGeometry, n_classes: usize) -> Self {
        ClassPriorField {
            geometry,
            n_classes,
            p: vec![1.0 / n_classes as f64; geometry.len() * n_classes],
        }
    }

    pub fn geometry(&self) -> &VolumeGeometry {
        &self.geometry
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.p[k * self.n_classes..(k + 1) * self.n_classes]
    }

    pub fn data(&self) -> &[f64] {
        &self.p
    }
}

/// Confidence `eta` on the thresholded class, the remainder split evenly.
pub fn estimate_priors(masks: &ClassMasks, eta: f64) -> Result<ClassPriorField> {
    let c = 3;
    if !(eta > 1.0 / c as f64 && eta < 1.0) {
        return Err(Error::Param(format!(
            "prior confidence must lie in (1/3, 1), got {eta}"
        )));
    }
    let g = *masks.background.geometry();
    let other = (1.0 - eta) / (c - 1) as f64;
    let mut p = vec![other; g.len() * c];
    for k in 0..g.len() {
        p[k * c + masks.class_of(k)] = eta;
    }
    ClassPriorField::new(g, c, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FuzzyState {
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub bias: ScalarVolume,
}

impl FuzzyState {
    pub fn n_clusters(&self) -> usize {
        self.v.len()
    }

    pub fn memberships(&self, k: usize) -> &[f64] {
        let c = self.v.len();
        &self.u[k * c..(k + 1) * c]
    }
}

/// Per-voxel first and second moments of `e = y − B` over in-domain neighbours.
struct NeighbourSums {
    count: Vec<f64>,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

fn corrected_values(y: &ScalarVolume, bias: &ScalarVolume) -> Vec<f64> {
    y.data().iter().zip(bias.data()).map(|(a, b)| a - b).collect()
}

fn neighbour_sums(g: &VolumeGeometry, e: &[f64], hood: Neighborhood) -> NeighbourSums {
    let [nx, ny, nz] = g.dims;
    let offsets = hood.offsets();
    let mut count = vec![0.0; e.len()];
    let mut s1 = vec![0.0; e.len()];
    let mut s2 = vec![0.0; e.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let k = g.index(x, y, z);
                let (mut c, mut a, mut b) = (0.0, 0.0, 0.0);
                for o in offsets {
                    let (xx, yy, zz) = (x as isize + o[0], y as isize + o[1], z as isize + o[2]);
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                        continue;
                    }
                    let r = e[g.index(xx as usize, yy as usize, zz as usize)];
                    c += 1.0;
                    a += r;
                    b += r * r;
                }
                count[k] = c;
                s1[k] = a;
                s2[k] = b;
            }
        }
    }
    NeighbourSums { count, s1, s2 }
}

fn check_shapes(y: &ScalarVolume, state: &FuzzyState, priors: &ClassPriorField) -> Result<()> {
    y.geometry().ensure_same(state.bias.geometry(), "bias vs image")?;
    y.geometry().ensure_same(priors.geometry(), "priors vs image")?;
    if priors.n_classes() != state.n_clusters() || state.u.len() != y.data().len() * state.n_clusters() {
        return Err(Error::GeometryMismatch(
            "cluster count differs between state and priors".into(),
        ));
    }
    Ok(())
}

pub fn pbcfcm_objective(
    y: &ScalarVolume,
    state: &FuzzyState,
    priors: &ClassPriorField,
    params: &PbcfcmParams,
) -> Result<f64> {
    check_shapes(y, state, priors)?;
    let c = state.n_clusters();
    let e = corrected_values(y, &state.bias);
    let nb = neighbour_sums(y.geometry(), &e, params.neighborhood);
    let w = params.neighbor_weight / params.neighborhood.cardinality() as f64;
    let mut j = 0.0;
    for k in 0..e.len() {
        let p = priors.at(k);
        for i in 0..c {
            let v = state.v[i];
            let d = (e[k] - v).powi(2);
            let gamma = nb.s2[k] - 2.0 * v * nb.s1[k] + nb.count[k] * v * v;
            j += state.u[k * c + i].powf(params.fuzziness) * (d / p[i] + w * gamma);
        }
    }
    Ok(j)
}

/// Exact minimiser of the objective over memberships with centroids and bias fixed.
pub fn update_memberships(
    y: &ScalarVolume,
    state: &mut FuzzyState,
    priors: &ClassPriorField,
    params: &PbcfcmParams,
) -> Result<()> {
    check_shapes(y, state, priors)?;
    let c = state.n_clusters();
    let e = corrected_values(y, &state.bias);
    let nb = neighbour_sums(y.geometry(), &e, params.neighborhood);
    let w = params.neighbor_weight / params.neighborhood.cardinality() as f64;
    let expo = 1.0 / (params.fuzziness - 1.0);
    let v = &state.v;
    state.u.par_chunks_mut(c).enumerate().for_each(|(k, uk)| {
        let p = priors.at(k);
        let mut dt = [0.0f64; 16];
        let dt = &mut dt[..c];
        let mut dmin = f64::INFINITY;
        for i in 0..c {
            let gamma = nb.s2[k] - 2.0 * v[i] * nb.s1[k] + nb.count[k] * v[i] * v[i];
            // Clamp tiny negative round-off of the expanded neighbour term.
            let d = ((e[k] - v[i]).powi(2) / p[i] + w * gamma).max(0.0);
            dt[i] = d;
            dmin = dmin.min(d);
        }
        if dmin == 0.0 {
            let zeros = dt.iter().filter(|&&d| d == 0.0).count() as f64;
            for i in 0..c {
                uk[i] = if dt[i] == 0.0 { 1.0 / zeros } else { 0.0 };
            }
            return;
        }
        let mut sum = 0.0;
        for i in 0..c {
            uk[i] = (dmin / dt[i]).powf(expo);
            sum += uk[i];
        }
        uk.iter_mut().for_each(|x| *x /= sum);
    });
    Ok(())
}

/// Exact stationary point of the objective in each centroid.
pub fn update_centroids(
    y: &ScalarVolume,
    state: &mut FuzzyState,
    priors: &ClassPriorField,
    params: &PbcfcmParams,
) -> Result<()> {
    check_shapes(y, state, priors)?;
    let c = state.n_clusters();
    let e = corrected_values(y, &state.bias);
    let nb = neighbour_sums(y.geometry(), &e, params.neighborhood);
    let w = params.neighbor_weight / params.neighborhood.cardinality() as f64;
    for i in 0..c {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..e.len() {
            let uq = state.u[k * c + i].powf(params.fuzziness);
            let inv_p = 1.0 / priors.at(k)[i];
            num += uq * (e[k] * inv_p + w * nb.s1[k]);
            den += uq * (inv_p + w * nb.count[k]);
        }
        if den > 0.0 {
            state.v[i] = num / den;
        }
    }
    Ok(())
}

/// `B_k = y_k − Σ u^q v / Σ u^q`, optionally regularised, then shifted to zero mean with the centroids
/// moved by the same constant (the objective is unchanged by that shift).
pub fn update_bias(y: &ScalarVolume, state: &mut FuzzyState, params: &PbcfcmParams) {
    let c = state.n_clusters();
    let q = params.fuzziness;
    let v = &state.v;
    let u = &state.u;
    let fitted: Vec<f64> = (0..y.data().len())
        .into_par_iter()
        .map(|k| {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..c {
                let uq = u[k * c + i].powf(q);
                num += uq * v[i];
                den += uq;
            }
            num / den
        })
        .collect();
    let g = *y.geometry();
    match params.bias_smoothing_mm {
        None => {
            for ((b, &yk), &ck) in state.bias.data_mut().iter_mut().zip(y.data()).zip(&fitted) {
                *b = yk - ck;
            }
        }
        Some(sigma) => {
            // Local least-squares fit of a smooth relative field r ≈ c·b, returned as c·b.
            let cr: Vec<f64> = y.data().iter().zip(&fitted).map(|(&yk, &ck)| ck * (yk - ck)).collect();
            let cc: Vec<f64> = fitted.iter().map(|&ck| ck * ck).collect();
            let num = gaussian_smooth(&ScalarVolume::from_vec_unchecked(g, cr), sigma);
            let den = gaussian_smooth(&ScalarVolume::from_vec_unchecked(g, cc), sigma);
            for (k, b) in state.bias.data_mut().iter_mut().enumerate() {
                let d = den.data()[k];
                *b = if d > 0.0 { fitted[k] * num.data()[k] / d } else { 0.0 };
            }
        }
    }
    // Only y − B − v is observable; fix the constant offset so that B has zero mean.
    let mean = state.bias.data().iter().sum::<f64>() / state.bias.data().len() as f64;
    state.bias.data_mut().iter_mut().for_each(|b| *b -= mean);
    state.v.iter_mut().for_each(|v| *v += mean);
}

pub fn pbcfcm_step(
    y: &ScalarVolume,
    state: &FuzzyState,
    priors: &ClassPriorField,
    params: &PbcfcmParams,
) -> Result<FuzzyState> {
    let mut next = state.clone();
    update_memberships(y, &mut next, priors, params)?;
    update_centroids(y, &mut next, priors, params)?;
    update_bias(y, &mut next, params);
    Ok(next)
}

/// Centroids at evenly spaced quantiles (5% … 95%), bias ≈ 0, memberships from one update.
pub fn initial_state(y: &ScalarVolume, priors: &ClassPriorField, params: &PbcfcmParams) -> Result<FuzzyState> {
    let c = params.n_clusters;
    if priors.n_classes() != c {
        return Err(Error::Param(format!(
            "priors have {} classes but n_clusters is {c}",
            priors.n_classes()
        )));
    }
    let mut sorted = y.data().to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let v = (0..c)
        .map(|i| {
            let p = 0.05 + 0.9 * i as f64 / (c - 1) as f64;
            sorted[(p * (sorted.len() - 1) as f64).round() as usize]
        })
        .collect();
    let mut state = FuzzyState {
        u: vec![1.0 / c as f64; y.data().len() * c],
        v,
        bias: ScalarVolume::filled(*y.geometry(), 1e-6),
    };
    update_memberships(y, &mut state, priors, params)?;
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationLog {
    pub iter: usize,
    pub objective: f64,
    pub delta_v: f64,
}

#[derive(Clone, Debug)]
pub struct PbcfcmOutcome {
    /// `y − B` (or its exponential counterpart in log-domain mode).
    pub corrected: ScalarVolume,
    pub state: FuzzyState,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    pub log: Vec<IterationLog>,
}

pub fn run_pbcfcm(y: &ScalarVolume, priors: &ClassPriorField, params: &PbcfcmParams) -> Result<PbcfcmOutcome> {
    params.validate()?;
    if y.data().is_empty() {
        return Err(Error::Empty("image"));
    }
    let work = if params.log_domain {
        y.map(|v| v.max(0.0).ln_1p())
    } else {
        y.clone()
    };
    let mut state = initial_state(&work, priors, params)?;
    let mut log = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    for iter in 1..=params.max_iter {
        let next = pbcfcm_step(&work, &state, priors, params)?;
        let delta_v = next
            .v
            .iter()
            .zip(&state.v)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        state = next;
        iterations = iter;
        let objective = pbcfcm_objective(&work, &state, priors, params)?;
        log::debug!("pbcfcm iter {iter}: J = {objective:.6e}, |dv| = {delta_v:.3e}");
        log.push(IterationLog {
            iter,
            objective,
            delta_v,
        });
        if delta_v < params.centroid_tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("bias correction stopped at max_iter = {}", params.max_iter);
    }
    let corrected = if params.log_domain {
        let d: Vec<f64> = work
            .data()
            .iter()
            .zip(state.bias.data())
            .map(|(w, b)| (w - b).exp_m1())
            .collect();
        ScalarVolume::new(*y.geometry(), d)?
    } else {
        ScalarVolume::new(*y.geometry(), corrected_values(y, &state.bias))?
    };
    let objective = log.last().map(|l| l.objective).unwrap_or(0.0);
    Ok(PbcfcmOutcome {
        corrected,
        state,
        iterations,
        converged,
        objective,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn no_neighbours() -> PbcfcmParams {
        PbcfcmParams {
            neighbor_weight: 0.0,
            bias_smoothing_mm: None,
            ..PbcfcmParams::default()
        }
    }

    #[test]
    fn objective_by_hand() {
        let g = VolumeGeometry::unit([1, 1, 1]);
        let y = ScalarVolume::filled(g, 5.0);
        let state = FuzzyState {
            u: vec![1.0, 0.0],
            v: vec![0.0, 10.0],
            bias: ScalarVolume::filled(g, 0.0),
        };
        let priors = ClassPriorField::new(g, 2, vec![1.0, 1.0]).unwrap();
        let j = pbcfcm_objective(&y, &state, &priors, &no_neighbours()).unwrap();
        assert_eq!(j, 25.0);
    }

    #[test]
    fn objective_vanishes_on_exact_assignment() {
        let g = VolumeGeometry::unit([2, 1, 1]);
        let y = ScalarVolume::new(g, vec![0.0, 10.0]).unwrap();
        let state = FuzzyState {
            u: vec![1.0, 0.0, 0.0, 1.0],
            v: vec![0.0, 10.0],
            bias: ScalarVolume::filled(g, 0.0),
        };
        let priors = ClassPriorField::uniform(g, 2);
        assert_eq!(pbcfcm_objective(&y, &state, &priors, &no_neighbours()).unwrap(), 0.0);
    }

    #[test]
    fn zero_distance_gives_identity_assignment() {
        let g = VolumeGeometry::unit([2, 1, 1]);
        let y = ScalarVolume::new(g, vec![0.0, 10.0]).unwrap();
        let mut state = FuzzyState {
            u: vec![0.5; 4],
            v: vec![0.0, 10.0],
            bias: ScalarVolume::filled(g, 0.0),
        };
        let priors = ClassPriorField::uniform(g, 2);
        update_memberships(&y, &mut state, &priors, &no_neighbours()).unwrap();
        assert_eq!(state.u, vec![1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ties_at_zero_distance_split_equally() {
        let g = VolumeGeometry::unit([1, 1, 1]);
        let y = ScalarVolume::filled(g, 3.0);
        let mut state = FuzzyState {
            u: vec![0.0; 3],
            v: vec![3.0, 3.0, 9.0],
            bias: ScalarVolume::filled(g, 0.0),
        };
        let priors = ClassPriorField::uniform(g, 3);
        update_memberships(&y, &mut state, &priors, &no_neighbours()).unwrap();
        assert_eq!(state.u, vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn one_hot_membership_gives_residual_bias() {
        let g = VolumeGeometry::unit([2, 1, 1]);
        let y = ScalarVolume::new(g, vec![4.0, 13.0]).unwrap();
        let mut state = FuzzyState {
            u: vec![1.0, 0.0, 0.0, 1.0],
            v: vec![3.0, 10.0],
            bias: ScalarVolume::filled(g, 0.0),
        };
        update_bias(&y, &mut state, &no_neighbours());
        assert_eq!(state.bias.data(), &[4.0 - state.v[0], 13.0 - state.v[1]]);
        assert_eq!(state.bias.data().iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn priors_follow_the_mask_rule() {
        let g = VolumeGeometry::unit([3, 1, 1]);
        let bg = MaskVolume::new(g, vec![true, false, false]).unwrap();
        let fat = MaskVolume::new(g, vec![false, false, true]).unwrap();
        let muscle = MaskVolume::new(g, vec![false, true, false]).unwrap();
        let masks = ClassMasks {
            background: bg,
            muscle,
            fat,
        };
        let p = estimate_priors(&masks, 0.9).unwrap();
        let close = |a: &[f64], b: [f64; 3]| a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-15);
        assert!(close(p.at(1), [0.05, 0.9, 0.05]));
        assert!(close(p.at(0), [0.9, 0.05, 0.05]));
        assert!(estimate_priors(&masks, 0.3).is_err());
        assert!(estimate_priors(&masks, 1.0).is_err());
    }

    #[test]
    fn zero_t1_is_all_background() {
        let g = VolumeGeometry::unit([4, 4, 2]);
        let t1 = ScalarVolume::filled(g, 0.0);
        let ff = ScalarVolume::filled(g, 0.9);
        let params = PbcfcmParams {
            tau_bg: Threshold::Absolute(0.01),
            ..PbcfcmParams::default()
        };
        let m = build_masks(&t1, &ff, &params).unwrap();
        assert_eq!(m.background.count(), 32);
        assert_eq!(m.fat.count() + m.muscle.count(), 0);
    }

    #[test]
    fn masks_require_matching_geometry() {
        let t1 = ScalarVolume::filled(VolumeGeometry::unit([4, 4, 2]), 1.0);
        let ff = ScalarVolume::filled(VolumeGeometry::unit([2, 2, 2]), 1.0);
        assert!(build_masks(&t1, &ff, &PbcfcmParams::default()).is_err());
    }

    #[test]
    fn two_level_image_converges_to_levels() {
        let g = VolumeGeometry::unit([8, 4, 1]);
        let y = ScalarVolume::from_fn(g, |x, _, _| if x < 4 { 20.0 } else { 70.0 });
        let params = PbcfcmParams {
            n_clusters: 2,
            neighbor_weight: 0.0,
            bias_smoothing_mm: None,
            centroid_tol: 1e-12,
            max_iter: 200,
            ..PbcfcmParams::default()
        };
        let priors = ClassPriorField::uniform(g, 2);
        let out = run_pbcfcm(&y, &priors, &params).unwrap();
        assert!((out.state.v[0] - 20.0).abs() < 1e-8, "{:?}", out.state.v);
        assert!((out.state.v[1] - 70.0).abs() < 1e-8, "{:?}", out.state.v);
    }

    fn random_instance(seed: u64) -> (ScalarVolume, FuzzyState, ClassPriorField) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = VolumeGeometry::unit([4, 4, 2]);
        let y = ScalarVolume::from_fn(g, |_, _, _| rng.random_range(0.0..10.0));
        let mut p = Vec::new();
        for _ in 0..g.len() {
            let raw: Vec<f64> = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            p.extend(raw.iter().map(|x| x / s));
        }
        let state = FuzzyState {
            u: vec![1.0 / 3.0; g.len() * 3],
            v: vec![1.0, 5.0, 9.0],
            bias: ScalarVolume::from_fn(g, |_, _, _| rng.random_range(-0.5..0.5)),
        };
        (y, state, ClassPriorField::new(g, 3, p).unwrap())
    }

    proptest! {
        #[test]
        fn memberships_stay_on_the_simplex(seed in 0u64..1000, alpha in 0.0f64..2.0) {
            let (y, mut state, priors) = random_instance(seed);
            let params = PbcfcmParams { neighbor_weight: alpha, ..PbcfcmParams::default() };
            update_memberships(&y, &mut state, &priors, &params).unwrap();
            for k in 0..y.data().len() {
                let u = state.memberships(k);
                prop_assert!((u.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(u.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }

        #[test]
        fn scaling_priors_leaves_memberships_unchanged(seed in 0u64..1000, scale in 0.1f64..10.0) {
            let (y, state, priors) = random_instance(seed);
            let params = no_neighbours();
            let scaled = ClassPriorField::new(
                *priors.geometry(), 3, priors.data().iter().map(|p| p * scale).collect()).unwrap();
            let mut a = state.clone();
            let mut b = state;
            update_memberships(&y, &mut a, &priors, &params).unwrap();
            update_memberships(&y, &mut b, &scaled, &params).unwrap();
            for (x, z) in a.u.iter().zip(&b.u) {
                prop_assert!((x - z).abs() < 1e-12);
            }
        }
    }
}
