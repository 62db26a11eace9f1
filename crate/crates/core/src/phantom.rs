//! Synthetic thigh-like phantom with known labels, bias field and missing boundaries.
//!
//! A slice is an ellipse: background outside, a subcutaneous fat ring, a muscle
//! annulus split into angular compartments, and a femur (marrow fat inside a dark
//! cortical ring) at the centre. Compartments are separated by one-voxel bright
//! fascia lines; a contiguous radial band of each line is erased to muscle
//! intensity to model a missing boundary.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::erode_inplane;
use crate::geodesic::{mask_to_polygons, AnnotationKind, AnnotationSet, PolygonAnnotation};
use crate::volume::{LabelVolume, MaskVolume, ScalarVolume, VolumeGeometry};

pub const TISSUE_BACKGROUND: u8 = 1;
pub const TISSUE_MUSCLE: u8 = 2;
pub const TISSUE_FAT: u8 = 3;

const FAT_RING_INNER: f64 = 0.86;
const FEMUR_OUTER: f64 = 0.20;
const MARROW_OUTER: f64 = 0.13;
const FAT_FRACTION_NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityLevels {
    pub background: f64,
    pub muscle: f64,
    pub fat: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomParams {
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
    pub n_groups: usize,
    pub boundary_gap_fraction: f64,
    pub bias_amplitude: f64,
    pub bias_smoothness_mm: f64,
    pub noise_sigma: f64,
    pub intensity_levels: IntensityLevels,
    pub seed: u64,
}

impl Default for PhantomParams {
    fn default() -> Self {
        let levels = IntensityLevels {
            background: 5.0,
            muscle: 100.0,
            fat: 220.0,
        };
        PhantomParams {
            dims: [128, 128, 28],
            fov_mm: [400.0, 312.0, 140.0],
            n_groups: 3,
            boundary_gap_fraction: 0.3,
            bias_amplitude: 0.3,
            bias_smoothness_mm: 120.0,
            noise_sigma: 0.02 * (levels.fat - levels.background),
            intensity_levels: levels,
            seed: 7,
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.dims[0] < 32 || self.dims[1] < 32 {
            return Err(Error::Param(format!(
                "phantom needs at least 32 voxels in x and y, got {:?}",
                self.dims
            )));
        }
        VolumeGeometry::new(self.dims, self.fov_mm)?;
        if self.n_groups == 0 || self.n_groups > 16 {
            return Err(Error::Param(format!(
                "n_groups must be in 1..=16, got {}",
                self.n_groups
            )));
        }
        if !(0.0..=1.0).contains(&self.boundary_gap_fraction) {
            return Err(Error::Param("boundary_gap_fraction must lie in [0, 1]".into()));
        }
        if !(self.bias_amplitude >= 0.0) || !(self.bias_smoothness_mm > 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::Param("bias/noise parameters out of range".into()));
        }
        let l = self.intensity_levels;
        if l.background == l.muscle || l.muscle == l.fat || l.background == l.fat {
            return Err(Error::Param("intensity levels must be pairwise distinct".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PhantomBundle {
    /// High-resolution image: `clean · (1 + bias) + noise`.
    pub t1_like: ScalarVolume,
    /// Low-resolution fat indicator, nearly bias free.
    pub fat_fraction_like: ScalarVolume,
    pub truth_labels: LabelVolume,
    /// Multiplicative bias field (sup-norm equals `bias_amplitude`).
    pub true_bias: ScalarVolume,
    /// `clean · bias`, the field an additive correction should recover.
    pub additive_bias: ScalarVolume,
    pub clean: ScalarVolume,
    /// Tissue classes: background, muscle, fat (see `TISSUE_*`).
    pub tissue: LabelVolume,
    /// Every fascia voxel, including erased ones.
    pub fascia: MaskVolume,
    /// Fascia voxels replaced by muscle intensity.
    pub erased: MaskVolume,
}

struct SliceShape {
    cx: f64,
    cy: f64,
    ax: f64,
    ay: f64,
}

struct Compartments {
    base: Vec<f64>,
    amp: Vec<f64>,
    freq: Vec<f64>,
    phase: Vec<f64>,
}

impl Compartments {
    fn random(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let offset = rng.random_range(0.0..2.0 * PI);
        let widths: Vec<f64> = (0..n).map(|_| 1.0 + 0.3 * rng.random_range(-1.0..1.0)).collect();
        let total: f64 = widths.iter().sum();
        let mut base = Vec::with_capacity(n);
        let mut acc = offset;
        for w in &widths {
            base.push(acc);
            acc += 2.0 * PI * w / total;
        }
        let amp = (0..n).map(|_| rng.random_range(0.06..0.12)).collect();
        let freq = (0..n).map(|_| rng.random_range(0.6..1.4)).collect();
        let phase = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        Compartments { base, amp, freq, phase }
    }

    /// 1-based compartment label at normalised radius `rho`, angle `ang`, relative depth `zf`.
    fn label(&self, rho: f64, ang: f64, zf: f64) -> u8 {
        let n = self.base.len();
        if n == 1 {
            return 1;
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..n {
            let theta = self.base[k] + self.amp[k] * (2.0 * PI * self.freq[k] * rho + self.phase[k] + 1.5 * zf).sin();
            let d = (ang - theta).rem_euclid(2.0 * PI);
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best as u8 + 1
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Background,
    SubcutaneousFat,
    Muscle,
    Cortex,
    Marrow,
}

pub fn generate_phantom(params: &PhantomParams) -> Result<PhantomBundle> {
    params.validate()?;
    let geometry = VolumeGeometry::new(params.dims, params.fov_mm)?;
    let [nx, ny, nz] = params.dims;
    let n = geometry.len();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let compartments = Compartments::random(params.n_groups, &mut rng);
    let centre_jitter = (rng.random_range(-0.02..0.02), rng.random_range(-0.02..0.02));

    let mut region = vec![Region::Background; n];
    let mut labels = vec![0u8; n];
    let mut rho_of = vec![0.0f64; n];
    for z in 0..nz {
        let zf = if nz > 1 { z as f64 / (nz - 1) as f64 } else { 0.0 };
        let scale = 1.0 - 0.08 * zf;
        let shape = SliceShape {
            cx: nx as f64 * (0.5 + centre_jitter.0),
            cy: ny as f64 * (0.5 + centre_jitter.1),
            ax: 0.44 * nx as f64 * scale,
            ay: 0.40 * ny as f64 * scale,
        };
        for y in 0..ny {
            for x in 0..nx {
                let u = (x as f64 + 0.5 - shape.cx) / shape.ax;
                let v = (y as f64 + 0.5 - shape.cy) / shape.ay;
                let rho = u.hypot(v);
                let idx = geometry.index(x, y, z);
                rho_of[idx] = rho;
                region[idx] = if rho > 1.0 {
                    Region::Background
                } else if rho > FAT_RING_INNER {
                    Region::SubcutaneousFat
                } else if rho > FEMUR_OUTER {
                    labels[idx] = compartments.label(rho, v.atan2(u), zf);
                    Region::Muscle
                } else if rho > MARROW_OUTER {
                    Region::Cortex
                } else {
                    Region::Marrow
                };
            }
        }
    }

    // Fascia: the lower-labelled side of every in-plane 4-neighbour compartment transition.
    let mut fascia = vec![false; n];
    let mut boundary_of: BTreeMap<(u8, u8), Vec<usize>> = BTreeMap::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = geometry.index(x, y, z);
                let l = labels[idx];
                if l == 0 {
                    continue;
                }
                let neighbours = [
                    (x > 0).then(|| geometry.index(x - 1, y, z)),
                    (x + 1 < nx).then(|| geometry.index(x + 1, y, z)),
                    (y > 0).then(|| geometry.index(x, y - 1, z)),
                    (y + 1 < ny).then(|| geometry.index(x, y + 1, z)),
                ];
                for nb in neighbours.into_iter().flatten() {
                    let m = labels[nb];
                    if m != 0 && l < m {
                        fascia[idx] = true;
                        boundary_of.entry((l, m)).or_default().push(idx);
                        break;
                    }
                }
            }
        }
    }

    // Erase one contiguous radial band per boundary.
    let mut erased = vec![false; n];
    for voxels in boundary_of.values_mut() {
        voxels.sort_by(|&a, &b| rho_of[a].total_cmp(&rho_of[b]).then(a.cmp(&b)));
        let count = voxels.len();
        let k = (params.boundary_gap_fraction * count as f64).round() as usize;
        let start = if k < count { rng.random_range(0..=count - k) } else { 0 };
        for &idx in &voxels[start..start + k.min(count)] {
            erased[idx] = true;
        }
    }

    let lv = params.intensity_levels;
    let mut tissue = vec![TISSUE_BACKGROUND; n];
    let mut clean = vec![lv.background; n];
    for idx in 0..n {
        let t = match region[idx] {
            Region::Background | Region::Cortex => TISSUE_BACKGROUND,
            Region::SubcutaneousFat | Region::Marrow => TISSUE_FAT,
            Region::Muscle if fascia[idx] && !erased[idx] => TISSUE_FAT,
            Region::Muscle => TISSUE_MUSCLE,
        };
        tissue[idx] = t;
        clean[idx] = match t {
            TISSUE_FAT => lv.fat,
            TISSUE_MUSCLE => lv.muscle,
            _ => lv.background,
        };
    }

    let bias = bias_field(&geometry, params, &mut rng);
    let noise = Normal::new(0.0, params.noise_sigma.max(0.0)).expect("valid sigma");
    let mut t1 = Vec::with_capacity(n);
    let mut additive = Vec::with_capacity(n);
    for idx in 0..n {
        let e = if params.noise_sigma > 0.0 {
            noise.sample(&mut rng)
        } else {
            0.0
        };
        t1.push(clean[idx] * (1.0 + bias[idx]) + e);
        additive.push(clean[idx] * bias[idx]);
    }

    let fat_fraction_like = fat_fraction(&geometry, &tissue, &mut rng);
    let label_dict: Vec<u8> = (1..=params.n_groups as u8).collect();

    Ok(PhantomBundle {
        t1_like: ScalarVolume::from_vec_unchecked(geometry, t1),
        fat_fraction_like,
        truth_labels: LabelVolume::new(geometry, labels, label_dict)?,
        true_bias: ScalarVolume::from_vec_unchecked(geometry, bias),
        additive_bias: ScalarVolume::from_vec_unchecked(geometry, additive),
        clean: ScalarVolume::from_vec_unchecked(geometry, clean),
        tissue: LabelVolume::new(geometry, tissue, vec![TISSUE_BACKGROUND, TISSUE_MUSCLE, TISSUE_FAT])?,
        fascia: MaskVolume::new(geometry, fascia)?,
        erased: MaskVolume::new(geometry, erased)?,
    })
}

/// Sum of 2–4 broad signed Gaussian bumps scaled to sup-norm `bias_amplitude`.
fn bias_field(g: &VolumeGeometry, params: &PhantomParams, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let bumps = rng.random_range(2..=4usize);
    let mut centres = Vec::with_capacity(bumps);
    for _ in 0..bumps {
        let c = [
            rng.random_range(-0.4..0.4) * g.fov_mm[0],
            rng.random_range(-0.4..0.4) * g.fov_mm[1],
            rng.random_range(-0.5..0.5) * g.fov_mm[2],
        ];
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let weight = sign * rng.random_range(0.5..1.0);
        centres.push((c, weight));
    }
    if params.bias_amplitude == 0.0 {
        return vec![0.0; g.len()];
    }
    let s2 = 2.0 * params.bias_smoothness_mm * params.bias_smoothness_mm;
    let mut field: Vec<f64> = (0..g.len())
        .map(|idx| {
            let p = g.voxel_center_mm(g.coords(idx));
            centres
                .iter()
                .map(|(c, w)| {
                    let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) + (p[2] - c[2]).powi(2);
                    w * (-d2 / s2).exp()
                })
                .sum()
        })
        .collect();
    let sup = field.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if sup > 0.0 {
        let k = params.bias_amplitude / sup;
        field.iter_mut().for_each(|v| *v *= k);
    }
    field
}

/// Fat indicator downsampled 2× in-plane (4×4 supersampling per low-res voxel) with light noise.
fn fat_fraction(g: &VolumeGeometry, tissue: &[u8], rng: &mut ChaCha8Rng) -> ScalarVolume {
    let [nx, ny, nz] = g.dims;
    let low = VolumeGeometry {
        dims: [nx / 2, ny / 2, nz],
        fov_mm: [
            g.fov_mm[0] * (2 * (nx / 2)) as f64 / nx as f64,
            g.fov_mm[1] * (2 * (ny / 2)) as f64 / ny as f64,
            g.fov_mm[2],
        ],
    };
    let noise = Normal::new(0.0, FAT_FRACTION_NOISE).unwrap();
    let sp = low.spacing();
    let mut out = Vec::with_capacity(low.len());
    for z in 0..nz {
        for y in 0..low.dims[1] {
            for x in 0..low.dims[0] {
                let centre = low.voxel_center_mm([x, y, z]);
                let mut hits = 0usize;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let p = [
                            centre[0] + ((sx as f64 + 0.5) / 4.0 - 0.5) * sp[0],
                            centre[1] + ((sy as f64 + 0.5) / 4.0 - 0.5) * sp[1],
                            centre[2],
                        ];
                        let c = g.continuous_index(p);
                        let hx = (c[0].round().max(0.0) as usize).min(nx - 1);
                        let hy = (c[1].round().max(0.0) as usize).min(ny - 1);
                        if tissue[g.index(hx, hy, z)] == TISSUE_FAT {
                            hits += 1;
                        }
                    }
                }
                let v = hits as f64 / 16.0 + noise.sample(rng);
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ScalarVolume::from_vec_unchecked(low, out)
}

/// Zero-based indices of annotated slices. With 28 slices this is the protocol
/// 3, 8, 13, 18, 23, 26 (one-based); other depths get six evenly spread slices.
pub fn default_annotated_slices(nz: usize) -> Vec<usize> {
    if nz == 28 {
        return vec![2, 7, 12, 17, 22, 25];
    }
    let count = nz.min(6);
    let mut out: Vec<usize> = (0..count)
        .map(|i| ((i as f64 + 0.5) * nz as f64 / count as f64).floor() as usize)
        .collect();
    out.dedup();
    out
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AutoAnnotationParams {
    /// In-plane erosion applied to a compartment before tracing its marker.
    pub marker_erosion: usize,
    /// In-plane erosion applied to the other compartments before tracing anti-markers.
    pub antimarker_erosion: usize,
}

impl Default for AutoAnnotationParams {
    fn default() -> Self {
        AutoAnnotationParams {
            marker_erosion: 3,
            antimarker_erosion: 2,
        }
    }
}

/// Polygon markers from eroded truth compartments and anti-markers from the
/// eroded union of the remaining compartments, on the given slices only.
pub fn auto_annotations(truth: &LabelVolume, slices: &[usize], params: AutoAnnotationParams) -> Result<AnnotationSet> {
    let g = *truth.geometry();
    let mut polygons = Vec::new();
    for &group in truth.labels() {
        let own = truth.mask_of(group);
        let others = MaskVolume::from_fn(g, |x, y, z| {
            let l = truth.get(x, y, z);
            l != 0 && l != group
        });
        let markers = erode_inplane(&own, params.marker_erosion);
        let anti = erode_inplane(&others, params.antimarker_erosion);
        for &z in slices {
            if z >= g.dims[2] {
                return Err(Error::Param(format!("annotated slice {z} outside volume")));
            }
            for vertices in mask_to_polygons(&markers, z) {
                polygons.push(PolygonAnnotation {
                    group,
                    kind: AnnotationKind::Marker,
                    slice: z,
                    vertices,
                });
            }
            for vertices in mask_to_polygons(&anti, z) {
                polygons.push(PolygonAnnotation {
                    group,
                    kind: AnnotationKind::AntiMarker,
                    slice: z,
                    vertices,
                });
            }
        }
    }
    Ok(AnnotationSet::new(polygons))
}
