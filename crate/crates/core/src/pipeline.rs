//! End-to-end run: bias correction, edge map, per-group geodesic penalties,
//! per-group level sets and label fusion, with every intermediate written to
//! the output directory.
//!
//! Each stage leaves a `<stage>.stamp` holding a fingerprint of its inputs and
//! parameters. With `resume` set, a stage whose stamp matches is loaded from
//! disk instead of recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{
    assemble_force, evolve_with_progress, extract_segmentation, init_phi, intensity_fit, FlowParams, SegmentationResult,
};
use crate::geodesic::{geodesic_speed, group_distances, AnnotationKind, AnnotationSet, GroupDistances, PenaltyParams};
use crate::metrics::dice;
use crate::pbcfcm::{
    build_masks, estimate_priors, run_pbcfcm, ClassMasks, ClassPriorField, IterationLog, PbcfcmParams,
};
use crate::phantom::{auto_annotations, generate_phantom, AutoAnnotationParams, PhantomParams};
use crate::rkhs::{edge_map_with_progress, edge_stopping, EdgeMap, PatchDiagnostics, RkhsParams};
use crate::volume::{load_labels, load_volume, save_labels, save_mask, save_volume, volume_paths};
use crate::volume::{resample, ScalarVolume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Bias,
    Edges,
    Distance,
    Flow,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Bias => "bias",
            Stage::Edges => "edges",
            Stage::Distance => "distance",
            Stage::Flow => "flow",
        }
    }
}

/// Observer for long runs. All methods default to no-ops.
pub trait Progress: Sync {
    fn stage(&self, _stage: Stage) {}
    /// Patch progress during the edge stage.
    fn patches(&self, _done: usize, _total: usize) {}
    fn flow_iteration(&self, _group: u8, _iteration: usize, _max_iter: usize) {}
}

pub struct NoProgress;

impl Progress for NoProgress {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub t1: PathBuf,
    /// Low-resolution fat-fraction image for the class priors; uniform priors without it.
    pub fat_fraction: Option<PathBuf>,
    pub annotations: PathBuf,
    /// Reference labels; when present, per-group Dice goes into the manifest.
    pub truth: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub skip_bias: bool,
    pub resume: bool,
    /// Slices expected to carry annotations (informational, checked against the annotation file).
    pub annotated_slices: Vec<usize>,
    pub pbcfcm: PbcfcmParams,
    pub rkhs: RkhsParams,
    pub penalty: PenaltyParams,
    pub flow: FlowParams,
    /// Per-group overrides of `flow`, keyed by group id.
    pub groups: BTreeMap<u8, FlowParams>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            t1: PathBuf::from("t1"),
            fat_fraction: None,
            annotations: PathBuf::from("annotations.json"),
            truth: None,
            output_dir: PathBuf::from("out"),
            skip_bias: false,
            resume: false,
            annotated_slices: Vec::new(),
            pbcfcm: PbcfcmParams::default(),
            rkhs: RkhsParams::default(),
            penalty: PenaltyParams::default(),
            flow: FlowParams::default(),
            groups: BTreeMap::new(),
        }
    }
}

fn volume_exists(p: &Path) -> bool {
    let (h, r) = volume_paths(p);
    h.is_file() && r.is_file()
}

impl PipelineConfig {
    /// Reads a JSON config; relative paths resolve against the config's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        cfg.rebase(&base);
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.t1);
        fix(&mut self.annotations);
        fix(&mut self.output_dir);
        if let Some(p) = self.fat_fraction.as_mut() {
            fix(p);
        }
        if let Some(p) = self.truth.as_mut() {
            fix(p);
        }
    }

    pub fn flow_for(&self, group: u8) -> &FlowParams {
        self.groups.get(&group).unwrap_or(&self.flow)
    }

    pub fn validate(&self) -> Result<()> {
        let missing = |what: &str, p: &Path| Error::Config(format!("{what} not found: {}", p.display()));
        if !volume_exists(&self.t1) {
            return Err(missing("t1 volume", &self.t1));
        }
        if !self.annotations.is_file() {
            return Err(missing("annotation file", &self.annotations));
        }
        if let Some(p) = &self.fat_fraction {
            if !volume_exists(p) {
                return Err(missing("fat-fraction volume", p));
            }
        }
        if let Some(p) = &self.truth {
            if !volume_exists(p) {
                return Err(missing("truth labels", p));
            }
        }
        if !self.skip_bias {
            self.pbcfcm.validate()?;
        }
        self.rkhs.validate()?;
        self.penalty.validate()?;
        self.flow.validate()?;
        for p in self.groups.values() {
            p.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub group: u8,
    pub iterations: usize,
    pub converged: bool,
    pub marker_voxels: usize,
    pub has_antimarkers: bool,
    pub voxels: usize,
    pub dice: Option<f64>,
}

/// `result.json`: everything needed to interpret a run without the log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultManifest {
    pub dims: [usize; 3],
    pub fov_mm: [f64; 3],
    pub skip_bias: bool,
    pub bias_iterations: Option<usize>,
    pub annotated_slices: Vec<usize>,
    pub groups: Vec<GroupReport>,
    /// Artifact name to path relative to the output directory.
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub segmentation: SegmentationResult,
    pub manifest: ResultManifest,
    pub corrected: ScalarVolume,
    pub edges: ScalarVolume,
    /// Stages served from a matching stamp.
    pub resumed: Vec<Stage>,
}

#[derive(Clone, Debug)]
pub struct BiasOutput {
    pub corrected: ScalarVolume,
    pub bias: ScalarVolume,
    pub iterations: usize,
    pub converged: bool,
    /// Threshold masks behind the priors; absent with uniform priors.
    pub masks: Option<ClassMasks>,
    pub log: Vec<IterationLog>,
}

/// Prior-informed bias correction; uniform priors when no fat-fraction image is given.
pub fn bias_stage(t1: &ScalarVolume, fat_fraction: Option<&ScalarVolume>, params: &PbcfcmParams) -> Result<BiasOutput> {
    let (priors, masks) = match fat_fraction {
        Some(ff) => {
            let ff = resample(ff, t1.geometry())?;
            let masks = build_masks(t1, &ff, params)?;
            (estimate_priors(&masks, params.prior_confidence)?, Some(masks))
        }
        None => (ClassPriorField::uniform(*t1.geometry(), params.n_clusters), None),
    };
    let out = run_pbcfcm(t1, &priors, params)?;
    Ok(BiasOutput {
        corrected: out.corrected,
        bias: out.state.bias,
        iterations: out.iterations,
        converged: out.converged,
        masks,
        log: out.log,
    })
}

/// Edge map of the min-max normalised corrected image.
pub fn edge_stage(corrected: &ScalarVolume, params: &RkhsParams, progress: &dyn Progress) -> Result<EdgeMap> {
    edge_map_with_progress(&corrected.normalized(), params, &|d, t| progress.patches(d, t))
}

/// Geodesic distances and penalties for every annotated group, in group order.
pub fn distance_stage(
    edges: &ScalarVolume,
    annotations: &AnnotationSet,
    params: &PenaltyParams,
) -> Result<Vec<GroupDistances>> {
    let report = annotations.validate(edges.geometry())?;
    if let Some(g) = report.missing_markers.first() {
        return Err(Error::Param(format!("group {g} has no marker polygons")));
    }
    if report.groups.is_empty() {
        return Err(Error::Empty("annotation set"));
    }
    let speed = geodesic_speed(edges, params);
    report
        .groups
        .par_iter()
        .map(|&g| group_distances(annotations, g, &speed, params))
        .collect()
}

/// Level sets for every group from precomputed penalties.
pub fn flow_stage(
    corrected: &ScalarVolume,
    edges: &ScalarVolume,
    distances: &[GroupDistances],
    params: &(dyn Fn(u8) -> FlowParams + Sync),
    progress: &dyn Progress,
) -> Result<SegmentationResult> {
    let z = corrected.normalized();
    let runs = distances
        .par_iter()
        .map(|d| {
            let p = params(d.group);
            p.validate()?;
            let g = edge_stopping(edges, p.alpha_edge)?;
            let (_, i) = intensity_fit(&z, &d.markers, p.psi_asym)?;
            let f = assemble_force(&g, &d.penalty, &i, &p)?;
            let phi = init_phi(&d.markers, d.group)?;
            evolve_with_progress(&phi, &f, &p, &|it, max| progress.flow_iteration(d.group, it, max))
        })
        .collect::<Result<Vec<_>>>()?;
    extract_segmentation(&runs)
}

/// 64-bit FNV-1a, used only to fingerprint stage inputs.
fn fnv1a(bytes: &[u8], mut h: u64) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

const FNV_SEED: u64 = 0xcbf2_9ce4_8422_2325;

fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = FNV_SEED;
    for p in parts {
        h = fnv1a(&(p.len() as u64).to_le_bytes(), h);
        h = fnv1a(p, h);
    }
    format!("{h:016x}")
}

fn file_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn volume_bytes(path: &Path) -> Result<Vec<u8>> {
    let (h, r) = volume_paths(path);
    let mut b = file_bytes(&h)?;
    b.extend(file_bytes(&r)?);
    Ok(b)
}

struct Run<'a> {
    out: &'a Path,
    resume: bool,
    completed: Vec<PathBuf>,
    resumed: Vec<Stage>,
}

impl Run<'_> {
    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.out.join(format!("{}.stamp", stage.name()))
    }

    fn cached(&self, stage: Stage, print: &str) -> bool {
        self.resume
            && fs::read_to_string(self.stamp_path(stage))
                .map(|s| s.trim() == print)
                .unwrap_or(false)
    }

    fn stamp(&mut self, stage: Stage, print: &str) -> Result<()> {
        let p = self.stamp_path(stage);
        fs::write(&p, format!("{print}\n")).map_err(|e| Error::io(&p, e))?;
        self.completed.push(p);
        Ok(())
    }

    fn fail(&self, stage: Stage) -> impl Fn(Error) -> Error + '_ {
        move |e| Error::Stage {
            stage: stage.name(),
            completed: self.completed.clone(),
            source: Box::new(e),
        }
    }
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("serializable")
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(v).expect("serializable");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn run_pipeline(config: &PipelineConfig) -> Result<PipelineOutput> {
    run_pipeline_with_progress(config, &NoProgress)
}

pub fn run_pipeline_with_progress(config: &PipelineConfig, progress: &dyn Progress) -> Result<PipelineOutput> {
    config.validate()?;
    let out = config.output_dir.as_path();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut run = Run {
        out,
        resume: config.resume,
        completed: Vec::new(),
        resumed: Vec::new(),
    };
    let mut artifacts = BTreeMap::new();
    let t1 = load_volume(&config.t1)?;
    let geo = *t1.geometry();
    let annotations = AnnotationSet::load(&config.annotations)?;
    let t1_bytes = volume_bytes(&config.t1)?;

    progress.stage(Stage::Bias);
    let bias_print = if config.skip_bias {
        fingerprint(&[b"skip", &t1_bytes])
    } else {
        let ff = match &config.fat_fraction {
            Some(p) => volume_bytes(p)?,
            None => Vec::new(),
        };
        fingerprint(&[b"pbcfcm", &t1_bytes, &ff, &json_bytes(&config.pbcfcm)])
    };
    let corrected_path = out.join("corrected");
    let mut bias_iterations = None;
    let corrected = if config.skip_bias {
        t1.clone()
    } else if run.cached(Stage::Bias, &bias_print) && volume_exists(&corrected_path) {
        run.resumed.push(Stage::Bias);
        load_volume(&corrected_path).map_err(run.fail(Stage::Bias))?
    } else {
        let t = std::time::Instant::now();
        let ff = config
            .fat_fraction
            .as_ref()
            .map(load_volume)
            .transpose()
            .map_err(run.fail(Stage::Bias))?;
        let b = bias_stage(&t1, ff.as_ref(), &config.pbcfcm).map_err(run.fail(Stage::Bias))?;
        log::info!("bias correction: {} iterations in {:.1?}", b.iterations, t.elapsed());
        bias_iterations = Some(b.iterations);
        save_volume(&b.corrected, &corrected_path)?;
        save_volume(&b.bias, out.join("bias"))?;
        write_json(
            &out.join("bias.json"),
            &serde_json::json!({ "iterations": b.iterations, "converged": b.converged }),
        )?;
        run.completed.push(volume_paths(&corrected_path).0);
        run.stamp(Stage::Bias, &bias_print)?;
        b.corrected
    };
    if !config.skip_bias {
        if bias_iterations.is_none() {
            let v: serde_json::Value =
                serde_json::from_slice(&file_bytes(&out.join("bias.json"))?).map_err(|e| Error::Json {
                    path: out.join("bias.json"),
                    source: e,
                })?;
            bias_iterations = v["iterations"].as_u64().map(|n| n as usize);
        }
        artifacts.insert("corrected".into(), "corrected.vol.json".into());
        artifacts.insert("bias".into(), "bias.vol.json".into());
    }

    progress.stage(Stage::Edges);
    let edge_print = fingerprint(&[bias_print.as_bytes(), &json_bytes(&config.rkhs)]);
    let edges_path = out.join("edges");
    let edges = if run.cached(Stage::Edges, &edge_print) && volume_exists(&edges_path) {
        run.resumed.push(Stage::Edges);
        load_volume(&edges_path).map_err(run.fail(Stage::Edges))?
    } else {
        let t = std::time::Instant::now();
        let e = edge_stage(&corrected, &config.rkhs, progress).map_err(run.fail(Stage::Edges))?;
        log::info!("edge map: {} patches in {:.1?}", e.diagnostics.len(), t.elapsed());
        save_volume(&e.edges, &edges_path)?;
        write_json(&out.join("edge_patches.json"), &e.diagnostics)?;
        run.completed.push(volume_paths(&edges_path).0);
        run.stamp(Stage::Edges, &edge_print)?;
        e.edges
    };
    artifacts.insert("edges".into(), "edges.vol.json".into());
    artifacts.insert("edge_patches".into(), "edge_patches.json".into());

    progress.stage(Stage::Distance);
    let t = std::time::Instant::now();
    let distances = distance_stage(&edges, &annotations, &config.penalty).map_err(run.fail(Stage::Distance))?;
    log::info!(
        "geodesic distances for {} groups in {:.1?}",
        distances.len(),
        t.elapsed()
    );
    for d in &distances {
        let dir = format!("group_{}", d.group);
        save_volume(&d.marker_distance.distance, out.join(&dir).join("marker_distance"))?;
        artifacts.insert(
            format!("{dir}/marker_distance"),
            format!("{dir}/marker_distance.vol.json"),
        );
        if let Some(a) = &d.antimarker_distance {
            save_volume(&a.distance, out.join(&dir).join("antimarker_distance"))?;
            artifacts.insert(
                format!("{dir}/antimarker_distance"),
                format!("{dir}/antimarker_distance.vol.json"),
            );
        }
        save_volume(&d.penalty, out.join(&dir).join("penalty"))?;
        artifacts.insert(format!("{dir}/penalty"), format!("{dir}/penalty.vol.json"));
        run.completed.push(out.join(&dir));
    }

    progress.stage(Stage::Flow);
    let t = std::time::Instant::now();
    let mut seg = flow_stage(
        &corrected,
        &edges,
        &distances,
        &|g| config.flow_for(g).clone(),
        progress,
    )
    .map_err(run.fail(Stage::Flow))?;
    log::info!("level sets in {:.1?}", t.elapsed());
    let truth = config.truth.as_ref().map(load_labels).transpose()?;
    if let Some(truth) = &truth {
        if !truth.geometry().same_grid(&geo) {
            return Err(Error::GeometryMismatch("truth labels do not match the t1 grid".into()));
        }
        for g in seg.groups.iter_mut() {
            g.dice = Some(dice(&seg.labels.mask_of(g.group), &truth.mask_of(g.group))?);
        }
    }
    for g in &seg.groups {
        let dir = format!("group_{}", g.group);
        save_mask(&g.mask, out.join(&dir).join("mask"))?;
        artifacts.insert(format!("{dir}/mask"), format!("{dir}/mask.vol.json"));
    }
    save_labels(&seg.labels, out.join("labels"))?;
    artifacts.insert("labels".into(), "labels.vol.json".into());

    let groups = seg
        .groups
        .iter()
        .zip(&distances)
        .map(|(s, d)| GroupReport {
            group: s.group,
            iterations: s.iterations,
            converged: s.converged,
            marker_voxels: d.markers.count(),
            has_antimarkers: d.antimarker_distance.is_some(),
            voxels: seg.labels.data().iter().filter(|&&l| l == s.group).count(),
            dice: s.dice,
        })
        .collect();
    let slices = annotations.annotated_slices();
    if !config.annotated_slices.is_empty() && config.annotated_slices != slices {
        log::warn!(
            "annotations cover slices {slices:?}, config lists {:?}",
            config.annotated_slices
        );
    }
    let manifest = ResultManifest {
        dims: geo.dims,
        fov_mm: geo.fov_mm,
        skip_bias: config.skip_bias,
        bias_iterations,
        annotated_slices: slices,
        groups,
        artifacts,
    };
    write_json(&out.join("result.json"), &manifest)?;
    Ok(PipelineOutput {
        segmentation: seg,
        manifest,
        corrected,
        edges,
        resumed: run.resumed,
    })
}

/// Per-patch diagnostics as a text table.
pub fn diagnostics_table(diags: &[PatchDiagnostics]) -> String {
    let mut s = format!(
        "{:>6} {:>5} {:>5} {:>5} {:>6} {:>10} {:>8}\n",
        "patch", "slice", "x0", "y0", "iters", "residual", "sparsity"
    );
    for d in diags {
        s.push_str(&format!(
            "{:>6} {:>5} {:>5} {:>5} {:>6} {:>10.3e} {:>8.4}\n",
            d.id, d.slice, d.x0, d.y0, d.iterations, d.residual, d.sparsity
        ));
    }
    s
}

/// Writes a phantom case (`t1`, `fat_fraction`, `truth`, `annotations.json`,
/// `config.json`) into `dir` and returns the config path.
pub fn write_phantom_case(
    dir: impl AsRef<Path>,
    params: &PhantomParams,
    slices: &[usize],
    annotation: AutoAnnotationParams,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bundle = generate_phantom(params)?;
    save_volume(&bundle.t1_like, dir.join("t1"))?;
    save_volume(&bundle.fat_fraction_like, dir.join("fat_fraction"))?;
    save_labels(&bundle.truth_labels, dir.join("truth"))?;
    save_volume(&bundle.true_bias, dir.join("true_bias"))?;
    let ann = auto_annotations(&bundle.truth_labels, slices, annotation)?;
    ann.save(dir.join("annotations.json"))?;
    let cfg = PipelineConfig {
        t1: "t1".into(),
        fat_fraction: Some("fat_fraction".into()),
        annotations: "annotations.json".into(),
        truth: Some("truth".into()),
        output_dir: "out".into(),
        annotated_slices: slices.to_vec(),
        ..PipelineConfig::default()
    };
    let path = dir.join("config.json");
    cfg.save(&path)?;
    Ok(path)
}

/// `true` when every group has both markers and anti-markers.
pub fn annotations_complete(annotations: &AnnotationSet) -> bool {
    annotations
        .groups()
        .iter()
        .all(|&g| annotations.has(g, AnnotationKind::Marker) && annotations.has(g, AnnotationKind::AntiMarker))
}
