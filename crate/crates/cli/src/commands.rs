use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use geoflow_core::metrics::DiceReport;
use geoflow_core::phantom::{default_annotated_slices, AutoAnnotationParams, PhantomParams};
use geoflow_core::pipeline::{
    bias_stage, diagnostics_table, distance_stage, edge_stage, flow_stage, run_pipeline_with_progress,
    write_phantom_case, PipelineConfig, Progress, Stage,
};
use geoflow_core::volume::{load_labels, load_volume, save_mask, save_volume};
use geoflow_core::AnnotationSet;
use serde_json::json;

use crate::cli::{BiasArgs, DiceArgs, DistanceArgs, EdgesArgs, PhantomArgs, PipelineArgs, SegmentArgs, ServeArgs};

/// Logs stage changes, edge patches in tenths and every hundredth flow iteration.
#[derive(Default)]
pub struct LogProgress {
    last_tenth: AtomicUsize,
}

impl Progress for LogProgress {
    fn stage(&self, stage: Stage) {
        log::info!("stage: {}", stage.name());
        self.last_tenth.store(0, Ordering::Relaxed);
    }

    fn patches(&self, done: usize, total: usize) {
        let tenth = done * 10 / total.max(1);
        if self.last_tenth.fetch_max(tenth, Ordering::Relaxed) < tenth {
            log::info!("edges: {done}/{total} patches");
        }
    }

    fn flow_iteration(&self, group: u8, iteration: usize, max_iter: usize) {
        if iteration > 0 && iteration.is_multiple_of(100) {
            log::info!("flow: group {group} iteration {iteration}/{max_iter}");
        }
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn phantom(a: &PhantomArgs, seed: Option<u64>) -> Result<()> {
    let mut params = match &a.params {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => PhantomParams::default(),
    };
    if let Some(d) = a.dims {
        params.dims = d;
    }
    if let Some(f) = a.fov {
        params.fov_mm = f;
    }
    if let Some(n) = a.groups {
        params.n_groups = n;
    }
    if let Some(b) = a.bias {
        params.bias_amplitude = b;
    }
    if let Some(n) = a.noise {
        params.noise_sigma = n;
    }
    if let Some(s) = seed {
        params.seed = s;
    }
    let slices = a
        .slices
        .clone()
        .unwrap_or_else(|| default_annotated_slices(params.dims[2]));
    let config = write_phantom_case(&a.out, &params, &slices, AutoAnnotationParams::default())?;
    let truth = load_labels(a.out.join("truth"))?;
    let manifest = json!({
        "params": params,
        "groups": truth.labels().iter().filter(|&&l| l != 0).collect::<Vec<_>>(),
        "annotated_slices": slices,
        "files": {
            "t1": "t1.vol.json",
            "fat_fraction": "fat_fraction.vol.json",
            "truth": "truth.vol.json",
            "true_bias": "true_bias.vol.json",
            "annotations": "annotations.json",
            "config": "config.json",
        },
    });
    write_text(
        &a.out.join("truth.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )?;
    println!("phantom {:?} written to {}", params.dims, a.out.display());
    println!("config: {}", config.display());
    Ok(())
}

pub fn bias_correct(a: &BiasArgs, cfg: &PipelineConfig) -> Result<()> {
    let t1 = load_volume(&a.t1)?;
    let ff = a.fat_fraction.as_ref().map(load_volume).transpose()?;
    let t = Instant::now();
    let out = bias_stage(&t1, ff.as_ref(), &cfg.pbcfcm)?;
    mkdir(&a.out)?;
    save_volume(&out.corrected, a.out.join("corrected"))?;
    save_volume(&out.bias, a.out.join("bias"))?;
    if let Some(m) = &out.masks {
        save_mask(&m.background, a.out.join("mask_background"))?;
        save_mask(&m.muscle, a.out.join("mask_muscle"))?;
        save_mask(&m.fat, a.out.join("mask_fat"))?;
    }
    let mut log = String::from("# iter objective delta_v_inf\n");
    for l in &out.log {
        writeln!(log, "{} {:.10e} {:.6e}", l.iter, l.objective, l.delta_v)?;
    }
    write_text(&a.out.join("pbcfcm.log"), &log)?;
    println!(
        "bias correction: {} iterations ({}) in {:.1?}",
        out.iterations,
        if out.converged { "converged" } else { "iteration cap" },
        t.elapsed()
    );
    Ok(())
}

pub fn edges(a: &EdgesArgs, cfg: &PipelineConfig) -> Result<()> {
    let vol = load_volume(&a.input)?;
    let t = Instant::now();
    let e = edge_stage(&vol, &cfg.rkhs, &LogProgress::default())?;
    mkdir(&a.out)?;
    save_volume(&e.edges, a.out.join("edges"))?;
    write_text(&a.out.join("edge_patches.txt"), &diagnostics_table(&e.diagnostics))?;
    println!("edge map: {} patches in {:.1?}", e.diagnostics.len(), t.elapsed());
    Ok(())
}

pub fn distance(a: &DistanceArgs, cfg: &PipelineConfig) -> Result<()> {
    let edges = load_volume(&a.edges)?;
    let ann = AnnotationSet::load(&a.annotations)?;
    let distances = distance_stage(&edges, &ann, &cfg.penalty)?;
    for d in &distances {
        let dir = a.out.join(format!("group_{}", d.group));
        save_volume(&d.marker_distance.distance, dir.join("marker_distance"))?;
        if let Some(am) = &d.antimarker_distance {
            save_volume(&am.distance, dir.join("antimarker_distance"))?;
        }
        save_volume(&d.penalty, dir.join("penalty"))?;
        println!(
            "group {}: {} marker voxels, anti-markers: {}",
            d.group,
            d.markers.count(),
            if d.antimarker_distance.is_some() { "yes" } else { "none" }
        );
    }
    Ok(())
}

pub fn segment(a: &SegmentArgs, cfg: &PipelineConfig) -> Result<()> {
    let corrected = load_volume(&a.corrected)?;
    let edges = load_volume(&a.edges)?;
    let ann = AnnotationSet::load(&a.annotations)?;
    let distances = distance_stage(&edges, &ann, &cfg.penalty)?;
    let seg = flow_stage(
        &corrected,
        &edges,
        &distances,
        &|g| cfg.flow_for(g).clone(),
        &LogProgress::default(),
    )?;
    let mut log = String::from("# group iterations converged voxels\n");
    for g in &seg.groups {
        save_mask(&g.mask, a.out.join(format!("group_{}", g.group)).join("mask"))?;
        let voxels = seg.labels.data().iter().filter(|&&l| l == g.group).count();
        writeln!(log, "{} {} {} {}", g.group, g.iterations, g.converged, voxels)?;
    }
    geoflow_core::volume::save_labels(&seg.labels, a.out.join("labels"))?;
    write_text(&a.out.join("segment.log"), &log)?;
    print!("{log}");
    Ok(())
}

pub fn dice(a: &DiceArgs) -> Result<()> {
    if a.pred.len() != a.truth.len() {
        bail!("{} --pred volumes but {} --truth volumes", a.pred.len(), a.truth.len());
    }
    if !a.name.is_empty() && a.name.len() != a.pred.len() {
        bail!("{} --name values for {} cases", a.name.len(), a.pred.len());
    }
    let mut report = DiceReport::default();
    for (i, (p, t)) in a.pred.iter().zip(&a.truth).enumerate() {
        let name = a.name.get(i).cloned().unwrap_or_else(|| {
            p.parent()
                .and_then(|d| d.file_name())
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("case{i}"))
        });
        report.add_case(name, &load_labels(p)?, &load_labels(t)?)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_table());
    }
    Ok(())
}

pub fn pipeline(a: &PipelineArgs, mut cfg: PipelineConfig) -> Result<()> {
    cfg.resume |= a.resume;
    cfg.skip_bias |= a.skip_bias;
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    let t = Instant::now();
    let out = run_pipeline_with_progress(&cfg, &LogProgress::default())?;
    for s in &out.resumed {
        println!("reused stage: {}", s.name());
    }
    for g in &out.manifest.groups {
        let dice = g.dice.map(|d| format!(", dice {:.2}%", 100.0 * d)).unwrap_or_default();
        println!(
            "group {}: {} iterations{}, {} voxels{dice}",
            g.group,
            g.iterations,
            if g.converged { "" } else { " (iteration cap)" },
            g.voxels
        );
    }
    println!("outputs in {} ({:.1?})", cfg.output_dir.display(), t.elapsed());
    Ok(())
}

pub fn serve(a: &ServeArgs, cfg: PipelineConfig) -> Result<()> {
    let session = crate::service::Session::open(cfg)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(crate::service::serve(session, (a.host, a.port).into()))
}
