use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use facerig::displacement::{bake_displacement, representation_error, DisplacementMap};
use facerig::dynamic_detail::{
    blend_displacement, compute_activation_masks, compute_weight_masks, load_bundle, rig_detailed_mesh,
    DirectoryProvider, DisplacementProvider,
};
use facerig::fitting::{fit_image, AlbedoModel, FitResult};
use facerig::mesh::io::{load_mesh, save_mesh};
use facerig::morphable::{
    assemble_tensor, generate_blendshapes, relative_reconstruction_error, tucker_decompose, BilinearModel,
    BlendshapeRig,
};
use facerig::registration::{mean_surface_distance, register_scan_set, LandmarkSet};
use facerig::render::LinearImage;
use facerig::synthetic::{generate_population, load_albedo, random_fit_state, render_fit_case, PopulationManifest};
use facerig::Mesh;
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::report::{Recorder, REPORT_FILE};
use crate::{
    BakeArgs, BuildModelArgs, ExportBundleArgs, FitArgs, Output, RegisterArgs, RenderArgs, RigArgs, SynthArgs,
};

pub const MODEL_FILE: &str = "model.bin";
pub const ALBEDO_FILE: &str = "albedo.bin";
pub const LANDMARKS_FILE: &str = "landmarks.json";
pub const INDEX_FILE: &str = "index.json";
pub const FIT_FILE: &str = "fit.json";

pub enum Failure {
    /// Bad arguments, configuration or missing inputs (exit 2).
    Usage(anyhow::Error),
    /// A pipeline stage failed (exit 1).
    Pipeline(&'static str, anyhow::Error),
}

trait Stage<T> {
    fn stage(self, name: &'static str) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn stage(self, name: &'static str) -> Result<T, Failure> {
        self.map_err(|e| Failure::Pipeline(name, e.into()))
    }
}

fn usage(msg: String) -> Failure {
    Failure::Usage(anyhow!(msg))
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("input {} does not exist", path.display())))
    }
}

/// Creates an empty output directory. An existing non-empty directory is
/// replaced only with `--force`, and only when an earlier run produced it.
fn prepare_output(o: &Output) -> Result<(), Failure> {
    let out = &o.out;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    if !parent.is_dir() {
        return Err(usage(format!("output parent {} does not exist", parent.display())));
    }
    if out.exists() {
        if !out.is_dir() {
            return Err(usage(format!("{} is not a directory", out.display())));
        }
        let empty = std::fs::read_dir(out)
            .map_err(|e| Failure::Usage(e.into()))?
            .next()
            .is_none();
        if !empty {
            if !o.force {
                return Err(usage(format!(
                    "{} is not empty; pass --force to replace it",
                    out.display()
                )));
            }
            if !out.join(REPORT_FILE).is_file() {
                return Err(usage(format!(
                    "refusing to replace {}: it holds no {REPORT_FILE}",
                    out.display()
                )));
            }
            std::fs::remove_dir_all(out).stage("io")?;
        }
    }
    std::fs::create_dir_all(out).stage("io")?;
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn max(v: &[f64]) -> f64 {
    v.iter().copied().fold(0.0, f64::max)
}

fn load_meshes(root: &Path, files: &[String]) -> facerig::Result<Vec<Mesh>> {
    files.iter().map(|f| load_mesh(root.join(f))).collect()
}

/// Registered meshes per subject, relative to the registration directory.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisteredIndex {
    pub subjects: Vec<RegisteredSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisteredSubject {
    /// Subject directory name, shared with the dataset.
    pub dir: String,
    pub meshes: Vec<String>,
}

impl RegisteredIndex {
    fn load(root: &Path) -> anyhow::Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    fn grid(&self, root: &Path) -> facerig::Result<Vec<Vec<Mesh>>> {
        self.subjects.par_iter().map(|s| load_meshes(root, &s.meshes)).collect()
    }
}

pub fn synth(cfg: &PipelineConfig, a: &SynthArgs) -> Result<(), Failure> {
    let out = &a.output.out;
    prepare_output(&a.output)?;
    let rec = Recorder::start("synth");
    let manifest = generate_population(out, &cfg.population()).stage("synthetic")?;
    let metrics = json!({
        "identities": manifest.subjects.len(),
        "expressions": cfg.synth.expressions,
        "base_vertex_count": manifest.base_vertex_count,
        "scan_vertex_count": manifest.scan_vertex_count,
        "files": manifest.files().len(),
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    info!("wrote {} subjects to {}", manifest.subjects.len(), out.display());
    Ok(())
}

pub fn register(cfg: &PipelineConfig, a: &RegisterArgs) -> Result<(), Failure> {
    require(&a.dataset)?;
    let manifest = PopulationManifest::load(&a.dataset).stage("synthetic")?;
    prepare_output(&a.output)?;
    let (root, out) = (&a.dataset, &a.output.out);
    let mut rec = Recorder::start("register");
    rec.input("dataset", root).stage("report")?;
    let templates = load_meshes(root, &manifest.template.meshes).stage("mesh_core")?;
    let take = a.subjects.unwrap_or(usize::MAX);
    let results = manifest
        .subjects
        .par_iter()
        .take(take)
        .map(|s| -> anyhow::Result<_> {
            let scans = load_meshes(root, &s.scans)?;
            let landmarks = s
                .landmarks
                .iter()
                .map(|f| LandmarkSet::load(root.join(f)))
                .collect::<facerig::Result<Vec<_>>>()?;
            let reg = register_scan_set(
                &templates[0],
                &scans[0],
                &scans[1..],
                &templates[1..],
                &landmarks,
                &cfg.nicp,
            )
            .with_context(|| format!("registering {}", s.dir))?;
            let truth = load_meshes(root, &s.truth_base)?;
            let mut names = Vec::new();
            for (e, m) in reg.iter().enumerate() {
                let name = format!("{}/expression_{e:02}.ply", s.dir);
                std::fs::create_dir_all(out.join(&s.dir))?;
                save_mesh(m, out.join(&name))?;
                names.push(name);
            }
            let surface: Vec<f64> = reg
                .iter()
                .zip(&scans)
                .map(|(r, s)| mean_surface_distance(r, s))
                .collect();
            let truth_err: Vec<f64> = reg
                .iter()
                .zip(&truth)
                .map(|(r, t)| {
                    mean(
                        &r.vertices
                            .iter()
                            .zip(&t.vertices)
                            .map(|(p, q)| (p - q).norm())
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            info!("registered {}: mean vertex error {:.4} mm", s.dir, mean(&truth_err));
            Ok((
                RegisteredSubject {
                    dir: s.dir.clone(),
                    meshes: names,
                },
                json!({ "dir": s.dir, "surface_distance_mm": surface, "truth_vertex_error_mm": truth_err }),
                truth_err,
            ))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .stage("registration")?;
    let all_err: Vec<f64> = results.iter().flat_map(|r| r.2.iter().copied()).collect();
    let per_subject: Vec<_> = results.iter().map(|r| r.1.clone()).collect();
    let index = RegisteredIndex {
        subjects: results.into_iter().map(|r| r.0).collect(),
    };
    std::fs::write(out.join(INDEX_FILE), serde_json::to_string_pretty(&index).stage("io")?).stage("io")?;
    let metrics = json!({
        "subjects": per_subject,
        "mean_truth_vertex_error_mm": mean(&all_err),
        "max_truth_vertex_error_mm": max(&all_err),
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    Ok(())
}

pub fn bake(cfg: &PipelineConfig, a: &BakeArgs) -> Result<(), Failure> {
    require(&a.dataset)?;
    require(&a.registered)?;
    let manifest = PopulationManifest::load(&a.dataset).stage("synthetic")?;
    let index = RegisteredIndex::load(&a.registered).stage("registration")?;
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let mut rec = Recorder::start("bake");
    rec.input("dataset", &a.dataset).stage("report")?;
    rec.input("registered", &a.registered).stage("report")?;
    let per_subject = index
        .subjects
        .iter()
        .map(|rs| -> anyhow::Result<_> {
            let s = manifest
                .subjects
                .iter()
                .find(|s| s.dir == rs.dir)
                .ok_or_else(|| anyhow!("{} is not in the dataset", rs.dir))?;
            let bases = load_meshes(&a.registered, &rs.meshes)?;
            let scans = load_meshes(&a.dataset, &s.scans)?;
            if bases.len() != scans.len() {
                anyhow::bail!("{}: {} registered meshes for {} scans", rs.dir, bases.len(), scans.len());
            }
            let maps = bases
                .par_iter()
                .zip(&scans)
                .map(|(b, r)| bake_displacement(b, r, cfg.bake.resolution, cfg.bake.smooth_raw))
                .collect::<facerig::Result<Vec<DisplacementMap<f64>>>>()?;
            let errs = maps
                .par_iter()
                .zip(&bases)
                .zip(&scans)
                .map(|((m, b), r)| representation_error(r, b, m, cfg.bake.subdiv))
                .collect::<facerig::Result<Vec<_>>>()?;
            DirectoryProvider::write(out.join(&rs.dir), &maps)?;
            info!("baked {} maps for {}", maps.len(), rs.dir);
            Ok(json!({
                "dir": rs.dir,
                "mae_mm": errs.iter().map(|e| e.mae).collect::<Vec<_>>(),
                "p95_mm": errs.iter().map(|e| e.p95).collect::<Vec<_>>(),
                "size_ratio": errs.iter().map(|e| e.size_ratio).collect::<Vec<_>>(),
                "valid_fraction": maps.iter().map(|m| m.valid_count() as f64 / m.values().len() as f64).collect::<Vec<_>>(),
            }))
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .stage("displacement")?;
    let maes: Vec<f64> = per_subject
        .iter()
        .flat_map(|s| s["mae_mm"].as_array().into_iter().flatten().filter_map(|v| v.as_f64()))
        .collect();
    let metrics = json!({
        "resolution": cfg.bake.resolution,
        "subjects": per_subject,
        "mean_mae_mm": mean(&maes),
        "max_mae_mm": max(&maes),
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    Ok(())
}

pub fn build_model(cfg: &PipelineConfig, a: &BuildModelArgs) -> Result<(), Failure> {
    require(&a.dataset)?;
    require(&a.registered)?;
    let manifest = PopulationManifest::load(&a.dataset).stage("synthetic")?;
    let index = RegisteredIndex::load(&a.registered).stage("registration")?;
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let mut rec = Recorder::start("build-model");
    rec.input("dataset", &a.dataset).stage("report")?;
    rec.input("registered", &a.registered).stage("report")?;

    let grid = index.grid(&a.registered).stage("mesh_core")?;
    let tensor = assemble_tensor(&grid, true).stage("morphable")?;
    let model =
        tucker_decompose(&tensor, cfg.model.rank_id, cfg.model.rank_exp, cfg.model.method).stage("morphable")?;
    let rel_error = relative_reconstruction_error(&tensor, &model);
    model.save(out.join(MODEL_FILE)).stage("morphable")?;

    let samples = index
        .subjects
        .iter()
        .map(|rs| -> anyhow::Result<Vec<f64>> {
            let s = manifest
                .subjects
                .iter()
                .find(|s| s.dir == rs.dir)
                .ok_or_else(|| anyhow!("{} is not in the dataset", rs.dir))?;
            Ok(load_albedo(a.dataset.join(&s.albedo))?
                .iter()
                .flat_map(|c| c.iter().copied())
                .collect())
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .stage("fitting")?;
    let k = cfg.model.albedo_components.min(samples.len().saturating_sub(1)).max(1);
    let albedo = AlbedoModel::from_samples(&samples, k).stage("fitting")?;
    albedo.save(out.join(ALBEDO_FILE)).stage("fitting")?;

    let layout = LandmarkSet::load(a.dataset.join(&manifest.template.landmarks)).stage("registration")?;
    layout.validate(model.template.vertex_count()).stage("registration")?;
    layout.save(out.join(LANDMARKS_FILE)).stage("registration")?;

    let metrics = json!({
        "identities": model.identities(),
        "expressions": model.expressions(),
        "rank_id": model.r_id(),
        "rank_exp": model.r_exp(),
        "relative_reconstruction_error": rel_error,
        "id_energy": model.id_energy,
        "exp_energy": model.exp_energy,
        "albedo_components": albedo.components(),
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    info!(
        "model ({}, {}) relative error {rel_error:.3e}",
        model.r_id(),
        model.r_exp()
    );
    Ok(())
}

struct ModelDir {
    model: BilinearModel,
    albedo: AlbedoModel,
}

fn load_model_dir(dir: &Path, rec: &mut Recorder) -> Result<ModelDir, Failure> {
    require(dir)?;
    rec.input("model", dir).stage("report")?;
    Ok(ModelDir {
        model: BilinearModel::load(dir.join(MODEL_FILE)).stage("morphable")?,
        albedo: AlbedoModel::load(dir.join(ALBEDO_FILE)).stage("fitting")?,
    })
}

pub fn render(cfg: &PipelineConfig, a: &RenderArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("render");
    let md = load_model_dir(&a.model, &mut rec)?;
    let layout = LandmarkSet::load(a.model.join(LANDMARKS_FILE)).stage("registration")?;
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let size = cfg.render.size;
    let state = random_fit_state(&md.model, &md.albedo, cfg.seed, size);
    let case = render_fit_case(&md.model, &md.albedo, &layout, state, size).stage("render")?;
    case.image.save(out.join("image.png")).stage("render")?;
    case.landmarks.save(out.join(LANDMARKS_FILE)).stage("render")?;
    std::fs::write(
        out.join("truth.json"),
        serde_json::to_string_pretty(&case.state).stage("io")?,
    )
    .stage("io")?;
    save_mesh(&case.mesh, out.join("truth.ply")).stage("render")?;
    let metrics = json!({ "size": size, "seed": cfg.seed, "landmarks": case.landmarks.len() });
    rec.finish(out, cfg, metrics).stage("report")?;
    Ok(())
}

pub fn fit(cfg: &PipelineConfig, a: &FitArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("fit");
    let md = load_model_dir(&a.model, &mut rec)?;
    require(&a.image)?;
    require(&a.landmarks)?;
    rec.input("image", &a.image).stage("report")?;
    rec.input("landmarks", &a.landmarks).stage("report")?;
    let image = LinearImage::load(&a.image).stage("render")?;
    let landmarks = LandmarkSet::load(&a.landmarks).stage("registration")?;
    let truth = match &a.truth {
        Some(p) => {
            require(p)?;
            rec.input("truth", p).stage("report")?;
            Some(load_mesh::<f64>(p).stage("mesh_core")?)
        }
        None => None,
    };
    prepare_output(&a.output)?;
    let out = &a.output.out;

    let result = fit_image(&md.model, &md.albedo, &image, &landmarks, &cfg.fit).stage("fitting")?;
    result.save(out.join(FIT_FILE)).stage("fitting")?;
    let mesh = md
        .model
        .synthesize_mesh(&result.w_id, &result.w_exp)
        .stage("morphable")?;
    save_mesh(&mesh, out.join("mesh.ply")).stage("mesh_core")?;

    let points = landmarks.points2d.as_deref().unwrap_or_default();
    let sq: Vec<f64> = result
        .landmark_vertex_ids
        .iter()
        .zip(points)
        .map(|(&v, p)| (result.pose.project(&mesh.vertices[v as usize]) - p).norm_squared())
        .collect();
    let landmark_rmse = mean(&sq).sqrt();
    let vertex_rms = match &truth {
        Some(t) if t.vertex_count() == mesh.vertex_count() => {
            let d: Vec<f64> = mesh
                .vertices
                .iter()
                .zip(&t.vertices)
                .map(|(p, q)| (p - q).norm_squared())
                .collect();
            Some(mean(&d).sqrt())
        }
        Some(t) => {
            return Err(Failure::Pipeline(
                "fitting",
                anyhow!(
                    "truth mesh has {} vertices, model {}",
                    t.vertex_count(),
                    mesh.vertex_count()
                ),
            ))
        }
        None => None,
    };
    let totals: Vec<f64> = result.energy_trace.iter().map(|e| e.total).collect();
    let monotone = totals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9));
    let metrics = json!({
        "iterations": result.iterations,
        "line_search_exhausted": result.line_search_exhausted,
        "final_energy": result.final_energy(),
        "energy_monotone": monotone,
        "landmark_rmse_px": landmark_rmse,
        "vertex_rms_mm": vertex_rms,
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    info!("fit: landmark rmse {landmark_rmse:.3} px, vertex rms {vertex_rms:?}");
    Ok(())
}

fn open_maps(dir: &Path, rec: &mut Recorder) -> Result<DirectoryProvider, Failure> {
    require(dir)?;
    rec.input("maps", dir).stage("report")?;
    DirectoryProvider::open(dir).stage("dynamic_detail")
}

fn same_map(a: &DisplacementMap<f64>, b: &DisplacementMap<f64>) -> bool {
    a.resolution() == b.resolution() && a.valid() == b.valid() && a.values() == b.values()
}

pub fn rig(cfg: &PipelineConfig, a: &RigArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("rig");
    let md = load_model_dir(&a.model, &mut rec)?;
    require(&a.fit)?;
    rec.input("fit", &a.fit).stage("report")?;
    let fit = FitResult::load(a.fit.join(FIT_FILE)).stage("fitting")?;
    let provider = open_maps(&a.maps, &mut rec)?;
    let provider_ref: &dyn DisplacementProvider<f64> = &provider;

    let rig = generate_blendshapes(&md.model, &fit.w_id).stage("morphable")?;
    let alpha = cfg
        .rig
        .alpha
        .clone()
        .unwrap_or_else(|| vec![0.0; rig.blendshape_count()]);
    if alpha.len() != rig.blendshape_count() {
        return Err(usage(format!(
            "alpha has {} entries, the rig has {} blendshapes",
            alpha.len(),
            rig.blendshape_count()
        )));
    }
    prepare_output(&a.output)?;
    let out = &a.output.out;
    rig.save(out).stage("morphable")?;

    let masks =
        compute_activation_masks(&rig, provider_ref.resolution(), cfg.rig.normalization).stage("dynamic_detail")?;
    let weights = compute_weight_masks(&masks, &alpha, &rig.key_weights).stage("dynamic_detail")?;
    let blended = blend_displacement(provider_ref, &weights).stage("dynamic_detail")?;
    blended.save(out.join("blended_map.png")).stage("displacement")?;
    let detailed = rig_detailed_mesh(&rig, &alpha, &masks, provider_ref, cfg.rig.subdiv).stage("dynamic_detail")?;
    save_mesh(&detailed, out.join("detailed.ply")).stage("mesh_core")?;
    let neutral = provider_ref.get(0).stage("dynamic_detail")?;

    let metrics = json!({
        "blendshapes": rig.blendshape_count(),
        "keys": rig.key_weights.len(),
        "resolution": provider_ref.resolution(),
        "alpha": alpha,
        "key_weights": rig.key_weights,
        "blended_equals_neutral": same_map(&blended, &neutral),
        "detailed_vertex_count": detailed.vertex_count(),
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    Ok(())
}

pub fn export_bundle(cfg: &PipelineConfig, a: &ExportBundleArgs) -> Result<(), Failure> {
    let mut rec = Recorder::start("export-bundle");
    require(&a.rig)?;
    rec.input("rig", &a.rig).stage("report")?;
    let rig = BlendshapeRig::load(&a.rig).stage("morphable")?;
    let provider = open_maps(&a.maps, &mut rec)?;
    let masks = compute_activation_masks(
        &rig,
        DisplacementProvider::<f64>::resolution(&provider),
        cfg.rig.normalization,
    )
    .stage("dynamic_detail")?;
    prepare_output(&a.output)?;
    let out = &a.output.out;
    let manifest =
        facerig::dynamic_detail::export_bundle(out, &rig, &masks, &provider, cfg.seed).stage("dynamic_detail")?;
    let bundle = load_bundle(out).stage("dynamic_detail")?;
    let metrics = json!({
        "vertex_count": manifest.vertex_count,
        "blendshapes": manifest.blendshape_count,
        "keys": manifest.key_count,
        "resolution": manifest.resolution,
        "conformance_cases": bundle.conformance.cases.len(),
        "conformance_tolerance": bundle.conformance.tolerance,
    });
    rec.finish(out, cfg, metrics).stage("report")?;
    Ok(())
}
