use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{EXP_DIMS, ID_DIMS};
use super::subject::{
    default_expression, generate_subject, landmark_layout, template_meshes, ResolutionTier, SyntheticSpec, WrinkleSpec,
};
use crate::error::{Error, Result};
use crate::mesh::io::save_mesh;

pub const DATASET_FORMAT: &str = "facerig-synthetic";
pub const DATASET_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCHEMA_FILE: &str = "schema.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub identities: usize,
    pub expressions: usize,
    pub seed: u64,
    pub tier: ResolutionTier,
    pub wrinkle: WrinkleSpec,
    /// Resolution of the stored truth displacement maps; `None` skips them.
    pub truth_map_resolution: Option<usize>,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            identities: 10,
            expressions: 5,
            seed: 7,
            tier: ResolutionTier::Full,
            wrinkle: WrinkleSpec::default(),
            truth_map_resolution: Some(256),
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Invalid("a population needs at least two identities".into()));
        }
        if self.expressions == 0 {
            return Err(Error::Invalid("a population needs at least one expression".into()));
        }
        if self.truth_map_resolution == Some(0) {
            return Err(Error::Invalid("truth map resolution must be positive".into()));
        }
        Ok(())
    }

    /// Subject specs in identity order; identity parameters are standard normal draws.
    pub fn specs(&self) -> Vec<SyntheticSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let exp_params: Vec<[f64; EXP_DIMS]> = (0..self.expressions).map(default_expression).collect();
        (0..self.identities)
            .map(|_| {
                let id_params: [f64; ID_DIMS] = std::array::from_fn(|_| rng.sample(StandardNormal));
                SyntheticSpec {
                    id_seed: rng.random(),
                    id_params,
                    exp_params: exp_params.clone(),
                    wrinkle: self.wrinkle,
                    tier: self.tier,
                }
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateFiles {
    /// Mean head per expression, neutral first.
    pub meshes: Vec<String>,
    pub landmarks: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectFiles {
    pub dir: String,
    pub spec: String,
    pub scans: Vec<String>,
    pub landmarks: Vec<String>,
    pub truth_base: Vec<String>,
    pub truth_displacement: Vec<String>,
    pub albedo: String,
}

/// Index of a generated dataset; all paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationManifest {
    pub format: String,
    pub format_version: u32,
    pub config: PopulationConfig,
    pub base_vertex_count: usize,
    pub scan_vertex_count: usize,
    pub template: TemplateFiles,
    pub subjects: Vec<SubjectFiles>,
}

impl PopulationManifest {
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let path = root.as_ref().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|_| Error::NotFound(path.clone()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if m.format != DATASET_FORMAT || m.format_version != DATASET_VERSION {
            return Err(Error::Format {
                path,
                reason: format!("expected {DATASET_FORMAT} v{DATASET_VERSION}"),
            });
        }
        Ok(m)
    }

    /// Every file the manifest names, relative to the root.
    pub fn files(&self) -> Vec<String> {
        let mut out = vec![MANIFEST_FILE.to_string(), SCHEMA_FILE.to_string()];
        out.extend(self.template.meshes.iter().cloned());
        out.push(self.template.landmarks.clone());
        for s in &self.subjects {
            out.push(s.spec.clone());
            out.push(s.albedo.clone());
            out.extend(s.scans.iter().cloned());
            out.extend(s.landmarks.iter().cloned());
            out.extend(s.truth_base.iter().cloned());
            for d in &s.truth_displacement {
                out.push(d.clone());
                out.push(
                    crate::displacement::sidecar_path(Path::new(d))
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AlbedoFile {
    rgb: Vec<[f64; 3]>,
}

pub fn save_albedo(path: impl AsRef<Path>, albedo: &[Vector3<f64>]) -> Result<()> {
    let file = AlbedoFile {
        rgb: albedo.iter().map(|c| [c.x, c.y, c.z]).collect(),
    };
    fs::write(path, serde_json::to_vec(&file)?)?;
    Ok(())
}

pub fn load_albedo(path: impl AsRef<Path>) -> Result<Vec<Vector3<f64>>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
    let file: AlbedoFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(file.rgb.iter().map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

fn schema() -> serde_json::Value {
    serde_json::json!({
        "format": DATASET_FORMAT,
        "format_version": DATASET_VERSION,
        "units": "millimetres; +y up, +z out of the face",
        "files": {
            "manifest.json": "PopulationManifest: generator config, counts and every file path below",
            "template/expression_EE.ply": "mean head in expression EE (00 is neutral), binary little-endian PLY with per-vertex uv",
            "template/landmarks.json": "array of {semantic_id, template_vertex_id, x, y, z, contour} on the neutral template",
            "subject_III/spec.json": "SyntheticSpec of identity III",
            "subject_III/scan_EE.ply": "wrinkled scan of expression EE, binary PLY without uv",
            "subject_III/landmarks_EE.json": "landmarks of scan EE; x, y, z on the scan",
            "subject_III/truth/base_EE.ply": "ground-truth base mesh, template topology and uv",
            "subject_III/truth/displacement_EE.png": "ground-truth wrinkle field as a 16-bit map; sidecar .json holds scale and offset",
            "subject_III/albedo.json": "{rgb: [[r, g, b], ...]} per base vertex, linear [0,1]"
        },
        "displacement_png": "q = 0 invalid, otherwise offset_mm + scale_mm * (q - 1); image row 0 is v = 1"
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a population under `root` (created if needed; its parent must exist).
pub fn generate_population(root: impl AsRef<Path>, cfg: &PopulationConfig) -> Result<PopulationManifest> {
    cfg.validate()?;
    let root = root.as_ref();
    if let Some(parent) = root.parent().filter(|p| !p.as_os_str().is_empty()) {
        if !parent.is_dir() {
            return Err(Error::NotFound(parent.to_path_buf()));
        }
    }
    fs::create_dir_all(root.join("template"))?;
    let specs = cfg.specs();
    let exp_params: Vec<[f64; EXP_DIMS]> = (0..cfg.expressions).map(|e| specs[0].expression(e)).collect();

    let templates = template_meshes(cfg.tier, &exp_params);
    let mut template = TemplateFiles {
        meshes: Vec::new(),
        landmarks: "template/landmarks.json".into(),
    };
    for (e, m) in templates.iter().enumerate() {
        let rel = format!("template/expression_{e:02}.ply");
        save_mesh(m, root.join(&rel))?;
        template.meshes.push(rel);
    }
    let layout = landmark_layout(cfg.tier);
    let neutral = &templates[0];
    layout
        .with_points3d(
            layout
                .template_vertex_ids
                .iter()
                .map(|&v| neutral.vertices[v as usize])
                .collect(),
        )
        .save(root.join(&template.landmarks))?;

    let subjects: Vec<(SubjectFiles, usize)> = specs
        .par_iter()
        .enumerate()
        .map(|(i, spec)| write_subject(root, i, spec, cfg))
        .collect::<Result<_>>()?;
    let manifest = PopulationManifest {
        format: DATASET_FORMAT.into(),
        format_version: DATASET_VERSION,
        config: cfg.clone(),
        base_vertex_count: neutral.vertex_count(),
        scan_vertex_count: subjects[0].1,
        template,
        subjects: subjects.into_iter().map(|s| s.0).collect(),
    };
    write_json(&root.join(SCHEMA_FILE), &schema())?;
    write_json(&root.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn write_subject(root: &Path, i: usize, spec: &SyntheticSpec, cfg: &PopulationConfig) -> Result<(SubjectFiles, usize)> {
    let subject = generate_subject(spec, cfg.expressions)?;
    let dir = format!("subject_{i:03}");
    fs::create_dir_all(root.join(&dir).join("truth"))?;
    let rel = |name: String| -> (String, PathBuf) {
        let r = format!("{dir}/{name}");
        let abs = root.join(&r);
        (r, abs)
    };
    let mut files = SubjectFiles {
        dir: dir.clone(),
        spec: format!("{dir}/spec.json"),
        scans: Vec::new(),
        landmarks: Vec::new(),
        truth_base: Vec::new(),
        truth_displacement: Vec::new(),
        albedo: format!("{dir}/albedo.json"),
    };
    write_json(&root.join(&files.spec), spec)?;
    save_albedo(root.join(&files.albedo), &subject.albedo)?;
    for e in 0..cfg.expressions {
        let (r, abs) = rel(format!("scan_{e:02}.ply"));
        save_mesh(&subject.raw[e], abs)?;
        files.scans.push(r);
        let (r, abs) = rel(format!("landmarks_{e:02}.json"));
        subject.landmarks[e].save(abs)?;
        files.landmarks.push(r);
        let (r, abs) = rel(format!("truth/base_{e:02}.ply"));
        save_mesh(&subject.base[e], abs)?;
        files.truth_base.push(r);
        if let Some(n) = cfg.truth_map_resolution {
            let (r, abs) = rel(format!("truth/displacement_{e:02}.png"));
            subject.wrinkles[e].to_map(&subject.base[e], n)?.save(abs)?;
            files.truth_displacement.push(r);
        }
    }
    Ok((files, subject.raw[0].vertex_count()))
}
