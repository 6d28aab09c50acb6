use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::blend::{blend_displacement, DisplacementProvider, MapSetProvider};
use super::masks::{compute_weight_masks, ActivationMaskSet};
use crate::displacement::{DisplacementMap, QuantizedMap};
use crate::error::{Error, Result};
use crate::morphable::BlendshapeRig;
use crate::Mesh;

pub const BUNDLE_FORMAT: &str = "facerig-rig-bundle";
pub const BUNDLE_VERSION: u32 = 1;
const MASK_LEVELS: f64 = 65535.0;
const PROBES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferFiles {
    /// `V×3` little-endian f32.
    pub neutral: String,
    /// `J×V×3` little-endian f32, absolute blendshape positions.
    pub blendshapes: String,
    /// `F×3` little-endian u32.
    pub faces: String,
    /// `V×2` little-endian f32.
    pub uvs: String,
}

/// 16-bit grayscale PNG; image row 0 holds `v ≈ 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskFile {
    pub file: String,
    /// `value = scale·q`.
    pub scale: f64,
    /// Motion magnitude (mm) that maps to 1.
    pub raw_max_mm: f64,
}

/// 16-bit grayscale PNG; `q = 0` is invalid, otherwise `value = offset_mm + scale_mm·(q−1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapFile {
    pub file: String,
    pub scale_mm: f64,
    pub offset_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format: String,
    pub format_version: u32,
    pub vertex_count: usize,
    pub face_count: usize,
    pub blendshape_count: usize,
    pub key_count: usize,
    pub resolution: usize,
    pub v_axis: String,
    pub buffers: BufferFiles,
    pub activation_masks: Vec<MaskFile>,
    /// Index 0 is the neutral map.
    pub key_maps: Vec<MapFile>,
    pub key_weights: String,
    pub conformance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelProbe {
    pub row: usize,
    pub col: usize,
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexProbe {
    pub vertex: usize,
    pub position: [f64; 3],
}

/// Expected rig outputs for one weight vector, computed from the stored
/// (quantized) bundle contents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformanceCase {
    pub label: String,
    pub alpha: Vec<f64>,
    /// SHA-256 of the blended map as little-endian f32, invalid pixels as NaN.
    pub map_sha256: String,
    pub map_valid_count: usize,
    pub map_sum: f64,
    pub map_probes: Vec<PixelProbe>,
    /// SHA-256 of the blended vertex positions as little-endian f32.
    pub vertex_sha256: String,
    pub vertex_sum: [f64; 3],
    pub vertex_probes: Vec<VertexProbe>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conformance {
    pub tolerance: f64,
    pub cases: Vec<ConformanceCase>,
}

/// Everything a bundle stores, decoded.
#[derive(Clone, Debug)]
pub struct RigBundle {
    pub manifest: BundleManifest,
    pub rig: BlendshapeRig,
    pub masks: ActivationMaskSet<f64>,
    pub maps: MapSetProvider<f64>,
    pub conformance: Conformance,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn f32_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(|v| (v as f32).to_le_bytes()).collect()
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|_| Error::NotFound(path.to_path_buf()))?;
    if bytes.len() != 4 * expected {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("expected {expected} f32 values, found {} bytes", bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect())
}

fn write_png16(path: &Path, n: usize, data: &[u16]) -> Result<()> {
    let mut flipped = Vec::with_capacity(data.len());
    for r in (0..n).rev() {
        flipped.extend_from_slice(&data[r * n..(r + 1) * n]);
    }
    let img = image::ImageBuffer::<image::Luma<u16>, _>::from_raw(n as u32, n as u32, flipped)
        .ok_or_else(|| Error::Invalid("mask buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

fn read_png16(path: &Path, n: usize) -> Result<Vec<u16>> {
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let img = image::open(path)?.into_luma16();
    if img.width() as usize != n || img.height() as usize != n {
        return Err(Error::ResolutionMismatch {
            expected: n,
            got: img.width() as usize,
        });
    }
    let raw = img.into_raw();
    let mut data = Vec::with_capacity(raw.len());
    for r in (0..n).rev() {
        data.extend_from_slice(&raw[r * n..(r + 1) * n]);
    }
    Ok(data)
}

fn quantize_mask(m: &[f64]) -> Vec<u16> {
    m.iter().map(|v| (v * MASK_LEVELS).round() as u16).collect()
}

fn with_positions(mesh: &Mesh, flat: &[f64]) -> Mesh {
    mesh.with_vertices(flat.chunks_exact(3).map(|c| Vector3::new(c[0], c[1], c[2])).collect())
}

/// Weight vectors shipped for conformance: zero, every one-hot, every key and one random draw.
fn conformance_alphas(rig: &BlendshapeRig, seed: u64) -> Vec<(String, Vec<f64>)> {
    let j = rig.blendshape_count();
    let mut out = vec![("zero".to_string(), vec![0.0; j])];
    for k in 0..j {
        let mut a = vec![0.0; j];
        a[k] = 1.0;
        out.push((format!("one_hot_{k}"), a));
    }
    for (i, w) in rig.key_weights.iter().enumerate() {
        out.push((format!("key_{}", i + 1), w.clone()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    out.push((
        "random".to_string(),
        (0..j).map(|_| rng.random_range(0.0..1.0)).collect(),
    ));
    out
}

fn probe_indices(candidates: &[usize]) -> Vec<usize> {
    if candidates.is_empty() {
        return Vec::new();
    }
    let k = PROBES.min(candidates.len());
    (0..k)
        .map(|i| candidates[i * (candidates.len() - 1) / (k - 1).max(1)])
        .collect()
}

/// Evaluates one weight vector against decoded bundle contents.
pub fn conformance_case(
    label: &str,
    rig: &BlendshapeRig,
    masks: &ActivationMaskSet<f64>,
    maps: &dyn DisplacementProvider<f64>,
    alpha: &[f64],
) -> Result<ConformanceCase> {
    let w = compute_weight_masks(masks, alpha, &rig.key_weights)?;
    let f = blend_displacement(maps, &w)?;
    let n = f.resolution();
    let values = f
        .values()
        .iter()
        .zip(f.valid())
        .map(|(&v, &ok)| if ok { v } else { f64::NAN });
    let valid_ids: Vec<usize> = (0..n * n).filter(|&p| f.valid()[p]).collect();
    let mesh = rig.evaluate(alpha)?;
    let flat = mesh.flatten();
    let sum = mesh.vertices.iter().fold(Vector3::zeros(), |s, v| s + v);
    let vertices: Vec<usize> = (0..mesh.vertex_count()).collect();
    Ok(ConformanceCase {
        label: label.to_string(),
        alpha: alpha.to_vec(),
        map_sha256: hex(&Sha256::digest(f32_bytes(values))),
        map_valid_count: valid_ids.len(),
        map_sum: valid_ids.iter().map(|&p| f.values()[p]).sum(),
        map_probes: probe_indices(&valid_ids)
            .into_iter()
            .map(|p| PixelProbe {
                row: p / n,
                col: p % n,
                value: f.get(p / n, p % n),
            })
            .collect(),
        vertex_sha256: hex(&Sha256::digest(f32_bytes(flat.iter().copied()))),
        vertex_sum: [sum.x, sum.y, sum.z],
        vertex_probes: probe_indices(&vertices)
            .into_iter()
            .map(|v| VertexProbe {
                vertex: v,
                position: mesh.vertices[v].into(),
            })
            .collect(),
    })
}

/// Writes a rig bundle to `dir`: manifest, vertex/face/uv buffers, quantized
/// activation masks and key maps, key weights and conformance vectors.
///
/// Conformance cases are evaluated on the data as stored (f32 buffers,
/// 16-bit masks and maps), so a reader reproduces them from the files alone.
pub fn export_bundle(
    dir: impl AsRef<Path>,
    rig: &BlendshapeRig,
    masks: &ActivationMaskSet<f64>,
    provider: &dyn DisplacementProvider<f64>,
    seed: u64,
) -> Result<BundleManifest> {
    let dir = dir.as_ref();
    let uvs = rig.neutral.uvs().ok_or(Error::NoUvAtlas)?;
    if masks.len() != rig.blendshape_count() {
        return Err(Error::DimensionMismatch {
            expected: rig.blendshape_count(),
            got: masks.len(),
        });
    }
    if provider.key_count() != rig.key_weights.len() {
        return Err(Error::DimensionMismatch {
            expected: rig.key_weights.len(),
            got: provider.key_count(),
        });
    }
    let n = masks.resolution();
    if provider.resolution() != n {
        return Err(Error::ResolutionMismatch {
            expected: n,
            got: provider.resolution(),
        });
    }
    std::fs::create_dir_all(dir)?;

    let buffers = BufferFiles {
        neutral: "neutral.f32".into(),
        blendshapes: "blendshapes.f32".into(),
        faces: "faces.u32".into(),
        uvs: "uvs.f32".into(),
    };
    std::fs::write(dir.join(&buffers.neutral), f32_bytes(rig.neutral.flatten().into_iter()))?;
    std::fs::write(
        dir.join(&buffers.blendshapes),
        f32_bytes(rig.shapes.iter().flat_map(|s| s.flatten())),
    )?;
    let faces: Vec<u8> = rig
        .neutral
        .faces()
        .iter()
        .flatten()
        .flat_map(|i| i.to_le_bytes())
        .collect();
    std::fs::write(dir.join(&buffers.faces), faces)?;
    std::fs::write(
        dir.join(&buffers.uvs),
        f32_bytes(uvs.iter().flat_map(|uv| [uv.x, uv.y])),
    )?;

    let mut mask_files = Vec::new();
    for (j, m) in masks.masks().iter().enumerate() {
        let file = format!("activation_{j:03}.png");
        write_png16(&dir.join(&file), n, &quantize_mask(m))?;
        mask_files.push(MaskFile {
            file,
            scale: 1.0 / MASK_LEVELS,
            raw_max_mm: masks.raw_max()[j],
        });
    }
    let mut map_files = Vec::new();
    for i in 0..=provider.key_count() {
        let q = provider.get(i)?.quantize();
        let file = format!("map_{i:03}.png");
        q.save(dir.join(&file))?;
        map_files.push(MapFile {
            file,
            scale_mm: q.scale_mm,
            offset_mm: q.offset_mm,
        });
    }
    let manifest = BundleManifest {
        format: BUNDLE_FORMAT.into(),
        format_version: BUNDLE_VERSION,
        vertex_count: rig.neutral.vertex_count(),
        face_count: rig.neutral.face_count(),
        blendshape_count: rig.blendshape_count(),
        key_count: provider.key_count(),
        resolution: n,
        v_axis: "up".into(),
        buffers,
        activation_masks: mask_files,
        key_maps: map_files,
        key_weights: "key_weights.json".into(),
        conformance: "conformance.json".into(),
    };
    rig.save_key_weights(dir.join(&manifest.key_weights))?;
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    // conformance from the stored data
    let stored = load_parts(dir, &manifest)?;
    let cases = conformance_alphas(&stored.0, seed)
        .iter()
        .map(|(label, a)| conformance_case(label, &stored.0, &stored.1, &stored.2, a))
        .collect::<Result<Vec<_>>>()?;
    let conf = Conformance { tolerance: 1e-3, cases };
    std::fs::write(dir.join(&manifest.conformance), serde_json::to_string_pretty(&conf)?)?;
    Ok(manifest)
}

fn load_parts(dir: &Path, m: &BundleManifest) -> Result<(BlendshapeRig, ActivationMaskSet<f64>, MapSetProvider<f64>)> {
    let (v, j) = (m.vertex_count, m.blendshape_count);
    let neutral_flat = read_f32(&dir.join(&m.buffers.neutral), 3 * v)?;
    let shapes_flat = read_f32(&dir.join(&m.buffers.blendshapes), 3 * v * j)?;
    let uv_flat = read_f32(&dir.join(&m.buffers.uvs), 2 * v)?;
    let face_path = dir.join(&m.buffers.faces);
    let face_bytes = std::fs::read(&face_path).map_err(|_| Error::NotFound(face_path.clone()))?;
    if face_bytes.len() != 12 * m.face_count {
        return Err(Error::Format {
            path: face_path,
            reason: "face buffer length differs from face_count".into(),
        });
    }
    let faces: Vec<[u32; 3]> = face_bytes
        .chunks_exact(12)
        .map(|c| [0, 1, 2].map(|k| u32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
        .collect();
    let uvs = uv_flat.chunks_exact(2).map(|c| Vector2::new(c[0], c[1])).collect();
    let template = Mesh::new(vec![Vector3::zeros(); v], faces, Some(uvs))?;
    let neutral = with_positions(&template, &neutral_flat);
    let shapes = shapes_flat
        .chunks_exact(3 * v.max(1))
        .map(|s| with_positions(&template, s))
        .collect();
    let key_weights = BlendshapeRig::load_key_weights(dir.join(&m.key_weights))?;
    if key_weights.len() != m.key_count {
        return Err(Error::Format {
            path: dir.join(&m.key_weights),
            reason: "key weight count differs from key_count".into(),
        });
    }
    let rig = BlendshapeRig {
        neutral,
        shapes,
        key_weights,
    };
    if m.activation_masks.len() != j || m.key_maps.len() != m.key_count + 1 {
        return Err(Error::Format {
            path: dir.join("manifest.json"),
            reason: "mask or map count differs from the declared counts".into(),
        });
    }
    let n = m.resolution;
    let masks = m
        .activation_masks
        .iter()
        .map(|f| {
            Ok(read_png16(&dir.join(&f.file), n)?
                .iter()
                .map(|&q| q as f64 * f.scale)
                .collect())
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let raw_max = m.activation_masks.iter().map(|f| f.raw_max_mm).collect();
    let masks = ActivationMaskSet::from_parts(n, masks, raw_max)?;
    let maps = m
        .key_maps
        .iter()
        .map(|f| {
            let q = QuantizedMap {
                resolution: n,
                scale_mm: f.scale_mm,
                offset_mm: f.offset_mm,
                data: read_png16(&dir.join(&f.file), n)?,
            };
            Ok(q.dequantize())
        })
        .collect::<Result<Vec<DisplacementMap<f64>>>>()?;
    Ok((rig, masks, MapSetProvider::new(maps)?))
}

/// Reads and validates a bundle written by [`export_bundle`].
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<RigBundle> {
    let dir = dir.as_ref();
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|_| Error::NotFound(mpath.clone()))?;
    let manifest: BundleManifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    if manifest.format != BUNDLE_FORMAT || manifest.format_version != BUNDLE_VERSION {
        return Err(Error::Format {
            path: mpath,
            reason: "unknown bundle format or version".into(),
        });
    }
    let (rig, masks, maps) = load_parts(dir, &manifest)?;
    let cpath = dir.join(&manifest.conformance);
    let conformance: Conformance =
        serde_json::from_str(&std::fs::read_to_string(&cpath).map_err(|_| Error::NotFound(cpath.clone()))?)?;
    Ok(RigBundle {
        manifest,
        rig,
        masks,
        maps,
        conformance,
    })
}
