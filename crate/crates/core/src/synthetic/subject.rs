use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::head::{self, FieldBasis, Site, EXP_DIMS, ID_DIMS, LANDMARK_SITES};
use crate::displacement::DisplacementMap;
use crate::error::{Error, Result};
use crate::mesh::{midpoint_subdivide, UvIndex};
use crate::registration::LandmarkSet;
use crate::Mesh;

/// Mean relative edge-length change at which wrinkles reach full strength.
pub const STRETCH_SATURATION: f64 = 0.15;

/// Base-mesh density.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionTier {
    /// 24² base vertices.
    Small,
    /// 48² base vertices.
    Medium,
    /// 90² base vertices, about 130k raw vertices.
    #[default]
    Full,
}

impl ResolutionTier {
    pub fn grid(self) -> usize {
        match self {
            Self::Small => 24,
            Self::Medium => 48,
            Self::Full => 90,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrinkleSpec {
    /// Cycles per unit of atlas coordinate.
    pub frequency: f64,
    pub amplitude_mm: f64,
    /// Share of the expression-driven component, in `[0,1]`.
    pub expression_coupling: f64,
}

impl Default for WrinkleSpec {
    fn default() -> Self {
        Self {
            frequency: 24.0,
            amplitude_mm: 0.5,
            expression_coupling: 0.8,
        }
    }
}

impl WrinkleSpec {
    /// Expression-independent part at `uv`.
    pub fn static_component(&self, uv: Vector2<f64>) -> f64 {
        let tau = std::f64::consts::TAU;
        0.25 * (tau * 1.3 * self.frequency * uv.x + 0.7).sin() * (tau * 1.1 * self.frequency * uv.y).sin()
    }

    /// Fold pattern revealed by stretch.
    pub fn dynamic_component(&self, uv: Vector2<f64>) -> f64 {
        let tau = std::f64::consts::TAU;
        (tau * self.frequency * (uv.y + 0.08 * (tau * 3.0 * uv.x).sin())).sin()
    }

    /// Offset along the base normal (mm) for local `stretch` in `[0,1]`.
    pub fn value(&self, uv: Vector2<f64>, stretch: f64) -> f64 {
        self.amplitude_mm
            * (self.static_component(uv) + self.expression_coupling * stretch * self.dynamic_component(uv))
    }
}

/// Everything that determines one synthetic subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Seeds the subject's albedo.
    pub id_seed: u64,
    pub id_params: [f64; ID_DIMS],
    /// Amplitudes of the expression fields, one row per expression (row 0 is usually neutral).
    pub exp_params: Vec<[f64; EXP_DIMS]>,
    pub wrinkle: WrinkleSpec,
    pub tier: ResolutionTier,
}

/// Expression amplitudes used when a spec lists fewer rows than requested.
pub fn default_expression(e: usize) -> [f64; EXP_DIMS] {
    const TABLE: [[f64; EXP_DIMS]; 5] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.7, 0.6], [0.3, 0.9]];
    TABLE.get(e).copied().unwrap_or_else(|| {
        let a = e as f64 * 2.399_963;
        [0.5 + 0.5 * a.cos(), 0.5 + 0.5 * a.sin()]
    })
}

impl SyntheticSpec {
    pub fn new(id_seed: u64, id_params: [f64; ID_DIMS], tier: ResolutionTier) -> Self {
        Self {
            id_seed,
            id_params,
            exp_params: (0..5).map(default_expression).collect(),
            wrinkle: WrinkleSpec::default(),
            tier,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = &self.wrinkle;
        if self.exp_params.iter().flatten().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(Error::Invalid(
                "expression amplitudes must be finite and nonnegative".into(),
            ));
        }
        if !(w.amplitude_mm >= 0.0 && w.amplitude_mm.is_finite()) {
            return Err(Error::Invalid(
                "wrinkle amplitude must be finite and nonnegative".into(),
            ));
        }
        if !(w.frequency > 0.0 && w.frequency.is_finite()) {
            return Err(Error::Invalid("wrinkle frequency must be positive".into()));
        }
        if !(0.0..=1.0).contains(&w.expression_coupling) {
            return Err(Error::Invalid("expression coupling must lie in [0,1]".into()));
        }
        if self.id_params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Invalid("identity parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn expression(&self, e: usize) -> [f64; EXP_DIMS] {
        self.exp_params.get(e).copied().unwrap_or_else(|| default_expression(e))
    }
}

/// Truth displacement of one raw scan: the wrinkle spec plus stretch at every base vertex.
#[derive(Clone, Debug, PartialEq)]
pub struct WrinkleField {
    pub spec: WrinkleSpec,
    pub stretch: Vec<f64>,
}

impl WrinkleField {
    /// Value at a point of `base` given by face and barycentric coordinates.
    pub fn at(&self, base: &Mesh, face: usize, bary: [f64; 3]) -> Option<f64> {
        let uv = base.uv_at(face, bary)?;
        let [a, b, c] = base.faces()[face].map(|i| i as usize);
        let s = bary[0] * self.stretch[a] + bary[1] * self.stretch[b] + bary[2] * self.stretch[c];
        Some(self.spec.value(uv, s))
    }

    /// Field sampled at the pixel centers of an `N×N` map over `base`'s atlas.
    pub fn to_map(&self, base: &Mesh, resolution: usize) -> Result<DisplacementMap<f64>> {
        let atlas = UvIndex::build(base)?;
        let mut map = DisplacementMap::empty(resolution);
        let rows: Vec<Vec<Option<f64>>> = (0..resolution)
            .into_par_iter()
            .map(|r| {
                (0..resolution)
                    .map(|c| {
                        let (f, b) = atlas.locate(map.pixel_uv(r, c))?;
                        self.at(base, f, b)
                    })
                    .collect()
            })
            .collect();
        for (r, row) in rows.into_iter().enumerate() {
            for (c, v) in row.into_iter().enumerate() {
                map.set(r, c, v);
            }
        }
        Ok(map)
    }
}

/// One generated subject; index `e` of every list is expression `e`.
#[derive(Clone, Debug)]
pub struct SyntheticSubject {
    pub spec: SyntheticSpec,
    /// Truth base meshes, one shared topology with a grid atlas.
    pub base: Vec<Mesh>,
    /// Wrinkled scans (twice-subdivided base plus wrinkles), without UVs.
    pub raw: Vec<Mesh>,
    pub wrinkles: Vec<WrinkleField>,
    /// Base-vertex landmarks with 3D positions on the raw scan.
    pub landmarks: Vec<LandmarkSet>,
    /// Per base vertex RGB in `[0,1]`.
    pub albedo: Vec<Vector3<f64>>,
}

/// Mean relative change of incident edge lengths, scaled and clamped to `[0,1]`.
pub fn stretch(neutral: &Mesh, deformed: &Mesh) -> Vec<f64> {
    let n = neutral.vertex_count();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (a, b) in neutral.edges() {
        let (a, b) = (a as usize, b as usize);
        let l0 = (neutral.vertices[a] - neutral.vertices[b]).norm();
        let l1 = (deformed.vertices[a] - deformed.vertices[b]).norm();
        let d = if l0 > 0.0 { (l1 / l0 - 1.0).abs() } else { 0.0 };
        for v in [a, b] {
            sum[v] += d;
            count[v] += 1;
        }
    }
    sum.iter()
        .zip(&count)
        .map(|(s, &c)| {
            if c == 0 {
                0.0
            } else {
                (s / c as f64 / STRETCH_SATURATION).min(1.0)
            }
        })
        .collect()
}

/// Base grid of the given tier with every vertex at the origin.
pub fn template_topology(tier: ResolutionTier) -> Mesh {
    head::grid_mesh(tier.grid())
}

/// Template vertex ids, semantic ids and contour flags of the landmark layout.
pub fn landmark_layout(tier: ResolutionTier) -> LandmarkSet {
    let n = tier.grid();
    LandmarkSet {
        points2d: None,
        points3d: None,
        semantic_ids: (0..LANDMARK_SITES.len() as u32).collect(),
        template_vertex_ids: LANDMARK_SITES
            .iter()
            .map(|&(p, t, _)| head::landmark_vertex(n, p, t))
            .collect(),
        contour: LANDMARK_SITES.iter().map(|s| s.2).collect(),
    }
}

/// Truth base meshes for expressions `0..n_expressions` without wrinkles or scans.
pub fn base_meshes(spec: &SyntheticSpec, n_expressions: usize) -> Result<Vec<Mesh>> {
    spec.validate()?;
    let grid = template_topology(spec.tier);
    let basis = FieldBasis::new(grid.uvs().expect("grid has uvs"));
    Ok((0..n_expressions)
        .map(|e| grid.with_vertices(basis.combine(&spec.id_params, &spec.expression(e))))
        .collect())
}

/// Mean head (zero identity parameters) in each of the given expressions.
pub fn template_meshes(tier: ResolutionTier, exp_params: &[[f64; EXP_DIMS]]) -> Vec<Mesh> {
    let grid = template_topology(tier);
    let basis = FieldBasis::new(grid.uvs().expect("grid has uvs"));
    exp_params
        .iter()
        .map(|e| grid.with_vertices(basis.combine(&[0.0; ID_DIMS], e)))
        .collect()
}

/// Per-vertex albedo in `[0,1]` of the subject seeded by `seed`; `base` must carry UVs.
pub fn subject_albedo(base: &Mesh, seed: u64) -> Vec<Vector3<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    base.uvs()
        .expect("grid has uvs")
        .iter()
        .map(|&uv| {
            let s = Site::new(uv);
            let lips = (-0.5 * ((s.phi / 16.0).powi(2) + ((s.theta + 33.0) / 5.0).powi(2))).exp();
            let brows = (-0.5 * (((s.phi.abs() - 25.0) / 14.0).powi(2) + ((s.theta - 22.0) / 4.0).powi(2))).exp();
            let cheeks = (-0.5 * (((s.phi.abs() - 40.0) / 14.0).powi(2) + ((s.theta + 15.0) / 14.0).powi(2))).exp();
            Vector3::new(0.62, 0.46, 0.38)
                + Vector3::new(0.1, -0.08, -0.05) * lips
                + Vector3::new(-0.15, -0.15, -0.15) * brows
                + Vector3::new(0.12, 0.10, 0.08) * beta[0]
                + Vector3::new(0.08, -0.02, -0.02) * (beta[1] * cheeks)
                + Vector3::new(-0.08, -0.08, -0.08) * (beta[2] * brows)
        })
        .collect()
}

/// Twice midpoint-subdivided `base` with every vertex pushed along the
/// interpolated base normal by the wrinkle field.
pub fn wrinkled_scan(base: &Mesh, field: &WrinkleField) -> Mesh {
    let fine = midpoint_subdivide(&midpoint_subdivide(base));
    let normals = base.vertex_normals();
    // carry normals and stretch through the same linear refinement as positions
    let carry =
        |values: Vec<Vector3<f64>>| midpoint_subdivide(&midpoint_subdivide(&base.with_vertices(values))).vertices;
    let fine_normals = carry(normals);
    let fine_stretch = carry(field.stretch.iter().map(|&s| Vector3::new(s, 0.0, 0.0)).collect());
    let uvs = fine.uvs().expect("base has uvs");
    let moved = fine
        .vertices
        .par_iter()
        .zip(fine_normals.par_iter())
        .zip(fine_stretch.par_iter().zip(uvs.par_iter()))
        .map(|((p, n), (s, uv))| {
            let w = field.spec.value(*uv, s.x);
            if w == 0.0 {
                *p
            } else {
                p + n.normalize() * w
            }
        })
        .collect();
    fine.with_vertices(moved).without_uvs()
}

/// Generates base shapes, wrinkled scans, truth fields, landmarks and albedo.
pub fn generate_subject(spec: &SyntheticSpec, n_expressions: usize) -> Result<SyntheticSubject> {
    if n_expressions == 0 {
        return Err(Error::Invalid("at least one expression is required".into()));
    }
    let base = base_meshes(spec, n_expressions)?;
    let layout = landmark_layout(spec.tier);
    let wrinkles: Vec<WrinkleField> = base
        .iter()
        .map(|b| WrinkleField {
            spec: spec.wrinkle,
            stretch: stretch(&base[0], b),
        })
        .collect();
    let raw: Vec<Mesh> = base
        .par_iter()
        .zip(&wrinkles)
        .map(|(b, w)| wrinkled_scan(b, w))
        .collect();
    // subdivision keeps the base vertices first, so landmark ids index the scan too
    let landmarks = raw
        .iter()
        .map(|r| {
            layout.with_points3d(
                layout
                    .template_vertex_ids
                    .iter()
                    .map(|&v| r.vertices[v as usize])
                    .collect(),
            )
        })
        .collect();
    let albedo = subject_albedo(&base[0], spec.id_seed);
    Ok(SyntheticSubject {
        spec: spec.clone(),
        base,
        raw,
        wrinkles,
        landmarks,
        albedo,
    })
}
