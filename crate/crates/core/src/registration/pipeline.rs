use nalgebra::Vector3;
use rayon::prelude::*;

use super::{deformation_transfer, nicp_register, procrustes_align, LandmarkSet, NicpConfig, SimilarityTransform};
use crate::error::{Error, Result};
use crate::Mesh;

fn transform_mesh(m: &Mesh, t: &SimilarityTransform<f64>) -> Mesh {
    m.with_vertices(m.vertices.iter().map(|p| t.apply(p)).collect())
}

fn template_points(m: &Mesh, lm: &LandmarkSet) -> Vec<Vector3<f64>> {
    lm.template_vertex_ids.iter().map(|&v| m.vertices[v as usize]).collect()
}

fn scan_points(lm: &LandmarkSet) -> Result<&[Vector3<f64>]> {
    lm.points3d
        .as_deref()
        .ok_or_else(|| Error::Invalid("scan landmarks need 3D positions".into()))
}

/// Registers the template onto a neutral scan and a set of expression scans.
///
/// `landmarks[0]` belongs to the neutral scan and `landmarks[1 + i]` to
/// expression scan `i`; a single set is reused for every scan. Registration
/// runs in the template's frame and each result is returned in the frame of
/// its own scan. Output 0 is the neutral, then one mesh per expression.
pub fn register_scan_set(
    template: &Mesh,
    neutral_scan: &Mesh,
    expr_scans: &[Mesh],
    expr_templates: &[Mesh],
    landmarks: &[LandmarkSet],
    cfg: &NicpConfig,
) -> Result<Vec<Mesh>> {
    cfg.validate()?;
    if expr_scans.len() != expr_templates.len() {
        return Err(Error::DimensionMismatch {
            expected: expr_scans.len(),
            got: expr_templates.len(),
        });
    }
    if landmarks.len() != 1 && landmarks.len() != expr_scans.len() + 1 {
        return Err(Error::DimensionMismatch {
            expected: expr_scans.len() + 1,
            got: landmarks.len(),
        });
    }
    for t in expr_templates {
        if !t.same_topology(template) {
            return Err(Error::TopologyMismatch);
        }
    }
    let lm_for = |k: usize| &landmarks[if landmarks.len() == 1 { 0 } else { k }];

    let lm0 = lm_for(0);
    lm0.validate(template.vertex_count())?;
    let to_scan = procrustes_align(&template_points(template, lm0), scan_points(lm0)?, true)?;
    let to_template = to_scan.inverse();
    let neutral_local = transform_mesh(neutral_scan, &to_template);
    let lm0_local = lm0.with_points3d(scan_points(lm0)?.iter().map(|p| to_template.apply(p)).collect());
    let neutral = nicp_register(template, &neutral_local, &lm0_local, cfg)?;

    let expressions: Vec<Mesh> = (0..expr_scans.len())
        .into_par_iter()
        .map(|i| {
            register_expression(
                template,
                &neutral,
                &expr_templates[i],
                &expr_scans[i],
                lm_for(i + 1),
                &to_template,
                cfg,
            )
            .map_err(|e| e.at_expression(i))
        })
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(expressions.len() + 1);
    out.push(transform_mesh(&neutral, &to_scan));
    out.extend(expressions);
    Ok(out)
}

fn register_expression(
    template: &Mesh,
    neutral: &Mesh,
    expr_template: &Mesh,
    scan: &Mesh,
    lm: &LandmarkSet,
    to_template: &SimilarityTransform<f64>,
    cfg: &NicpConfig,
) -> Result<Mesh> {
    if scan.face_count() == 0 {
        return Err(Error::NoOverlap);
    }
    lm.validate(template.vertex_count())?;
    let init = deformation_transfer(template, expr_template, neutral)?;
    // the subject may move between captures: refine rigidly against the transferred shape
    let coarse: Vec<_> = scan_points(lm)?.iter().map(|p| to_template.apply(p)).collect();
    let refine = procrustes_align(&coarse, &template_points(&init, lm), false)?;
    let to_local = refine.compose(to_template);
    let local_scan = transform_mesh(scan, &to_local);
    let local_lm = lm.with_points3d(coarse.iter().map(|p| refine.apply(p)).collect());
    let registered = nicp_register(&init, &local_scan, &local_lm, cfg)?;
    Ok(transform_mesh(&registered, &to_local.inverse()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::fixtures;

    fn self_landmarks(m: &Mesh, ids: &[u32]) -> LandmarkSet {
        LandmarkSet {
            points2d: None,
            points3d: Some(ids.iter().map(|&i| m.vertices[i as usize]).collect()),
            semantic_ids: (0..ids.len() as u32).collect(),
            template_vertex_ids: ids.to_vec(),
            contour: vec![false; ids.len()],
        }
    }

    #[test]
    fn scans_equal_to_template_are_fixed_points() {
        let t = fixtures::icosphere(30.0, 2);
        let lm = self_landmarks(&t, &[0, 2, 4, 7, 9]);
        let cfg = NicpConfig::default();
        let out = register_scan_set(&t, &t, &[t.clone(), t.clone()], &[t.clone(), t.clone()], &[lm], &cfg).unwrap();
        assert_eq!(out.len(), 3);
        for m in &out {
            assert_eq!(m.topology_id(), t.topology_id());
            for (a, b) in m.vertices.iter().zip(&t.vertices) {
                assert!((a - b).norm() < cfg.convergence_eps * 2.0);
            }
        }
    }

    #[test]
    fn empty_expression_scan_names_its_index() {
        let t = fixtures::icosphere(30.0, 1);
        let lm = self_landmarks(&t, &[0, 2, 4, 7, 9]);
        let empty = Mesh::new(vec![], vec![], None).unwrap();
        let err = register_scan_set(
            &t,
            &t,
            &[t.clone(), empty],
            &[t.clone(), t.clone()],
            &[lm],
            &NicpConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Expression { index: 1, .. }), "{err}");
        assert!(err.to_string().contains("expression 1"));
    }
}
