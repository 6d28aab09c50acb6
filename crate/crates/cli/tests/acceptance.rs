//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails. Pass criterion numbers to run a subset.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use facerig::displacement::{bake_displacement, representation_error, DisplacementMap};
use facerig::dynamic_detail::{
    blend_displacement, compute_activation_masks, compute_weight_masks, ActivationMaskSet, MapSetProvider,
    MaskNormalization, WeightMaskSet,
};
use facerig::fitting::{
    fit_image, landmark_energy, pixel_energy_fixed, regularization_energy, visible_samples, AlbedoModel, FitConfig,
    FitState, PoseGradient,
};
use facerig::morphable::{
    assemble_tensor, generate_blendshapes, relative_reconstruction_error, tucker_decompose, BilinearModel, TuckerMethod,
};
use facerig::registration::{
    deformation_transfer, mean_surface_distance, nicp_register, procrustes_align, LandmarkSet, NicpConfig,
};
use facerig::synthetic::{
    base_meshes, generate_subject, landmark_layout, random_fit_state, render_fit_case, subject_albedo, template_meshes,
    PopulationConfig, ResolutionTier, SyntheticSpec,
};
use facerig::Mesh;
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Population of 10 identities × 5 expressions at the medium tier, the bilinear
/// model at the constructed rank (5,3), an albedo model and the landmark layout.
struct Fixture {
    grid: Vec<Vec<Mesh>>,
    model: BilinearModel,
    albedo: AlbedoModel,
    layout: LandmarkSet,
}

fn fixture() -> Fixture {
    let tier = ResolutionTier::Medium;
    let cfg = PopulationConfig {
        tier,
        ..PopulationConfig::default()
    };
    let specs = cfg.specs();
    let grid: Vec<Vec<Mesh>> = specs.iter().map(|s| base_meshes(s, cfg.expressions).unwrap()).collect();
    let t = assemble_tensor(&grid, true).unwrap();
    let model = tucker_decompose(&t, 5, 3, TuckerMethod::Hosvd).unwrap();
    let samples: Vec<Vec<f64>> = specs
        .iter()
        .zip(&grid)
        .map(|(s, g)| {
            subject_albedo(&g[0], s.id_seed)
                .iter()
                .flat_map(|c| c.iter().copied())
                .collect()
        })
        .collect();
    let albedo = AlbedoModel::from_samples(&samples, 4).unwrap();
    Fixture {
        grid,
        model,
        albedo,
        layout: landmark_layout(tier),
    }
}

fn representation() -> Outcome {
    let spec = SyntheticSpec::new(11, [0.6, -0.4, 0.9, -0.2], ResolutionTier::Full);
    let t0 = Instant::now();
    let subj = generate_subject(&spec, 2).unwrap();
    let gen_s = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    let errs: Vec<_> = (0..2)
        .map(|e| {
            let map = bake_displacement(&subj.base[e], &subj.raw[e], 1024, false).unwrap();
            representation_error(&subj.raw[e], &subj.base[e], &map, 2).unwrap()
        })
        .collect();
    let secs = t1.elapsed().as_secs_f64() / 2.0;
    let mae = errs.iter().map(|e| e.mae).fold(0.0, f64::max);
    let ratio = errs.iter().map(|e| e.size_ratio).fold(0.0, f64::max);
    outcome(
        mae < 0.3 && ratio <= 0.05 && secs < 60.0,
        format!(
            "{} raw / {} base vertices: mae {mae:.4} mm (< 0.3), size_ratio {ratio:.4} (<= 0.05), \
             {secs:.1} s per scan (< 60), generation {gen_s:.1} s",
            subj.raw[0].vertex_count(),
            subj.base[0].vertex_count()
        ),
    )
}

fn tucker(fx: &Fixture) -> Outcome {
    let t0 = Instant::now();
    let t = assemble_tensor(&fx.grid, true).unwrap();
    let exact = relative_reconstruction_error(&t, &fx.model);
    let mut err = BTreeMap::new();
    for r_id in 1..=10 {
        for r_exp in 1..=5 {
            let m = tucker_decompose(&t, r_id, r_exp, TuckerMethod::Hosvd).unwrap();
            err.insert((r_id, r_exp), relative_reconstruction_error(&t, &m));
        }
    }
    let mut monotone = true;
    for (&(i, e), &v) in &err {
        for next in [(i + 1, e), (i, e + 1)] {
            if let Some(&w) = err.get(&next) {
                monotone &= w <= v + 1e-12;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let sweep: Vec<String> = (1..=10).map(|r| format!("{:.2e}", err[&(r, 3)])).collect();
    outcome(
        exact < 1e-6 && monotone && secs < 30.0,
        format!(
            "error at (5,3) {exact:.2e} (< 1e-6), monotone over 10×5 rank grid: {monotone}, \
             r_id sweep at r_exp 3 [{}], {secs:.1} s (< 30)",
            sweep.join(" ")
        ),
    )
}

fn fit_recovery(fx: &Fixture) -> Outcome {
    let t0 = Instant::now();
    let size = 256;
    let mut good = 0;
    let mut monotone = true;
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..20u64 {
        let state = random_fit_state(&fx.model, &fx.albedo, 1000 + seed, size);
        let case = render_fit_case(&fx.model, &fx.albedo, &fx.layout, state, size).unwrap();
        let fit = fit_image(
            &fx.model,
            &fx.albedo,
            &case.image,
            &case.landmarks,
            &FitConfig::default(),
        )
        .unwrap();
        let mesh = fx.model.synthesize_mesh(&fit.w_id, &fit.w_exp).unwrap();
        let rms = (mesh
            .vertices
            .iter()
            .zip(&case.mesh.vertices)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            / mesh.vertex_count() as f64)
            .sqrt();
        let points = case.landmarks.points2d.as_ref().unwrap();
        let lm = (fit
            .landmark_vertex_ids
            .iter()
            .zip(points)
            .map(|(&v, p)| (fit.pose.project(&mesh.vertices[v as usize]) - p).norm_squared())
            .sum::<f64>()
            / points.len() as f64)
            .sqrt();
        monotone &= fit.energy_trace.windows(2).all(|w| w[1].total <= w[0].total);
        if rms < 2.0 && lm < 2.0 {
            good += 1;
        }
        worst = (worst.0.max(rms), worst.1.max(lm));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        good >= 18 && monotone && secs < 300.0,
        format!(
            "{good}/20 within 2 mm vertex RMS and 2 px landmark RMSE (>= 18), worst {:.3} mm / {:.3} px, \
             traces monotone: {monotone}, {secs:.1} s (< 300)",
            worst.0, worst.1
        ),
    )
}

const H: f64 = 1e-6;

fn rel_err(a: &[f64], f: &[f64]) -> f64 {
    let diff = a.iter().zip(f).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = f.iter().map(|y| y * y).sum::<f64>().sqrt();
    if scale < 1e-12 {
        a.iter().map(|x| x * x).sum::<f64>().sqrt()
    } else {
        diff / scale
    }
}

fn central(
    st: &FitState,
    n: usize,
    step: impl Fn(&mut FitState, usize, f64),
    f: &impl Fn(&FitState) -> f64,
) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let (mut p, mut m) = (st.clone(), st.clone());
            step(&mut p, k, H);
            step(&mut m, k, -H);
            (f(&p) - f(&m)) / (2.0 * H)
        })
        .collect()
}

fn pose_fd(st: &FitState, f: &impl Fn(&FitState) -> f64) -> Vec<f64> {
    central(
        st,
        6,
        |s, k, h| match k {
            0 => s.pose.s += h,
            1..=3 => {
                let mut w = Vector3::zeros();
                w[k - 1] = h;
                s.pose = s.pose.rotated(&w);
            }
            _ => s.pose.t[k - 4] += h,
        },
        f,
    )
}

fn pose_vec(g: &PoseGradient) -> Vec<f64> {
    vec![g.s, g.omega.x, g.omega.y, g.omega.z, g.t.x, g.t.y]
}

fn gradients(fx: &Fixture) -> Outcome {
    let t0 = Instant::now();
    let (m, alb) = (&fx.model, &fx.albedo);
    let mut worst: f64 = 0.0;
    let mut checks = 0;
    let mut track = |e: f64| {
        worst = worst.max(e);
        checks += 1;
    };
    for seed in 0..20u64 {
        let st = random_fit_state(m, alb, 100 + seed, 128);
        let target = render_fit_case(m, alb, &fx.layout, random_fit_state(m, alb, 200 + seed, 128), 128).unwrap();
        let mut lm = target.landmarks.clone();
        lm.contour = vec![false; lm.len()];

        let lan = |s: &FitState| landmark_energy(m, s, &lm).unwrap().value;
        let g = landmark_energy(m, &st, &lm).unwrap();
        track(rel_err(&pose_vec(&g.pose), &pose_fd(&st, &lan)));
        track(rel_err(
            &g.w_id,
            &central(&st, st.w_id.len(), |s, k, h| s.w_id[k] += h, &lan),
        ));
        track(rel_err(
            &g.w_exp,
            &central(&st, st.w_exp.len(), |s, k, h| s.w_exp[k] += h, &lan),
        ));

        let mesh = m.synthesize_mesh(&st.w_id, &st.w_exp).unwrap();
        let samples = visible_samples(&mesh, &st.pose, &target.image).unwrap();
        for squared in [false, true] {
            let pix = |s: &FitState| pixel_energy_fixed(m, alb, s, &samples, squared).unwrap().value;
            let g = pixel_energy_fixed(m, alb, &st, &samples, squared).unwrap();
            track(rel_err(
                &g.w_id,
                &central(&st, st.w_id.len(), |s, k, h| s.w_id[k] += h, &pix),
            ));
            track(rel_err(
                &g.w_exp,
                &central(&st, st.w_exp.len(), |s, k, h| s.w_exp[k] += h, &pix),
            ));
            track(rel_err(
                &g.w_alb,
                &central(&st, st.w_alb.len(), |s, k, h| s.w_alb[k] += h, &pix),
            ));
            track(rel_err(
                &g.sh,
                &central(&st, 27, |s, k, h| s.sh.coeffs[k / 9][k % 9] += h, &pix),
            ));
            track(rel_err(&pose_vec(&g.pose), &pose_fd(&st, &pix)));
        }

        for (w, std) in [
            (&st.w_id, m.id_stats().std),
            (&st.w_exp, m.exp_stats().std),
            (&st.w_alb, alb.stddev.clone()),
        ] {
            let (_, g) = regularization_energy(w, &std).unwrap();
            let reg = |v: &[f64]| regularization_energy(v, &std).unwrap().0;
            let fd: Vec<f64> = (0..w.len())
                .map(|k| {
                    let (mut p, mut q) = (w.clone(), w.clone());
                    p[k] += H;
                    q[k] -= H;
                    (reg(&p) - reg(&q)) / (2.0 * H)
                })
                .collect();
            track(rel_err(&g, &fd));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{checks} gradient blocks on 20 states, worst relative error {worst:.2e} (< 1e-4), {secs:.1} s (< 60)"),
    )
}

fn random_map(rng: &mut ChaCha8Rng, n: usize) -> DisplacementMap<f64> {
    let values = (0..n * n).map(|_| rng.random_range(-0.5..0.5)).collect();
    let valid = (0..n * n).map(|_| rng.random_bool(0.9)).collect();
    DisplacementMap::from_parts(n, values, valid).unwrap()
}

/// Random masks, each saturated (exactly 1) on its own block of pixels.
fn random_masks(rng: &mut ChaCha8Rng, n: usize, j: usize) -> ActivationMaskSet<f64> {
    let masks = (0..j)
        .map(|k| {
            (0..n * n)
                .map(|p| {
                    let (r, c) = (p / n, p % n);
                    if r < n / 4 && c / (n / j.max(1)) == k {
                        1.0
                    } else {
                        rng.random_range(0.0..=1.0)
                    }
                })
                .collect()
        })
        .collect();
    ActivationMaskSet::from_parts(n, masks, vec![1.0; j]).unwrap()
}

fn random_weights(rng: &mut ChaCha8Rng, j: usize) -> Vec<f64> {
    (0..j)
        .map(|_| {
            if rng.random_bool(0.3) {
                0.0
            } else {
                rng.random_range(0.0..=1.0)
            }
        })
        .collect()
}

/// Per-pixel weight masks and blend evaluated one pixel at a time.
fn naive_weights(acts: &ActivationMaskSet<f64>, alpha: &[f64], keys: &[Vec<f64>]) -> WeightMaskSet<f64> {
    let size = acts.resolution() * acts.resolution();
    let mi: Vec<Vec<f64>> = keys
        .iter()
        .map(|key| {
            (0..size)
                .map(|p| {
                    let mut s = 0.0;
                    for (j, mask) in acts.masks().iter().enumerate() {
                        let c = alpha[j] * key[j];
                        if c != 0.0 {
                            s += c * mask[p];
                        }
                    }
                    s.clamp(0.0, 1.0)
                })
                .collect()
        })
        .collect();
    let m0 = (0..size)
        .map(|p| {
            let mut v: Vec<f64> = mi.iter().map(|m| m[p]).collect();
            v.sort_by(f64::total_cmp);
            (1.0 - v.iter().fold(0.0, |s, x| s + x)).max(0.0)
        })
        .collect();
    WeightMaskSet {
        resolution: acts.resolution(),
        m0,
        mi,
    }
}

fn naive_blend(maps: &[DisplacementMap<f64>], w: &WeightMaskSet<f64>) -> (Vec<f64>, Vec<bool>) {
    let size = w.resolution * w.resolution;
    let (mut values, mut valid) = (vec![0.0; size], vec![false; size]);
    for p in 0..size {
        for (i, map) in maps.iter().enumerate() {
            let wt = if i == 0 { w.m0[p] } else { w.mi[i - 1][p] };
            if wt != 0.0 && map.valid()[p] {
                values[p] += wt * map.values()[p];
                valid[p] = true;
            }
        }
    }
    (values, valid)
}

fn detail_algebra(fx: &Fixture) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let n = 64;
    let rig = generate_blendshapes(&fx.model, fx.model.id_row(0).as_slice()).unwrap();
    let j = rig.blendshape_count();
    let acts = compute_activation_masks(&rig, n, MaskNormalization::PerMask).unwrap();
    let maps: Vec<_> = (0..=rig.key_weights.len()).map(|_| random_map(&mut rng, n)).collect();
    let provider = MapSetProvider::new(maps.clone()).unwrap();
    let w = compute_weight_masks(&acts, &vec![0.0; j], &rig.key_weights).unwrap();
    let f = blend_displacement(&provider, &w).unwrap();
    let zero_ok = f.values() == maps[0].values() && f.valid() == maps[0].valid();

    let mut saturated_ok = true;
    let mut saturated_pixels = 0;
    let mut naive_ok = true;
    let mut identities_ok = true;
    for case in 0..10 {
        let (j, k) = (2 + case % 3, 1 + case % 4);
        let acts = random_masks(&mut rng, n, j);
        let maps: Vec<_> = (0..=k).map(|_| random_map(&mut rng, n)).collect();
        let provider = MapSetProvider::new(maps.clone()).unwrap();

        // one-hot saturation: key i driven by blendshape i alone at full weight
        let keys: Vec<Vec<f64>> = (0..k)
            .map(|i| (0..j).map(|b| f64::from(u8::from(b == i % j))).collect())
            .collect();
        let key = case % k;
        let alpha: Vec<f64> = (0..j).map(|b| f64::from(u8::from(b == key % j))).collect();
        let keys_one: Vec<Vec<f64>> = keys
            .iter()
            .enumerate()
            .map(|(i, kw)| if i == key { kw.clone() } else { vec![0.0; j] })
            .collect();
        let w = compute_weight_masks(&acts, &alpha, &keys_one).unwrap();
        let f = blend_displacement(&provider, &w).unwrap();
        for p in 0..n * n {
            if w.mi[key][p] == 1.0 {
                saturated_pixels += 1;
                saturated_ok &= w.m0[p] == 0.0
                    && f.valid()[p] == maps[key + 1].valid()[p]
                    && f.values()[p] == maps[key + 1].values()[p];
            }
        }

        let alpha = random_weights(&mut rng, j);
        let keys: Vec<Vec<f64>> = (0..k).map(|_| random_weights(&mut rng, j)).collect();
        let w = compute_weight_masks(&acts, &alpha, &keys).unwrap();
        let oracle = naive_weights(&acts, &alpha, &keys);
        identities_ok &= w == oracle;
        identities_ok &= (0..n * n).all(|p| {
            let sum: f64 = w.mi.iter().map(|m| m[p]).sum();
            w.mi.iter().all(|m| (0.0..=1.0).contains(&m[p]))
                && (0.0..=1.0).contains(&w.m0[p])
                && (w.m0[p] == 0.0 || (w.m0[p] + sum - 1.0).abs() < 1e-12)
        });
        let f = blend_displacement(&provider, &w).unwrap();
        let (values, valid) = naive_blend(&maps, &w);
        naive_ok &= f.values() == values.as_slice() && f.valid() == valid.as_slice();
    }
    outcome(
        zero_ok && saturated_ok && saturated_pixels > 0 && naive_ok && identities_ok,
        format!(
            "alpha=0 gives the neutral map bit-exact: {zero_ok}; {saturated_pixels} saturated pixels reproduce \
             their key map: {saturated_ok}; naive oracle bit-exact on 10 cases: {naive_ok}; clamp and M0 \
             identities at every pixel: {identities_ok}"
        ),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Matrix3<f64> {
    let axis = Unit::new_normalize(Vector3::new(
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
        rng.random_range(-1.0..1.0),
    ));
    Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).into_inner()
}

fn registration() -> Outcome {
    let tier = ResolutionTier::Medium;
    let template = template_meshes(tier, &[[0.0, 0.0]]).remove(0);
    let layout = landmark_layout(tier);
    let cfg = PopulationConfig {
        tier,
        seed: 21,
        ..PopulationConfig::default()
    };
    let mut worst: f64 = 0.0;
    for (k, spec) in cfg.specs().iter().enumerate() {
        let target = base_meshes(spec, 1 + k % 3).unwrap().pop().unwrap();
        let points = layout
            .template_vertex_ids
            .iter()
            .map(|&v| target.vertices[v as usize])
            .collect();
        let out = nicp_register(
            &template,
            &target,
            &layout.with_points3d(points),
            &NicpConfig::default(),
        )
        .unwrap();
        worst = worst.max(mean_surface_distance(&out, &target));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut proc_err: f64 = 0.0;
    for _ in 0..100 {
        let p: Vec<Vector3<f64>> = (0..20)
            .map(|_| Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0)))
            .collect();
        let r = random_rotation(&mut rng);
        let s = rng.random_range(0.5..2.0);
        let t = Vector3::from_fn(|_, _| rng.random_range(-50.0..50.0));
        let q: Vec<_> = p.iter().map(|x| r * x * s + t).collect();
        let got = procrustes_align(&p, &q, true).unwrap();
        proc_err = proc_err
            .max((got.scale - s).abs())
            .max((got.rotation - r).abs().max())
            .max((got.translation - t).abs().max());
    }

    let src = template_meshes(ResolutionTier::Small, &[[0.0, 0.0]]).remove(0);
    let tgt = base_meshes(&SyntheticSpec::new(4, [1.0, -0.7, 0.4, 0.9], ResolutionTier::Small), 1)
        .unwrap()
        .remove(0);
    let r = random_rotation(&mut rng);
    let expr = src.with_vertices(src.vertices.iter().map(|v| r * v).collect());
    let out = deformation_transfer(&src, &expr, &tgt).unwrap();
    let shift = out
        .vertices
        .iter()
        .zip(&tgt.vertices)
        .map(|(a, b)| a - r * b)
        .sum::<Vector3<f64>>()
        / tgt.vertex_count() as f64;
    let dt_err = out
        .vertices
        .iter()
        .zip(&tgt.vertices)
        .map(|(a, b)| (a - (r * b + shift)).norm())
        .fold(0.0, f64::max);
    outcome(
        worst < 0.3 && proc_err < 1e-9 && dt_err < 1e-6,
        format!(
            "NICP worst mean surface distance {worst:.4} mm over 10 pairs (< 0.3), Procrustes worst error \
             {proc_err:.1e} over 100 transforms (< 1e-9), deformation-transfer rotation error {dt_err:.1e} (< 1e-6)"
        ),
    )
}

fn run_chain(root: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_facerig");
    let r = |p: &str| root.join(p).to_string_lossy().into_owned();
    let steps: Vec<Vec<String>> = vec![
        vec![
            "synth".into(),
            "--ids".into(),
            "3".into(),
            "--exps".into(),
            "3".into(),
            "--tier".into(),
            "small".into(),
            "--truth-resolution".into(),
            "256".into(),
            r("data"),
        ],
        vec!["register".into(), "--dataset".into(), r("data"), r("reg")],
        vec![
            "bake".into(),
            "--dataset".into(),
            r("data"),
            "--registered".into(),
            r("reg"),
            "--resolution".into(),
            "256".into(),
            r("maps"),
        ],
        vec![
            "build-model".into(),
            "--dataset".into(),
            r("data"),
            "--registered".into(),
            r("reg"),
            "--rank-id".into(),
            "3".into(),
            r("model"),
        ],
        vec![
            "render".into(),
            "--model".into(),
            r("model"),
            "--seed".into(),
            "4".into(),
            "--size".into(),
            "128".into(),
            r("render"),
        ],
        vec![
            "fit".into(),
            "--model".into(),
            r("model"),
            "--image".into(),
            r("render/image.png"),
            "--landmarks".into(),
            r("render/landmarks.json"),
            "--truth".into(),
            r("render/truth.ply"),
            r("fit"),
        ],
        vec![
            "rig".into(),
            "--model".into(),
            r("model"),
            "--fit".into(),
            r("fit"),
            "--maps".into(),
            r("maps/subject_000"),
            r("rig"),
        ],
        vec![
            "export-bundle".into(),
            "--rig".into(),
            r("rig"),
            "--maps".into(),
            r("maps/subject_000"),
            r("bundle"),
        ],
    ];
    for args in steps {
        let out = Command::new(bin)
            .args(&args)
            .env_remove("FACERIG_THREADS")
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!(
                "{} failed: {}",
                args[0],
                String::from_utf8_lossy(&out.stderr).trim()
            ));
        }
    }
    Ok(())
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            let mut bytes = std::fs::read(&p).unwrap();
            if p.file_name().is_some_and(|n| n == "run_report.json") {
                let mut v: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
                let obj = v.as_object_mut().unwrap();
                obj.remove("wall_time_s");
                obj.remove("finished_unix_s");
                bytes = serde_json::to_vec(&v).unwrap();
            }
            out.insert(rel, bytes);
        }
    }
}

fn determinism() -> Outcome {
    let t0 = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    if let Err(e) = run_chain(a.path()).and_then(|_| run_chain(b.path())) {
        return outcome(false, e);
    }
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    collect(a.path(), a.path(), &mut fa);
    collect(b.path(), b.path(), &mut fb);
    let differing: Vec<&String> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(v))
        .map(|(k, _)| k)
        .collect();
    let same_set = fa.keys().eq(fb.keys());
    outcome(
        same_set && differing.is_empty(),
        format!(
            "8-command chain run twice: {} files, identical file set: {same_set}, differing: {differing:?}, {:.1} s",
            fa.len(),
            t0.elapsed().as_secs_f64()
        ),
    )
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |k: usize| selected.is_empty() || selected.contains(&k);
    let needs_fixture = [2, 3, 4, 5].iter().any(|&k| wanted(k));
    let fx = needs_fixture.then(fixture);
    let fx = || fx.as_ref().expect("fixture built");
    let criteria: [(usize, &str, Box<dyn Fn() -> Outcome + '_>); 7] = [
        (1, "two-layer representation", Box::new(representation)),
        (2, "Tucker fidelity", Box::new(|| tucker(fx()))),
        (3, "fit recovery", Box::new(|| fit_recovery(fx()))),
        (4, "gradient suite", Box::new(|| gradients(fx()))),
        (5, "dynamic-detail algebra", Box::new(|| detail_algebra(fx()))),
        (6, "registration", Box::new(registration)),
        (7, "CLI determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (k, name, run) in &criteria {
        if !wanted(*k) {
            continue;
        }
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run));
        let o = result.unwrap_or_else(|_| outcome(false, "panicked".into()));
        println!(
            "{} criterion {k} ({name}): {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed.push(*k);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
