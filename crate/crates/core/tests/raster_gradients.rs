mod common;

use common::{camera, central_diff, gaussians, random_vec, rel_err};
use meshsplat::geometry::make_icosphere;
use meshsplat::image::Image;
use meshsplat::raster::{render, render_vjp, Camera, Modality, RasterConfig};
use meshsplat::so3::{Mat3, Vec3};
use meshsplat::splatmesh::{bind_to_world, bind_to_world_vjp, SurfelSet, WorldGaussians};

const H: f64 = 1e-6;
const TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug)]
enum Group {
    Means,
    Rotations,
    Scales,
    Sh,
    Opacity,
}

fn get(g: &WorldGaussians, grp: Group) -> Vec<f64> {
    match grp {
        Group::Means => g
            .means
            .iter()
            .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
            .collect(),
        Group::Rotations => g
            .rotations
            .iter()
            .flat_map(|m| m.iter().copied().collect::<Vec<_>>())
            .collect(),
        Group::Scales => g
            .scales
            .iter()
            .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
            .collect(),
        Group::Sh => g.sh_coeffs.clone(),
        Group::Opacity => g.opacities.clone(),
    }
}

fn set(g: &mut WorldGaussians, grp: Group, x: &[f64]) {
    match grp {
        Group::Means => {
            for (i, v) in g.means.iter_mut().enumerate() {
                *v = Vec3::from_column_slice(&x[3 * i..3 * i + 3]);
            }
        }
        Group::Rotations => {
            for (i, m) in g.rotations.iter_mut().enumerate() {
                *m = Mat3::from_column_slice(&x[9 * i..9 * i + 9]);
            }
        }
        Group::Scales => {
            for (i, v) in g.scales.iter_mut().enumerate() {
                *v = Vec3::from_column_slice(&x[3 * i..3 * i + 3]);
            }
        }
        Group::Sh => g.sh_coeffs = x.to_vec(),
        Group::Opacity => g.opacities = x.to_vec(),
    }
}

fn grads_of(g: &meshsplat::splatmesh::WorldGaussianGrads, grp: Group) -> Vec<f64> {
    match grp {
        Group::Means => g
            .means
            .iter()
            .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
            .collect(),
        Group::Rotations => g
            .rotations
            .iter()
            .flat_map(|m| m.iter().copied().collect::<Vec<_>>())
            .collect(),
        Group::Scales => g
            .scales
            .iter()
            .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
            .collect(),
        Group::Sh => g.sh_coeffs.clone(),
        Group::Opacity => g.opacities.clone(),
    }
}

struct Case {
    g: WorldGaussians,
    cam: Camera,
    modality: Modality,
    bg: [f64; 3],
    cot: Image,
    cot_alpha: Image,
}

impl Case {
    fn new(n: usize, degree: u8, modality: Modality, seed: u64) -> Self {
        let cam = camera(32, 32);
        let bg = [0.2, 0.5, 0.1];
        Case {
            g: gaussians(n, degree, seed),
            cot: Image::from_data(32, 32, 3, random_vec(32 * 32 * 3, seed + 1)).unwrap(),
            cot_alpha: Image::from_data(32, 32, 1, random_vec(32 * 32, seed + 2)).unwrap(),
            cam,
            modality,
            bg,
        }
    }

    fn loss(&self, g: &WorldGaussians, cam: &Camera) -> f64 {
        let out = render(g, cam, self.modality, self.bg, &RasterConfig::default()).unwrap();
        let a: f64 = out
            .color
            .data
            .iter()
            .zip(&self.cot.data)
            .map(|(x, y)| x * y)
            .sum();
        let b: f64 = out
            .alpha
            .data
            .iter()
            .zip(&self.cot_alpha.data)
            .map(|(x, y)| x * y)
            .sum();
        a + b
    }

    fn vjp(&self) -> meshsplat::raster::RenderGrads {
        let cfg = RasterConfig::default();
        let out = render(&self.g, &self.cam, self.modality, self.bg, &cfg).unwrap();
        render_vjp(
            &self.g,
            &self.cam,
            self.modality,
            self.bg,
            &cfg,
            &out,
            &self.cot,
            Some(&self.cot_alpha),
        )
        .unwrap()
    }
}

fn check_case(case: &Case) {
    let grads = case.vjp();
    for grp in [
        Group::Means,
        Group::Rotations,
        Group::Scales,
        Group::Sh,
        Group::Opacity,
    ] {
        let x = get(&case.g, grp);
        let num = central_diff(&x, H, |p| {
            let mut g = case.g.clone();
            set(&mut g, grp, p);
            case.loss(&g, &case.cam)
        });
        let ana = grads_of(&grads.gaussians, grp);
        if num.iter().all(|v| *v == 0.0) {
            assert!(
                ana.iter().all(|v| v.abs() < 1e-12),
                "{:?} {grp:?}: expected zero",
                case.modality
            );
            continue;
        }
        let e = rel_err(&num, &ana);
        assert!(e < TOL, "{:?} {grp:?}: relative error {e}", case.modality);
    }
    let (g_omega, g_tau) = grads.camera_tangent(&case.cam);
    let num = central_diff(&[0.0; 6], H, |p| {
        let cam = case
            .cam
            .retract(&Vec3::new(p[0], p[1], p[2]), &Vec3::new(p[3], p[4], p[5]));
        case.loss(&case.g, &cam)
    });
    let ana: Vec<f64> = g_omega.iter().chain(g_tau.iter()).copied().collect();
    let e = rel_err(&num, &ana);
    assert!(e < TOL, "{:?} camera: relative error {e}", case.modality);
}

#[test]
fn rgb_gradients_match_finite_differences() {
    for seed in [1, 2, 3] {
        check_case(&Case::new(10, 2, Modality::Rgb, seed * 10));
    }
}

#[test]
fn normal_gradients_match_finite_differences() {
    for seed in [4, 5] {
        check_case(&Case::new(10, 0, Modality::Normals, seed * 10));
    }
}

#[test]
fn mask_gradients_match_finite_differences() {
    for seed in [6, 7] {
        check_case(&Case::new(10, 0, Modality::Mask, seed * 10));
    }
}

#[test]
fn optical_axis_translation_slope() {
    let cam = Camera::new(
        40.0,
        40.0,
        16.0,
        16.0,
        32,
        32,
        Mat3::identity(),
        Vec3::zeros(),
    )
    .unwrap();
    let mut g = WorldGaussians::empty(0);
    g.means.push(Vec3::new(0.0, 0.0, 1.0));
    g.rotations.push(Mat3::identity());
    g.scales.push(Vec3::new(0.05, 0.05, 1e-7));
    g.sh_coeffs.extend([1.0, 1.0, 1.0]);
    g.opacities.push(0.8);
    let cfg = RasterConfig::default();
    let intensity = |c: &Camera| {
        let out = render(&g, c, Modality::Rgb, [0.0; 3], &cfg).unwrap();
        out.color.get(16, 16, 0) + out.color.get(20, 16, 0)
    };
    let out = render(&g, &cam, Modality::Rgb, [0.0; 3], &cfg).unwrap();
    let mut cot = Image::new(32, 32, 3);
    cot.set(16, 16, 0, 1.0);
    cot.set(20, 16, 0, 1.0);
    let grads = render_vjp(&g, &cam, Modality::Rgb, [0.0; 3], &cfg, &out, &cot, None).unwrap();
    let tz = Vec3::new(0.0, 0.0, H);
    let slope = (intensity(&cam.retract(&Vec3::zeros(), &tz))
        - intensity(&cam.retract(&Vec3::zeros(), &-tz)))
        / (2.0 * H);
    assert!(slope.abs() > 1e-3);
    assert!((grads.camera_translation.z - slope).abs() < 1e-3 * slope.abs());
}

/// render(bind_to_world(mesh)) against mesh vertex positions.
#[test]
fn end_to_end_vertex_gradients() {
    let sphere = make_icosphere(1, 0.3, Vec3::zeros()).unwrap();
    let mut rng = common::rng(8);
    use rand::Rng;
    let verts: Vec<Vec3> = sphere
        .vertices()
        .iter()
        .map(|p| p * rng.random_range(0.85..1.15))
        .collect();
    let mesh = sphere.with_vertices(verts).unwrap();
    let n = 3 * mesh.face_count() / 4;
    let surfels = SurfelSet {
        face_id: (0..n as u32)
            .map(|i| i % mesh.face_count() as u32)
            .collect(),
        bary_logits: random_vec(3 * n, 11),
        tangent_log_scales: random_vec(2 * n, 12)
            .iter()
            .map(|v| -2.8 + 0.3 * v)
            .collect(),
        normal_log_scales: None,
        sh_degree: 1,
        sh_coeffs: random_vec(12 * n, 13),
        opacity_logits: Some(random_vec(n, 14)),
    };
    let cam = camera(32, 32);
    let cfg = RasterConfig::default();
    for modality in [Modality::Rgb, Modality::Normals, Modality::Mask] {
        let cot = Image::from_data(32, 32, 3, random_vec(32 * 32 * 3, 15)).unwrap();
        let loss = |m: &meshsplat::geometry::TriangleMesh| {
            let g = bind_to_world(m, &surfels).unwrap();
            let out = render(&g, &cam, modality, [0.0; 3], &cfg).unwrap();
            out.color
                .data
                .iter()
                .zip(&cot.data)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let g = bind_to_world(&mesh, &surfels).unwrap();
        let out = render(&g, &cam, modality, [0.0; 3], &cfg).unwrap();
        let rg = render_vjp(&g, &cam, modality, [0.0; 3], &cfg, &out, &cot, None).unwrap();
        let sg = bind_to_world_vjp(&mesh, &surfels, &rg.gaussians).unwrap();
        let x: Vec<f64> = mesh
            .vertices()
            .iter()
            .flat_map(|v| [v.x, v.y, v.z])
            .collect();
        let num = central_diff(&x, H, |p| {
            let v = p.chunks(3).map(Vec3::from_column_slice).collect();
            loss(&mesh.with_vertices(v).unwrap())
        });
        let ana: Vec<f64> = sg.vertices.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
        let e = rel_err(&num, &ana);
        assert!(e < TOL, "{modality:?}: relative error {e}");
    }
}

#[test]
fn front_gradients_survive_transmittance_underflow() {
    // a translucent front splat over 400 nearly opaque layers: the product of
    // (1 - alpha) behind it underflows to zero
    let cam = camera(8, 8);
    let mut g = gaussians(1, 0, 21);
    g.means[0] = Vec3::new(0.01, -0.02, 0.0);
    g.opacities[0] = 0.5;
    for k in 0..400 {
        g.means.push(Vec3::new(0.0, 0.0, 0.3 + 0.001 * k as f64));
        g.rotations.push(Mat3::identity());
        g.scales.push(Vec3::new(0.4, 0.4, 0.01));
        g.sh_coeffs.extend([0.1 * (k % 3) as f64, 0.2, -0.1]);
        g.opacities.push(1.0);
    }
    let cfg = RasterConfig::default();
    let out = render(&g, &cam, Modality::Rgb, [0.1, 0.2, 0.3], &cfg).unwrap();
    assert!(out.alpha.data.iter().any(|a| *a == 1.0));
    let w = Image::from_data(8, 8, 3, random_vec(8 * 8 * 3, 4)).unwrap();
    let rg = render_vjp(
        &g,
        &cam,
        Modality::Rgb,
        [0.1, 0.2, 0.3],
        &cfg,
        &out,
        &w,
        None,
    )
    .unwrap();
    let f = |g: &WorldGaussians| {
        let o = render(g, &cam, Modality::Rgb, [0.1, 0.2, 0.3], &cfg).unwrap();
        o.color
            .data
            .iter()
            .zip(&w.data)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let x: Vec<f64> = g.means[0].iter().copied().chain([g.opacities[0]]).collect();
    let num = central_diff(&x, H, |v| {
        let mut h = g.clone();
        h.means[0] = Vec3::new(v[0], v[1], v[2]);
        h.opacities[0] = v[3];
        f(&h)
    });
    let ana = [
        rg.gaussians.means[0].x,
        rg.gaussians.means[0].y,
        rg.gaussians.means[0].z,
        rg.gaussians.opacities[0],
    ];
    assert!(rel_err(&num, &ana) < TOL, "{num:?} vs {ana:?}");
}
