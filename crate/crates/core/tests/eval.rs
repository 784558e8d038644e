mod common;

use meshsplat::eval::{
    align_eval_cameras, chamfer, chamfer_brute_force, image_metrics, masked_psnr, psnr,
    sample_surface, scene_hash, tcp_error, AlignConfig, FrameMetric, HeldOutFrame, Metrics,
    PointSample,
};
use meshsplat::geometry::{make_icosphere, TriangleMesh};
use meshsplat::image::Image;
use meshsplat::kinematics::{Body, Joint, JointState, KinematicChain, Pose, TcpSite};
use meshsplat::raster::{render, Modality};
use meshsplat::so3::{self, Mat3, Vec3};
use proptest::prelude::*;
use rand::Rng;

fn points(n: usize, seed: u64, spread: f64) -> PointSample {
    let mut rng = common::rng(seed);
    PointSample {
        points: (0..n)
            .map(|_| {
                Vec3::new(
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                    rng.random_range(-spread..spread),
                )
            })
            .collect(),
        source: format!("random-{seed}"),
    }
}

fn right_triangle() -> TriangleMesh {
    TriangleMesh::new(
        vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ],
        vec![[0, 1, 2]],
    )
    .unwrap()
}

#[test]
fn triangle_samples_center_on_the_centroid() {
    let s = sample_surface(&right_triangle(), 100_000, 3).unwrap();
    assert_eq!(s.len(), 100_000);
    let c = s.points.iter().sum::<Vec3>() / s.len() as f64;
    assert!((c.x - 1.0 / 3.0).abs() < 0.01 / 3.0, "{c}");
    assert!((c.y - 1.0 / 3.0).abs() < 0.01 / 3.0, "{c}");
    for p in &s.points {
        assert!(p.x >= 0.0 && p.y >= 0.0 && p.x + p.y <= 1.0 + 1e-12);
    }
}

#[test]
fn single_face_samples_stay_on_its_plane() {
    let r = so3::exp(&Vec3::new(0.4, -1.1, 0.3));
    let mesh = right_triangle().transformed(&r, &Vec3::new(0.2, 0.5, -1.0));
    let n = mesh.face_normals().unwrap()[0];
    let v0 = mesh.vertices()[0];
    for p in &sample_surface(&mesh, 2000, 8).unwrap().points {
        assert!((p - v0).dot(&n).abs() < 1e-12);
    }
}

#[test]
fn zero_samples_is_empty_and_sampling_is_seeded() {
    let mesh = make_icosphere(2, 0.05, Vec3::zeros()).unwrap();
    assert!(sample_surface(&mesh, 0, 1).unwrap().is_empty());
    let a = sample_surface(&mesh, 500, 7).unwrap();
    let b = sample_surface(&mesh, 500, 7).unwrap();
    let c = sample_surface(&mesh, 500, 8).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.points, c.points);
}

#[test]
fn sphere_samples_follow_area() {
    let mesh = make_icosphere(3, 1.0, Vec3::zeros()).unwrap();
    let s = sample_surface(&mesh, 40_000, 2).unwrap();
    let upper = s.points.iter().filter(|p| p.z > 0.0).count() as f64 / s.len() as f64;
    assert!((upper - 0.5).abs() < 0.01, "{upper}");
}

#[test]
fn chamfer_hand_cases() {
    let a = points(300, 1, 1.0);
    assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    let origin = PointSample {
        points: vec![Vec3::zeros()],
        source: "a".into(),
    };
    let one = PointSample {
        points: vec![Vec3::new(1.0, 0.0, 0.0)],
        source: "b".into(),
    };
    assert_eq!(chamfer(&origin, &one).unwrap(), 1.0);
    let empty = PointSample {
        points: vec![],
        source: "e".into(),
    };
    assert!(chamfer(&empty, &one).is_err());
    assert!(chamfer(&one, &empty).is_err());
    assert!(chamfer_brute_force(&empty, &one).is_err());
}

#[test]
fn chamfer_equals_brute_force_exactly() {
    for (seed, na, nb, spread) in [
        (1u64, 1000usize, 1000usize, 1.0),
        (2, 1, 1000, 50.0),
        (3, 999, 17, 0.01),
        (4, 500, 700, 1e4),
    ] {
        let a = points(na, seed, spread);
        let b = points(nb, seed + 100, spread);
        assert_eq!(
            chamfer(&a, &b).unwrap(),
            chamfer_brute_force(&a, &b).unwrap()
        );
    }
}

#[test]
fn chamfer_on_clustered_points_equals_brute_force() {
    let mut a = points(400, 5, 0.001);
    a.points.extend(points(400, 6, 100.0).points);
    let mut b = points(10, 7, 100.0);
    b.points.push(Vec3::new(1000.0, 0.0, 0.0));
    assert_eq!(
        chamfer(&a, &b).unwrap(),
        chamfer_brute_force(&a, &b).unwrap()
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn chamfer_is_symmetric_and_matches_brute_force(seed in 0u64..10_000, na in 1usize..200, nb in 1usize..200) {
        let a = points(na, seed, 2.0);
        let b = points(nb, seed ^ 0xff, 2.0);
        let ab = chamfer(&a, &b).unwrap();
        prop_assert_eq!(ab, chamfer(&b, &a).unwrap());
        prop_assert_eq!(ab, chamfer_brute_force(&a, &b).unwrap());
        prop_assert!(ab > 0.0);
    }

    #[test]
    fn chamfer_is_rigid_invariant(seed in 0u64..10_000, w in prop::array::uniform3(-3.0f64..3.0), t in prop::array::uniform3(-10.0f64..10.0)) {
        let a = points(150, seed, 1.0);
        let b = points(120, seed + 1, 1.0);
        let r: Mat3 = so3::exp(&Vec3::from(w));
        let t = Vec3::from(t);
        let mv = |s: &PointSample| PointSample {
            points: s.points.iter().map(|p| r * p + t).collect(),
            source: s.source.clone(),
        };
        let before = chamfer(&a, &b).unwrap();
        let after = chamfer(&mv(&a), &mv(&b)).unwrap();
        prop_assert!((before - after).abs() <= 1e-9 * before);
    }
}

fn gray(w: usize, h: usize, v: f64) -> Image {
    Image::from_data(w, h, 3, vec![v; w * h * 3]).unwrap()
}

#[test]
fn psnr_reference_values() {
    let a = gray(8, 8, 0.3);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    let b = gray(8, 8, 0.4);
    assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&gray(4, 4, 0.0), &gray(4, 4, 1.0)).unwrap(), 0.0);
    assert!(psnr(&a, &gray(4, 8, 0.3)).is_err());
}

#[test]
fn masked_psnr_ignores_unmasked_pixels() {
    let a = gray(4, 4, 0.5);
    let mut b = gray(4, 4, 0.5);
    for k in 0..3 {
        b.data[k] = 0.0;
    }
    let mut m = Image::from_data(4, 4, 1, vec![1.0; 16]).unwrap();
    m.data[0] = 0.0;
    assert_eq!(masked_psnr(&a, &b, &m).unwrap(), f64::INFINITY);
    m.data = vec![0.0; 16];
    assert!(masked_psnr(&a, &b, &m).is_err());
}

fn arm() -> (KinematicChain, f64) {
    let radius = 0.1;
    let chain = KinematicChain::new(
        vec![Body {
            name: "link".into(),
            parent: None,
            local: Pose::new(Mat3::identity(), Vec3::new(0.0, 0.0, 0.3)),
            joint: Joint::Revolute { axis: Vec3::z() },
        }],
        vec![],
        vec![TcpSite {
            body: 0,
            point: Vec3::new(radius, 0.0, 0.0),
        }],
    )
    .unwrap();
    (chain, radius)
}

#[test]
fn tcp_error_in_millimeters() {
    let (chain, r) = arm();
    let q = JointState { angles: vec![0.7] };
    assert_eq!(tcp_error(&chain, &q, &q).unwrap(), 0.0);
    let theta = 2.0 * (0.0015 / r).asin();
    let moved = JointState {
        angles: vec![0.7 + theta],
    };
    assert!((tcp_error(&chain, &moved, &q).unwrap() - 3.0).abs() < 1e-9);
    let no_tcp = KinematicChain::new(chain.bodies.clone(), vec![], vec![]).unwrap();
    assert!(tcp_error(&no_tcp, &q, &q).is_err());
}

fn held_out(perturb_deg: f64) -> (meshsplat::splatmesh::WorldGaussians, HeldOutFrame) {
    let scene = common::gaussians(60, 1, 31);
    let cam = common::camera(32, 32);
    let bg = [0.1, 0.2, 0.3];
    let gt = render(
        &scene,
        &cam,
        Modality::Rgb,
        bg,
        &AlignConfig::default().raster,
    )
    .unwrap();
    let axis = Vec3::new(0.3, -0.8, 0.5).normalize();
    let start = cam.retract(&(axis * perturb_deg.to_radians()), &Vec3::zeros());
    (
        scene,
        HeldOutFrame {
            name: "view".into(),
            camera: start,
            rgb: gt.color,
        },
    )
}

#[test]
fn alignment_at_the_exact_pose_is_a_no_op() {
    let (scene, frame) = held_out(0.0);
    let before = scene_hash(&scene);
    let out =
        align_eval_cameras(&scene, &[frame], [0.1, 0.2, 0.3], &AlignConfig::default()).unwrap();
    assert!(out[0].delta.norm() < 1e-6);
    assert_eq!(out[0].psnr_before, f64::INFINITY);
    assert_eq!(out[0].psnr_after, out[0].psnr_before);
    assert_eq!(scene_hash(&scene), before);
}

#[test]
fn alignment_recovers_a_small_rotation() {
    let (scene, frame) = held_out(0.5);
    let before = scene_hash(&scene);
    let out =
        align_eval_cameras(&scene, &[frame], [0.1, 0.2, 0.3], &AlignConfig::default()).unwrap();
    let a = &out[0];
    assert!(a.psnr_after >= a.psnr_before);
    assert!(
        a.psnr_after > a.psnr_before + 1.0,
        "{} -> {}",
        a.psnr_before,
        a.psnr_after
    );
    assert_eq!(scene_hash(&scene), before);
    let again = render(
        &scene,
        &a.camera,
        Modality::Rgb,
        [0.1, 0.2, 0.3],
        &AlignConfig::default().raster,
    )
    .unwrap();
    assert_eq!(again.color, a.render);
}

#[test]
fn alignment_needs_frames() {
    let scene = common::gaussians(4, 0, 1);
    assert!(align_eval_cameras(&scene, &[], [0.0; 3], &AlignConfig::default()).is_err());
}

#[test]
fn scene_hash_sees_single_bit_changes() {
    let g = common::gaussians(10, 1, 2);
    let mut h = g.clone();
    assert_eq!(scene_hash(&g), scene_hash(&h));
    h.opacities[9] = f64::from_bits(h.opacities[9].to_bits() ^ 1);
    assert_ne!(scene_hash(&g), scene_hash(&h));
}

#[test]
fn metrics_json_layout() {
    let a = gray(16, 16, 0.5);
    let b = gray(16, 16, 0.6);
    let (p, s) = image_metrics(&[("same".into(), &a, &a), ("off".into(), &b, &a)]).unwrap();
    assert_eq!(p.per_frame["same"], f64::INFINITY);
    assert!((p.per_frame["off"] - 20.0).abs() < 1e-9);
    assert!((s.per_frame["same"] - 1.0).abs() < 1e-12);
    let m = Metrics {
        cd_mm2: Some(0.25),
        psnr_db: Some(p),
        ssim: Some(s),
        tcp_error_mm: None,
    };
    let j = m.to_json();
    assert_eq!(j["cd_mm2"], 0.25);
    assert_eq!(j["psnr_db"]["per_frame"]["same"], "inf");
    assert_eq!(j["psnr_db"]["mean"], "inf");
    assert!(j["tcp_error_mm"].is_null());
    assert!(j["ssim"]["mean"].as_f64().unwrap() < 1.0);
    assert!(FrameMetric::from_pairs(Vec::new()).mean.is_nan());
}
