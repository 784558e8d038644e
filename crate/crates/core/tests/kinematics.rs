mod common;

use common::{central_diff, random_vec, rel_err};
use meshsplat::kinematics::{
    fk_vjp, forward_kinematics, Body, CameraMount, FkCotangents, Joint, JointState, KinematicChain,
    Pose, TcpSite,
};
use meshsplat::so3::{self, Mat3, Vec3};
use proptest::prelude::*;
use rand::Rng;

fn random_chain(depth: usize, seed: u64) -> KinematicChain {
    let mut rng = common::rng(seed);
    let mut v = |s: f64| {
        Vec3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    };
    let mut bodies = Vec::new();
    for i in 0..depth {
        let parent = if i == 0 {
            None
        } else {
            Some(i - 1 - (i > 3 && i % 3 == 0) as usize)
        };
        let joint = if i % 4 == 2 {
            Joint::Fixed
        } else {
            Joint::Revolute {
                axis: v(1.0).normalize(),
            }
        };
        bodies.push(Body {
            name: format!("b{i}"),
            parent,
            local: Pose::new(so3::exp(&v(1.5)), v(0.3)),
            joint,
        });
    }
    let cameras = vec![
        CameraMount {
            name: "wrist".into(),
            body: Some(depth - 1),
            local: Pose::new(so3::exp(&v(1.0)), v(0.1)),
            fx: 50.0,
            fy: 50.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
            weight: 0.1,
            perturb: false,
        },
        CameraMount {
            name: "mid".into(),
            body: Some(depth / 2),
            local: Pose::new(so3::exp(&v(1.0)), v(0.1)),
            fx: 50.0,
            fy: 50.0,
            cx: 16.0,
            cy: 16.0,
            width: 32,
            height: 32,
            weight: 1.0,
            perturb: false,
        },
    ];
    let tcps = vec![
        TcpSite {
            body: depth - 1,
            point: v(0.2),
        },
        TcpSite {
            body: depth / 3,
            point: v(0.2),
        },
    ];
    KinematicChain::new(bodies, cameras, tcps).unwrap()
}

fn random_q(chain: &KinematicChain, seed: u64) -> JointState {
    JointState {
        angles: random_vec(chain.joint_count(), seed)
            .iter()
            .map(|a| 2.0 * a)
            .collect(),
    }
}

#[test]
fn tcp_jacobian_matches_finite_differences() {
    for seed in 0..5 {
        let chain = random_chain(6, seed);
        let q = random_q(&chain, seed + 50);
        for (site, dim) in [(0usize, 0usize), (0, 1), (0, 2), (1, 0), (1, 2)] {
            let mut cot = FkCotangents::zeros(&chain);
            cot.tcps[site][dim] = 1.0;
            let ana = fk_vjp(&chain, &q, &cot).unwrap();
            let num = central_diff(&q.angles, 1e-6, |a| {
                forward_kinematics(&chain, &JointState { angles: a.to_vec() })
                    .unwrap()
                    .tcps[site][dim]
            });
            let e = rel_err(&num, &ana);
            assert!(e < 1e-6, "seed {seed}: {e}");
        }
    }
}

fn pairing(out: &meshsplat::kinematics::FkOutput, cot: &FkCotangents) -> f64 {
    let mut s = 0.0;
    for (p, (gr, gt)) in out.bodies.iter().zip(&cot.bodies) {
        s += p.rotation.component_mul(gr).sum() + p.translation.dot(gt);
    }
    for (c, (gw, gt)) in out.cameras.iter().zip(&cot.cameras) {
        s += c.rotation.component_mul(gw).sum() + c.translation.dot(gt);
    }
    for (p, g) in out.tcps.iter().zip(&cot.tcps) {
        s += p.dot(g);
    }
    s
}

#[test]
fn full_vjp_matches_finite_differences() {
    for (depth, seed) in [(3, 1u64), (6, 2), (10, 3), (10, 4)] {
        let chain = random_chain(depth, seed);
        let q = random_q(&chain, seed + 7);
        let mut cot = FkCotangents::zeros(&chain);
        let r = random_vec(12 * chain.bodies.len() + 12 * 2 + 6, seed + 9);
        let mut it = r.into_iter();
        let mut next = || it.next().unwrap();
        for c in cot.bodies.iter_mut().chain(cot.cameras.iter_mut()) {
            c.0 = Mat3::from_fn(|_, _| next());
            c.1 = Vec3::new(next(), next(), next());
        }
        for t in cot.tcps.iter_mut() {
            *t = Vec3::new(next(), next(), next());
        }
        let ana = fk_vjp(&chain, &q, &cot).unwrap();
        let num = central_diff(&q.angles, 1e-6, |a| {
            pairing(
                &forward_kinematics(&chain, &JointState { angles: a.to_vec() }).unwrap(),
                &cot,
            )
        });
        let e = rel_err(&num, &ana);
        assert!(e < 1e-6, "depth {depth}: {e}");
    }
}

#[test]
fn zero_cotangent_zero_gradient() {
    let chain = random_chain(5, 11);
    let g = fk_vjp(&chain, &random_q(&chain, 3), &FkCotangents::zeros(&chain)).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn json_round_trip() {
    let chain = random_chain(7, 21);
    let back = KinematicChain::from_json(&chain.to_json()).unwrap();
    let q = random_q(&chain, 1);
    let a = forward_kinematics(&chain, &q).unwrap();
    let b = forward_kinematics(&back, &q).unwrap();
    for (x, y) in a.tcps.iter().zip(&b.tcps) {
        assert!((x - y).norm() < 1e-12);
    }
    assert_eq!(back.joint_count(), chain.joint_count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn poses_stay_orthonormal(seed in 0u64..100_000, depth in 1usize..11) {
        let chain = random_chain(depth, seed);
        let fk = forward_kinematics(&chain, &random_q(&chain, seed)).unwrap();
        for p in &fk.bodies {
            let r = p.rotation;
            prop_assert!((r.transpose() * r - Mat3::identity()).norm() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn base_pose_equivariance(seed in 0u64..100_000, depth in 1usize..11) {
        let chain = random_chain(depth, seed);
        let q = random_q(&chain, seed + 1);
        let base = Pose::new(so3::exp(&Vec3::new(0.3, -1.0, 0.4)), Vec3::new(1.0, 2.0, -0.5));
        let mut moved = chain.clone();
        moved.bodies[0].local = base.compose(&moved.bodies[0].local);
        let a = forward_kinematics(&chain, &q).unwrap();
        let b = forward_kinematics(&moved, &q).unwrap();
        for (pa, pb) in a.bodies.iter().zip(&b.bodies) {
            let e = base.compose(pa);
            prop_assert!((e.rotation - pb.rotation).norm() < 1e-12);
            prop_assert!((e.translation - pb.translation).norm() < 1e-12);
        }
        for (ta, tb) in a.tcps.iter().zip(&b.tcps) {
            prop_assert!((base.apply(ta) - tb).norm() < 1e-12);
        }
    }
}
