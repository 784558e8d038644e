//! Bundled ground-truth scenes: two textured objects and a two-arm robot.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{Dataset, Frame, SplatAsset};
use crate::error::{Error, Result};
use crate::geometry::{allocate_gaussians, make_icosphere, TriangleMesh};
use crate::image::Image;
use crate::kinematics::{
    forward_kinematics, Body, CameraMount, FkOutput, Joint, JointState, KinematicChain, Pose,
    TcpSite,
};
use crate::raster::{render, Camera, Modality, RasterConfig};
use crate::sh::rgb_to_dc;
use crate::so3::{self, Mat3, Vec3};
use crate::splatmesh::{bind_to_world, SurfelInit, SurfelSet, WorldGaussians};

pub const OBJECT_SCENES: [&str; 2] = ["ellipsoid", "bumpy"];

/// Smooth color pattern with a few-centimeter period.
pub fn procedural_color(p: &Vec3) -> [f64; 3] {
    let a = Vec3::new(110.0, 40.0, -60.0);
    let b = Vec3::new(-30.0, 120.0, 50.0);
    let c = Vec3::new(70.0, -50.0, 130.0);
    [
        0.5 + 0.4 * (a.dot(p) + 0.3).sin(),
        0.5 + 0.4 * (b.dot(p) + 1.9).sin(),
        0.5 + 0.4 * (c.dot(p) + 4.0).sin(),
    ]
}

/// Opacity-one, degree-0 surfels whose colors come from `color(local point)`.
pub fn paint_surfels(
    mesh: &TriangleMesh,
    per_face: f64,
    seed: u64,
    color: impl Fn(&Vec3, &Vec3) -> [f64; 3],
) -> Result<SurfelSet> {
    let counts = allocate_gaussians(mesh, per_face, seed)?;
    let init = SurfelInit {
        sh_degree: 0,
        opacity: None,
        ..SurfelInit::default()
    };
    let mut surfels = SurfelSet::initialize(mesh, &counts, &init, seed.wrapping_add(1))?;
    let world = bind_to_world(mesh, &surfels)?;
    for i in 0..surfels.len() {
        let c = color(&world.means[i], &world.rotations[i].column(2).into_owned());
        for ch in 0..3 {
            surfels.sh_coeffs[3 * i + ch] = rgb_to_dc(c[ch]);
        }
    }
    Ok(surfels)
}

const OBJECT_SUBDIVISIONS: u32 = 4;
const OBJECT_GAUSSIANS_PER_FACE: f64 = 8.0;

/// Ellipsoid with semi-axes 6, 4.5 and 3.5 cm centered at the origin.
pub fn ellipsoid(seed: u64) -> Result<SplatAsset> {
    let unit = make_icosphere(OBJECT_SUBDIVISIONS, 1.0, Vec3::zeros())?;
    let axes = Vec3::new(0.06, 0.045, 0.035);
    let mesh = unit.with_vertices(
        unit.vertices()
            .iter()
            .map(|v| v.component_mul(&axes))
            .collect(),
    )?;
    let surfels = paint_surfels(&mesh, OBJECT_GAUSSIANS_PER_FACE, seed, |p, _| {
        procedural_color(p)
    })?;
    Ok(SplatAsset { mesh, surfels })
}

/// Sphere of radius 5 cm with a `1 + 0.1 sin 3θ cos 4φ` radial bump pattern.
pub fn bumpy_sphere(seed: u64) -> Result<SplatAsset> {
    let unit = make_icosphere(OBJECT_SUBDIVISIONS, 1.0, Vec3::zeros())?;
    let verts = unit
        .vertices()
        .iter()
        .map(|v| {
            let theta = v.z.clamp(-1.0, 1.0).acos();
            let phi = v.y.atan2(v.x);
            0.05 * (1.0 + 0.1 * (3.0 * theta).sin() * (4.0 * phi).cos()) * v
        })
        .collect();
    let mesh = unit.with_vertices(verts)?;
    let surfels = paint_surfels(&mesh, OBJECT_GAUSSIANS_PER_FACE, seed, |p, _| {
        procedural_color(p)
    })?;
    Ok(SplatAsset { mesh, surfels })
}

pub fn object_scene(name: &str, seed: u64) -> Result<SplatAsset> {
    match name {
        "ellipsoid" => ellipsoid(seed),
        "bumpy" | "bumpy_sphere" => bumpy_sphere(seed),
        other => Err(Error::Config(format!(
            "unknown scene '{other}' (expected one of: ellipsoid, bumpy, robot)"
        ))),
    }
}

fn push_grid(
    verts: &mut Vec<Vec3>,
    faces: &mut Vec<[u32; 3]>,
    origin: Vec3,
    du: Vec3,
    dv: Vec3,
    cell: f64,
) {
    let nu = (du.norm() / cell).ceil().max(1.0) as usize;
    let nv = (dv.norm() / cell).ceil().max(1.0) as usize;
    let base = verts.len() as u32;
    for j in 0..=nv {
        for i in 0..=nu {
            verts.push(origin + du * (i as f64 / nu as f64) + dv * (j as f64 / nv as f64));
        }
    }
    let idx = |i: usize, j: usize| base + (j * (nu + 1) + i) as u32;
    for j in 0..nv {
        for i in 0..nu {
            let (a, b, c, d) = (idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
}

/// Axis-aligned box with outward faces, each side split into cells of at
/// most `cell` meters. Sides do not share vertices.
pub fn make_box(lo: Vec3, hi: Vec3, cell: f64) -> Result<TriangleMesh> {
    let d = hi - lo;
    let (x, y, z) = (
        Vec3::new(d.x, 0.0, 0.0),
        Vec3::new(0.0, d.y, 0.0),
        Vec3::new(0.0, 0.0, d.z),
    );
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    let sides = [
        (Vec3::new(hi.x, lo.y, lo.z), y, z),
        (lo, z, y),
        (Vec3::new(lo.x, hi.y, lo.z), z, x),
        (lo, x, z),
        (Vec3::new(lo.x, lo.y, hi.z), x, y),
        (lo, y, x),
    ];
    for (o, du, dv) in sides {
        push_grid(&mut verts, &mut faces, o, du, dv, cell);
    }
    TriangleMesh::new(verts, faces)
}

/// Mesh and surfels attached to a body (or the world), in body coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotPart {
    pub body: Option<usize>,
    pub asset: SplatAsset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobotScene {
    pub chain: KinematicChain,
    pub parts: Vec<RobotPart>,
    /// Nominal joint configurations at which frames are captured.
    pub snapshots: Vec<JointState>,
    pub background: [f64; 3],
}

/// Posed Gaussians of a robot scene plus the span each part occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct PosedRobot {
    pub gaussians: WorldGaussians,
    /// `(first index, count)` per part.
    pub spans: Vec<(usize, usize)>,
    pub fk: FkOutput,
}

impl RobotScene {
    /// Part Gaussians in body coordinates.
    pub fn local_gaussians(&self) -> Result<Vec<WorldGaussians>> {
        self.parts.iter().map(|p| p.asset.gaussians()).collect()
    }

    pub fn pose(&self, local: &[WorldGaussians], q: &JointState) -> Result<PosedRobot> {
        let fk = forward_kinematics(&self.chain, q)?;
        let mut gaussians = WorldGaussians::empty(local.first().map_or(0, |g| g.sh_degree));
        let mut spans = Vec::with_capacity(self.parts.len());
        for (part, g) in self.parts.iter().zip(local) {
            spans.push((gaussians.len(), g.len()));
            match part.body {
                Some(b) => gaussians
                    .extend(&g.transformed(&fk.bodies[b].rotation, &fk.bodies[b].translation)),
                None => gaussians.extend(g),
            }
        }
        Ok(PosedRobot {
            gaussians,
            spans,
            fk,
        })
    }
}

const ROBOT_CELL: f64 = 0.02;
const ROBOT_DENSITY: f64 = 40_000.0; // Gaussians per square meter
const LINK_WIDTH: f64 = 0.04;

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let f = |n: f64| {
        let k = (n + h * 6.0) % 6.0;
        v - v * s * k.min(4.0 - k).clamp(0.0, 1.0)
    };
    [f(5.0), f(3.0), f(1.0)]
}

fn link_part(body: usize, lo: Vec3, hi: Vec3, hue: f64, seed: u64) -> Result<RobotPart> {
    let mesh = make_box(lo, hi, ROBOT_CELL)?;
    let per_face = ROBOT_DENSITY * mesh.surface_area() / mesh.face_count() as f64;
    let surfels = paint_surfels(&mesh, per_face, seed, |p, n| {
        let side = if n.x.abs() > 0.5 {
            if n.x > 0.0 {
                0.0
            } else {
                1.0
            }
        } else if n.y.abs() > 0.5 {
            if n.y > 0.0 {
                2.0
            } else {
                3.0
            }
        } else {
            4.0
        };
        let stripe = if ((p.z / 0.015).floor() as i64).rem_euclid(2) == 0 {
            1.0
        } else {
            0.7
        };
        let c = hsv((hue + 0.07 * side).fract(), 0.65, 0.55 + 0.08 * side);
        c.map(|x| (x * stripe).clamp(0.0, 1.0))
    })?;
    Ok(RobotPart {
        body: Some(body),
        asset: SplatAsset { mesh, surfels },
    })
}

fn table_part(seed: u64) -> Result<RobotPart> {
    let (lo, hi) = (Vec3::new(-0.5, -0.35, -0.02), Vec3::new(0.5, 0.35, 0.0));
    let mut verts = Vec::new();
    let mut faces = Vec::new();
    push_grid(
        &mut verts,
        &mut faces,
        Vec3::new(lo.x, lo.y, hi.z),
        Vec3::new(hi.x - lo.x, 0.0, 0.0),
        Vec3::new(0.0, hi.y - lo.y, 0.0),
        0.05,
    );
    let mesh = TriangleMesh::new(verts, faces)?;
    let per_face = 0.6 * ROBOT_DENSITY * mesh.surface_area() / mesh.face_count() as f64;
    let surfels = paint_surfels(&mesh, per_face, seed, |p, _| {
        let checker =
            ((p.x / 0.05).floor() as i64 + (p.y / 0.05).floor() as i64).rem_euclid(2) as f64;
        let base = 0.35 + 0.35 * checker;
        [
            base + 0.1 * (p.x * 9.0).sin(),
            base + 0.05 * (p.y * 11.0).cos(),
            base * 0.8 + 0.1,
        ]
        .map(|x| x.clamp(0.0, 1.0))
    })?;
    Ok(RobotPart {
        body: None,
        asset: SplatAsset { mesh, surfels },
    })
}

/// Camera mount looking from `eye` at `target`, fixed in the world.
fn world_mount(
    name: &str,
    eye: Vec3,
    target: Vec3,
    fov_deg: f64,
    res: usize,
) -> Result<CameraMount> {
    let cam = Camera::look_at(eye, target, Vec3::z(), fov_deg.to_radians(), res, res)?;
    Ok(CameraMount {
        name: name.into(),
        body: None,
        local: Pose::new(cam.rotation.transpose(), cam.center()),
        fx: cam.fx,
        fy: cam.fy,
        cx: cam.cx,
        cy: cam.cy,
        width: res,
        height: res,
        weight: 1.0,
        perturb: true,
    })
}

fn focal(fov_deg: f64, res: usize) -> f64 {
    0.5 * res as f64 / (0.5 * fov_deg.to_radians()).tan()
}

/// Two 6-DoF arms facing each other over a checkered table, watched by two
/// world-fixed cameras and one wrist camera per arm.
pub fn robot(seed: u64, resolution: usize) -> Result<RobotScene> {
    let mut bodies = Vec::new();
    let mut parts = Vec::new();
    let mut cameras = Vec::new();
    let mut tcps = Vec::new();
    let y = Vec3::y();
    let z = Vec3::z();
    for (arm, (x0, y0, yaw, hue)) in [
        (-0.3, 0.08, 0.0, 0.0),
        (0.3, -0.08, std::f64::consts::PI, 0.55),
    ]
    .into_iter()
    .enumerate()
    {
        let name = |s: &str| format!("{}_{s}", ["left", "right"][arm]);
        let base = bodies.len();
        let links: [(&str, Vec3, Joint, f64, f64); 7] = [
            ("base", Vec3::new(x0, y0, 0.0), Joint::Fixed, 0.05, 0.10),
            (
                "waist",
                Vec3::new(0.0, 0.0, 0.05),
                Joint::Revolute { axis: z },
                0.04,
                0.05,
            ),
            (
                "upper",
                Vec3::new(0.0, 0.0, 0.04),
                Joint::Revolute { axis: y },
                0.18,
                LINK_WIDTH,
            ),
            (
                "fore",
                Vec3::new(0.0, 0.0, 0.18),
                Joint::Revolute { axis: y },
                0.16,
                LINK_WIDTH,
            ),
            (
                "roll",
                Vec3::new(0.0, 0.0, 0.16),
                Joint::Revolute { axis: z },
                0.04,
                0.035,
            ),
            (
                "pitch",
                Vec3::new(0.0, 0.0, 0.04),
                Joint::Revolute { axis: y },
                0.04,
                0.035,
            ),
            (
                "hand",
                Vec3::new(0.0, 0.0, 0.04),
                Joint::Revolute { axis: z },
                0.06,
                0.03,
            ),
        ];
        for (k, (label, offset, joint, length, width)) in links.into_iter().enumerate() {
            let idx = bodies.len();
            let local = if k == 0 {
                Pose::new(so3::exp(&Vec3::new(0.0, 0.0, yaw)), offset)
            } else {
                Pose::new(Mat3::identity(), offset)
            };
            bodies.push(Body {
                name: name(label),
                parent: (k > 0).then(|| idx - 1),
                local,
                joint,
            });
            let h = width / 2.0;
            parts.push(link_part(
                idx,
                Vec3::new(-h, -h, 0.0),
                Vec3::new(h, h, length),
                hue + 0.06 * k as f64,
                seed.wrapping_add(100 * arm as u64 + k as u64),
            )?);
        }
        let hand = base + 6;
        tcps.push(TcpSite {
            body: hand,
            point: Vec3::new(0.0, 0.0, 0.08),
        });
        let f = focal(70.0, resolution);
        let c = (resolution as f64 - 1.0) / 2.0;
        cameras.push(CameraMount {
            name: name("wrist"),
            body: Some(base + 3),
            // looks along the forearm toward the hand
            local: Pose::new(
                Mat3::identity(),
                Vec3::new(LINK_WIDTH / 2.0 + 0.02, 0.0, 0.02),
            ),
            fx: f,
            fy: f,
            cx: c,
            cy: c,
            width: resolution,
            height: resolution,
            weight: 0.1,
            perturb: false,
        });
    }
    let target = Vec3::new(0.0, 0.0, 0.12);
    cameras.insert(
        0,
        world_mount(
            "front",
            Vec3::new(0.05, -0.85, 0.55),
            target,
            45.0,
            resolution,
        )?,
    );
    cameras.insert(
        1,
        world_mount(
            "side",
            Vec3::new(0.75, 0.55, 0.65),
            target,
            45.0,
            resolution,
        )?,
    );
    parts.push(table_part(seed.wrapping_add(999))?);
    let chain = KinematicChain::new(bodies, cameras, tcps)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a10_4a00);
    let ranges = [
        (-0.5, 0.5),
        (0.3, 0.8),
        (0.8, 1.4),
        (-0.5, 0.5),
        (0.3, 0.8),
        (-0.6, 0.6),
    ];
    let snapshots = (0..3)
        .map(|_| JointState {
            angles: (0..2)
                .flat_map(|_| ranges)
                .map(|(lo, hi)| rng.random_range(lo..hi))
                .collect(),
        })
        .collect();
    Ok(RobotScene {
        chain,
        parts,
        snapshots,
        background: [0.85, 0.88, 0.92],
    })
}

/// One RGB frame per camera mount and snapshot, rendered at the nominal
/// joint states. Every frame is a training frame.
pub fn robot_dataset(scene: &RobotScene, raster: &RasterConfig) -> Result<Dataset> {
    let local = scene.local_gaussians()?;
    let posed: Vec<PosedRobot> = scene
        .snapshots
        .iter()
        .map(|q| scene.pose(&local, q))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (s, (p, q)) in posed.iter().zip(&scene.snapshots).enumerate() {
        for (m, cam) in p.fk.cameras.iter().enumerate() {
            jobs.push((s, m, cam.clone(), q.clone()));
        }
    }
    let images: Vec<Image> = jobs
        .par_iter()
        .map(|(s, _, cam, _)| {
            let out = render(
                &posed[*s].gaussians,
                cam,
                Modality::Rgb,
                scene.background,
                raster,
            )?;
            Ok(out.color)
        })
        .collect::<Result<_>>()?;
    let mut cameras = Vec::with_capacity(jobs.len());
    let mut frames = Vec::with_capacity(jobs.len());
    for (i, ((s, m, cam, q), rgb)) in jobs.into_iter().zip(images).enumerate() {
        cameras.push(cam);
        frames.push(Frame {
            name: format!("snap{s}_{}", scene.chain.cameras[m].name),
            camera: i,
            mount: Some(m),
            snapshot: Some(s),
            joints: Some(q),
            rgb,
            mask: None,
            normals: None,
        });
    }
    let n = frames.len();
    Ok(Dataset {
        cameras,
        frames,
        train: (0..n).collect(),
        test: Vec::new(),
        background: scene.background,
        center: Vec3::new(0.0, 0.0, 0.12),
        extent: 1.0,
    })
}
