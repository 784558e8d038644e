//! Rigid kinematic trees with revolute and fixed joints.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Camera;
use crate::so3::{self, Mat3, Vec3};

/// Rigid transform `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Mat3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Mat3, translation: Vec3) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_pos_quat(pos: [f64; 3], quat_wxyz: [f64; 4]) -> Self {
        Self::new(so3::from_quat_wxyz(quat_wxyz), Vec3::from(pos))
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Joint {
    Fixed,
    Revolute { axis: Vec3 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Body {
    pub name: String,
    pub parent: Option<usize>,
    pub local: Pose,
    pub joint: Joint,
}

/// A camera rigidly attached to a body, or to the world when `body` is `None`.
/// `local` maps camera coordinates to body coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraMount {
    pub name: String,
    pub body: Option<usize>,
    pub local: Pose,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Per-frame loss weight.
    pub weight: f64,
    /// Whether the mount pose receives a rotation correction during
    /// calibration. World-fixed cameras are always corrected.
    pub perturb: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TcpSite {
    pub body: usize,
    pub point: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KinematicChain {
    pub bodies: Vec<Body>,
    pub cameras: Vec<CameraMount>,
    pub tcps: Vec<TcpSite>,
    joint_of_body: Vec<Option<usize>>,
    joint_bodies: Vec<usize>,
}

/// Joint angles in radians, one per revolute joint in body order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub angles: Vec<f64>,
}

impl JointState {
    pub fn zeros(n: usize) -> Self {
        Self {
            angles: vec![0.0; n],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FkOutput {
    pub bodies: Vec<Pose>,
    pub cameras: Vec<Camera>,
    pub tcps: Vec<Vec3>,
}

/// Cotangents on [`FkOutput`]. Pose cotangents are Euclidean gradients with
/// respect to the rotation matrix and translation. Camera cotangents refer to
/// the world-to-camera pose, as produced by the rasterizer.
#[derive(Debug, Clone, PartialEq)]
pub struct FkCotangents {
    pub bodies: Vec<(Mat3, Vec3)>,
    pub cameras: Vec<(Mat3, Vec3)>,
    pub tcps: Vec<Vec3>,
}

impl FkCotangents {
    pub fn zeros(chain: &KinematicChain) -> Self {
        Self {
            bodies: vec![(Mat3::zeros(), Vec3::zeros()); chain.bodies.len()],
            cameras: vec![(Mat3::zeros(), Vec3::zeros()); chain.cameras.len()],
            tcps: vec![Vec3::zeros(); chain.tcps.len()],
        }
    }
}

impl KinematicChain {
    pub fn new(bodies: Vec<Body>, cameras: Vec<CameraMount>, tcps: Vec<TcpSite>) -> Result<Self> {
        let mut joint_of_body = Vec::with_capacity(bodies.len());
        let mut joint_bodies = Vec::new();
        for (i, b) in bodies.iter().enumerate() {
            if let Some(p) = b.parent {
                if p >= i {
                    return Err(Error::Topology(format!(
                        "body {i} ({}) has parent {p}; parents must precede children",
                        b.name
                    )));
                }
            }
            match b.joint {
                Joint::Fixed => joint_of_body.push(None),
                Joint::Revolute { axis } => {
                    if (axis.norm() - 1.0).abs() > 1e-9 {
                        return Err(Error::Normalization { norm: axis.norm() });
                    }
                    joint_of_body.push(Some(joint_bodies.len()));
                    joint_bodies.push(i);
                }
            }
        }
        for c in &cameras {
            if let Some(b) = c.body {
                if b >= bodies.len() {
                    return Err(Error::Topology(format!(
                        "camera {} mounted on missing body {b}",
                        c.name
                    )));
                }
            }
        }
        for t in &tcps {
            if t.body >= bodies.len() {
                return Err(Error::Topology(format!(
                    "TCP site on missing body {}",
                    t.body
                )));
            }
        }
        Ok(Self {
            bodies,
            cameras,
            tcps,
            joint_of_body,
            joint_bodies,
        })
    }

    pub fn joint_count(&self) -> usize {
        self.joint_bodies.len()
    }

    /// Body index of every revolute joint, in joint order.
    pub fn joint_bodies(&self) -> &[usize] {
        &self.joint_bodies
    }

    pub fn joint_of_body(&self, body: usize) -> Option<usize> {
        self.joint_of_body[body]
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ChainDoc = serde_json::from_str(text)?;
        doc.into_chain()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ChainDoc::from_chain(self)).expect("chain serializes")
    }

    fn check_state(&self, q: &JointState) -> Result<()> {
        if q.angles.len() != self.joint_count() {
            return Err(Error::shape(
                "joint angles",
                self.joint_count(),
                q.angles.len(),
            ));
        }
        Ok(())
    }
}

fn revolute(axis: &Vec3, q: f64) -> Mat3 {
    so3::exp(&(axis * q))
}

fn camera_from_pose(m: &CameraMount, cam_to_world: &Pose) -> Camera {
    let w2c = cam_to_world.inverse();
    Camera {
        fx: m.fx,
        fy: m.fy,
        cx: m.cx,
        cy: m.cy,
        width: m.width,
        height: m.height,
        rotation: w2c.rotation,
        translation: w2c.translation,
    }
}

pub fn forward_kinematics(chain: &KinematicChain, q: &JointState) -> Result<FkOutput> {
    chain.check_state(q)?;
    let mut poses: Vec<Pose> = Vec::with_capacity(chain.bodies.len());
    for (i, b) in chain.bodies.iter().enumerate() {
        let parent = b.parent.map(|p| poses[p]).unwrap_or_else(Pose::identity);
        let mut pose = parent.compose(&b.local);
        if let (Joint::Revolute { axis }, Some(j)) = (b.joint, chain.joint_of_body[i]) {
            pose.rotation *= revolute(&axis, q.angles[j]);
        }
        poses.push(pose);
    }
    let cameras = chain
        .cameras
        .iter()
        .map(|m| {
            let base = m.body.map(|b| poses[b]).unwrap_or_else(Pose::identity);
            camera_from_pose(m, &base.compose(&m.local))
        })
        .collect();
    let tcps = chain
        .tcps
        .iter()
        .map(|t| poses[t.body].apply(&t.point))
        .collect();
    Ok(FkOutput {
        bodies: poses,
        cameras,
        tcps,
    })
}

/// Vector-Jacobian product of [`forward_kinematics`] with respect to the
/// joint angles.
pub fn fk_vjp(chain: &KinematicChain, q: &JointState, cot: &FkCotangents) -> Result<Vec<f64>> {
    chain.check_state(q)?;
    if cot.bodies.len() != chain.bodies.len() {
        return Err(Error::shape(
            "body cotangents",
            chain.bodies.len(),
            cot.bodies.len(),
        ));
    }
    if cot.cameras.len() != chain.cameras.len() {
        return Err(Error::shape(
            "camera cotangents",
            chain.cameras.len(),
            cot.cameras.len(),
        ));
    }
    if cot.tcps.len() != chain.tcps.len() {
        return Err(Error::shape(
            "TCP cotangents",
            chain.tcps.len(),
            cot.tcps.len(),
        ));
    }
    let fk = forward_kinematics(chain, q)?;
    // World-frame twist cotangent per body: (angular, linear).
    let mut twist = vec![(Vec3::zeros(), Vec3::zeros()); chain.bodies.len()];
    for (b, (g_r, g_t)) in cot.bodies.iter().enumerate() {
        let p = &fk.bodies[b];
        twist[b].0 += so3::axial(&(p.rotation * g_r.transpose())) + p.translation.cross(g_t);
        twist[b].1 += g_t;
    }
    for ((m, cam), (g_w, g_t)) in chain.cameras.iter().zip(&fk.cameras).zip(&cot.cameras) {
        let Some(b) = m.body else { continue };
        twist[b].0 -= so3::axial(&(g_w.transpose() * cam.rotation));
        twist[b].1 -= cam.rotation.transpose() * g_t;
    }
    for (t, g) in chain.tcps.iter().zip(&cot.tcps) {
        let p = fk.bodies[t.body].apply(&t.point);
        twist[t.body].0 += p.cross(g);
        twist[t.body].1 += g;
    }
    for b in (0..chain.bodies.len()).rev() {
        if let Some(p) = chain.bodies[b].parent {
            let (w, v) = twist[b];
            twist[p].0 += w;
            twist[p].1 += v;
        }
    }
    Ok(chain
        .joint_bodies
        .iter()
        .map(|&b| {
            let Joint::Revolute { axis } = chain.bodies[b].joint else {
                unreachable!("joint bodies are revolute")
            };
            let pose = &fk.bodies[b];
            let a = pose.rotation * axis;
            let (w, v) = twist[b];
            a.dot(&w) + pose.translation.cross(&a).dot(&v)
        })
        .collect())
}

/// Adds independent `N(0, sigma²)` noise to every joint angle.
pub fn add_joint_noise(q: &JointState, sigma: f64, seed: u64) -> Result<JointState> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::Bound {
            what: "joint noise sigma",
            value: sigma.to_string(),
            allowed: ">= 0",
        });
    }
    if sigma == 0.0 {
        return Ok(q.clone());
    }
    let dist = Normal::new(0.0, sigma).expect("finite positive sigma");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(JointState {
        angles: q.angles.iter().map(|a| a + dist.sample(&mut rng)).collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct JointDoc {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    axis: Option<[f64; 3]>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BodyDoc {
    name: String,
    parent: i64,
    pos: [f64; 3],
    quat: [f64; 4],
    joint: JointDoc,
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraDoc {
    #[serde(default)]
    name: String,
    body: i64,
    pos: [f64; 3],
    quat: [f64; 4],
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    #[serde(default = "default_weight")]
    weight: f64,
    #[serde(default)]
    perturb: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct TcpDoc {
    body: usize,
    pos: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct ChainDoc {
    bodies: Vec<BodyDoc>,
    #[serde(default)]
    cameras: Vec<CameraDoc>,
    #[serde(default)]
    tcps: Vec<TcpDoc>,
}

fn index(i: i64) -> Option<usize> {
    (i >= 0).then_some(i as usize)
}

fn quat(r: &Mat3) -> [f64; 4] {
    so3::to_quat_wxyz(r)
}

impl ChainDoc {
    fn into_chain(self) -> Result<KinematicChain> {
        let bodies = self
            .bodies
            .into_iter()
            .map(|b| {
                let joint = match b.joint.kind.as_str() {
                    "fixed" => Joint::Fixed,
                    "revolute" | "hinge" => Joint::Revolute {
                        axis: Vec3::from(b.joint.axis.ok_or_else(|| {
                            Error::Config(format!("revolute joint of {} needs an axis", b.name))
                        })?),
                    },
                    other => return Err(Error::Config(format!("unknown joint type {other}"))),
                };
                Ok(Body {
                    parent: index(b.parent),
                    local: Pose::from_pos_quat(b.pos, b.quat),
                    name: b.name,
                    joint,
                })
            })
            .collect::<Result<_>>()?;
        let cameras = self
            .cameras
            .into_iter()
            .map(|c| CameraMount {
                name: c.name,
                body: index(c.body),
                local: Pose::from_pos_quat(c.pos, c.quat),
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                weight: c.weight,
                perturb: c.perturb,
            })
            .collect();
        let tcps = self
            .tcps
            .into_iter()
            .map(|t| TcpSite {
                body: t.body,
                point: Vec3::from(t.pos),
            })
            .collect();
        KinematicChain::new(bodies, cameras, tcps)
    }

    fn from_chain(c: &KinematicChain) -> Self {
        ChainDoc {
            bodies: c
                .bodies
                .iter()
                .map(|b| BodyDoc {
                    name: b.name.clone(),
                    parent: b.parent.map_or(-1, |p| p as i64),
                    pos: b.local.translation.into(),
                    quat: quat(&b.local.rotation),
                    joint: match b.joint {
                        Joint::Fixed => JointDoc {
                            kind: "fixed".into(),
                            axis: None,
                        },
                        Joint::Revolute { axis } => JointDoc {
                            kind: "revolute".into(),
                            axis: Some(axis.into()),
                        },
                    },
                })
                .collect(),
            cameras: c
                .cameras
                .iter()
                .map(|m| CameraDoc {
                    name: m.name.clone(),
                    body: m.body.map_or(-1, |b| b as i64),
                    pos: m.local.translation.into(),
                    quat: quat(&m.local.rotation),
                    fx: m.fx,
                    fy: m.fy,
                    cx: m.cx,
                    cy: m.cy,
                    width: m.width,
                    height: m.height,
                    weight: m.weight,
                    perturb: m.perturb,
                })
                .collect(),
            tcps: c
                .tcps
                .iter()
                .map(|t| TcpDoc {
                    body: t.body,
                    pos: t.point.into(),
                })
                .collect(),
        }
    }
}
