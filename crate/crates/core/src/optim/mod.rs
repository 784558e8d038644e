//! Adam over named parameter groups and the optimization pipelines.

mod calibrate;
mod reconstruct;

pub use calibrate::{calibrate, pose_objective, CalibrateConfig, CalibrationResult, TcpRecord};
pub use reconstruct::{
    initial_scene, perturb_cameras, reconstruct, write_history_csv, LossRecord, OpacityMode,
    ReconstructConfig, ReconstructResult, SceneGrads, SceneProblem,
};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MeshDeformation;
use crate::so3::Vec3;
use crate::splatmesh::SurfelSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Named parameter groups. Each has its own learning rate and can be frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Vertices,
    Translation,
    Bary,
    Scales,
    NormalScales,
    Sh,
    Opacity,
    Cameras,
    Joints,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::Vertices,
        Group::Translation,
        Group::Bary,
        Group::Scales,
        Group::NormalScales,
        Group::Sh,
        Group::Opacity,
        Group::Cameras,
        Group::Joints,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Vertices => "vertices",
            Group::Translation => "translation",
            Group::Bary => "bary",
            Group::Scales => "scales",
            Group::NormalScales => "normal_scales",
            Group::Sh => "sh",
            Group::Opacity => "opacity",
            Group::Cameras => "cameras",
            Group::Joints => "joints",
        }
    }

    pub fn is_gaussian(self) -> bool {
        matches!(
            self,
            Group::Bary | Group::Scales | Group::NormalScales | Group::Sh | Group::Opacity
        )
    }
}

/// Flat values per group.
pub type GroupVectors = BTreeMap<Group, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    pub gaussians: f64,
    pub vertices: f64,
    pub translation: f64,
    pub cameras: f64,
    pub joints: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            gaussians: 5e-4,
            vertices: 1e-4,
            translation: 1e-3,
            cameras: 1e-4,
            joints: 3e-4,
        }
    }
}

impl LearningRates {
    pub fn for_group(&self, g: Group) -> f64 {
        match g {
            Group::Vertices => self.vertices,
            Group::Translation => self.translation,
            Group::Cameras => self.cameras,
            Group::Joints => self.joints,
            _ => self.gaussians,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in Group::ALL {
            let lr = self.for_group(g);
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!(
                    "learning rate for {} must be finite and >= 0",
                    g.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct GroupState {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Frozen groups are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of steps taken.
    pub t: u64,
    groups: BTreeMap<Group, GroupState>,
    frozen: Vec<Group>,
}

impl Adam {
    pub fn new(lrs: &LearningRates, frozen: &[Group]) -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            t: 0,
            groups: Group::ALL
                .iter()
                .map(|&g| {
                    (
                        g,
                        GroupState {
                            lr: lrs.for_group(g),
                            m: Vec::new(),
                            v: Vec::new(),
                        },
                    )
                })
                .collect(),
            frozen: frozen.to_vec(),
        }
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen.contains(&g)
    }

    pub fn learning_rate(&self, g: Group) -> f64 {
        self.groups[&g].lr
    }

    pub fn scale_learning_rates(&mut self, factor: f64) {
        for s in self.groups.values_mut() {
            s.lr *= factor;
        }
    }

    /// One update of every unfrozen group present in both maps.
    pub fn step(&mut self, params: &mut GroupVectors, grads: &GroupVectors) -> Result<()> {
        for (g, p) in params.iter() {
            if self.is_frozen(*g) {
                continue;
            }
            let Some(gr) = grads.get(g) else { continue };
            if gr.len() != p.len() {
                return Err(Error::shape("gradient group", p.len(), gr.len()));
            }
            if gr.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    group: g.name().to_string(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (g, p) in params.iter_mut() {
            if self.is_frozen(*g) {
                continue;
            }
            let Some(gr) = grads.get(g) else { continue };
            let st = self.groups.get_mut(g).expect("every group has state");
            if st.m.len() != p.len() {
                st.m = vec![0.0; p.len()];
                st.v = vec![0.0; p.len()];
            }
            for k in 0..p.len() {
                st.m[k] = self.beta1 * st.m[k] + (1.0 - self.beta1) * gr[k];
                st.v[k] = self.beta2 * st.v[k] + (1.0 - self.beta2) * gr[k] * gr[k];
                let mhat = st.m[k] / bc1;
                let vhat = st.v[k] / bc2;
                p[k] -= st.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Everything the pipelines optimize.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneParams {
    pub deformation: MeshDeformation,
    pub surfels: SurfelSet,
    /// Axis-angle corrections, one per dataset camera.
    pub camera_rot_deltas: Vec<Vec3>,
    pub joint_offsets: Vec<f64>,
}

fn flat3(v: &[Vec3]) -> Vec<f64> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

fn unflat3(dst: &mut [Vec3], src: &[f64]) -> Result<()> {
    if src.len() != 3 * dst.len() {
        return Err(Error::shape("3-vector group", 3 * dst.len(), src.len()));
    }
    for (d, c) in dst.iter_mut().zip(src.chunks_exact(3)) {
        *d = Vec3::new(c[0], c[1], c[2]);
    }
    Ok(())
}

fn copy_into(dst: &mut [f64], src: &[f64]) -> Result<()> {
    if src.len() != dst.len() {
        return Err(Error::shape("parameter group", dst.len(), src.len()));
    }
    dst.copy_from_slice(src);
    Ok(())
}

impl SceneParams {
    /// Non-empty groups as flat vectors.
    pub fn flatten(&self) -> GroupVectors {
        let mut out = GroupVectors::new();
        let mut put = |g: Group, v: Vec<f64>| {
            if !v.is_empty() {
                out.insert(g, v);
            }
        };
        put(Group::Vertices, flat3(&self.deformation.vertex_deltas));
        put(
            Group::Translation,
            flat3(&[self.deformation.global_translation]),
        );
        put(Group::Bary, self.surfels.bary_logits.clone());
        put(Group::Scales, self.surfels.tangent_log_scales.clone());
        put(
            Group::NormalScales,
            self.surfels.normal_log_scales.clone().unwrap_or_default(),
        );
        put(Group::Sh, self.surfels.sh_coeffs.clone());
        put(
            Group::Opacity,
            self.surfels.opacity_logits.clone().unwrap_or_default(),
        );
        put(Group::Cameras, flat3(&self.camera_rot_deltas));
        put(Group::Joints, self.joint_offsets.clone());
        out
    }

    pub fn assign(&mut self, groups: &GroupVectors) -> Result<()> {
        for (g, v) in groups {
            match g {
                Group::Vertices => unflat3(&mut self.deformation.vertex_deltas, v)?,
                Group::Translation => {
                    let mut t = [Vec3::zeros()];
                    unflat3(&mut t, v)?;
                    self.deformation.global_translation = t[0];
                }
                Group::Bary => copy_into(&mut self.surfels.bary_logits, v)?,
                Group::Scales => copy_into(&mut self.surfels.tangent_log_scales, v)?,
                Group::NormalScales => match self.surfels.normal_log_scales.as_mut() {
                    Some(d) => copy_into(d, v)?,
                    None => return Err(Error::shape("normal log-scales", 0, v.len())),
                },
                Group::Sh => copy_into(&mut self.surfels.sh_coeffs, v)?,
                Group::Opacity => match self.surfels.opacity_logits.as_mut() {
                    Some(d) => copy_into(d, v)?,
                    None => return Err(Error::shape("opacity logits", 0, v.len())),
                },
                Group::Cameras => unflat3(&mut self.camera_rot_deltas, v)?,
                Group::Joints => copy_into(&mut self.joint_offsets, v)?,
            }
        }
        Ok(())
    }
}
