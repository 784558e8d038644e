use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Group, GroupVectors, LearningRates};
use crate::error::{Error, Result};
use crate::eval::tcp_error;
use crate::image::Image;
use crate::kinematics::{fk_vjp, FkCotangents, JointState};
use crate::losses::{photometric_l1, ssim_vjp};
use crate::raster::{render, render_vjp, Camera, Modality, RasterConfig};
use crate::scene_io::scenes::{PosedRobot, RobotScene};
use crate::scene_io::Dataset;
use crate::so3::{self, Mat3, Vec3};
use crate::splatmesh::{WorldGaussianGrads, WorldGaussians};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Color (L1) steps per iteration.
    pub color_steps: usize,
    /// Pose (SSIM) steps per iteration.
    pub pose_steps: usize,
    pub lr: LearningRates,
    /// Correct the rotation of cameras whose mount allows it.
    pub optimize_cameras: bool,
    pub raster: RasterConfig,
}

impl Default for CalibrateConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            seed: 0,
            color_steps: 1,
            pose_steps: 1,
            lr: LearningRates::default(),
            optimize_cameras: true,
            raster: RasterConfig {
                min_transmittance: 1e-4,
                ..RasterConfig::default()
            },
        }
    }
}

impl CalibrateConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        if self.color_steps + self.pose_steps == 0 {
            return Err(Error::Config(
                "calibration needs at least one color or pose step".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TcpRecord {
    pub iteration: usize,
    /// Mean over snapshots of the mean TCP distance, millimeters.
    pub tcp_error_mm: f64,
    /// Weighted `1 - SSIM` of the iteration's last pose step.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    /// Estimated joint state per snapshot at the best iterate.
    pub q_est: Vec<JointState>,
    /// Rotation correction per camera mount (zero for mounts left alone).
    pub camera_deltas: Vec<Vec3>,
    /// Learned colors per part, SH coefficients.
    pub colors: Vec<Vec<f64>>,
    pub history: Vec<TcpRecord>,
    pub best_iteration: usize,
    pub initial_tcp_mm: f64,
    pub best_tcp_mm: f64,
    pub final_tcp_mm: f64,
}

struct Frames {
    /// Dataset frame per (snapshot, mount).
    table: Vec<Vec<Option<usize>>>,
}

fn mean_tcp(scene: &RobotScene, q: &[JointState], q_gt: &[JointState]) -> Result<f64> {
    let mut sum = 0.0;
    for (a, b) in q.iter().zip(q_gt) {
        sum += tcp_error(&scene.chain, a, b)?;
    }
    Ok(sum / q.len() as f64)
}

struct State {
    offsets: Vec<f64>,
    deltas: Vec<Vec3>,
    colors: Vec<Vec<f64>>,
}

impl State {
    fn snapshot_q(&self, q_noisy: &JointState, s: usize, nj: usize) -> JointState {
        JointState {
            angles: q_noisy
                .angles
                .iter()
                .zip(&self.offsets[s * nj..(s + 1) * nj])
                .map(|(a, o)| a + o)
                .collect(),
        }
    }

    fn q(&self, q_noisy: &[JointState], nj: usize) -> Vec<JointState> {
        q_noisy
            .iter()
            .enumerate()
            .map(|(s, q)| JointState {
                angles: q
                    .angles
                    .iter()
                    .zip(&self.offsets[s * nj..(s + 1) * nj])
                    .map(|(a, o)| a + o)
                    .collect(),
            })
            .collect()
    }
}

/// Alternates color fitting (L1 over Gaussian colors, pose fixed) with pose
/// fitting (weighted `1 - SSIM` over joint offsets and camera rotation
/// corrections, colors fixed). Each iteration uses one frame per camera mount
/// from a randomly drawn snapshot. Returns the iterate with the lowest TCP
/// error against the dataset joint states; `final_tcp_mm` reports the last.
pub fn calibrate(
    scene: &RobotScene,
    dataset: &Dataset,
    q_noisy: &[JointState],
    config: &CalibrateConfig,
) -> Result<CalibrationResult> {
    config.validate()?;
    let chain = &scene.chain;
    if chain.tcps.is_empty() {
        return Err(Error::Config("kinematic chain has no TCP sites".into()));
    }
    if q_noisy.is_empty() || dataset.frames.is_empty() {
        return Err(Error::Dataset(
            "calibration needs frames and joint states".into(),
        ));
    }
    let nj = chain.joint_count();
    let nm = chain.cameras.len();
    let ns = q_noisy.len();
    let mut q_gt: Vec<Option<JointState>> = vec![None; ns];
    let mut frames = Frames {
        table: vec![vec![None; nm]; ns],
    };
    for (i, f) in dataset.frames.iter().enumerate() {
        let (Some(s), Some(m), Some(q)) = (f.snapshot, f.mount, &f.joints) else {
            return Err(Error::Dataset(format!(
                "frame '{}' lacks snapshot, mount or joints",
                f.name
            )));
        };
        if s >= ns || m >= nm {
            return Err(Error::Dataset(format!(
                "frame '{}' refers to a missing snapshot or mount",
                f.name
            )));
        }
        if q.angles.len() != nj {
            return Err(Error::shape("frame joint state", nj, q.angles.len()));
        }
        frames.table[s][m] = Some(i);
        q_gt[s] = Some(q.clone());
    }
    let q_gt: Vec<JointState> = q_gt
        .into_iter()
        .enumerate()
        .map(|(s, q)| q.ok_or_else(|| Error::Dataset(format!("no frames for snapshot {s}"))))
        .collect::<Result<_>>()?;
    for q in q_noisy {
        if q.angles.len() != nj {
            return Err(Error::shape("noisy joint state", nj, q.angles.len()));
        }
    }

    let local = scene.local_gaussians()?;
    let correctable: Vec<bool> = chain
        .cameras
        .iter()
        .map(|m| config.optimize_cameras && (m.body.is_none() || m.perturb))
        .collect();
    let mut state = State {
        offsets: vec![0.0; ns * nj],
        deltas: vec![Vec3::zeros(); nm],
        colors: local.iter().map(|g| g.sh_coeffs.clone()).collect(),
    };
    let mut color_adam = Adam::new(&config.lr, &[]);
    let mut pose_adam = Adam::new(&config.lr, &[]);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xca11_b4a7);

    let initial_tcp = mean_tcp(scene, q_noisy, &q_gt)?;
    let mut best = (
        initial_tcp,
        0usize,
        state.q(q_noisy, nj),
        state.deltas.clone(),
        state.colors.clone(),
    );
    let mut history = vec![TcpRecord {
        iteration: 0,
        tcp_error_mm: initial_tcp,
        loss: f64::NAN,
    }];
    let mut last_tcp = initial_tcp;

    for it in 0..config.iterations {
        let s = rng.random_range(0..ns);
        let mut loss = f64::NAN;
        for _ in 0..config.color_steps {
            let q = state.snapshot_q(&q_noisy[s], s, nj);
            let g = color_pass(
                scene,
                &local,
                dataset,
                &frames.table[s],
                &q,
                &state.deltas,
                &state.colors,
                &config.raster,
            )?;
            let mut p: GroupVectors = [(Group::Sh, state.colors.concat())].into_iter().collect();
            color_adam.step(&mut p, &[(Group::Sh, g)].into_iter().collect())?;
            let flat = &p[&Group::Sh];
            let mut at = 0;
            for c in &mut state.colors {
                let n = c.len();
                c.copy_from_slice(&flat[at..at + n]);
                at += n;
            }
        }
        for _ in 0..config.pose_steps {
            let q = state.snapshot_q(&q_noisy[s], s, nj);
            let (l, g_q, g_d) = pose_pass(
                scene,
                &local,
                dataset,
                &frames.table[s],
                &q,
                &state.deltas,
                &state.colors,
                &correctable,
                &config.raster,
            )?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step: it });
            }
            loss = l;
            let mut g_offsets = vec![0.0; ns * nj];
            g_offsets[s * nj..(s + 1) * nj].copy_from_slice(&g_q);
            let mut p: GroupVectors = [
                (Group::Joints, state.offsets.clone()),
                (
                    Group::Cameras,
                    state.deltas.iter().flat_map(|d| [d.x, d.y, d.z]).collect(),
                ),
            ]
            .into_iter()
            .collect();
            let g: GroupVectors = [
                (Group::Joints, g_offsets),
                (
                    Group::Cameras,
                    g_d.iter().flat_map(|d| [d.x, d.y, d.z]).collect(),
                ),
            ]
            .into_iter()
            .collect();
            pose_adam.step(&mut p, &g)?;
            state.offsets.copy_from_slice(&p[&Group::Joints]);
            for (d, c) in state
                .deltas
                .iter_mut()
                .zip(p[&Group::Cameras].chunks_exact(3))
            {
                *d = Vec3::new(c[0], c[1], c[2]);
            }
        }
        let q = state.q(q_noisy, nj);
        last_tcp = mean_tcp(scene, &q, &q_gt)?;
        history.push(TcpRecord {
            iteration: it + 1,
            tcp_error_mm: last_tcp,
            loss,
        });
        if last_tcp < best.0 {
            best = (
                last_tcp,
                it + 1,
                q,
                state.deltas.clone(),
                state.colors.clone(),
            );
        }
        log::debug!(
            "calibration iteration {}: TCP error {last_tcp:.3} mm, loss {loss:.6}",
            it + 1
        );
    }

    let (best_tcp, best_iteration, q_est, camera_deltas, colors) = best;
    Ok(CalibrationResult {
        q_est,
        camera_deltas,
        colors,
        history,
        best_iteration,
        initial_tcp_mm: initial_tcp,
        best_tcp_mm: best_tcp,
        final_tcp_mm: last_tcp,
    })
}

/// The pose-phase objective on one snapshot: weighted `1 - SSIM` over its
/// frames with the scene's own colors, and its gradients with respect to the
/// joint angles and the per-mount rotation corrections.
pub fn pose_objective(
    scene: &RobotScene,
    dataset: &Dataset,
    snapshot: usize,
    q: &JointState,
    camera_deltas: &[Vec3],
    raster: &RasterConfig,
) -> Result<(f64, Vec<f64>, Vec<Vec3>)> {
    let nm = scene.chain.cameras.len();
    if camera_deltas.len() != nm {
        return Err(Error::shape("camera deltas", nm, camera_deltas.len()));
    }
    let mut table = vec![None; nm];
    for (i, f) in dataset.frames.iter().enumerate() {
        if let (Some(s), Some(m)) = (f.snapshot, f.mount) {
            if s == snapshot && m < nm {
                table[m] = Some(i);
            }
        }
    }
    let local = scene.local_gaussians()?;
    let colors: Vec<Vec<f64>> = local.iter().map(|g| g.sh_coeffs.clone()).collect();
    let correctable = vec![true; nm];
    pose_pass(
        scene,
        &local,
        dataset,
        &table,
        q,
        camera_deltas,
        &colors,
        &correctable,
        raster,
    )
}

/// Posed Gaussians with the current colors, part spans and body poses.
fn posed(
    scene: &RobotScene,
    local: &[WorldGaussians],
    colors: &[Vec<f64>],
    deltas: &[Vec3],
    q: &JointState,
) -> Result<(PosedRobot, Vec<Camera>)> {
    let colored: Vec<WorldGaussians> = local
        .iter()
        .zip(colors)
        .map(|(g, c)| WorldGaussians {
            sh_coeffs: c.clone(),
            ..g.clone()
        })
        .collect();
    let p = scene.pose(&colored, q)?;
    let cams =
        p.fk.cameras
            .iter()
            .zip(deltas)
            .map(|(c, d)| c.retract(d, &Vec3::zeros()))
            .collect();
    Ok((p, cams))
}

fn frame_weights(scene: &RobotScene, table: &[Option<usize>]) -> (Vec<(usize, usize, f64)>, f64) {
    let list: Vec<(usize, usize, f64)> = table
        .iter()
        .enumerate()
        .filter_map(|(m, f)| f.map(|f| (m, f, scene.chain.cameras[m].weight)))
        .filter(|x| x.2 > 0.0)
        .collect();
    let total = list.iter().map(|x| x.2).sum();
    (list, total)
}

#[allow(clippy::too_many_arguments)]
fn color_pass(
    scene: &RobotScene,
    local: &[WorldGaussians],
    dataset: &Dataset,
    table: &[Option<usize>],
    q: &JointState,
    deltas: &[Vec3],
    colors: &[Vec<f64>],
    raster: &RasterConfig,
) -> Result<Vec<f64>> {
    let (p, cams) = posed(scene, local, colors, deltas, q)?;
    let (list, total) = frame_weights(scene, table);
    let mut g = vec![0.0; p.gaussians.sh_coeffs.len()];
    for (m, f, w) in list {
        let out = render(
            &p.gaussians,
            &cams[m],
            Modality::Rgb,
            scene.background,
            raster,
        )?;
        let (_, gi) = photometric_l1(&out.color, &dataset.frames[f].rgb, None)?;
        let gi = gi.map(|v| v * w / total);
        let rg = render_vjp(
            &p.gaussians,
            &cams[m],
            Modality::Rgb,
            scene.background,
            raster,
            &out,
            &gi,
            None,
        )?;
        for (a, b) in g.iter_mut().zip(&rg.gaussians.sh_coeffs) {
            *a += b;
        }
    }
    Ok(g)
}

/// Weighted `1 - SSIM` with gradients on the snapshot's joint angles and on
/// every camera correction.
#[allow(clippy::too_many_arguments)]
fn pose_pass(
    scene: &RobotScene,
    local: &[WorldGaussians],
    dataset: &Dataset,
    table: &[Option<usize>],
    q: &JointState,
    deltas: &[Vec3],
    colors: &[Vec<f64>],
    correctable: &[bool],
    raster: &RasterConfig,
) -> Result<(f64, Vec<f64>, Vec<Vec3>)> {
    let chain = &scene.chain;
    let (p, cams) = posed(scene, local, colors, deltas, q)?;
    let (list, total) = frame_weights(scene, table);
    let mut g_world = WorldGaussianGrads::zeros(p.gaussians.len(), p.gaussians.sh_degree);
    let mut cot = FkCotangents::zeros(chain);
    let mut g_deltas = vec![Vec3::zeros(); chain.cameras.len()];
    let mut loss = 0.0;
    for (m, f, w) in list {
        let out = render(
            &p.gaussians,
            &cams[m],
            Modality::Rgb,
            scene.background,
            raster,
        )?;
        let (sv, gs) = ssim_vjp(&out.color, &dataset.frames[f].rgb)?;
        let c = w / total;
        loss += c * (1.0 - sv);
        let gi: Image = gs.map(|v| -c * v);
        let rg = render_vjp(
            &p.gaussians,
            &cams[m],
            Modality::Rgb,
            scene.background,
            raster,
            &out,
            &gi,
            None,
        )?;
        add_pose_grads(&mut g_world, &rg.gaussians);
        if correctable[m] {
            let g_omega = rg.camera_tangent(&cams[m]).0;
            g_deltas[m] += so3::left_jacobian(&deltas[m]) * g_omega;
        }
        if chain.cameras[m].body.is_some() {
            // back through the correction to the mounted camera pose
            let e = so3::exp(&deltas[m]);
            cot.cameras[m].0 += rg.camera_rotation * e.transpose();
            cot.cameras[m].1 += rg.camera_translation;
        }
    }
    for ((part, g), &(start, n)) in scene.parts.iter().zip(local).zip(&p.spans) {
        let Some(b) = part.body else { continue };
        let (mut g_r, mut g_t) = (Mat3::zeros(), Vec3::zeros());
        for i in 0..n {
            let gm = g_world.means[start + i];
            g_r += gm * g.means[i].transpose()
                + g_world.rotations[start + i] * g.rotations[i].transpose();
            g_t += gm;
        }
        cot.bodies[b].0 += g_r;
        cot.bodies[b].1 += g_t;
    }
    let g_q = fk_vjp(chain, q, &cot)?;
    Ok((loss, g_q, g_deltas))
}

fn add_pose_grads(dst: &mut WorldGaussianGrads, src: &WorldGaussianGrads) {
    for (a, b) in dst.means.iter_mut().zip(&src.means) {
        *a += b;
    }
    for (a, b) in dst.rotations.iter_mut().zip(&src.rotations) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_json() {
        let c = CalibrateConfig::default();
        let text = serde_json::to_string(&c).unwrap();
        let back: CalibrateConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(c, back);
        assert!(serde_json::from_str::<CalibrateConfig>("{\"bogus\": 1}").is_err());
    }
}
