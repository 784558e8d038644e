use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, Group, GroupVectors, LearningRates, SceneParams};
use crate::error::{Error, Result};
use crate::geometry::{
    allocate_gaussians, apply_deformation, make_icosphere, MeshDeformation, TriangleMesh,
};
use crate::image::Image;
use crate::losses::{
    soft_mask_target, total_loss, LossTerms, LossWeights, Observation, RenderedFrame,
    SoftMaskConfig,
};
use crate::raster::{render_multi, render_multi_vjp, Camera, Modality, RasterConfig};
use crate::scene_io::Dataset;
use crate::so3::{self, Vec3};
use crate::splatmesh::{
    bind_to_world, bind_to_world_vjp, SurfelInit, SurfelSet, WorldGaussianGrads, WorldGaussians,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpacityMode {
    /// Per-Gaussian opacity logits are optimized.
    Learned,
    /// Opacity fixed at 1.
    Clamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    pub steps: usize,
    pub seed: u64,
    pub gaussians_per_face: f64,
    pub sh_degree: u8,
    pub opacity: OpacityMode,
    pub initial_opacity: f64,
    pub surfel_clamp: bool,
    pub init_subdivisions: u32,
    pub init_radius: f64,
    /// Sphere center; the dataset center when absent.
    pub init_center: Option<[f64; 3]>,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub smask: SoftMaskConfig,
    pub frozen: Vec<Group>,
    /// Training frames drawn (without replacement) per step.
    pub batch_size: usize,
    pub history_every: usize,
    /// Full training-set evaluation cadence; picks the returned iterate.
    pub eval_every: usize,
    pub divergence_factor: f64,
    pub raster: RasterConfig,
}

impl Default for ReconstructConfig {
    fn default() -> Self {
        Self {
            steps: 40_000,
            seed: 0,
            gaussians_per_face: 12.0,
            sh_degree: 0,
            opacity: OpacityMode::Learned,
            initial_opacity: 0.9,
            surfel_clamp: true,
            init_subdivisions: 3,
            init_radius: 0.05,
            init_center: None,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            smask: SoftMaskConfig::default(),
            frozen: Vec::new(),
            batch_size: 1,
            history_every: 100,
            eval_every: 1000,
            divergence_factor: 10.0,
            raster: RasterConfig {
                min_transmittance: 1e-4,
                ..RasterConfig::default()
            },
        }
    }
}

impl ReconstructConfig {
    pub fn validate(&self) -> Result<()> {
        self.lr.validate()?;
        self.weights.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.history_every == 0 || self.eval_every == 0 {
            return bad("history_every and eval_every must be positive");
        }
        if !(self.gaussians_per_face > 0.0) {
            return bad("gaussians_per_face must be positive");
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return bad("initial_opacity must be in (0, 1)");
        }
        if !(self.init_radius > 0.0) {
            return bad("init_radius must be positive");
        }
        if !(self.divergence_factor > 1.0) {
            return bad("divergence_factor must exceed 1");
        }
        if !(self.smask.tau > 0.0) {
            return bad("smask tau must be positive");
        }
        Ok(())
    }
}

/// Gradients of the scene objective, per group.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneGrads {
    pub groups: GroupVectors,
}

/// A dataset bound to a base mesh: evaluates the objective and its gradient
/// for any [`SceneParams`].
#[derive(Debug, Clone)]
pub struct SceneProblem {
    pub base_mesh: TriangleMesh,
    pub cameras: Vec<Camera>,
    pub observations: Vec<Observation>,
    pub smask_targets: Vec<Option<Image>>,
    pub background: [f64; 3],
    pub weights: LossWeights,
    pub raster: RasterConfig,
}

fn add_world_grads(dst: &mut WorldGaussianGrads, src: &WorldGaussianGrads) {
    for (a, b) in dst.means.iter_mut().zip(&src.means) {
        *a += b;
    }
    for (a, b) in dst.rotations.iter_mut().zip(&src.rotations) {
        *a += b;
    }
    for (a, b) in dst.scales.iter_mut().zip(&src.scales) {
        *a += b;
    }
    for (a, b) in dst.sh_coeffs.iter_mut().zip(&src.sh_coeffs) {
        *a += b;
    }
    for (a, b) in dst.opacities.iter_mut().zip(&src.opacities) {
        *a += b;
    }
}

struct FramePass {
    value: f64,
    terms: LossTerms,
    grads: Option<(WorldGaussianGrads, Vec3)>,
}

impl SceneProblem {
    pub fn new(
        dataset: &Dataset,
        base_mesh: TriangleMesh,
        weights: &LossWeights,
        smask: &SoftMaskConfig,
        raster: &RasterConfig,
    ) -> Result<Self> {
        dataset.validate()?;
        let observations: Vec<Observation> = dataset
            .frames
            .iter()
            .map(|f| Observation {
                camera: f.camera,
                rgb: f.rgb.clone(),
                mask: f.mask.clone(),
                normals: f.normals.clone(),
                weight: 1.0,
            })
            .collect();
        let smask_targets = observations
            .iter()
            .map(|o| match (&o.mask, weights.smask > 0.0) {
                (Some(m), true) => soft_mask_target(m, smask).map(Some),
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            base_mesh,
            cameras: dataset.cameras.clone(),
            observations,
            smask_targets,
            background: dataset.background,
            weights: weights.clone(),
            raster: raster.clone(),
        })
    }

    pub fn camera(&self, params: &SceneParams, index: usize) -> Camera {
        let delta = params
            .camera_rot_deltas
            .get(index)
            .copied()
            .unwrap_or_else(Vec3::zeros);
        self.cameras[index].retract(&delta, &Vec3::zeros())
    }

    pub fn mesh(&self, params: &SceneParams) -> Result<TriangleMesh> {
        apply_deformation(&self.base_mesh, &params.deformation)
    }

    fn frame_pass(
        &self,
        world: &WorldGaussians,
        params: &SceneParams,
        f: usize,
        want_grad: bool,
    ) -> Result<FramePass> {
        let obs = &self.observations[f];
        let cam = self.camera(params, obs.camera);
        let with_normals = self.weights.normal > 0.0 && obs.normals.is_some();
        let (mods, bgs): (&[Modality], &[[f64; 3]]) = if with_normals {
            (
                &[Modality::Rgb, Modality::Normals],
                &[self.background, [0.0; 3]],
            )
        } else {
            (&[Modality::Rgb], &[self.background])
        };
        let out = render_multi(world, &cam, mods, bgs, &self.raster)?;
        let mut images = out.images.into_iter();
        let rendered = RenderedFrame {
            rgb: images.next(),
            normals: images.next(),
            alpha: Some(out.alpha),
        };
        let tl = total_loss(
            std::slice::from_ref(&rendered),
            &[obs],
            &[self.smask_targets[f].as_ref()],
            &self.weights,
            None,
        )?;
        let mut grads = None;
        if want_grad {
            let fc = &tl.frames[0];
            if fc.rgb.is_some() || fc.normals.is_some() || fc.alpha.is_some() {
                let g_images: Vec<Option<&Image>> = if with_normals {
                    vec![fc.rgb.as_ref(), fc.normals.as_ref()]
                } else {
                    vec![fc.rgb.as_ref()]
                };
                let rg = render_multi_vjp(
                    world,
                    &cam,
                    mods,
                    bgs,
                    &self.raster,
                    &out.records,
                    &g_images,
                    fc.alpha.as_ref(),
                )?;
                let g_omega = rg.camera_tangent(&cam).0;
                grads = Some((rg.gaussians, g_omega));
            }
        }
        Ok(FramePass {
            value: tl.value,
            terms: tl.terms,
            grads,
        })
    }

    fn regularizers(&self, mesh: &TriangleMesh) -> Result<(f64, LossTerms, Vec<Vec3>)> {
        let tl = total_loss(&[], &[], &[], &self.weights, Some(mesh))?;
        Ok((tl.value, tl.terms, tl.vertices))
    }

    /// Objective over `frames` (indices into the dataset frames).
    pub fn loss(&self, params: &SceneParams, frames: &[usize]) -> Result<(f64, LossTerms)> {
        let mesh = self.mesh(params)?;
        let world = bind_to_world(&mesh, &params.surfels)?;
        let (mut value, mut terms, _) = self.regularizers(&mesh)?;
        for &f in frames {
            let p = self.frame_pass(&world, params, f, false)?;
            value += p.value;
            add_terms(&mut terms, &p.terms);
        }
        Ok((value, terms))
    }

    pub fn loss_and_grads(
        &self,
        params: &SceneParams,
        frames: &[usize],
    ) -> Result<(f64, LossTerms, SceneGrads)> {
        let mesh = self.mesh(params)?;
        let world = bind_to_world(&mesh, &params.surfels)?;
        let (mut value, mut terms, reg_vertices) = self.regularizers(&mesh)?;
        let mut g_world = WorldGaussianGrads::zeros(world.len(), world.sh_degree);
        let mut g_cams = vec![Vec3::zeros(); params.camera_rot_deltas.len()];
        for &f in frames {
            let p = self.frame_pass(&world, params, f, true)?;
            value += p.value;
            add_terms(&mut terms, &p.terms);
            if let Some((g, g_omega)) = p.grads {
                add_world_grads(&mut g_world, &g);
                let c = self.observations[f].camera;
                if let Some(gc) = g_cams.get_mut(c) {
                    *gc += so3::left_jacobian(&params.camera_rot_deltas[c]) * g_omega;
                }
            }
        }
        let sg = bind_to_world_vjp(&mesh, &params.surfels, &g_world)?;
        let g_vertices: Vec<Vec3> = sg
            .vertices
            .iter()
            .zip(&reg_vertices)
            .map(|(a, b)| a + b)
            .collect();
        let g_translation: Vec3 = g_vertices.iter().sum();
        let grad_params = SceneParams {
            deformation: MeshDeformation {
                vertex_deltas: g_vertices,
                global_translation: g_translation,
            },
            surfels: SurfelSet {
                bary_logits: sg.bary_logits,
                tangent_log_scales: sg.tangent_log_scales,
                normal_log_scales: sg.normal_log_scales,
                sh_coeffs: sg.sh_coeffs,
                opacity_logits: sg.opacity_logits,
                ..params.surfels.clone()
            },
            camera_rot_deltas: g_cams,
            joint_offsets: vec![0.0; params.joint_offsets.len()],
        };
        Ok((
            value,
            terms,
            SceneGrads {
                groups: grad_params.flatten(),
            },
        ))
    }
}

fn add_terms(dst: &mut LossTerms, src: &LossTerms) {
    dst.photo += src.photo;
    dst.mask += src.mask;
    dst.smask += src.smask;
    dst.normal += src.normal;
    dst.laplacian += src.laplacian;
    dst.edge += src.edge;
}

/// One row of the loss history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    /// Objective on the step's batch.
    pub total: f64,
    pub terms: LossTerms,
    /// Objective on the whole training split, when evaluated at this step.
    pub full: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReconstructResult {
    /// Deformed mesh of the returned iterate.
    pub mesh: TriangleMesh,
    pub base_mesh: TriangleMesh,
    /// Best iterate by full training loss.
    pub params: SceneParams,
    pub best_step: usize,
    pub best_loss: f64,
    pub initial_loss: f64,
    pub history: Vec<LossRecord>,
    /// Notable events such as the divergence guard firing.
    pub events: Vec<String>,
}

/// Initial sphere mesh and surfels as configured.
pub fn initial_scene(
    dataset: &Dataset,
    config: &ReconstructConfig,
) -> Result<(TriangleMesh, SurfelSet)> {
    let center = config.init_center.map(Vec3::from).unwrap_or(dataset.center);
    let mesh = make_icosphere(config.init_subdivisions, config.init_radius, center)?;
    let counts = allocate_gaussians(&mesh, config.gaussians_per_face, config.seed)?;
    let init = SurfelInit {
        sh_degree: config.sh_degree,
        opacity: match config.opacity {
            OpacityMode::Learned => Some(config.initial_opacity),
            OpacityMode::Clamped => None,
        },
        scale_factor: 1.0,
        surfel_clamp: config.surfel_clamp,
        color: [0.5; 3],
    };
    let surfels = SurfelSet::initialize(&mesh, &counts, &init, config.seed.wrapping_add(1))?;
    Ok((mesh, surfels))
}

/// Jointly optimizes mesh, surfels and camera rotations against the training
/// split. `init` replaces the configured sphere initialization.
pub fn reconstruct(
    dataset: &Dataset,
    config: &ReconstructConfig,
    init: Option<(TriangleMesh, SurfelSet)>,
) -> Result<ReconstructResult> {
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Dataset("no training frames".into()));
    }
    let (base_mesh, surfels) = match init {
        Some(x) => x,
        None => initial_scene(dataset, config)?,
    };
    surfels.validate(&base_mesh)?;
    let problem = SceneProblem::new(
        dataset,
        base_mesh.clone(),
        &config.weights,
        &config.smask,
        &config.raster,
    )?;
    let mut params = SceneParams {
        deformation: MeshDeformation::zeros(base_mesh.vertex_count()),
        surfels,
        camera_rot_deltas: vec![Vec3::zeros(); dataset.cameras.len()],
        joint_offsets: Vec::new(),
    };
    let mut adam = Adam::new(&config.lr, &config.frozen);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xba7c_4e5);
    let train = &dataset.train;
    let batch = config.batch_size.min(train.len());

    let (initial_loss, _) = problem.loss(&params, train)?;
    if !initial_loss.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0 });
    }
    let per_frame_initial = initial_loss / train.len() as f64;
    let mut best = (initial_loss, 0usize, params.clone());
    let mut history = Vec::new();
    let mut events = Vec::new();
    let mut guard_fired = false;

    for step in 0..config.steps {
        let frames: Vec<usize> = if batch == train.len() {
            train.clone()
        } else {
            index::sample(&mut rng, train.len(), batch)
                .into_iter()
                .map(|k| train[k])
                .collect()
        };
        let (value, terms, grads) = problem.loss_and_grads(&params, &frames)?;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if !guard_fired
            && value / frames.len() as f64 > config.divergence_factor * per_frame_initial
        {
            guard_fired = true;
            adam.scale_learning_rates(0.5);
            let msg = format!("step {step}: loss {value:.6e} exceeded the divergence threshold; learning rates halved");
            log::warn!("{msg}");
            events.push(msg);
        }
        let mut record = (step % config.history_every == 0).then(|| LossRecord {
            step,
            total: value,
            terms,
            full: None,
        });
        let mut flat = params.flatten();
        adam.step(&mut flat, &grads.groups)?;
        params.assign(&flat)?;

        if (step + 1) % config.eval_every == 0 || step + 1 == config.steps {
            let (full, _) = problem.loss(&params, train)?;
            if !full.is_finite() {
                return Err(Error::NonFiniteLoss { step: step + 1 });
            }
            if full < best.0 {
                best = (full, step + 1, params.clone());
            }
            log::info!(
                "step {}: train loss {full:.6e} (best {:.6e})",
                step + 1,
                best.0
            );
            let r = record.get_or_insert_with(|| LossRecord {
                step,
                total: value,
                terms,
                full: None,
            });
            r.full = Some(full);
        }
        if let Some(r) = record {
            history.push(r);
        }
        // keep the sampler stream independent of evaluation cadence
        let _: u64 = rng.random();
    }

    let (best_loss, best_step, params) = best;
    let mesh = apply_deformation(&base_mesh, &params.deformation)?;
    Ok(ReconstructResult {
        mesh,
        base_mesh,
        params,
        best_step,
        best_loss,
        initial_loss,
        history,
        events,
    })
}

/// Rotates every camera by `degrees` about an independent random axis, in
/// the same right-multiplied form the camera corrections use.
pub fn perturb_cameras(dataset: &Dataset, degrees: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca3e_7a);
    let mut out = dataset.clone();
    for cam in &mut out.cameras {
        let axis = loop {
            let v = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 1e-3 && n <= 1.0 {
                break v / n;
            }
        };
        *cam = cam.retract(&(axis * degrees.to_radians()), &Vec3::zeros());
    }
    out
}

pub fn write_history_csv(history: &[LossRecord], path: &Path) -> Result<()> {
    let mut text = String::from("step,total,photo,mask,smask,normal,laplacian,edge,full\n");
    for r in history {
        let t = &r.terms;
        let full = r.full.map(|v| format!("{v:.9e}")).unwrap_or_default();
        text.push_str(&format!(
            "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{}\n",
            r.step, r.total, t.photo, t.mask, t.smask, t.normal, t.laplacian, t.edge, full
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
