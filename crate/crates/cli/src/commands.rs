use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use meshsplat::eval::{
    align_eval_cameras, held_out_frames, image_metrics, mesh_chamfer_mm2, psnr, AlignConfig,
    FrameMetric, Metrics,
};
use meshsplat::geometry::TriangleMesh;
use meshsplat::image::BitDepth;
use meshsplat::kinematics::{add_joint_noise, JointState};
use meshsplat::losses::SoftMaskMode;
use meshsplat::optim::{
    perturb_cameras, reconstruct as run_reconstruct, write_history_csv, CalibrateConfig,
    ReconstructConfig,
};
use meshsplat::raster::{render as render_image, Modality, RasterConfig};
use meshsplat::scene_io::scenes::{object_scene, robot, robot_dataset};
use meshsplat::scene_io::{
    export_asset, generate_dataset, load_dataset, read_mesh_ply, save_dataset, GenConfig,
};
use meshsplat::so3::Vec3;
use meshsplat::splatmesh::{bind_to_world, read_splat_ply, SurfelSet};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::Common;

/// Reads a run config: either the bare command config or a `config.json`
/// echoed by an earlier run.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut value: Value = serde_json::from_str(&text)
        .with_context(|| format!("malformed config {}", path.display()))?;
    if value.get("command").is_some() {
        if let Some(inner) = value.get_mut("config") {
            value = inner.take();
        }
    }
    serde_json::from_value(value).with_context(|| format!("invalid config {}", path.display()))
}

fn require(path: Option<PathBuf>, what: &str) -> Result<PathBuf> {
    let Some(p) = path else {
        bail!("no {what} given (set it in the config or on the command line)");
    };
    if !p.exists() {
        bail!("{what} {} does not exist", p.display());
    }
    Ok(p)
}

fn check_optional(path: &Option<PathBuf>, what: &str) -> Result<()> {
    match path {
        Some(p) if !p.exists() => bail!("{what} {} does not exist", p.display()),
        _ => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// Sets up the thread pool and the run directory, and echoes the config.
/// Called only after the config has been validated.
fn start_run(common: &Common, command: &str, config: &impl Serialize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .context("cannot configure the thread pool")?;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("cannot create {}", common.out.display()))?;
    write_json(
        &common.out.join("config.json"),
        &json!({ "command": command, "threads": common.threads, "config": config }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenRun {
    /// `ellipsoid`, `bumpy` or `robot`.
    pub scene: String,
    pub seed: u64,
    pub generation: GenConfig,
}

impl Default for GenRun {
    fn default() -> Self {
        Self {
            scene: "ellipsoid".into(),
            seed: 0,
            generation: GenConfig::default(),
        }
    }
}

pub fn gen(common: &Common, scene: Option<String>) -> Result<()> {
    let mut cfg: GenRun = load_config(common.config.as_deref())?;
    if let Some(s) = scene {
        cfg.scene = s;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let asset = match cfg.scene.as_str() {
        "robot" => None,
        name => Some(object_scene(name, cfg.seed)?),
    };
    if cfg.generation.resolution == 0 || cfg.generation.n_views == 0 {
        bail!("resolution and n_views must be positive");
    }
    start_run(common, "gen", &cfg)?;
    let dataset = match &asset {
        Some(a) => {
            let ds = generate_dataset(a, &cfg.generation, cfg.seed)?;
            export_asset(&a.mesh, &a.surfels, &common.out.join("gt"))?;
            ds
        }
        None => {
            let scene = robot(cfg.seed, cfg.generation.resolution)?;
            robot_dataset(&scene, &cfg.generation.raster)?
        }
    };
    save_dataset(&dataset, &common.out.join("dataset"))?;
    write_json(
        &common.out.join("metrics.json"),
        &json!({
            "scene": cfg.scene,
            "frames": dataset.frames.len(),
            "train": dataset.train.len(),
            "test": dataset.test.len(),
            "gaussians": asset.as_ref().map(|a| a.surfels.len()),
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructRun {
    pub dataset: Option<PathBuf>,
    /// Ground-truth mesh for Chamfer distance.
    pub gt_mesh: Option<PathBuf>,
    /// Rotates every dataset camera by this many degrees before fitting.
    pub camera_noise_deg: f64,
    pub chamfer_points: usize,
    pub reconstruct: ReconstructConfig,
}

impl Default for ReconstructRun {
    fn default() -> Self {
        Self {
            dataset: None,
            gt_mesh: None,
            camera_noise_deg: 0.0,
            chamfer_points: 10_000,
            reconstruct: ReconstructConfig::default(),
        }
    }
}

/// Everything needed to evaluate or export a reconstruction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct State {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub surfels: SurfelSet,
    pub camera_rot_deltas: Vec<[f64; 3]>,
}

impl State {
    fn load(path: &Path) -> Result<(TriangleMesh, SurfelSet)> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read state {}", path.display()))?;
        let s: State = serde_json::from_str(&text)
            .with_context(|| format!("malformed state {}", path.display()))?;
        let mesh = TriangleMesh::new(s.vertices.into_iter().map(Vec3::from).collect(), s.faces)?;
        Ok((mesh, s.surfels))
    }
}

fn chamfer_against(mesh: &TriangleMesh, gt: &Path, points: usize, seed: u64) -> Result<f64> {
    let gt = read_mesh_ply(gt)?;
    Ok(mesh_chamfer_mm2(mesh, &gt, points, seed)?)
}

pub fn reconstruct(
    common: &Common,
    dataset: Option<PathBuf>,
    steps: Option<usize>,
    tau: Option<f64>,
    literal_smask: bool,
) -> Result<()> {
    let mut cfg: ReconstructRun = load_config(common.config.as_deref())?;
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    if let Some(s) = common.seed {
        cfg.reconstruct.seed = s;
    }
    if let Some(s) = steps {
        cfg.reconstruct.steps = s;
    }
    if let Some(t) = tau {
        cfg.reconstruct.smask.tau = t;
    }
    if literal_smask {
        cfg.reconstruct.smask.mode = SoftMaskMode::Literal;
    }
    cfg.reconstruct.validate()?;
    if !(cfg.camera_noise_deg >= 0.0 && cfg.camera_noise_deg.is_finite()) {
        bail!("camera_noise_deg must be finite and >= 0");
    }
    let ds_path = require(cfg.dataset.clone(), "dataset")?;
    check_optional(&cfg.gt_mesh, "ground-truth mesh")?;
    let mut ds = load_dataset(&ds_path)?;
    if cfg.camera_noise_deg > 0.0 {
        ds = perturb_cameras(&ds, cfg.camera_noise_deg, cfg.reconstruct.seed);
    }
    start_run(common, "reconstruct", &cfg)?;

    let res = run_reconstruct(&ds, &cfg.reconstruct, None)?;
    write_history_csv(&res.history, &common.out.join("loss.csv"))?;
    let state = State {
        vertices: res
            .mesh
            .vertices()
            .iter()
            .map(|v| [v.x, v.y, v.z])
            .collect(),
        faces: res.mesh.faces().to_vec(),
        surfels: res.params.surfels.clone(),
        camera_rot_deltas: res
            .params
            .camera_rot_deltas
            .iter()
            .map(|v| [v.x, v.y, v.z])
            .collect(),
    };
    write_json(&common.out.join("state.json"), &state)?;
    export_asset(&res.mesh, &res.params.surfels, &common.out.join("asset"))?;

    let (cd, cd_initial) = match &cfg.gt_mesh {
        Some(gt) => (
            Some(chamfer_against(
                &res.mesh,
                gt,
                cfg.chamfer_points,
                cfg.reconstruct.seed,
            )?),
            Some(chamfer_against(
                &res.base_mesh,
                gt,
                cfg.chamfer_points,
                cfg.reconstruct.seed,
            )?),
        ),
        None => (None, None),
    };
    write_json(
        &common.out.join("metrics.json"),
        &json!({
            "cd_mm2": cd,
            "initial_cd_mm2": cd_initial,
            "best_step": res.best_step,
            "best_loss": res.best_loss,
            "initial_loss": res.initial_loss,
            "events": res.events,
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateRun {
    /// Seed of the bundled two-arm scene.
    pub scene_seed: u64,
    pub resolution: usize,
    /// Joint noise standard deviation, radians.
    pub sigma: f64,
    /// Prerendered robot dataset; rendered from the scene when absent.
    pub dataset: Option<PathBuf>,
    pub calibrate: CalibrateConfig,
}

impl Default for CalibrateRun {
    fn default() -> Self {
        Self {
            scene_seed: 0,
            resolution: 128,
            sigma: 0.01,
            dataset: None,
            calibrate: CalibrateConfig::default(),
        }
    }
}

pub fn calibrate(common: &Common, sigma: Option<f64>, steps: Option<usize>) -> Result<()> {
    let mut cfg: CalibrateRun = load_config(common.config.as_deref())?;
    if let Some(s) = sigma {
        cfg.sigma = s;
    }
    if let Some(s) = common.seed {
        cfg.calibrate.seed = s;
    }
    if let Some(s) = steps {
        cfg.calibrate.iterations = s;
    }
    cfg.calibrate.validate()?;
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        bail!("sigma must be finite and >= 0");
    }
    if cfg.resolution == 0 {
        bail!("resolution must be positive");
    }
    check_optional(&cfg.dataset, "dataset")?;
    start_run(common, "calibrate", &cfg)?;

    let scene = robot(cfg.scene_seed, cfg.resolution)?;
    let ds = match &cfg.dataset {
        Some(p) => load_dataset(p)?,
        None => robot_dataset(&scene, &cfg.calibrate.raster)?,
    };
    let q_noisy = scene
        .snapshots
        .iter()
        .enumerate()
        .map(|(s, q)| add_joint_noise(q, cfg.sigma, noise_seed(cfg.calibrate.seed, s)))
        .collect::<meshsplat::Result<Vec<JointState>>>()?;
    let res = meshsplat::optim::calibrate(&scene, &ds, &q_noisy, &cfg.calibrate)?;

    let mut csv = String::from("iteration,tcp_error_mm,loss\n");
    for r in &res.history {
        csv.push_str(&format!(
            "{},{:.9e},{:.9e}\n",
            r.iteration, r.tcp_error_mm, r.loss
        ));
    }
    fs::write(common.out.join("tcp.csv"), csv).context("cannot write tcp.csv")?;
    write_json(
        &common.out.join("estimate.json"),
        &json!({
            "q_est": res.q_est,
            "camera_deltas": res.camera_deltas.iter().map(|v| [v.x, v.y, v.z]).collect::<Vec<_>>(),
        }),
    )?;
    let metrics = Metrics {
        tcp_error_mm: Some(res.best_tcp_mm),
        ..Metrics::default()
    };
    let mut m = metrics.to_json();
    m["initial_tcp_mm"] = json!(res.initial_tcp_mm);
    m["final_tcp_mm"] = json!(res.final_tcp_mm);
    m["best_iteration"] = json!(res.best_iteration);
    write_json(&common.out.join("metrics.json"), &m)
}

/// Noise seed of snapshot `s`, shared with the acceptance experiments.
pub fn noise_seed(seed: u64, s: usize) -> u64 {
    seed.wrapping_mul(31).wrapping_add(s as u64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub dataset: Option<PathBuf>,
    pub state: Option<PathBuf>,
    pub gt_mesh: Option<PathBuf>,
    pub chamfer_points: usize,
    pub seed: u64,
    pub align: AlignConfig,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            dataset: None,
            state: None,
            gt_mesh: None,
            chamfer_points: 10_000,
            seed: 0,
            align: AlignConfig::default(),
        }
    }
}

pub fn eval(
    common: &Common,
    dataset: Option<PathBuf>,
    state: Option<PathBuf>,
    gt_mesh: Option<PathBuf>,
) -> Result<()> {
    let mut cfg: EvalRun = load_config(common.config.as_deref())?;
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    if state.is_some() {
        cfg.state = state;
    }
    if gt_mesh.is_some() {
        cfg.gt_mesh = gt_mesh;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let ds_path = require(cfg.dataset.clone(), "dataset")?;
    let state_path = require(cfg.state.clone(), "state")?;
    check_optional(&cfg.gt_mesh, "ground-truth mesh")?;
    let ds = load_dataset(&ds_path)?;
    let (mesh, surfels) = State::load(&state_path)?;
    start_run(common, "eval", &cfg)?;

    let gaussians = bind_to_world(&mesh, &surfels)?;
    let frames = held_out_frames(&ds);
    let mut metrics = Metrics::default();
    let mut before = None;
    if !frames.is_empty() {
        let aligned = align_eval_cameras(&gaussians, &frames, ds.background, &cfg.align)?;
        let renders = common.out.join("renders");
        fs::create_dir_all(&renders).context("cannot create renders directory")?;
        for a in &aligned {
            a.render
                .write_png(&renders.join(format!("{}.png", a.name)), BitDepth::Eight)?;
        }
        let pairs: Vec<_> = aligned
            .iter()
            .zip(&frames)
            .map(|(a, f)| (a.name.clone(), &a.render, &f.rgb))
            .collect();
        let (p, s) = image_metrics(&pairs)?;
        metrics.psnr_db = Some(p);
        metrics.ssim = Some(s);
        before = Some(FrameMetric::from_pairs(
            aligned.iter().map(|a| (a.name.clone(), a.psnr_before)),
        ));
    }
    if let Some(gt) = &cfg.gt_mesh {
        metrics.cd_mm2 = Some(chamfer_against(&mesh, gt, cfg.chamfer_points, cfg.seed)?);
    }
    let mut m = metrics.to_json();
    m["psnr_before_align_db"] = before.map_or(Value::Null, |b| json!(b.mean));
    write_json(&common.out.join("metrics.json"), &m)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportRun {
    pub state: Option<PathBuf>,
}

pub fn export(common: &Common, state: Option<PathBuf>) -> Result<()> {
    let mut cfg: ExportRun = load_config(common.config.as_deref())?;
    if state.is_some() {
        cfg.state = state;
    }
    let state_path = require(cfg.state.clone(), "state")?;
    let (mesh, surfels) = State::load(&state_path)?;
    start_run(common, "export", &cfg)?;
    let out = export_asset(&mesh, &surfels, &common.out)?;
    write_json(
        &common.out.join("metrics.json"),
        &json!({
            "gaussians": surfels.len(),
            "vertices": mesh.vertex_count(),
            "faces": mesh.face_count(),
            "fallback_vertices": out.fallback_vertices,
        }),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderRun {
    pub splats: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    /// `train`, `test` or `all`.
    pub split: String,
    pub raster: RasterConfig,
}

impl Default for RenderRun {
    fn default() -> Self {
        Self {
            splats: None,
            dataset: None,
            split: "train".into(),
            raster: RasterConfig::default(),
        }
    }
}

pub fn render(common: &Common, splats: Option<PathBuf>, dataset: Option<PathBuf>) -> Result<()> {
    let mut cfg: RenderRun = load_config(common.config.as_deref())?;
    if splats.is_some() {
        cfg.splats = splats;
    }
    if dataset.is_some() {
        cfg.dataset = dataset;
    }
    if !matches!(cfg.split.as_str(), "train" | "test" | "all") {
        bail!("split must be train, test or all, not '{}'", cfg.split);
    }
    let splat_path = require(cfg.splats.clone(), "splat file")?;
    let ds_path = require(cfg.dataset.clone(), "dataset")?;
    let gaussians = read_splat_ply(&splat_path)?;
    let ds = load_dataset(&ds_path)?;
    start_run(common, "render", &cfg)?;

    let indices: Vec<usize> = match cfg.split.as_str() {
        "train" => ds.train.clone(),
        "test" => ds.test.clone(),
        _ => (0..ds.frames.len()).collect(),
    };
    let dir = common.out.join("renders");
    fs::create_dir_all(&dir).context("cannot create renders directory")?;
    let mut rows = Vec::with_capacity(indices.len());
    for i in indices {
        let f = &ds.frames[i];
        let img = render_image(
            &gaussians,
            &ds.cameras[f.camera],
            Modality::Rgb,
            ds.background,
            &cfg.raster,
        )?
        .color;
        img.write_png(&dir.join(format!("{}.png", f.name)), BitDepth::Eight)?;
        rows.push((f.name.clone(), psnr(&img, &f.composite(ds.background))?));
    }
    let metrics = Metrics {
        psnr_db: Some(FrameMetric::from_pairs(rows)),
        ..Metrics::default()
    };
    write_json(&common.out.join("metrics.json"), &metrics.to_json())
}
