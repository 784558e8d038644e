//! Geometry and image metrics: Chamfer distance, PSNR, SSIM summaries,
//! held-out camera alignment and TCP error.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::TriangleMesh;
use crate::image::Image;
use crate::kinematics::{forward_kinematics, JointState, KinematicChain};
use crate::losses::{photometric_l1, ssim};
use crate::optim::{Adam, Group, GroupVectors, LearningRates};
use crate::raster::{render, render_vjp, Camera, Modality, RasterConfig};
use crate::scene_io::Dataset;
use crate::so3::{self, Vec3};
use crate::splatmesh::WorldGaussians;

/// Points sampled from a surface.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSample {
    pub points: Vec<Vec3>,
    pub source: String,
}

impl PointSample {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same points multiplied by `factor` (1000 turns meters into millimeters).
    pub fn scaled(&self, factor: f64) -> PointSample {
        PointSample {
            points: self.points.iter().map(|p| p * factor).collect(),
            source: self.source.clone(),
        }
    }
}

/// `n` points uniform over the surface area of `mesh`.
pub fn sample_surface(mesh: &TriangleMesh, n: usize, seed: u64) -> Result<PointSample> {
    let areas = mesh.face_areas();
    let total: f64 = areas.iter().sum();
    if n > 0 && !(total > 0.0) {
        return Err(Error::Config("cannot sample a mesh with zero area".into()));
    }
    let mut cdf = Vec::with_capacity(areas.len());
    let mut acc = 0.0;
    for a in &areas {
        acc += a;
        cdf.push(acc / total);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.random();
        let f = cdf.partition_point(|&c| c < u).min(areas.len() - 1);
        let [a, b, c] = mesh.face_vertices(f);
        let r1: f64 = rng.random::<f64>().sqrt();
        let r2: f64 = rng.random();
        points.push(a * (1.0 - r1) + b * (r1 * (1.0 - r2)) + c * (r1 * r2));
    }
    Ok(PointSample {
        points,
        source: format!("mesh with {} faces", mesh.face_count()),
    })
}

/// Uniform grid over a point set for exact nearest-neighbor queries.
struct Grid<'a> {
    points: &'a [Vec3],
    lo: Vec3,
    cell: f64,
    dims: [i64; 3],
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> Grid<'a> {
    fn new(points: &'a [Vec3]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        let ext = hi - lo;
        let volume = ext.x.max(1e-12) * ext.y.max(1e-12) * ext.z.max(1e-12);
        let mut cell = (2.0 * volume / points.len() as f64).cbrt();
        let max_side = ext.max();
        if !(cell > 0.0) || !cell.is_finite() {
            cell = 1.0;
        }
        // keep the cell count bounded for flat or degenerate sets
        cell = cell.max(max_side / 256.0).max(1e-300);
        let dim = |e: f64| ((e / cell).floor() as i64 + 1).max(1);
        let dims = [dim(ext.x), dim(ext.y), dim(ext.z)];
        let ncells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; ncells + 1];
        let mut keys = Vec::with_capacity(points.len());
        let mut grid = Grid {
            points,
            lo,
            cell,
            dims,
            starts: Vec::new(),
            order: Vec::new(),
        };
        for p in points {
            let c = grid.coords(p);
            let k = grid
                .key(c[0], c[1], c[2])
                .expect("points lie inside their own grid");
            keys.push(k);
            counts[k + 1] += 1;
        }
        for i in 0..ncells {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &k) in keys.iter().enumerate() {
            order[fill[k]] = i;
            fill[k] += 1;
        }
        grid.starts = counts;
        grid.order = order;
        grid
    }

    fn coords(&self, p: &Vec3) -> [i64; 3] {
        let r = (p - self.lo) / self.cell;
        [r.x.floor() as i64, r.y.floor() as i64, r.z.floor() as i64]
    }

    fn key(&self, x: i64, y: i64, z: i64) -> Option<usize> {
        let d = self.dims;
        if x < 0 || y < 0 || z < 0 || x >= d[0] || y >= d[1] || z >= d[2] {
            return None;
        }
        Some(((z * d[1] + y) * d[0] + x) as usize)
    }

    /// Squared distance from `q` to its nearest point.
    fn nearest(&self, q: &Vec3) -> f64 {
        let c = self.coords(q);
        let d = self.dims;
        let gap = |v: i64, n: i64| {
            if v < 0 {
                -v
            } else if v >= n {
                v - n + 1
            } else {
                0
            }
        };
        let r0 = (0..3).map(|k| gap(c[k], d[k])).max().unwrap_or(0);
        let r_max = (0..3)
            .map(|k| c[k].abs().max((c[k] - d[k] + 1).abs()))
            .max()
            .unwrap_or(0);
        let mut best = f64::INFINITY;
        for r in r0..=r_max {
            // cells r rings out hold nothing closer than r - 1 cell widths
            let bound = (r - 1).max(0) as f64 * self.cell;
            if best <= bound * bound {
                break;
            }
            let span = |k: usize| (c[k] - r).max(0)..=(c[k] + r).min(d[k] - 1);
            for z in span(2) {
                for y in span(1) {
                    for x in span(0) {
                        let ring = (x - c[0]).abs().max((y - c[1]).abs()).max((z - c[2]).abs());
                        if ring != r {
                            continue;
                        }
                        let Some(k) = self.key(x, y, z) else { continue };
                        for &i in &self.order[self.starts[k]..self.starts[k + 1]] {
                            let dist = (self.points[i] - q).norm_squared();
                            if dist < best {
                                best = dist;
                            }
                        }
                    }
                }
            }
        }
        best
    }
}

fn directed_mean(from: &[Vec3], to: &[Vec3]) -> f64 {
    let grid = Grid::new(to);
    let d: Vec<f64> = from.par_iter().map(|p| grid.nearest(p)).collect();
    d.iter().sum::<f64>() / from.len() as f64
}

/// Symmetric Chamfer distance: the average of the two directed mean squared
/// nearest-neighbor distances, in the squared units of the points.
pub fn chamfer(a: &PointSample, b: &PointSample) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(
            "Chamfer distance needs two non-empty point sets".into(),
        ));
    }
    Ok(0.5 * (directed_mean(&a.points, &b.points) + directed_mean(&b.points, &a.points)))
}

/// Exhaustive reference for [`chamfer`].
pub fn chamfer_brute_force(a: &PointSample, b: &PointSample) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config(
            "Chamfer distance needs two non-empty point sets".into(),
        ));
    }
    let dm = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| (q - p).norm_squared())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (dm(&a.points, &b.points) + dm(&b.points, &a.points)))
}

/// Chamfer distance in mm² between two meshes given in meters.
pub fn mesh_chamfer_mm2(a: &TriangleMesh, b: &TriangleMesh, n: usize, seed: u64) -> Result<f64> {
    let pa = sample_surface(a, n, seed)?.scaled(1000.0);
    let pb = sample_surface(b, n, seed ^ 0x5eed)?.scaled(1000.0);
    chamfer(&pa, &pb)
}

fn mse(pred: &Image, gt: &Image, mask: Option<&Image>) -> Result<f64> {
    pred.check_shape(gt, "PSNR images")?;
    let c = pred.channels;
    let mut sum = 0.0;
    let mut count = 0.0;
    for p in 0..pred.pixel_count() {
        let w = match mask {
            Some(m) => m.data[p],
            None => 1.0,
        };
        if w <= 0.0 {
            continue;
        }
        for k in 0..c {
            let d = pred.data[p * c + k] - gt.data[p * c + k];
            sum += w * d * d;
            count += w;
        }
    }
    if count == 0.0 {
        return Err(Error::Config("PSNR mask selects no pixels".into()));
    }
    Ok(sum / count)
}

fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// `10 log10(1 / MSE)` over the full frame; identical images give `+inf`.
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, gt, None)?))
}

/// PSNR restricted to pixels where `mask > 0`, weighted by the mask.
pub fn masked_psnr(pred: &Image, gt: &Image, mask: &Image) -> Result<f64> {
    if mask.width != pred.width || mask.height != pred.height || mask.channels != 1 {
        return Err(Error::shape(
            "PSNR mask pixels",
            pred.pixel_count(),
            mask.pixel_count(),
        ));
    }
    Ok(psnr_from_mse(mse(pred, gt, Some(mask))?))
}

/// Mean TCP distance in millimeters between two joint states.
pub fn tcp_error(chain: &KinematicChain, q_est: &JointState, q_gt: &JointState) -> Result<f64> {
    if chain.tcps.is_empty() {
        return Err(Error::Config("kinematic chain has no TCP sites".into()));
    }
    let a = forward_kinematics(chain, q_est)?;
    let b = forward_kinematics(chain, q_gt)?;
    let sum: f64 = a
        .tcps
        .iter()
        .zip(&b.tcps)
        .map(|(x, y)| (x - y).norm())
        .sum();
    Ok(1000.0 * sum / chain.tcps.len() as f64)
}

/// FNV-1a over the bit patterns of every Gaussian buffer.
pub fn scene_hash(g: &WorldGaussians) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |v: f64| {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for m in &g.means {
        m.iter().for_each(|&v| eat(v));
    }
    for r in &g.rotations {
        r.iter().for_each(|&v| eat(v));
    }
    for s in &g.scales {
        s.iter().for_each(|&v| eat(v));
    }
    g.sh_coeffs.iter().for_each(|&v| eat(v));
    g.opacities.iter().for_each(|&v| eat(v));
    eat(g.sh_degree as f64);
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub steps: usize,
    pub lr: f64,
    pub raster: RasterConfig,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 1e-3,
            raster: RasterConfig {
                min_transmittance: 1e-4,
                ..RasterConfig::default()
            },
        }
    }
}

/// A held-out view to align.
#[derive(Debug, Clone)]
pub struct HeldOutFrame {
    pub name: String,
    pub camera: Camera,
    pub rgb: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedFrame {
    pub name: String,
    pub camera: Camera,
    /// Axis-angle correction, `camera = original.retract(delta, 0)`.
    pub delta: Vec3,
    pub psnr_before: f64,
    pub psnr_after: f64,
    pub render: Image,
}

/// Test-split frames of a dataset with their composited targets.
pub fn held_out_frames(ds: &Dataset) -> Vec<HeldOutFrame> {
    ds.test
        .iter()
        .map(|&i| {
            let f = &ds.frames[i];
            HeldOutFrame {
                name: f.name.clone(),
                camera: ds.cameras[f.camera].clone(),
                rgb: f.composite(ds.background),
            }
        })
        .collect()
}

/// Refines each held-out camera rotation against L1 photometric error with
/// the scene frozen. Keeps the iterate with the highest PSNR, so alignment
/// never lowers it.
pub fn align_eval_cameras(
    scene: &WorldGaussians,
    frames: &[HeldOutFrame],
    background: [f64; 3],
    config: &AlignConfig,
) -> Result<Vec<AlignedFrame>> {
    if frames.is_empty() {
        return Err(Error::Dataset("no held-out frames to align".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(
            "alignment learning rate must be finite and >= 0".into(),
        ));
    }
    let before = scene_hash(scene);
    let lrs = LearningRates {
        cameras: config.lr,
        ..LearningRates::default()
    };
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let mut adam = Adam::new(&lrs, &[]);
        let mut delta = Vec3::zeros();
        let first = render(scene, &f.camera, Modality::Rgb, background, &config.raster)?;
        let psnr_before = psnr(&first.color, &f.rgb)?;
        let mut best = (psnr_before, Vec3::zeros(), first.color.clone());
        let mut current = first;
        for step in 0..config.steps {
            let cam = f.camera.retract(&delta, &Vec3::zeros());
            let (l, g_img) = photometric_l1(&current.color, &f.rgb, None)?;
            if !l.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let rg = render_vjp(
                scene,
                &cam,
                Modality::Rgb,
                background,
                &config.raster,
                &current,
                &g_img,
                None,
            )?;
            let g = so3::left_jacobian(&delta) * rg.camera_tangent(&cam).0;
            let mut p: GroupVectors = [(Group::Cameras, vec![delta.x, delta.y, delta.z])]
                .into_iter()
                .collect();
            let gv: GroupVectors = [(Group::Cameras, vec![g.x, g.y, g.z])]
                .into_iter()
                .collect();
            adam.step(&mut p, &gv)?;
            let d = &p[&Group::Cameras];
            delta = Vec3::new(d[0], d[1], d[2]);
            let cam = f.camera.retract(&delta, &Vec3::zeros());
            current = render(scene, &cam, Modality::Rgb, background, &config.raster)?;
            let s = psnr(&current.color, &f.rgb)?;
            if s > best.0 {
                best = (s, delta, current.color.clone());
            }
        }
        let (psnr_after, delta, image) = best;
        out.push(AlignedFrame {
            name: f.name.clone(),
            camera: f.camera.retract(&delta, &Vec3::zeros()),
            delta,
            psnr_before,
            psnr_after,
            render: image,
        });
    }
    if scene_hash(scene) != before {
        return Err(Error::State("scene changed during camera alignment".into()));
    }
    Ok(out)
}

/// Per-frame values and their mean.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMetric {
    pub per_frame: BTreeMap<String, f64>,
    pub mean: f64,
}

impl FrameMetric {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, f64)>) -> Self {
        let per_frame: BTreeMap<String, f64> = pairs.into_iter().collect();
        let mean = if per_frame.is_empty() {
            f64::NAN
        } else {
            per_frame.values().sum::<f64>() / per_frame.len() as f64
        };
        Self { per_frame, mean }
    }
}

/// Report written by `eval`. Absent entries were not measured.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub cd_mm2: Option<f64>,
    pub psnr_db: Option<FrameMetric>,
    pub ssim: Option<FrameMetric>,
    pub tcp_error_mm: Option<f64>,
}

fn number(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else if v.is_nan() {
        Value::Null
    } else if v > 0.0 {
        json!("inf")
    } else {
        json!("-inf")
    }
}

fn metric_json(m: &Option<FrameMetric>) -> Value {
    match m {
        None => Value::Null,
        Some(m) => json!({
            "per_frame": m.per_frame.iter().map(|(k, v)| (k.clone(), number(*v))).collect::<serde_json::Map<_, _>>(),
            "mean": number(m.mean),
        }),
    }
}

impl Metrics {
    /// JSON object; infinite PSNR is written as the string `"inf"`.
    pub fn to_json(&self) -> Value {
        json!({
            "cd_mm2": self.cd_mm2.map(number).unwrap_or(Value::Null),
            "psnr_db": metric_json(&self.psnr_db),
            "ssim": metric_json(&self.ssim),
            "tcp_error_mm": self.tcp_error_mm.map(number).unwrap_or(Value::Null),
        })
    }
}

/// PSNR and SSIM of rendered frames against ground truth, by name.
pub fn image_metrics(pairs: &[(String, &Image, &Image)]) -> Result<(FrameMetric, FrameMetric)> {
    let rows: Vec<(String, f64, f64)> = pairs
        .par_iter()
        .map(|(name, pred, gt)| Ok((name.clone(), psnr(pred, gt)?, ssim(pred, gt)?)))
        .collect::<Result<_>>()?;
    Ok((
        FrameMetric::from_pairs(rows.iter().map(|r| (r.0.clone(), r.1))),
        FrameMetric::from_pairs(rows.iter().map(|r| (r.0.clone(), r.2))),
    ))
}
