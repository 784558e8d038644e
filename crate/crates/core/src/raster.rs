//! Tile-based differentiable rasterizer for world-space surfel Gaussians.
//!
//! Pixel centers sit at integer coordinates. Cameras follow the usual vision
//! convention: `x_c = R x_w + t`, +z forward, +x right, +y down.

use nalgebra::Matrix2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::sh;
use crate::so3::{self, Mat3, Vec3};
use crate::splatmesh::{WorldGaussianGrads, WorldGaussians};

pub type Mat2 = Matrix2<f64>;

/// Pinhole camera with a world-to-camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3,
    pub translation: Vec3,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: Mat3,
        translation: Vec3,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what, value: f64, allowed| {
            Err(Error::Bound {
                what,
                value: value.to_string(),
                allowed,
            })
        };
        if !(self.fx > 0.0 && self.fx.is_finite()) {
            return bad("fx", self.fx, "> 0");
        }
        if !(self.fy > 0.0 && self.fy.is_finite()) {
            return bad("fy", self.fy, "> 0");
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return bad("cx", self.cx, "[0, width)");
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return bad("cy", self.cy, "[0, height)");
        }
        let r = &self.rotation;
        let ortho = (r.transpose() * r - Mat3::identity()).norm();
        if ortho > 1e-9 || (r.determinant() - 1.0).abs() > 1e-9 {
            return bad(
                "camera rotation orthonormality error",
                ortho,
                "<= 1e-9 with det +1",
            );
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, vertical field of view `fov_y`
    /// (radians), principal point at the image center.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        fov_y: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let z = (target - eye).normalize();
        let mut x = z.cross(&up);
        if x.norm() < 1e-9 {
            x = z.cross(&Vec3::x());
            if x.norm() < 1e-9 {
                x = z.cross(&Vec3::y());
            }
        }
        let x = x.normalize();
        let y = z.cross(&x);
        // rows of the world-to-camera rotation are the camera axes
        let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = so3::orthonormalize(&rotation);
        let f = 0.5 * height as f64 / (0.5 * fov_y).tan();
        Self::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation,
            -(rotation * eye),
        )
    }

    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Applies a tangent increment: `R' = R exp(omega)`, `t' = t + tau`.
    pub fn retract(&self, omega: &Vec3, tau: &Vec3) -> Camera {
        Camera {
            rotation: self.rotation * so3::exp(omega),
            translation: self.translation + tau,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Rgb,
    Normals,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterConfig {
    pub near: f64,
    pub blur: f64,
    pub alpha_max: f64,
    pub alpha_min: f64,
    pub tile_size: usize,
    /// A pixel stops accepting contributions once its transmittance falls
    /// below this value. Zero disables early termination.
    pub min_transmittance: f64,
}

impl Default for RasterConfig {
    fn default() -> Self {
        Self {
            near: 0.01,
            blur: 0.3,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            tile_size: 16,
            min_transmittance: 0.0,
        }
    }
}

/// Image-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projected {
    pub mean2d: [f64; 2],
    pub cov2d: Mat2,
    pub depth: f64,
}

fn perspective_jacobian(cam: &Camera, xc: &Vec3) -> nalgebra::Matrix2x3<f64> {
    let iz = 1.0 / xc.z;
    nalgebra::Matrix2x3::new(
        cam.fx * iz,
        0.0,
        -cam.fx * xc.x * iz * iz,
        0.0,
        cam.fy * iz,
        -cam.fy * xc.y * iz * iz,
    )
}

/// EWA projection. Returns `None` when the Gaussian is at or behind the near plane.
pub fn project_gaussian(
    mean: &Vec3,
    covariance: &Mat3,
    cam: &Camera,
    config: &RasterConfig,
) -> Option<Projected> {
    let xc = cam.to_camera(mean);
    if xc.z <= config.near {
        return None;
    }
    let j = perspective_jacobian(cam, &xc);
    let m3 = cam.rotation * covariance * cam.rotation.transpose();
    let cov2d = j * m3 * j.transpose() + Mat2::identity() * config.blur;
    Some(Projected {
        mean2d: [cam.fx * xc.x / xc.z + cam.cx, cam.fy * xc.y / xc.z + cam.cy],
        cov2d,
        depth: xc.z,
    })
}

/// Counters collected during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    pub singular: usize,
    pub transparent: usize,
    pub offscreen: usize,
    /// Accepted (Gaussian, pixel) blends.
    pub blends: usize,
}

#[derive(Debug, Clone)]
struct Splat {
    id: u32,
    mean: [f64; 2],
    /// Inverse covariance `(a, b, c)` for `[[a, b], [b, c]]`.
    conic: [f64; 3],
    /// Three features per rendered modality.
    color: [f64; MAX_FEATURES],
    opacity: f64,
    depth: f64,
    /// `2 ln(o / alpha_min)`: quadratic-form bound of the visible footprint.
    q: f64,
    /// Pixel rectangle `[x0, x1) x [y0, y1)`.
    rect: [usize; 4],
}

/// Most modalities a single pass can render.
pub const MAX_MODALITIES: usize = 2;
const MAX_FEATURES: usize = 3 * MAX_MODALITIES;

/// One accepted (splat, pixel) blend, in compositing order.
#[derive(Debug, Clone, Copy)]
struct Contrib {
    alpha: f64,
    /// Transmittance in front of this blend. Kept rather than recovered by
    /// division, which fails once deep stacks underflow to zero.
    trans: f64,
    /// Position of the splat in its tile list.
    pos: u32,
    /// Pixel index inside the tile.
    pixel: u16,
    clipped: bool,
}

/// Per-call state kept by the forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardRecords {
    fingerprint: u64,
    splats: Vec<Splat>,
    tiles: Vec<Vec<u32>>,
    tiles_x: usize,
    contribs: Vec<Vec<Contrib>>,
    t_final: Vec<f64>,
}

/// Output of [`render_multi`]: one image per requested modality.
#[derive(Debug, Clone)]
pub struct MultiRender {
    pub images: Vec<Image>,
    pub alpha: Image,
    pub stats: RenderStats,
    pub records: ForwardRecords,
}

#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub color: Image,
    pub alpha: Image,
    pub stats: RenderStats,
    pub records: ForwardRecords,
}

/// Gradients of a render with respect to the Gaussians and the camera pose.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrads {
    pub gaussians: WorldGaussianGrads,
    /// Euclidean gradient with respect to the world-to-camera rotation matrix.
    pub camera_rotation: Mat3,
    pub camera_translation: Vec3,
}

impl RenderGrads {
    /// Gradient in the tangent of [`Camera::retract`]: `(omega, tau)`.
    pub fn camera_tangent(&self, cam: &Camera) -> (Vec3, Vec3) {
        (
            so3::axial(&(self.camera_rotation.transpose() * cam.rotation)),
            self.camera_translation,
        )
    }
}

struct Hasher(u64);

impl Hasher {
    fn push(&mut self, v: u64) {
        self.0 = (self.0 ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(29) ^ (v >> 17);
    }
    fn f(&mut self, v: f64) {
        self.push(v.to_bits());
    }
    fn all(&mut self, v: impl IntoIterator<Item = f64>) {
        for x in v {
            self.f(x);
        }
    }
}

fn fingerprint(
    gaussians: &WorldGaussians,
    cam: &Camera,
    modalities: &[Modality],
    backgrounds: &[[f64; 3]],
    config: &RasterConfig,
) -> u64 {
    let mut h = Hasher(0xcbf2_9ce4_8422_2325);
    h.push(gaussians.len() as u64);
    h.push(gaussians.sh_degree as u64);
    for i in 0..gaussians.len() {
        h.all(gaussians.means[i].iter().copied());
        h.all(gaussians.rotations[i].iter().copied());
        h.all(gaussians.scales[i].iter().copied());
    }
    h.all(gaussians.sh_coeffs.iter().copied());
    h.all(gaussians.opacities.iter().copied());
    h.all([cam.fx, cam.fy, cam.cx, cam.cy]);
    h.push(cam.width as u64);
    h.push(cam.height as u64);
    h.all(cam.rotation.iter().copied());
    h.all(cam.translation.iter().copied());
    for (m, bg) in modalities.iter().zip(backgrounds) {
        h.push(*m as u64);
        h.all(bg.iter().copied());
    }
    h.all([
        config.near,
        config.blur,
        config.alpha_max,
        config.alpha_min,
        config.min_transmittance,
    ]);
    h.push(config.tile_size as u64);
    h.0
}

fn splat_color(
    gaussians: &WorldGaussians,
    i: usize,
    cam: &Camera,
    center: &Vec3,
    modality: Modality,
) -> [f64; 3] {
    match modality {
        Modality::Rgb => {
            let k = gaussians.coeffs_per_gaussian();
            let dir = (gaussians.means[i] - center).normalize();
            sh::eval_unclamped(
                &gaussians.sh_coeffs[k * i..k * (i + 1)],
                &dir,
                gaussians.sh_degree,
            )
            .map(|v| v.clamp(0.0, 1.0))
        }
        Modality::Normals => {
            let n = cam.rotation * gaussians.rotations[i].column(2);
            [0.5 * n.x + 0.5, 0.5 * n.y + 0.5, 0.5 * n.z + 0.5]
        }
        Modality::Mask => [1.0; 3],
    }
}

enum Prep {
    Culled,
    Singular,
    Transparent,
    Offscreen,
    Visible(Splat),
}

fn prepare(
    gaussians: &WorldGaussians,
    i: usize,
    cam: &Camera,
    center: &Vec3,
    modalities: &[Modality],
    config: &RasterConfig,
) -> Prep {
    let Some(p) = project_gaussian(&gaussians.means[i], &gaussians.covariance(i), cam, config)
    else {
        return Prep::Culled;
    };
    let cov = p.cov2d;
    let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
    if !(det >= 1e-12) || !det.is_finite() {
        return Prep::Singular;
    }
    let o = gaussians.opacities[i];
    if !(o >= config.alpha_min) {
        return Prep::Transparent;
    }
    let q = 2.0 * (o / config.alpha_min).ln();
    let hx = (q * cov[(0, 0)]).sqrt();
    let hy = (q * cov[(1, 1)]).sqrt();
    let [mx, my] = p.mean2d;
    let x0 = (mx - hx).ceil().max(0.0);
    let x1 = (mx + hx).floor() + 1.0;
    let y0 = (my - hy).ceil().max(0.0);
    let y1 = (my + hy).floor() + 1.0;
    let x1 = x1.min(cam.width as f64);
    let y1 = y1.min(cam.height as f64);
    if !(x0 < x1 && y0 < y1) {
        return Prep::Offscreen;
    }
    let inv = 1.0 / det;
    Prep::Visible(Splat {
        id: i as u32,
        mean: p.mean2d,
        conic: [cov[(1, 1)] * inv, -cov[(0, 1)] * inv, cov[(0, 0)] * inv],
        color: {
            let mut f = [0.0; MAX_FEATURES];
            for (m, &modality) in modalities.iter().enumerate() {
                f[3 * m..3 * m + 3]
                    .copy_from_slice(&splat_color(gaussians, i, cam, center, modality));
            }
            f
        },
        opacity: o,
        depth: p.depth,
        q,
        rect: [x0 as usize, x1 as usize, y0 as usize, y1 as usize],
    })
}

/// Columns of row `y` inside both the splat's footprint and `[lo, hi)`.
#[inline]
fn row_span(s: &Splat, y: usize, lo: usize, hi: usize) -> Option<(usize, usize)> {
    let [a, b, c] = s.conic;
    let dy = y as f64 - s.mean[1];
    let disc = (b * dy) * (b * dy) - a * (c * dy * dy - s.q);
    if disc < 0.0 {
        return None;
    }
    let r = disc.sqrt();
    let xa = s.mean[0] + (-b * dy - r) / a;
    let xb = s.mean[0] + (-b * dy + r) / a;
    let x0 = ((xa - 1e-6).ceil().max(0.0) as usize)
        .max(lo)
        .max(s.rect[0]);
    let x1 = (((xb + 1e-6).floor() + 1.0).max(0.0) as usize)
        .min(hi)
        .min(s.rect[1]);
    (x0 < x1).then_some((x0, x1))
}

/// Power term `-1/2 dᵀ K d` and the clipped alpha, or `None` below threshold.
#[inline]
fn eval_alpha(s: &Splat, dx: f64, dy: f64, config: &RasterConfig) -> Option<(f64, bool)> {
    let [a, b, c] = s.conic;
    let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
    if power > 0.0 {
        return None;
    }
    let alpha = s.opacity * power.exp();
    if alpha < config.alpha_min {
        return None;
    }
    if alpha > config.alpha_max {
        Some((config.alpha_max, true))
    } else {
        Some((alpha, false))
    }
}

struct TileGeom {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

fn tile_geom(t: usize, tiles_x: usize, ts: usize, cam: &Camera) -> TileGeom {
    let (tx, ty) = (t % tiles_x, t / tiles_x);
    TileGeom {
        x0: tx * ts,
        x1: ((tx + 1) * ts).min(cam.width),
        y0: ty * ts,
        y1: ((ty + 1) * ts).min(cam.height),
    }
}

fn check_request(
    modalities: &[Modality],
    backgrounds: &[[f64; 3]],
    config: &RasterConfig,
) -> Result<()> {
    if modalities.is_empty() || modalities.len() > MAX_MODALITIES {
        return Err(Error::Bound {
            what: "modalities per pass",
            value: modalities.len().to_string(),
            allowed: "1..=2",
        });
    }
    if backgrounds.len() != modalities.len() {
        return Err(Error::shape(
            "backgrounds",
            modalities.len(),
            backgrounds.len(),
        ));
    }
    if config.tile_size == 0 || config.tile_size > 256 {
        return Err(Error::Config("tile_size must be in 1..=256".into()));
    }
    Ok(())
}

/// Renders `gaussians` from `cam`.
pub fn render(
    gaussians: &WorldGaussians,
    cam: &Camera,
    modality: Modality,
    background: [f64; 3],
    config: &RasterConfig,
) -> Result<RenderOutput> {
    let mut out = render_multi(gaussians, cam, &[modality], &[background], config)?;
    Ok(RenderOutput {
        color: out.images.pop().expect("one image per modality"),
        alpha: out.alpha,
        stats: out.stats,
        records: out.records,
    })
}

/// Renders several modalities in one pass. They share sorting, footprints
/// and blending weights, so the result equals separate [`render`] calls.
pub fn render_multi(
    gaussians: &WorldGaussians,
    cam: &Camera,
    modalities: &[Modality],
    backgrounds: &[[f64; 3]],
    config: &RasterConfig,
) -> Result<MultiRender> {
    cam.validate()?;
    check_request(modalities, backgrounds, config)?;
    let nf = 3 * modalities.len();
    let center = cam.center();
    let preps: Vec<Prep> = (0..gaussians.len())
        .into_par_iter()
        .map(|i| prepare(gaussians, i, cam, &center, modalities, config))
        .collect();
    let mut stats = RenderStats::default();
    let mut splats = Vec::new();
    for p in preps {
        match p {
            Prep::Culled => stats.culled += 1,
            Prep::Singular => stats.singular += 1,
            Prep::Transparent => stats.transparent += 1,
            Prep::Offscreen => stats.offscreen += 1,
            Prep::Visible(s) => splats.push(s),
        }
    }
    stats.visible = splats.len();
    let mut order: Vec<(f64, u32, usize)> = splats
        .iter()
        .enumerate()
        .map(|(k, s)| (s.depth, s.id, k))
        .collect();
    order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let splats: Vec<Splat> = order.iter().map(|o| splats[o.2].clone()).collect();

    let ts = config.tile_size;
    let tiles_x = cam.width.div_ceil(ts);
    let tiles_y = cam.height.div_ceil(ts);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, s) in splats.iter().enumerate() {
        for ty in s.rect[2] / ts..=(s.rect[3] - 1) / ts {
            for tx in s.rect[0] / ts..=(s.rect[1] - 1) / ts {
                tiles[ty * tiles_x + tx].push(k as u32);
            }
        }
    }

    struct TileOut {
        acc: Vec<f64>,
        trans: Vec<f64>,
        contribs: Vec<Contrib>,
    }
    let outs: Vec<TileOut> = (0..tiles.len())
        .into_par_iter()
        .map(|t| {
            let g = tile_geom(t, tiles_x, ts, cam);
            let w = g.x1 - g.x0;
            let n = w * (g.y1 - g.y0);
            let mut out = TileOut {
                acc: vec![0.0; nf * n],
                trans: vec![1.0; n],
                contribs: Vec::new(),
            };
            let mut done = vec![false; n];
            let mut remaining = n;
            for (pos, &k) in tiles[t].iter().enumerate() {
                if remaining == 0 {
                    break;
                }
                let s = &splats[k as usize];
                for y in s.rect[2].max(g.y0)..s.rect[3].min(g.y1) {
                    let Some((xa, xb)) = row_span(s, y, g.x0, g.x1) else {
                        continue;
                    };
                    let dy = y as f64 - s.mean[1];
                    for x in xa..xb {
                        let l = (y - g.y0) * w + (x - g.x0);
                        if done[l] {
                            continue;
                        }
                        let Some((alpha, clipped)) =
                            eval_alpha(s, x as f64 - s.mean[0], dy, config)
                        else {
                            continue;
                        };
                        let t_before = out.trans[l];
                        let wgt = alpha * t_before;
                        for c in 0..nf {
                            out.acc[nf * l + c] += wgt * s.color[c];
                        }
                        out.trans[l] *= 1.0 - alpha;
                        out.contribs.push(Contrib {
                            alpha,
                            trans: t_before,
                            pos: pos as u32,
                            pixel: l as u16,
                            clipped,
                        });
                        if out.trans[l] < config.min_transmittance {
                            done[l] = true;
                            remaining -= 1;
                        }
                    }
                }
            }
            out
        })
        .collect();

    let (w, h) = (cam.width, cam.height);
    let mut images = vec![Image::new(w, h, 3); modalities.len()];
    let mut alpha = Image::new(w, h, 1);
    let mut t_final = vec![1.0; w * h];
    let mut contribs = Vec::with_capacity(outs.len());
    for (t, out) in outs.into_iter().enumerate() {
        let g = tile_geom(t, tiles_x, ts, cam);
        let tw = g.x1 - g.x0;
        for y in g.y0..g.y1 {
            for x in g.x0..g.x1 {
                let l = (y - g.y0) * tw + (x - g.x0);
                let p = y * w + x;
                let tf = out.trans[l];
                for (m, img) in images.iter_mut().enumerate() {
                    for c in 0..3 {
                        img.data[3 * p + c] = out.acc[nf * l + 3 * m + c] + backgrounds[m][c] * tf;
                    }
                }
                alpha.data[p] = 1.0 - tf;
                t_final[p] = tf;
            }
        }
        stats.blends += out.contribs.len();
        contribs.push(out.contribs);
    }
    Ok(MultiRender {
        images,
        alpha,
        stats,
        records: ForwardRecords {
            fingerprint: fingerprint(gaussians, cam, modalities, backgrounds, config),
            splats,
            tiles,
            tiles_x,
            contribs,
            t_final,
        },
    })
}

/// Image-space gradient of one splat: mean (2), conic matrix (3, symmetric
/// entries 00, 01, 11), opacity (1), features (up to 6).
type SplatGrad = [f64; 6 + MAX_FEATURES];

/// Vector-Jacobian product of [`render`]. `g_color` is the cotangent of the
/// color image; `g_alpha` optionally that of the alpha image.
#[allow(clippy::too_many_arguments)]
pub fn render_vjp(
    gaussians: &WorldGaussians,
    cam: &Camera,
    modality: Modality,
    background: [f64; 3],
    config: &RasterConfig,
    forward: &RenderOutput,
    g_color: &Image,
    g_alpha: Option<&Image>,
) -> Result<RenderGrads> {
    render_multi_vjp(
        gaussians,
        cam,
        &[modality],
        &[background],
        config,
        &forward.records,
        &[Some(g_color)],
        g_alpha,
    )
}

/// Vector-Jacobian product of [`render_multi`]. A `None` image cotangent
/// counts as zero.
#[allow(clippy::too_many_arguments)]
pub fn render_multi_vjp(
    gaussians: &WorldGaussians,
    cam: &Camera,
    modalities: &[Modality],
    backgrounds: &[[f64; 3]],
    config: &RasterConfig,
    records: &ForwardRecords,
    g_images: &[Option<&Image>],
    g_alpha: Option<&Image>,
) -> Result<RenderGrads> {
    check_request(modalities, backgrounds, config)?;
    let rec = records;
    if rec.fingerprint != fingerprint(gaussians, cam, modalities, backgrounds, config) {
        return Err(Error::State(
            "records were produced by a different render call".into(),
        ));
    }
    if g_images.len() != modalities.len() {
        return Err(Error::shape(
            "image cotangents",
            modalities.len(),
            g_images.len(),
        ));
    }
    for gi in g_images.iter().flatten() {
        if gi.width != cam.width || gi.height != cam.height || gi.channels != 3 {
            return Err(Error::shape(
                "color cotangent",
                cam.width * cam.height * 3,
                gi.data.len(),
            ));
        }
    }
    if let Some(ga) = g_alpha {
        if ga.width != cam.width || ga.height != cam.height || ga.channels != 1 {
            return Err(Error::shape(
                "alpha cotangent",
                cam.width * cam.height,
                ga.data.len(),
            ));
        }
    }
    let nf = 3 * modalities.len();
    let ts = config.tile_size;
    let tiles_x = rec.tiles_x;
    let w = cam.width;
    let splats = &rec.splats;
    let bg: Vec<f64> = backgrounds.iter().flatten().copied().collect();

    let tile_grads: Vec<Vec<SplatGrad>> = (0..rec.tiles.len())
        .into_par_iter()
        .map(|t| {
            let list = &rec.tiles[t];
            let contribs = &rec.contribs[t];
            let mut grads = vec![[0.0; 6 + MAX_FEATURES]; list.len()];
            if contribs.is_empty() {
                return grads;
            }
            let g = tile_geom(t, tiles_x, ts, cam);
            let tw = g.x1 - g.x0;
            let n = tw * (g.y1 - g.y0);
            let mut suffix = vec![0.0; nf * n];
            let mut gf = vec![0.0; nf * n];
            let mut ga = vec![0.0; n];
            for y in g.y0..g.y1 {
                for x in g.x0..g.x1 {
                    let l = (y - g.y0) * tw + (x - g.x0);
                    let p = y * w + x;
                    let tf = rec.t_final[p];
                    for c in 0..nf {
                        suffix[nf * l + c] = bg[c] * tf;
                    }
                    for (m, gi) in g_images.iter().enumerate() {
                        if let Some(gi) = gi {
                            for c in 0..3 {
                                gf[nf * l + 3 * m + c] = gi.data[3 * p + c];
                            }
                        }
                    }
                    if let Some(a) = g_alpha {
                        ga[l] = a.data[p] * tf;
                    }
                }
            }
            for cb in contribs.iter().rev() {
                let s = &splats[list[cb.pos as usize] as usize];
                let l = cb.pixel as usize;
                let dx = (g.x0 + l % tw) as f64 - s.mean[0];
                let dy = (g.y0 + l / tw) as f64 - s.mean[1];
                let alpha = cb.alpha;
                let one_minus = 1.0 - alpha;
                let t_i = cb.trans;
                let acc = &mut grads[cb.pos as usize];
                let mut g_a = ga[l] / one_minus;
                for ch in 0..nf {
                    let gc = gf[nf * l + ch];
                    acc[6 + ch] += gc * alpha * t_i;
                    g_a += gc * (s.color[ch] * t_i - suffix[nf * l + ch] / one_minus);
                    suffix[nf * l + ch] += s.color[ch] * alpha * t_i;
                }
                if !cb.clipped {
                    let [a, b, c] = s.conic;
                    let g_pow = g_a * alpha;
                    acc[5] += g_a * alpha / s.opacity;
                    acc[0] += g_pow * (a * dx + b * dy);
                    acc[1] += g_pow * (b * dx + c * dy);
                    acc[2] += -0.5 * g_pow * dx * dx;
                    acc[3] += -0.5 * g_pow * dx * dy;
                    acc[4] += -0.5 * g_pow * dy * dy;
                }
            }
            grads
        })
        .collect();

    let mut per_splat = vec![[0.0; 6 + MAX_FEATURES]; splats.len()];
    for (t, grads) in tile_grads.iter().enumerate() {
        for (pos, g) in grads.iter().enumerate() {
            let dst = &mut per_splat[rec.tiles[t][pos] as usize];
            for k in 0..6 + nf {
                dst[k] += g[k];
            }
        }
    }

    let center = cam.center();
    let kcoef = gaussians.coeffs_per_gaussian();
    let backs: Vec<BackTuple> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, sg)| splat_backward(gaussians, s, sg, cam, &center, modalities, kcoef))
        .collect();

    let mut out = WorldGaussianGrads::zeros(gaussians.len(), gaussians.sh_degree);
    let mut cam_r = Mat3::zeros();
    let mut cam_t = Vec3::zeros();
    for (s, (mean, rotation, scales, sh, opacity, g_w, g_t)) in splats.iter().zip(backs) {
        let i = s.id as usize;
        out.means[i] = mean;
        out.rotations[i] = rotation;
        out.scales[i] = scales;
        out.sh_coeffs[kcoef * i..kcoef * (i + 1)].copy_from_slice(&sh);
        out.opacities[i] = opacity;
        cam_r += g_w;
        cam_t += g_t;
    }
    Ok(RenderGrads {
        gaussians: out,
        camera_rotation: cam_r,
        camera_translation: cam_t,
    })
}

type BackTuple = (Vec3, Mat3, Vec3, Vec<f64>, f64, Mat3, Vec3);

fn splat_backward(
    gaussians: &WorldGaussians,
    s: &Splat,
    sg: &SplatGrad,
    cam: &Camera,
    center: &Vec3,
    modalities: &[Modality],
    kcoef: usize,
) -> BackTuple {
    let i = s.id as usize;
    let w = &cam.rotation;
    let t = &cam.translation;
    let mu = gaussians.means[i];
    let rot = gaussians.rotations[i];
    let sc = gaussians.scales[i];
    let mut g_mu = Vec3::zeros();
    let mut g_rot = Mat3::zeros();
    let mut g_sh = vec![0.0; kcoef];
    let mut g_w = Mat3::zeros();
    let mut g_t = Vec3::zeros();

    for (m, &modality) in modalities.iter().enumerate() {
        let g_col = [sg[6 + 3 * m], sg[7 + 3 * m], sg[8 + 3 * m]];
        match modality {
            Modality::Rgb => {
                let v = mu - center;
                let len = v.norm();
                let dir = v / len;
                let g_dir = sh::eval_vjp(
                    &gaussians.sh_coeffs[kcoef * i..kcoef * (i + 1)],
                    &dir,
                    gaussians.sh_degree,
                    g_col,
                    &mut g_sh,
                );
                let g_v = (g_dir - dir * dir.dot(&g_dir)) / len;
                g_mu += g_v;
                // center = -Wᵀ t
                let g_c = -g_v;
                g_w -= t * g_c.transpose();
                g_t -= w * g_c;
            }
            Modality::Normals => {
                let gc = 0.5 * Vec3::new(g_col[0], g_col[1], g_col[2]);
                let n = rot.column(2).into_owned();
                g_w += gc * n.transpose();
                let gn = w.transpose() * gc;
                let cur = g_rot.column(2).into_owned();
                g_rot.set_column(2, &(cur + gn));
            }
            Modality::Mask => {}
        }
    }

    let xc = w * mu + t;
    let (x, y, z) = (xc.x, xc.y, xc.z);
    let (fx, fy) = (cam.fx, cam.fy);
    let iz = 1.0 / z;
    let iz2 = iz * iz;

    // mean2d
    let (gu, gv) = (sg[0], sg[1]);
    let mut g_xc = Vec3::new(
        fx * iz * gu,
        fy * iz * gv,
        -fx * x * iz2 * gu - fy * y * iz2 * gv,
    );

    // conic -> cov2d
    let [a, b, c] = s.conic;
    let k = Mat2::new(a, b, b, c);
    let g_k = Mat2::new(sg[2], sg[3], sg[3], sg[4]);
    let g_cov = -(k * g_k * k);

    let j = perspective_jacobian(cam, &xc);
    let sigma = rot * Mat3::from_diagonal(&sc.component_mul(&sc)) * rot.transpose();
    let m3 = w * sigma * w.transpose();
    let g_j = 2.0 * g_cov * j * m3;
    let g_m3 = j.transpose() * g_cov * j;

    g_xc.x += g_j[(0, 2)] * (-fx * iz2);
    g_xc.y += g_j[(1, 2)] * (-fy * iz2);
    g_xc.z += g_j[(0, 0)] * (-fx * iz2)
        + g_j[(0, 2)] * (2.0 * fx * x * iz2 * iz)
        + g_j[(1, 1)] * (-fy * iz2)
        + g_j[(1, 2)] * (2.0 * fy * y * iz2 * iz);

    let g_sigma = w.transpose() * g_m3 * w;
    g_w += 2.0 * g_m3 * w * sigma;

    let s2 = Mat3::from_diagonal(&sc.component_mul(&sc));
    g_rot += 2.0 * g_sigma * rot * s2;
    let inner = rot.transpose() * g_sigma * rot;
    let g_sc = Vec3::new(
        2.0 * sc.x * inner[(0, 0)],
        2.0 * sc.y * inner[(1, 1)],
        2.0 * sc.z * inner[(2, 2)],
    );

    g_mu += w.transpose() * g_xc;
    g_w += g_xc * mu.transpose();
    g_t += g_xc;

    (g_mu, g_rot, g_sc, g_sh, sg[5], g_w, g_t)
}
