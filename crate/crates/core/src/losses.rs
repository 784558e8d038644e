//! Image divergences, the exact Euclidean distance transform, SSIM and the
//! weighted training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{edge_length_loss, laplacian_loss, TriangleMesh};
use crate::image::Image;
use crate::so3::Vec3;

/// Differences at or below this magnitude count as ties in the L1 term.
pub const L1_TIE: f64 = 1e-12;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub photo: f64,
    pub mask: f64,
    pub smask: f64,
    pub normal: f64,
    pub laplacian: f64,
    pub edge: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            photo: 1.0,
            mask: 10.0,
            smask: 1e-2,
            normal: 3.0,
            laplacian: 3.0,
            edge: 0.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            photo: 0.0,
            mask: 0.0,
            smask: 0.0,
            normal: 0.0,
            laplacian: 0.0,
            edge: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("photo", self.photo),
            ("mask", self.mask),
            ("smask", self.smask),
            ("normal", self.normal),
            ("laplacian", self.laplacian),
            ("edge", self.edge),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// How the soft-mask target is built from the distance transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SoftMaskMode {
    /// `exp(-(d / tau)²)`.
    Smoothed,
    /// `d²`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoftMaskConfig {
    pub mode: SoftMaskMode,
    /// Falloff in pixels.
    pub tau: f64,
}

impl Default for SoftMaskConfig {
    fn default() -> Self {
        Self {
            mode: SoftMaskMode::Smoothed,
            tau: 25.0,
        }
    }
}

/// One observed frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub camera: usize,
    pub rgb: Image,
    pub mask: Option<Image>,
    pub normals: Option<Image>,
    pub weight: f64,
}

fn check(a: &Image, b: &Image, what: &'static str) -> Result<()> {
    a.check_shape(b, what)
}

fn check_mask(img: &Image, mask: &Image) -> Result<()> {
    if mask.channels != 1 || mask.width != img.width || mask.height != img.height {
        return Err(Error::Shape {
            what: "mask",
            expected: format!("{}x{}x1", img.width, img.height),
            got: format!("{}x{}x{}", mask.width, mask.height, mask.channels),
        });
    }
    Ok(())
}

/// `mean |pred - gt ⊗ mask|` and its cotangent.
pub fn photometric_l1(pred: &Image, gt: &Image, mask: Option<&Image>) -> Result<(f64, Image)> {
    check(pred, gt, "photometric target")?;
    let target = match mask {
        Some(m) => {
            check_mask(gt, m)?;
            gt.masked(m)?
        }
        None => gt.clone(),
    };
    let n = pred.data.len() as f64;
    let mut loss = 0.0;
    let mut cot = Image::new(pred.width, pred.height, pred.channels);
    for ((g, p), t) in cot.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d.abs();
        if d.abs() > L1_TIE {
            *g = d.signum() / n;
        }
    }
    Ok((loss / n, cot))
}

/// Sum of squared differences and its cotangent.
pub fn squared_error(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    check(pred, target, "squared-error target")?;
    let mut cot = Image::new(pred.width, pred.height, pred.channels);
    let mut loss = 0.0;
    for ((g, p), t) in cot.data.iter_mut().zip(&pred.data).zip(&target.data) {
        let d = p - t;
        loss += d * d;
        *g = 2.0 * d;
    }
    Ok((loss, cot))
}

/// `‖pred - gt‖²` on one-channel masks.
pub fn mask_l2(pred_mask: &Image, gt_mask: &Image) -> Result<(f64, Image)> {
    squared_error(pred_mask, gt_mask)
}

/// Foreground test used for binary masks.
pub fn is_foreground(v: f64) -> bool {
    v > 0.5
}

fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let qf = q as f64;
        loop {
            let vk = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + vk * vk)) / (2.0 * qf - 2.0 * vk);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    k = 0;
    for (q, out) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let dq = q as f64 - v[k] as f64;
        *out = dq * dq + f[v[k]];
    }
}

/// Squared Euclidean distance (pixels²) to the nearest foreground pixel.
pub fn edt_squared(mask: &Image) -> Result<Image> {
    if mask.channels != 1 {
        return Err(Error::shape("mask channels", 1, mask.channels));
    }
    let (w, h) = (mask.width, mask.height);
    if !mask.data.iter().any(|&v| is_foreground(v)) {
        return Err(Error::EmptyMask);
    }
    let big = 4.0 * ((w * w + h * h) as f64 + 1.0);
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|&v| if is_foreground(v) { 0.0 } else { big })
        .collect();
    let n = w.max(h);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    Image::from_data(w, h, 1, grid)
}

/// Euclidean distance (pixels) to the nearest foreground pixel.
pub fn edt(mask: &Image) -> Result<Image> {
    Ok(edt_squared(mask)?.map(f64::sqrt))
}

/// Target image of the soft-mask term.
pub fn soft_mask_target(gt_mask: &Image, config: &SoftMaskConfig) -> Result<Image> {
    let d2 = edt_squared(gt_mask)?;
    Ok(match config.mode {
        SoftMaskMode::Smoothed => {
            if !(config.tau > 0.0) {
                return Err(Error::Config(format!(
                    "soft-mask tau must be positive, got {}",
                    config.tau
                )));
            }
            let t2 = config.tau * config.tau;
            d2.map(|v| (-v / t2).exp())
        }
        SoftMaskMode::Literal => d2,
    })
}

pub fn soft_mask_loss(
    pred_mask: &Image,
    gt_mask: &Image,
    config: &SoftMaskConfig,
) -> Result<(f64, Image)> {
    squared_error(pred_mask, &soft_mask_target(gt_mask, config)?)
}

/// `‖(pred - gt) ⊗ mask‖²` on encoded normal images.
pub fn normal_loss(pred: &Image, gt: &Image, mask: Option<&Image>) -> Result<(f64, Image)> {
    check(pred, gt, "normal target")?;
    if let Some(m) = mask {
        check_mask(pred, m)?;
    }
    let c = pred.channels;
    let mut cot = Image::new(pred.width, pred.height, c);
    let mut loss = 0.0;
    for p in 0..pred.pixel_count() {
        let m = mask.map_or(1.0, |m| m.data[p]);
        for ch in 0..c {
            let i = p * c + ch;
            let d = (pred.data[i] - gt.data[i]) * m;
            loss += d * d;
            cot.data[i] = 2.0 * d * m;
        }
    }
    Ok((loss, cot))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Valid-region separable correlation of one plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + SSIM_WINDOW];
            tmp[y * ow + x] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                s += kv * tmp[(y + i) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint(g: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let gv = g[y * ow + x];
            for (i, kv) in k.iter().enumerate() {
                tmp[(y + i) * ow + x] += kv * gv;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let gv = tmp[y * ow + x];
            for (j, kv) in k.iter().enumerate() {
                out[y * w + x + j] += kv * gv;
            }
        }
    }
    out
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check(a, b, "SSIM operand")?;
    let (w, h, c) = (a.width, a.height, a.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let k = gaussian_window();
    let nvalid = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW) * c) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, c));
    for ch in 0..c {
        let pa: Vec<f64> = a.data.iter().skip(ch).step_by(c).copied().collect();
        let pb: Vec<f64> = b.data.iter().skip(ch).step_by(c).copied().collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        let n = mu_a.len();
        let mut g_mu = vec![0.0; n];
        let mut g_p = vec![0.0; n];
        let mut g_q = vec![0.0; n];
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = ma * ma + mb * mb + SSIM_C1;
            let a2 = va + vb + SSIM_C2;
            let b1 = 2.0 * ma * mb + SSIM_C1;
            let b2 = 2.0 * cov + SSIM_C2;
            let s = (b1 * b2) / (a1 * a2);
            total += s;
            if want_grad {
                let scale = 1.0 / nvalid;
                g_mu[i] =
                    scale * s * (2.0 * mb / b1 - 2.0 * mb / b2 - 2.0 * ma / a1 + 2.0 * ma / a2);
                g_p[i] = -scale * s / a2;
                g_q[i] = scale * 2.0 * s / b2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let m = filter_valid_adjoint(&g_mu, w, h, &k);
            let p = filter_valid_adjoint(&g_p, w, h, &k);
            let q = filter_valid_adjoint(&g_q, w, h, &k);
            for i in 0..w * h {
                g.data[i * c + ch] = m[i] + 2.0 * pa[i] * p[i] + pb[i] * q[i];
            }
        }
    }
    Ok((total / nvalid, grad))
}

/// Mean local SSIM over valid 11×11 Gaussian windows, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_vjp(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    Ok((s, g.expect("gradient requested")))
}

/// Images produced by the renderer for one frame. Missing entries were not rendered.
#[derive(Debug, Clone, Default)]
pub struct RenderedFrame {
    pub rgb: Option<Image>,
    pub alpha: Option<Image>,
    pub normals: Option<Image>,
}

#[derive(Debug, Clone, Default)]
pub struct FrameCotangents {
    pub rgb: Option<Image>,
    pub alpha: Option<Image>,
    pub normals: Option<Image>,
}

/// Per-term values (unweighted sums over frames for image terms).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub photo: f64,
    pub mask: f64,
    pub smask: f64,
    pub normal: f64,
    pub laplacian: f64,
    pub edge: f64,
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub terms: LossTerms,
    pub frames: Vec<FrameCotangents>,
    pub vertices: Vec<Vec3>,
}

fn scaled(img: Image, s: f64) -> Image {
    img.map(|v| v * s)
}

fn add_into(dst: &mut Option<Image>, src: Image) {
    match dst {
        Some(d) => {
            for (a, b) in d.data.iter_mut().zip(&src.data) {
                *a += b;
            }
        }
        None => *dst = Some(src),
    }
}

/// Weighted objective over frames plus mesh regularizers. `smask_targets[i]`
/// is the precomputed soft-mask target of frame `i` when that term is used.
pub fn total_loss(
    rendered: &[RenderedFrame],
    observations: &[&Observation],
    smask_targets: &[Option<&Image>],
    weights: &LossWeights,
    mesh: Option<&TriangleMesh>,
) -> Result<TotalLoss> {
    weights.validate()?;
    if rendered.len() != observations.len() || smask_targets.len() != observations.len() {
        return Err(Error::shape(
            "rendered frames",
            observations.len(),
            rendered.len(),
        ));
    }
    let mut terms = LossTerms::default();
    let mut value = 0.0;
    let mut frames = Vec::with_capacity(rendered.len());
    for ((r, obs), smt) in rendered.iter().zip(observations).zip(smask_targets) {
        let fw = obs.weight;
        let mut fc = FrameCotangents::default();
        if weights.photo > 0.0 {
            if let Some(rgb) = &r.rgb {
                let (l, g) = photometric_l1(rgb, &obs.rgb, obs.mask.as_ref())?;
                terms.photo += l;
                value += fw * weights.photo * l;
                add_into(&mut fc.rgb, scaled(g, fw * weights.photo));
            }
        }
        if let (Some(alpha), Some(gt)) = (&r.alpha, &obs.mask) {
            if weights.mask > 0.0 {
                let (l, g) = mask_l2(alpha, gt)?;
                terms.mask += l;
                value += fw * weights.mask * l;
                add_into(&mut fc.alpha, scaled(g, fw * weights.mask));
            }
            if weights.smask > 0.0 {
                if let Some(t) = smt {
                    let (l, g) = squared_error(alpha, t)?;
                    terms.smask += l;
                    value += fw * weights.smask * l;
                    add_into(&mut fc.alpha, scaled(g, fw * weights.smask));
                }
            }
        }
        if weights.normal > 0.0 {
            if let (Some(n), Some(gt)) = (&r.normals, &obs.normals) {
                let (l, g) = normal_loss(n, gt, obs.mask.as_ref())?;
                terms.normal += l;
                value += fw * weights.normal * l;
                add_into(&mut fc.normals, scaled(g, fw * weights.normal));
            }
        }
        frames.push(fc);
    }
    let mut vertices = Vec::new();
    if let Some(mesh) = mesh {
        vertices = vec![Vec3::zeros(); mesh.vertex_count()];
        if weights.laplacian > 0.0 {
            let (l, g) = laplacian_loss(mesh)?;
            terms.laplacian = l;
            value += weights.laplacian * l;
            for (a, b) in vertices.iter_mut().zip(g) {
                *a += weights.laplacian * b;
            }
        }
        if weights.edge > 0.0 {
            let (l, g) = edge_length_loss(mesh)?;
            terms.edge = l;
            value += weights.edge * l;
            for (a, b) in vertices.iter_mut().zip(g) {
                *a += weights.edge * b;
            }
        }
    }
    Ok(TotalLoss {
        value,
        terms,
        frames,
        vertices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, c: usize, f: impl Fn(usize) -> f64) -> Image {
        Image::from_data(w, h, c, (0..w * h * c).map(f).collect()).unwrap()
    }

    #[test]
    fn photometric_examples() {
        let gt = img(4, 3, 3, |i| (i % 7) as f64 / 7.0);
        let mask = img(4, 3, 1, |i| (i % 2) as f64);
        let target = gt.masked(&mask).unwrap();
        assert_eq!(photometric_l1(&target, &gt, Some(&mask)).unwrap().0, 0.0);
        let ones = Image::filled(4, 3, 3, 1.0);
        let zero = Image::new(4, 3, 3);
        let (l, g) = photometric_l1(&ones, &zero, None).unwrap();
        assert_eq!(l, 1.0);
        assert!(g.data.iter().all(|&v| v == 1.0 / 36.0));
    }

    #[test]
    fn mask_examples() {
        let a = img(3, 3, 1, |_| 0.0);
        let mut b = a.clone();
        assert_eq!(mask_l2(&a, &b).unwrap().0, 0.0);
        b.data[4] = 1.0;
        let (l, g) = mask_l2(&a, &b).unwrap();
        assert_eq!(l, 1.0);
        assert_eq!(g.data[4], -2.0);
    }

    #[test]
    fn edt_examples() {
        let all = Image::filled(5, 4, 1, 1.0);
        assert!(edt(&all).unwrap().data.iter().all(|&v| v == 0.0));
        let mut m = Image::new(3, 3, 1);
        m.data[4] = 1.0;
        let d = edt(&m).unwrap();
        let r2 = 2f64.sqrt();
        assert_eq!(d.data, vec![r2, 1.0, r2, 1.0, 0.0, 1.0, r2, 1.0, r2]);
        assert!(matches!(edt(&Image::new(3, 3, 1)), Err(Error::EmptyMask)));
    }

    #[test]
    fn soft_mask_examples() {
        let mut m = Image::new(40, 1, 1);
        m.data[0] = 1.0;
        let cfg = SoftMaskConfig {
            mode: SoftMaskMode::Smoothed,
            tau: 10.0,
        };
        let t = soft_mask_target(&m, &cfg).unwrap();
        assert_eq!(t.data[0], 1.0);
        assert!((t.data[10] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(soft_mask_loss(&t, &m, &cfg).unwrap().0, 0.0);
        let lit = soft_mask_target(
            &m,
            &SoftMaskConfig {
                mode: SoftMaskMode::Literal,
                tau: 10.0,
            },
        )
        .unwrap();
        assert_eq!(lit.data[7], 49.0);
    }

    #[test]
    fn normal_examples() {
        let a = Image::filled(2, 2, 3, 1.0);
        let b = Image::new(2, 2, 3);
        assert_eq!(normal_loss(&a, &a, None).unwrap().0, 0.0);
        // encoded +n vs -n differs by 1 per channel
        let mut m = Image::new(2, 2, 1);
        m.data[0] = 1.0;
        assert_eq!(normal_loss(&a, &b, Some(&m)).unwrap().0, 3.0);
    }

    #[test]
    fn ssim_examples() {
        let a = img(16, 14, 3, |i| ((i * 31) % 17) as f64 / 17.0);
        let b = img(16, 14, 3, |i| ((i * 13) % 11) as f64 / 11.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let ca = Image::filled(12, 12, 1, 0.2);
        let cb = Image::filled(12, 12, 1, 0.8);
        let expected = (2.0 * 0.2 * 0.8 + 1e-4) / (0.04 + 0.64 + 1e-4);
        assert!((ssim(&ca, &cb).unwrap() - expected).abs() < 1e-9);
        assert!(matches!(
            ssim(&Image::new(10, 20, 1), &Image::new(10, 20, 1)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn weights_default_and_validation() {
        let w = LossWeights::default();
        assert_eq!(
            (w.photo, w.mask, w.smask, w.normal, w.laplacian),
            (1.0, 10.0, 1e-2, 3.0, 3.0)
        );
        let bad = LossWeights { mask: -1.0, ..w };
        assert!(bad.validate().is_err());
    }
}
