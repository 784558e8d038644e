//! Gaussians bound to mesh faces.
//!
//! Each Gaussian lives on one face. Its mean is a softmax-weighted blend of
//! the face vertices, its frame is the face's tangent frame, and its extent
//! along the face normal is clamped to [`SURFEL_EPSILON`] (unless the clamp is
//! disabled for ablations, in which case a third log-scale is learned).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{TriangleMesh, DEGENERATE_AREA};
use crate::ply::{Element, Format, PlyFile, Property, Scalar, Value};
use crate::sh;
use crate::so3::{self, Mat3, Vec3};

/// Normal-direction standard deviation of a surfel (m), float32 machine epsilon.
pub const SURFEL_EPSILON: f64 = 1.2e-7;

/// Logit written to splat files for Gaussians whose opacity is fixed at 1.
pub const OPACITY_ONE_LOGIT: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfelSet {
    pub face_id: Vec<u32>,
    /// Three unconstrained logits per Gaussian.
    pub bary_logits: Vec<f64>,
    /// `(ln s_u, ln s_v)` per Gaussian.
    pub tangent_log_scales: Vec<f64>,
    /// Learned normal-direction log-scale; `None` means the surfel clamp is on.
    pub normal_log_scales: Option<Vec<f64>>,
    pub sh_degree: u8,
    /// `sh::coeff_len(sh_degree)` values per Gaussian.
    pub sh_coeffs: Vec<f64>,
    /// `None` when opacity is fixed at 1.
    pub opacity_logits: Option<Vec<f64>>,
}

/// Initial values for a fresh [`SurfelSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelInit {
    pub sh_degree: u8,
    /// `None` fixes opacity at 1.
    pub opacity: Option<f64>,
    /// Tangent std relative to `sqrt(face area / gaussians on face)`.
    pub scale_factor: f64,
    pub surfel_clamp: bool,
    pub color: [f64; 3],
}

impl Default for SurfelInit {
    fn default() -> Self {
        Self {
            sh_degree: 0,
            opacity: Some(0.9),
            scale_factor: 1.0,
            surfel_clamp: true,
            color: [0.5; 3],
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn softmax3(l: &[f64]) -> [f64; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp(), (l[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

impl SurfelSet {
    /// Places `counts[f]` Gaussians on each face at uniformly random
    /// barycentric positions.
    pub fn initialize(
        mesh: &TriangleMesh,
        counts: &[u32],
        init: &SurfelInit,
        seed: u64,
    ) -> Result<Self> {
        if counts.len() != mesh.face_count() {
            return Err(Error::shape(
                "per-face counts",
                mesh.face_count(),
                counts.len(),
            ));
        }
        if init.sh_degree > sh::MAX_SH_DEGREE {
            return Err(Error::Bound {
                what: "SH degree",
                value: init.sh_degree.to_string(),
                allowed: "0..=3",
            });
        }
        let areas = mesh.face_areas();
        let total: usize = counts.iter().map(|&c| c as usize).sum();
        let ncoef = sh::coeff_len(init.sh_degree);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = SurfelSet {
            face_id: Vec::with_capacity(total),
            bary_logits: Vec::with_capacity(3 * total),
            tangent_log_scales: Vec::with_capacity(2 * total),
            normal_log_scales: (!init.surfel_clamp).then(|| Vec::with_capacity(total)),
            sh_degree: init.sh_degree,
            sh_coeffs: Vec::with_capacity(ncoef * total),
            opacity_logits: init.opacity.map(|_| Vec::with_capacity(total)),
        };
        for (f, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let ls = ((areas[f] / c as f64).sqrt() * init.scale_factor).ln();
            for _ in 0..c {
                let r1: f64 = rng.random();
                let r2: f64 = rng.random();
                let s = r1.sqrt();
                let w = [1.0 - s, s * (1.0 - r2), s * r2];
                set.face_id.push(f as u32);
                set.bary_logits.extend(w.iter().map(|x| x.max(1e-4).ln()));
                set.tangent_log_scales.extend([ls, ls]);
                if let Some(n) = set.normal_log_scales.as_mut() {
                    n.push(ls);
                }
                let mut coeffs = vec![0.0; ncoef];
                for ch in 0..3 {
                    coeffs[ch] = sh::rgb_to_dc(init.color[ch]);
                }
                set.sh_coeffs.extend(coeffs);
                if let (Some(o), Some(v)) = (init.opacity, set.opacity_logits.as_mut()) {
                    v.push(logit(o));
                }
            }
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.face_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.face_id.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        sh::coeff_len(self.sh_degree)
    }

    pub fn surfel_clamped(&self) -> bool {
        self.normal_log_scales.is_none()
    }

    pub fn barycentric_weights(&self, i: usize) -> [f64; 3] {
        softmax3(&self.bary_logits[3 * i..3 * i + 3])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        match &self.opacity_logits {
            Some(l) => sigmoid(l[i]),
            None => 1.0,
        }
    }

    pub fn validate(&self, mesh: &TriangleMesh) -> Result<()> {
        let n = self.len();
        let check = |what, got: usize, per: usize| {
            if got != n * per {
                Err(Error::shape(what, n * per, got))
            } else {
                Ok(())
            }
        };
        check("barycentric logits", self.bary_logits.len(), 3)?;
        check("tangent log-scales", self.tangent_log_scales.len(), 2)?;
        check(
            "SH coefficients",
            self.sh_coeffs.len(),
            self.coeffs_per_gaussian(),
        )?;
        if let Some(v) = &self.normal_log_scales {
            check("normal log-scales", v.len(), 1)?;
        }
        if let Some(v) = &self.opacity_logits {
            check("opacity logits", v.len(), 1)?;
        }
        if let Some(&f) = self
            .face_id
            .iter()
            .find(|&&f| f as usize >= mesh.face_count())
        {
            return Err(Error::Bound {
                what: "surfel face id",
                value: f.to_string(),
                allowed: "< face count",
            });
        }
        Ok(())
    }
}

/// World-space Gaussians, struct-of-arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGaussians {
    pub means: Vec<Vec3>,
    /// Columns: tangent u, tangent v, face normal.
    pub rotations: Vec<Mat3>,
    pub scales: Vec<Vec3>,
    pub sh_degree: u8,
    pub sh_coeffs: Vec<f64>,
    pub opacities: Vec<f64>,
}

/// Borrowed view of one Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct WorldGaussian<'a> {
    pub mean: &'a Vec3,
    pub rotation: &'a Mat3,
    pub scales: &'a Vec3,
    pub sh_coeffs: &'a [f64],
    pub opacity: f64,
}

impl WorldGaussians {
    pub fn empty(sh_degree: u8) -> Self {
        Self {
            means: Vec::new(),
            rotations: Vec::new(),
            scales: Vec::new(),
            sh_degree,
            sh_coeffs: Vec::new(),
            opacities: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn coeffs_per_gaussian(&self) -> usize {
        sh::coeff_len(self.sh_degree)
    }

    pub fn get(&self, i: usize) -> WorldGaussian<'_> {
        let k = self.coeffs_per_gaussian();
        WorldGaussian {
            mean: &self.means[i],
            rotation: &self.rotations[i],
            scales: &self.scales[i],
            sh_coeffs: &self.sh_coeffs[k * i..k * (i + 1)],
            opacity: self.opacities[i],
        }
    }

    pub fn covariance(&self, i: usize) -> Mat3 {
        let r = &self.rotations[i];
        let s2 = self.scales[i].component_mul(&self.scales[i]);
        r * Mat3::from_diagonal(&s2) * r.transpose()
    }

    /// Appends another set with the same SH degree.
    pub fn extend(&mut self, other: &WorldGaussians) {
        assert_eq!(self.sh_degree, other.sh_degree, "SH degree mismatch");
        self.means.extend_from_slice(&other.means);
        self.rotations.extend_from_slice(&other.rotations);
        self.scales.extend_from_slice(&other.scales);
        self.sh_coeffs.extend_from_slice(&other.sh_coeffs);
        self.opacities.extend_from_slice(&other.opacities);
    }

    pub fn transformed(&self, rotation: &Mat3, translation: &Vec3) -> Self {
        Self {
            means: self
                .means
                .iter()
                .map(|m| rotation * m + translation)
                .collect(),
            rotations: self.rotations.iter().map(|r| rotation * r).collect(),
            ..self.clone()
        }
    }
}

/// Cotangents on [`WorldGaussians`]; same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGaussianGrads {
    pub means: Vec<Vec3>,
    pub rotations: Vec<Mat3>,
    pub scales: Vec<Vec3>,
    pub sh_coeffs: Vec<f64>,
    pub opacities: Vec<f64>,
}

impl WorldGaussianGrads {
    pub fn zeros(n: usize, sh_degree: u8) -> Self {
        Self {
            means: vec![Vec3::zeros(); n],
            rotations: vec![Mat3::zeros(); n],
            scales: vec![Vec3::zeros(); n],
            sh_coeffs: vec![0.0; n * sh::coeff_len(sh_degree)],
            opacities: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    /// Sub-range `[start, start + n)` as an owned value.
    pub fn slice(&self, start: usize, n: usize) -> Self {
        let k = if self.means.is_empty() {
            0
        } else {
            self.sh_coeffs.len() / self.means.len()
        };
        Self {
            means: self.means[start..start + n].to_vec(),
            rotations: self.rotations[start..start + n].to_vec(),
            scales: self.scales[start..start + n].to_vec(),
            sh_coeffs: self.sh_coeffs[k * start..k * (start + n)].to_vec(),
            opacities: self.opacities[start..start + n].to_vec(),
        }
    }
}

/// Gradients with respect to the mesh vertices and every surfel parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfelGrads {
    pub vertices: Vec<Vec3>,
    pub bary_logits: Vec<f64>,
    pub tangent_log_scales: Vec<f64>,
    pub normal_log_scales: Option<Vec<f64>>,
    pub sh_coeffs: Vec<f64>,
    pub opacity_logits: Option<Vec<f64>>,
}

struct FaceFrame {
    u: Vec3,
    v: Vec3,
    n: Vec3,
    e1_len: f64,
    cross_len: f64,
}

fn face_frame(mesh: &TriangleMesh, f: usize) -> Result<FaceFrame> {
    let [v1, v2, v3] = mesh.face_vertices(f);
    let e1 = v2 - v1;
    let e2 = v3 - v1;
    let cross = e1.cross(&e2);
    let cross_len = cross.norm();
    let e1_len = e1.norm();
    if cross_len <= DEGENERATE_AREA || e1_len <= 0.0 || !cross_len.is_finite() {
        return Err(Error::DegenerateFace { face: f });
    }
    let u = e1 / e1_len;
    let n = cross / cross_len;
    Ok(FaceFrame {
        u,
        v: n.cross(&u),
        n,
        e1_len,
        cross_len,
    })
}

fn used_faces(mesh: &TriangleMesh, surfels: &SurfelSet) -> Result<Vec<Option<FaceFrame>>> {
    let mut used = vec![false; mesh.face_count()];
    for &f in &surfels.face_id {
        used[f as usize] = true;
    }
    used.iter()
        .enumerate()
        .map(|(f, &u)| {
            if u {
                face_frame(mesh, f).map(Some)
            } else {
                Ok(None)
            }
        })
        .collect()
}

/// World-space Gaussians of a surfel set bound to `mesh`.
pub fn bind_to_world(mesh: &TriangleMesh, surfels: &SurfelSet) -> Result<WorldGaussians> {
    surfels.validate(mesh)?;
    let frames = used_faces(mesh, surfels)?;
    let n = surfels.len();
    let mut out = WorldGaussians {
        means: Vec::with_capacity(n),
        rotations: Vec::with_capacity(n),
        scales: Vec::with_capacity(n),
        sh_degree: surfels.sh_degree,
        sh_coeffs: surfels.sh_coeffs.clone(),
        opacities: Vec::with_capacity(n),
    };
    for i in 0..n {
        let f = surfels.face_id[i] as usize;
        let frame = frames[f].as_ref().expect("frame computed for used face");
        let [v1, v2, v3] = mesh.face_vertices(f);
        let w = surfels.barycentric_weights(i);
        out.means.push(w[0] * v1 + w[1] * v2 + w[2] * v3);
        out.rotations
            .push(Mat3::from_columns(&[frame.u, frame.v, frame.n]));
        let ls = &surfels.tangent_log_scales[2 * i..2 * i + 2];
        let sn = match &surfels.normal_log_scales {
            Some(v) => v[i].exp(),
            None => SURFEL_EPSILON,
        };
        out.scales.push(Vec3::new(ls[0].exp(), ls[1].exp(), sn));
        out.opacities.push(surfels.opacity(i));
    }
    Ok(out)
}

/// Vector-Jacobian product of [`bind_to_world`].
pub fn bind_to_world_vjp(
    mesh: &TriangleMesh,
    surfels: &SurfelSet,
    cot: &WorldGaussianGrads,
) -> Result<SurfelGrads> {
    surfels.validate(mesh)?;
    let n = surfels.len();
    if cot.means.len() != n
        || cot.rotations.len() != n
        || cot.scales.len() != n
        || cot.opacities.len() != n
    {
        return Err(Error::shape("Gaussian cotangents", n, cot.means.len()));
    }
    if cot.sh_coeffs.len() != surfels.sh_coeffs.len() {
        return Err(Error::shape(
            "SH cotangents",
            surfels.sh_coeffs.len(),
            cot.sh_coeffs.len(),
        ));
    }
    let frames = used_faces(mesh, surfels)?;
    let mut g_vertices = vec![Vec3::zeros(); mesh.vertex_count()];
    let mut g_logits = vec![0.0; 3 * n];
    let mut g_ls = vec![0.0; 2 * n];
    let mut g_nls = surfels.normal_log_scales.as_ref().map(|_| vec![0.0; n]);
    let mut g_op = surfels.opacity_logits.as_ref().map(|_| vec![0.0; n]);
    // frame cotangents accumulated per face: (u, v, n)
    let mut g_frame = vec![[Vec3::zeros(); 3]; mesh.face_count()];

    for i in 0..n {
        let f = surfels.face_id[i] as usize;
        let face = mesh.faces()[f];
        let [v1, v2, v3] = mesh.face_vertices(f);
        let w = surfels.barycentric_weights(i);
        let gm = cot.means[i];
        for (k, &vi) in face.iter().enumerate() {
            g_vertices[vi as usize] += w[k] * gm;
        }
        let gw = [gm.dot(&v1), gm.dot(&v2), gm.dot(&v3)];
        let dot = w[0] * gw[0] + w[1] * gw[1] + w[2] * gw[2];
        for k in 0..3 {
            g_logits[3 * i + k] = w[k] * (gw[k] - dot);
        }
        let gr = &cot.rotations[i];
        for c in 0..3 {
            g_frame[f][c] += gr.column(c);
        }
        let ls = &surfels.tangent_log_scales[2 * i..2 * i + 2];
        g_ls[2 * i] = cot.scales[i].x * ls[0].exp();
        g_ls[2 * i + 1] = cot.scales[i].y * ls[1].exp();
        if let (Some(g), Some(v)) = (g_nls.as_mut(), surfels.normal_log_scales.as_ref()) {
            g[i] = cot.scales[i].z * v[i].exp();
        }
        if let (Some(g), Some(l)) = (g_op.as_mut(), surfels.opacity_logits.as_ref()) {
            let o = sigmoid(l[i]);
            g[i] = cot.opacities[i] * o * (1.0 - o);
        }
    }

    for (f, frame) in frames.iter().enumerate() {
        let Some(fr) = frame else { continue };
        let [gu, gv, gn] = g_frame[f];
        // v = n x u
        let gn = gn + fr.u.cross(&gv);
        let gu = gu + gv.cross(&fr.n);
        let g_e1_dir = (gu - fr.u * fr.u.dot(&gu)) / fr.e1_len;
        let g_cross = (gn - fr.n * fr.n.dot(&gn)) / fr.cross_len;
        let [v1, v2, v3] = mesh.face_vertices(f);
        let e1 = v2 - v1;
        let e2 = v3 - v1;
        let g_e1 = g_e1_dir + e2.cross(&g_cross);
        let g_e2 = g_cross.cross(&e1);
        let [a, b, c] = mesh.faces()[f];
        g_vertices[a as usize] -= g_e1 + g_e2;
        g_vertices[b as usize] += g_e1;
        g_vertices[c as usize] += g_e2;
    }

    Ok(SurfelGrads {
        vertices: g_vertices,
        bary_logits: g_logits,
        tangent_log_scales: g_ls,
        normal_log_scales: g_nls,
        sh_coeffs: cot.sh_coeffs.clone(),
        opacity_logits: g_op,
    })
}

/// Writes Gaussians in the common splat interchange layout (binary PLY).
pub fn write_splat_ply(gaussians: &WorldGaussians, path: &Path) -> Result<()> {
    splat_ply(gaussians).write(path)
}

pub fn splat_ply(gaussians: &WorldGaussians) -> PlyFile {
    let nb = sh::basis_len(gaussians.sh_degree);
    let mut props = Vec::new();
    for name in [
        "x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2",
    ] {
        props.push(Property::scalar(name, Scalar::F32));
    }
    for k in 0..3 * (nb - 1) {
        props.push(Property::scalar(format!("f_rest_{k}"), Scalar::F32));
    }
    props.push(Property::scalar("opacity", Scalar::F32));
    for k in 0..3 {
        props.push(Property::scalar(format!("scale_{k}"), Scalar::F32));
    }
    for k in 0..4 {
        props.push(Property::scalar(format!("rot_{k}"), Scalar::F32));
    }
    let mut el = Element::new("vertex", props);
    for i in 0..gaussians.len() {
        let g = gaussians.get(i);
        let mut row = Vec::with_capacity(el.properties.len());
        let n = g.rotation.column(2);
        row.extend([g.mean.x, g.mean.y, g.mean.z, n.x, n.y, n.z]);
        row.extend(&g.sh_coeffs[..3]);
        // f_rest is channel-major
        for c in 0..3 {
            for k in 1..nb {
                row.push(g.sh_coeffs[3 * k + c]);
            }
        }
        row.push(if g.opacity >= 1.0 {
            OPACITY_ONE_LOGIT
        } else {
            logit(g.opacity)
        });
        row.extend(g.scales.iter().map(|s| s.ln()));
        row.extend(so3::to_quat_wxyz(g.rotation));
        el.rows.push(
            row.into_iter()
                .map(|v| Value::Scalar(v as f32 as f64))
                .collect(),
        );
    }
    let mut ply = PlyFile::new(Format::BinaryLittleEndian);
    ply.elements.push(el);
    ply
}

/// Reads a splat file written by [`write_splat_ply`] (or any file using the
/// same property names).
pub fn read_splat_ply(path: &Path) -> Result<WorldGaussians> {
    let ply = PlyFile::read(path)?;
    let el = ply
        .element("vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let col = |name: &str| {
        el.scalar_column(name)
            .ok_or_else(|| Error::format(path, format!("missing property {name}")))
    };
    let rest = el
        .properties
        .iter()
        .filter(|p| p.name.starts_with("f_rest_"))
        .count();
    let nb = rest / 3 + 1;
    let sh_degree = match nb {
        1 => 0,
        4 => 1,
        9 => 2,
        16 => 3,
        _ => {
            return Err(Error::format(
                path,
                format!("unsupported f_rest count {rest}"),
            ))
        }
    };
    let xyz = [col("x")?, col("y")?, col("z")?];
    let dc = [col("f_dc_0")?, col("f_dc_1")?, col("f_dc_2")?];
    let rest_cols: Vec<Vec<f64>> = (0..rest)
        .map(|k| col(&format!("f_rest_{k}")))
        .collect::<Result<_>>()?;
    let op = col("opacity")?;
    let sc = [col("scale_0")?, col("scale_1")?, col("scale_2")?];
    let rot = [col("rot_0")?, col("rot_1")?, col("rot_2")?, col("rot_3")?];
    let n = el.rows.len();
    let mut g = WorldGaussians::empty(sh_degree);
    for i in 0..n {
        g.means.push(Vec3::new(xyz[0][i], xyz[1][i], xyz[2][i]));
        g.rotations.push(so3::from_quat_wxyz([
            rot[0][i], rot[1][i], rot[2][i], rot[3][i],
        ]));
        g.scales
            .push(Vec3::new(sc[0][i].exp(), sc[1][i].exp(), sc[2][i].exp()));
        let mut coeffs = vec![0.0; 3 * nb];
        for c in 0..3 {
            coeffs[c] = dc[c][i];
            for k in 1..nb {
                coeffs[3 * k + c] = rest_cols[c * (nb - 1) + k - 1][i];
            }
        }
        g.sh_coeffs.extend(coeffs);
        g.opacities.push(sigmoid(op[i]));
    }
    Ok(g)
}
