//! Datasets: synthetic generation, manifest IO and asset export.

pub mod scenes;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::TriangleMesh;
use crate::image::{BitDepth, Image};
use crate::kinematics::JointState;
use crate::ply::{Element, Format, PlyFile, Property, Scalar, Value};
use crate::raster::{render, Camera, Modality, RasterConfig};
use crate::sh::SH_C0;
use crate::so3::{Mat3, Vec3};
use crate::splatmesh::{bind_to_world, write_splat_ply, SurfelSet, WorldGaussians};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub name: String,
    /// Index into [`Dataset::cameras`].
    pub camera: usize,
    /// Camera mount in the kinematic chain, for robot datasets.
    pub mount: Option<usize>,
    /// Robot configuration index, for robot datasets.
    pub snapshot: Option<usize>,
    pub joints: Option<JointState>,
    pub rgb: Image,
    pub mask: Option<Image>,
    pub normals: Option<Image>,
}

impl Frame {
    /// Observed color composited over `background` with the mask, the image a
    /// camera would see. Equal to the straight RGB when there is no mask.
    pub fn composite(&self, background: [f64; 3]) -> Image {
        let Some(mask) = &self.mask else {
            return self.rgb.clone();
        };
        let mut out = self.rgb.clone();
        for (p, &a) in mask.data.iter().enumerate() {
            for (c, bg) in background.iter().enumerate() {
                let v = &mut out.data[3 * p + c];
                *v = *v * a + bg * (1.0 - a);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub cameras: Vec<Camera>,
    pub frames: Vec<Frame>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub background: [f64; 3],
    pub center: Vec3,
    pub extent: f64,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.frames.len();
        let train: BTreeSet<usize> = self.train.iter().copied().collect();
        let test: BTreeSet<usize> = self.test.iter().copied().collect();
        if train.len() != self.train.len() || test.len() != self.test.len() {
            return Err(Error::Dataset("split lists contain duplicates".into()));
        }
        if !train.is_disjoint(&test) {
            return Err(Error::Dataset("train and test splits overlap".into()));
        }
        if train.len() + test.len() != n || train.iter().chain(&test).any(|&i| i >= n) {
            return Err(Error::Dataset(
                "train and test splits must cover every frame exactly once".into(),
            ));
        }
        for f in &self.frames {
            let cam = self.cameras.get(f.camera).ok_or_else(|| {
                Error::Dataset(format!(
                    "frame {} references missing camera {}",
                    f.name, f.camera
                ))
            })?;
            let dims_ok = |img: &Image, ch: usize| {
                img.width == cam.width && img.height == cam.height && img.channels == ch
            };
            if !dims_ok(&f.rgb, 3)
                || f.mask.as_ref().is_some_and(|m| !dims_ok(m, 1))
                || f.normals.as_ref().is_some_and(|m| !dims_ok(m, 3))
            {
                return Err(Error::Dataset(format!(
                    "frame {} images do not match its camera",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// Copy with every image rounded to the precision it is stored at.
    pub fn quantized(&self) -> Dataset {
        let mut d = self.clone();
        for f in &mut d.frames {
            f.rgb = f.rgb.quantized(BitDepth::Eight);
            f.mask = f.mask.as_ref().map(|m| m.quantized(BitDepth::Eight));
            f.normals = f.normals.as_ref().map(|m| m.quantized(BitDepth::Sixteen));
        }
        d
    }
}

/// Settings for synthetic dataset generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_views: usize,
    pub resolution: usize,
    /// Vertical field of view in degrees.
    pub fov_deg: f64,
    /// Camera distance as a multiple of the scene extent.
    pub distance_factor: f64,
    pub train_fraction: f64,
    pub raster: RasterConfig,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_views: 50,
            resolution: 128,
            fov_deg: 30.0,
            distance_factor: 2.5,
            train_fraction: 0.8,
            raster: RasterConfig::default(),
        }
    }
}

/// Ground-truth object: a mesh with bound surfels.
#[derive(Debug, Clone, PartialEq)]
pub struct SplatAsset {
    pub mesh: TriangleMesh,
    pub surfels: SurfelSet,
}

impl SplatAsset {
    pub fn gaussians(&self) -> Result<WorldGaussians> {
        bind_to_world(&self.mesh, &self.surfels)
    }

    /// Center of the bounding box and its largest side.
    pub fn center_and_extent(&self) -> (Vec3, f64) {
        let (lo, hi) = self.mesh.bounds();
        ((lo + hi) / 2.0, (hi - lo).max())
    }
}

/// Divides a straight-color image out of a premultiplied render.
pub fn unpremultiply(color: &Image, alpha: &Image) -> Image {
    let mut out = color.clone();
    for p in 0..alpha.data.len() {
        let a = alpha.data[p];
        for c in 0..3 {
            let v = &mut out.data[3 * p + c];
            *v = if a > 0.0 {
                (*v / a).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
    out
}

/// Renders the RGB, mask and normal images of one camera. RGB is stored as
/// straight color so that `rgb ⊗ mask` equals the premultiplied render.
pub fn render_observation(
    gaussians: &WorldGaussians,
    cam: &Camera,
    raster: &RasterConfig,
) -> Result<(Image, Image, Image)> {
    let rgb = render(gaussians, cam, Modality::Rgb, [0.0; 3], raster)?;
    let normals = render(gaussians, cam, Modality::Normals, [0.0; 3], raster)?;
    Ok((
        unpremultiply(&rgb.color, &rgb.alpha),
        rgb.alpha,
        normals.color,
    ))
}

/// Cameras on the upper hemisphere around `center`, uniform in solid angle.
pub fn hemisphere_cameras(
    center: Vec3,
    extent: f64,
    config: &GenConfig,
    seed: u64,
) -> Result<Vec<Camera>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = config.distance_factor * extent;
    (0..config.n_views)
        .map(|_| {
            let z: f64 = rng.random_range(0.0..1.0);
            let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let eye = center + dist * Vec3::new(r * phi.cos(), r * phi.sin(), z);
            Camera::look_at(
                eye,
                center,
                Vec3::z(),
                config.fov_deg.to_radians(),
                config.resolution,
                config.resolution,
            )
        })
        .collect()
}

/// Seeded 80/20-style split of `n` frames.
pub fn split_frames(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5911);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * train_fraction).round() as usize;
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

pub fn generate_dataset(asset: &SplatAsset, config: &GenConfig, seed: u64) -> Result<Dataset> {
    if config.n_views < 2 {
        return Err(Error::Bound {
            what: "view count",
            value: config.n_views.to_string(),
            allowed: ">= 2",
        });
    }
    let gaussians = asset.gaussians()?;
    let (center, extent) = asset.center_and_extent();
    let cameras = hemisphere_cameras(center, extent, config, seed)?;
    let renders: Vec<(Image, Image, Image)> = cameras
        .par_iter()
        .map(|cam| render_observation(&gaussians, cam, &config.raster))
        .collect::<Result<_>>()?;
    let frames = renders
        .into_iter()
        .enumerate()
        .map(|(i, (rgb, mask, normals))| Frame {
            name: format!("view_{i:03}"),
            camera: i,
            mount: None,
            snapshot: None,
            joints: None,
            rgb,
            mask: Some(mask),
            normals: Some(normals),
        })
        .collect();
    let (train, test) = split_frames(config.n_views, config.train_fraction, seed);
    Ok(Dataset {
        cameras,
        frames,
        train,
        test,
        background: [0.0; 3],
        center,
        extent,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CameraDoc {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    /// Row-major world-to-camera rotation.
    rotation: [f64; 9],
    translation: [f64; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct FrameDoc {
    name: String,
    camera: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mount: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    snapshot: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<f64>>,
    rgb: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    normals: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    background: [f64; 3],
    center: [f64; 3],
    extent: f64,
    cameras: Vec<CameraDoc>,
    frames: Vec<FrameDoc>,
    train: Vec<usize>,
    test: Vec<usize>,
}

fn camera_doc(c: &Camera) -> CameraDoc {
    let r = &c.rotation;
    CameraDoc {
        fx: c.fx,
        fy: c.fy,
        cx: c.cx,
        cy: c.cy,
        width: c.width,
        height: c.height,
        rotation: [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
        ],
        translation: c.translation.into(),
    }
}

fn camera_from_doc(d: &CameraDoc) -> Result<Camera> {
    Camera::new(
        d.fx,
        d.fy,
        d.cx,
        d.cy,
        d.width,
        d.height,
        Mat3::from_row_slice(&d.rotation),
        Vec3::from(d.translation),
    )
}

fn manifest_of(ds: &Dataset) -> Manifest {
    Manifest {
        version: MANIFEST_VERSION,
        background: ds.background,
        center: ds.center.into(),
        extent: ds.extent,
        cameras: ds.cameras.iter().map(camera_doc).collect(),
        frames: ds
            .frames
            .iter()
            .map(|f| FrameDoc {
                name: f.name.clone(),
                camera: f.camera,
                mount: f.mount,
                snapshot: f.snapshot,
                joints: f.joints.as_ref().map(|j| j.angles.clone()),
                rgb: format!("rgb/{}.png", f.name),
                mask: f.mask.as_ref().map(|_| format!("mask/{}.png", f.name)),
                normals: f.normals.as_ref().map(|_| format!("normal/{}.png", f.name)),
            })
            .collect(),
        train: ds.train.clone(),
        test: ds.test.clone(),
    }
}

/// Manifest text exactly as [`save_dataset`] writes it.
pub fn manifest_json(ds: &Dataset) -> String {
    serde_json::to_string_pretty(&manifest_of(ds)).expect("manifest serializes") + "\n"
}

/// Writes `manifest.json` plus `rgb/`, `mask/`, `normal/` PNG directories.
/// RGB and masks are stored at 8 bits, normals at 16 bits.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    for sub in ["rgb", "mask", "normal"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    for f in &ds.frames {
        f.rgb
            .write_png(&dir.join(format!("rgb/{}.png", f.name)), BitDepth::Eight)?;
        if let Some(m) = &f.mask {
            m.write_png(&dir.join(format!("mask/{}.png", f.name)), BitDepth::Eight)?;
        }
        if let Some(n) = &f.normals {
            n.write_png(
                &dir.join(format!("normal/{}.png", f.name)),
                BitDepth::Sixteen,
            )?;
        }
    }
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest_json(ds)).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::format(&path, "manifest has no version field"))?;
    if version != MANIFEST_VERSION as u64 {
        return Err(Error::Version {
            found: version as u32,
            expected: MANIFEST_VERSION,
        });
    }
    let m: Manifest =
        serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))?;
    let cameras = m
        .cameras
        .iter()
        .map(camera_from_doc)
        .collect::<Result<Vec<_>>>()?;
    let read = |rel: &str| -> Result<Image> {
        let p: PathBuf = dir.join(rel);
        if !p.exists() {
            return Err(Error::Dataset(format!(
                "missing image file {}",
                p.display()
            )));
        }
        Image::read_png(&p)
    };
    let frames = m
        .frames
        .iter()
        .map(|f| {
            Ok(Frame {
                name: f.name.clone(),
                camera: f.camera,
                mount: f.mount,
                snapshot: f.snapshot,
                joints: f.joints.clone().map(|angles| JointState { angles }),
                rgb: read(&f.rgb)?,
                mask: f.mask.as_deref().map(read).transpose()?,
                normals: f.normals.as_deref().map(read).transpose()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset {
        cameras,
        frames,
        train: m.train,
        test: m.test,
        background: m.background,
        center: Vec3::from(m.center),
        extent: m.extent,
    };
    ds.validate()?;
    Ok(ds)
}

/// Per-vertex colors from the degree-0 colors of Gaussians on incident faces.
#[derive(Debug, Clone, PartialEq)]
pub struct BakedColors {
    pub colors: Vec<[f64; 3]>,
    /// Vertices without any incident Gaussian (given mid-gray).
    pub fallback: usize,
}

pub fn bake_vertex_colors(mesh: &TriangleMesh, surfels: &SurfelSet) -> Result<BakedColors> {
    let g = bind_to_world(mesh, surfels)?;
    let k = g.coeffs_per_gaussian();
    let mut by_face: Vec<Vec<usize>> = vec![Vec::new(); mesh.face_count()];
    for (i, &f) in surfels.face_id.iter().enumerate() {
        by_face[f as usize].push(i);
    }
    let verts = mesh.vertices();
    let mut colors = Vec::with_capacity(verts.len());
    let mut fallback = 0;
    for (v, faces) in mesh.vertex_faces().iter().enumerate() {
        let nbrs = &mesh.adjacency()[v];
        let h = if nbrs.is_empty() {
            1.0
        } else {
            nbrs.iter()
                .map(|&j| (verts[j as usize] - verts[v]).norm())
                .sum::<f64>()
                / nbrs.len() as f64
        };
        let mut wsum = 0.0;
        let mut acc = [0.0; 3];
        let mut any = false;
        for &f in faces {
            for &i in &by_face[f as usize] {
                any = true;
                let d2 = (g.means[i] - verts[v]).norm_squared();
                let w = g.opacities[i] * (-d2 / (h * h)).exp();
                let c = &g.sh_coeffs[k * i..k * i + 3];
                for ch in 0..3 {
                    acc[ch] += w * (SH_C0 * c[ch] + 0.5).clamp(0.0, 1.0);
                }
                wsum += w;
            }
        }
        if !any || !(wsum > 0.0) {
            fallback += 1;
            colors.push([0.5; 3]);
        } else {
            colors.push(acc.map(|a| a / wsum));
        }
    }
    Ok(BakedColors { colors, fallback })
}

/// Mesh PLY (float positions, 8-bit colors, triangle faces).
pub fn mesh_ply(mesh: &TriangleMesh, colors: Option<&[[f64; 3]]>) -> PlyFile {
    let mut props = vec![
        Property::scalar("x", Scalar::F32),
        Property::scalar("y", Scalar::F32),
        Property::scalar("z", Scalar::F32),
    ];
    if colors.is_some() {
        for c in ["red", "green", "blue"] {
            props.push(Property::scalar(c, Scalar::U8));
        }
    }
    let mut v = Element::new("vertex", props);
    for (i, p) in mesh.vertices().iter().enumerate() {
        let mut row: Vec<Value> = p.iter().map(|&x| Value::Scalar(x as f32 as f64)).collect();
        if let Some(c) = colors {
            row.extend(
                c[i].iter()
                    .map(|&x| Value::Scalar((x.clamp(0.0, 1.0) * 255.0).round())),
            );
        }
        v.rows.push(row);
    }
    let mut f = Element::new(
        "face",
        vec![Property::list("vertex_indices", Scalar::U8, Scalar::I32)],
    );
    for face in mesh.faces() {
        f.rows
            .push(vec![Value::List(face.iter().map(|&i| i as f64).collect())]);
    }
    let mut ply = PlyFile::new(Format::BinaryLittleEndian);
    ply.comments
        .push("vertex colors baked from surface Gaussians".into());
    ply.elements = vec![v, f];
    ply
}

pub fn write_mesh_ply(mesh: &TriangleMesh, colors: Option<&[[f64; 3]]>, path: &Path) -> Result<()> {
    mesh_ply(mesh, colors).write(path)
}

pub fn read_mesh_ply(path: &Path) -> Result<TriangleMesh> {
    let ply = PlyFile::read(path)?;
    let v = ply
        .element("vertex")
        .ok_or_else(|| Error::format(path, "no vertex element"))?;
    let f = ply
        .element("face")
        .ok_or_else(|| Error::format(path, "no face element"))?;
    let col = |n: &str| {
        v.scalar_column(n)
            .ok_or_else(|| Error::format(path, format!("missing {n}")))
    };
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let vertices = (0..x.len()).map(|i| Vec3::new(x[i], y[i], z[i])).collect();
    let fi = f
        .property_index("vertex_indices")
        .ok_or_else(|| Error::format(path, "missing vertex_indices"))?;
    let faces = f
        .rows
        .iter()
        .map(|r| match r[fi].as_list() {
            Some([a, b, c]) => Ok([*a as u32, *b as u32, *c as u32]),
            _ => Err(Error::format(path, "only triangle faces are supported")),
        })
        .collect::<Result<Vec<_>>>()?;
    TriangleMesh::new(vertices, faces)
}

/// Files written by [`export_asset`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExportedAsset {
    pub mesh: PathBuf,
    pub splats: PathBuf,
    pub metadata: PathBuf,
    pub fallback_vertices: usize,
}

pub fn export_asset(mesh: &TriangleMesh, surfels: &SurfelSet, dir: &Path) -> Result<ExportedAsset> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let baked = bake_vertex_colors(mesh, surfels)?;
    let mesh_path = dir.join("mesh.ply");
    write_mesh_ply(mesh, Some(&baked.colors), &mesh_path)?;
    let splat_path = dir.join("splats.ply");
    write_splat_ply(&bind_to_world(mesh, surfels)?, &splat_path)?;
    let meta_path = dir.join("asset.json");
    let meta = serde_json::json!({
        "mesh": "mesh.ply",
        "splats": "splats.ply",
        "vertex_colors": "per-vertex bake of degree-0 Gaussian colors (no UV texture)",
        "gaussians": surfels.len(),
        "fallback_vertices": baked.fallback,
    });
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(ExportedAsset {
        mesh: mesh_path,
        splats: splat_path,
        metadata: meta_path,
        fallback_vertices: baked.fallback,
    })
}
