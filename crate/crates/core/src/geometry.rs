//! Fixed-topology triangle meshes, their deformation parameters and the
//! geometric regularizers used during optimization.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::so3::Vec3;

/// Faces below this cross-product magnitude (twice the area, m²) are degenerate.
pub const DEGENERATE_AREA: f64 = 1e-12;

pub const MAX_ICOSPHERE_LEVEL: u32 = 6;

/// Connectivity shared by every deformed copy of a mesh.
#[derive(Debug, PartialEq, Eq)]
pub struct Topology {
    faces: Vec<[u32; 3]>,
    adjacency: Vec<Vec<u32>>,
    edges: Vec<[u32; 2]>,
    vertex_faces: Vec<Vec<u32>>,
}

impl Topology {
    fn build(vertex_count: usize, faces: Vec<[u32; 3]>) -> Result<Self> {
        let mut adjacency = vec![Vec::new(); vertex_count];
        let mut vertex_faces = vec![Vec::new(); vertex_count];
        for (f, face) in faces.iter().enumerate() {
            for k in 0..3 {
                let a = face[k];
                let b = face[(k + 1) % 3];
                if a as usize >= vertex_count {
                    return Err(Error::Bound {
                        what: "face vertex index",
                        value: a.to_string(),
                        allowed: "< vertex count",
                    });
                }
                if a == b {
                    return Err(Error::DegenerateFace { face: f });
                }
                adjacency[a as usize].push(b);
                adjacency[b as usize].push(a);
                vertex_faces[a as usize].push(f as u32);
            }
        }
        let mut edges = Vec::new();
        for (i, nbrs) in adjacency.iter_mut().enumerate() {
            nbrs.sort_unstable();
            nbrs.dedup();
            edges.extend(
                nbrs.iter()
                    .filter(|&&j| (j as usize) > i)
                    .map(|&j| [i as u32, j]),
            );
        }
        Ok(Self {
            faces,
            adjacency,
            edges,
            vertex_faces,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    vertices: Vec<Vec3>,
    topology: Arc<Topology>,
}

impl TriangleMesh {
    /// Builds a mesh, rejecting out-of-range indices and zero-area faces.
    pub fn new(vertices: Vec<Vec3>, faces: Vec<[u32; 3]>) -> Result<Self> {
        let topology = Topology::build(vertices.len(), faces)?;
        let mesh = Self {
            vertices,
            topology: Arc::new(topology),
        };
        mesh.face_normals()?;
        Ok(mesh)
    }

    /// Same connectivity, new vertex positions. No geometric validation.
    pub fn with_vertices(&self, vertices: Vec<Vec3>) -> Result<Self> {
        if vertices.len() != self.vertices.len() {
            return Err(Error::shape(
                "vertex list",
                self.vertices.len(),
                vertices.len(),
            ));
        }
        Ok(Self {
            vertices,
            topology: Arc::clone(&self.topology),
        })
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.topology.faces
    }

    /// Sorted edge-connected neighbours of each vertex.
    pub fn adjacency(&self) -> &[Vec<u32>] {
        &self.topology.adjacency
    }

    /// Unique undirected edges `[i, j]` with `i < j`.
    pub fn edges(&self) -> &[[u32; 2]] {
        &self.topology.edges
    }

    /// Faces incident to each vertex.
    pub fn vertex_faces(&self) -> &[Vec<u32>] {
        &self.topology.vertex_faces
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.topology.faces.len()
    }

    pub fn face_vertices(&self, f: usize) -> [Vec3; 3] {
        let [a, b, c] = self.topology.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }

    fn face_cross(&self, f: usize) -> Vec3 {
        let [v1, v2, v3] = self.face_vertices(f);
        (v2 - v1).cross(&(v3 - v1))
    }

    pub fn face_normals(&self) -> Result<Vec<Vec3>> {
        (0..self.face_count())
            .map(|f| {
                let n = self.face_cross(f);
                let norm = n.norm();
                if norm <= DEGENERATE_AREA || !norm.is_finite() {
                    Err(Error::DegenerateFace { face: f })
                } else {
                    Ok(n / norm)
                }
            })
            .collect()
    }

    pub fn face_areas(&self) -> Vec<f64> {
        (0..self.face_count())
            .map(|f| 0.5 * self.face_cross(f).norm())
            .collect()
    }

    pub fn surface_area(&self) -> f64 {
        self.face_areas().iter().sum()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for v in &self.vertices {
            lo = lo.inf(v);
            hi = hi.sup(v);
        }
        (lo, hi)
    }

    pub fn centroid(&self) -> Vec3 {
        let sum: Vec3 = self.vertices.iter().sum();
        sum / self.vertices.len().max(1) as f64
    }

    pub fn mean_edge_length(&self) -> f64 {
        let edges = self.edges();
        let total: f64 = edges
            .iter()
            .map(|&[i, j]| (self.vertices[i as usize] - self.vertices[j as usize]).norm())
            .sum();
        total / edges.len().max(1) as f64
    }

    pub fn transformed(&self, rotation: &crate::so3::Mat3, translation: &Vec3) -> Self {
        Self {
            vertices: self
                .vertices
                .iter()
                .map(|v| rotation * v + translation)
                .collect(),
            topology: Arc::clone(&self.topology),
        }
    }
}

/// Per-vertex offsets plus a global translation.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshDeformation {
    pub vertex_deltas: Vec<Vec3>,
    pub global_translation: Vec3,
}

impl MeshDeformation {
    pub fn zeros(vertex_count: usize) -> Self {
        Self {
            vertex_deltas: vec![Vec3::zeros(); vertex_count],
            global_translation: Vec3::zeros(),
        }
    }
}

pub fn apply_deformation(mesh: &TriangleMesh, d: &MeshDeformation) -> Result<TriangleMesh> {
    if d.vertex_deltas.len() != mesh.vertex_count() {
        return Err(Error::shape(
            "vertex deltas",
            mesh.vertex_count(),
            d.vertex_deltas.len(),
        ));
    }
    let vertices = mesh
        .vertices()
        .iter()
        .zip(&d.vertex_deltas)
        .map(|(v, dv)| v + dv + d.global_translation)
        .collect();
    mesh.with_vertices(vertices)
}

/// Icosahedron subdivided `subdivisions` times with midpoints projected
/// onto the sphere. Faces are wound counter-clockwise seen from outside.
pub fn make_icosphere(subdivisions: u32, radius: f64, center: Vec3) -> Result<TriangleMesh> {
    if subdivisions > MAX_ICOSPHERE_LEVEL {
        return Err(Error::Bound {
            what: "icosphere subdivisions",
            value: subdivisions.to_string(),
            allowed: "0..=6",
        });
    }
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vec3> = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ]
    .iter()
    .map(|&(x, y, z)| Vec3::new(x, y, z).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: HashMap<(u32, u32), u32> = HashMap::new();
        let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for &[a, b, c] in &faces {
            let ab = midpoint(a, b, &mut verts);
            let bc = midpoint(b, c, &mut verts);
            let ca = midpoint(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    let vertices = verts.into_iter().map(|v| center + v * radius).collect();
    TriangleMesh::new(vertices, faces)
}

/// Umbrella Laplacian energy `Σᵢ ‖vᵢ − mean_{j∈N(i)} vⱼ‖²` and its gradient.
pub fn laplacian_loss(mesh: &TriangleMesh) -> Result<(f64, Vec<Vec3>)> {
    let v = mesh.vertices();
    let adj = mesh.adjacency();
    let mut offsets = Vec::with_capacity(v.len());
    for (i, nbrs) in adj.iter().enumerate() {
        if nbrs.is_empty() {
            return Err(Error::Topology(format!("vertex {i} has no neighbours")));
        }
        let mean: Vec3 = nbrs.iter().map(|&j| v[j as usize]).sum::<Vec3>() / nbrs.len() as f64;
        offsets.push(v[i] - mean);
    }
    let loss = offsets.iter().map(|d| d.norm_squared()).sum();
    let mut grad: Vec<Vec3> = offsets.iter().map(|d| 2.0 * d).collect();
    for (i, nbrs) in adj.iter().enumerate() {
        let share = 2.0 * offsets[i] / nbrs.len() as f64;
        for &j in nbrs {
            grad[j as usize] -= share;
        }
    }
    Ok((loss, grad))
}

/// Squared deviation of each edge length from the current mean length.
pub fn edge_length_loss(mesh: &TriangleMesh) -> Result<(f64, Vec<Vec3>)> {
    edge_length_loss_raw(mesh.vertices(), mesh.edges())
}

pub(crate) fn edge_length_loss_raw(
    vertices: &[Vec3],
    edges: &[[u32; 2]],
) -> Result<(f64, Vec<Vec3>)> {
    if edges.is_empty() {
        return Err(Error::Topology("mesh has no edges".into()));
    }
    let lengths: Vec<f64> = edges
        .iter()
        .map(|&[i, j]| (vertices[i as usize] - vertices[j as usize]).norm())
        .collect();
    // The mean is held constant for the gradient; since Σ(ℓ − ē) = 0 this
    // coincides with the full derivative.
    let mean = lengths.iter().sum::<f64>() / lengths.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![Vec3::zeros(); vertices.len()];
    for (&[i, j], &len) in edges.iter().zip(&lengths) {
        let dev = len - mean;
        loss += dev * dev;
        if len > 0.0 {
            let g = 2.0 * dev * (vertices[i as usize] - vertices[j as usize]) / len;
            grad[i as usize] += g;
            grad[j as usize] -= g;
        }
    }
    Ok((loss, grad))
}

/// Expected Gaussian count of each face: proportional to face area with an
/// overall mean of `avg_per_face`.
pub fn expected_gaussian_counts(mesh: &TriangleMesh, avg_per_face: f64) -> Result<Vec<f64>> {
    if !(1.0..=64.0).contains(&avg_per_face) {
        return Err(Error::Bound {
            what: "average Gaussians per face",
            value: avg_per_face.to_string(),
            allowed: "[1, 64]",
        });
    }
    let areas = mesh.face_areas();
    let total: f64 = areas.iter().sum();
    if total <= DEGENERATE_AREA || !total.is_finite() {
        return Err(Error::Degenerate("mesh has zero total area".into()));
    }
    let scale = avg_per_face * areas.len() as f64 / total;
    Ok(areas
        .iter()
        .map(|a| {
            let e = a * scale;
            // snap float noise so equal-area meshes get exact integers
            if (e - e.round()).abs() < 1e-9 {
                e.round()
            } else {
                e
            }
        })
        .collect())
}

/// Stochastic rounding of the area-proportional expected counts. The draw for
/// face `f` comes from stream `f` of a ChaCha generator seeded with `seed`.
pub fn allocate_gaussians(mesh: &TriangleMesh, avg_per_face: f64, seed: u64) -> Result<Vec<u32>> {
    let expected = expected_gaussian_counts(mesh, avg_per_face)?;
    Ok(expected
        .iter()
        .enumerate()
        .map(|(f, &e)| {
            let base = e.floor();
            let frac = e - base;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64);
            let extra = if frac > 0.0 && rng.random::<f64>() < frac {
                1
            } else {
                0
            };
            base as u32 + extra
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::so3;
    use proptest::prelude::{prop_assert, proptest};

    fn tetrahedron() -> TriangleMesh {
        // circumradius 1
        let s = 1.0 / 3f64.sqrt();
        let v = vec![
            Vec3::new(s, s, s),
            Vec3::new(s, -s, -s),
            Vec3::new(-s, s, -s),
            Vec3::new(-s, -s, s),
        ];
        TriangleMesh::new(v, vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]).unwrap()
    }

    pub(crate) fn random_mesh(seed: u64, noise: f64) -> TriangleMesh {
        let sphere = make_icosphere(1, 1.0, Vec3::zeros()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = sphere
            .vertices()
            .iter()
            .map(|p| p + Vec3::from_fn(|_, _| rng.random_range(-noise..noise)))
            .collect();
        sphere.with_vertices(v).unwrap()
    }

    fn fd_check(mesh: &TriangleMesh, f: impl Fn(&TriangleMesh) -> Result<(f64, Vec<Vec3>)>) -> f64 {
        let (_, grad) = f(mesh).unwrap();
        let h = 1e-5;
        let mut num = Vec::new();
        let mut ana = Vec::new();
        for i in 0..mesh.vertex_count() {
            for k in 0..3 {
                let mut p = mesh.vertices().to_vec();
                p[i][k] += h;
                let lp = f(&mesh.with_vertices(p.clone()).unwrap()).unwrap().0;
                p[i][k] -= 2.0 * h;
                let lm = f(&mesh.with_vertices(p).unwrap()).unwrap().0;
                num.push((lp - lm) / (2.0 * h));
                ana.push(grad[i][k]);
            }
        }
        let diff: f64 = num
            .iter()
            .zip(&ana)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        diff / scale
    }

    #[test]
    fn icosphere_counts_and_radius() {
        let m = make_icosphere(3, 0.05, Vec3::new(0.1, 0.0, -0.2)).unwrap();
        assert_eq!(m.vertex_count(), 642);
        assert_eq!(m.face_count(), 1280);
        for v in m.vertices() {
            assert!(((v - Vec3::new(0.1, 0.0, -0.2)).norm() - 0.05).abs() < 1e-12);
        }
        let m0 = make_icosphere(0, 1.0, Vec3::zeros()).unwrap();
        assert_eq!((m0.vertex_count(), m0.face_count()), (12, 20));
        assert!(m0.vertices().iter().all(|v| (v.norm() - 1.0).abs() < 1e-12));
        assert!(make_icosphere(7, 1.0, Vec3::zeros()).is_err());
    }

    #[test]
    fn icosphere_is_closed_and_outward() {
        for level in 0..=4 {
            let m = make_icosphere(level, 1.0, Vec3::zeros()).unwrap();
            assert_eq!(m.vertex_count(), 10 * 4usize.pow(level) + 2);
            let euler = m.vertex_count() as i64 - m.edges().len() as i64 + m.face_count() as i64;
            assert_eq!(euler, 2);
            // every directed edge appears exactly once: closed and consistently wound
            let mut directed = std::collections::HashSet::new();
            for f in m.faces() {
                for k in 0..3 {
                    assert!(directed.insert((f[k], f[(k + 1) % 3])));
                }
            }
            for &(a, b) in &directed {
                assert!(directed.contains(&(b, a)));
            }
            let normals = m.face_normals().unwrap();
            for (f, n) in normals.iter().enumerate() {
                let [a, b, c] = m.face_vertices(f);
                assert!(n.dot(&((a + b + c) / 3.0)) > 0.0);
            }
        }
    }

    #[test]
    fn deformation_identity_translation_cancellation() {
        let m = make_icosphere(1, 1.0, Vec3::zeros()).unwrap();
        let zero = MeshDeformation::zeros(m.vertex_count());
        assert_eq!(apply_deformation(&m, &zero).unwrap(), m);

        let t = Vec3::new(0.3, -0.2, 1.0);
        let mut d = zero.clone();
        d.global_translation = t;
        let moved = apply_deformation(&m, &d).unwrap();
        for (a, b) in moved.vertices().iter().zip(m.vertices()) {
            assert_eq!(*a, b + t);
        }
        for (a, b) in moved
            .face_normals()
            .unwrap()
            .iter()
            .zip(m.face_normals().unwrap())
        {
            assert!((a - b).norm() < 1e-12);
        }
        assert!(Arc::ptr_eq(moved.topology(), m.topology()));

        d.vertex_deltas = vec![-t; m.vertex_count()];
        let back = apply_deformation(&m, &d).unwrap();
        for (a, b) in back.vertices().iter().zip(m.vertices()) {
            assert!((a - b).norm() < 1e-15);
        }

        let bad = MeshDeformation::zeros(3);
        assert!(matches!(
            apply_deformation(&m, &bad),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn face_normal_orientation_and_degeneracy() {
        let v = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
        ];
        let up = TriangleMesh::new(v.clone(), vec![[0, 1, 2]]).unwrap();
        assert!((up.face_normals().unwrap()[0] - Vec3::z()).norm() < 1e-15);
        let down = TriangleMesh::new(v.clone(), vec![[0, 2, 1]]).unwrap();
        assert!((down.face_normals().unwrap()[0] + Vec3::z()).norm() < 1e-15);

        let flat = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(2.0, 0.0, 0.0),
        ];
        let err = TriangleMesh::new(flat, vec![[0, 1, 2]]).unwrap_err();
        assert!(matches!(err, Error::DegenerateFace { face: 0 }));
    }

    #[test]
    fn face_normals_rotate_with_mesh() {
        let m = random_mesh(3, 0.1);
        let r = so3::exp(&Vec3::new(0.3, -1.1, 0.4));
        let rotated = m.transformed(&r, &Vec3::new(1.0, 2.0, 3.0));
        for (a, b) in rotated
            .face_normals()
            .unwrap()
            .iter()
            .zip(m.face_normals().unwrap())
        {
            assert!((a - r * b).norm() < 1e-9);
        }
    }

    #[test]
    fn laplacian_examples() {
        let coincident = tetrahedron()
            .with_vertices(vec![Vec3::new(1.0, 2.0, 3.0); 4])
            .unwrap();
        assert_eq!(laplacian_loss(&coincident).unwrap().0, 0.0);
        let (l, _) = laplacian_loss(&tetrahedron()).unwrap();
        assert!((l - 64.0 / 9.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn laplacian_rejects_isolated_vertex() {
        let v = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(5.0, 5.0, 5.0),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2]]).unwrap();
        assert!(matches!(laplacian_loss(&m), Err(Error::Topology(_))));
    }

    #[test]
    fn edge_loss_examples() {
        let v = vec![
            Vec3::zeros(),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(4.0, 0.0, 0.0),
        ];
        let (l, _) = edge_length_loss_raw(&v, &[[0, 1], [1, 2]]).unwrap();
        assert!((l - 2.0).abs() < 1e-15);

        // equilateral triangle: all edges equal
        let eq = TriangleMesh::new(
            vec![
                Vec3::zeros(),
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.5, 3f64.sqrt() / 2.0, 0.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        assert!(edge_length_loss(&eq).unwrap().0 < 1e-30);

        let m = random_mesh(5, 0.2);
        let l1 = edge_length_loss(&m).unwrap().0;
        let scaled = m
            .with_vertices(m.vertices().iter().map(|v| 3.0 * v).collect())
            .unwrap();
        let l3 = edge_length_loss(&scaled).unwrap().0;
        assert!((l3 - 9.0 * l1).abs() < 1e-10 * l3);
    }

    #[test]
    fn regularizer_gradients_match_finite_differences() {
        for seed in 0..4 {
            let m = random_mesh(seed, 0.2);
            assert!(fd_check(&m, laplacian_loss) < 1e-5);
            assert!(fd_check(&m, edge_length_loss) < 1e-5);
        }
        let big = {
            let s = make_icosphere(2, 1.0, Vec3::zeros()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let v = s
                .vertices()
                .iter()
                .map(|p| p * rng.random_range(0.8..1.2))
                .collect();
            s.with_vertices(v).unwrap()
        };
        assert!(big.vertex_count() <= 200);
        assert!(fd_check(&big, laplacian_loss) < 1e-5);
        assert!(fd_check(&big, edge_length_loss) < 1e-5);
    }

    #[test]
    fn allocation_equal_area_is_exact() {
        // regular octahedron: 8 congruent faces
        let v = vec![
            Vec3::x(),
            -Vec3::x(),
            Vec3::y(),
            -Vec3::y(),
            Vec3::z(),
            -Vec3::z(),
        ];
        let f = vec![
            [0, 2, 4],
            [2, 1, 4],
            [1, 3, 4],
            [3, 0, 4],
            [2, 0, 5],
            [1, 2, 5],
            [3, 1, 5],
            [0, 3, 5],
        ];
        let m = TriangleMesh::new(v, f).unwrap();
        for seed in 0..5 {
            assert_eq!(allocate_gaussians(&m, 12.0, seed).unwrap(), vec![12; 8]);
        }
        assert!(allocate_gaussians(&m, 0.5, 0).is_err());
        assert!(allocate_gaussians(&m, 65.0, 0).is_err());
    }

    #[test]
    fn allocation_monte_carlo_means() {
        // two faces with areas 1 and 3
        let v = vec![
            Vec3::zeros(),
            Vec3::new(2.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(12.0, 0.0, 0.0),
            Vec3::new(10.0, 3.0, 0.0),
        ];
        let m = TriangleMesh::new(v, vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        let expected = expected_gaussian_counts(&m, 2.0).unwrap();
        assert!((expected[0] - 1.0).abs() < 1e-12 && (expected[1] - 3.0).abs() < 1e-12);
        // non-integer expectation to exercise rounding: avg 2.3 -> 1.15 and 3.45
        let expected = expected_gaussian_counts(&m, 2.3).unwrap();
        let n = 100_000;
        let mut sums = [0u64; 2];
        for seed in 0..n {
            let c = allocate_gaussians(&m, 2.3, seed).unwrap();
            sums[0] += c[0] as u64;
            sums[1] += c[1] as u64;
        }
        for k in 0..2 {
            let mean = sums[k] as f64 / n as f64;
            assert!(
                (mean - expected[k]).abs() < 0.01 * expected[k],
                "{mean} vs {}",
                expected[k]
            );
        }
        assert_eq!(
            allocate_gaussians(&m, 2.3, 7).unwrap(),
            allocate_gaussians(&m, 2.3, 7).unwrap()
        );
    }

    proptest! {
        #[test]
        fn regularizers_translation_invariant(seed in 0u64..1000, tx in -5.0..5.0f64, ty in -5.0..5.0f64, tz in -5.0..5.0f64) {
            let m = random_mesh(seed, 0.2);
            let mut d = MeshDeformation::zeros(m.vertex_count());
            d.global_translation = Vec3::new(tx, ty, tz);
            let moved = apply_deformation(&m, &d).unwrap();
            let (a, _) = laplacian_loss(&m).unwrap();
            let (b, _) = laplacian_loss(&moved).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.max(1e-12));
            let (a, _) = edge_length_loss(&m).unwrap();
            let (b, _) = edge_length_loss(&moved).unwrap();
            prop_assert!((a - b).abs() <= 1e-8 * a.max(1e-12));
            prop_assert!(Arc::ptr_eq(moved.topology(), m.topology()));
        }
    }
}
