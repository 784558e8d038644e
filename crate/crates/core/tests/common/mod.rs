#![allow(dead_code)]

use meshsplat::raster::Camera;
use meshsplat::sh;
use meshsplat::so3::{self, Vec3};
use meshsplat::splatmesh::WorldGaussians;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn camera(w: usize, h: usize) -> Camera {
    Camera::look_at(
        Vec3::new(0.3, -0.2, -2.0),
        Vec3::zeros(),
        Vec3::new(0.0, -1.0, 0.0),
        0.6,
        w,
        h,
    )
    .unwrap()
}

pub fn gaussians(n: usize, degree: u8, seed: u64) -> WorldGaussians {
    let mut rng = rng(seed);
    let k = sh::coeff_len(degree);
    let mut g = WorldGaussians::empty(degree);
    for _ in 0..n {
        g.means.push(Vec3::new(
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.2..0.2),
        ));
        let axis = Vec3::new(
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
            rng.random_range(-2.0..2.0),
        );
        g.rotations.push(so3::exp(&axis));
        g.scales.push(Vec3::new(
            rng.random_range(0.03..0.09),
            rng.random_range(0.03..0.09),
            rng.random_range(0.005..0.05),
        ));
        for _ in 0..k {
            g.sh_coeffs.push(rng.random_range(-0.8..0.8));
        }
        g.opacities.push(rng.random_range(0.3..0.9));
    }
    g
}

pub fn random_vec(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// `|num - ana| / |num|` over a whole parameter group.
pub fn rel_err(num: &[f64], ana: &[f64]) -> f64 {
    assert_eq!(num.len(), ana.len());
    let d: f64 = num
        .iter()
        .zip(ana)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let n: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
    d / n.max(1e-30)
}

/// Central difference of `f` around `x` along each coordinate.
pub fn central_diff(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            p[i] = x[i] + h;
            let fp = f(&p);
            p[i] = x[i] - h;
            let fm = f(&p);
            p[i] = x[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}
