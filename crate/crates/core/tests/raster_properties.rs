mod common;

use meshsplat::raster::{render, Modality, RasterConfig};
use meshsplat::sh;
use meshsplat::so3::Vec3;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn compositing_weights_sum_to_one(seed in 0u64..10_000, n in 1usize..25) {
        let cam = common::camera(24, 20);
        let g = common::gaussians(n, 0, seed);
        let out = render(&g, &cam, Modality::Mask, [0.0; 3], &RasterConfig::default()).unwrap();
        for p in 0..cam.width * cam.height {
            let a = out.alpha.data[p];
            prop_assert!((0.0..=1.0).contains(&a));
            // mask color is Σ αT, alpha is 1 - T_final
            prop_assert!((out.color.data[3 * p] + (1.0 - a) - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn front_weight_grows_with_opacity(seed in 0u64..10_000, n in 2usize..12, bump in 0.0f64..0.5) {
        let cam = common::camera(24, 24);
        let mut g = common::gaussians(n, 0, seed);
        let front = (0..n)
            .min_by(|&a, &b| (cam.to_camera(&g.means[a]).z).total_cmp(&cam.to_camera(&g.means[b]).z))
            .unwrap();
        for i in 0..n {
            let rgb = if i == front { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 1.0] };
            g.sh_coeffs[3 * i..3 * i + 3].copy_from_slice(&rgb.map(sh::rgb_to_dc));
        }
        let cfg = RasterConfig::default();
        let a = render(&g, &cam, Modality::Rgb, [0.0; 3], &cfg).unwrap();
        g.opacities[front] = (g.opacities[front] + bump).min(1.0);
        let b = render(&g, &cam, Modality::Rgb, [0.0; 3], &cfg).unwrap();
        for p in 0..cam.width * cam.height {
            prop_assert!(b.color.data[3 * p] >= a.color.data[3 * p] - 1e-15);
        }
    }

    #[test]
    fn single_thread_renders_are_bit_identical(seed in 0u64..10_000) {
        let cam = common::camera(32, 32);
        let g = common::gaussians(15, 1, seed);
        let cfg = RasterConfig::default();
        let a = render(&g, &cam, Modality::Rgb, [0.3; 3], &cfg).unwrap();
        let b = render(&g, &cam, Modality::Rgb, [0.3; 3], &cfg).unwrap();
        prop_assert_eq!(a.color, b.color);
    }
}

#[test]
fn gaussians_behind_camera_are_counted() {
    let cam = common::camera(16, 16);
    let mut g = common::gaussians(3, 0, 1);
    g.means[0] = cam.center() - 5.0 * (Vec3::zeros() - cam.center()).normalize();
    let out = render(&g, &cam, Modality::Rgb, [0.0; 3], &RasterConfig::default()).unwrap();
    assert_eq!(out.stats.culled, 1);
}
