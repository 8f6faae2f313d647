use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mvreg::imaging::{make_phantom, PhantomKind};
use mvreg::objective::ncc;
use mvreg::projector::{attenuate, pa_pose, pixel_ray, render, render_at_twist, DetectorGeometry, Ray, RenderMode};
use mvreg::se3::Twist;
use mvreg::Volume;

/// Random positive voxels on an anisotropic grid centered on the origin.
fn noise_volume() -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let dims = [12, 9, 15];
    let spacing = Vector3::new(1.5, 2.0, 1.2);
    let origin = -Vector3::new(18.0, 18.0, 18.0) * 0.5;
    let data = (0..dims.iter().product()).map(|_| rng.gen_range(0.5..1.0)).collect();
    Volume::new(dims, spacing, origin, data).unwrap()
}

fn march(ray: &Ray, vol: &Volume, step: f64) -> f64 {
    let n = (ray.length() / step).ceil() as usize;
    let h = ray.length() / n as f64;
    (0..n)
        .map(|k| vol.sample_nearest(&ray.at((k as f64 + 0.5) / n as f64)))
        .sum::<f64>()
        * h
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn siddon_matches_dense_march(
        dir in prop::array::uniform3(-1.0f64..1.0),
        offset in prop::array::uniform3(-4.0f64..4.0),
    ) {
        let d = Vector3::from(dir);
        prop_assume!(d.norm() > 0.2);
        let d = d.normalize();
        let through = Vector3::from(offset);
        let vol = noise_volume();
        let ray = Ray::new(through - d * 40.0, through + d * 40.0).unwrap();
        let oracle = march(&ray, &vol, 1.2 / 100.0);
        prop_assume!(oracle > 5.0);
        let siddon = attenuate(&ray, &vol);
        prop_assert!((siddon - oracle).abs() / oracle < 1e-3, "siddon {} oracle {}", siddon, oracle);
    }

    #[test]
    fn attenuation_is_linear_in_the_volume(k in 0.1f64..10.0, seed in 0u64..1000) {
        let vol = noise_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Vector3::new(rng.gen_range(-30.0..30.0), -40.0, rng.gen_range(-30.0..30.0));
        let ray = Ray::new(a, -a).unwrap();
        let scaled = attenuate(&ray, &vol.scaled(k).unwrap());
        prop_assert!((scaled - k * attenuate(&ray, &vol)).abs() <= 1e-12 * scaled.abs().max(1.0));
    }
}

fn sphere_volume() -> Volume {
    let dims = [40, 40, 40];
    let spacing = Vector3::new(1.0, 1.0, 1.0);
    Volume::from_fn(dims, spacing, -Vector3::new(20.0, 20.0, 20.0), |p| if p.norm() < 12.0 { 0.02 } else { 0.0 }).unwrap()
}

#[test]
fn centered_sphere_renders_mirror_symmetric() {
    let vol = sphere_volume();
    let geom = DetectorGeometry::centered(1000.0, 64, 64, 1.0).unwrap();
    let img = render(&vol, &geom, &pa_pose(800.0), RenderMode::Attenuation);
    let (w, h) = (img.width(), img.height());
    let mut worst: f64 = 0.0;
    for v in 0..h {
        for u in 0..w {
            let here = img.get(u, v);
            worst = worst.max((here - img.get(w - 1 - u, v)).abs());
            worst = worst.max((here - img.get(u, h - 1 - v)).abs());
        }
    }
    assert!(worst < 1e-6, "{worst}");
    assert!(img.get(w / 2, h / 2) > 0.0);
}

#[test]
fn render_is_attenuate_per_pixel() {
    let (vol, _) = make_phantom(PhantomKind::PelvisLike, [32, 32, 32], Vector3::new(2.0, 2.0, 2.0), 5).unwrap();
    let geom = DetectorGeometry::centered(1000.0, 48, 40, 3.0).unwrap();
    let pose = mvreg::se3::compose(&mvreg::se3::exp(&Twist::from_array([3.0, -2.0, 5.0, 0.05, -0.1, 0.2])).unwrap(), &pa_pose(700.0));
    let img = render(&vol, &geom, &pose, RenderMode::Attenuation);
    for v in 0..geom.detector_height() {
        for u in 0..geom.detector_width() {
            let ray = pixel_ray(&geom, &pose, u as f64, v as f64).unwrap();
            assert_eq!(img.get(u, v).to_bits(), attenuate(&ray, &vol).to_bits(), "pixel ({u}, {v})");
        }
    }
}

#[test]
fn ten_degree_twist_is_observable() {
    let (vol, _) = make_phantom(PhantomKind::SpherePair, [64, 64, 64], Vector3::new(1.0, 1.0, 1.0), 0).unwrap();
    let geom = DetectorGeometry::centered(1000.0, 128, 128, 1.0).unwrap();
    let base = pa_pose(800.0);
    let a = render(&vol, &geom, &base, RenderMode::Intensity);
    for axis in 0..3 {
        let mut t = [0.0; 6];
        t[3 + axis] = 10f64.to_radians();
        let b = render_at_twist(&vol, &geom, &base, &Twist::from_array(t), RenderMode::Intensity).unwrap();
        assert!(ncc(&a, &b).unwrap() < 0.999, "axis {axis}");
    }
}

#[test]
fn small_twist_changes_image_slightly() {
    let (vol, _) = make_phantom(PhantomKind::PelvisLike, [64, 64, 64], Vector3::new(1.0, 1.0, 1.0), 0).unwrap();
    let geom = DetectorGeometry::centered(1000.0, 128, 128, 1.0).unwrap();
    let base = pa_pose(800.0);
    let a = render(&vol, &geom, &base, RenderMode::Intensity);
    let delta = Twist::from_array([1.0, -1.0, 1.0, 1.0, 1.0, -1.0]).scale(1e-3 / 6f64.sqrt());
    let b = render_at_twist(&vol, &geom, &base, &delta, RenderMode::Intensity).unwrap();
    let score = ncc(&a, &b).unwrap();
    assert!(score < 1.0 && score > 0.99, "{score}");
}

#[test]
fn shifting_volume_and_camera_together_changes_nothing() {
    let (vol, _) = make_phantom(PhantomKind::NestedBoxes, [32, 32, 32], Vector3::new(1.0, 1.0, 1.0), 2).unwrap();
    let geom = DetectorGeometry::centered(1000.0, 48, 48, 1.5).unwrap();
    let pose = pa_pose(800.0);
    let shift = Vector3::new(12.5, -30.25, 7.0);
    let moved = vol.with_origin(vol.origin() + shift);
    let moved_pose = mvreg::Pose::from_translation(shift) * pose;
    let a = render(&vol, &geom, &pose, RenderMode::Attenuation);
    let b = render(&moved, &geom, &moved_pose, RenderMode::Attenuation);
    let worst = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(worst < 1e-9, "{worst}");
}
