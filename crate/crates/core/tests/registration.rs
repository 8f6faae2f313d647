use nalgebra::Vector3;

use mvreg::evaluation::mtre;
use mvreg::imaging::{make_phantom, normalize_image, LandmarkSet, PhantomKind};
use mvreg::objective::{cross_loss, local_loss, ncc, total_loss, LossWeights, ViewPair};
use mvreg::pipeline::lateral_transform;
use mvreg::projector::{pa_pose, render, DetectorGeometry, RenderMode};
use mvreg::register::{
    fine_register, fine_register_coupled, init_fixed_offset, init_perturbed, multistart_candidates,
    select_best_candidate, RefineConfig,
};
use mvreg::se3::{self, Pose, Twist, TwistDistribution};
use mvreg::{Image, Volume};

fn scene() -> (Volume, DetectorGeometry) {
    let (vol, _) = make_phantom(PhantomKind::SpherePair, [32, 32, 32], Vector3::new(2.0, 2.0, 2.0), 0).unwrap();
    (vol, DetectorGeometry::centered(1000.0, 64, 64, 2.0).unwrap())
}

fn shot(vol: &Volume, geom: &DetectorGeometry, pose: &Pose) -> Image {
    normalize_image(&render(vol, geom, pose, RenderMode::Intensity)).unwrap()
}

fn twisted(t: [f64; 6], base: &Pose) -> Pose {
    se3::compose(&se3::exp(&Twist::from_array(t)).unwrap(), base)
}

#[test]
fn independent_refinement_improves_each_view() {
    let (vol, geom) = scene();
    let truth = [twisted([2.0, 0.0, -1.0, 0.02, 0.0, 0.03], &pa_pose(800.0)), twisted([-3.0, 1.0, 0.0, 0.0, -0.04, 0.0], &pa_pose(800.0))];
    let fixed = [shot(&vol, &geom, &truth[0]), shot(&vol, &geom, &truth[1])];
    let init = [
        init_fixed_offset(&truth[0], 3f64.to_radians(), 5.0, 1).unwrap(),
        init_fixed_offset(&truth[1], 3f64.to_radians(), 5.0, 2).unwrap(),
    ];
    let cfg = RefineConfig {
        iterations: 80,
        ..RefineConfig::default()
    };
    let result = fine_register(&vol, &geom, &fixed, &init, &cfg).unwrap();
    assert_eq!(result.loss_trace.len(), result.iterations_run);
    let best = result.best_iteration().unwrap();
    assert!(result.loss_trace[best] <= result.loss_trace[0]);
    for i in 0..2 {
        let before = ncc(&fixed[i], &shot(&vol, &geom, &init[i])).unwrap();
        let after = ncc(&fixed[i], &shot(&vol, &geom, &result.refined[i])).unwrap();
        assert!(after > before, "view {i}: {before} -> {after}");
    }
}

#[test]
fn coupled_refinement_reduces_pose_error() {
    let (vol, geom) = scene();
    let t_trans = lateral_transform(&vol, std::f64::consts::FRAC_PI_2).unwrap();
    let pa = twisted([1.0, 2.0, 0.0, 0.0, 0.01, -0.02], &pa_pose(800.0));
    let lat = se3::compose(&t_trans, &pa);
    let fixed = [shot(&vol, &geom, &pa), shot(&vol, &geom, &lat)];
    let init = init_fixed_offset(&pa, 5f64.to_radians(), 0.0, 3).unwrap();
    let cfg = RefineConfig {
        iterations: 80,
        ..RefineConfig::default()
    };
    let result = fine_register_coupled(&vol, &geom, &fixed, &init, &t_trans, &cfg).unwrap();
    let f = geom.source_to_detector();
    let before = se3::geodesic_distance(&pa, &init, f).unwrap();
    let after = se3::geodesic_distance(&pa, &result.refined[0], f).unwrap();
    assert!(after < before, "{before} -> {after}");
    let tied = se3::compose(&t_trans, &result.refined[0]);
    assert!(tied.max_abs_diff(&result.refined[1]) < 1e-9);
}

#[test]
fn multistart_beats_the_median_candidate() {
    let (vol, geom) = scene();
    let base = pa_pose(800.0);
    let fixed = shot(&vol, &geom, &base);
    let dist = TwistDistribution::isotropic(10.0, 5f64.to_radians()).unwrap();
    let candidates = multistart_candidates(&base, &dist, 64, 9).unwrap();
    let (_, best) = select_best_candidate(&vol, &geom, &fixed, &candidates).unwrap();
    let mut scores: Vec<f64> = candidates
        .iter()
        .map(|c| ncc(&fixed, &render(&vol, &geom, c, RenderMode::Intensity)).unwrap())
        .collect();
    scores.sort_by(f64::total_cmp);
    assert!(best >= scores[scores.len() / 2]);
}

#[test]
fn perturbation_error_grows_with_stddev() {
    let base = pa_pose(800.0);
    let mean_distance = |t: f64, r: f64| {
        let dist = TwistDistribution::isotropic(t, r).unwrap();
        (0..100)
            .map(|seed| se3::geodesic_distance(&base, &init_perturbed(&base, &dist, seed).unwrap(), 1000.0).unwrap())
            .sum::<f64>()
            / 100.0
    };
    let small = mean_distance(1.0, 0.01);
    let medium = mean_distance(2.0, 0.02);
    let large = mean_distance(4.0, 0.04);
    assert!(small < medium && medium < large, "{small} {medium} {large}");
}

fn view_pair(vol: &Volume, geom: &DetectorGeometry, estimates: [Twist; 2], eps_error: Twist) -> ViewPair {
    let base = pa_pose(800.0);
    // dyadic twists keep eps2 - eps == eps1 exact
    let e1 = Twist::from_array([1.0, -0.5, 0.25, 0.0078125, 0.0, -0.015625]);
    let e2 = Twist::from_array([-2.0, 0.75, 0.5, 0.0, 0.0234375, 0.0078125]);
    let eps = Twist::from_array(std::array::from_fn(|i| e2[i] - e1[i] + eps_error[i]));
    let truth = [se3::compose(&se3::exp(&e1).unwrap(), &base), se3::compose(&se3::exp(&e2).unwrap(), &base)];
    let fixed = [shot(vol, geom, &truth[0]), shot(vol, geom, &truth[1])];
    let est = std::array::from_fn(|i| Twist::from_array(std::array::from_fn(|j| [e1, e2][i][j] + estimates[i][j])));
    ViewPair::new(fixed, Some(truth), base, est, eps).unwrap()
}

#[test]
fn corrupted_eps_raises_the_cross_loss() {
    let (vol, geom) = scene();
    let w = LossWeights::default();
    let zero = [Twist::zero(), Twist::zero()];
    let direction = Twist::from_array([1.0, 0.0, -1.0, 0.01, 0.01, 0.0]);
    let losses: Vec<f64> = [0.0, 0.5, 1.0, 2.0]
        .iter()
        .map(|&k| cross_loss(&view_pair(&vol, &geom, zero, direction.scale(k)), &vol, &geom, &w).unwrap())
        .collect();
    assert!(losses[0] < 1e-9, "{losses:?}");
    assert!(losses.windows(2).all(|p| p[1] > p[0]), "{losses:?}");
}

#[test]
fn total_loss_recombines_sub_losses() {
    let (vol, geom) = scene();
    let w = LossWeights::default();
    let off = [Twist::from_array([0.5, 0.0, 0.0, 0.0, 0.01, 0.0]), Twist::from_array([0.0, -1.0, 0.0, 0.0, 0.0, 0.02])];
    let pair = view_pair(&vol, &geom, off, Twist::zero());
    let local = local_loss(&pair, &vol, &geom, &w).unwrap();
    let cross = cross_loss(&pair, &vol, &geom, &w).unwrap();
    let total = total_loss(&pair, &vol, &geom, &w).unwrap();
    assert!(local > 0.0 && cross > 0.0);
    assert!((total - (0.7 * local + 0.3 * cross)).abs() < 1e-12);

    let exact = view_pair(&vol, &geom, [Twist::zero(), Twist::zero()], Twist::zero());
    assert!(total_loss(&exact, &vol, &geom, &w).unwrap() < local.min(cross));
}

#[test]
fn detector_parallel_shift_gives_pixel_error() {
    let geom = DetectorGeometry::centered(1000.0, 101, 101, 0.5).unwrap();
    let id = Pose::identity();
    let lm = LandmarkSet::new(vec!["p".into()], vec![Vector3::new(3.0, -2.0, 1000.0)]).unwrap();
    for t in [0.25, 1.0, 4.0] {
        let moved = Pose::from_translation(Vector3::new(0.0, t, 0.0));
        // one of two views is off by t / pixel_spacing pixels
        let m = mtre(&geom, &[id, id], &[moved, id], &lm, 0.194).unwrap();
        assert!((m - 0.194 * (t / 0.5) / 2.0).abs() < 1e-12, "{t}: {m}");
    }
}
