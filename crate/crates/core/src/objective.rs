//! Scalar losses over rendered views and their finite-difference gradients.
//!
//! Every image term enters the minimized losses as `1 - ncc`, so a perfectly
//! aligned view contributes 0 and an anti-correlated one contributes 2.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Volume};
use crate::projector::{render, DetectorGeometry, RenderMode};
use crate::se3::{self, CrossDirection, Pose, RelativeLog, Twist};

/// Loss assigned to a view whose NCC is undefined (a constant image).
pub const WORST_NCC_LOSS: f64 = 2.0;

/// Relative spread below which an image counts as constant.
const DEGENERATE_REL_STD: f64 = 1e-12;

/// Weights of the combined loss `beta1 · local + beta2 · cross`, and of the
/// pose term inside each of them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub struct LossWeights {
    beta1: f64,
    beta2: f64,
    gamma: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsRepr {
    beta1: f64,
    beta2: f64,
    gamma: f64,
}

impl TryFrom<WeightsRepr> for LossWeights {
    type Error = Error;
    fn try_from(r: WeightsRepr) -> Result<Self> {
        LossWeights::new(r.beta1, r.beta2, r.gamma)
    }
}

impl From<LossWeights> for WeightsRepr {
    fn from(w: LossWeights) -> Self {
        WeightsRepr {
            beta1: w.beta1,
            beta2: w.beta2,
            gamma: w.gamma,
        }
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta1: 0.7,
            beta2: 0.3,
            gamma: 1e-2,
        }
    }
}

impl LossWeights {
    pub fn new(beta1: f64, beta2: f64, gamma: f64) -> Result<Self> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(beta1) && ok(beta2) && ok(gamma) && beta1 + beta2 > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "loss weights need beta1, beta2, gamma >= 0 and beta1 + beta2 > 0, got ({beta1}, {beta2}, {gamma})"
            )));
        }
        Ok(Self { beta1, beta2, gamma })
    }

    pub fn beta1(&self) -> f64 {
        self.beta1
    }

    pub fn beta2(&self) -> f64 {
        self.beta2
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

/// Two fixed views with their estimated poses and the inter-view twist.
///
/// Estimates are held as twists relative to a shared reference pose:
/// `T̂_i = exp(estimates[i]) · reference`. With the identity reference the
/// twists are the exponential coordinates of the poses themselves. The cross
/// poses are formed in the same coordinates:
/// `T̃_1 = exp(δ_2 - eps) · reference`, `T̃_2 = exp(δ_1 + eps) · reference`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    fixed: [Image; 2],
    true_poses: Option<[Pose; 2]>,
    reference: Pose,
    estimates: [Twist; 2],
    eps: Twist,
}

impl ViewPair {
    pub fn new(
        fixed: [Image; 2],
        true_poses: Option<[Pose; 2]>,
        reference: Pose,
        estimates: [Twist; 2],
        eps: Twist,
    ) -> Result<Self> {
        if !fixed[0].same_shape(&fixed[1]) {
            return Err(shape_mismatch(&fixed[0], &fixed[1]));
        }
        if !(estimates.iter().all(Twist::is_finite) && eps.is_finite()) {
            return Err(Error::InvalidArgument("view-pair twists must be finite".into()));
        }
        Ok(Self {
            fixed,
            true_poses,
            reference,
            estimates,
            eps,
        })
    }

    /// View pair whose estimates are given as absolute poses.
    pub fn from_poses(
        fixed: [Image; 2],
        true_poses: Option<[Pose; 2]>,
        estimated: [Pose; 2],
        eps: Twist,
    ) -> Result<Self> {
        let estimates = [se3::log(&estimated[0])?, se3::log(&estimated[1])?];
        Self::new(fixed, true_poses, Pose::identity(), estimates, eps)
    }

    pub fn fixed(&self) -> &[Image; 2] {
        &self.fixed
    }

    pub fn true_poses(&self) -> Option<&[Pose; 2]> {
        self.true_poses.as_ref()
    }

    pub fn reference(&self) -> &Pose {
        &self.reference
    }

    pub fn estimates(&self) -> &[Twist; 2] {
        &self.estimates
    }

    pub fn eps(&self) -> &Twist {
        &self.eps
    }

    pub fn with_eps(mut self, eps: Twist) -> Self {
        self.eps = eps;
        self
    }

    pub fn estimated_poses(&self) -> Result<[Pose; 2]> {
        Ok([self.at(&self.estimates[0])?, self.at(&self.estimates[1])?])
    }

    /// `[T̃_1, T̃_2]`, each predicted from the other view's estimate.
    pub fn cross_poses(&self) -> Result<[Pose; 2]> {
        let [d1, d2] = &self.estimates;
        Ok([
            self.at(&se3::cross_twist(d2, &self.eps, CrossDirection::Backward))?,
            self.at(&se3::cross_twist(d1, &self.eps, CrossDirection::Forward))?,
        ])
    }

    fn at(&self, delta: &Twist) -> Result<Pose> {
        Ok(se3::compose(&se3::exp(delta)?, &self.reference))
    }

    fn require_truth(&self) -> Result<&[Pose; 2]> {
        self.true_poses.as_ref().ok_or_else(|| {
            Error::InvalidArgument("this loss needs the true poses of both views".into())
        })
    }

    fn check_geometry(&self, geom: &DetectorGeometry) -> Result<()> {
        check_image_geometry(&self.fixed[0], geom)
    }
}

fn shape_mismatch(a: &Image, b: &Image) -> Error {
    Error::DimensionMismatch {
        expected: format!("{}x{} @ {} mm", a.width(), a.height(), a.pixel_spacing()),
        found: format!("{}x{} @ {} mm", b.width(), b.height(), b.pixel_spacing()),
    }
}

/// Errors unless `image` has the detector's pixel grid.
pub fn check_image_geometry(image: &Image, geom: &DetectorGeometry) -> Result<()> {
    if image.width() != geom.detector_width()
        || image.height() != geom.detector_height()
        || image.pixel_spacing() != geom.pixel_spacing()
    {
        return Err(Error::DimensionMismatch {
            expected: format!(
                "{}x{} @ {} mm (detector)",
                geom.detector_width(),
                geom.detector_height(),
                geom.pixel_spacing()
            ),
            found: format!("{}x{} @ {} mm", image.width(), image.height(), image.pixel_spacing()),
        });
    }
    Ok(())
}

/// Population mean and standard deviation (divides by the pixel count).
pub fn image_stats(image: &Image) -> (f64, f64) {
    let data = image.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn is_degenerate(mean: f64, std: f64) -> bool {
    std <= DEGENERATE_REL_STD * mean.abs() || std == 0.0
}

/// Normalized cross-correlation in `[-1, 1]`:
/// `(1/P) Σ_p ((a_p - μ_a)/σ_a) · ((b_p - μ_b)/σ_b)`.
pub fn ncc(a: &Image, b: &Image) -> Result<f64> {
    if a.width() != b.width() || a.height() != b.height() {
        return Err(shape_mismatch(a, b));
    }
    let (ma, sa) = image_stats(a);
    let (mb, sb) = image_stats(b);
    for (name, m, s) in [("first", ma, sa), ("second", mb, sb)] {
        if is_degenerate(m, s) {
            return Err(Error::DegenerateImage(format!(
                "{name} image is constant (mean {m}, stddev {s}); NCC is undefined"
            )));
        }
    }
    let cov = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / a.len() as f64;
    Ok((cov / (sa * sb)).clamp(-1.0, 1.0))
}

/// `1 - ncc`, or [`WORST_NCC_LOSS`] when either image is constant.
pub fn ncc_loss(fixed: &Image, moving: &Image) -> Result<f64> {
    match ncc(fixed, moving) {
        Ok(v) => Ok(1.0 - v),
        Err(Error::DegenerateImage(_)) => Ok(WORST_NCC_LOSS),
        Err(e) => Err(e),
    }
}

fn render_view(vol: &Volume, geom: &DetectorGeometry, pose: &Pose) -> Image {
    render(vol, geom, pose, RenderMode::Intensity)
}

fn pose_image_terms(
    fixed: &[Image; 2],
    truth: &[Pose; 2],
    poses: &[Pose; 2],
    vol: &Volume,
    geom: &DetectorGeometry,
    gamma: f64,
    form: RelativeLog,
) -> Result<f64> {
    let f = geom.source_to_detector();
    let mut sum = 0.0;
    for i in 0..2 {
        let geo = se3::geodesic_distance_with(&truth[i], &poses[i], f, form)?;
        let img = ncc_loss(&fixed[i], &render_view(vol, geom, &poses[i]))?;
        sum += gamma * geo + img;
    }
    Ok(sum)
}

/// `Σ_i γ · geodesic(T_i, T̂_i, f) + (1 - ncc(I_i, render(T̂_i)))`.
pub fn local_loss(pair: &ViewPair, vol: &Volume, geom: &DetectorGeometry, w: &LossWeights) -> Result<f64> {
    pair.check_geometry(geom)?;
    let truth = pair.require_truth()?;
    let est = pair.estimated_poses()?;
    pose_image_terms(&pair.fixed, truth, &est, vol, geom, w.gamma, RelativeLog::Inverse)
}

/// `Σ_i γ · geodesic(T_i, T̃_i, f) + (1 - ncc(I_i, render(T̃_i)))` over the
/// cross poses of [`ViewPair::cross_poses`].
pub fn cross_loss(pair: &ViewPair, vol: &Volume, geom: &DetectorGeometry, w: &LossWeights) -> Result<f64> {
    cross_loss_with(pair, vol, geom, w, RelativeLog::Inverse)
}

/// [`cross_loss`] with a choice of relative transform inside the Log term.
pub fn cross_loss_with(
    pair: &ViewPair,
    vol: &Volume,
    geom: &DetectorGeometry,
    w: &LossWeights,
    form: RelativeLog,
) -> Result<f64> {
    pair.check_geometry(geom)?;
    let truth = pair.require_truth()?;
    let cross = pair.cross_poses()?;
    pose_image_terms(&pair.fixed, truth, &cross, vol, geom, w.gamma, form)
}

/// `beta1 · local + beta2 · cross`. A zero weight skips its term entirely.
pub fn total_loss(pair: &ViewPair, vol: &Volume, geom: &DetectorGeometry, w: &LossWeights) -> Result<f64> {
    let local = if w.beta1 > 0.0 {
        w.beta1 * local_loss(pair, vol, geom, w)?
    } else {
        0.0
    };
    let cross = if w.beta2 > 0.0 {
        w.beta2 * cross_loss(pair, vol, geom, w)?
    } else {
        0.0
    };
    Ok(local + cross)
}

/// Image-only loss of one view rendered at `exp(delta) · base`.
pub fn view_loss(
    vol: &Volume,
    geom: &DetectorGeometry,
    base: &Pose,
    delta: &Twist,
    fixed: &Image,
) -> Result<f64> {
    let pose = se3::compose(&se3::exp(delta)?, base);
    ncc_loss(fixed, &render_view(vol, geom, &pose))
}

/// Test-time objective `Σ_i w_i · (1 - ncc(I_i, render(exp(δ_i) · base_i)))`.
pub fn refine_objective(
    deltas: &[Twist],
    fixed: &[Image],
    vol: &Volume,
    geom: &DetectorGeometry,
    base_poses: &[Pose],
    view_weights: &[f64],
) -> Result<f64> {
    let n = deltas.len();
    if fixed.len() != n || base_poses.len() != n || view_weights.len() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} images, base poses and weights"),
            found: format!(
                "{} images, {} base poses, {} weights",
                fixed.len(),
                base_poses.len(),
                view_weights.len()
            ),
        });
    }
    check_view_weights(view_weights)?;
    for image in fixed {
        check_image_geometry(image, geom)?;
    }
    let mut total = 0.0;
    for i in 0..n {
        total += view_weights[i] * view_loss(vol, geom, &base_poses[i], &deltas[i], &fixed[i])?;
    }
    Ok(total)
}

fn check_view_weights(w: &[f64]) -> Result<()> {
    let sum: f64 = w.iter().sum();
    if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "view weights must be nonnegative and sum to 1, got {w:?}"
        )));
    }
    Ok(())
}

/// Central-difference gradient of `f` with respect to every component of
/// every twist in `at`: `(f(x + h e_j) - f(x - h e_j)) / 2h`.
///
/// The `12 · at.len()` evaluations run in parallel; each result lands in a
/// fixed slot, so the gradient does not depend on scheduling. A non-finite
/// evaluation is reported with its flat component index `6 · twist + j`.
pub fn objective_gradient<F>(f: F, at: &[Twist], step: f64) -> Result<Vec<Twist>>
where
    F: Fn(&[Twist]) -> Result<f64> + Sync,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let n = at.len() * 6;
    let evals: Vec<Result<f64>> = (0..2 * n)
        .into_par_iter()
        .map(|slot| {
            let (component, sign) = (slot / 2, if slot % 2 == 0 { 1.0 } else { -1.0 });
            let mut x = at.to_vec();
            x[component / 6][component % 6] += sign * step;
            f(&x)
        })
        .collect();
    let values = evals.into_iter().collect::<Result<Vec<f64>>>()?;
    let mut grad = vec![Twist::zero(); at.len()];
    for component in 0..n {
        let g = (values[2 * component] - values[2 * component + 1]) / (2.0 * step);
        if !g.is_finite() {
            return Err(Error::NonFiniteObjective { component });
        }
        grad[component / 6][component % 6] = g;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{make_phantom, PhantomKind};
    use crate::projector::pa_pose;
    use nalgebra::Vector3;

    fn img(w: usize, h: usize, data: Vec<f64>) -> Image {
        Image::new(w, h, 1.0, data).unwrap()
    }

    fn ramp(n: usize) -> Image {
        img(n, 1, (0..n).map(|i| (i as f64 * 0.37).sin() + 0.1 * i as f64).collect())
    }

    #[test]
    fn stats_examples() {
        assert_eq!(image_stats(&img(3, 1, vec![2.5; 3])), (2.5, 0.0));
        assert_eq!(image_stats(&img(2, 2, vec![0.0, 1.0, 1.0, 0.0])), (0.5, 0.5));
        let a = ramp(20);
        let (m, s) = image_stats(&a);
        let (m2, s2) = image_stats(&a.map(|v| v + 3.0).unwrap());
        assert!((m2 - m - 3.0).abs() < 1e-12);
        assert!((s2 - s).abs() < 1e-12);
    }

    #[test]
    fn ncc_examples() {
        let a = ramp(50);
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &a.map(|v| 2.5 * v - 7.0).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        assert!((ncc(&a, &a.map(|v| -v).unwrap()).unwrap() + 1.0).abs() < 1e-12);
        let c = img(50, 1, vec![1.0; 50]);
        assert!(matches!(ncc(&a, &c), Err(Error::DegenerateImage(_))));
        assert_eq!(ncc_loss(&a, &c).unwrap(), WORST_NCC_LOSS);
        assert!(matches!(ncc(&a, &ramp(49)), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn weights_validation() {
        assert_eq!(LossWeights::default(), LossWeights::new(0.7, 0.3, 1e-2).unwrap());
        assert!(LossWeights::new(0.0, 0.0, 1.0).is_err());
        assert!(LossWeights::new(-0.1, 1.0, 1.0).is_err());
        let json = serde_json::to_string(&LossWeights::default()).unwrap();
        assert_eq!(serde_json::from_str::<LossWeights>(&json).unwrap(), LossWeights::default());
        assert!(serde_json::from_str::<LossWeights>(r#"{"beta1":-1,"beta2":1,"gamma":0}"#).is_err());
    }

    #[test]
    fn gradient_of_constant_and_quadratic() {
        let at = [Twist::from_array([0.3, -0.2, 0.5, 0.01, 0.02, -0.03])];
        let g = objective_gradient(|_: &[Twist]| Ok(4.0), &at, 1e-3).unwrap();
        assert_eq!(g[0], Twist::zero());
        let g = objective_gradient(|x: &[Twist]| Ok(x[0].norm().powi(2)), &at, 1e-3).unwrap();
        for j in 0..6 {
            assert!((g[0][j] - 2.0 * at[0][j]).abs() < 1e-9);
        }
    }

    #[test]
    fn gradient_reports_non_finite_component() {
        let at = [Twist::zero(), Twist::zero()];
        let f = |x: &[Twist]| Ok(if x[1][4] > 0.0 { f64::NAN } else { 0.0 });
        match objective_gradient(f, &at, 1e-3) {
            Err(Error::NonFiniteObjective { component }) => assert_eq!(component, 10),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn small_setup() -> (Volume, DetectorGeometry, Pose) {
        let (vol, _) = make_phantom(PhantomKind::SpherePair, [32, 32, 32], Vector3::new(2.0, 2.0, 2.0), 3).unwrap();
        let geom = DetectorGeometry::centered(1000.0, 48, 48, 2.0).unwrap();
        (vol, geom, pa_pose(800.0))
    }

    #[test]
    fn losses_vanish_at_fixed_point_and_grow_off_it() {
        let (vol, geom, pa) = small_setup();
        // dyadic components keep e2 - (e2 - e1) == e1 exact
        let e1 = Twist::from_array([1.0, -2.0, 0.5, 0.0078125, 0.015625, -0.0078125]);
        let e2 = Twist::from_array([-1.5, 0.5, 1.0, -0.015625, 0.0, 0.03125]);
        let eps = e2 - e1;
        let truth = [se3::exp(&e1).unwrap() * pa, se3::exp(&e2).unwrap() * pa];
        let fixed = truth.map(|t| render_view(&vol, &geom, &t));
        let w = LossWeights::default();
        let pair = ViewPair::new(fixed.clone(), Some(truth), pa, [e1, e2], eps).unwrap();
        assert!(local_loss(&pair, &vol, &geom, &w).unwrap().abs() < 1e-9);
        assert!(cross_loss(&pair, &vol, &geom, &w).unwrap().abs() < 1e-9);
        assert!(total_loss(&pair, &vol, &geom, &w).unwrap().abs() < 1e-9);

        let moved = e1 + Twist::from_array([2.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let off = ViewPair::new(fixed.clone(), Some(truth), pa, [moved, e2], eps).unwrap();
        assert!(local_loss(&off, &vol, &geom, &w).unwrap() > 1e-3);

        let no_pose = LossWeights::new(0.7, 0.3, 0.0).unwrap();
        let l = local_loss(&off, &vol, &geom, &no_pose).unwrap();
        let images: f64 = (0..2)
            .map(|i| 1.0 - ncc(&fixed[i], &render_view(&vol, &geom, &off.estimated_poses().unwrap()[i])).unwrap())
            .sum();
        assert!((l - images).abs() < 1e-12);

        let only_local = LossWeights::new(0.7, 0.0, 1e-2).unwrap();
        assert_eq!(
            total_loss(&off, &vol, &geom, &only_local).unwrap(),
            0.7 * local_loss(&off, &vol, &geom, &only_local).unwrap()
        );
    }

    #[test]
    fn refine_objective_is_weighted_mean() {
        let (vol, geom, pa) = small_setup();
        let fixed = [render_view(&vol, &geom, &pa), render_view(&vol, &geom, &pa)];
        let d = [
            Twist::from_array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            Twist::from_array([0.0, 0.0, 0.0, 0.0, 0.02, 0.0]),
        ];
        let base = [pa, pa];
        assert!(refine_objective(&[Twist::zero(); 2], &fixed, &vol, &geom, &base, &[0.5, 0.5]).unwrap().abs() < 1e-12);
        let l0 = view_loss(&vol, &geom, &pa, &d[0], &fixed[0]).unwrap();
        let l1 = view_loss(&vol, &geom, &pa, &d[1], &fixed[1]).unwrap();
        let mean = refine_objective(&d, &fixed, &vol, &geom, &base, &[0.5, 0.5]).unwrap();
        assert!((mean - 0.5 * (l0 + l1)).abs() < 1e-15);
        assert!(refine_objective(&d, &fixed, &vol, &geom, &base, &[0.5, 0.6]).is_err());
    }
}
