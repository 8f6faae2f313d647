//! Rigid-body arithmetic on SE(3) and its Lie algebra se(3).
//!
//! Twists are laid out as `(rho, phi)`: translation generator first (mm),
//! rotation generator second (axis-angle, radians). The same ordering is used
//! in memory, in JSON and in every gradient vector of the crate.
//!
//! Poses are camera-to-world rigid transforms; `compose(a, b)` is the matrix
//! product `a * b`, so a left factor acts in the world (CT) frame.

use std::f64::consts::{FRAC_PI_2, PI};
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use nalgebra::{Matrix3, Matrix4, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rotation angles closer than this to pi are rejected by [`log`].
pub const LOG_BRANCH_MARGIN: f64 = 1e-6;

/// Per-entry tolerance for `RᵀR = I` and `det R = 1`.
pub const ORTHONORMAL_TOL: f64 = 1e-9;

/// Sampled twists are snapped to multiples of 2⁻⁴⁰. Sums and differences of
/// grid values below 2¹² in magnitude are then exact in f64, which keeps
/// `eps2 - eps1 == eps` and `eps2 - eps == eps1` true bit for bit.
pub const TWIST_GRID: f64 = 1.0 / (1u64 << 40) as f64;

const SMALL_ANGLE: f64 = 1e-2;

/// Element of se(3): `rho` generates translation, `phi` rotation.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Twist {
    pub rho: Vector3<f64>,
    pub phi: Vector3<f64>,
}

impl Twist {
    pub fn new(rho: Vector3<f64>, phi: Vector3<f64>) -> Self {
        Self { rho, phi }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            rho: Vector3::new(v[0], v[1], v[2]),
            phi: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [
            self.rho.x, self.rho.y, self.rho.z, self.phi.x, self.phi.y, self.phi.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|c| c.is_finite())
    }

    /// Euclidean norm over all six components.
    pub fn norm(&self) -> f64 {
        (self.rho.norm_squared() + self.phi.norm_squared()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.to_array().iter().fold(0.0, |m, c| m.max(c.abs()))
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.rho * k, self.phi * k)
    }
}

impl Add for Twist {
    type Output = Twist;
    fn add(self, rhs: Twist) -> Twist {
        Twist::new(self.rho + rhs.rho, self.phi + rhs.phi)
    }
}

impl Sub for Twist {
    type Output = Twist;
    fn sub(self, rhs: Twist) -> Twist {
        Twist::new(self.rho - rhs.rho, self.phi - rhs.phi)
    }
}

impl Neg for Twist {
    type Output = Twist;
    fn neg(self) -> Twist {
        Twist::new(-self.rho, -self.phi)
    }
}

impl Index<usize> for Twist {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0..=2 => &self.rho[i],
            3..=5 => &self.phi[i - 3],
            _ => panic!("twist index {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Twist {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0..=2 => &mut self.rho[i],
            3..=5 => &mut self.phi[i - 3],
            _ => panic!("twist index {i} out of range"),
        }
    }
}

impl Serialize for Twist {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Twist {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = <[f64; 6]>::deserialize(d)?;
        let t = Twist::from_array(v);
        if !t.is_finite() {
            return Err(serde::de::Error::custom("twist components must be finite"));
        }
        Ok(t)
    }
}

/// Rigid transform `[R t; 0 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PoseRepr", into = "PoseRepr")]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    matrix: [f64; 16],
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;
    fn try_from(r: PoseRepr) -> Result<Self> {
        Pose::from_row_major(&r.matrix)
    }
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        PoseRepr {
            matrix: p.to_row_major(),
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, checking orthonormality and orientation of `rotation`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation, ORTHONORMAL_TOL)?;
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument("translation must be finite".into()));
        }
        Ok(Self::from_parts(rotation, translation))
    }

    pub(crate) fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::from_parts(Matrix3::identity(), t)
    }

    /// Rotation by `theta` about the world z axis through the origin.
    pub fn rotation_z(theta: f64) -> Self {
        let (s, c) = exact_sin_cos(theta);
        Self::from_parts(
            Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            Vector3::zeros(),
        )
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[4 * r + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64; 16]) -> Result<Self> {
        Self::from_matrix(&Matrix4::from_row_slice(v))
    }

    /// Strict conversion: the rotation block must already be orthonormal and
    /// the last row must be `[0 0 0 1]`, both within [`ORTHONORMAL_TOL`].
    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        check_bottom_row(m, ORTHONORMAL_TOL)?;
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Lenient conversion for externally produced matrices: entries may
    /// deviate from rigidity by up to `tol`, after which the rotation block is
    /// replaced by its nearest rotation (polar factor).
    pub fn project_to_rigid(m: &Matrix4<f64>, tol: f64) -> Result<Self> {
        if !m.iter().all(|c| c.is_finite()) {
            return Err(Error::NonRigid("matrix has non-finite entries".into()));
        }
        check_bottom_row(m, tol)?;
        let r = m.fixed_view::<3, 3>(0, 0).into_owned();
        check_rotation(&r, tol)?;
        let svd = r.svd(true, true);
        let (u, v_t) = match (svd.u, svd.v_t) {
            (Some(u), Some(v_t)) => (u, v_t),
            _ => return Err(Error::NonRigid("polar decomposition failed".into())),
        };
        let projected = u * v_t;
        if projected.determinant() <= 0.0 {
            return Err(Error::NonRigid("rotation block is a reflection".into()));
        }
        Ok(Self::from_parts(
            projected,
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        ))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    pub fn inverse(&self) -> Pose {
        inverse(self)
    }

    pub fn compose(&self, other: &Pose) -> Pose {
        compose(self, other)
    }

    /// Largest absolute entry-wise difference of the 4×4 matrices.
    pub fn max_abs_diff(&self, other: &Pose) -> f64 {
        (self.to_matrix() - other.to_matrix()).amax()
    }
}

impl Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        compose(&self, &rhs)
    }
}

impl Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        compose(self, rhs)
    }
}

fn check_bottom_row(m: &Matrix4<f64>, tol: f64) -> Result<()> {
    let expected = [0.0, 0.0, 0.0, 1.0];
    for (c, e) in expected.iter().enumerate() {
        if (m[(3, c)] - e).abs() > tol {
            return Err(Error::NonRigid(format!(
                "bottom row must be [0, 0, 0, 1], found {:?}",
                [m[(3, 0)], m[(3, 1)], m[(3, 2)], m[(3, 3)]]
            )));
        }
    }
    Ok(())
}

fn check_rotation(r: &Matrix3<f64>, tol: f64) -> Result<()> {
    if !r.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument("rotation has non-finite entries".into()));
    }
    let det = r.determinant();
    if det < 0.0 {
        return Err(Error::NonRigid(format!("rotation determinant is {det:.6}")));
    }
    let gram_err = (r.transpose() * r - Matrix3::identity()).amax();
    if gram_err > tol || (det - 1.0).abs() > tol {
        return Err(Error::NonRigid(format!(
            "rotation is not orthonormal (max |RᵀR - I| = {gram_err:.3e}, det = {det:.12})"
        )));
    }
    Ok(())
}

/// sin/cos that return exact 0/±1 at multiples of pi/2.
fn exact_sin_cos(theta: f64) -> (f64, f64) {
    if theta == 0.0 {
        (0.0, 1.0)
    } else if theta == FRAC_PI_2 {
        (1.0, 0.0)
    } else if theta == -FRAC_PI_2 {
        (-1.0, 0.0)
    } else if theta == PI || theta == -PI {
        (0.0, -1.0)
    } else {
        theta.sin_cos()
    }
}

pub(crate) fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rotation angle of `r` in `[0, pi]` and the vector `sin(angle) * axis`.
///
/// `atan2` of the antisymmetric and symmetric parts stays finite and
/// accurate over the whole range, including angles near 0 where `acos` of
/// the trace loses half of the significant digits.
fn rotation_angle_parts(r: &Matrix3<f64>) -> (f64, Vector3<f64>) {
    let w = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    ) * 0.5;
    let c = (r.trace() - 1.0) * 0.5;
    (w.norm().atan2(c), w)
}

/// Angle of the rotation `r`, in `[0, pi]`.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    rotation_angle_parts(r).0
}

/// SE(3) exponential: Rodrigues rotation plus the left-Jacobian coupling of
/// the translation.
pub fn exp(v: &Twist) -> Result<Pose> {
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "twist has non-finite components: {:?}",
            v.to_array()
        )));
    }
    let theta2 = v.phi.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(&v.phi);
    let k2 = k * k;
    // a = sin θ / θ, b = (1 - cos θ) / θ², c = (θ - sin θ) / θ³
    let (a, b, c) = if theta < SMALL_ANGLE {
        let t4 = theta2 * theta2;
        (
            1.0 - theta2 / 6.0 + t4 / 120.0,
            0.5 - theta2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - theta2 / 120.0 + t4 / 5040.0,
        )
    } else {
        let half_sin = (0.5 * theta).sin();
        (
            theta.sin() / theta,
            2.0 * half_sin * half_sin / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let eye = Matrix3::identity();
    let rotation = eye + k * a + k2 * b;
    let left_jacobian = eye + k * b + k2 * c;
    Ok(Pose::from_parts(rotation, left_jacobian * v.rho))
}

/// SE(3) logarithm on the principal branch (rotation angle below
/// `pi - LOG_BRANCH_MARGIN`).
pub fn log(t: &Pose) -> Result<Twist> {
    check_rotation(&t.rotation, ORTHONORMAL_TOL)?;
    let (theta, w) = rotation_angle_parts(&t.rotation);
    if theta >= PI - LOG_BRANCH_MARGIN {
        return Err(Error::LogBranch { angle: theta });
    }
    let theta2 = theta * theta;
    // θ / sin θ
    let ratio = if theta < SMALL_ANGLE {
        1.0 + theta2 / 6.0 + 7.0 * theta2 * theta2 / 360.0
    } else {
        theta / w.norm()
    };
    let phi = w * ratio;
    let k = hat(&phi);
    // coefficient of K² in the inverse left Jacobian: (1 - (θ/2) cot(θ/2)) / θ²
    let d = if theta < SMALL_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half / half.tan()) / theta2
    };
    let inv_jacobian = Matrix3::identity() - k * 0.5 + k * k * d;
    Ok(Twist::new(inv_jacobian * t.translation, phi))
}

pub fn compose(a: &Pose, b: &Pose) -> Pose {
    Pose::from_parts(
        a.rotation * b.rotation,
        a.rotation * b.translation + a.translation,
    )
}

pub fn inverse(t: &Pose) -> Pose {
    let rt = t.rotation.transpose();
    Pose::from_parts(rt, -(rt * t.translation))
}

/// Independent per-dimension Gaussian over se(3).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DistRepr", into = "DistRepr")]
pub struct TwistDistribution {
    mean: [f64; 6],
    stddev: [f64; 6],
}

#[derive(Serialize, Deserialize)]
struct DistRepr {
    mean: [f64; 6],
    stddev: [f64; 6],
}

impl TryFrom<DistRepr> for TwistDistribution {
    type Error = Error;
    fn try_from(r: DistRepr) -> Result<Self> {
        TwistDistribution::new(r.mean, r.stddev)
    }
}

impl From<TwistDistribution> for DistRepr {
    fn from(d: TwistDistribution) -> Self {
        DistRepr {
            mean: d.mean,
            stddev: d.stddev,
        }
    }
}

impl TwistDistribution {
    pub fn new(mean: [f64; 6], stddev: [f64; 6]) -> Result<Self> {
        if !mean.iter().all(|m| m.is_finite()) {
            return Err(Error::InvalidArgument("distribution mean must be finite".into()));
        }
        if !stddev.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "distribution stddev must be finite and > 0, got {stddev:?}"
            )));
        }
        Ok(Self { mean, stddev })
    }

    /// Zero-mean distribution with one stddev for all translation components
    /// (mm) and one for all rotation components (rad).
    pub fn isotropic(translation_mm: f64, rotation_rad: f64) -> Result<Self> {
        let (t, r) = (translation_mm, rotation_rad);
        Self::new([0.0; 6], [t, t, t, r, r, r])
    }

    pub fn mean(&self) -> [f64; 6] {
        self.mean
    }

    pub fn stddev(&self) -> [f64; 6] {
        self.stddev
    }
}

fn snap_to_grid(x: f64) -> f64 {
    (x / TWIST_GRID).round() * TWIST_GRID
}

fn gaussian_twist(rng: &mut ChaCha8Rng, mean: &[f64; 6], stddev: &[f64; 6]) -> Twist {
    let mut out = [0.0; 6];
    for d in 0..6 {
        let z: f64 = StandardNormal.sample(rng);
        out[d] = snap_to_grid(mean[d] + stddev[d] * z);
    }
    Twist::from_array(out)
}

/// Draws each component from `N(mean_d, stddev_d²)`. The same seed always
/// yields the same twist.
pub fn sample_twist(dist: &TwistDistribution, rng_seed: u64) -> Twist {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    gaussian_twist(&mut rng, &dist.mean, &dist.stddev)
}

/// Draws the inter-view twist `eps ~ N(0, 2·stddev²)` and returns
/// `(eps2, eps)` with `eps2 = eps1 + eps`.
pub fn sample_second_view(eps1: &Twist, dist: &TwistDistribution, rng_seed: u64) -> (Twist, Twist) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let sd = dist.stddev.map(|s| s * std::f64::consts::SQRT_2);
    let raw = gaussian_twist(&mut rng, &[0.0; 6], &sd);
    let eps2 = *eps1 + raw;
    // identical to `raw` whenever eps1 lies on the sampling grid
    let eps = eps2 - *eps1;
    (eps2, eps)
}

/// Pose discrepancy combining a focal-length-weighted rotation angle, the
/// translation offset, and the norm of the relative twist:
///
/// `sqrt(f²/4 · θ² + |t - t̂|) + |Log(T⁻¹ T̂)|`
///
/// where θ is the angle of `RᵀR̂`. The translation norm enters unsquared.
pub fn geodesic_distance(t: &Pose, t_hat: &Pose, focal_length: f64) -> Result<f64> {
    geodesic_distance_with(t, t_hat, focal_length, RelativeLog::Inverse)
}

/// Which relative transform feeds the Log term of the geodesic distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeLog {
    /// `Log(T⁻¹ T̂)`: vanishes when the poses agree.
    #[default]
    Inverse,
    /// `Log(T T̂)`: product without inverse, kept for comparison runs.
    Product,
}

pub fn geodesic_distance_with(
    t: &Pose,
    t_hat: &Pose,
    focal_length: f64,
    form: RelativeLog,
) -> Result<f64> {
    if !(focal_length > 0.0 && focal_length.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "focal length must be positive, got {focal_length}"
        )));
    }
    let relative_rotation = t.rotation.transpose() * t_hat.rotation;
    let angle = rotation_angle(&relative_rotation);
    let translation_gap = (t.translation - t_hat.translation).norm();
    let rel = match form {
        RelativeLog::Inverse => compose(&inverse(t), t_hat),
        RelativeLog::Product => compose(t, t_hat),
    };
    let twist = log(&rel)?;
    let f = focal_length;
    Ok((f * f / 4.0 * angle * angle + translation_gap).sqrt() + twist.norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CrossDirection {
    /// `Exp(Log(T) + eps)`: predicts view 2 from view 1.
    Forward,
    /// `Exp(Log(T) - eps)`: predicts view 1 from view 2.
    Backward,
}

/// Cross-view prediction of one pose from the other through the inter-view
/// twist.
pub fn cross_pose(t_other: &Pose, eps: &Twist, direction: CrossDirection) -> Result<Pose> {
    let base = log(t_other)?;
    exp(&cross_twist(&base, eps, direction))
}

/// [`cross_pose`] in exponential coordinates, for poses already held as
/// twists.
pub fn cross_twist(other: &Twist, eps: &Twist, direction: CrossDirection) -> Twist {
    match direction {
        CrossDirection::Forward => *other + *eps,
        CrossDirection::Backward => *other - *eps,
    }
}

/// PA→LAT transform exactly as the closed-form matrix
///
/// ```text
/// [cos θ  -sin θ  0  x + y sin θ]
/// [sin θ   cos θ  0  y - x sin θ]
/// [  0       0    1       0     ]
/// ```
///
/// At θ = pi/2 this equals the recentred rotation about `(x, y, ·)`; at other
/// angles the translation omits the cosine terms, see
/// [`recentered_rotation_z`].
pub fn pa_to_lat_transform(theta: f64, voxel_extent: Vector3<f64>) -> Result<Pose> {
    check_theta(theta)?;
    if !voxel_extent.iter().all(|c| c.is_finite() && *c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "voxel extent must be positive, got {:?}",
            voxel_extent.as_slice()
        )));
    }
    let (s, c) = exact_sin_cos(theta);
    let (x, y) = (voxel_extent.x, voxel_extent.y);
    Ok(Pose::from_parts(
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
        Vector3::new(x + y * s, y - x * s, 0.0),
    ))
}

/// Rotation by θ about the z-parallel axis through `center`:
/// `T(c) · Rz(θ) · T(-c)`. Identity at θ = 0.
pub fn recentered_rotation_z(theta: f64, center: Vector3<f64>) -> Result<Pose> {
    check_theta(theta)?;
    if !center.iter().all(|c| c.is_finite()) {
        return Err(Error::InvalidArgument("rotation center must be finite".into()));
    }
    let rot = Pose::rotation_z(theta);
    let rc = rot.rotation * center;
    Ok(Pose::from_parts(rot.rotation, center - rc))
}

fn check_theta(theta: f64) -> Result<()> {
    if !(-PI..=PI).contains(&theta) {
        return Err(Error::InvalidArgument(format!(
            "theta must lie in [-pi, pi], got {theta}"
        )));
    }
    Ok(())
}
