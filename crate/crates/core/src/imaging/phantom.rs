//! Analytic attenuation phantoms with construction-time landmark ground truth.
//!
//! Shapes are laid out in normalized coordinates `q ∈ [-1, 1]³` relative to
//! the volume half-extent, so the same phantom scales with dims and spacing.
//! The volume is centered on the world origin. Each voxel holds the mean of
//! 3×3×3 sub-samples, giving partial-volume edges instead of hard steps.

use std::str::FromStr;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{centered_origin, LandmarkSet, Volume};
use crate::error::{Error, Result};

pub const MIN_PHANTOM_DIM: usize = 16;

const SUBSAMPLES: usize = 3;
/// Largest seed-driven shift of a shape center, in normalized units.
const JITTER: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhantomKind {
    SpherePair,
    NestedBoxes,
    PelvisLike,
}

impl FromStr for PhantomKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere_pair" => Ok(Self::SpherePair),
            "nested_boxes" => Ok(Self::NestedBoxes),
            "pelvis_like" => Ok(Self::PelvisLike),
            other => Err(Error::InvalidArgument(format!(
                "unknown phantom kind {other:?} (expected sphere_pair, nested_boxes or pelvis_like)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    /// Axis-aligned ellipsoid; semi-axes in mm.
    Ellipsoid {
        center: Vector3<f64>,
        semi_axes: Vector3<f64>,
        value: f64,
    },
    Cuboid {
        lo: Vector3<f64>,
        hi: Vector3<f64>,
        value: f64,
    },
}

impl Shape {
    fn density(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Ellipsoid {
                center,
                semi_axes,
                value,
            } => {
                let d = (p - center).component_div(semi_axes);
                if d.norm_squared() <= 1.0 {
                    *value
                } else {
                    0.0
                }
            }
            Shape::Cuboid { lo, hi, value } => {
                if (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a]) {
                    *value
                } else {
                    0.0
                }
            }
        }
    }
}

/// Maps normalized coordinates to world mm and holds the seeded jitter.
struct Layout {
    half: Vector3<f64>,
    radius_scale: f64,
    rng: ChaCha8Rng,
}

impl Layout {
    fn point(&self, q: [f64; 3]) -> Vector3<f64> {
        Vector3::new(q[0] * self.half.x, q[1] * self.half.y, q[2] * self.half.z)
    }

    fn jittered(&mut self, q: [f64; 3]) -> Vector3<f64> {
        let j: [f64; 3] = std::array::from_fn(|_| self.rng.gen_range(-JITTER..=JITTER));
        self.point([q[0] + j[0], q[1] + j[1], q[2] + j[2]])
    }

    fn sphere(&self, center: Vector3<f64>, radius: f64, value: f64) -> Shape {
        let r = radius * self.radius_scale;
        Shape::Ellipsoid {
            center,
            semi_axes: Vector3::new(r, r, r),
            value,
        }
    }

    fn ellipsoid(&self, center: Vector3<f64>, semi: [f64; 3], value: f64) -> Shape {
        Shape::Ellipsoid {
            center,
            semi_axes: self.point(semi),
            value,
        }
    }
}

/// Builds a deterministic phantom and its named landmarks.
///
/// Every kind is asymmetric under a quarter turn about z, and carries at
/// least seven landmarks, all inside the volume bounds.
pub fn make_phantom(
    kind: PhantomKind,
    dims: [usize; 3],
    spacing: Vector3<f64>,
    rng_seed: u64,
) -> Result<(Volume, LandmarkSet)> {
    if dims.iter().any(|&d| d < MIN_PHANTOM_DIM) {
        return Err(Error::InvalidArgument(format!(
            "phantom dims must be at least {MIN_PHANTOM_DIM} per axis, got {dims:?}"
        )));
    }
    if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "phantom spacing must be positive, got {:?}",
            spacing.as_slice()
        )));
    }
    let origin = centered_origin(dims, &spacing);
    let half = -origin;
    let mut layout = Layout {
        half,
        radius_scale: half.min(),
        rng: ChaCha8Rng::seed_from_u64(rng_seed),
    };
    let (shapes, landmarks) = match kind {
        PhantomKind::SpherePair => sphere_pair(&mut layout),
        PhantomKind::NestedBoxes => nested_boxes(&mut layout),
        PhantomKind::PelvisLike => pelvis_like(&mut layout),
    };
    let (names, points): (Vec<String>, Vec<Vector3<f64>>) = landmarks
        .into_iter()
        .map(|(n, p)| (n.to_string(), p))
        .unzip();
    let landmarks = LandmarkSet::new(names, points)?;
    let volume = voxelize(&shapes, dims, spacing, origin)?;
    Ok((volume, landmarks))
}

fn voxelize(
    shapes: &[Shape],
    dims: [usize; 3],
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
) -> Result<Volume> {
    let n = SUBSAMPLES as f64;
    let offsets: Vec<f64> = (0..SUBSAMPLES).map(|s| (s as f64 + 0.5) / n - 0.5).collect();
    Volume::from_fn(dims, spacing, origin, |center| {
        let mut acc = 0.0;
        for &dz in &offsets {
            for &dy in &offsets {
                for &dx in &offsets {
                    let p = center
                        + Vector3::new(dx * spacing.x, dy * spacing.y, dz * spacing.z);
                    acc += shapes.iter().map(|s| s.density(&p)).sum::<f64>();
                }
            }
        }
        // rounded through f32 so the volume survives the f32 file format exactly
        f64::from((acc / (n * n * n)) as f32)
    })
}

type Landmarks = Vec<(&'static str, Vector3<f64>)>;

fn sphere_pair(l: &mut Layout) -> (Vec<Shape>, Landmarks) {
    let body_center = l.jittered([0.02, -0.03, 0.0]);
    let body_semi = [0.80, 0.62, 0.85];
    let center_a = l.jittered([-0.30, 0.12, 0.25]);
    let center_b = l.jittered([0.35, -0.15, -0.30]);
    let (radius_a, radius_b) = (0.28, 0.18);
    let shapes = vec![
        l.ellipsoid(body_center, body_semi, 0.018),
        l.sphere(center_a, radius_a, 0.030),
        l.sphere(center_b, radius_b, 0.050),
    ];
    let ra = radius_a * l.radius_scale;
    let rb = radius_b * l.radius_scale;
    let tip = |axis: usize| {
        let mut q = [0.0; 3];
        q[axis] = 0.7 * body_semi[axis];
        body_center + l.point(q)
    };
    let landmarks = vec![
        ("center_A", center_a),
        ("center_B", center_b),
        ("pole_A", center_a + Vector3::new(0.0, 0.0, ra)),
        ("pole_B", center_b - Vector3::new(0.0, 0.0, rb)),
        ("midpoint_AB", (center_a + center_b) * 0.5),
        ("body_center", body_center),
        ("body_tip_x", tip(0)),
        ("body_tip_y", tip(1)),
        ("body_tip_z", tip(2)),
    ];
    (shapes, landmarks)
}

fn nested_boxes(l: &mut Layout) -> (Vec<Shape>, Landmarks) {
    let shift = l.jittered([0.0, 0.0, 0.0]);
    let b = |lo: [f64; 3], hi: [f64; 3]| (l.point(lo) + shift, l.point(hi) + shift);
    let (outer_lo, outer_hi) = b([-0.70, -0.55, -0.75], [0.70, 0.60, 0.70]);
    let (inner_lo, inner_hi) = b([-0.35, -0.20, -0.40], [0.15, 0.30, 0.10]);
    let (insert_lo, insert_hi) = b([0.25, -0.45, 0.20], [0.50, -0.20, 0.50]);
    let shapes = vec![
        Shape::Cuboid {
            lo: outer_lo,
            hi: outer_hi,
            value: 0.015,
        },
        Shape::Cuboid {
            lo: inner_lo,
            hi: inner_hi,
            value: 0.025,
        },
        Shape::Cuboid {
            lo: insert_lo,
            hi: insert_hi,
            value: 0.040,
        },
    ];
    let landmarks = vec![
        ("outer_lo", outer_lo),
        ("outer_hi", outer_hi),
        ("inner_lo", inner_lo),
        ("inner_hi", inner_hi),
        ("inner_center", (inner_lo + inner_hi) * 0.5),
        ("insert_lo", insert_lo),
        ("insert_hi", insert_hi),
        ("insert_center", (insert_lo + insert_hi) * 0.5),
    ];
    (shapes, landmarks)
}

/// Coarse pelvis stand-in: soft-tissue body, two femoral heads, iliac wings,
/// sacrum and pubic symphysis, with the fourteen bilateral landmark roles of
/// the hip CT benchmark. Left and right differ slightly.
fn pelvis_like(l: &mut Layout) -> (Vec<Shape>, Landmarks) {
    let body = l.jittered([0.0, 0.02, 0.0]);
    let l_fh = l.jittered([-0.45, 0.05, -0.45]);
    let r_fh = l.jittered([0.43, 0.07, -0.47]);
    let l_wing = l.jittered([-0.50, 0.00, 0.30]);
    let r_wing = l.jittered([0.52, 0.02, 0.28]);
    let sacrum = l.jittered([0.00, 0.35, 0.15]);
    let pubis = l.jittered([0.02, -0.35, -0.35]);
    let shapes = vec![
        l.ellipsoid(body, [0.85, 0.55, 0.80], 0.015),
        l.sphere(l_fh, 0.14, 0.040),
        l.sphere(r_fh, 0.13, 0.040),
        l.ellipsoid(l_wing, [0.25, 0.08, 0.35], 0.035),
        l.ellipsoid(r_wing, [0.24, 0.09, 0.33], 0.035),
        l.ellipsoid(sacrum, [0.15, 0.12, 0.30], 0.030),
        l.ellipsoid(pubis, [0.18, 0.08, 0.12], 0.035),
    ];
    let mut landmarks: Landmarks = vec![("L.FH", l_fh), ("R.FH", r_fh)];
    for (side, sign, wing) in [("L", -1.0, l_wing), ("R", 1.0, r_wing)] {
        let at = |q: [f64; 3]| l.point([sign * q[0], q[1], q[2]]);
        let entries: [(&'static str, &'static str, Vector3<f64>); 6] = [
            ("L.GSN", "R.GSN", at([0.30, 0.30, 0.00])),
            ("L.IOF", "R.IOF", at([0.25, -0.20, -0.60])),
            ("L.MOF", "R.MOF", at([0.25, -0.15, -0.45])),
            ("L.SPS", "R.SPS", pubis + at([0.05, 0.0, 0.10])),
            ("L.IPS", "R.IPS", pubis + at([0.05, 0.0, -0.10])),
            ("L.ASIS", "R.ASIS", wing + at([0.10, -0.08, 0.15])),
        ];
        for (left, right, p) in entries {
            landmarks.push((if side == "L" { left } else { right }, p));
        }
    }
    (shapes, landmarks)
}

#[cfg(test)]
mod tests {
    use super::*;

    const KINDS: [PhantomKind; 3] = [
        PhantomKind::SpherePair,
        PhantomKind::NestedBoxes,
        PhantomKind::PelvisLike,
    ];

    #[test]
    fn sphere_pair_landmarks_are_construction_centers() {
        let (vol, lm) = make_phantom(
            PhantomKind::SpherePair,
            [32, 32, 32],
            Vector3::new(2.0, 2.0, 2.0),
            5,
        )
        .unwrap();
        let a = *lm.get("center_A").unwrap();
        let b = *lm.get("center_B").unwrap();
        // sphere A adds 0.030 on top of the 0.018 body; B adds 0.050
        assert!((vol.sample_nearest(&a) - 0.048).abs() < 1e-6);
        assert!((vol.sample_nearest(&b) - 0.068).abs() < 1e-6);
    }

    #[test]
    fn phantoms_are_deterministic_with_landmarks_inside() {
        for kind in KINDS {
            let s = Vector3::new(1.0, 1.0, 1.5);
            let (v1, l1) = make_phantom(kind, [24, 20, 16], s, 3).unwrap();
            let (v2, l2) = make_phantom(kind, [24, 20, 16], s, 3).unwrap();
            assert_eq!(v1, v2);
            assert_eq!(l1, l2);
            assert!(l1.len() >= 7);
            for (name, p) in l1.iter() {
                assert!(v1.contains(p), "{kind:?} landmark {name} outside volume");
            }
            let (v3, _) = make_phantom(kind, [24, 20, 16], s, 4).unwrap();
            assert_ne!(v1, v3);
        }
    }

    #[test]
    fn pelvis_has_fourteen_bilateral_landmarks() {
        let (_, lm) =
            make_phantom(PhantomKind::PelvisLike, [16, 16, 16], Vector3::new(1.0, 1.0, 1.0), 0)
                .unwrap();
        assert_eq!(lm.len(), 14);
        for name in ["L.FH", "R.FH", "L.ASIS", "R.ASIS", "L.IPS", "R.GSN"] {
            assert!(lm.get(name).is_some(), "missing {name}");
        }
    }

    #[test]
    fn rejects_small_dims() {
        let err = make_phantom(PhantomKind::SpherePair, [16, 15, 16], Vector3::new(1.0, 1.0, 1.0), 0);
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("pelvis_like".parse::<PhantomKind>().unwrap(), PhantomKind::PelvisLike);
        assert!("cube".parse::<PhantomKind>().is_err());
    }
}
