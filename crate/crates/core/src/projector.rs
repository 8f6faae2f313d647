//! DRR rendering: camera geometry, Siddon ray/grid intersection, the line
//! integral of attenuation and the Beer–Lambert intensity mapping.
//!
//! Camera convention: in the camera frame the source sits at the origin and
//! looks along +z; the detector plane is `z = source_to_detector`, with the
//! pixel column index `u` running along +x and the row index `v` along +y.
//! Pixel `(u, v)` is centered at integer coordinates. A [`Pose`] maps camera
//! coordinates to world (CT) coordinates.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Volume};
use crate::se3::{self, Pose, Twist};

/// Detector intrinsics. `source_to_detector` is the focal length in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeometryRepr", into = "GeometryRepr")]
pub struct DetectorGeometry {
    source_to_detector: f64,
    detector_width: usize,
    detector_height: usize,
    pixel_spacing: f64,
    principal_point: [f64; 2],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryRepr {
    source_to_detector: f64,
    detector_width: usize,
    detector_height: usize,
    pixel_spacing: f64,
    #[serde(default)]
    principal_point: Option<[f64; 2]>,
}

impl TryFrom<GeometryRepr> for DetectorGeometry {
    type Error = Error;
    fn try_from(r: GeometryRepr) -> Result<Self> {
        let pp = r.principal_point.unwrap_or_else(|| {
            DetectorGeometry::center_of(r.detector_width, r.detector_height)
        });
        DetectorGeometry::new(
            r.source_to_detector,
            r.detector_width,
            r.detector_height,
            r.pixel_spacing,
            pp,
        )
    }
}

impl From<DetectorGeometry> for GeometryRepr {
    fn from(g: DetectorGeometry) -> Self {
        GeometryRepr {
            source_to_detector: g.source_to_detector,
            detector_width: g.detector_width,
            detector_height: g.detector_height,
            pixel_spacing: g.pixel_spacing,
            principal_point: Some(g.principal_point),
        }
    }
}

impl DetectorGeometry {
    pub fn new(
        source_to_detector: f64,
        detector_width: usize,
        detector_height: usize,
        pixel_spacing: f64,
        principal_point: [f64; 2],
    ) -> Result<Self> {
        if !(source_to_detector.is_finite() && source_to_detector > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "source_to_detector must be positive, got {source_to_detector}"
            )));
        }
        if detector_width == 0 || detector_height == 0 {
            return Err(Error::InvalidArgument(format!(
                "detector size must be positive, got {detector_width}x{detector_height}"
            )));
        }
        if !(pixel_spacing.is_finite() && pixel_spacing > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel_spacing must be positive, got {pixel_spacing}"
            )));
        }
        let [cx, cy] = principal_point;
        let inside = |c: f64, n: usize| c.is_finite() && c >= -0.5 && c <= n as f64 - 0.5;
        if !(inside(cx, detector_width) && inside(cy, detector_height)) {
            return Err(Error::InvalidArgument(format!(
                "principal point {principal_point:?} lies outside the {detector_width}x{detector_height} detector"
            )));
        }
        Ok(Self {
            source_to_detector,
            detector_width,
            detector_height,
            pixel_spacing,
            principal_point,
        })
    }

    /// Geometry with the principal point at the detector center.
    pub fn centered(
        source_to_detector: f64,
        detector_width: usize,
        detector_height: usize,
        pixel_spacing: f64,
    ) -> Result<Self> {
        Self::new(
            source_to_detector,
            detector_width,
            detector_height,
            pixel_spacing,
            Self::center_of(detector_width, detector_height),
        )
    }

    fn center_of(w: usize, h: usize) -> [f64; 2] {
        [(w as f64 - 1.0) * 0.5, (h as f64 - 1.0) * 0.5]
    }

    pub fn source_to_detector(&self) -> f64 {
        self.source_to_detector
    }

    pub fn detector_width(&self) -> usize {
        self.detector_width
    }

    pub fn detector_height(&self) -> usize {
        self.detector_height
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn principal_point(&self) -> [f64; 2] {
        self.principal_point
    }

    pub fn pixel_count(&self) -> usize {
        self.detector_width * self.detector_height
    }

    /// Focal length in pixels.
    pub fn focal_length_px(&self) -> f64 {
        self.source_to_detector / self.pixel_spacing
    }

    /// Camera-frame position of the center of pixel `(u, v)`.
    #[inline]
    fn pixel_in_camera(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.principal_point[0]) * self.pixel_spacing,
            (v - self.principal_point[1]) * self.pixel_spacing,
            self.source_to_detector,
        )
    }
}

/// Standard postero-anterior view: the source sits `source_to_isocenter` mm
/// from the world origin on the -y side and looks along +y. Image `u` follows
/// world +x and image `v` follows world -z.
pub fn pa_pose(source_to_isocenter: f64) -> Pose {
    Pose::from_parts(
        Matrix3::new(1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -1.0, 0.0),
        Vector3::new(0.0, -source_to_isocenter, 0.0),
    )
}

/// Line segment from the X-ray source `s` to a detector point `g`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub source: Vector3<f64>,
    pub target: Vector3<f64>,
}

impl Ray {
    pub fn new(source: Vector3<f64>, target: Vector3<f64>) -> Result<Self> {
        let d = target - source;
        if !(d.norm() > 0.0 && d.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument(
                "ray source and target must be distinct finite points".into(),
            ));
        }
        Ok(Self { source, target })
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.target - self.source
    }

    pub fn length(&self) -> f64 {
        self.direction().norm()
    }

    pub fn at(&self, alpha: f64) -> Vector3<f64> {
        self.source + self.direction() * alpha
    }

    pub fn reversed(&self) -> Ray {
        Ray {
            source: self.target,
            target: self.source,
        }
    }
}

/// Ray from the pose-transformed source through the center of pixel `(u, v)`.
pub fn pixel_ray(geom: &DetectorGeometry, pose: &Pose, u: f64, v: f64) -> Result<Ray> {
    let in_range = |c: f64, n: usize| c.is_finite() && c >= -0.5 && c <= n as f64 - 0.5;
    if !(in_range(u, geom.detector_width) && in_range(v, geom.detector_height)) {
        return Err(Error::InvalidArgument(format!(
            "pixel ({u}, {v}) is outside the {}x{} detector",
            geom.detector_width, geom.detector_height
        )));
    }
    Ok(pixel_ray_unchecked(geom, pose, u, v))
}

#[inline]
fn pixel_ray_unchecked(geom: &DetectorGeometry, pose: &Pose, u: f64, v: f64) -> Ray {
    Ray {
        source: *pose.translation(),
        target: pose.transform_point(&geom.pixel_in_camera(u, v)),
    }
}

/// Parametric interval `[a_min, a_max] ⊂ [0, 1]` of the ray inside the
/// volume's bounding box (slab method). Axes with a zero direction component
/// only test containment.
fn clip_to_volume(ray: &Ray, vol: &Volume) -> Option<(f64, f64)> {
    let (lo, hi) = vol.bounds();
    clip_to_box(ray, &lo, &hi)
}

fn clip_to_box(ray: &Ray, lo: &Vector3<f64>, hi: &Vector3<f64>) -> Option<(f64, f64)> {
    let d = ray.direction();
    let (mut a_min, mut a_max) = (0.0f64, 1.0f64);
    for a in 0..3 {
        let s = ray.source[a];
        if d[a] == 0.0 {
            if s < lo[a] || s > hi[a] {
                return None;
            }
            continue;
        }
        let t0 = (lo[a] - s) / d[a];
        let t1 = (hi[a] - s) / d[a];
        a_min = a_min.max(t0.min(t1));
        a_max = a_max.min(t0.max(t1));
    }
    (a_min < a_max).then_some((a_min, a_max))
}

/// Sorted, deduplicated parameters where the ray meets a voxel-boundary
/// plane inside the volume, including the entry and exit parameters. Empty
/// when the ray misses the volume.
pub fn siddon_intersections(ray: &Ray, vol: &Volume) -> Vec<f64> {
    let Some((a_min, a_max)) = clip_to_volume(ray, vol) else {
        return Vec::new();
    };
    let d = ray.direction();
    let dims = vol.dims();
    let spacing = vol.spacing();
    let origin = vol.origin();
    let mut alphas = vec![a_min, a_max];
    for a in 0..3 {
        if d[a] == 0.0 {
            continue;
        }
        for k in 0..=dims[a] {
            let plane = origin[a] + k as f64 * spacing[a];
            let alpha = (plane - ray.source[a]) / d[a];
            if alpha > a_min && alpha < a_max {
                alphas.push(alpha);
            }
        }
    }
    alphas.sort_by(f64::total_cmp);
    alphas.dedup_by(|b, a| (*b - *a).abs() <= 1e-15 * a.abs().max(1.0));
    alphas
}

/// Line integral of attenuation along the ray:
///
/// `|g - s| · Σ_m (α_{m+1} - α_m) · V[voxel containing the segment midpoint]`
///
/// The sum runs over consecutive plane crossings inside the volume. It is
/// evaluated by stepping voxel to voxel, visiting the crossings of the three
/// plane families in increasing order, which is the same sum as looking up
/// each segment midpoint. Only the box of nonzero voxels is traversed.
/// Returns 0 when the ray misses it.
pub fn attenuate(ray: &Ray, vol: &Volume) -> f64 {
    let Some((box_lo, box_hi)) = vol.support() else {
        return 0.0;
    };
    let (lo, hi) = vol.support_bounds().expect("support exists");
    let Some((a_min, a_max)) = clip_to_box(ray, &lo, &hi) else {
        return 0.0;
    };
    walk(ray, vol, box_lo, box_hi, a_min, a_max)
}

/// Walks voxels of the index box `[box_lo, box_hi)` between the parameters
/// where the ray enters and leaves it.
fn walk(ray: &Ray, vol: &Volume, box_lo: [usize; 3], box_hi: [usize; 3], a_min: f64, a_max: f64) -> f64 {
    let data = vol.data();
    let d = ray.direction();
    let dims = vol.dims();
    let spacing = vol.spacing();
    let origin = vol.origin();
    let strides = [1isize, dims[0] as isize, (dims[0] * dims[1]) as isize];

    // Per axis: the parameter of the next plane crossing, the parameter
    // distance between crossings, the signed change of the linear voxel
    // index per crossing, and how many crossings remain inside the box.
    let entry = ray.source + d * a_min;
    let mut linear = 0isize;
    let mut next = [f64::INFINITY; 3];
    let mut delta = [0.0f64; 3];
    let mut inc = [0isize; 3];
    let mut left = [0usize; 3];
    for a in 0..3 {
        let cell = ((entry[a] - origin[a]) / spacing[a]).floor();
        let idx = cell.clamp(box_lo[a] as f64, (box_hi[a] - 1) as f64) as usize;
        linear += idx as isize * strides[a];
        if d[a] != 0.0 {
            let forward = d[a] > 0.0;
            let plane = idx + usize::from(forward);
            let crossing = (origin[a] + plane as f64 * spacing[a] - ray.source[a]) / d[a];
            next[a] = crossing.max(a_min);
            delta[a] = spacing[a] / d[a].abs();
            inc[a] = if forward { strides[a] } else { -strides[a] };
            left[a] = if forward { box_hi[a] - 1 - idx } else { idx - box_lo[a] };
        }
    }
    let [mut nx, mut ny, mut nz] = next;
    let [mut lx, mut ly, mut lz] = left;
    let [dx, dy, dz] = delta;
    let [ix, iy, iz] = inc;

    // Crossings are visited in nondecreasing order starting from the entry
    // (the first ones are clamped to it), so every segment length
    // `crossing - alpha` is nonnegative. An axis with no crossings left
    // inside the box is parked at infinity; the walk then ends at the exit
    // parameter.
    let mut alpha = a_min;
    let mut sum = 0.0;
    // Handles the crossing `$n` of one plane family. A run of further
    // crossings of the same family that come before any other plane is
    // consumed in a tight loop; those segments all have length `$delta`.
    macro_rules! cross {
        ($n:ident, $left:ident, $delta:ident, $inc:ident, $o1:ident, $o2:ident) => {{
            let value = data[linear as usize];
            if $n >= a_max {
                sum += (a_max - alpha) * value;
                break;
            }
            sum += ($n - alpha) * value;
            alpha = $n;
            if $left == 0 {
                $n = f64::INFINITY;
            } else {
                $left -= 1;
                linear += $inc;
                $n += $delta;
                let limit = $o1.min($o2).min(a_max);
                let mut run = 0.0;
                while $n <= limit && $left > 0 {
                    run += data[linear as usize];
                    alpha = $n;
                    $left -= 1;
                    linear += $inc;
                    $n += $delta;
                }
                sum += run * $delta;
            }
        }};
    }
    loop {
        if nx <= ny && nx <= nz {
            cross!(nx, lx, dx, ix, ny, nz);
        } else if ny <= nz {
            cross!(ny, ly, dy, iy, nx, nz);
        } else {
            cross!(nz, lz, dz, iz, nx, ny);
        }
    }
    sum * d.norm()
}

/// Transmitted energy `e0 · exp(-e_bar)`.
pub fn beer_lambert(e_bar: f64, e0: f64) -> f64 {
    e0 * (-e_bar).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderMode {
    /// Raw line integral of attenuation.
    Attenuation,
    /// Beer–Lambert transmitted intensity with unit source energy.
    #[default]
    Intensity,
}

impl std::str::FromStr for RenderMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attenuation" => Ok(Self::Attenuation),
            "intensity" => Ok(Self::Intensity),
            other => Err(Error::InvalidArgument(format!(
                "unknown render mode {other:?} (expected attenuation or intensity)"
            ))),
        }
    }
}

/// Renders one DRR. Rows are computed in parallel; every pixel is an
/// independent ray, so the output does not depend on the worker count.
pub fn render(vol: &Volume, geom: &DetectorGeometry, pose: &Pose, mode: RenderMode) -> Image {
    let w = geom.detector_width;
    let footprint = volume_footprint(vol, geom, pose);
    let mut data = vec![0.0; geom.pixel_count()];
    data.par_chunks_mut(w).enumerate().for_each(|(v, row)| {
        for (u, out) in row.iter_mut().enumerate() {
            let e_bar = if footprint.contains(u, v) {
                attenuate(&pixel_ray_unchecked(geom, pose, u as f64, v as f64), vol)
            } else {
                0.0
            };
            *out = match mode {
                RenderMode::Attenuation => e_bar,
                RenderMode::Intensity => beer_lambert(e_bar, 1.0),
            };
        }
    });
    Image::new(w, geom.detector_height, geom.pixel_spacing, data)
        .expect("rendered values are finite")
}

/// Pixel rectangle outside of which no ray meets the volume.
struct Footprint {
    u: (f64, f64),
    v: (f64, f64),
}

impl Footprint {
    fn contains(&self, u: usize, v: usize) -> bool {
        let (u, v) = (u as f64, v as f64);
        u >= self.u.0 && u <= self.u.1 && v >= self.v.0 && v <= self.v.1
    }
}

/// Bounding rectangle of the projected corners of the nonzero-voxel box,
/// widened by two pixels. A ray that meets the box does so at a convex
/// combination of the corners, whose projection lies inside this rectangle
/// when every corner is in front of the source. Otherwise the whole detector
/// is returned.
fn volume_footprint(vol: &Volume, geom: &DetectorGeometry, pose: &Pose) -> Footprint {
    const MARGIN: f64 = 2.0;
    let everything = Footprint {
        u: (f64::NEG_INFINITY, f64::INFINITY),
        v: (f64::NEG_INFINITY, f64::INFINITY),
    };
    let Some((lo, hi)) = vol.support_bounds() else {
        return Footprint {
            u: (f64::INFINITY, f64::NEG_INFINITY),
            v: (f64::INFINITY, f64::NEG_INFINITY),
        };
    };
    let to_camera = pose.inverse();
    let f = geom.focal_length_px();
    let [cx, cy] = geom.principal_point;
    let mut fp = Footprint {
        u: (f64::INFINITY, f64::NEG_INFINITY),
        v: (f64::INFINITY, f64::NEG_INFINITY),
    };
    for corner in 0..8 {
        let pick = |bit: usize, a: usize| if corner & bit == 0 { lo[a] } else { hi[a] };
        let p = Vector3::new(pick(1, 0), pick(2, 1), pick(4, 2));
        let c = to_camera.transform_point(&p);
        if !(c.z > 0.0) {
            return everything;
        }
        let (u, v) = (cx + f * c.x / c.z, cy + f * c.y / c.z);
        fp.u = (fp.u.0.min(u - MARGIN), fp.u.1.max(u + MARGIN));
        fp.v = (fp.v.0.min(v - MARGIN), fp.v.1.max(v + MARGIN));
    }
    fp
}

/// Renders at `exp(delta) · base_pose`.
pub fn render_at_twist(
    vol: &Volume,
    geom: &DetectorGeometry,
    base_pose: &Pose,
    delta: &Twist,
    mode: RenderMode,
) -> Result<Image> {
    let pose = se3::compose(&se3::exp(delta)?, base_pose);
    Ok(render(vol, geom, &pose, mode))
}
