//! Volume and image containers, their file formats, landmark sets, synthetic
//! phantoms and intensity normalization.

mod io;
mod phantom;

pub use io::{
    load_image, load_landmarks, load_volume, save_image, save_image_as, save_landmarks,
    save_pgm, save_volume, ImageDtype,
};
pub use phantom::{make_phantom, PhantomKind, MIN_PHANTOM_DIM};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn nonzero_support(dims: [usize; 3], data: &[f64]) -> Option<([usize; 3], [usize; 3])> {
    let mut lo = dims;
    let mut hi = [0usize; 3];
    let mut voxels = data.iter();
    for k in 0..dims[2] {
        for j in 0..dims[1] {
            for i in 0..dims[0] {
                if *voxels.next().expect("data length checked") != 0.0 {
                    for (a, idx) in [i, j, k].into_iter().enumerate() {
                        lo[a] = lo[a].min(idx);
                        hi[a] = hi[a].max(idx + 1);
                    }
                }
            }
        }
    }
    (hi[0] > 0).then_some((lo, hi))
}

/// Scalar attenuation grid (1/mm), x fastest, then y, then z. Values are
/// held in f64; the file format stores f32.
///
/// Voxel `(i, j, k)` covers the world cell
/// `[origin + (i, j, k) * spacing, origin + (i + 1, j + 1, k + 1) * spacing)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: Vector3<f64>,
    origin: Vector3<f64>,
    data: Vec<f64>,
    support: Option<([usize; 3], [usize; 3])>,
}

impl Volume {
    pub fn new(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Vector3<f64>,
        data: Vec<f64>,
    ) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("volume dims must be positive, got {dims:?}")));
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "volume spacing must be positive, got {:?}",
                spacing.as_slice()
            )));
        }
        if !origin.iter().all(|o| o.is_finite()) {
            return Err(Error::InvalidArgument("volume origin must be finite".into()));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} voxels"),
                found: format!("{} voxels", data.len()),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "attenuation values must be finite and >= 0, found {bad}"
            )));
        }
        let support = nonzero_support(dims, &data);
        Ok(Self {
            dims,
            spacing,
            origin,
            data,
            support,
        })
    }

    /// Fills each voxel with `f(world position of the voxel center)`.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: Vector3<f64>,
        origin: Vector3<f64>,
        f: impl Fn(Vector3<f64>) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    let c = origin
                        + Vector3::new(
                            (i as f64 + 0.5) * spacing.x,
                            (j as f64 + 0.5) * spacing.y,
                            (k as f64 + 0.5) * spacing.z,
                        );
                    data.push(f(c));
                }
            }
        }
        Self::new(dims, spacing, origin, data)
    }

    /// Zero-filled volume whose bounding box is centered on the world origin.
    pub fn centered_zeros(dims: [usize; 3], spacing: Vector3<f64>) -> Result<Self> {
        let origin = centered_origin(dims, &spacing);
        Self::new(dims, spacing, origin, vec![0.0; dims.iter().product()])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> &Vector3<f64> {
        &self.spacing
    }

    pub fn origin(&self) -> &Vector3<f64> {
        &self.origin
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Physical size of the grid in mm.
    pub fn extent(&self) -> Vector3<f64> {
        Vector3::new(
            self.dims[0] as f64 * self.spacing.x,
            self.dims[1] as f64 * self.spacing.y,
            self.dims[2] as f64 * self.spacing.z,
        )
    }

    /// Half-open voxel index box `[lo, hi)` enclosing every nonzero voxel;
    /// `None` for an all-zero volume.
    pub fn support(&self) -> Option<([usize; 3], [usize; 3])> {
        self.support
    }

    /// World-space box of [`Volume::support`].
    pub fn support_bounds(&self) -> Option<(Vector3<f64>, Vector3<f64>)> {
        let (lo, hi) = self.support?;
        let corner = |idx: [usize; 3]| {
            Vector3::from_fn(|a, _| self.origin[a] + idx[a] as f64 * self.spacing[a])
        };
        Some((corner(lo), corner(hi)))
    }

    /// World-space axis-aligned bounding box `(lo, hi)`.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        (self.origin, self.origin + self.extent())
    }

    pub fn center(&self) -> Vector3<f64> {
        self.origin + self.extent() * 0.5
    }

    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        let (lo, hi) = self.bounds();
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }

    #[inline]
    pub fn linear_index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.linear_index(i, j, k)]
    }

    /// Nearest-voxel lookup with floor semantics; zero outside the grid.
    pub fn sample_nearest(&self, p: &Vector3<f64>) -> f64 {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.spacing[a]).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return 0.0;
            }
            idx[a] = f as usize;
        }
        self.value(idx[0], idx[1], idx[2])
    }

    /// Copy with every attenuation value multiplied by `factor >= 0`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.dims,
            self.spacing,
            self.origin,
            self.data.iter().map(|v| v * factor).collect(),
        )
    }

    /// Same grid and values, moved so that its origin is `origin`.
    pub fn with_origin(&self, origin: Vector3<f64>) -> Self {
        Self {
            origin,
            ..self.clone()
        }
    }
}

pub(crate) fn centered_origin(dims: [usize; 3], spacing: &Vector3<f64>) -> Vector3<f64> {
    -Vector3::new(
        dims[0] as f64 * spacing.x,
        dims[1] as f64 * spacing.y,
        dims[2] as f64 * spacing.z,
    ) * 0.5
}

/// Row-major 2D scalar image; `data[v * width + u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixel_spacing: f64,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixel_spacing: f64, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        if !(pixel_spacing.is_finite() && pixel_spacing > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pixel spacing must be positive, got {pixel_spacing}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels", width * height),
                found: format!("{} pixels", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image values must be finite".into()));
        }
        Ok(Self {
            width,
            height,
            pixel_spacing,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, pixel_spacing: f64, value: f64) -> Result<Self> {
        Self::new(width, height, pixel_spacing, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_spacing(&self) -> f64 {
        self.pixel_spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.pixel_spacing == other.pixel_spacing
    }

    /// Applies `f` to every pixel.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(
            self.width,
            self.height,
            self.pixel_spacing,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Affine rescale of the intensity range onto `[0, 1]`.
pub fn normalize_image(image: &Image) -> Result<Image> {
    let (lo, hi) = image.min_max();
    if hi <= lo {
        return Err(Error::DegenerateImage(format!(
            "cannot normalize a constant image (value {lo})"
        )));
    }
    let range = hi - lo;
    image.map(|v| (v - lo) / range)
}

/// Named 3D points in the CT world frame (mm).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LandmarkRepr", into = "LandmarkRepr")]
pub struct LandmarkSet {
    names: Vec<String>,
    points: Vec<Vector3<f64>>,
}

#[derive(Serialize, Deserialize)]
struct LandmarkRepr {
    names: Vec<String>,
    points: Vec<[f64; 3]>,
}

impl TryFrom<LandmarkRepr> for LandmarkSet {
    type Error = Error;
    fn try_from(r: LandmarkRepr) -> Result<Self> {
        LandmarkSet::new(r.names, r.points.into_iter().map(Vector3::from).collect())
    }
}

impl From<LandmarkSet> for LandmarkRepr {
    fn from(l: LandmarkSet) -> Self {
        LandmarkRepr {
            names: l.names,
            points: l.points.iter().map(|p| [p.x, p.y, p.z]).collect(),
        }
    }
}

impl LandmarkSet {
    pub fn new(names: Vec<String>, points: Vec<Vector3<f64>>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Empty("landmark set needs at least one point".into()));
        }
        if names.len() != points.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} landmark points", names.len()),
                found: format!("{} points", points.len()),
            });
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::DuplicateLandmark(n.clone()));
            }
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::InvalidArgument("landmark coordinates must be finite".into()));
        }
        Ok(Self { names, points })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn get(&self, name: &str) -> Option<&Vector3<f64>> {
        self.names.iter().position(|n| n == name).map(|i| &self.points[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Vector3<f64>)> {
        self.names.iter().map(String::as_str).zip(self.points.iter())
    }
}
