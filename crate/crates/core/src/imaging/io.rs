//! Raw + JSON sidecar file formats.
//!
//! * volume: `<name>.vol.json` `{dims, spacing, origin, dtype: "f32le"}` and
//!   `<name>.vol.raw` (x fastest, then y, then z)
//! * image: `<name>.img.json` `{width, height, pixel_spacing, dtype}` and
//!   `<name>.img.raw` (row-major)
//! * landmarks: `{names: [...], points: [[x, y, z], ...]}`

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::{Image, LandmarkSet, Volume};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ImageDtype {
    #[default]
    #[serde(rename = "f32le")]
    F32Le,
    /// Lossless for in-memory images, which are held in f64.
    #[serde(rename = "f64le")]
    F64Le,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    dtype: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageHeader {
    width: usize,
    height: usize,
    pixel_spacing: f64,
    dtype: ImageDtype,
}

/// Resolves `(sidecar, payload)` paths from either file or the bare stem.
fn sidecar_paths(path: &Path, kind: &str) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let json_suffix = format!(".{kind}.json");
    let raw_suffix = format!(".{kind}.raw");
    let stem = s
        .strip_suffix(&json_suffix)
        .or_else(|| s.strip_suffix(&raw_suffix))
        .unwrap_or(&s);
    (
        PathBuf::from(format!("{stem}{json_suffix}")),
        PathBuf::from(format!("{stem}{raw_suffix}")),
    )
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn check_spacing(path: &Path, spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(Error::InvalidSpacing {
            path: path.to_path_buf(),
            spacing,
        })
    }
}

fn read_words<const N: usize>(path: &Path, expected: usize) -> Result<Vec<[u8; N]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % N != 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            message: format!("{} bytes is not a whole number of {N}-byte values", bytes.len()),
        });
    }
    let found = bytes.len() / N;
    if found != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(bytes
        .chunks_exact(N)
        .map(|c| c.try_into().expect("chunk of N bytes"))
        .collect())
}

/// Reads a volume given its sidecar, payload, or stem path.
pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (json, raw) = sidecar_paths(path.as_ref(), "vol");
    let header: VolumeHeader = read_json(&json)?;
    if header.dtype != "f32le" {
        return Err(Error::Malformed {
            path: json,
            message: format!("unsupported dtype {:?}, expected \"f32le\"", header.dtype),
        });
    }
    check_spacing(&json, header.spacing)?;
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::Malformed {
            path: json,
            message: format!("dims must be positive, got {:?}", header.dims),
        });
    }
    let n = header.dims.iter().product();
    let data: Vec<f64> = read_words::<4>(&raw, n)?
        .into_iter()
        .map(|b| f64::from(f32::from_le_bytes(b)))
        .collect();
    Volume::new(
        header.dims,
        Vector3::from(header.spacing),
        Vector3::from(header.origin),
        data,
    )
    .map_err(|e| Error::Malformed {
        path: raw,
        message: e.to_string(),
    })
}

/// Writes the f32le format. Values that are not exactly representable in
/// f32 are rounded; phantoms are generated on f32 values so they roundtrip
/// bit for bit.
pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let (json, raw) = sidecar_paths(path.as_ref(), "vol");
    let header = VolumeHeader {
        dims: volume.dims(),
        spacing: [volume.spacing().x, volume.spacing().y, volume.spacing().z],
        origin: [volume.origin().x, volume.origin().y, volume.origin().z],
        dtype: "f32le".into(),
    };
    let bytes: Vec<u8> = volume
        .data()
        .iter()
        .flat_map(|&v| (v as f32).to_le_bytes())
        .collect();
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    write_json(&json, &header)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let (json, raw) = sidecar_paths(path.as_ref(), "img");
    let header: ImageHeader = read_json(&json)?;
    let n = header.width * header.height;
    let data: Vec<f64> = match header.dtype {
        ImageDtype::F32Le => read_words::<4>(&raw, n)?
            .into_iter()
            .map(|b| f64::from(f32::from_le_bytes(b)))
            .collect(),
        ImageDtype::F64Le => read_words::<8>(&raw, n)?
            .into_iter()
            .map(f64::from_le_bytes)
            .collect(),
    };
    Image::new(header.width, header.height, header.pixel_spacing, data).map_err(|e| {
        Error::Malformed {
            path: json,
            message: e.to_string(),
        }
    })
}

/// Writes an image as little-endian f32, narrowing the in-memory f64 values.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_image_as(image, path, ImageDtype::F32Le)
}

pub fn save_image_as(image: &Image, path: impl AsRef<Path>, dtype: ImageDtype) -> Result<()> {
    let (json, raw) = sidecar_paths(path.as_ref(), "img");
    let bytes: Vec<u8> = match dtype {
        ImageDtype::F32Le => image
            .data()
            .iter()
            .flat_map(|&v| (v as f32).to_le_bytes())
            .collect(),
        ImageDtype::F64Le => image.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    write_json(
        &json,
        &ImageHeader {
            width: image.width(),
            height: image.height(),
            pixel_spacing: image.pixel_spacing(),
            dtype,
        },
    )
}

/// 16-bit binary PGM; values in `[0, 1]` map linearly onto `[0, 65535]`,
/// anything outside is clamped.
pub fn save_pgm(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let pixels: Vec<u16> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let mut bytes = format!("P5\n{} {}\n65535\n", image.width(), image.height()).into_bytes();
    bytes.extend(pixels.iter().flat_map(|p| p.to_be_bytes()));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_landmarks(path: impl AsRef<Path>) -> Result<LandmarkSet> {
    let path = path.as_ref();
    // parsed without validation so duplicates and length mismatches surface
    // as their own error variants rather than as malformed JSON
    #[derive(Deserialize)]
    struct Raw {
        names: Vec<String>,
        points: Vec<[f64; 3]>,
    }
    let raw: Raw = read_json(path)?;
    LandmarkSet::new(raw.names, raw.points.into_iter().map(Vector3::from).collect())
}

pub fn save_landmarks(landmarks: &LandmarkSet, path: impl AsRef<Path>) -> Result<()> {
    write_json(path.as_ref(), landmarks)
}
