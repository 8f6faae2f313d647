//! Landmark projection, mean target registration error and the
//! sub-millimeter success rate.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::LandmarkSet;
use crate::projector::DetectorGeometry;
use crate::se3::Pose;

/// Smallest camera-frame depth (mm) accepted by [`project_landmark`].
pub const MIN_DEPTH: f64 = 1e-6;

/// Default mm-per-pixel factor applied to pixel-space errors.
pub const DEFAULT_LAMBDA: f64 = 0.194;

/// Success threshold of [`smrsr`] (mm, strict).
pub const SUCCESS_THRESHOLD_MM: f64 = 1.0;

/// Perspective projection of a world point to detector pixel coordinates.
pub fn project_landmark(geom: &DetectorGeometry, pose: &Pose, point: &Vector3<f64>) -> Result<Vector2<f64>> {
    project_named(geom, pose, point, "point")
}

fn project_named(geom: &DetectorGeometry, pose: &Pose, point: &Vector3<f64>, name: &str) -> Result<Vector2<f64>> {
    let cam = pose.inverse().transform_point(point);
    if !(cam.z > MIN_DEPTH) {
        return Err(Error::Projection {
            name: name.to_string(),
            depth: cam.z,
        });
    }
    let f = geom.focal_length_px();
    let [cx, cy] = geom.principal_point();
    Ok(Vector2::new(cx + f * cam.x / cam.z, cy + f * cam.y / cam.z))
}

/// How a landmark's discrepancy between two poses is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MtreForm {
    /// Distance between the two perspective projections (pixels).
    #[default]
    Projected,
    /// `‖K (T⁻¹ - T̂⁻¹) [L; 1]‖` without the perspective divide, taking the
    /// first two components of the homogeneous difference (pixel·mm units).
    Homogeneous,
}

/// Mean over both views and all landmarks of the landmark projection error,
/// scaled by `lambda` (mm per pixel).
pub fn mtre(
    geom: &DetectorGeometry,
    true_poses: &[Pose; 2],
    est_poses: &[Pose; 2],
    landmarks: &LandmarkSet,
    lambda: f64,
) -> Result<f64> {
    mtre_with(geom, true_poses, est_poses, landmarks, lambda, MtreForm::Projected)
}

pub fn mtre_with(
    geom: &DetectorGeometry,
    true_poses: &[Pose; 2],
    est_poses: &[Pose; 2],
    landmarks: &LandmarkSet,
    lambda: f64,
    form: MtreForm,
) -> Result<f64> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    let mut sum = 0.0;
    for (t, e) in true_poses.iter().zip(est_poses) {
        for (name, p) in landmarks.iter() {
            sum += match form {
                MtreForm::Projected => {
                    (project_named(geom, t, p, name)? - project_named(geom, e, p, name)?).norm()
                }
                MtreForm::Homogeneous => homogeneous_gap(geom, t, e, p),
            };
        }
    }
    Ok(lambda * sum / (2 * landmarks.len()) as f64)
}

fn homogeneous_gap(geom: &DetectorGeometry, t: &Pose, e: &Pose, p: &Vector3<f64>) -> f64 {
    let d = t.inverse().transform_point(p) - e.inverse().transform_point(p);
    let f = geom.focal_length_px();
    let [cx, cy] = geom.principal_point();
    Vector2::new(f * d.x + cx * d.z, f * d.y + cy * d.z).norm()
}

/// Percentage of values strictly below [`SUCCESS_THRESHOLD_MM`].
pub fn smrsr(mtres: &[f64]) -> Result<f64> {
    if mtres.is_empty() {
        return Err(Error::Empty("no mTRE values".into()));
    }
    let hits = mtres.iter().filter(|&&m| m < SUCCESS_THRESHOLD_MM).count();
    Ok(100.0 * hits as f64 / mtres.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseMetric {
    pub id: String,
    pub mtre_mm: f64,
}

/// Per-case mTRE with its aggregates; the stddev divides by the case count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub cases: Vec<CaseMetric>,
    pub mean_mtre: f64,
    pub stddev_mtre: f64,
    pub smrsr_percent: f64,
    pub n_cases: usize,
    pub lambda: f64,
}

impl MetricReport {
    pub fn from_cases(cases: Vec<CaseMetric>, lambda: f64) -> Result<Self> {
        let values: Vec<f64> = cases.iter().map(|c| c.mtre_mm).collect();
        let smrsr_percent = smrsr(&values)?;
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self {
            n_cases: cases.len(),
            cases,
            mean_mtre: mean,
            stddev_mtre: var.sqrt(),
            smrsr_percent,
            lambda,
        })
    }

    /// `mean ± stddev, smrsr%`, as printed in result tables.
    pub fn summary(&self) -> String {
        format!("{:.2} ± {:.2}, {:.0}%", self.mean_mtre, self.stddev_mtre, self.smrsr_percent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::pa_pose;

    fn geom() -> DetectorGeometry {
        DetectorGeometry::centered(1000.0, 101, 81, 0.5).unwrap()
    }

    #[test]
    fn projection_examples() {
        let g = geom();
        let id = Pose::identity();
        let axis = project_landmark(&g, &id, &Vector3::new(0.0, 0.0, 300.0)).unwrap();
        assert_eq!([axis.x, axis.y], g.principal_point());

        let at = |x: f64| project_landmark(&g, &id, &Vector3::new(x, 0.0, 400.0)).unwrap().x - 50.0;
        assert!((at(6.0) - 2.0 * at(3.0)).abs() < 1e-12);

        // at the detector plane the magnification is 1
        let d = 7.0;
        let on_detector = project_landmark(&g, &id, &Vector3::new(0.0, d, 1000.0)).unwrap();
        assert!((on_detector.y - 40.0 - d / 0.5).abs() < 1e-12);

        assert!(matches!(
            project_landmark(&g, &id, &Vector3::new(0.0, 0.0, -1.0)),
            Err(Error::Projection { .. })
        ));
        assert!(project_landmark(&g, &id, &Vector3::new(1.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn mtre_examples() {
        let g = geom();
        let pa = pa_pose(800.0);
        let lm = LandmarkSet::new(vec!["a".into()], vec![Vector3::new(3.0, 0.0, -2.0)]).unwrap();
        assert_eq!(mtre(&g, &[pa, pa], &[pa, pa], &lm, DEFAULT_LAMBDA).unwrap(), 0.0);

        // shifting view 1 so the landmark lands 10 px away along u
        let id = Pose::identity();
        let lm = LandmarkSet::new(vec!["a".into()], vec![Vector3::new(0.0, 0.0, 1000.0)]).unwrap();
        let shifted = Pose::from_translation(Vector3::new(-5.0, 0.0, 0.0));
        let m = mtre(&g, &[id, id], &[shifted, id], &lm, DEFAULT_LAMBDA).unwrap();
        assert!((m - 0.194 * 10.0 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn homogeneous_form_vanishes_at_truth() {
        let g = geom();
        let pa = pa_pose(800.0);
        let lm = LandmarkSet::new(vec!["a".into(), "b".into()], vec![Vector3::new(3.0, 1.0, -2.0), Vector3::zeros()]).unwrap();
        assert_eq!(mtre_with(&g, &[pa, pa], &[pa, pa], &lm, 1.0, MtreForm::Homogeneous).unwrap(), 0.0);
        let moved = Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)) * pa;
        assert!(mtre_with(&g, &[pa, pa], &[moved, pa], &lm, 1.0, MtreForm::Homogeneous).unwrap() > 0.0);
    }

    #[test]
    fn smrsr_examples() {
        assert_eq!(smrsr(&[0.0, 0.0]).unwrap(), 100.0);
        assert_eq!(smrsr(&[0.5, 1.5]).unwrap(), 50.0);
        assert_eq!(smrsr(&[1.0]).unwrap(), 0.0);
        assert!(smrsr(&[]).is_err());
    }

    #[test]
    fn report_aggregates() {
        let cases = [0.5, 1.5, 0.25]
            .iter()
            .enumerate()
            .map(|(i, &m)| CaseMetric { id: format!("case_{i}"), mtre_mm: m })
            .collect();
        let r = MetricReport::from_cases(cases, 1.0).unwrap();
        assert_eq!(r.n_cases, 3);
        assert!((r.mean_mtre - 0.75).abs() < 1e-15);
        let var = (0.0625 + 0.5625 + 0.25) / 3.0;
        assert!((r.stddev_mtre - f64::sqrt(var)).abs() < 1e-15);
        assert!((r.smrsr_percent - 200.0 / 3.0).abs() < 1e-12);
        let zero = MetricReport::from_cases(vec![CaseMetric { id: "a".into(), mtre_mm: 0.0 }], 0.194).unwrap();
        assert_eq!(zero.summary(), "0.00 ± 0.00, 100%");
    }
}
