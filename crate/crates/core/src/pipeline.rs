//! Synthetic registration studies: sample view pairs around a base pose,
//! render their fixed images, initialize, refine, and report mTRE before and
//! after refinement.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{mtre, CaseMetric, MetricReport, DEFAULT_LAMBDA};
use crate::imaging::{make_phantom, normalize_image, Image, LandmarkSet, PhantomKind, Volume};
use crate::projector::{pa_pose, render, DetectorGeometry, RenderMode};
use crate::register::{
    fine_register, fine_register_coupled, init_fixed_offset, init_multistart, init_perturbed,
    load_external_poses, RefineConfig, RegistrationResult,
};
use crate::se3::{self, Pose, Twist, TwistDistribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Two independently perturbed views, `T_i = exp(eps_i) · T_base`.
    #[default]
    Temporal,
    /// A view and its lateral partner, `T_2 = T_trans · T_1`.
    Spatial,
}

/// How the registration is started for each case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Initializer {
    /// The true poses.
    Truth,
    /// `exp(sample) · T_i` per view.
    Perturbed { dist: TwistDistribution },
    /// A left perturbation of exactly the given angle and length, along
    /// seeded random directions.
    FixedOffset { rotation_rad: f64, translation_mm: f64 },
    /// Best of `n_starts` perturbations of the base pose by image match.
    Multistart { dist: TwistDistribution, n_starts: usize },
    /// Poses read from a file, two per case in temporal mode (one per view)
    /// and one per case in spatial mode.
    External { path: PathBuf },
}

fn default_source_to_isocenter() -> f64 {
    800.0
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_lateral_angle() -> f64 {
    std::f64::consts::FRAC_PI_2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub phantom: PhantomKind,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub geometry: DetectorGeometry,
    /// Distance from the source of the base view to the volume center (mm).
    #[serde(default = "default_source_to_isocenter")]
    pub source_to_isocenter: f64,
    /// Overrides the postero-anterior base pose built from
    /// `source_to_isocenter`.
    #[serde(default)]
    pub base_pose: Option<Pose>,
    /// Distribution of the first view's twist around the base pose.
    pub distribution: TwistDistribution,
    #[serde(default)]
    pub mode: Mode,
    /// Rotation between the two views in spatial mode (rad).
    #[serde(default = "default_lateral_angle")]
    pub lateral_angle: f64,
    pub n_cases: usize,
    pub initializer: Initializer,
    #[serde(default)]
    pub refine: RefineConfig,
    /// mm per pixel applied to landmark projection errors.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub rng_seed: u64,
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_cases == 0 {
            return Err(Error::InvalidArgument("n_cases must be at least 1".into()));
        }
        if !(self.source_to_isocenter.is_finite() && self.source_to_isocenter > 0.0) {
            return Err(Error::InvalidArgument("source_to_isocenter must be positive".into()));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::InvalidArgument("lambda must be positive".into()));
        }
        if let Initializer::External { path } = &self.initializer {
            if !path.exists() {
                return Err(Error::MissingFile(path.clone()));
            }
        }
        if let Initializer::Multistart { n_starts: 0, .. } = self.initializer {
            return Err(Error::InvalidArgument("n_starts must be at least 1".into()));
        }
        self.refine.validate()
    }

    pub fn base(&self) -> Pose {
        self.base_pose.unwrap_or_else(|| pa_pose(self.source_to_isocenter))
    }
}

/// Phantom, landmarks and the fixed spatial-mode transform shared by every
/// case of an experiment.
#[derive(Clone, Debug)]
pub struct Study {
    pub volume: Volume,
    pub landmarks: LandmarkSet,
    pub t_trans: Pose,
}

/// The closed-form z rotation of [`se3::pa_to_lat_transform`] taken in the
/// frame whose origin is the volume corner, with the half extent as the
/// rotation center, and expressed in the world frame.
pub fn lateral_transform(volume: &Volume, theta: f64) -> Result<Pose> {
    let corner = *volume.origin();
    let lat = se3::pa_to_lat_transform(theta, volume.extent() * 0.5)?;
    Ok(Pose::from_translation(corner) * lat * Pose::from_translation(-corner))
}

/// Builds the phantom and the inter-view transform of [`lateral_transform`].
pub fn build_study(spec: &ExperimentSpec) -> Result<Study> {
    spec.validate()?;
    let spacing = Vector3::from(spec.spacing);
    let (volume, landmarks) = make_phantom(spec.phantom, spec.dims, spacing, spec.rng_seed)?;
    let t_trans = lateral_transform(&volume, spec.lateral_angle)?;
    Ok(Study {
        volume,
        landmarks,
        t_trans,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub id: String,
    pub index: usize,
    pub seed: u64,
    pub true_poses: [Pose; 2],
    pub fixed: [Image; 2],
    /// Twist of each view around the base pose; in spatial mode only the
    /// first is meaningful and the second equals it.
    pub view_twists: [Twist; 2],
    /// Inter-view twist, `view_twists[1] - view_twists[0]` (zero in spatial
    /// mode).
    pub eps: Twist,
}

fn case_seed(spec: &ExperimentSpec, index: usize) -> u64 {
    spec.rng_seed ^ index as u64
}

/// Independent sub-seeds for the draws of one case.
fn sub_seeds(seed: u64) -> [u64; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    [rng.next_u64(), rng.next_u64(), rng.next_u64(), rng.next_u64()]
}

/// Draws one case's true poses and renders its fixed images.
pub fn generate_case(spec: &ExperimentSpec, study: &Study, index: usize) -> Result<Case> {
    let seed = case_seed(spec, index);
    let [s_eps1, s_eps, _, _] = sub_seeds(seed);
    let base = spec.base();
    let eps1 = se3::sample_twist(&spec.distribution, s_eps1);
    let (eps2, eps, true_poses) = match spec.mode {
        Mode::Temporal => {
            let (eps2, eps) = se3::sample_second_view(&eps1, &spec.distribution, s_eps);
            let t1 = se3::compose(&se3::exp(&eps1)?, &base);
            let t2 = se3::compose(&se3::exp(&eps2)?, &base);
            (eps2, eps, [t1, t2])
        }
        Mode::Spatial => {
            let t1 = se3::compose(&se3::exp(&eps1)?, &base);
            (eps1, Twist::zero(), [t1, study.t_trans * t1])
        }
    };
    let fixed = true_poses.map(|t| render(&study.volume, &spec.geometry, &t, RenderMode::Intensity));
    Ok(Case {
        id: format!("case_{index:04}"),
        index,
        seed,
        true_poses,
        fixed,
        view_twists: [eps1, eps2],
        eps,
    })
}

/// All cases of the experiment, in index order.
pub fn generate_cases(spec: &ExperimentSpec, study: &Study) -> Result<Vec<Case>> {
    (0..spec.n_cases).map(|i| generate_case(spec, study, i)).collect()
}

fn initial_poses(
    spec: &ExperimentSpec,
    study: &Study,
    case: &Case,
    external: Option<&[Pose]>,
) -> Result<[Pose; 2]> {
    let [_, _, s1, s2] = sub_seeds(case.seed);
    let t = &case.true_poses;
    let geom = &spec.geometry;
    let coupled = |p1: Pose| [p1, study.t_trans * p1];
    Ok(match (&spec.initializer, spec.mode) {
        (Initializer::Truth, _) => *t,
        (Initializer::Perturbed { dist }, Mode::Temporal) => {
            [init_perturbed(&t[0], dist, s1)?, init_perturbed(&t[1], dist, s2)?]
        }
        (Initializer::Perturbed { dist }, Mode::Spatial) => coupled(init_perturbed(&t[0], dist, s1)?),
        (Initializer::FixedOffset { rotation_rad, translation_mm }, Mode::Temporal) => [
            init_fixed_offset(&t[0], *rotation_rad, *translation_mm, s1)?,
            init_fixed_offset(&t[1], *rotation_rad, *translation_mm, s2)?,
        ],
        (Initializer::FixedOffset { rotation_rad, translation_mm }, Mode::Spatial) => {
            coupled(init_fixed_offset(&t[0], *rotation_rad, *translation_mm, s1)?)
        }
        (Initializer::Multistart { dist, n_starts }, mode) => {
            let base = spec.base();
            let p1 = init_multistart(&study.volume, geom, &case.fixed[0], &base, dist, *n_starts, s1)?;
            match mode {
                Mode::Temporal => [
                    p1,
                    init_multistart(&study.volume, geom, &case.fixed[1], &base, dist, *n_starts, s2)?,
                ],
                Mode::Spatial => coupled(p1),
            }
        }
        (Initializer::External { .. }, mode) => {
            let poses = external.expect("external poses are loaded up front");
            match mode {
                Mode::Temporal => [poses[2 * case.index], poses[2 * case.index + 1]],
                Mode::Spatial => coupled(poses[case.index]),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub mtre_before_mm: f64,
    pub mtre_after_mm: f64,
    pub result: RegistrationResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseFailure {
    pub id: String,
    pub error: String,
    pub numerical: bool,
}

/// Metrics before and after refinement over the cases that completed.
/// Failed cases are listed separately and excluded from both reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub n_requested: usize,
    pub before: Option<MetricReport>,
    pub after: Option<MetricReport>,
    pub failures: Vec<CaseFailure>,
    pub cases: Vec<CaseOutcome>,
}

impl ExperimentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is serializable")
    }
}

/// Runs every case on a pool of `workers` threads. The report does not
/// depend on the worker count. With `overlay_dir` set, a PNG overlay of each
/// refined view is written there.
pub fn run_experiment(spec: &ExperimentSpec, workers: usize, overlay_dir: Option<&Path>) -> Result<ExperimentReport> {
    let study = build_study(spec)?;
    let external = match &spec.initializer {
        Initializer::External { path } => {
            let poses = load_external_poses(path)?;
            let needed = match spec.mode {
                Mode::Temporal => 2 * spec.n_cases,
                Mode::Spatial => spec.n_cases,
            };
            if poses.len() != needed {
                return Err(Error::LengthMismatch {
                    path: path.clone(),
                    expected: needed,
                    found: poses.len(),
                });
            }
            Some(poses)
        }
        _ => None,
    };
    if let Some(dir) = overlay_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {workers} workers: {e}")))?;

    let outcomes: Vec<(String, Result<CaseOutcome>)> = pool.install(|| {
        (0..spec.n_cases)
            .into_par_iter()
            .map(|i| {
                let id = format!("case_{i:04}");
                let outcome = run_case(spec, &study, i, external.as_deref(), overlay_dir);
                (id, outcome)
            })
            .collect()
    });

    let mut cases = Vec::new();
    let mut failures = Vec::new();
    for (id, outcome) in outcomes {
        match outcome {
            Ok(c) => cases.push(c),
            Err(e) => failures.push(CaseFailure {
                id,
                numerical: e.is_numerical(),
                error: e.to_string(),
            }),
        }
    }
    let report = |f: fn(&CaseOutcome) -> f64| -> Result<Option<MetricReport>> {
        if cases.is_empty() {
            return Ok(None);
        }
        let metrics = cases
            .iter()
            .map(|c| CaseMetric {
                id: c.id.clone(),
                mtre_mm: f(c),
            })
            .collect();
        MetricReport::from_cases(metrics, spec.lambda).map(Some)
    };
    Ok(ExperimentReport {
        mode: spec.mode,
        n_requested: spec.n_cases,
        before: report(|c| c.mtre_before_mm)?,
        after: report(|c| c.mtre_after_mm)?,
        failures,
        cases,
    })
}

fn run_case(
    spec: &ExperimentSpec,
    study: &Study,
    index: usize,
    external: Option<&[Pose]>,
    overlay_dir: Option<&Path>,
) -> Result<CaseOutcome> {
    let case = generate_case(spec, study, index)?;
    let init = initial_poses(spec, study, &case, external)?;
    let geom = &spec.geometry;
    let result = match spec.mode {
        Mode::Temporal => fine_register(&study.volume, geom, &case.fixed, &init, &spec.refine)?,
        Mode::Spatial => fine_register_coupled(
            &study.volume,
            geom,
            &case.fixed,
            &init[0],
            &study.t_trans,
            &spec.refine,
        )?,
    };
    let refined = [result.refined[0], result.refined[1]];
    let before = mtre(geom, &case.true_poses, &init, &study.landmarks, spec.lambda)?;
    let after = mtre(geom, &case.true_poses, &refined, &study.landmarks, spec.lambda)?;
    if let Some(dir) = overlay_dir {
        for v in 0..2 {
            let moving = render(&study.volume, geom, &refined[v], RenderMode::Intensity);
            let path = dir.join(format!("{}_view{}.png", case.id, v + 1));
            write_overlay(&case.fixed[v], &moving, &path)?;
        }
    }
    Ok(CaseOutcome {
        id: case.id,
        mtre_before_mm: before,
        mtre_after_mm: after,
        result,
    })
}

/// Central-difference gradient magnitude, zero on the border.
pub fn gradient_magnitude(image: &Image) -> Image {
    let (w, h) = (image.width(), image.height());
    let mut out = vec![0.0; w * h];
    for v in 1..h.saturating_sub(1) {
        for u in 1..w.saturating_sub(1) {
            let gx = image.get(u + 1, v) - image.get(u - 1, v);
            let gy = image.get(u, v + 1) - image.get(u, v - 1);
            out[v * w + u] = 0.5 * gx.hypot(gy);
        }
    }
    Image::new(w, h, image.pixel_spacing(), out).expect("finite gradients")
}

/// Writes an RGB overlay: the fixed image in red, the moving image in green
/// and cyan, and the moving image's strong edges in yellow.
pub fn write_overlay(fixed: &Image, moving: &Image, path: &Path) -> Result<()> {
    let norm = |img: &Image| normalize_image(img).unwrap_or_else(|_| img.map(|_| 0.0).expect("finite"));
    let (f, m) = (norm(fixed), norm(moving));
    let edges = norm(&gradient_magnitude(moving));
    let to_u8 = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut rgb = image::RgbImage::new(fixed.width() as u32, fixed.height() as u32);
    for (u, v, px) in rgb.enumerate_pixels_mut() {
        let (u, v) = (u as usize, v as usize);
        let (a, b) = (f.get(u, v), m.get(u, v));
        *px = if edges.get(u, v) > 0.25 {
            image::Rgb([255, 255, 0])
        } else {
            image::Rgb([to_u8(a), to_u8(b), to_u8(b)])
        };
    }
    rgb.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    })
}
