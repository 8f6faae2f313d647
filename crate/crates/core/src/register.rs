//! Pose initializers and the two-view fine registration optimizer.
//!
//! Each view's pose is parameterized as a left perturbation of its initial
//! pose, `exp(δ) · init`, and the twists are driven by Adam on the weighted
//! image objective with central-difference gradients.

use std::path::Path;

use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{Image, Volume};
use crate::objective::{self, check_image_geometry, ncc_loss, view_loss};
use crate::projector::{render, DetectorGeometry, RenderMode};
use crate::se3::{self, Pose, Twist, TwistDistribution};

/// Orthonormality tolerance for externally supplied pose matrices.
pub const EXTERNAL_POSE_TOL: f64 = 1e-6;

/// Window and threshold of the convergence flag.
const CONVERGENCE_WINDOW: usize = 20;
const CONVERGENCE_REL_CHANGE: f64 = 1e-6;

/// Which view receives the larger weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewFocus {
    /// The view with the lower NCC (worse alignment) gets `weight_low_ncc`.
    #[default]
    WorseView,
    /// The view with the higher NCC gets `weight_low_ncc`.
    BetterView,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConfigRepr", into = "ConfigRepr")]
pub struct RefineConfig {
    pub lr_rotation: f64,
    pub lr_translation: f64,
    pub iterations: usize,
    pub weight_low_ncc: f64,
    pub weight_high_ncc: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub fd_step: f64,
    pub focus: ViewFocus,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            lr_rotation: 7e-3,
            lr_translation: 7.0,
            iterations: 500,
            weight_low_ncc: 0.8,
            weight_high_ncc: 0.2,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            fd_step: 1e-4,
            focus: ViewFocus::WorseView,
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConfigRepr {
    lr_rotation: f64,
    lr_translation: f64,
    iterations: usize,
    weight_low_ncc: f64,
    weight_high_ncc: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_epsilon: f64,
    fd_step: f64,
    focus: ViewFocus,
}

impl Default for ConfigRepr {
    fn default() -> Self {
        RefineConfig::default().into()
    }
}

impl From<RefineConfig> for ConfigRepr {
    fn from(c: RefineConfig) -> Self {
        ConfigRepr {
            lr_rotation: c.lr_rotation,
            lr_translation: c.lr_translation,
            iterations: c.iterations,
            weight_low_ncc: c.weight_low_ncc,
            weight_high_ncc: c.weight_high_ncc,
            adam_beta1: c.adam_beta1,
            adam_beta2: c.adam_beta2,
            adam_epsilon: c.adam_epsilon,
            fd_step: c.fd_step,
            focus: c.focus,
        }
    }
}

impl TryFrom<ConfigRepr> for RefineConfig {
    type Error = Error;
    fn try_from(r: ConfigRepr) -> Result<Self> {
        let cfg = RefineConfig {
            lr_rotation: r.lr_rotation,
            lr_translation: r.lr_translation,
            iterations: r.iterations,
            weight_low_ncc: r.weight_low_ncc,
            weight_high_ncc: r.weight_high_ncc,
            adam_beta1: r.adam_beta1,
            adam_beta2: r.adam_beta2,
            adam_epsilon: r.adam_epsilon,
            fd_step: r.fd_step,
            focus: r.focus,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |x: f64| x.is_finite() && x > 0.0;
        let unit = |x: f64| x.is_finite() && (0.0..=1.0).contains(&x);
        let problem = if !positive(self.lr_rotation) || !positive(self.lr_translation) {
            Some("learning rates must be positive")
        } else if !unit(self.weight_low_ncc) || !unit(self.weight_high_ncc) {
            Some("view weights must lie in [0, 1]")
        } else if (self.weight_low_ncc + self.weight_high_ncc - 1.0).abs() > 1e-12 {
            Some("weight_low_ncc + weight_high_ncc must equal 1")
        } else if !(unit(self.adam_beta1) && self.adam_beta1 < 1.0)
            || !(unit(self.adam_beta2) && self.adam_beta2 < 1.0)
        {
            Some("Adam betas must lie in [0, 1)")
        } else if !positive(self.adam_epsilon) || !positive(self.fd_step) {
            Some("adam_epsilon and fd_step must be positive")
        } else {
            None
        };
        match problem {
            Some(p) => Err(Error::InvalidArgument(format!("refine config: {p}"))),
            None => Ok(()),
        }
    }

    /// Per-component learning rate in twist layout.
    fn learning_rates(&self) -> [f64; 6] {
        let (t, r) = (self.lr_translation, self.lr_rotation);
        [t, t, t, r, r, r]
    }
}

/// Outcome of a fine registration. `loss_trace[k]` is the weighted objective
/// at iterate `k` and `ncc_trace[i][k]` the NCC of view `i` there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub initial: Vec<Pose>,
    pub refined: Vec<Pose>,
    pub loss_trace: Vec<f64>,
    pub ncc_trace: Vec<Vec<f64>>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl RegistrationResult {
    /// Index of the iterate returned in `refined`, if any ran.
    pub fn best_iteration(&self) -> Option<usize> {
        self.loss_trace
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (k, &v)| match best {
                Some((_, b)) if b <= v => best,
                _ => Some((k, v)),
            })
            .map(|(k, _)| k)
    }
}

/// `exp(sample_twist(dist, seed)) · true_pose`.
pub fn init_perturbed(true_pose: &Pose, dist: &TwistDistribution, rng_seed: u64) -> Result<Pose> {
    let twist = se3::sample_twist(dist, rng_seed);
    Ok(se3::compose(&se3::exp(&twist)?, true_pose))
}

/// Left perturbation of `true_pose` by a twist of exactly the given rotation
/// angle (rad) and translation length (mm) along seeded random directions.
pub fn init_fixed_offset(
    true_pose: &Pose,
    rotation_rad: f64,
    translation_mm: f64,
    rng_seed: u64,
) -> Result<Pose> {
    let unit = TwistDistribution::isotropic(1.0, 1.0)?;
    let dir = se3::sample_twist(&unit, rng_seed);
    let (rho, phi) = (dir.rho, dir.phi);
    let scale = |v: nalgebra::Vector3<f64>, len: f64| {
        let n = v.norm();
        if n > 0.0 {
            v * (len / n)
        } else {
            v
        }
    };
    let twist = Twist::new(scale(rho, translation_mm), scale(phi, rotation_rad));
    Ok(se3::compose(&se3::exp(&twist)?, true_pose))
}

/// The `n_starts` candidate poses examined by [`init_multistart`], in order.
pub fn multistart_candidates(
    base_pose: &Pose,
    dist: &TwistDistribution,
    n_starts: usize,
    rng_seed: u64,
) -> Result<Vec<Pose>> {
    (0..n_starts as u64)
        .map(|k| init_perturbed(base_pose, dist, rng_seed.wrapping_add(k)))
        .collect()
}

/// Index and NCC of the candidate whose render best matches `fixed`; ties go
/// to the lowest index.
pub fn select_best_candidate(
    vol: &Volume,
    geom: &DetectorGeometry,
    fixed: &Image,
    candidates: &[Pose],
) -> Result<(usize, f64)> {
    if candidates.is_empty() {
        return Err(Error::Empty("no candidate poses".into()));
    }
    check_image_geometry(fixed, geom)?;
    let (_, std) = objective::image_stats(fixed);
    if std == 0.0 {
        return Err(Error::DegenerateImage("fixed image is constant".into()));
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (k, pose) in candidates.iter().enumerate() {
        let score = 1.0 - ncc_loss(fixed, &render(vol, geom, pose, RenderMode::Intensity))?;
        if score > best.1 {
            best = (k, score);
        }
    }
    Ok(best)
}

/// Samples `n_starts` poses around `base_pose` and keeps the best-matching
/// one.
pub fn init_multistart(
    vol: &Volume,
    geom: &DetectorGeometry,
    fixed: &Image,
    base_pose: &Pose,
    dist: &TwistDistribution,
    n_starts: usize,
    rng_seed: u64,
) -> Result<Pose> {
    if n_starts == 0 {
        return Err(Error::InvalidArgument("n_starts must be at least 1".into()));
    }
    let candidates = multistart_candidates(base_pose, dist, n_starts, rng_seed)?;
    let (k, _) = select_best_candidate(vol, geom, fixed, &candidates)?;
    Ok(candidates[k])
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ExternalPose {
    Tagged { matrix: [f64; 16] },
    Bare([f64; 16]),
}

/// Reads a JSON array of 4×4 row-major pose matrices (either bare arrays of
/// 16 numbers or `{"matrix": [...]}` objects). Matrices within
/// [`EXTERNAL_POSE_TOL`] of rigid are projected onto SE(3).
pub fn load_external_poses(path: impl AsRef<Path>) -> Result<Vec<Pose>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<ExternalPose> = serde_json::from_str(&text).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if raw.is_empty() {
        return Err(Error::Empty(format!("{} holds no poses", path.display())));
    }
    raw.into_iter()
        .enumerate()
        .map(|(k, p)| {
            let m = match p {
                ExternalPose::Tagged { matrix } | ExternalPose::Bare(matrix) => matrix,
            };
            Pose::project_to_rigid(&Matrix4::from_row_slice(&m), EXTERNAL_POSE_TOL).map_err(|e| match e {
                Error::NonRigid(msg) => Error::NonRigid(format!("pose {k} in {}: {msg}", path.display())),
                other => other,
            })
        })
        .collect()
}

/// Per-view objective weights from the current NCC of each view. An exact
/// tie splits evenly.
pub fn assign_view_weights(ncc_values: [f64; 2], cfg: &RefineConfig) -> [f64; 2] {
    let [a, b] = ncc_values;
    if a == b {
        return [0.5, 0.5];
    }
    let first_is_worse = a < b;
    let first_gets_low = match cfg.focus {
        ViewFocus::WorseView => first_is_worse,
        ViewFocus::BetterView => !first_is_worse,
    };
    if first_gets_low {
        [cfg.weight_low_ncc, cfg.weight_high_ncc]
    } else {
        [cfg.weight_high_ncc, cfg.weight_low_ncc]
    }
}

struct Adam {
    m: Vec<[f64; 6]>,
    v: Vec<[f64; 6]>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![[0.0; 6]; n],
            v: vec![[0.0; 6]; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [Twist], grads: &[Twist], cfg: &RefineConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let lr = cfg.learning_rates();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            for j in 0..6 {
                let m = b1 * self.m[i][j] + (1.0 - b1) * g[j];
                let v = b2 * self.v[i][j] + (1.0 - b2) * g[j] * g[j];
                self.m[i][j] = m;
                self.v[i][j] = v;
                p[j] -= lr[j] * (m / c1) / ((v / c2).sqrt() + cfg.adam_epsilon);
            }
        }
    }
}

/// How the optimized twists map to the two view poses.
enum Parameterization<'a> {
    /// One twist per view: `pose_i = exp(δ_i) · init_i`.
    Independent([Pose; 2]),
    /// One shared twist: `pose_1 = exp(δ) · init`, `pose_2 = t_trans · pose_1`.
    Coupled { init: Pose, t_trans: &'a Pose },
}

impl Parameterization<'_> {
    fn poses(&self, deltas: &[Twist]) -> Result<[Pose; 2]> {
        match self {
            Self::Independent(init) => Ok([
                se3::compose(&se3::exp(&deltas[0])?, &init[0]),
                se3::compose(&se3::exp(&deltas[1])?, &init[1]),
            ]),
            Self::Coupled { init, t_trans } => {
                let p1 = se3::compose(&se3::exp(&deltas[0])?, init);
                Ok([p1, se3::compose(t_trans, &p1)])
            }
        }
    }

    fn n_twists(&self) -> usize {
        match self {
            Self::Independent(_) => 2,
            Self::Coupled { .. } => 1,
        }
    }
}

/// Joint two-view refinement of independent pose twists.
pub fn fine_register(
    vol: &Volume,
    geom: &DetectorGeometry,
    fixed_images: &[Image; 2],
    init_poses: &[Pose; 2],
    cfg: &RefineConfig,
) -> Result<RegistrationResult> {
    optimize(vol, geom, fixed_images, Parameterization::Independent(*init_poses), cfg)
}

/// Refinement of one shared twist for a view pair related by the fixed
/// transform `t_trans`. The returned poses satisfy `refined[1] = t_trans ·
/// refined[0]` exactly.
pub fn fine_register_coupled(
    vol: &Volume,
    geom: &DetectorGeometry,
    fixed_images: &[Image; 2],
    init_pose_pa: &Pose,
    t_trans: &Pose,
    cfg: &RefineConfig,
) -> Result<RegistrationResult> {
    optimize(
        vol,
        geom,
        fixed_images,
        Parameterization::Coupled {
            init: *init_pose_pa,
            t_trans,
        },
        cfg,
    )
}

fn optimize(
    vol: &Volume,
    geom: &DetectorGeometry,
    fixed: &[Image; 2],
    param: Parameterization<'_>,
    cfg: &RefineConfig,
) -> Result<RegistrationResult> {
    cfg.validate()?;
    for image in fixed {
        check_image_geometry(image, geom)?;
    }
    let n = param.n_twists();
    let initial = param.poses(&vec![Twist::zero(); n])?;
    let mut deltas = vec![Twist::zero(); n];
    let mut best = (f64::INFINITY, initial);
    let mut adam = Adam::new(n);
    let mut loss_trace = Vec::with_capacity(cfg.iterations);
    let mut ncc_trace = vec![Vec::with_capacity(cfg.iterations); 2];

    let partial = |loss_trace: &[f64], ncc_trace: &[Vec<f64>], refined: [Pose; 2]| RegistrationResult {
        initial: initial.to_vec(),
        refined: refined.to_vec(),
        loss_trace: loss_trace.to_vec(),
        ncc_trace: ncc_trace.to_vec(),
        iterations_run: loss_trace.len(),
        converged: false,
    };

    for _ in 0..cfg.iterations {
        let poses = param.poses(&deltas)?;
        let losses = [
            ncc_loss(&fixed[0], &render(vol, geom, &poses[0], RenderMode::Intensity))?,
            ncc_loss(&fixed[1], &render(vol, geom, &poses[1], RenderMode::Intensity))?,
        ];
        let weights = assign_view_weights([1.0 - losses[0], 1.0 - losses[1]], cfg);
        let value = weights[0] * losses[0] + weights[1] * losses[1];
        if !value.is_finite() {
            return Err(Error::OptimizationAborted {
                reason: format!("objective is {value} at iteration {}", loss_trace.len()),
                partial: Box::new(partial(&loss_trace, &ncc_trace, best.1)),
            });
        }
        loss_trace.push(value);
        ncc_trace[0].push(1.0 - losses[0]);
        ncc_trace[1].push(1.0 - losses[1]);
        if value < best.0 {
            best = (value, poses);
        }

        let grads = match gradient(vol, geom, fixed, &param, &deltas, weights, cfg.fd_step) {
            Ok(g) => g,
            Err(e @ Error::NonFiniteObjective { .. }) => {
                return Err(Error::OptimizationAborted {
                    reason: e.to_string(),
                    partial: Box::new(partial(&loss_trace, &ncc_trace, best.1)),
                })
            }
            Err(e) => return Err(e),
        };
        adam.step(&mut deltas, &grads, cfg);
    }

    let converged = loss_trace.len() > CONVERGENCE_WINDOW && {
        let last = loss_trace[loss_trace.len() - 1];
        let before = loss_trace[loss_trace.len() - 1 - CONVERGENCE_WINDOW];
        (last - before).abs() <= CONVERGENCE_REL_CHANGE * before.abs().max(f64::MIN_POSITIVE)
    };
    Ok(RegistrationResult {
        converged,
        ..partial(&loss_trace, &ncc_trace, best.1)
    })
}

fn gradient(
    vol: &Volume,
    geom: &DetectorGeometry,
    fixed: &[Image; 2],
    param: &Parameterization<'_>,
    deltas: &[Twist],
    weights: [f64; 2],
    step: f64,
) -> Result<Vec<Twist>> {
    match param {
        // Separable objective: each view's twist only affects its own term.
        Parameterization::Independent(init) => (0..2)
            .map(|i| {
                let f = |x: &[Twist]| view_loss(vol, geom, &init[i], &x[0], &fixed[i]);
                let g = objective::objective_gradient(f, &deltas[i..=i], step).map_err(|e| match e {
                    Error::NonFiniteObjective { component } => Error::NonFiniteObjective {
                        component: 6 * i + component,
                    },
                    other => other,
                })?;
                Ok(g[0].scale(weights[i]))
            })
            .collect(),
        Parameterization::Coupled { .. } => {
            let f = |x: &[Twist]| {
                let poses = param.poses(x)?;
                let mut total = 0.0;
                for i in 0..2 {
                    let img = render(vol, geom, &poses[i], RenderMode::Intensity);
                    total += weights[i] * ncc_loss(&fixed[i], &img)?;
                }
                Ok(total)
            };
            objective::objective_gradient(f, deltas, step)
        }
    }
}
