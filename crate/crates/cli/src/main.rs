//! `mvreg` command-line interface.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use mvreg::evaluation::{mtre, CaseMetric, MetricReport, DEFAULT_LAMBDA};
use mvreg::imaging::{self, PhantomKind};
use mvreg::pipeline::{self, ExperimentSpec};
use mvreg::projector::{self, DetectorGeometry, RenderMode};
use mvreg::register::{self, load_external_poses, RefineConfig};
use mvreg::se3::{Pose, Twist};
use mvreg::Error;

#[derive(Parser)]
#[command(name = "mvreg", version, about = "Multi-view 2D/3D rigid registration")]
struct Cli {
    /// Maximum number of worker threads (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom volume and its landmarks.
    Phantom(PhantomArgs),
    /// Render one DRR.
    Render(RenderArgs),
    /// Draw the true view poses and inter-view twists of an experiment.
    SamplePoses(SamplePosesArgs),
    /// Refine two independent view poses against fixed images.
    Register(RegisterArgs),
    /// Refine a PA view pose with its lateral partner tied to it.
    RegisterCoupled(RegisterCoupledArgs),
    /// Compute mTRE and SMRSR for estimated poses.
    Evaluate(EvaluateArgs),
    /// Run a full synthetic registration study.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct PhantomArgs {
    /// sphere_pair, nested_boxes or pelvis_like
    #[arg(long, value_parser = parse_kind)]
    kind: PhantomKind,
    /// Voxel counts, e.g. 64,64,64
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    /// Voxel spacing in mm, e.g. 1,1,1
    #[arg(long, value_parser = parse_triple, default_value = "1,1,1")]
    spacing: [f64; 3],
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem; writes <out>.vol.json, <out>.vol.raw and <out>.landmarks.json
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    volume: PathBuf,
    /// Camera-to-world pose JSON
    #[arg(long)]
    pose: PathBuf,
    /// Detector geometry JSON
    #[arg(long)]
    geom: PathBuf,
    /// attenuation or intensity
    #[arg(long, value_parser = parse_mode, default_value = "intensity")]
    mode: RenderMode,
    /// Output image stem; writes <out>.img.json and <out>.img.raw
    #[arg(long)]
    out: PathBuf,
    /// Also write a 16-bit PGM preview
    #[arg(long)]
    pgm: Option<PathBuf>,
}

#[derive(Args)]
struct SamplePosesArgs {
    /// Experiment spec JSON
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterInputs {
    #[arg(long)]
    volume: PathBuf,
    #[arg(long)]
    geom: PathBuf,
    #[arg(long)]
    fixed1: PathBuf,
    #[arg(long)]
    fixed2: PathBuf,
    /// Refinement config JSON; missing fields take their defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Registration result JSON
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RegisterArgs {
    #[command(flatten)]
    inputs: RegisterInputs,
    #[arg(long)]
    init1: PathBuf,
    #[arg(long)]
    init2: PathBuf,
}

#[derive(Args)]
struct RegisterCoupledArgs {
    #[command(flatten)]
    inputs: RegisterInputs,
    /// Initial pose of the first (PA) view
    #[arg(long)]
    init: PathBuf,
    /// Rotation between the views about the volume center (rad)
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_2)]
    lateral_angle: f64,
}

#[derive(Args)]
struct EvaluateArgs {
    /// JSON list of poses, two consecutive entries per case
    #[arg(long)]
    true_poses: PathBuf,
    /// JSON list of poses in the same layout as --true-poses
    #[arg(long)]
    est_poses: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    geom: PathBuf,
    /// mm per pixel
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Optional metric report JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Receives report.json and, with --overlays, per-view PNGs
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    overlays: bool,
}

fn parse_kind(s: &str) -> Result<PhantomKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<RenderMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<T> = s
        .split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| format!("cannot parse {p:?}")))
        .collect::<Result<_, _>>()?;
    parts
        .try_into()
        .map_err(|v: Vec<T>| format!("expected 3 comma-separated values, got {}", v.len()))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_list(s)
}

fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    parse_list(s)
}

/// Failures carrying their exit code.
enum Failure {
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text).map_err(|e| Error::io(path, e).into())
}

fn cmd_phantom(a: &PhantomArgs) -> CliResult<()> {
    let (volume, landmarks) = imaging::make_phantom(a.kind, a.dims, Vector3::from(a.spacing), a.seed)?;
    imaging::save_volume(&volume, &a.out)?;
    let lm_path = PathBuf::from(format!("{}.landmarks.json", a.out.display()));
    imaging::save_landmarks(&landmarks, &lm_path)?;
    println!(
        "wrote {}.vol.json ({}x{}x{}) and {} landmarks",
        a.out.display(),
        a.dims[0],
        a.dims[1],
        a.dims[2],
        landmarks.len()
    );
    Ok(())
}

fn cmd_render(a: &RenderArgs) -> CliResult<()> {
    let volume = imaging::load_volume(&a.volume)?;
    let pose: Pose = read_json(&a.pose)?;
    let geom: DetectorGeometry = read_json(&a.geom)?;
    let image = projector::render(&volume, &geom, &pose, a.mode);
    imaging::save_image(&image, &a.out)?;
    if let Some(pgm) = &a.pgm {
        imaging::save_pgm(&image, pgm)?;
    }
    let (lo, hi) = image.min_max();
    println!("rendered {}x{} image, range [{lo:.6}, {hi:.6}]", image.width(), image.height());
    Ok(())
}

#[derive(Serialize)]
struct SampledCase {
    id: String,
    seed: u64,
    true_poses: [Pose; 2],
    view_twists: [Twist; 2],
    eps: Twist,
}

fn cmd_sample_poses(a: &SamplePosesArgs) -> CliResult<()> {
    let spec: ExperimentSpec = read_json(&a.spec)?;
    let study = pipeline::build_study(&spec)?;
    let cases: Vec<SampledCase> = pipeline::generate_cases(&spec, &study)?
        .into_iter()
        .map(|c| SampledCase {
            id: c.id,
            seed: c.seed,
            true_poses: c.true_poses,
            view_twists: c.view_twists,
            eps: c.eps,
        })
        .collect();
    write_json(&a.out, &cases)?;
    println!("wrote {} cases to {}", cases.len(), a.out.display());
    Ok(())
}

struct LoadedInputs {
    volume: imaging::Volume,
    geom: DetectorGeometry,
    fixed: [imaging::Image; 2],
    config: RefineConfig,
}

fn load_inputs(i: &RegisterInputs) -> CliResult<LoadedInputs> {
    let config = match &i.config {
        Some(p) => {
            let cfg: RefineConfig = read_json(p)?;
            cfg.validate()?;
            cfg
        }
        None => RefineConfig::default(),
    };
    Ok(LoadedInputs {
        volume: imaging::load_volume(&i.volume)?,
        geom: read_json(&i.geom)?,
        fixed: [imaging::load_image(&i.fixed1)?, imaging::load_image(&i.fixed2)?],
        config,
    })
}

fn finish_registration(out: &Path, result: mvreg::Result<register::RegistrationResult>) -> CliResult<()> {
    match result {
        Ok(r) => {
            write_json(out, &r)?;
            let last = r.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!(
                "{} iterations, final loss {last:.6}, best iteration {:?}, converged {}",
                r.iterations_run,
                r.best_iteration(),
                r.converged
            );
            Ok(())
        }
        Err(Error::OptimizationAborted { reason, partial }) => {
            write_json(out, &*partial)?;
            Err(Failure::Numerical(format!(
                "optimization aborted: {reason} (partial result written to {})",
                out.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_register(a: &RegisterArgs) -> CliResult<()> {
    let inp = load_inputs(&a.inputs)?;
    let init: [Pose; 2] = [read_json(&a.init1)?, read_json(&a.init2)?];
    let result = register::fine_register(&inp.volume, &inp.geom, &inp.fixed, &init, &inp.config);
    finish_registration(&a.inputs.out, result)
}

fn cmd_register_coupled(a: &RegisterCoupledArgs) -> CliResult<()> {
    let inp = load_inputs(&a.inputs)?;
    let init: Pose = read_json(&a.init)?;
    let t_trans = pipeline::lateral_transform(&inp.volume, a.lateral_angle)?;
    let result = register::fine_register_coupled(&inp.volume, &inp.geom, &inp.fixed, &init, &t_trans, &inp.config);
    finish_registration(&a.inputs.out, result)
}

fn cmd_evaluate(a: &EvaluateArgs) -> CliResult<()> {
    let truth = load_external_poses(&a.true_poses)?;
    let est = load_external_poses(&a.est_poses)?;
    if truth.len() != est.len() || truth.len() % 2 != 0 || truth.is_empty() {
        return Err(Failure::Data(format!(
            "expected the same positive, even number of poses in both files, got {} and {}",
            truth.len(),
            est.len()
        )));
    }
    let landmarks = imaging::load_landmarks(&a.landmarks)?;
    let geom: DetectorGeometry = read_json(&a.geom)?;
    let cases = truth
        .chunks_exact(2)
        .zip(est.chunks_exact(2))
        .enumerate()
        .map(|(i, (t, e))| {
            Ok(CaseMetric {
                id: format!("case_{i:04}"),
                mtre_mm: mtre(&geom, &[t[0], t[1]], &[e[0], e[1]], &landmarks, a.lambda)?,
            })
        })
        .collect::<mvreg::Result<Vec<_>>>()?;
    let report = MetricReport::from_cases(cases, a.lambda)?;
    println!("{}", report.summary());
    println!("lambda = {}", a.lambda);
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn cmd_experiment(a: &ExperimentArgs, workers: usize) -> CliResult<()> {
    let spec: ExperimentSpec = read_json(&a.spec)?;
    spec.validate()?;
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let overlays = a.overlays.then(|| a.out_dir.join("overlays"));
    if let Some(dir) = &overlays {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let report = pipeline::run_experiment(&spec, workers, overlays.as_deref())?;
    let path = a.out_dir.join("report.json");
    fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
    if let Some(before) = &report.before {
        println!("before: {}", before.summary());
    }
    if let Some(after) = &report.after {
        println!("after:  {}", after.summary());
    }
    println!(
        "{} of {} cases completed, report at {}",
        report.cases.len(),
        report.n_requested,
        path.display()
    );
    if report.cases.is_empty() {
        let numerical = report.failures.iter().all(|f| f.numerical);
        let msg = "every case failed".to_string();
        return Err(if numerical { Failure::Numerical(msg) } else { Failure::Data(msg) });
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::Data("--workers must be at least 1".into()));
    }
    // a second initialization only fails if a pool already exists
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Render(a) => cmd_render(a),
        Command::SamplePoses(a) => cmd_sample_poses(a),
        Command::Register(a) => cmd_register(a),
        Command::RegisterCoupled(a) => cmd_register_coupled(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Experiment(a) => cmd_experiment(a, workers),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
