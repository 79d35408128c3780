//! Command-line front end. `run_cli` parses arguments, runs one subcommand
//! and maps failures to exit codes.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use crate::config::{threads_from_env, Config};
use crate::error::{Error, FormatError, Result};
use crate::evaluation::evaluate_reconstruction;
use crate::geometry::Intrinsics;
use crate::io::{self, FrameEntry, Manifest, TrajectoryEntry};
use crate::matching::{lmeds_verify, mutual_nn_match};
use crate::pairwise::{ransac_progressive_grow, AlignmentStatus};
use crate::pipeline::{reconstruct, SceneFrame};
use crate::synthetic::{generate_scene, render_matches};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_FORMAT: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_NUMERIC: i32 = 6;
pub const EXIT_INFEASIBLE: i32 = 7;

/// Exit code for each error category.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => EXIT_CONFIG,
        Error::Format(_) => EXIT_FORMAT,
        Error::Domain(_) | Error::DimensionMismatch { .. } | Error::OutOfBounds { .. } => EXIT_DATA,
        Error::Degenerate(_) | Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        Error::InfeasibleScene(_) => EXIT_INFEASIBLE,
    }
}

#[derive(Debug, Parser)]
#[command(name = "ridge-sfm", version, about = "Structure from motion over ridge-regularized depth bases")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Sum loss terms in a fixed order so repeated runs agree bit for bit.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Worker thread cap; overrides RIDGE_BUNDLE_THREADS.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// More log output (repeatable).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Robustly align two frames.
    Pairwise(PairwiseArgs),
    /// Reconstruct a scene directory.
    Bundle(BundleArgs),
    /// Generate a synthetic scene directory with ground truth.
    Synth(SynthArgs),
    /// Score a reconstruction against ground truth.
    Eval(EvalArgs),
    /// Write a reconstruction as a PLY point cloud.
    ExportPly(ExportArgs),
}

#[derive(Debug, Args)]
struct PairwiseArgs {
    /// Scene directory or manifest; use with --frames.
    #[arg(long, conflicts_with_all = ["basis", "keypoints", "intrinsics"])]
    scene: Option<PathBuf>,
    /// Frame indices (manifest order) when --scene is given.
    #[arg(long, num_args = 2, value_names = ["I", "J"], requires = "scene")]
    frames: Option<Vec<usize>>,
    /// Basis files of the two frames.
    #[arg(long, num_args = 2, value_names = ["I", "J"], requires_all = ["keypoints", "intrinsics"])]
    basis: Option<Vec<PathBuf>>,
    /// Keypoint files of the two frames.
    #[arg(long, num_args = 2, value_names = ["I", "J"])]
    keypoints: Option<Vec<PathBuf>>,
    /// Shared intrinsics for explicit files; size comes from the basis.
    #[arg(long, num_args = 4, value_names = ["FX", "FY", "CX", "CY"], allow_negative_numbers = true)]
    intrinsics: Option<Vec<f64>>,
    /// Use these matches instead of descriptor matching and verification.
    #[arg(long)]
    matches: Option<PathBuf>,
    /// Directory for report.json, inliers.txt and pose.txt.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    min_coverage: Option<usize>,
}

#[derive(Debug, Args)]
struct BundleArgs {
    /// Scene directory or manifest.
    #[arg(long)]
    scene: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    random_pairs: Option<usize>,
    #[arg(long)]
    max_iterations: Option<usize>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    lambda_u: Option<f64>,
    /// Seed for pair proposal, verification and RANSAC.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Output scene directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    keypoints: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    basis_width: Option<usize>,
    #[arg(long)]
    basis_height: Option<usize>,
    #[arg(long)]
    focal: Option<f64>,
    #[arg(long)]
    pixel_noise: Option<f64>,
    #[arg(long)]
    depth_perturbation: Option<f64>,
    #[arg(long)]
    descriptor_noise: Option<f64>,
    /// Outlier rate of the ground-truth match files.
    #[arg(long)]
    outlier_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Directory with trajectory.txt and depths.rsfmd.
    #[arg(long)]
    prediction: PathBuf,
    /// Directory with the ground-truth trajectory.txt and depths.rsfmd.
    #[arg(long)]
    ground_truth: PathBuf,
    /// Scene directory or manifest, for the intrinsics.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
    /// JSON report path; defaults to metrics.json in the prediction directory.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportArgs {
    /// Directory with trajectory.txt and depths.rsfmd.
    #[arg(long)]
    prediction: PathBuf,
    /// Scene directory or manifest, for the intrinsics.
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stride: Option<usize>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::from_default_env().filter_level(level).try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if cli.deterministic {
        config.bundle.deterministic = true;
    }
    let threads = match cli.threads {
        Some(0) => return Err(Error::Config("--threads must be positive".into())),
        Some(n) => Some(n),
        None => threads_from_env()?.or(config.bundle.threads),
    };
    // the whole command runs inside the capped pool
    config.bundle.threads = None;
    let command = cli.command;
    match threads {
        None => dispatch(command, config),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(|| dispatch(command, config)),
    }
}

fn dispatch(command: Command, config: Config) -> Result<()> {
    match command {
        Command::Pairwise(a) => pairwise(a, config),
        Command::Bundle(a) => bundle(a, config),
        Command::Synth(a) => synth(a, config),
        Command::Eval(a) => eval(a, config),
        Command::ExportPly(a) => export_ply(a, config),
    }
}

fn manifest_path(scene: &Path) -> PathBuf {
    if scene.is_dir() {
        scene.join("frames.txt")
    } else {
        scene.to_path_buf()
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Domain(e.to_string()))?;
    io::write_file(path, text + "\n")
}

fn write_lines(path: &Path, values: &[f64]) -> Result<()> {
    let text: String = values.iter().map(|v| format!("{v}\n")).collect();
    io::write_file(path, text)
}

#[derive(Debug, Serialize)]
struct PairwiseReport {
    frame_i: usize,
    frame_j: usize,
    status: AlignmentStatus,
    input_matches: usize,
    inliers: usize,
    coverage: usize,
    translation: [f64; 3],
    /// `(w, x, y, z)`.
    quaternion: [f64; 4],
    code_i: Vec<f64>,
    code_j: Vec<f64>,
    objective_trace: Vec<f64>,
}

fn pairwise(a: PairwiseArgs, mut config: Config) -> Result<()> {
    if let Some(s) = a.seed {
        config.ransac.seed = s;
        config.lmeds.seed = s;
    }
    if let Some(r) = a.runs {
        config.ransac.runs = r;
    }
    if let Some(l) = a.lambda {
        config.ransac.lambda = l;
    }
    if let Some(c) = a.min_coverage {
        config.ransac.min_covered_cells = c;
    }
    config.validate()?;

    let (frames, ids) = match (&a.scene, &a.basis) {
        (Some(scene), _) => {
            let Some(pair) = &a.frames else {
                return Err(Error::Config("--scene needs --frames I J".into()));
            };
            let (manifest, frames) = io::load_scene(&manifest_path(scene))?;
            let n = frames.len();
            if pair.iter().any(|&f| f >= n) {
                return Err(Error::Domain(format!("frames {pair:?} outside a {n}-frame scene")));
            }
            let ids = (manifest.frames[pair[0]].frame_id, manifest.frames[pair[1]].frame_id);
            (vec![frames[pair[0]].clone(), frames[pair[1]].clone()], ids)
        }
        (None, Some(bases)) => {
            let (Some(kps), Some(k)) = (&a.keypoints, &a.intrinsics) else {
                return Err(Error::Config("--basis needs --keypoints and --intrinsics".into()));
            };
            let mut frames = Vec::new();
            for (b, kp) in bases.iter().zip(kps) {
                let basis = io::load_basis(b)?;
                let intrinsics = Intrinsics::new(k[0], k[1], k[2], k[3], basis.frame_width(), basis.frame_height())?;
                frames.push(SceneFrame {
                    basis,
                    keypoints: io::load_keypoints(kp)?,
                    intrinsics,
                });
            }
            (frames, (0, 1))
        }
        (None, None) => return Err(Error::Config("give either --scene with --frames or --basis/--keypoints/--intrinsics".into())),
    };
    let (fi, fj) = (&frames[0], &frames[1]);
    let mut matches = match &a.matches {
        Some(path) => io::load_matches(path, Some((fi.keypoints.len(), fj.keypoints.len())))?,
        None => {
            let raw = mutual_nn_match(&fi.keypoints, &fj.keypoints, &config.matching)?;
            lmeds_verify(&raw, &fi.keypoints, &fj.keypoints, &config.lmeds)?.matches
        }
    };
    matches.frame_i = ids.0;
    matches.frame_j = ids.1;
    info!("{} candidate matches", matches.len());
    let alignment = ransac_progressive_grow(&matches, fi.view(), fj.view(), &config.ransac)?;
    let pose = TrajectoryEntry::from_pose(ids.1, &alignment.relative_pose);
    let report = PairwiseReport {
        frame_i: ids.0,
        frame_j: ids.1,
        status: alignment.status,
        input_matches: matches.len(),
        inliers: alignment.inliers.len(),
        coverage: alignment.coverage,
        translation: pose.translation.into(),
        quaternion: pose.quaternion,
        code_i: alignment.code_i.beta.clone(),
        code_j: alignment.code_j.beta.clone(),
        objective_trace: alignment.objective_trace.clone(),
    };
    println!("status       {:?}", report.status);
    println!("matches      {} -> {} inliers", report.input_matches, report.inliers);
    println!("coverage     {} cells", report.coverage);
    println!("translation  {:?}", report.translation);
    println!("quaternion   {:?}", report.quaternion);
    if let Some(out) = &a.out {
        write_json(&out.join("report.json"), &report)?;
        io::save_matches(&out.join("inliers.txt"), &alignment.inliers)?;
        io::save_trajectory(&out.join("pose.txt"), &[pose])?;
    }
    if !alignment.success() {
        warn!("alignment did not succeed: {:?}", alignment.status);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct BundleSummary {
    frames: usize,
    proposed_pairs: usize,
    accepted_pairs: usize,
    iterations: usize,
    converged: bool,
    final_loss: f64,
    clamped_pixels: Vec<usize>,
}

fn bundle(a: BundleArgs, mut config: Config) -> Result<()> {
    if let Some(w) = a.window {
        config.pairs.window = w;
    }
    if let Some(r) = a.random_pairs {
        config.pairs.random_pairs = r;
    }
    if let Some(m) = a.max_iterations {
        config.bundle.max_iterations = m;
    }
    if let Some(s) = a.step_size {
        config.bundle.step_size = s;
    }
    if let Some(l) = a.lambda_u {
        config.bundle.lambda_u = l;
    }
    if let Some(s) = a.seed {
        config.pairs.seed = s;
        config.lmeds.seed = s;
        config.ransac.seed = s;
    }
    config.validate()?;
    let (_, frames) = io::load_scene(&manifest_path(&a.scene))?;
    let rec = match reconstruct(&frames, &config.pipeline()) {
        Ok(r) => r,
        Err(Error::NonFiniteLoss { iteration, dump }) => {
            let path = a.out.join("state_dump.json");
            write_json(&path, &dump)?;
            eprintln!("state dump written to {}", path.display());
            return Err(Error::NonFiniteLoss { iteration, dump });
        }
        Err(e) => return Err(e),
    };
    io::save_poses(&a.out.join("trajectory.txt"), &rec.report.poses)?;
    io::save_codes(&a.out.join("codes.txt"), &rec.problem.codes)?;
    io::save_depths(&a.out.join("depths.rsfmd"), &rec.report.dense_depths)?;
    write_lines(&a.out.join("loss.txt"), &rec.report.loss_trace)?;
    write_lines(&a.out.join("warmstart_loss.txt"), &rec.warmstart_trace)?;
    write_json(&a.out.join("pairs.json"), &rec.pairs)?;
    let summary = BundleSummary {
        frames: frames.len(),
        proposed_pairs: rec.pairs.len(),
        accepted_pairs: rec.problem.constraints.len(),
        iterations: rec.report.iterations,
        converged: rec.report.converged,
        final_loss: rec.report.loss_trace.last().copied().unwrap_or(0.0),
        clamped_pixels: rec.report.clamped.clone(),
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    println!(
        "{} frames, {}/{} pairs accepted, {} iterations (converged: {}), final loss {:.6}",
        summary.frames, summary.accepted_pairs, summary.proposed_pairs, summary.iterations, summary.converged, summary.final_loss
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct SynthSummary {
    frames: usize,
    depth_noise_floor: f64,
    landmarks: usize,
}

fn synth(a: SynthArgs, mut config: Config) -> Result<()> {
    let s = &mut config.synth;
    macro_rules! apply {
        ($($flag:ident => $field:ident),*) => {
            $(if let Some(v) = a.$flag { s.$field = v; })*
        };
    }
    apply!(frames => frames, seed => seed, k => k, keypoints => keypoints_per_frame, width => width,
        height => height, basis_width => basis_width, basis_height => basis_height, focal => focal,
        pixel_noise => pixel_noise, depth_perturbation => depth_perturbation,
        descriptor_noise => descriptor_noise, outlier_rate => outlier_rate);
    config.validate()?;
    let spec = config.synth.clone();
    let gt = generate_scene(&spec)?;
    let out = &a.out;
    let mut manifest = Manifest::default();
    for f in 0..gt.frame_count() {
        let basis = PathBuf::from(format!("bases/{f:06}.rsfmb"));
        let keypoints = PathBuf::from(format!("keypoints/{f:06}.txt"));
        io::save_basis(&out.join(&basis), &gt.bases[f])?;
        io::save_keypoints(&out.join(&keypoints), &gt.keypoints[f])?;
        manifest.frames.push(FrameEntry {
            frame_id: f,
            basis,
            keypoints,
            intrinsics: gt.intrinsics,
        });
    }
    io::save_manifest(&out.join("frames.txt"), &manifest)?;
    let gt_dir = out.join("gt");
    io::save_poses(&gt_dir.join("trajectory.txt"), &gt.poses)?;
    io::save_codes(&gt_dir.join("codes.txt"), &gt.codes)?;
    io::save_depths(&gt_dir.join("depths.rsfmd"), &gt.depths)?;
    for f in 1..gt.frame_count() {
        let rendered = render_matches(&gt, f - 1, f, spec.outlier_rate, spec.seed)?;
        io::save_matches(&gt_dir.join(format!("matches/{:06}_{f:06}.txt", f - 1)), &rendered.matches)?;
        let labels: String = rendered.labels.iter().map(|l| if *l { "1\n" } else { "0\n" }).collect();
        io::write_file(&gt_dir.join(format!("matches/{:06}_{f:06}.labels", f - 1)), labels)?;
    }
    io::write_file(&gt_dir.join("scene.toml"), toml::to_string(&spec).map_err(|e| Error::Domain(e.to_string()))?)?;
    let summary = SynthSummary {
        frames: gt.frame_count(),
        depth_noise_floor: gt.depth_noise_floor(),
        landmarks: gt.landmarks.len(),
    };
    write_json(&gt_dir.join("summary.json"), &summary)?;
    println!(
        "wrote {} frames to {} (depth noise floor {:.4} m)",
        summary.frames,
        out.display(),
        summary.depth_noise_floor
    );
    Ok(())
}

fn uniform_intrinsics(manifest: &Manifest, path: &Path) -> Result<Intrinsics> {
    let first = manifest.frames.first().ok_or_else(|| Error::Domain(format!("{} lists no frames", path.display())))?;
    if manifest.frames.iter().any(|f| f.intrinsics != first.intrinsics) {
        return Err(Error::Domain("evaluation needs the same intrinsics for every frame".into()));
    }
    Ok(first.intrinsics)
}

fn eval(a: EvalArgs, mut config: Config) -> Result<()> {
    if let Some(s) = a.stride {
        config.eval.stride = s;
    }
    config.validate()?;
    let manifest_file = manifest_path(&a.scene);
    let manifest = io::load_manifest(&manifest_file)?;
    let intrinsics = uniform_intrinsics(&manifest, &manifest_file)?;
    let pred_poses = io::load_poses(&a.prediction.join("trajectory.txt"))?;
    let pred_depths = io::load_depths(&a.prediction.join("depths.rsfmd"))?;
    let gt_poses = io::load_poses(&a.ground_truth.join("trajectory.txt"))?;
    let gt_depths = io::load_depths(&a.ground_truth.join("depths.rsfmd"))?;
    let (report, _) = evaluate_reconstruction(&pred_poses, &pred_depths, &gt_poses, &gt_depths, &intrinsics, config.eval.stride)?;
    println!("{report}");
    let path = a.report.unwrap_or_else(|| a.prediction.join("metrics.json"));
    write_json(&path, &report)
}

fn export_ply(a: ExportArgs, mut config: Config) -> Result<()> {
    if let Some(s) = a.stride {
        config.export.stride = s;
    }
    config.validate()?;
    let manifest = io::load_manifest(&manifest_path(&a.scene))?;
    let poses = io::load_poses(&a.prediction.join("trajectory.txt"))?;
    let depths = io::load_depths(&a.prediction.join("depths.rsfmd"))?;
    let intrinsics: Vec<Intrinsics> = manifest.frames.iter().map(|f| f.intrinsics).collect();
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    let n = io::export_ply(&a.out, &poses, &depths, &intrinsics, None, config.export.stride)?;
    println!("wrote {n} vertices to {}", a.out.display());
    Ok(())
}
