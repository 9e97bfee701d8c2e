//! Command line surface for the occrender library: scene generation,
//! rendering, distillation, evaluation, gradient checking, and segment
//! tooling behind a single binary.
//!
//! Exit codes are a stable contract shared by every subcommand: 0 on
//! success, 1 when a gradient check ran but failed, 2 for I/O and parse
//! errors (unreadable files, malformed JSON), 3 for validation errors
//! (out-of-range values, mismatched grids, invalid cameras). Given
//! identical inputs, flags, and seeds, every subcommand produces
//! byte-identical outputs regardless of thread count.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use occrender::camera::{save_cameras, Camera, SamplingConfig};
use occrender::distill::{
    gradcheck, gradcheck_scene, load_distill_config, make_synthetic_scene, run_distillation,
    GradcheckLoss, SceneConfig, OCCUPANCY_THRESHOLD,
};
use occrender::imageio::{load_pgm, load_ppm};
use occrender::render::{
    render_view, write_depth_pgm, write_opacity_pgm, write_semantics_ppm, RenderConfig,
    DEFAULT_OPACITY_FLOOR,
};
use occrender::segments::{grid_tiles, load_segments, save_segments, slic, SegmentMap};
use occrender::volume::{
    argmax_labels, load_voxel_grid, load_vxg, miou, save_label_grid, save_voxel_grid,
    Interpolation, SemanticLabelGrid, VxgContent,
};
use occrender::{Error, Result};

#[derive(Parser)]
#[command(
    name = "occrender",
    version,
    about = "Differentiable volume rendering over semantic occupancy grids",
    propagate_version = true
)]
struct Cli {
    /// Worker threads. Overrides the OCCRENDER_THREADS environment
    /// variable; 0 or unset picks a count automatically. Outputs do not
    /// depend on this setting.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: ground-truth labels and a teacher grid.
    GenScene(GenSceneArgs),
    /// Render depth, semantic, and opacity images from a voxel grid.
    Render(RenderArgs),
    /// Run teacher-to-student distillation from a JSON config.
    Distill(DistillArgs),
    /// Score a predicted grid against ground-truth labels.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Build a segment map from an image.
    Segments(SegmentsArgs),
}

#[derive(Args)]
#[command(after_help = "Exit codes: 0 success, 2 unreadable or malformed config, 3 invalid scene.")]
struct GenSceneArgs {
    /// Scene config JSON: either a scene object or a distillation config
    /// holding one under "scene".
    config: PathBuf,

    /// Output path for the ground-truth label grid (.vxg).
    #[arg(long)]
    out_gt: PathBuf,

    /// Output path for the teacher voxel grid (.vxg).
    #[arg(long)]
    out_teacher: PathBuf,

    /// Also write the scene's cameras as a JSON array.
    #[arg(long)]
    out_cameras: Option<PathBuf>,
}

#[derive(Args)]
#[command(
    after_help = "Exit codes: 0 success, 2 unreadable inputs, 3 invalid camera or render flags."
)]
struct RenderArgs {
    /// Voxel grid to render (.vxg with density and semantics).
    grid: PathBuf,

    /// Camera JSON: one camera object or an array of them.
    cameras: PathBuf,

    /// Output prefix; images land at <prefix>_cam<i>_depth.pgm,
    /// <prefix>_cam<i>_sem.ppm, and <prefix>_cam<i>_opacity.pgm.
    #[arg(long)]
    out_prefix: String,

    /// Distance between samples along each ray.
    #[arg(long, default_value_t = 0.4)]
    step: f64,

    /// Maximum samples per ray.
    #[arg(long, default_value_t = 192)]
    max_samples: usize,

    /// Near clip distance.
    #[arg(long, default_value_t = 0.0)]
    near: f64,

    /// Field interpolation: trilinear or nearest.
    #[arg(long, default_value = "trilinear")]
    interpolation: String,

    /// Rendered opacity below this counts as a miss.
    #[arg(long, default_value_t = DEFAULT_OPACITY_FLOOR)]
    opacity_floor: f64,
}

#[derive(Args)]
#[command(
    after_help = "Exit codes: 0 success, 2 unreadable or malformed config, 3 invalid config values."
)]
struct DistillArgs {
    /// Distillation config JSON with "scene" and "train" sections.
    config: PathBuf,

    /// Output directory for history.csv, evals.csv, student.vxg, and
    /// optional snapshots.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
#[command(
    after_help = "Exit codes: 0 success, 2 unreadable grids, 3 mismatched grid shape or classes."
)]
struct EvalArgs {
    /// Predicted grid (.vxg): voxel fields are thresholded and argmaxed,
    /// label grids are scored as-is.
    pred: PathBuf,

    /// Ground-truth label grid (.vxg).
    gt: PathBuf,

    /// Restrict scoring to the ground-truth visibility mask.
    #[arg(long)]
    mask: bool,

    /// Emit the report as JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
#[command(
    after_help = "Exit codes: 0 all blocks pass, 1 any block fails, 2 unreadable config, \
                  3 invalid scene or selector."
)]
struct GradcheckArgs {
    /// Loss selector: rdc, sad, kl, silog, gt, render, or all.
    #[arg(long, default_value = "all")]
    loss: String,

    /// Maximum allowed relative error between analytic and finite-difference
    /// gradients.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,

    /// Scene config JSON (grids up to 8x8x8, images up to 8x8); defaults to
    /// a built-in tiny scene.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
#[command(
    after_help = "Exit codes: 0 success, 2 unreadable image, 3 invalid method or parameters."
)]
struct SegmentsArgs {
    /// Input image: PGM (gray) or PPM (color) for slic and tiles; an
    /// existing segment PGM for file.
    input: PathBuf,

    /// Segmentation method: slic, tiles, or file.
    #[arg(long)]
    method: String,

    /// Output segment map (PGM, one label per pixel).
    #[arg(long)]
    out: PathBuf,

    /// slic: target segment count.
    #[arg(long, default_value_t = 16)]
    k: usize,

    /// slic: spatial compactness weight.
    #[arg(long, default_value_t = 10.0)]
    compactness: f64,

    /// slic: refinement iterations.
    #[arg(long, default_value_t = 10)]
    iterations: usize,

    /// slic: seed, accepted for interface stability (initialization is
    /// deterministic).
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// tiles: tile side in pixels.
    #[arg(long, default_value_t = 8)]
    tile: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Io { .. } | Error::Parse { .. } => ExitCode::from(2),
                Error::Invalid(_) => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::GenScene(args) => cmd_gen_scene(args),
        Command::Render(args) => cmd_render(args),
        Command::Distill(args) => cmd_distill(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Segments(args) => cmd_segments(args),
    }
}

/// Sizes the global worker pool from `--threads` or OCCRENDER_THREADS.
fn configure_threads(flag: Option<usize>) -> Result<()> {
    let count = match flag {
        Some(n) => Some(n),
        None => match std::env::var("OCCRENDER_THREADS") {
            Ok(raw) => Some(raw.trim().parse::<usize>().map_err(|_| {
                Error::invalid(format!("OCCRENDER_THREADS must be a non-negative integer, got {raw:?}"))
            })?),
            Err(_) => None,
        },
    };
    if let Some(n) = count {
        // num_threads(0) asks rayon to pick; matches the unset behavior.
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(format!("failed to configure {n} worker threads: {e}")))?;
    }
    Ok(())
}

/// Reads a scene config from either a bare scene object or a full
/// distillation config (its "scene" section).
fn load_scene_config(path: &Path) -> Result<SceneConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    if let Some(scene) = value.get_mut("scene") {
        value = scene.take();
    }
    serde_json::from_value(value).map_err(|e| Error::parse(path, e.to_string()))
}

/// Loads cameras, separating malformed JSON (parse error, exit 2) from a
/// readable file describing an invalid camera (validation error, exit 3).
fn load_cameras_checked(path: &Path) -> Result<Vec<Camera>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    let cams = if value.is_array() {
        serde_json::from_value::<Vec<Camera>>(value)
    } else {
        serde_json::from_value::<Camera>(value).map(|c| vec![c])
    }
    .map_err(|e| Error::invalid(format!("invalid camera in {}: {e}", path.display())))?;
    if cams.is_empty() {
        return Err(Error::invalid(format!("{} holds an empty camera array", path.display())));
    }
    Ok(cams)
}

fn cmd_gen_scene(args: GenSceneArgs) -> Result<ExitCode> {
    let scene = load_scene_config(&args.config)?;
    let (gt, teacher) = make_synthetic_scene(&scene)?;
    save_label_grid(&gt, &args.out_gt)?;
    save_voxel_grid(&teacher, &args.out_teacher)?;
    if let Some(path) = &args.out_cameras {
        save_cameras(&scene.cameras, path)?;
    }
    let [dx, dy, dz] = scene.grid.dims;
    println!(
        "scene {dx}x{dy}x{dz}, {} classes: wrote {} and {}",
        scene.num_classes,
        args.out_gt.display(),
        args.out_teacher.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_render(args: RenderArgs) -> Result<ExitCode> {
    let interpolation = match args.interpolation.as_str() {
        "trilinear" => Interpolation::Trilinear,
        "nearest" => Interpolation::Nearest,
        other => {
            return Err(Error::invalid(format!(
                "unknown interpolation {other:?}; expected trilinear or nearest"
            )))
        }
    };
    let cfg = RenderConfig {
        sampling: SamplingConfig {
            step_size: args.step,
            max_samples: args.max_samples,
            near: args.near,
        },
        interpolation,
        opacity_floor: args.opacity_floor,
    };
    cfg.validate()?;
    let grid = load_voxel_grid(&args.grid)?;
    let cameras = load_cameras_checked(&args.cameras)?;
    for (i, camera) in cameras.iter().enumerate() {
        let (view, _) = render_view(&grid, camera, &cfg, None)?;
        let prefix = &args.out_prefix;
        write_depth_pgm(&view, format!("{prefix}_cam{i}_depth.pgm"))?;
        write_semantics_ppm(&view, format!("{prefix}_cam{i}_sem.ppm"))?;
        write_opacity_pgm(&view, format!("{prefix}_cam{i}_opacity.pgm"))?;
        println!(
            "camera {i}: {}x{} -> {prefix}_cam{i}_{{depth.pgm,sem.ppm,opacity.pgm}}",
            camera.width(),
            camera.height()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_distill(args: DistillArgs) -> Result<ExitCode> {
    let cfg = load_distill_config(&args.config)?;
    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let result = run_distillation(&cfg.scene, &cfg.train, Some(&args.out_dir))?;
    for record in &result.evals {
        println!("step {:>6}  miou {:.4}", record.step, record.miou);
    }
    println!("final_miou={:.6}", result.final_miou);
    Ok(ExitCode::SUCCESS)
}

/// Loads a `.vxg` as labels: voxel fields are argmaxed at the occupancy
/// threshold, label grids pass through.
fn load_labels_any(path: &Path) -> Result<SemanticLabelGrid> {
    match load_vxg(path)? {
        VxgContent::Labels(labels) => Ok(labels),
        VxgContent::Grid(grid) => argmax_labels(&grid, OCCUPANCY_THRESHOLD),
    }
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode> {
    let pred = load_labels_any(&args.pred)?;
    let gt = load_labels_any(&args.gt)?;
    let report = miou(&pred, &gt, args.mask)?;
    if args.json {
        let text = serde_json::to_string(&report)
            .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
        println!("{text}");
    } else {
        println!("class   iou");
        let free = report.per_class.len() - 1;
        for (class, iou) in report.per_class.iter().enumerate() {
            let name = if class == free { "free".to_string() } else { class.to_string() };
            if iou.is_nan() {
                println!("{name:>5}   n/a");
            } else {
                println!("{name:>5}   {iou:.4}");
            }
        }
        println!(" mean   {:.4}", report.miou);
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let which: GradcheckLoss = args.loss.parse()?;
    let scene = match &args.config {
        Some(path) => load_scene_config(path)?,
        None => gradcheck_scene(),
    };
    let report = gradcheck(&scene, which, args.tolerance)?;
    for row in &report.rows {
        println!(
            "loss {:>6}  block {:<9}  max_rel_err {:.3e}  checked {:>3}  {}",
            row.loss,
            row.block,
            row.max_rel_err,
            row.checked,
            if row.pass { "pass" } else { "FAIL" }
        );
    }
    if report.all_pass() {
        println!("gradcheck passed at tolerance {:e}", report.tolerance);
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED at tolerance {:e}", report.tolerance);
        Ok(ExitCode::from(1))
    }
}

/// Reads an image as a per-pixel feature vector in [0, 1]: grayscale PGM
/// gives one channel, color PPM gives three.
fn load_features(path: &Path) -> Result<(Vec<f64>, usize, usize, usize)> {
    match image_magic(path)? {
        b'5' => {
            let img = load_pgm(path)?;
            let maxval = img.maxval as f64;
            let features = img.pixels.iter().map(|&p| p as f64 / maxval).collect();
            Ok((features, img.width, img.height, 1))
        }
        b'6' => {
            let img = load_ppm(path)?;
            let features = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
            Ok((features, img.width, img.height, 3))
        }
        _ => Err(Error::parse(path, "expected a P5 PGM or P6 PPM image")),
    }
}

/// Second byte of the Netpbm magic ('5' for PGM, '6' for PPM).
fn image_magic(path: &Path) -> Result<u8> {
    use std::io::Read;
    let mut magic = [0u8; 2];
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    file.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if magic[0] != b'P' {
        return Err(Error::parse(path, "not a Netpbm image"));
    }
    Ok(magic[1])
}

fn cmd_segments(args: SegmentsArgs) -> Result<ExitCode> {
    let map: SegmentMap = match args.method.as_str() {
        "slic" => {
            let (features, width, height, channels) = load_features(&args.input)?;
            slic(&features, width, height, channels, args.k, args.compactness, args.iterations, args.seed)?
        }
        "tiles" => {
            let (_, width, height, _) = load_features(&args.input)?;
            grid_tiles(width, height, args.tile)?
        }
        "file" => load_segments(&args.input)?,
        other => {
            return Err(Error::invalid(format!(
                "unknown method {other:?}; expected slic, tiles, or file"
            )))
        }
    };
    save_segments(&map, &args.out)?;
    println!(
        "{} segments over {}x{} -> {}",
        map.num_segments(),
        map.width(),
        map.height(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}
