//! Desk-scale teacher/student distillation harness.
//!
//! A synthetic scene voxelizes a handful of primitives into a ground-truth
//! label grid and a high-density "teacher" occupancy grid. The student is a
//! trainable voxel field (density logits through softplus, semantic logits
//! as-is) optimized with plain gradient descent against the rendering-space
//! losses of [`crate::losses`], optionally mixed with direct voxel
//! supervision. Teacher renders are cached once per camera; slicing the
//! cache is bit-identical to re-rendering the subset, so the cache is purely
//! an optimization.
//!
//! [`gradcheck`] verifies every loss path end to end (scene to parameters)
//! against central finite differences on a deliberately tiny scene.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{sample_ray_subset, Camera};
use crate::error::{bail, ensure, Error, Result};
use crate::losses::{
    total_loss, DistillMode, DistillationWeights, LossReport, TotalLoss, ViewPair,
};
use crate::render::{
    render_view, write_depth_pgm, write_semantics_ppm, RayDistribution, RayUpstream,
    RenderConfig, RenderedView,
};
use crate::segments::{grid_tiles, load_segments, slic, SegmentMap};
use crate::volume::{
    argmax_labels, miou, save_voxel_grid, GridSpec, SemanticLabelGrid, VoxelGrid,
};

/// Density threshold used when reading predicted labels out of a student
/// grid for evaluation.
pub const OCCUPANCY_THRESHOLD: f64 = 0.5;

/// Largest grid dimension and image side allowed by [`gradcheck`]; finite
/// differences on anything bigger would dominate the test budget.
pub const GRADCHECK_MAX_DIM: usize = 8;

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`: `y + ln(1 - e^-y)`, with the inner
/// difference computed through `exp_m1` so tiny `y` stays accurate.
pub fn inverse_softplus(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    y + (-(-y).exp_m1()).ln()
}

/// Numerically stable logistic function, also the derivative of softplus.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Solid primitive, voxelized by testing voxel centers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Shape {
    Box { center: [f64; 3], size: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

impl Shape {
    fn contains(&self, p: [f64; 3]) -> bool {
        match self {
            Shape::Box { center, size } => (0..3)
                .all(|a| (p[a] - center[a]).abs() <= size[a] * 0.5),
            Shape::Sphere { center, radius } => {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]) * (p[a] - center[a])).sum();
                d2 <= radius * radius
            }
        }
    }

    /// Axis-aligned bounds, for the scene-intersection validity check.
    fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        match self {
            Shape::Box { center, size } => {
                let lo = [0, 1, 2].map(|a| center[a] - size[a] * 0.5);
                let hi = [0, 1, 2].map(|a| center[a] + size[a] * 0.5);
                (lo, hi)
            }
            Shape::Sphere { center, radius } => {
                let lo = [0, 1, 2].map(|a| center[a] - radius);
                let hi = [0, 1, 2].map(|a| center[a] + radius);
                (lo, hi)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        match self {
            Shape::Box { center, size } => {
                ensure!(finite(center) && finite(size), "box parameters must be finite");
                ensure!(size.iter().all(|s| *s > 0.0), "box sides must be positive");
            }
            Shape::Sphere { center, radius } => {
                ensure!(finite(center) && radius.is_finite(), "sphere parameters must be finite");
                ensure!(*radius > 0.0, "sphere radius must be positive");
            }
        }
        Ok(())
    }
}

fn default_primitive_density() -> f64 {
    20.0
}

/// One scene element: a shape stamped with a class id and a teacher density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    #[serde(flatten)]
    pub shape: Shape,
    pub class_id: usize,
    #[serde(default = "default_primitive_density")]
    pub density: f64,
}

fn default_semantic_strength() -> f64 {
    10.0
}

/// Full synthetic scene description: grid geometry, primitives, and the
/// cameras observing it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneConfig {
    pub grid: GridSpec,
    pub num_classes: usize,
    pub primitives: Vec<Primitive>,
    pub cameras: Vec<Camera>,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of occupied voxels whose teacher class is resampled
    /// uniformly at random; ground truth stays clean.
    #[serde(default)]
    pub label_noise: f64,
    /// Magnitude of the one-hot semantic logits in the teacher grid.
    #[serde(default = "default_semantic_strength")]
    pub semantic_strength: f64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_classes >= 1, "scene needs at least one class");
        ensure!(!self.primitives.is_empty(), "scene has no primitives");
        ensure!(!self.cameras.is_empty(), "scene has no cameras");
        ensure!(
            (0.0..=1.0).contains(&self.label_noise),
            "label_noise must lie in [0, 1], got {}",
            self.label_noise
        );
        ensure!(
            self.semantic_strength.is_finite() && self.semantic_strength > 0.0,
            "semantic_strength must be positive, got {}",
            self.semantic_strength
        );
        let (grid_lo, grid_hi) = self.grid.aabb();
        for (i, prim) in self.primitives.iter().enumerate() {
            prim.shape.validate()?;
            ensure!(
                prim.class_id < self.num_classes,
                "primitive {i} uses class {} but the scene has {} classes",
                prim.class_id,
                self.num_classes
            );
            ensure!(
                prim.density.is_finite() && prim.density > 0.0,
                "primitive {i} density must be positive, got {}",
                prim.density
            );
            let (lo, hi) = prim.shape.bounds();
            let overlaps =
                (0..3).all(|a| lo[a] <= grid_hi[a] && grid_lo[a] <= hi[a]);
            ensure!(overlaps, "primitive {i} lies entirely outside the grid bounds");
        }
        Ok(())
    }
}

/// Voxelizes the scene into a clean ground-truth label grid and a teacher
/// grid. Later primitives overwrite earlier ones. Teacher density is the
/// primitive's density inside and 0 outside; teacher semantics are one-hot
/// logits scaled by `semantic_strength`. When `label_noise > 0`, that
/// fraction of occupied voxels gets a uniformly random teacher class (ground
/// truth is unaffected), emulating an imperfect teacher.
pub fn make_synthetic_scene(cfg: &SceneConfig) -> Result<(SemanticLabelGrid, VoxelGrid)> {
    cfg.validate()?;
    let spec = cfg.grid;
    let n = spec.num_voxels();
    let c = cfg.num_classes;
    let free = c as u16;

    let mut labels = vec![free; n];
    let mut density = vec![0.0; n];
    for prim in &cfg.primitives {
        for idx in 0..n {
            let [ix, iy, iz] = spec.voxel_coords(idx);
            let center = spec.voxel_center(ix, iy, iz);
            if prim.shape.contains([center.x, center.y, center.z]) {
                labels[idx] = prim.class_id as u16;
                density[idx] = prim.density;
            }
        }
    }

    // Teacher classes may be corrupted; the returned gt never is.
    let mut teacher_labels = labels.clone();
    if cfg.label_noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for l in teacher_labels.iter_mut() {
            if *l != free && rng.gen::<f64>() < cfg.label_noise {
                *l = rng.gen_range(0..c) as u16;
            }
        }
    }
    let mut semantics = vec![0.0; n * c];
    for (idx, &l) in teacher_labels.iter().enumerate() {
        if l != free {
            semantics[idx * c + l as usize] = cfg.semantic_strength;
        }
    }

    let gt = SemanticLabelGrid::new(spec, c, labels, None)?;
    let teacher = VoxelGrid::new(spec, c, density, semantics)?;
    Ok((gt, teacher))
}

/// Trainable student: raw parameter fields over the voxel grid. Density
/// logits map through softplus when rendering, so the effective density is
/// always nonnegative; semantic logits are used directly.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentParams {
    spec: GridSpec,
    num_classes: usize,
    pub density_logits: Vec<f64>,
    pub semantic_logits: Vec<f64>,
}

impl StudentParams {
    pub fn new(
        spec: GridSpec,
        num_classes: usize,
        density_logits: Vec<f64>,
        semantic_logits: Vec<f64>,
    ) -> Result<Self> {
        ensure!(num_classes >= 1, "num_classes must be >= 1");
        let n = spec.num_voxels();
        ensure!(
            density_logits.len() == n,
            "density_logits has {} entries, expected {n}",
            density_logits.len()
        );
        ensure!(
            semantic_logits.len() == n * num_classes,
            "semantic_logits has {} entries, expected {}",
            semantic_logits.len(),
            n * num_classes
        );
        ensure!(
            density_logits.iter().chain(&semantic_logits).all(|v| v.is_finite()),
            "student parameters must be finite"
        );
        Ok(StudentParams { spec, num_classes, density_logits, semantic_logits })
    }

    /// Uniform noise in `[-scale, scale]` for both fields (density first,
    /// then semantics, from one seeded stream).
    pub fn noise(spec: GridSpec, num_classes: usize, seed: u64, scale: f64) -> Result<Self> {
        ensure!(scale.is_finite() && scale >= 0.0, "noise scale must be nonnegative");
        let n = spec.num_voxels();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| if scale == 0.0 { 0.0 } else { rng.gen_range(-scale..scale) })
                .collect()
        };
        let density = draw(n);
        let semantics = draw(n * num_classes);
        StudentParams::new(spec, num_classes, density, semantics)
    }

    /// Shifts every density logit, e.g. to start from a mostly-empty field.
    pub fn with_density_bias(mut self, bias: f64) -> Self {
        for x in &mut self.density_logits {
            *x += bias;
        }
        self
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Renders the parameters into a concrete grid: softplus on density,
    /// semantics passed through.
    pub fn materialize(&self) -> Result<VoxelGrid> {
        let density = self.density_logits.iter().map(|&x| softplus(x)).collect();
        VoxelGrid::new(self.spec, self.num_classes, density, self.semantic_logits.clone())
    }
}

/// Direct voxel supervision against ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionLoss {
    pub value: f64,
    pub d_density_logits: Vec<f64>,
    pub d_semantic_logits: Vec<f64>,
}

/// Binary cross-entropy between sigmoid(density logit) and the occupancy
/// indicator, averaged over all voxels, plus softmax cross-entropy on the
/// semantic logits averaged over occupied voxels. Gradients are with respect
/// to the raw student parameters.
pub fn voxel_supervision_loss(
    params: &StudentParams,
    gt: &SemanticLabelGrid,
) -> Result<SupervisionLoss> {
    ensure!(params.spec == *gt.spec(), "student and ground truth grids differ");
    ensure!(
        params.num_classes == gt.num_classes(),
        "student has {} classes, ground truth {}",
        params.num_classes,
        gt.num_classes()
    );
    let n = params.spec.num_voxels();
    let c = params.num_classes;
    let free = gt.free_label();

    let occupied: Vec<usize> =
        (0..n).filter(|&idx| gt.labels()[idx] != free).collect();
    let inv_n = 1.0 / n as f64;

    let mut value = 0.0;
    let mut d_density = vec![0.0; n];
    for idx in 0..n {
        let x = params.density_logits[idx];
        let y = if gt.labels()[idx] != free { 1.0 } else { 0.0 };
        // Stable BCE with logits: max(x,0) - x*y + ln(1 + e^-|x|).
        value += (x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()) * inv_n;
        d_density[idx] = (sigmoid(x) - y) * inv_n;
    }

    let mut d_semantics = vec![0.0; n * c];
    if !occupied.is_empty() {
        let inv_occ = 1.0 / occupied.len() as f64;
        for &idx in &occupied {
            let row = &params.semantic_logits[idx * c..(idx + 1) * c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            let label = gt.labels()[idx] as usize;
            value += (log_sum - row[label]) * inv_occ;
            for k in 0..c {
                let q = (row[k] - log_sum).exp();
                let target = if k == label { 1.0 } else { 0.0 };
                d_semantics[idx * c + k] = (q - target) * inv_occ;
            }
        }
    }
    Ok(SupervisionLoss { value, d_density_logits: d_density, d_semantic_logits: d_semantics })
}

/// Where per-camera segment maps come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum SegmentSource {
    /// Fixed square tiles of the given side length.
    Tiles { tile: usize },
    /// SLIC super-pixels over the teacher's rendered semantics.
    Slic {
        k: usize,
        #[serde(default = "default_compactness")]
        compactness: f64,
        #[serde(default = "default_slic_iterations")]
        iterations: usize,
    },
    /// Pre-computed segment PGMs, one per camera, in camera order.
    Files { paths: Vec<PathBuf> },
}

fn default_compactness() -> f64 {
    10.0
}

fn default_slic_iterations() -> usize {
    10
}

impl Default for SegmentSource {
    fn default() -> Self {
        SegmentSource::Tiles { tile: 8 }
    }
}

impl SegmentSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            SegmentSource::Tiles { tile } => ensure!(*tile >= 1, "tile size must be >= 1"),
            SegmentSource::Slic { k, compactness, iterations } => {
                ensure!(*k >= 1, "slic k must be >= 1");
                ensure!(
                    compactness.is_finite() && *compactness > 0.0,
                    "slic compactness must be positive"
                );
                ensure!(*iterations >= 1, "slic needs at least one iteration");
            }
            SegmentSource::Files { paths } => {
                ensure!(!paths.is_empty(), "segment file list is empty")
            }
        }
        Ok(())
    }
}

fn default_learning_rate() -> f64 {
    0.1
}

fn default_ray_budget() -> usize {
    80_000
}

fn default_mode() -> DistillMode {
    DistillMode::RdcRsc
}

fn default_eval_every() -> usize {
    100
}

fn default_init_scale() -> f64 {
    1.0
}

fn default_init_density_bias() -> f64 {
    -1.0
}

/// Training loop configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_ray_budget")]
    pub ray_budget: usize,
    #[serde(default)]
    pub weights: DistillationWeights,
    #[serde(default = "default_mode")]
    pub mode: DistillMode,
    #[serde(default)]
    pub gt_weight: f64,
    #[serde(default)]
    pub seed: u64,
    /// Evaluate mIoU every this many steps; 0 disables intermediate evals.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub segments: SegmentSource,
    /// Student init: uniform noise half-width for both parameter fields.
    #[serde(default = "default_init_scale")]
    pub init_scale: f64,
    /// Student init: constant shift of the density logits. Negative values
    /// start from a mostly-empty field.
    #[serde(default = "default_init_density_bias")]
    pub init_density_bias: f64,
    /// Write per-eval depth/semantics snapshots of the student (only when an
    /// output directory is given).
    #[serde(default)]
    pub snapshots: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(self.ray_budget >= 1, "ray_budget must be >= 1");
        ensure!(
            self.gt_weight.is_finite() && self.gt_weight >= 0.0,
            "gt_weight must be nonnegative, got {}",
            self.gt_weight
        );
        ensure!(
            self.init_scale.is_finite() && self.init_scale >= 0.0,
            "init_scale must be nonnegative"
        );
        ensure!(self.init_density_bias.is_finite(), "init_density_bias must be finite");
        self.weights.validate()?;
        self.render.validate()?;
        self.segments.validate()
    }
}

/// The combined experiment description read from one JSON config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistillConfig {
    pub scene: SceneConfig,
    pub train: TrainConfig,
}

/// Parses and validates a JSON experiment config. Syntax and shape problems
/// are parse errors; invalid values are validation errors.
pub fn load_distill_config(path: impl AsRef<Path>) -> Result<DistillConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg: DistillConfig =
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
    cfg.scene.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

/// Frozen full-view teacher renders, one entry per camera.
pub struct TeacherCache {
    pub views: Vec<RenderedView>,
    pub rays: Vec<Vec<RayDistribution>>,
}

impl TeacherCache {
    /// Extracts the cached rays for a pixel selection. Per-ray results do
    /// not depend on which other rays were rendered, so this is bit-identical
    /// to rendering the subset directly.
    pub fn slice_rays(&self, camera: usize, selection: &[usize]) -> Vec<RayDistribution> {
        selection.iter().map(|&p| self.rays[camera][p].clone()).collect()
    }
}

/// Renders every camera's full view of the (frozen) teacher once.
pub fn build_teacher_cache(
    teacher: &VoxelGrid,
    cameras: &[Camera],
    cfg: &RenderConfig,
) -> Result<TeacherCache> {
    ensure!(!cameras.is_empty(), "teacher cache needs at least one camera");
    let mut views = Vec::with_capacity(cameras.len());
    let mut rays = Vec::with_capacity(cameras.len());
    for camera in cameras {
        let (view, dists) = render_view(teacher, camera, cfg, None)?;
        views.push(view);
        rays.push(dists);
    }
    Ok(TeacherCache { views, rays })
}

/// Materializes per-camera segment maps from the configured source. SLIC
/// segments the teacher's rendered semantics; files must match the camera
/// count and sizes.
pub fn build_segments(
    source: &SegmentSource,
    cache: &TeacherCache,
    cameras: &[Camera],
) -> Result<Vec<SegmentMap>> {
    source.validate()?;
    let mut maps = Vec::with_capacity(cameras.len());
    match source {
        SegmentSource::Tiles { tile } => {
            for camera in cameras {
                maps.push(grid_tiles(camera.width(), camera.height(), *tile)?);
            }
        }
        SegmentSource::Slic { k, compactness, iterations } => {
            for (camera, view) in cameras.iter().zip(&cache.views) {
                maps.push(slic(
                    &view.semantics,
                    camera.width(),
                    camera.height(),
                    view.num_classes,
                    *k,
                    *compactness,
                    *iterations,
                    0,
                )?);
            }
        }
        SegmentSource::Files { paths } => {
            ensure!(
                paths.len() == cameras.len(),
                "got {} segment files for {} cameras",
                paths.len(),
                cameras.len()
            );
            for (camera, path) in cameras.iter().zip(paths) {
                let map = load_segments(path)?;
                ensure!(
                    map.width() == camera.width() && map.height() == camera.height(),
                    "segment map {} is {}x{}, camera renders {}x{}",
                    path.display(),
                    map.width(),
                    map.height(),
                    camera.width(),
                    camera.height()
                );
                maps.push(map);
            }
        }
    }
    Ok(maps)
}

/// True when the mode/weight combination puts any gradient through the
/// renderer. Pure ground-truth runs skip rendering entirely.
fn rendering_needed(mode: DistillMode, weights: &DistillationWeights) -> bool {
    (mode.uses_rdc() && weights.lambda_rdc > 0.0)
        || (mode.uses_silog() && weights.lambda_rdc > 0.0)
        || (mode.uses_sad() && weights.lambda_sad > 0.0)
        || (mode.uses_kl() && weights.lambda_kl > 0.0)
}

struct StepGradients {
    d_density_logits: Vec<f64>,
    d_semantic_logits: Vec<f64>,
}

/// One forward (and optionally backward) pass of the distillation objective
/// at a given step index. The ray subset is drawn from the global pixel
/// index space across all cameras, seeded by `cfg.seed + step_index`.
fn step_core(
    params: &StudentParams,
    gt: &SemanticLabelGrid,
    cameras: &[Camera],
    cfg: &TrainConfig,
    step_index: usize,
    cache: &TeacherCache,
    segments: &[SegmentMap],
    with_gradients: bool,
) -> Result<(LossReport, Option<StepGradients>)> {
    cfg.validate()?;
    ensure!(!cameras.is_empty(), "distillation needs at least one camera");
    ensure!(
        cache.views.len() == cameras.len() && cache.rays.len() == cameras.len(),
        "teacher cache covers {} cameras, scene has {}",
        cache.views.len(),
        cameras.len()
    );
    ensure!(
        segments.len() == cameras.len(),
        "got {} segment maps for {} cameras",
        segments.len(),
        cameras.len()
    );
    ensure!(params.spec == *gt.spec(), "student and ground truth grids differ");
    ensure!(
        params.num_classes == gt.num_classes(),
        "student and ground truth class counts differ"
    );

    let n = params.spec.num_voxels();
    let c = params.num_classes;
    let mut report = LossReport {
        rdc: 0.0,
        sad: 0.0,
        kl: 0.0,
        silog: 0.0,
        total: 0.0,
        rays_used: 0,
        segments_used: 0,
    };
    let mut grads = with_gradients.then(|| StepGradients {
        d_density_logits: vec![0.0; n],
        d_semantic_logits: vec![0.0; n * c],
    });

    if rendering_needed(cfg.mode, &cfg.weights) {
        // Global ray subset, split per camera by pixel offset.
        let total_pixels: usize = cameras.iter().map(|cam| cam.num_pixels()).sum();
        let budget = cfg.ray_budget.min(total_pixels);
        let seed = cfg.seed.wrapping_add(step_index as u64);
        let global = sample_ray_subset(total_pixels, budget, seed)?;
        let mut per_camera: Vec<Vec<usize>> = vec![Vec::new(); cameras.len()];
        let mut offset = 0;
        let mut cam = 0;
        for g in global {
            while g >= offset + cameras[cam].num_pixels() {
                offset += cameras[cam].num_pixels();
                cam += 1;
            }
            per_camera[cam].push(g - offset);
        }

        let student_grid = params.materialize()?;
        struct CamRender {
            camera: usize,
            selection: Vec<usize>,
            view: RenderedView,
            rays: Vec<RayDistribution>,
            teacher_rays: Vec<RayDistribution>,
        }
        let mut rendered = Vec::new();
        for (ci, selection) in per_camera.into_iter().enumerate() {
            if selection.is_empty() {
                continue;
            }
            let (view, rays) =
                render_view(&student_grid, &cameras[ci], &cfg.render, Some(&selection))?;
            let teacher_rays = cache.slice_rays(ci, &selection);
            rendered.push(CamRender { camera: ci, selection, view, rays, teacher_rays });
        }
        let views: Vec<ViewPair> = rendered
            .iter()
            .map(|r| ViewPair {
                selection: &r.selection,
                teacher_view: &cache.views[r.camera],
                teacher_rays: &r.teacher_rays,
                student_view: &r.view,
                student_rays: &r.rays,
                segments: &segments[r.camera],
            })
            .collect();
        let TotalLoss { report: distill_report, upstream } =
            total_loss(&views, cfg.mode, &cfg.weights)?;
        report = distill_report;

        if let Some(grads) = grads.as_mut() {
            for (r, up) in rendered.iter().zip(&upstream) {
                let g = crate::render::render_backward(
                    &student_grid,
                    &cameras[r.camera],
                    &cfg.render,
                    Some(&r.selection),
                    up,
                )?;
                // Density gradients arrive in sigma space; the softplus
                // chain happens once, after accumulation.
                for (acc, d) in grads.d_density_logits.iter_mut().zip(&g.d_density) {
                    *acc += d;
                }
                for (acc, d) in grads.d_semantic_logits.iter_mut().zip(&g.d_semantics) {
                    *acc += d;
                }
            }
            for (acc, &x) in grads.d_density_logits.iter_mut().zip(&params.density_logits) {
                *acc *= sigmoid(x);
            }
        }
    }

    if cfg.gt_weight > 0.0 {
        let sup = voxel_supervision_loss(params, gt)?;
        report.total += cfg.gt_weight * sup.value;
        if let Some(grads) = grads.as_mut() {
            for (acc, d) in grads.d_density_logits.iter_mut().zip(&sup.d_density_logits) {
                *acc += cfg.gt_weight * d;
            }
            for (acc, d) in grads.d_semantic_logits.iter_mut().zip(&sup.d_semantic_logits) {
                *acc += cfg.gt_weight * d;
            }
        }
    }
    Ok((report, grads))
}

/// One optimization step: evaluates the objective on this step's ray subset,
/// backpropagates into the student parameters, and applies plain gradient
/// descent with `cfg.learning_rate`.
pub fn distill_step(
    params: &mut StudentParams,
    gt: &SemanticLabelGrid,
    cameras: &[Camera],
    cfg: &TrainConfig,
    step_index: usize,
    cache: &TeacherCache,
    segments: &[SegmentMap],
) -> Result<LossReport> {
    let (report, grads) =
        step_core(params, gt, cameras, cfg, step_index, cache, segments, true)?;
    let grads = grads.expect("gradients were requested");
    for (x, d) in params.density_logits.iter_mut().zip(&grads.d_density_logits) {
        *x -= cfg.learning_rate * d;
    }
    for (x, d) in params.semantic_logits.iter_mut().zip(&grads.d_semantic_logits) {
        *x -= cfg.learning_rate * d;
    }
    Ok(report)
}

/// Evaluates the objective for a step without touching the parameters.
/// Useful for in-sample descent checks and finite differences.
pub fn evaluate_step(
    params: &StudentParams,
    gt: &SemanticLabelGrid,
    cameras: &[Camera],
    cfg: &TrainConfig,
    step_index: usize,
    cache: &TeacherCache,
    segments: &[SegmentMap],
) -> Result<LossReport> {
    step_core(params, gt, cameras, cfg, step_index, cache, segments, false)
        .map(|(report, _)| report)
}

/// mIoU of the student's argmax labels against ground truth.
pub fn evaluate_miou(params: &StudentParams, gt: &SemanticLabelGrid) -> Result<f64> {
    let grid = params.materialize()?;
    let pred = argmax_labels(&grid, OCCUPANCY_THRESHOLD)?;
    Ok(miou(&pred, gt, false)?.miou)
}

/// mIoU measured at some step of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    pub miou: f64,
}

/// Everything a distillation run produces.
pub struct RunResult {
    pub history: Vec<LossReport>,
    pub evals: Vec<EvalRecord>,
    pub initial_miou: f64,
    pub final_miou: f64,
    pub params: StudentParams,
    pub student: VoxelGrid,
}

pub const HISTORY_HEADER: &str = "step,rdc,sad,kl,silog,total,rays_used,segments_used";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Runs the full harness: builds the scene, caches teacher renders, derives
/// segments, initializes the student from seeded noise, optimizes for
/// `train.steps` steps, and evaluates mIoU at `eval_every` boundaries plus
/// the start and end. With an output directory it writes `history.csv`,
/// `evals.csv`, the final `student.vxg`, and (when `train.snapshots`)
/// per-eval depth/semantics images.
pub fn run_distillation(
    scene: &SceneConfig,
    train: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<RunResult> {
    scene.validate()?;
    train.validate()?;
    let (gt, teacher) = make_synthetic_scene(scene)?;
    let cache = build_teacher_cache(&teacher, &scene.cameras, &train.render)?;
    let segments = build_segments(&train.segments, &cache, &scene.cameras)?;
    let mut params =
        StudentParams::noise(scene.grid, scene.num_classes, train.seed, train.init_scale)?
            .with_density_bias(train.init_density_bias);

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let snapshot = |params: &StudentParams, step: usize| -> Result<()> {
        let Some(dir) = out_dir else { return Ok(()) };
        if !train.snapshots {
            return Ok(());
        }
        let grid = params.materialize()?;
        for (ci, camera) in scene.cameras.iter().enumerate() {
            let (view, _) = render_view(&grid, camera, &train.render, None)?;
            write_depth_pgm(&view, dir.join(format!("step{step:05}_cam{ci}_depth.pgm")))?;
            write_semantics_ppm(&view, dir.join(format!("step{step:05}_cam{ci}_sem.ppm")))?;
        }
        Ok(())
    };

    let initial_miou = evaluate_miou(&params, &gt)?;
    let mut evals = vec![EvalRecord { step: 0, miou: initial_miou }];
    let mut history = Vec::with_capacity(train.steps);
    snapshot(&params, 0)?;
    for step in 0..train.steps {
        let report =
            distill_step(&mut params, &gt, &scene.cameras, train, step, &cache, &segments)?;
        history.push(report);
        let done = step + 1;
        if train.eval_every > 0 && done % train.eval_every == 0 {
            evals.push(EvalRecord { step: done, miou: evaluate_miou(&params, &gt)? });
            snapshot(&params, done)?;
        }
    }
    if evals.last().map(|e| e.step) != Some(train.steps) {
        evals.push(EvalRecord { step: train.steps, miou: evaluate_miou(&params, &gt)? });
    }
    let final_miou = evals.last().expect("at least the initial eval exists").miou;
    let student = params.materialize()?;

    if let Some(dir) = out_dir {
        let mut csv = String::from(HISTORY_HEADER);
        csv.push('\n');
        for (step, r) in history.iter().enumerate() {
            writeln!(
                csv,
                "{step},{},{},{},{},{},{},{}",
                r.rdc, r.sad, r.kl, r.silog, r.total, r.rays_used, r.segments_used
            )
            .expect("writing to a string cannot fail");
        }
        write_file(&dir.join("history.csv"), &csv)?;
        let mut ecsv = String::from("step,miou\n");
        for e in &evals {
            writeln!(ecsv, "{},{}", e.step, e.miou).expect("writing to a string cannot fail");
        }
        write_file(&dir.join("evals.csv"), &ecsv)?;
        save_voxel_grid(&student, dir.join("student.vxg"))?;
    }

    Ok(RunResult { history, evals, initial_miou, final_miou, params, student })
}

/// Which gradient path [`gradcheck`] exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckLoss {
    Rdc,
    Sad,
    Kl,
    Silog,
    Gt,
    Render,
    All,
}

impl GradcheckLoss {
    pub fn as_str(&self) -> &'static str {
        match self {
            GradcheckLoss::Rdc => "rdc",
            GradcheckLoss::Sad => "sad",
            GradcheckLoss::Kl => "kl",
            GradcheckLoss::Silog => "silog",
            GradcheckLoss::Gt => "gt",
            GradcheckLoss::Render => "render",
            GradcheckLoss::All => "all",
        }
    }
}

impl std::str::FromStr for GradcheckLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rdc" => Ok(GradcheckLoss::Rdc),
            "sad" => Ok(GradcheckLoss::Sad),
            "kl" => Ok(GradcheckLoss::Kl),
            "silog" => Ok(GradcheckLoss::Silog),
            "gt" => Ok(GradcheckLoss::Gt),
            "render" => Ok(GradcheckLoss::Render),
            "all" => Ok(GradcheckLoss::All),
            other => bail!("unknown loss selector {other:?}"),
        }
    }
}

impl std::fmt::Display for GradcheckLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Finite-difference comparison for one loss and parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckRow {
    pub loss: String,
    pub block: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub rows: Vec<GradcheckRow>,
}

impl GradcheckReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

const GRADCHECK_COORDS: usize = 200;
const GRADCHECK_STEP: f64 = 1e-4;

/// Compares one analytic gradient block against central finite differences
/// of `objective` on a random coordinate subsample.
fn fd_block(
    params: &StudentParams,
    analytic: &[f64],
    density_block: bool,
    objective: &mut dyn FnMut(&StudentParams) -> Result<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, usize)> {
    let len = analytic.len();
    let count = GRADCHECK_COORDS.min(len);
    let coords: Vec<usize> = if count == len {
        (0..len).collect()
    } else {
        let mut picked = rand::seq::index::sample(rng, len, count).into_vec();
        picked.sort_unstable();
        picked
    };
    let mut max_rel: f64 = 0.0;
    for &i in &coords {
        let mut probe = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            let field =
                if density_block { &mut p.density_logits } else { &mut p.semantic_logits };
            field[i] += delta;
            objective(&p)
        };
        let fd = (probe(GRADCHECK_STEP)? - probe(-GRADCHECK_STEP)?) / (2.0 * GRADCHECK_STEP);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(1e-6);
        max_rel = max_rel.max(((a - fd) / denom).abs());
    }
    Ok((max_rel, coords.len()))
}

/// Loss selector to training configuration: mode and weights that isolate
/// exactly one term with unit weight.
fn selector_config(which: GradcheckLoss, render: RenderConfig) -> TrainConfig {
    let (mode, weights, gt_weight) = match which {
        GradcheckLoss::Rdc => (
            DistillMode::Rdc,
            DistillationWeights { lambda_rdc: 1.0, lambda_sad: 0.0, lambda_kl: 0.0, silog_lambda: 0.5 },
            0.0,
        ),
        GradcheckLoss::Silog => (
            DistillMode::RdcMinus,
            DistillationWeights { lambda_rdc: 1.0, lambda_sad: 0.0, lambda_kl: 0.0, silog_lambda: 0.5 },
            0.0,
        ),
        GradcheckLoss::Sad => (
            DistillMode::Sad,
            DistillationWeights { lambda_rdc: 0.0, lambda_sad: 1.0, lambda_kl: 0.0, silog_lambda: 0.5 },
            0.0,
        ),
        GradcheckLoss::Kl => (
            DistillMode::Rsc,
            DistillationWeights { lambda_rdc: 0.0, lambda_sad: 0.0, lambda_kl: 1.0, silog_lambda: 0.5 },
            0.0,
        ),
        GradcheckLoss::Gt => (
            DistillMode::RdcRsc,
            DistillationWeights { lambda_rdc: 0.0, lambda_sad: 0.0, lambda_kl: 0.0, silog_lambda: 0.5 },
            1.0,
        ),
        GradcheckLoss::Render | GradcheckLoss::All => unreachable!("handled by the caller"),
    };
    TrainConfig {
        steps: 1,
        learning_rate: 1.0,
        ray_budget: usize::MAX / 2,
        weights,
        mode,
        gt_weight,
        seed: 0,
        eval_every: 0,
        render,
        segments: SegmentSource::Tiles { tile: 2 },
        init_scale: 1.0,
        init_density_bias: 0.0,
        snapshots: false,
    }
}

/// Direct probe of the renderer: a fixed random linear functional of every
/// ray's depth, termination weights, and semantics. The coefficients depend
/// only on ray geometry (which densities cannot change), so the functional
/// is a valid finite-difference objective.
fn render_probe_objective(
    params: &StudentParams,
    cameras: &[Camera],
    render: &RenderConfig,
) -> Result<f64> {
    let grid = params.materialize()?;
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let c = params.num_classes;
    let mut value = 0.0;
    for camera in cameras {
        let (view, dists) = render_view(&grid, camera, render, None)?;
        for (pixel, dist) in dists.iter().enumerate() {
            value += rng.gen_range(-1.0..1.0) * dist.depth();
            for &w in &dist.weights {
                value += rng.gen_range(-1.0..1.0) * w;
            }
            for &s in &view.semantics[pixel * c..(pixel + 1) * c] {
                value += rng.gen_range(-1.0..1.0) * s;
            }
        }
    }
    Ok(value)
}

/// Analytic gradient of [`render_probe_objective`] via the renderer's
/// backward pass, regenerating the same coefficient stream.
fn render_probe_gradients(
    params: &StudentParams,
    cameras: &[Camera],
    render: &RenderConfig,
) -> Result<StepGradients> {
    let grid = params.materialize()?;
    let n = params.spec.num_voxels();
    let c = params.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    let mut d_density = vec![0.0; n];
    let mut d_semantics = vec![0.0; n * c];
    for camera in cameras {
        let (_, dists) = render_view(&grid, camera, render, None)?;
        // Field expressions run in written order, matching the objective's
        // coefficient stream: depth, weights, semantics.
        let upstream: Vec<RayUpstream> = dists
            .iter()
            .map(|dist| RayUpstream {
                d_depth: rng.gen_range(-1.0..1.0),
                d_weights: Some((0..dist.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()),
                d_semantics: (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let g = crate::render::render_backward(&grid, camera, render, None, &upstream)?;
        for (acc, d) in d_density.iter_mut().zip(&g.d_density) {
            *acc += d;
        }
        for (acc, d) in d_semantics.iter_mut().zip(&g.d_semantics) {
            *acc += d;
        }
    }
    for (acc, &x) in d_density.iter_mut().zip(&params.density_logits) {
        *acc *= sigmoid(x);
    }
    Ok(StepGradients { d_density_logits: d_density, d_semantic_logits: d_semantics })
}

/// Verifies analytic gradients against central finite differences on a tiny
/// scene (every grid dimension and image side at most 8). Each selector
/// produces one row per parameter block; `all` runs every selector.
pub fn gradcheck(
    scene: &SceneConfig,
    which: GradcheckLoss,
    tolerance: f64,
) -> Result<GradcheckReport> {
    scene.validate()?;
    ensure!(tolerance.is_finite() && tolerance > 0.0, "tolerance must be positive");
    ensure!(
        scene.grid.dims.iter().all(|&d| d <= GRADCHECK_MAX_DIM),
        "gradient checks require grid dimensions <= {GRADCHECK_MAX_DIM}"
    );
    ensure!(
        scene
            .cameras
            .iter()
            .all(|cam| cam.width() <= GRADCHECK_MAX_DIM && cam.height() <= GRADCHECK_MAX_DIM),
        "gradient checks require camera images <= {GRADCHECK_MAX_DIM}x{GRADCHECK_MAX_DIM}"
    );

    let render = RenderConfig {
        sampling: crate::camera::SamplingConfig { step_size: 0.25, max_samples: 48, near: 0.0 },
        ..RenderConfig::default()
    };
    let (gt, teacher) = make_synthetic_scene(scene)?;
    let cache = build_teacher_cache(&teacher, &scene.cameras, &render)?;
    let segments =
        build_segments(&SegmentSource::Tiles { tile: 2 }, &cache, &scene.cameras)?;
    let params = StudentParams::noise(scene.grid, scene.num_classes, 11, 1.0)?;

    let selectors: Vec<GradcheckLoss> = match which {
        GradcheckLoss::All => vec![
            GradcheckLoss::Rdc,
            GradcheckLoss::Sad,
            GradcheckLoss::Kl,
            GradcheckLoss::Silog,
            GradcheckLoss::Gt,
            GradcheckLoss::Render,
        ],
        single => vec![single],
    };

    let mut rows = Vec::new();
    for selector in selectors {
        let (analytic, mut objective): (StepGradients, Box<dyn FnMut(&StudentParams) -> Result<f64>>) =
            if selector == GradcheckLoss::Render {
                (
                    render_probe_gradients(&params, &scene.cameras, &render)?,
                    Box::new(|p: &StudentParams| {
                        render_probe_objective(p, &scene.cameras, &render)
                    }),
                )
            } else {
                let cfg = selector_config(selector, render);
                let (_, grads) = step_core(
                    &params,
                    &gt,
                    &scene.cameras,
                    &cfg,
                    0,
                    &cache,
                    &segments,
                    true,
                )?;
                let gt_ref = &gt;
                let cameras = &scene.cameras;
                let cache_ref = &cache;
                let segments_ref = &segments;
                (
                    grads.expect("gradients were requested"),
                    Box::new(move |p: &StudentParams| {
                        step_core(p, gt_ref, cameras, &cfg, 0, cache_ref, segments_ref, false)
                            .map(|(r, _)| r.total)
                    }),
                )
            };
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + selector.as_str().len() as u64);
        for (block, field, is_density) in [
            ("density", &analytic.d_density_logits, true),
            ("semantics", &analytic.d_semantic_logits, false),
        ] {
            let (max_rel, checked) =
                fd_block(&params, field, is_density, objective.as_mut(), &mut rng)?;
            rows.push(GradcheckRow {
                loss: selector.as_str().to_string(),
                block: block.to_string(),
                max_rel_err: max_rel,
                checked,
                pass: max_rel < tolerance,
            });
        }
    }
    Ok(GradcheckReport { tolerance, rows })
}

/// The built-in scene for gradient checks: a 6x6x4 grid, three classes,
/// two 6x6 cameras, compact enough for finite differences.
pub fn gradcheck_scene() -> SceneConfig {
    use nalgebra::Vector3;
    let cameras = vec![
        Camera::look_at(
            Vector3::new(0.2, -2.6, 1.2),
            Vector3::new(0.0, 0.0, -0.2),
            Vector3::new(0.0, 0.0, 1.0),
            5.0,
            5.0,
            3.0,
            3.0,
            6,
            6,
        )
        .expect("valid built-in camera"),
        Camera::look_at(
            Vector3::new(2.4, 1.8, 1.4),
            Vector3::new(0.0, 0.0, -0.2),
            Vector3::new(0.0, 0.0, 1.0),
            5.0,
            5.0,
            3.0,
            3.0,
            6,
            6,
        )
        .expect("valid built-in camera"),
    ];
    SceneConfig {
        grid: GridSpec::new([6, 6, 4], [-1.5, -1.5, -1.0], 0.5).expect("valid built-in grid"),
        num_classes: 3,
        primitives: vec![
            Primitive {
                shape: Shape::Box {
                    center: [0.0, 0.0, -0.8],
                    size: [2.6, 2.6, 0.35],
                },
                class_id: 2,
                density: 20.0,
            },
            Primitive {
                shape: Shape::Box {
                    center: [0.4, 0.1, -0.2],
                    size: [1.2, 1.0, 0.9],
                },
                class_id: 0,
                density: 20.0,
            },
            Primitive {
                shape: Shape::Sphere { center: [-0.6, -0.5, 0.1], radius: 0.6 },
                class_id: 1,
                density: 20.0,
            },
        ],
        cameras,
        seed: 0,
        label_noise: 0.0,
        semantic_strength: 10.0,
    }
}

/// The desk-scale reference scene: a 32x32x8 grid (0.4 m voxels) holding a
/// ground slab, a box, and a sphere, observed by two 64x64 cameras.
pub fn reference_scene() -> SceneConfig {
    use nalgebra::Vector3;
    let cameras = vec![
        Camera::look_at(
            Vector3::new(0.2, -7.8, 2.6),
            Vector3::new(0.0, 0.0, -0.4),
            Vector3::new(0.0, 0.0, 1.0),
            40.0,
            40.0,
            32.0,
            32.0,
            64,
            64,
        )
        .expect("valid built-in camera"),
        Camera::look_at(
            Vector3::new(6.8, 4.2, 2.8),
            Vector3::new(0.0, 0.0, -0.4),
            Vector3::new(0.0, 0.0, 1.0),
            40.0,
            40.0,
            32.0,
            32.0,
            64,
            64,
        )
        .expect("valid built-in camera"),
    ];
    SceneConfig {
        grid: GridSpec::new([32, 32, 8], [-6.4, -6.4, -1.6], 0.4).expect("valid built-in grid"),
        num_classes: 3,
        primitives: vec![
            Primitive {
                shape: Shape::Box {
                    center: [0.0, 0.0, -1.4],
                    size: [10.0, 10.0, 0.4],
                },
                class_id: 2,
                density: 20.0,
            },
            Primitive {
                shape: Shape::Box {
                    center: [1.4, 0.2, -0.4],
                    size: [2.4, 2.0, 1.6],
                },
                class_id: 0,
                density: 20.0,
            },
            Primitive {
                shape: Shape::Sphere { center: [-2.0, -1.6, 0.0], radius: 1.4 },
                class_id: 1,
                density: 20.0,
            },
        ],
        cameras,
        seed: 0,
        label_noise: 0.0,
        semantic_strength: 10.0,
    }
}

/// Training configuration for the reference distillation run (no ground
/// truth supervision: everything is learned through the rendering losses).
pub fn reference_train_config() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        // Losses are mean reduced, so per parameter gradients scale like 1/N
        // and plain SGD needs a step size far above the usual range.
        learning_rate: 80.0,
        ray_budget: 1024,
        weights: DistillationWeights::default(),
        mode: DistillMode::RdcRsc,
        gt_weight: 0.0,
        seed: 7,
        eval_every: 100,
        render: RenderConfig {
            sampling: crate::camera::SamplingConfig {
                step_size: 0.2,
                max_samples: 96,
                near: 0.0,
            },
            ..RenderConfig::default()
        },
        segments: SegmentSource::Tiles { tile: 8 },
        init_scale: 1.0,
        init_density_bias: -1.0,
        snapshots: false,
    }
}

/// Ground-truth-only counterpart of [`reference_train_config`]: all
/// distillation weights zero, rendering skipped, direct voxel supervision.
/// Mean-reduced supervision needs a large step size to move individual
/// voxels.
pub fn reference_gt_config() -> TrainConfig {
    TrainConfig {
        steps: 2000,
        learning_rate: 2000.0,
        ray_budget: 1,
        weights: DistillationWeights {
            lambda_rdc: 0.0,
            lambda_sad: 0.0,
            lambda_kl: 0.0,
            silog_lambda: 0.5,
        },
        mode: DistillMode::RdcRsc,
        gt_weight: 1.0,
        seed: 7,
        eval_every: 200,
        render: RenderConfig::default(),
        segments: SegmentSource::Tiles { tile: 8 },
        init_scale: 1.0,
        init_density_bias: -1.0,
        snapshots: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softplus_helpers_are_consistent() {
        for &x in &[-50.0, -3.0, -0.1, 0.0, 0.2, 4.0, 50.0] {
            let y = softplus(x);
            assert!(y >= 0.0 && y.is_finite());
            if y > 0.0 {
                assert_relative_eq!(inverse_softplus(y), x, epsilon = 1e-9);
            }
            // d softplus / dx = sigmoid.
            let h = 1e-6;
            let fd = (softplus(x + h) - softplus(x - h)) / (2.0 * h);
            assert_relative_eq!(sigmoid(x), fd, epsilon = 1e-6);
        }
        assert_relative_eq!(softplus(50.0), 50.0, epsilon = 1e-12);
        assert_relative_eq!(sigmoid(0.0), 0.5, epsilon = 1e-15);
    }

    fn one_box_scene() -> SceneConfig {
        use nalgebra::Vector3;
        SceneConfig {
            grid: GridSpec::new([10, 10, 10], [-2.0, -2.0, -2.0], 0.4).unwrap(),
            num_classes: 3,
            primitives: vec![Primitive {
                // 2 m cube centered on the voxel at grid coordinate
                // (5, 5, 5), whose center is (0.2, 0.2, 0.2).
                shape: Shape::Box { center: [0.2, 0.2, 0.2], size: [2.0, 2.0, 2.0] },
                class_id: 2,
                density: 20.0,
            }],
            cameras: vec![Camera::look_at(
                Vector3::new(0.0, -4.0, 1.0),
                Vector3::new(0.2, 0.2, 0.2),
                Vector3::new(0.0, 0.0, 1.0),
                6.0,
                6.0,
                4.0,
                4.0,
                8,
                8,
            )
            .unwrap()],
            seed: 0,
            label_noise: 0.0,
            semantic_strength: 10.0,
        }
    }

    #[test]
    fn synthetic_scene_voxelizes_boxes_exactly() {
        let cfg = one_box_scene();
        let (gt, teacher) = make_synthetic_scene(&cfg).unwrap();
        // A 2 m cube at 0.4 m voxels covers 5 centers per axis.
        let occupied = gt.labels().iter().filter(|&&l| l != gt.free_label()).count();
        assert_eq!(occupied, 125);
        assert!(gt.labels().iter().all(|&l| l == 2 || l == gt.free_label()));
        // Teacher argmax reproduces the ground truth exactly.
        let pred = argmax_labels(&teacher, 0.5).unwrap();
        assert_eq!(pred.labels(), gt.labels());
        let m = miou(&pred, &gt, false).unwrap();
        assert_eq!(m.miou, 1.0);
        // Occupied voxels carry one-hot logits at the configured strength.
        let idx = gt.labels().iter().position(|&l| l == 2).unwrap();
        assert_eq!(teacher.voxel_semantics(idx), &[0.0, 0.0, 10.0]);
        assert_eq!(teacher.density()[idx], 20.0);
    }

    #[test]
    fn later_primitives_overwrite_earlier_ones() {
        let mut cfg = one_box_scene();
        cfg.primitives.push(Primitive {
            // Smaller box inside the first one, different class.
            shape: Shape::Box { center: [0.2, 0.2, 0.2], size: [0.9, 0.9, 0.9] },
            class_id: 1,
            density: 5.0,
        });
        let (gt, teacher) = make_synthetic_scene(&cfg).unwrap();
        let spec = &cfg.grid;
        let inner = spec.linear_index(5, 5, 5);
        assert_eq!(gt.labels()[inner], 1);
        assert_eq!(teacher.density()[inner], 5.0);
        // A voxel of the outer box away from the inner region keeps class 2.
        let outer = spec.linear_index(3, 5, 5);
        assert_eq!(gt.labels()[outer], 2);
    }

    #[test]
    fn scene_validation_rejects_bad_configs() {
        let mut empty = one_box_scene();
        empty.primitives.clear();
        assert!(make_synthetic_scene(&empty).is_err());

        let mut outside = one_box_scene();
        outside.primitives[0].shape =
            Shape::Box { center: [100.0, 0.0, 0.0], size: [1.0, 1.0, 1.0] };
        assert!(make_synthetic_scene(&outside).is_err());

        let mut bad_class = one_box_scene();
        bad_class.primitives[0].class_id = 3;
        assert!(make_synthetic_scene(&bad_class).is_err());
    }

    #[test]
    fn label_noise_corrupts_teacher_but_not_gt() {
        let mut cfg = one_box_scene();
        cfg.label_noise = 1.0;
        cfg.seed = 3;
        let (gt, teacher) = make_synthetic_scene(&cfg).unwrap();
        assert!(gt.labels().iter().all(|&l| l == 2 || l == gt.free_label()));
        // With full resampling over 3 classes, some teacher voxels differ.
        let pred = argmax_labels(&teacher, 0.5).unwrap();
        let diffs = pred
            .labels()
            .iter()
            .zip(gt.labels())
            .filter(|(a, b)| a != b)
            .count();
        assert!(diffs > 0);
        // Density is untouched by label noise.
        assert_eq!(teacher.density().iter().filter(|&&d| d > 0.0).count(), 125);
        // Same seed reproduces the same corruption.
        let (_, teacher2) = make_synthetic_scene(&cfg).unwrap();
        assert_eq!(teacher.semantics(), teacher2.semantics());
    }

    #[test]
    fn supervision_loss_matches_hand_values() {
        let spec = GridSpec::new([2, 2, 1], [0.0, 0.0, 0.0], 1.0).unwrap();
        // No occupied voxels, zero logits: pure BCE at 0.5 -> ln 2.
        let gt_free = SemanticLabelGrid::new(spec, 2, vec![2; 4], None).unwrap();
        let params = StudentParams::new(spec, 2, vec![0.0; 4], vec![0.0; 8]).unwrap();
        let loss = voxel_supervision_loss(&params, &gt_free).unwrap();
        assert_relative_eq!(loss.value, std::f64::consts::LN_2, epsilon = 1e-12);

        // All occupied with class 0, zero logits: BCE ln 2 + CE ln 2.
        let gt_occ = SemanticLabelGrid::new(spec, 2, vec![0; 4], None).unwrap();
        let loss = voxel_supervision_loss(&params, &gt_occ).unwrap();
        assert_relative_eq!(loss.value, 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);

        // Saturated correct parameters: loss vanishes.
        let density = vec![20.0, 20.0, -20.0, -20.0];
        let mut sems = vec![0.0; 8];
        sems[0] = 20.0;
        sems[3] = 20.0;
        let gt_mixed =
            SemanticLabelGrid::new(spec, 2, vec![0, 1, 2, 2], None).unwrap();
        let params = StudentParams::new(spec, 2, density, sems).unwrap();
        let loss = voxel_supervision_loss(&params, &gt_mixed).unwrap();
        assert!(loss.value < 1e-6, "saturated loss is {}", loss.value);
    }

    #[test]
    fn supervision_gradient_matches_finite_differences() {
        let spec = GridSpec::new([3, 2, 2], [0.0, 0.0, 0.0], 0.5).unwrap();
        let c = 3;
        let n = spec.num_voxels();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let labels: Vec<u16> = (0..n).map(|_| rng.gen_range(0..=c as u16)).collect();
        let gt = SemanticLabelGrid::new(spec, c, labels, None).unwrap();
        let params = StudentParams::noise(spec, c, 5, 1.5).unwrap();
        let loss = voxel_supervision_loss(&params, &gt).unwrap();
        let h = 1e-5;
        for i in 0..n {
            let mut plus = params.clone();
            plus.density_logits[i] += h;
            let mut minus = params.clone();
            minus.density_logits[i] -= h;
            let fd = (voxel_supervision_loss(&plus, &gt).unwrap().value
                - voxel_supervision_loss(&minus, &gt).unwrap().value)
                / (2.0 * h);
            let a = loss.d_density_logits[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5);
        }
        for i in 0..n * c {
            let mut plus = params.clone();
            plus.semantic_logits[i] += h;
            let mut minus = params.clone();
            minus.semantic_logits[i] -= h;
            let fd = (voxel_supervision_loss(&plus, &gt).unwrap().value
                - voxel_supervision_loss(&minus, &gt).unwrap().value)
                / (2.0 * h);
            let a = loss.d_semantic_logits[i];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-5);
        }
    }

    /// Small scene + teacher + cache + segments shared by the step tests.
    struct Rig {
        scene: SceneConfig,
        gt: SemanticLabelGrid,
        teacher: VoxelGrid,
        cache: TeacherCache,
        segments: Vec<SegmentMap>,
        cfg: TrainConfig,
    }

    fn small_rig() -> Rig {
        let scene = gradcheck_scene();
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.1,
            ray_budget: 48,
            weights: DistillationWeights::default(),
            mode: DistillMode::RdcRsc,
            gt_weight: 0.0,
            seed: 42,
            eval_every: 0,
            render: RenderConfig {
                sampling: crate::camera::SamplingConfig {
                    step_size: 0.25,
                    max_samples: 48,
                    near: 0.0,
                },
                ..RenderConfig::default()
            },
            segments: SegmentSource::Tiles { tile: 2 },
            init_scale: 1.0,
            init_density_bias: 0.0,
            snapshots: false,
        };
        let (gt, teacher) = make_synthetic_scene(&scene).unwrap();
        let cache = build_teacher_cache(&teacher, &scene.cameras, &cfg.render).unwrap();
        let segments = build_segments(&cfg.segments, &cache, &scene.cameras).unwrap();
        Rig { scene, gt, teacher, cache, segments, cfg }
    }

    #[test]
    fn teacher_cache_slices_match_direct_subset_render() {
        let rig = small_rig();
        let camera = &rig.scene.cameras[0];
        let selection: Vec<usize> = vec![0, 3, 7, 20, 35];
        let (_, direct) =
            render_view(&rig.teacher, camera, &rig.cfg.render, Some(&selection)).unwrap();
        let sliced = rig.cache.slice_rays(0, &selection);
        assert_eq!(direct.len(), sliced.len());
        for (a, b) in direct.iter().zip(&sliced) {
            assert_eq!(a.weights, b.weights);
            assert_eq!(a.distances, b.distances);
            assert_eq!(a.residual_transmittance, b.residual_transmittance);
        }
    }

    #[test]
    fn student_equal_to_teacher_is_a_fixed_point() {
        // A teacher with strictly positive densities can be inverted through
        // softplus exactly.
        let spec = GridSpec::new([5, 5, 3], [-1.25, -1.25, -0.75], 0.5).unwrap();
        let c = 3;
        let n = spec.num_voxels();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let density: Vec<f64> = (0..n).map(|_| rng.gen_range(0.3..3.0)).collect();
        let semantics: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let teacher = VoxelGrid::new(spec, c, density.clone(), semantics.clone()).unwrap();
        let gt = SemanticLabelGrid::new(spec, c, vec![c as u16; n], None).unwrap();

        let rig = small_rig();
        let cameras = &rig.scene.cameras;
        let cache = build_teacher_cache(&teacher, cameras, &rig.cfg.render).unwrap();
        let segments = build_segments(&rig.cfg.segments, &cache, cameras).unwrap();

        let logits: Vec<f64> = density.iter().map(|&d| inverse_softplus(d)).collect();
        let mut params = StudentParams::new(spec, c, logits, semantics).unwrap();
        let before = params.clone();
        let report = distill_step(
            &mut params,
            &gt,
            cameras,
            &rig.cfg,
            0,
            &cache,
            &segments,
        )
        .unwrap();
        assert!(report.total.abs() < 1e-10, "fixed-point loss is {}", report.total);
        let max_change = params
            .density_logits
            .iter()
            .zip(&before.density_logits)
            .chain(params.semantic_logits.iter().zip(&before.semantic_logits))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_change < 1e-8, "parameters moved by {max_change}");
    }

    #[test]
    fn step_descends_in_sample() {
        let rig = small_rig();
        let mut cfg = rig.cfg.clone();
        cfg.learning_rate = 0.05;
        let mut params = StudentParams::noise(rig.scene.grid, 3, 99, 1.0).unwrap();
        let before = evaluate_step(
            &params, &rig.gt, &rig.scene.cameras, &cfg, 0, &rig.cache, &rig.segments,
        )
        .unwrap();
        distill_step(
            &mut params, &rig.gt, &rig.scene.cameras, &cfg, 0, &rig.cache, &rig.segments,
        )
        .unwrap();
        let after = evaluate_step(
            &params, &rig.gt, &rig.scene.cameras, &cfg, 0, &rig.cache, &rig.segments,
        )
        .unwrap();
        assert!(
            after.total < before.total,
            "step did not descend: {} -> {}",
            before.total,
            after.total
        );
    }

    #[test]
    fn steps_are_deterministic_and_leave_the_teacher_alone() {
        let rig = small_rig();
        let teacher_density = rig.teacher.density().to_vec();
        let run = || {
            let mut params = StudentParams::noise(rig.scene.grid, 3, 7, 1.0).unwrap();
            let mut reports = Vec::new();
            for step in 0..3 {
                reports.push(
                    distill_step(
                        &mut params,
                        &rig.gt,
                        &rig.scene.cameras,
                        &rig.cfg,
                        step,
                        &rig.cache,
                        &rig.segments,
                    )
                    .unwrap(),
                );
            }
            (params, reports)
        };
        let (p1, r1) = run();
        let (p2, r2) = run();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(a.rdc.to_bits(), b.rdc.to_bits());
        }
        for (a, b) in p1.density_logits.iter().zip(&p2.density_logits) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(rig.teacher.density(), teacher_density.as_slice());
    }

    #[test]
    fn zero_density_student_has_finite_gradients() {
        let rig = small_rig();
        let n = rig.scene.grid.num_voxels();
        let params =
            StudentParams::new(rig.scene.grid, 3, vec![-40.0; n], vec![0.0; n * 3]).unwrap();
        let (report, grads) = step_core(
            &params,
            &rig.gt,
            &rig.scene.cameras,
            &rig.cfg,
            0,
            &rig.cache,
            &rig.segments,
            true,
        )
        .unwrap();
        assert!(report.total.is_finite());
        let grads = grads.unwrap();
        assert!(grads.d_density_logits.iter().all(|g| g.is_finite()));
        assert!(grads.d_semantic_logits.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn gt_only_run_reaches_perfect_miou() {
        // 16^3 grid, supervision only: rendering is skipped, convergence is
        // per-voxel logistic regression.
        let scene = SceneConfig {
            grid: GridSpec::new([16, 16, 16], [-3.2, -3.2, -3.2], 0.4).unwrap(),
            num_classes: 3,
            primitives: vec![
                Primitive {
                    shape: Shape::Box { center: [0.8, 0.4, -0.6], size: [2.2, 1.8, 1.4] },
                    class_id: 0,
                    density: 20.0,
                },
                Primitive {
                    shape: Shape::Sphere { center: [-1.0, -0.8, 0.6], radius: 1.1 },
                    class_id: 1,
                    density: 20.0,
                },
                Primitive {
                    shape: Shape::Box { center: [0.0, 0.0, -2.6], size: [5.0, 5.0, 0.5] },
                    class_id: 2,
                    density: 20.0,
                },
            ],
            cameras: reference_scene().cameras,
            seed: 0,
            label_noise: 0.0,
            semantic_strength: 10.0,
        };
        let mut train = reference_gt_config();
        train.steps = 2000;
        let result = run_distillation(&scene, &train, None).unwrap();
        assert_eq!(result.final_miou, 1.0, "gt-only run ended at {}", result.final_miou);
        assert_eq!(result.history.len(), 2000);
        // Rendering was skipped throughout.
        assert!(result.history.iter().all(|r| r.rays_used == 0));
    }

    #[test]
    fn zero_step_run_is_a_noop() {
        let scene = gradcheck_scene();
        let mut train = reference_gt_config();
        train.steps = 0;
        let result = run_distillation(&scene, &train, None).unwrap();
        assert!(result.history.is_empty());
        assert_eq!(result.initial_miou, result.final_miou);
        assert_eq!(result.evals.len(), 1);
    }

    #[test]
    fn run_writes_history_grid_and_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let scene = gradcheck_scene();
        let mut train = reference_gt_config();
        train.steps = 2;
        train.eval_every = 1;
        train.snapshots = true;
        let result = run_distillation(&scene, &train, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("history.csv")).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(HISTORY_HEADER));
        assert_eq!(lines.count(), 2);
        let evals = std::fs::read_to_string(dir.path().join("evals.csv")).unwrap();
        assert!(evals.starts_with("step,miou\n"));
        let reloaded =
            crate::volume::load_voxel_grid(dir.path().join("student.vxg")).unwrap();
        assert_eq!(reloaded.spec(), result.student.spec());
        assert!(dir.path().join("step00001_cam0_depth.pgm").exists());
        assert!(dir.path().join("step00002_cam1_sem.ppm").exists());
    }

    #[test]
    fn runs_with_equal_seeds_are_identical() {
        let scene = gradcheck_scene();
        let mut train = small_rig().cfg;
        train.steps = 4;
        train.ray_budget = 24;
        let a = run_distillation(&scene, &train, None).unwrap();
        let b = run_distillation(&scene, &train, None).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.total.to_bits(), y.total.to_bits());
        }
        for (x, y) in a.params.density_logits.iter().zip(&b.params.density_logits) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.final_miou.to_bits(), b.final_miou.to_bits());
    }

    #[test]
    fn slic_segment_source_builds_valid_maps() {
        let rig = small_rig();
        let source = SegmentSource::Slic { k: 4, compactness: 10.0, iterations: 5 };
        let maps = build_segments(&source, &rig.cache, &rig.scene.cameras).unwrap();
        assert_eq!(maps.len(), 2);
        for (map, camera) in maps.iter().zip(&rig.scene.cameras) {
            assert_eq!(map.width(), camera.width());
            assert_eq!(map.height(), camera.height());
            assert!(map.num_segments() >= 1);
        }
    }

    #[test]
    fn gradcheck_passes_on_the_builtin_scene() {
        let report = gradcheck(&gradcheck_scene(), GradcheckLoss::All, 1e-4).unwrap();
        assert_eq!(report.rows.len(), 12);
        for row in &report.rows {
            assert!(
                row.pass,
                "{}/{} failed: max rel err {:.3e} over {} coords",
                row.loss, row.block, row.max_rel_err, row.checked
            );
        }
        assert!(report.all_pass());
    }

    #[test]
    fn gradcheck_rejects_oversized_scenes() {
        let mut scene = gradcheck_scene();
        scene.grid = GridSpec::new([9, 6, 4], [-2.25, -1.5, -1.0], 0.5).unwrap();
        assert!(gradcheck(&scene, GradcheckLoss::Rdc, 1e-4).is_err());
        let scene = reference_scene();
        assert!(gradcheck(&scene, GradcheckLoss::Rdc, 1e-4).is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let cfg = DistillConfig {
            scene: gradcheck_scene(),
            train: reference_train_config(),
        };
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, &text).unwrap();
        let loaded = load_distill_config(&path).unwrap();
        assert_eq!(loaded.train, cfg.train);
        assert_eq!(loaded.scene.num_classes, cfg.scene.num_classes);
        assert_eq!(loaded.scene.primitives, cfg.scene.primitives);

        // Mode strings use the documented names.
        assert!(text.contains("\"rdc+rsc\""));

        // Malformed JSON is a parse error, bad values are validation errors.
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(load_distill_config(&path), Err(Error::Parse { .. })));
        let mut bad = cfg.clone();
        bad.train.learning_rate = -1.0;
        std::fs::write(&path, serde_json::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(load_distill_config(&path), Err(Error::Invalid(_))));
    }
}
