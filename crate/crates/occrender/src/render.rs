//! Differentiable volume rendering: alpha compositing of grid samples along
//! camera rays, forward and backward.
//!
//! For samples i = 1..K with densities sigma_i and bin widths delta_i, the
//! transmittance before sample i is T_i = exp(-sum_{j<i} sigma_j delta_j)
//! and the termination weight is w_i = T_i (1 - exp(-sigma_i delta_i)).
//! The weights plus the residual transmittance after the last sample always
//! sum to 1, so each ray carries a (sub-)probability distribution over
//! termination depth. Depth and semantics renders are expectations under it.
//!
//! The backward pass is analytic. For upstream gradients g collapsing onto
//! the per-sample weights (g_w[i] = dL/dw_i including the depth and
//! semantics terms), the density gradient is
//!
//!   dL/dsigma_i = delta_i * (g_w[i] * T_{i+1} - sum_{k>i} g_w[k] * w_k)
//!
//! which one reverse sweep evaluates in O(K). Sample gradients scatter onto
//! the eight surrounding voxels with their interpolation weights. Geometry
//! (sample positions, bin widths) is treated as fixed: no gradients flow
//! into ray parameters.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::camera::{get_points, Camera, SamplingConfig};
use crate::error::{ensure, Result};
use crate::imageio::{save_pgm, save_ppm, GrayImage, RgbImage};
use crate::volume::{nearest_voxel, trilinear_corners, Interpolation, VoxelGrid};

/// Pixels whose accumulated opacity falls below this default are treated as
/// misses.
pub const DEFAULT_OPACITY_FLOOR: f64 = 0.01;

/// Rendering parameters: ray sampling, field interpolation, and the opacity
/// threshold below which a pixel counts as a miss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub sampling: SamplingConfig,
    pub interpolation: Interpolation,
    pub opacity_floor: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            sampling: SamplingConfig::default(),
            interpolation: Interpolation::Trilinear,
            opacity_floor: DEFAULT_OPACITY_FLOOR,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        ensure!(
            (0.0..1.0).contains(&self.opacity_floor),
            "opacity_floor must lie in [0, 1), got {}",
            self.opacity_floor
        );
        Ok(())
    }
}

/// Termination distribution of one ray: sample distances, bin widths, the
/// termination weight per sample, and the transmittance remaining after the
/// last sample. `weights.sum() + residual_transmittance == 1`. Rays without
/// samples have empty vectors and residual 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RayDistribution {
    pub distances: Vec<f64>,
    pub deltas: Vec<f64>,
    pub weights: Vec<f64>,
    pub residual_transmittance: f64,
}

impl RayDistribution {
    pub fn empty() -> Self {
        RayDistribution {
            distances: Vec::new(),
            deltas: Vec::new(),
            weights: Vec::new(),
            residual_transmittance: 1.0,
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Total terminated mass (= 1 - residual transmittance up to rounding).
    pub fn opacity(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Expected termination depth (unnormalized: misses pull it toward 0).
    pub fn depth(&self) -> f64 {
        self.weights.iter().zip(&self.distances).map(|(w, d)| w * d).sum()
    }
}

/// Computes the termination distribution for one ray from per-sample
/// densities, bin widths, and distances (all the same length, densities
/// nonnegative, widths positive, distances strictly increasing).
pub fn transmittance_weights(
    sigmas: &[f64],
    deltas: &[f64],
    distances: &[f64],
) -> Result<RayDistribution> {
    ensure!(
        sigmas.len() == deltas.len() && sigmas.len() == distances.len(),
        "sample arrays disagree in length: {} sigmas, {} deltas, {} distances",
        sigmas.len(),
        deltas.len(),
        distances.len()
    );
    ensure!(
        sigmas.iter().all(|s| s.is_finite() && *s >= 0.0),
        "densities must be finite and nonnegative"
    );
    ensure!(deltas.iter().all(|d| d.is_finite() && *d > 0.0), "bin widths must be positive");
    ensure!(
        distances.windows(2).all(|w| w[0] < w[1]) && distances.iter().all(|d| d.is_finite()),
        "distances must be finite and strictly increasing"
    );
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = 1.0f64;
    for (&sigma, &delta) in sigmas.iter().zip(deltas) {
        let a = sigma * delta;
        // 1 - exp(-a) via exp_m1 keeps small occupancies accurate.
        weights.push(transmittance * -(-a).exp_m1());
        transmittance *= (-a).exp();
    }
    Ok(RayDistribution {
        distances: distances.to_vec(),
        deltas: deltas.to_vec(),
        weights,
        residual_transmittance: transmittance,
    })
}

/// Expected termination depth of a ray distribution.
pub fn render_depth(dist: &RayDistribution) -> f64 {
    dist.depth()
}

/// Weight-averaged semantics of a ray: `semantics` holds K * num_classes
/// sample logits, class innermost.
pub fn render_semantics(
    dist: &RayDistribution,
    semantics: &[f64],
    num_classes: usize,
) -> Result<Vec<f64>> {
    ensure!(num_classes >= 1, "num_classes must be >= 1");
    ensure!(
        semantics.len() == dist.len() * num_classes,
        "semantics has {} entries, expected {} samples x {} classes",
        semantics.len(),
        dist.len(),
        num_classes
    );
    let mut out = vec![0.0; num_classes];
    for (i, &w) in dist.weights.iter().enumerate() {
        for (o, s) in out.iter_mut().zip(&semantics[i * num_classes..(i + 1) * num_classes]) {
            *o += w * s;
        }
    }
    Ok(out)
}

/// Rendered images of one camera view. Buffers are row-major over pixels
/// (`u * width + v`); semantics is pixel-major with class innermost.
/// Pixels that were not selected for rendering, whose rays missed the grid,
/// or whose opacity fell below the floor are flagged in `miss` and report
/// depth 0. Semantics and opacity keep their raw accumulated values.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub depth: Vec<f64>,
    pub semantics: Vec<f64>,
    pub opacity: Vec<f64>,
    pub miss: Vec<bool>,
}

fn check_selection(selection: Option<&[usize]>, num_pixels: usize) -> Result<()> {
    if let Some(sel) = selection {
        ensure!(!sel.is_empty(), "ray selection must not be empty");
        ensure!(
            sel.windows(2).all(|w| w[0] < w[1]),
            "ray selection must be sorted and free of duplicates"
        );
        ensure!(
            *sel.last().unwrap() < num_pixels,
            "ray selection index {} out of range for {} pixels",
            sel.last().unwrap(),
            num_pixels
        );
    }
    Ok(())
}

/// Samples the grid along one pixel ray. Returns sample distances, densities,
/// and flattened per-sample semantics.
fn sample_ray(
    grid: &VoxelGrid,
    camera: &Camera,
    cfg: &RenderConfig,
    pixel_index: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let ray = camera.pixel_ray(pixel_index / camera.width(), pixel_index % camera.width());
    let (aabb_min, aabb_max) = grid.spec().aabb();
    let (distances, points) = get_points(&ray, &cfg.sampling, aabb_min, aabb_max);
    let c = grid.num_classes();
    let mut sigmas = Vec::with_capacity(points.len());
    let mut semantics = vec![0.0; points.len() * c];
    for (i, p) in points.iter().enumerate() {
        let sigma = grid.sample_into(*p, cfg.interpolation, &mut semantics[i * c..(i + 1) * c]);
        sigmas.push(sigma);
    }
    (distances, sigmas, semantics)
}

// Rays are rendered in parallel in fixed-size chunks and merged in pixel
// order, so output is bit-identical for any worker count.
const RAY_CHUNK: usize = 1024;

/// Renders a camera view of the grid. `selection` optionally restricts work
/// to a sorted list of pixel indices (`u * width + v`); other pixels stay at
/// their miss defaults. Returns the images plus one termination distribution
/// per rendered ray, in selection order.
pub fn render_view(
    grid: &VoxelGrid,
    camera: &Camera,
    cfg: &RenderConfig,
    selection: Option<&[usize]>,
) -> Result<(RenderedView, Vec<RayDistribution>)> {
    cfg.validate()?;
    let num_pixels = camera.num_pixels();
    check_selection(selection, num_pixels)?;
    let c = grid.num_classes();

    let mut view = RenderedView {
        width: camera.width(),
        height: camera.height(),
        num_classes: c,
        depth: vec![0.0; num_pixels],
        semantics: vec![0.0; num_pixels * c],
        opacity: vec![0.0; num_pixels],
        miss: vec![true; num_pixels],
    };
    let selected: Vec<usize> =
        selection.map(|s| s.to_vec()).unwrap_or_else(|| (0..num_pixels).collect());
    let mut distributions = Vec::with_capacity(selected.len());

    for chunk in selected.chunks(RAY_CHUNK) {
        let rendered: Vec<(RayDistribution, Vec<f64>)> = chunk
            .par_iter()
            .map(|&pixel| {
                let (distances, sigmas, semantics) = sample_ray(grid, camera, cfg, pixel);
                let deltas = vec![cfg.sampling.step_size; distances.len()];
                let dist = transmittance_weights(&sigmas, &deltas, &distances)
                    .expect("internal sampling produced valid arrays");
                let sem = render_semantics(&dist, &semantics, c)
                    .expect("sample and class counts agree");
                (dist, sem)
            })
            .collect();
        for (&pixel, (dist, sem)) in chunk.iter().zip(rendered) {
            let opacity = dist.opacity();
            let hit = opacity >= cfg.opacity_floor;
            view.depth[pixel] = if hit { dist.depth() } else { 0.0 };
            view.opacity[pixel] = opacity;
            view.miss[pixel] = !hit;
            view.semantics[pixel * c..(pixel + 1) * c].copy_from_slice(&sem);
            distributions.push(dist);
        }
    }
    Ok((view, distributions))
}

/// Upstream gradients for one rendered ray. `d_semantics` is either empty
/// (no semantics gradient) or `num_classes` long; `d_weights`, when present,
/// must match the ray's sample count.
#[derive(Debug, Clone, Default)]
pub struct RayUpstream {
    pub d_depth: f64,
    pub d_semantics: Vec<f64>,
    pub d_weights: Option<Vec<f64>>,
}

/// Gradients of a scalar objective with respect to the grid fields, laid out
/// like the fields themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub d_density: Vec<f64>,
    pub d_semantics: Vec<f64>,
}

impl RenderGradients {
    fn zeros(num_voxels: usize, num_classes: usize) -> Self {
        RenderGradients {
            d_density: vec![0.0; num_voxels],
            d_semantics: vec![0.0; num_voxels * num_classes],
        }
    }
}

/// Sparse per-ray gradient: voxel index, density gradient, and the scale to
/// apply to the ray's semantics gradient vector.
struct RayGrad {
    entries: Vec<(usize, f64, f64)>,
}

fn backward_one_ray(
    grid: &VoxelGrid,
    camera: &Camera,
    cfg: &RenderConfig,
    pixel: usize,
    upstream: &RayUpstream,
) -> Result<RayGrad> {
    let c = grid.num_classes();
    ensure!(
        upstream.d_semantics.is_empty() || upstream.d_semantics.len() == c,
        "upstream semantics gradient has {} entries, expected {c} or none",
        upstream.d_semantics.len()
    );
    let ray = camera.pixel_ray(pixel / camera.width(), pixel % camera.width());
    let (aabb_min, aabb_max) = grid.spec().aabb();
    let (distances, points) = get_points(&ray, &cfg.sampling, aabb_min, aabb_max);
    let k = points.len();
    if let Some(dw) = &upstream.d_weights {
        ensure!(
            dw.len() == k,
            "upstream weight gradient has {} entries but the ray has {k} samples",
            dw.len()
        );
    }
    let mut entries = Vec::new();
    if k == 0 {
        return Ok(RayGrad { entries });
    }

    // Forward recomputation: densities, semantics, transmittance chain.
    let delta = cfg.sampling.step_size;
    let mut sem_buf = vec![0.0; c];
    let mut sigmas = Vec::with_capacity(k);
    let mut g_w = Vec::with_capacity(k);
    for (i, p) in points.iter().enumerate() {
        let sigma = grid.sample_into(*p, cfg.interpolation, &mut sem_buf);
        sigmas.push(sigma);
        let mut g = upstream.d_depth * distances[i];
        if let Some(dw) = &upstream.d_weights {
            g += dw[i];
        }
        for (ds, s) in upstream.d_semantics.iter().zip(&sem_buf) {
            g += ds * s;
        }
        g_w.push(g);
    }
    // transmittances[i] = T_{i+1}, the transmittance after sample i.
    let mut transmittances = Vec::with_capacity(k);
    let mut t = 1.0f64;
    let mut weights = Vec::with_capacity(k);
    for &sigma in &sigmas {
        let a = sigma * delta;
        weights.push(t * -(-a).exp_m1());
        t *= (-a).exp();
        transmittances.push(t);
    }
    // Reverse sweep: suffix[i] = sum_{k>i} g_w[k] w_k.
    let mut suffix = 0.0f64;
    let mut d_sigma = vec![0.0; k];
    for i in (0..k).rev() {
        d_sigma[i] = delta * (g_w[i] * transmittances[i] - suffix);
        suffix += g_w[i] * weights[i];
    }

    // Scatter onto voxels through the interpolation weights.
    for (i, p) in points.iter().enumerate() {
        match cfg.interpolation {
            Interpolation::Trilinear => {
                if let Some(corners) = trilinear_corners(grid.spec(), *p) {
                    for (idx, cw) in corners {
                        if cw != 0.0 {
                            entries.push((idx, cw * d_sigma[i], cw * weights[i]));
                        }
                    }
                }
            }
            Interpolation::Nearest => {
                if let Some(idx) = nearest_voxel(grid.spec(), *p) {
                    entries.push((idx, d_sigma[i], weights[i]));
                }
            }
        }
    }
    Ok(RayGrad { entries })
}

/// Backpropagates per-ray upstream gradients through a render onto the grid
/// fields. `selection` and `upstream` line up index for index (`upstream`
/// covers all pixels when `selection` is `None`). The forward pass is
/// recomputed internally; accumulation order is fixed, so results are
/// bit-identical for any worker count.
pub fn render_backward(
    grid: &VoxelGrid,
    camera: &Camera,
    cfg: &RenderConfig,
    selection: Option<&[usize]>,
    upstream: &[RayUpstream],
) -> Result<RenderGradients> {
    cfg.validate()?;
    let num_pixels = camera.num_pixels();
    check_selection(selection, num_pixels)?;
    let expected = selection.map(|s| s.len()).unwrap_or(num_pixels);
    ensure!(
        upstream.len() == expected,
        "got {} upstream gradients for {expected} rendered rays",
        upstream.len()
    );
    ensure!(
        upstream.iter().all(|u| {
            u.d_depth.is_finite()
                && u.d_semantics.iter().all(|v| v.is_finite())
                && u.d_weights.iter().flatten().all(|v| v.is_finite())
        }),
        "upstream gradients must be finite"
    );

    let c = grid.num_classes();
    let selected: Vec<usize> =
        selection.map(|s| s.to_vec()).unwrap_or_else(|| (0..num_pixels).collect());
    let mut grads = RenderGradients::zeros(grid.spec().num_voxels(), c);

    let mut offset = 0;
    for chunk in selected.chunks(RAY_CHUNK) {
        let ray_grads: Vec<RayGrad> = chunk
            .par_iter()
            .zip(&upstream[offset..offset + chunk.len()])
            .map(|(&pixel, up)| backward_one_ray(grid, camera, cfg, pixel, up))
            .collect::<Result<_>>()?;
        for (up, rg) in upstream[offset..offset + chunk.len()].iter().zip(&ray_grads) {
            for &(idx, dd, sem_scale) in &rg.entries {
                grads.d_density[idx] += dd;
                if sem_scale != 0.0 {
                    for (o, ds) in
                        grads.d_semantics[idx * c..(idx + 1) * c].iter_mut().zip(&up.d_semantics)
                    {
                        *o += sem_scale * ds;
                    }
                }
            }
        }
        offset += chunk.len();
    }
    Ok(grads)
}

/// Fixed 20-color palette for semantics images; class ids wrap modulo 20.
pub const CLASS_PALETTE: [[u8; 3]; 20] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
    [174, 199, 232],
    [255, 187, 120],
    [152, 223, 138],
    [255, 152, 150],
    [197, 176, 213],
    [196, 156, 148],
    [247, 182, 210],
    [199, 199, 199],
    [219, 219, 141],
    [158, 218, 229],
];

/// Depth image in millimeters, saturating at the 16-bit range. Misses are 0.
pub fn depth_image(view: &RenderedView) -> GrayImage {
    let pixels = view
        .depth
        .iter()
        .zip(&view.miss)
        .map(|(&d, &miss)| {
            if miss {
                0
            } else {
                (d * 1000.0).round().clamp(0.0, 65535.0) as u16
            }
        })
        .collect();
    GrayImage { width: view.width, height: view.height, maxval: 65535, pixels }
}

/// Opacity image scaled to 8 bits.
pub fn opacity_image(view: &RenderedView) -> GrayImage {
    let pixels = view
        .opacity
        .iter()
        .map(|&o| (o * 255.0).round().clamp(0.0, 255.0) as u16)
        .collect();
    GrayImage { width: view.width, height: view.height, maxval: 255, pixels }
}

/// Semantics image: the argmax class per pixel through the palette (ties
/// break to the lowest id), black for misses.
pub fn semantics_image(view: &RenderedView) -> RgbImage {
    let c = view.num_classes;
    let mut pixels = Vec::with_capacity(view.width * view.height * 3);
    for p in 0..view.width * view.height {
        if view.miss[p] {
            pixels.extend_from_slice(&[0, 0, 0]);
            continue;
        }
        let sem = &view.semantics[p * c..(p + 1) * c];
        let mut best = 0;
        for (k, &v) in sem.iter().enumerate().skip(1) {
            if v > sem[best] {
                best = k;
            }
        }
        pixels.extend_from_slice(&CLASS_PALETTE[best % CLASS_PALETTE.len()]);
    }
    RgbImage { width: view.width, height: view.height, pixels }
}

pub fn write_depth_pgm(view: &RenderedView, path: impl AsRef<Path>) -> Result<()> {
    save_pgm(&depth_image(view), path)
}

pub fn write_opacity_pgm(view: &RenderedView, path: impl AsRef<Path>) -> Result<()> {
    save_pgm(&opacity_image(view), path)
}

pub fn write_semantics_ppm(view: &RenderedView, path: impl AsRef<Path>) -> Result<()> {
    save_ppm(&semantics_image(view), path)
}
