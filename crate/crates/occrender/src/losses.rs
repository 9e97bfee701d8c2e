//! Rendering-space distillation losses and their analytic gradients.
//!
//! Two families: depth consistency compares teacher and student ray
//! termination distributions with a per-ray KL divergence, and semantic
//! consistency combines a segment-pooled affinity loss with a per-pixel
//! softmax KL. A scale-invariant log-depth loss serves as the conventional
//! depth-distillation baseline. [`total_loss`] composes them per distillation
//! mode and emits per-ray upstream gradients ready for
//! [`render_backward`](crate::render::render_backward).
//!
//! Every loss is zero (with zero gradients) when teacher and student agree,
//! and every gradient is validated against central finite differences in the
//! test suite.

use serde::{Deserialize, Serialize};

use crate::error::{bail, ensure, Result};
use crate::render::{RayDistribution, RayUpstream, RenderedView};
use crate::segments::{pool_segments, SegmentMap};

/// Smoothing added to weight sums and normalized distributions so that rays
/// with vanishing opacity stay well-defined.
pub const WEIGHT_EPS: f64 = 1e-8;

/// Row norms below this are treated as degenerate in affinity computations.
pub const NORM_EPS: f64 = 1e-12;

/// KL divergence between two nonnegative vectors after add-eps
/// renormalization: each side becomes `(v_i + eps) / (sum + n * eps)`.
/// Terms with zero probability on the first side are skipped; zero
/// probability on the second side against positive mass on the first yields
/// infinity. Empty inputs give 0.
pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<f64> {
    ensure!(p.len() == q.len(), "length mismatch: {} vs {}", p.len(), q.len());
    ensure!(eps.is_finite() && eps >= 0.0, "eps must be nonnegative, got {eps}");
    ensure!(
        p.iter().chain(q).all(|v| v.is_finite() && *v >= 0.0),
        "distributions must be finite and nonnegative"
    );
    if p.is_empty() {
        return Ok(0.0);
    }
    let n = p.len() as f64;
    let p_mass = p.iter().sum::<f64>() + n * eps;
    let q_mass = q.iter().sum::<f64>() + n * eps;
    ensure!(p_mass > 0.0, "first argument has zero mass and eps is zero");
    ensure!(q_mass > 0.0, "second argument has zero mass and eps is zero");
    let mut total = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let pt = (a + eps) / p_mass;
        if pt == 0.0 {
            continue;
        }
        let qt = (b + eps) / q_mass;
        if qt == 0.0 {
            return Ok(f64::INFINITY);
        }
        total += pt * (pt / qt).ln();
    }
    Ok(total)
}

/// Rendered depth consistency over a batch of ray pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RdcLoss {
    pub value: f64,
    /// Gradient with respect to each student ray's raw termination weights,
    /// ragged to match the rays. Includes the 1/R batch mean factor.
    pub d_student_weights: Vec<Vec<f64>>,
}

/// Per-ray core: KL between eps-normalized termination distributions, plus
/// the gradient with respect to the student's raw weights (no batch factor).
///
/// Raw weights first normalize by their own mass (`sum + WEIGHT_EPS`), then
/// both sides pass through the add-eps renormalization of [`kl_divergence`].
/// The gradient is exactly zero when the distributions are identical.
fn rdc_ray(teacher: &RayDistribution, student: &RayDistribution) -> Result<(f64, Vec<f64>)> {
    let k = teacher.len();
    ensure!(
        k == student.len(),
        "ray sample counts differ: teacher {k}, student {}",
        student.len()
    );
    ensure!(
        teacher
            .distances
            .iter()
            .zip(&student.distances)
            .all(|(a, b)| (a - b).abs() <= 1e-9),
        "teacher and student rays sample different distances"
    );
    if k == 0 {
        return Ok((0.0, Vec::new()));
    }
    let n = k as f64;
    let t_mass = teacher.opacity() + WEIGHT_EPS;
    let u_mass = student.opacity() + WEIGHT_EPS;

    // Normalized distributions p, q and their add-eps smoothed versions.
    let eps = WEIGHT_EPS;
    let p: Vec<f64> = teacher.weights.iter().map(|w| w / t_mass).collect();
    let q: Vec<f64> = student.weights.iter().map(|w| w / u_mass).collect();
    let p_mass = p.iter().sum::<f64>() + n * eps;
    let q_mass = q.iter().sum::<f64>() + n * eps;

    let mut value = 0.0;
    let mut d_q = vec![0.0; k];
    for i in 0..k {
        let pt = (p[i] + eps) / p_mass;
        let qt = (q[i] + eps) / q_mass;
        value += pt * (pt / qt).ln();
        // d value / d q_i through the smoothing: (1 - pt/qt) / q_mass.
        d_q[i] = (1.0 - pt / qt) / q_mass;
    }
    // Chain through q_i = u_i / u_mass: subtract the projection onto q, then
    // scale by the mass.
    let dot: f64 = d_q.iter().zip(&q).map(|(d, qv)| d * qv).sum();
    let d_u: Vec<f64> = d_q.iter().map(|d| (d - dot) / u_mass).collect();
    Ok((value, d_u))
}

/// Mean per-ray termination KL over paired teacher/student rays. Rays are
/// paired by position and must sample identical distances; rays without
/// samples contribute zero but still count toward the mean.
pub fn rdc_loss(teacher: &[RayDistribution], student: &[RayDistribution]) -> Result<RdcLoss> {
    ensure!(
        teacher.len() == student.len(),
        "ray counts differ: teacher {}, student {}",
        teacher.len(),
        student.len()
    );
    ensure!(!teacher.is_empty(), "depth consistency needs at least one ray");
    let r = teacher.len() as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(teacher.len());
    for (t, s) in teacher.iter().zip(student) {
        let (v, mut g) = rdc_ray(t, s)?;
        value += v;
        for gi in &mut g {
            *gi /= r;
        }
        grads.push(g);
    }
    Ok(RdcLoss { value: value / r, d_student_weights: grads })
}

/// Pairwise per-channel affinity of embedding rows:
/// `values[(i * M + j) * C + r] = e_i[r] * e_j[r] / (|e_i| |e_j|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffinityMatrix {
    pub num_rows: usize,
    pub num_channels: usize,
    pub values: Vec<f64>,
}

fn row_norms(embeddings: &[f64], num_rows: usize, num_channels: usize) -> Result<Vec<f64>> {
    let mut norms = Vec::with_capacity(num_rows);
    for i in 0..num_rows {
        let row = &embeddings[i * num_channels..(i + 1) * num_channels];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        ensure!(
            norm > NORM_EPS,
            "embedding row {i} has near-zero norm {norm:.3e}; affinity is undefined"
        );
        norms.push(norm);
    }
    Ok(norms)
}

/// Computes the full affinity tensor of an embedding matrix (rows x
/// channels). Errors when any row norm is below 1e-12.
pub fn affinity(embeddings: &[f64], num_rows: usize, num_channels: usize) -> Result<AffinityMatrix> {
    ensure!(num_rows >= 1 && num_channels >= 1, "affinity needs at least one row and channel");
    ensure!(
        embeddings.len() == num_rows * num_channels,
        "embedding buffer has {} entries, expected {}",
        embeddings.len(),
        num_rows * num_channels
    );
    ensure!(embeddings.iter().all(|v| v.is_finite()), "embeddings must be finite");
    let norms = row_norms(embeddings, num_rows, num_channels)?;
    let mut values = Vec::with_capacity(num_rows * num_rows * num_channels);
    for i in 0..num_rows {
        for j in 0..num_rows {
            let inv = 1.0 / (norms[i] * norms[j]);
            for r in 0..num_channels {
                values.push(
                    embeddings[i * num_channels + r] * embeddings[j * num_channels + r] * inv,
                );
            }
        }
    }
    Ok(AffinityMatrix { num_rows, num_channels, values })
}

/// Segment affinity distillation: squared affinity mismatch plus its
/// gradient with respect to the student embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct SadLoss {
    pub value: f64,
    /// Gradient per student embedding entry (rows x channels).
    pub d_student: Vec<f64>,
}

/// Mean squared difference between teacher and student affinities,
/// normalized by `num_channels * num_rows^2`. Both embedding matrices share
/// the same shape; every row must have norm above 1e-12.
pub fn sad_loss(
    teacher_embeddings: &[f64],
    student_embeddings: &[f64],
    num_rows: usize,
    num_channels: usize,
) -> Result<SadLoss> {
    ensure!(num_rows >= 1 && num_channels >= 1, "sad needs at least one row and channel");
    let len = num_rows * num_channels;
    ensure!(
        teacher_embeddings.len() == len && student_embeddings.len() == len,
        "embedding buffers must both have {len} entries, got {} and {}",
        teacher_embeddings.len(),
        student_embeddings.len()
    );
    ensure!(
        teacher_embeddings.iter().chain(student_embeddings).all(|v| v.is_finite()),
        "embeddings must be finite"
    );
    let c = num_channels;
    let t_norms = row_norms(teacher_embeddings, num_rows, c)?;
    let s_norms = row_norms(student_embeddings, num_rows, c)?;
    let scale = 1.0 / (c * num_rows * num_rows) as f64;

    let mut value = 0.0;
    let mut d_student = vec![0.0; len];
    for i in 0..num_rows {
        let e_si = &student_embeddings[i * c..(i + 1) * c];
        let e_ti = &teacher_embeddings[i * c..(i + 1) * c];
        for j in 0..num_rows {
            let e_sj = &student_embeddings[j * c..(j + 1) * c];
            let e_tj = &teacher_embeddings[j * c..(j + 1) * c];
            let s_inv = 1.0 / (s_norms[i] * s_norms[j]);
            let t_inv = 1.0 / (t_norms[i] * t_norms[j]);
            // coef accumulates sum_r G_ijr * CS_ijr for the norm term.
            let mut coef = 0.0;
            for r in 0..c {
                let cs = e_si[r] * e_sj[r] * s_inv;
                let ct = e_ti[r] * e_tj[r] * t_inv;
                let diff = cs - ct;
                value += diff * diff * scale;
                let g = 2.0 * diff * scale;
                d_student[i * c + r] += g * e_sj[r] * s_inv;
                d_student[j * c + r] += g * e_si[r] * s_inv;
                coef += g * cs;
            }
            for s in 0..c {
                d_student[i * c + s] -= coef * e_si[s] / (s_norms[i] * s_norms[i]);
                d_student[j * c + s] -= coef * e_sj[s] / (s_norms[j] * s_norms[j]);
            }
        }
    }
    Ok(SadLoss { value, d_student })
}

/// Pixelwise softmax KL between teacher and student class logits.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticKl {
    pub value: f64,
    /// Gradient per student logit (pixels x classes), zero at invalid pixels.
    pub d_student_logits: Vec<f64>,
    pub pixels_used: usize,
}

/// Stable log-softmax into `out`; returns nothing, `out` holds log
/// probabilities.
fn log_softmax(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - max;
        sum += o.exp();
    }
    let log_sum = sum.ln();
    for o in out.iter_mut() {
        *o -= log_sum;
    }
}

/// Mean softmax KL (teacher to student) over valid pixels. Both logit
/// buffers are pixel-major with `num_classes` innermost; `valid` selects the
/// pixels that count. Errors when no pixel is valid.
pub fn semantic_kl(
    teacher_logits: &[f64],
    student_logits: &[f64],
    num_classes: usize,
    valid: &[bool],
) -> Result<SemanticKl> {
    ensure!(num_classes >= 1, "num_classes must be >= 1");
    let n = valid.len();
    ensure!(
        teacher_logits.len() == n * num_classes && student_logits.len() == n * num_classes,
        "logit buffers must have {} entries, got {} and {}",
        n * num_classes,
        teacher_logits.len(),
        student_logits.len()
    );
    ensure!(
        teacher_logits.iter().chain(student_logits).all(|v| v.is_finite()),
        "logits must be finite"
    );
    let n_valid = valid.iter().filter(|&&v| v).count();
    ensure!(n_valid > 0, "semantic consistency has no valid pixels");

    let c = num_classes;
    let mut value = 0.0;
    let mut d = vec![0.0; n * c];
    let mut log_p = vec![0.0; c];
    let mut log_q = vec![0.0; c];
    let inv = 1.0 / n_valid as f64;
    for px in 0..n {
        if !valid[px] {
            continue;
        }
        log_softmax(&teacher_logits[px * c..(px + 1) * c], &mut log_p);
        log_softmax(&student_logits[px * c..(px + 1) * c], &mut log_q);
        for k in 0..c {
            let p = log_p[k].exp();
            let q = log_q[k].exp();
            value += p * (log_p[k] - log_q[k]);
            d[px * c + k] = (q - p) * inv;
        }
    }
    Ok(SemanticKl { value: value * inv, d_student_logits: d, pixels_used: n_valid })
}

/// Scale-invariant logarithmic depth loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SilogLoss {
    pub value: f64,
    /// Gradient per student depth, zero at invalid pixels.
    pub d_student_depth: Vec<f64>,
    pub pixels_used: usize,
}

/// For log errors g_i = ln(s_i) - ln(t_i) over valid pixels,
/// `L = mean(g^2) - lambda * mean(g)^2`. Depths must be positive wherever
/// `valid` is set; `lambda` lies in [0, 1].
pub fn silog_loss(
    teacher_depth: &[f64],
    student_depth: &[f64],
    valid: &[bool],
    lambda: f64,
) -> Result<SilogLoss> {
    let n = valid.len();
    ensure!(
        teacher_depth.len() == n && student_depth.len() == n,
        "depth buffers must have {n} entries, got {} and {}",
        teacher_depth.len(),
        student_depth.len()
    );
    ensure!(
        (0.0..=1.0).contains(&lambda),
        "silog lambda must lie in [0, 1], got {lambda}"
    );
    let n_valid = valid.iter().filter(|&&v| v).count();
    ensure!(n_valid > 0, "depth loss has no valid pixels");
    let inv = 1.0 / n_valid as f64;

    let mut sum_g = 0.0;
    let mut sum_g2 = 0.0;
    for px in 0..n {
        if !valid[px] {
            continue;
        }
        let (t, s) = (teacher_depth[px], student_depth[px]);
        ensure!(
            t > 0.0 && t.is_finite() && s > 0.0 && s.is_finite(),
            "valid pixel {px} has nonpositive depth (teacher {t}, student {s})"
        );
        let g = s.ln() - t.ln();
        sum_g += g;
        sum_g2 += g * g;
    }
    let value = sum_g2 * inv - lambda * (sum_g * inv) * (sum_g * inv);
    let mut d = vec![0.0; n];
    for px in 0..n {
        if !valid[px] {
            continue;
        }
        let g = student_depth[px].ln() - teacher_depth[px].ln();
        d[px] = (2.0 * g * inv - 2.0 * lambda * sum_g * inv * inv) / student_depth[px];
    }
    Ok(SilogLoss { value, d_student_depth: d, pixels_used: n_valid })
}

/// Segment-pooled affinity mismatch over one view's semantics. Pools both
/// sides over the same segments (restricted to `mask` when given), drops
/// rows whose teacher or student pooled norm falls below 1e-12, and scatters
/// the affinity gradient back to per-pixel semantics.
///
/// Returns (value, kept segment count, per-pixel gradient buffer).
pub(crate) fn segment_sad(
    teacher_sem: &[f64],
    student_sem: &[f64],
    num_classes: usize,
    segments: &SegmentMap,
    mask: Option<&[bool]>,
) -> Result<(f64, usize, Vec<f64>)> {
    let n = segments.width() * segments.height();
    let c = num_classes;
    ensure!(
        teacher_sem.len() == n * c && student_sem.len() == n * c,
        "semantics buffers must have {} entries, got {} and {}",
        n * c,
        teacher_sem.len(),
        student_sem.len()
    );
    let t_pooled = pool_segments(segments, teacher_sem, c, mask)?;
    let s_pooled = pool_segments(segments, student_sem, c, mask)?;
    // Same segments and mask on both sides: identical kept sets.
    debug_assert_eq!(t_pooled.segment_ids, s_pooled.segment_ids);

    // Drop rows that are degenerate on either side, consistently.
    let mut kept_rows = Vec::new();
    for row in 0..t_pooled.segment_ids.len() {
        let t_row = &t_pooled.rows[row * c..(row + 1) * c];
        let s_row = &s_pooled.rows[row * c..(row + 1) * c];
        let t_norm = t_row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let s_norm = s_row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if t_norm > NORM_EPS && s_norm > NORM_EPS {
            kept_rows.push(row);
        }
    }
    let m = kept_rows.len();
    let mut d_pixels = vec![0.0; n * c];
    if m == 0 {
        return Ok((0.0, 0, d_pixels));
    }
    let mut t_emb = Vec::with_capacity(m * c);
    let mut s_emb = Vec::with_capacity(m * c);
    for &row in &kept_rows {
        t_emb.extend_from_slice(&t_pooled.rows[row * c..(row + 1) * c]);
        s_emb.extend_from_slice(&s_pooled.rows[row * c..(row + 1) * c]);
    }
    let sad = sad_loss(&t_emb, &s_emb, m, c)?;

    // Scatter: pooled row r is the mean over its pixels, so each member
    // pixel receives d_row / count.
    let mut kept_row_of_segment = vec![None; segments.num_segments()];
    for (kept_idx, &row) in kept_rows.iter().enumerate() {
        kept_row_of_segment[t_pooled.segment_ids[row] as usize] = Some((kept_idx, row));
    }
    for p in 0..n {
        if let Some(mask) = mask {
            if !mask[p] {
                continue;
            }
        }
        let seg = segments.labels()[p] as usize;
        let Some((kept_idx, row)) = kept_row_of_segment[seg] else { continue };
        let count = t_pooled.counts[row] as f64;
        for k in 0..c {
            d_pixels[p * c + k] = sad.d_student[kept_idx * c + k] / count;
        }
    }
    Ok((sad.value, m, d_pixels))
}

/// Rendered semantic consistency: segment affinity mismatch plus
/// `omega`-weighted pixel KL.
#[derive(Debug, Clone, PartialEq)]
pub struct RscLoss {
    pub value: f64,
    pub sad: f64,
    pub kl: f64,
    /// Gradient per student semantics entry (pixels x classes).
    pub d_student_semantics: Vec<f64>,
    pub segments_used: usize,
}

/// Combines [`segment_sad`] and [`semantic_kl`] over one view:
/// `value = sad + omega * kl`. `mask` restricts both terms to selected
/// pixels. Segments whose pooled teacher or student semantics have
/// near-zero norm are dropped from the affinity term on both sides.
pub fn rsc_loss(
    teacher_sem: &[f64],
    student_sem: &[f64],
    num_classes: usize,
    segments: &SegmentMap,
    mask: Option<&[bool]>,
    omega: f64,
) -> Result<RscLoss> {
    ensure!(omega.is_finite() && omega >= 0.0, "omega must be nonnegative, got {omega}");
    let n = segments.width() * segments.height();
    let (sad, segments_used, mut d) =
        segment_sad(teacher_sem, student_sem, num_classes, segments, mask)?;
    let valid: Vec<bool> = match mask {
        Some(m) => m.to_vec(),
        None => vec![true; n],
    };
    let kl = semantic_kl(teacher_sem, student_sem, num_classes, &valid)?;
    for (dv, dk) in d.iter_mut().zip(&kl.d_student_logits) {
        *dv += omega * dk;
    }
    Ok(RscLoss {
        value: sad + omega * kl.value,
        sad,
        kl: kl.value,
        d_student_semantics: d,
        segments_used,
    })
}

/// Which distillation terms are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillMode {
    /// Scale-invariant log depth only (the conventional depth baseline).
    #[serde(rename = "rdc-minus")]
    RdcMinus,
    /// Ray termination KL only.
    #[serde(rename = "rdc")]
    Rdc,
    /// Segment affinity only.
    #[serde(rename = "sad")]
    Sad,
    /// Segment affinity plus pixel KL.
    #[serde(rename = "rsc")]
    Rsc,
    /// Everything: termination KL, segment affinity, pixel KL.
    #[serde(rename = "rdc+rsc")]
    RdcRsc,
}

impl DistillMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DistillMode::RdcMinus => "rdc-minus",
            DistillMode::Rdc => "rdc",
            DistillMode::Sad => "sad",
            DistillMode::Rsc => "rsc",
            DistillMode::RdcRsc => "rdc+rsc",
        }
    }

    pub fn uses_rdc(&self) -> bool {
        matches!(self, DistillMode::Rdc | DistillMode::RdcRsc)
    }

    pub fn uses_silog(&self) -> bool {
        matches!(self, DistillMode::RdcMinus)
    }

    pub fn uses_sad(&self) -> bool {
        matches!(self, DistillMode::Sad | DistillMode::Rsc | DistillMode::RdcRsc)
    }

    pub fn uses_kl(&self) -> bool {
        matches!(self, DistillMode::Rsc | DistillMode::RdcRsc)
    }
}

impl std::str::FromStr for DistillMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rdc-minus" => Ok(DistillMode::RdcMinus),
            "rdc" => Ok(DistillMode::Rdc),
            "sad" => Ok(DistillMode::Sad),
            "rsc" => Ok(DistillMode::Rsc),
            "rdc+rsc" => Ok(DistillMode::RdcRsc),
            other => bail!("unknown mode {other:?} (expected rdc-minus, rdc, sad, rsc, rdc+rsc)"),
        }
    }
}

impl std::fmt::Display for DistillMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Loss term weights. The depth-term weight also scales the log-depth
/// baseline when that mode is active; `silog_lambda` is the internal
/// variance weight of the log-depth loss itself.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillationWeights {
    pub lambda_rdc: f64,
    pub lambda_sad: f64,
    pub lambda_kl: f64,
    pub silog_lambda: f64,
}

impl Default for DistillationWeights {
    fn default() -> Self {
        DistillationWeights { lambda_rdc: 100.0, lambda_sad: 10.0, lambda_kl: 10.0, silog_lambda: 0.5 }
    }
}

impl DistillationWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            [self.lambda_rdc, self.lambda_sad, self.lambda_kl]
                .iter()
                .all(|w| w.is_finite() && *w >= 0.0),
            "loss weights must be finite and nonnegative"
        );
        ensure!(
            (0.0..=1.0).contains(&self.silog_lambda),
            "silog_lambda must lie in [0, 1], got {}",
            self.silog_lambda
        );
        Ok(())
    }
}

/// One camera's rendered teacher/student pair plus the ray selection and
/// segmentation it was rendered under. Ray arrays align with `selection`.
pub struct ViewPair<'a> {
    pub selection: &'a [usize],
    pub teacher_view: &'a RenderedView,
    pub teacher_rays: &'a [RayDistribution],
    pub student_view: &'a RenderedView,
    pub student_rays: &'a [RayDistribution],
    pub segments: &'a SegmentMap,
}

/// Scalar loss components (unweighted) plus the weighted total that
/// gradients correspond to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub rdc: f64,
    pub sad: f64,
    pub kl: f64,
    pub silog: f64,
    pub total: f64,
    pub rays_used: usize,
    pub segments_used: usize,
}

/// Output of [`total_loss`]: the report and per-view upstream gradients of
/// the weighted total, aligned with each view's selection.
pub struct TotalLoss {
    pub report: LossReport,
    pub upstream: Vec<Vec<RayUpstream>>,
}

/// Composes the distillation objective over one or more views.
///
/// All four components are evaluated for reporting; the mode decides which
/// of them enter the total and the gradients. Reductions: termination KL is
/// averaged over all rays of all views, pixel KL over all selected pixels,
/// log depth over valid pixels (positive rendered depth on both sides), and
/// the affinity term is averaged per view.
pub fn total_loss(
    views: &[ViewPair],
    mode: DistillMode,
    weights: &DistillationWeights,
) -> Result<TotalLoss> {
    weights.validate()?;
    ensure!(!views.is_empty(), "total loss needs at least one view");
    let c = views[0].teacher_view.num_classes;
    for (vi, view) in views.iter().enumerate() {
        let num_pixels = view.teacher_view.width * view.teacher_view.height;
        ensure!(!view.selection.is_empty(), "view {vi} has an empty ray selection");
        ensure!(
            view.selection.windows(2).all(|w| w[0] < w[1])
                && *view.selection.last().unwrap() < num_pixels,
            "view {vi} selection must be sorted, unique, and within {num_pixels} pixels"
        );
        ensure!(
            view.student_view.width == view.teacher_view.width
                && view.student_view.height == view.teacher_view.height,
            "view {vi} teacher and student image sizes differ"
        );
        ensure!(
            view.teacher_view.num_classes == c && view.student_view.num_classes == c,
            "view {vi} class counts are inconsistent"
        );
        ensure!(
            view.teacher_rays.len() == view.selection.len()
                && view.student_rays.len() == view.selection.len(),
            "view {vi} ray arrays must match the selection length"
        );
        ensure!(
            view.segments.width() == view.teacher_view.width
                && view.segments.height() == view.teacher_view.height,
            "view {vi} segment map size does not match the image"
        );
    }

    let rays_total: usize = views.iter().map(|v| v.selection.len()).sum();
    let num_views = views.len() as f64;

    // Termination KL, mean over every selected ray of every view.
    let mut rdc_value = 0.0;
    let mut rdc_grads: Vec<Vec<Vec<f64>>> = Vec::with_capacity(views.len());
    for view in views {
        let part = rdc_loss(view.teacher_rays, view.student_rays)?;
        let share = view.selection.len() as f64 / rays_total as f64;
        rdc_value += part.value * share;
        // Rescale from per-view mean to the global mean.
        let grads = part
            .d_student_weights
            .into_iter()
            .map(|mut g| {
                for gi in &mut g {
                    *gi *= share;
                }
                g
            })
            .collect();
        rdc_grads.push(grads);
    }

    // Log depth over the concatenation of all views' rays. Validity uses the
    // raw expected depths from the distributions, so it does not depend on
    // the opacity floor.
    let mut t_depth = Vec::with_capacity(rays_total);
    let mut s_depth = Vec::with_capacity(rays_total);
    for view in views {
        t_depth.extend(view.teacher_rays.iter().map(|r| r.depth()));
        s_depth.extend(view.student_rays.iter().map(|r| r.depth()));
    }
    let depth_valid: Vec<bool> =
        t_depth.iter().zip(&s_depth).map(|(&t, &s)| t > 0.0 && s > 0.0).collect();
    let n_depth_valid = depth_valid.iter().filter(|&&v| v).count();
    let silog = if n_depth_valid > 0 {
        Some(silog_loss(&t_depth, &s_depth, &depth_valid, weights.silog_lambda)?)
    } else {
        ensure!(
            !mode.uses_silog(),
            "log-depth mode needs at least one ray with positive depth on both sides"
        );
        None
    };
    let silog_value = silog.as_ref().map(|s| s.value).unwrap_or(0.0);

    // Pixel KL over all selected pixels of all views.
    let mut t_logits = Vec::with_capacity(rays_total * c);
    let mut s_logits = Vec::with_capacity(rays_total * c);
    for view in views {
        for &p in view.selection {
            t_logits.extend_from_slice(&view.teacher_view.semantics[p * c..(p + 1) * c]);
            s_logits.extend_from_slice(&view.student_view.semantics[p * c..(p + 1) * c]);
        }
    }
    let kl = semantic_kl(&t_logits, &s_logits, c, &vec![true; rays_total])?;

    // Affinity term, averaged per view.
    let mut sad_value = 0.0;
    let mut segments_used = 0;
    let mut sad_grads: Vec<Vec<f64>> = Vec::with_capacity(views.len());
    for view in views {
        let num_pixels = view.teacher_view.width * view.teacher_view.height;
        let mut mask = vec![false; num_pixels];
        for &p in view.selection {
            mask[p] = true;
        }
        let (value, kept, d) = segment_sad(
            &view.teacher_view.semantics,
            &view.student_view.semantics,
            c,
            view.segments,
            Some(&mask),
        )?;
        sad_value += value / num_views;
        segments_used += kept;
        sad_grads.push(d);
    }

    let mut total = 0.0;
    if mode.uses_rdc() {
        total += weights.lambda_rdc * rdc_value;
    }
    if mode.uses_silog() {
        total += weights.lambda_rdc * silog_value;
    }
    if mode.uses_sad() {
        total += weights.lambda_sad * sad_value;
    }
    if mode.uses_kl() {
        total += weights.lambda_kl * kl.value;
    }

    // Assemble per-ray upstream gradients of the weighted total.
    let mut upstream = Vec::with_capacity(views.len());
    let mut ray_offset = 0;
    for (vi, view) in views.iter().enumerate() {
        let mut view_upstream = Vec::with_capacity(view.selection.len());
        for (k, &p) in view.selection.iter().enumerate() {
            let d_weights = if mode.uses_rdc() {
                Some(
                    rdc_grads[vi][k]
                        .iter()
                        .map(|g| g * weights.lambda_rdc)
                        .collect::<Vec<f64>>(),
                )
            } else {
                None
            };
            let d_depth = match (&silog, mode.uses_silog()) {
                (Some(s), true) => weights.lambda_rdc * s.d_student_depth[ray_offset + k],
                _ => 0.0,
            };
            let mut d_semantics = Vec::new();
            if mode.uses_sad() || mode.uses_kl() {
                d_semantics = vec![0.0; c];
                if mode.uses_sad() {
                    let dv = &sad_grads[vi][p * c..(p + 1) * c];
                    for (o, d) in d_semantics.iter_mut().zip(dv) {
                        *o += weights.lambda_sad * d / num_views;
                    }
                }
                if mode.uses_kl() {
                    let dv = &kl.d_student_logits[(ray_offset + k) * c..(ray_offset + k + 1) * c];
                    for (o, d) in d_semantics.iter_mut().zip(dv) {
                        *o += weights.lambda_kl * d;
                    }
                }
            }
            view_upstream.push(RayUpstream { d_depth, d_semantics, d_weights });
        }
        ray_offset += view.selection.len();
        upstream.push(view_upstream);
    }

    Ok(TotalLoss {
        report: LossReport {
            rdc: rdc_value,
            sad: sad_value,
            kl: kl.value,
            silog: silog_value,
            total,
            rays_used: rays_total,
            segments_used,
        },
        upstream,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Camera;
    use crate::render::{render_view, RenderConfig};
    use crate::segments::grid_tiles;
    use crate::volume::{GridSpec, VoxelGrid};
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kl_hand_values() {
        // KL((0.5, 0.5) || (0.9, 0.1)) = 0.5 ln(25/9).
        let v = kl_divergence(&[0.5, 0.5], &[0.9, 0.1], 0.0).unwrap();
        assert_relative_eq!(v, 0.5108256237659907, epsilon = 1e-12);
        // Unnormalized inputs are normalized first.
        let v2 = kl_divergence(&[2.0, 2.0], &[90.0, 10.0], 0.0).unwrap();
        assert_relative_eq!(v2, v, epsilon = 1e-12);
        // Zero mass on the first side is skipped: KL((1,0) || (.5,.5)) = ln 2.
        let v3 = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], 0.0).unwrap();
        assert_relative_eq!(v3, std::f64::consts::LN_2, epsilon = 1e-12);
        // Mass against a zero bin diverges.
        assert_eq!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0], 0.0).unwrap(), f64::INFINITY);
        // Identical distributions give exactly zero.
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7], 1e-8).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[], &[], 0.0).unwrap(), 0.0);
        assert!(kl_divergence(&[0.0, 0.0], &[1.0, 1.0], 0.0).is_err());
        assert!(kl_divergence(&[1.0], &[1.0, 1.0], 0.0).is_err());
    }

    fn ray(weights: &[f64], distances: &[f64]) -> RayDistribution {
        RayDistribution {
            distances: distances.to_vec(),
            deltas: vec![1.0; weights.len()],
            weights: weights.to_vec(),
            residual_transmittance: (1.0 - weights.iter().sum::<f64>()).max(0.0),
        }
    }

    #[test]
    fn rdc_hand_value_and_fixed_point() {
        let teacher = vec![ray(&[0.5, 0.5], &[1.0, 2.0])];
        let student = vec![ray(&[0.9, 0.1], &[1.0, 2.0])];
        let loss = rdc_loss(&teacher, &student).unwrap();
        assert_relative_eq!(loss.value, 0.5108256237659907, epsilon = 1e-4);

        // Teacher == student: loss ~ 0 and gradient exactly zero.
        let loss = rdc_loss(&teacher, &teacher.clone()).unwrap();
        assert!(loss.value.abs() < 1e-12);
        assert!(loss.d_student_weights[0].iter().all(|&g| g == 0.0));

        // Rays must align.
        let misaligned = vec![ray(&[0.5, 0.5], &[1.0, 2.5])];
        assert!(rdc_loss(&teacher, &misaligned).is_err());
        assert!(rdc_loss(&teacher, &[]).is_err());

        // Empty rays contribute zero.
        let empty = vec![ray(&[], &[])];
        let loss = rdc_loss(&empty, &empty.clone()).unwrap();
        assert_eq!(loss.value, 0.0);
    }

    #[test]
    fn rdc_is_invariant_to_weight_rescaling() {
        let teacher = vec![ray(&[0.2, 0.3, 0.1], &[1.0, 2.0, 3.0])];
        let student = vec![ray(&[0.1, 0.5, 0.05], &[1.0, 2.0, 3.0])];
        let base = rdc_loss(&teacher, &student).unwrap().value;
        let t2 = vec![ray(&[0.4, 0.6, 0.2], &[1.0, 2.0, 3.0])];
        let s2 = vec![ray(&[0.05, 0.25, 0.025], &[1.0, 2.0, 3.0])];
        let scaled = rdc_loss(&t2, &s2).unwrap().value;
        // Exact up to the 1e-8 smoothing.
        assert_relative_eq!(base, scaled, epsilon = 1e-6);
    }

    #[test]
    fn rdc_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let distances: Vec<f64> = (0..5).map(|i| 0.5 + i as f64 * 0.4).collect();
        let make = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..0.3)).collect();
            ray(&w, &distances)
        };
        let teacher: Vec<RayDistribution> = (0..3).map(|_| make(&mut rng)).collect();
        let student: Vec<RayDistribution> = (0..3).map(|_| make(&mut rng)).collect();
        let loss = rdc_loss(&teacher, &student).unwrap();
        let h = 1e-6;
        for r in 0..3 {
            for i in 0..5 {
                let mut plus = student.clone();
                plus[r].weights[i] += h;
                let mut minus = student.clone();
                minus[r].weights[i] -= h;
                let fd = (rdc_loss(&teacher, &plus).unwrap().value
                    - rdc_loss(&teacher, &minus).unwrap().value)
                    / (2.0 * h);
                let a = loss.d_student_weights[r][i];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(((a - fd) / denom).abs() < 1e-5, "ray {r} bin {i}: {a} vs {fd}");
            }
        }
    }

    #[test]
    fn affinity_hand_rows_and_invariance() {
        // Rows (3,4) and (0,5), both norm 5.
        let emb = vec![3.0, 4.0, 0.0, 5.0];
        let aff = affinity(&emb, 2, 2).unwrap();
        assert_eq!(aff.values.len(), 8);
        // C[0,0] = (9/25, 16/25); C[0,1] = (0, 20/25).
        assert_relative_eq!(aff.values[0], 9.0 / 25.0, epsilon = 1e-12);
        assert_relative_eq!(aff.values[1], 16.0 / 25.0, epsilon = 1e-12);
        assert_relative_eq!(aff.values[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(aff.values[3], 20.0 / 25.0, epsilon = 1e-12);
        // Rescaling any row leaves the affinity unchanged.
        let scaled = vec![6.0, 8.0, 0.0, 5.0];
        let aff2 = affinity(&scaled, 2, 2).unwrap();
        for (a, b) in aff.values.iter().zip(&aff2.values) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        // Near-zero rows are rejected.
        assert!(affinity(&[1.0, 0.0, 0.0, 0.0], 2, 2).is_err());
    }

    #[test]
    fn sad_hand_value_and_zero_at_match() {
        // Single row: teacher (1,0), student (0,1). Affinities (1,0) vs
        // (0,1): sum of squared differences 2, scale 1/(2*1) -> 1.0.
        let loss = sad_loss(&[1.0, 0.0], &[0.0, 1.0], 1, 2).unwrap();
        assert_relative_eq!(loss.value, 1.0, epsilon = 1e-12);
        // Equal embeddings: zero value, zero gradient.
        let emb = vec![0.5, 1.5, -2.0, 0.25, 0.1, 1.0];
        let loss = sad_loss(&emb, &emb.clone(), 3, 2).unwrap();
        assert_eq!(loss.value, 0.0);
        assert!(loss.d_student.iter().all(|&g| g == 0.0));
        // Scale invariance extends to the loss: doubling student rows
        // changes nothing.
        let doubled: Vec<f64> = emb.iter().map(|v| v * 2.0).collect();
        let loss = sad_loss(&emb, &doubled, 3, 2).unwrap();
        assert!(loss.value.abs() < 1e-24);
    }

    #[test]
    fn sad_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, c) = (4, 3);
        let teacher: Vec<f64> = (0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let student: Vec<f64> = (0..m * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = sad_loss(&teacher, &student, m, c).unwrap();
        let h = 1e-6;
        for i in 0..m * c {
            let mut plus = student.clone();
            plus[i] += h;
            let mut minus = student.clone();
            minus[i] -= h;
            let fd = (sad_loss(&teacher, &plus, m, c).unwrap().value
                - sad_loss(&teacher, &minus, m, c).unwrap().value)
                / (2.0 * h);
            let a = loss.d_student[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-5, "entry {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn semantic_kl_hand_value_shift_invariance_and_fd() {
        // Teacher logits (0,0) -> (0.5, 0.5); student (ln 9, 0) -> (0.9, 0.1).
        let v = semantic_kl(&[0.0, 0.0], &[9f64.ln(), 0.0], 2, &[true]).unwrap();
        assert_relative_eq!(v.value, 0.5108256237659907, epsilon = 1e-12);
        assert_eq!(v.pixels_used, 1);
        // Gradient is (q - p) / n.
        assert_relative_eq!(v.d_student_logits[0], 0.4, epsilon = 1e-12);
        assert_relative_eq!(v.d_student_logits[1], -0.4, epsilon = 1e-12);

        // Shifting logits per pixel changes nothing.
        let v2 = semantic_kl(&[7.0, 7.0], &[9f64.ln() - 3.0, -3.0], 2, &[true]).unwrap();
        assert_relative_eq!(v2.value, v.value, epsilon = 1e-12);

        // Invalid pixels are excluded and get zero gradient.
        let v3 = semantic_kl(
            &[0.0, 0.0, 5.0, -5.0],
            &[9f64.ln(), 0.0, 0.0, 0.0],
            2,
            &[true, false],
        )
        .unwrap();
        assert_relative_eq!(v3.value, v.value, epsilon = 1e-12);
        assert_eq!(&v3.d_student_logits[2..], &[0.0, 0.0]);
        assert!(semantic_kl(&[0.0], &[0.0], 1, &[false]).is_err());

        // Finite differences over a random instance.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (n, c) = (4, 3);
        let t: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let s: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let valid = vec![true, true, false, true];
        let loss = semantic_kl(&t, &s, c, &valid).unwrap();
        let h = 1e-6;
        for i in 0..n * c {
            let mut plus = s.clone();
            plus[i] += h;
            let mut minus = s.clone();
            minus[i] -= h;
            let fd = (semantic_kl(&t, &plus, c, &valid).unwrap().value
                - semantic_kl(&t, &minus, c, &valid).unwrap().value)
                / (2.0 * h);
            let a = loss.d_student_logits[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-5, "logit {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn silog_hand_value_and_fd() {
        // t = 1, s = e: g = 1, L = 1 - 0.5 = 0.5, d = (2 - 1)/e.
        let loss = silog_loss(&[1.0], &[std::f64::consts::E], &[true], 0.5).unwrap();
        assert_relative_eq!(loss.value, 0.5, epsilon = 1e-12);
        assert_relative_eq!(loss.d_student_depth[0], 1.0 / std::f64::consts::E, epsilon = 1e-12);
        // Perfect match: zero.
        let loss = silog_loss(&[2.0, 3.0], &[2.0, 3.0], &[true, true], 0.5).unwrap();
        assert_eq!(loss.value, 0.0);
        // Scale invariance at lambda = 1: s = 2t has zero loss.
        let loss = silog_loss(&[1.0, 4.0], &[2.0, 8.0], &[true, true], 1.0).unwrap();
        assert!(loss.value.abs() < 1e-15);
        // Errors.
        assert!(silog_loss(&[0.0], &[1.0], &[true], 0.5).is_err());
        assert!(silog_loss(&[1.0], &[1.0], &[false], 0.5).is_err());
        assert!(silog_loss(&[1.0], &[1.0], &[true], 1.5).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let t: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..5.0)).collect();
        let s: Vec<f64> = (0..6).map(|_| rng.gen_range(0.5..5.0)).collect();
        let valid = vec![true, true, true, false, true, true];
        let loss = silog_loss(&t, &s, &valid, 0.5).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = s.clone();
            plus[i] += h;
            let mut minus = s.clone();
            minus[i] -= h;
            let fd = (silog_loss(&t, &plus, &valid, 0.5).unwrap().value
                - silog_loss(&t, &minus, &valid, 0.5).unwrap().value)
                / (2.0 * h);
            let a = loss.d_student_depth[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-5, "pixel {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn rsc_zero_at_match_and_fd() {
        let seg = grid_tiles(4, 2, 2).unwrap();
        let n = 8;
        let c = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let teacher: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let matched = rsc_loss(&teacher, &teacher.clone(), c, &seg, None, 1.0).unwrap();
        assert!(matched.value.abs() < 1e-12);
        assert!(matched.d_student_semantics.iter().all(|&g| g == 0.0));
        assert_eq!(matched.segments_used, 2);

        let student: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mask = vec![true, true, false, true, true, true, true, false];
        let loss = rsc_loss(&teacher, &student, c, &seg, Some(&mask), 0.7).unwrap();
        assert_relative_eq!(loss.value, loss.sad + 0.7 * loss.kl, epsilon = 1e-12);
        let h = 1e-6;
        for i in 0..n * c {
            let mut plus = student.clone();
            plus[i] += h;
            let mut minus = student.clone();
            minus[i] -= h;
            let fd = (rsc_loss(&teacher, &plus, c, &seg, Some(&mask), 0.7).unwrap().value
                - rsc_loss(&teacher, &minus, c, &seg, Some(&mask), 0.7).unwrap().value)
                / (2.0 * h);
            let a = loss.d_student_semantics[i];
            let denom = a.abs().max(fd.abs()).max(1e-6);
            assert!(((a - fd) / denom).abs() < 1e-5, "entry {i}: {a} vs {fd}");
        }
    }

    #[test]
    fn rsc_drops_degenerate_segments_consistently() {
        // Segment 1's pixels are all-zero on the teacher side, so it leaves
        // the affinity term, but the pixel KL still sees those pixels.
        let seg = grid_tiles(4, 1, 2).unwrap();
        let teacher = vec![1.0, 0.5, 2.0, 0.1, 0.0, 0.0, 0.0, 0.0];
        let student = vec![0.9, 0.6, 1.8, 0.2, 0.3, -0.4, 0.2, 0.1];
        let loss = rsc_loss(&teacher, &student, 2, &seg, None, 1.0).unwrap();
        assert_eq!(loss.segments_used, 1);
        assert!(loss.value.is_finite());
    }

    /// Builds a small rendered teacher/student pair for total_loss tests.
    fn tiny_views(
        seed: u64,
    ) -> (VoxelGrid, VoxelGrid, Camera, RenderConfig, Vec<usize>, SegmentMap) {
        let spec = GridSpec::new([4, 4, 3], [-1.0, -1.0, -0.75], 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.num_voxels();
        let c = 3;
        let mk = |rng: &mut ChaCha8Rng| {
            let density: Vec<f64> = (0..n).map(|_| rng.gen_range(0.2..2.5)).collect();
            let sems: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            VoxelGrid::new(spec, c, density, sems).unwrap()
        };
        let teacher = mk(&mut rng);
        let student = mk(&mut rng);
        let camera = Camera::look_at(
            Vector3::new(0.1, -2.8, 0.3),
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            6.0,
            6.0,
            3.5,
            2.5,
            8,
            6,
        )
        .unwrap();
        let cfg = RenderConfig {
            sampling: crate::camera::SamplingConfig { step_size: 0.25, max_samples: 48, near: 0.0 },
            ..RenderConfig::default()
        };
        let selection: Vec<usize> = (0..48).step_by(2).collect();
        let segments = grid_tiles(8, 6, 3).unwrap();
        (teacher, student, camera, cfg, selection, segments)
    }

    #[test]
    fn total_loss_gates_components_by_mode() {
        let (teacher, student, camera, cfg, selection, segments) = tiny_views(31);
        let (t_view, t_rays) = render_view(&teacher, &camera, &cfg, Some(&selection)).unwrap();
        let (s_view, s_rays) = render_view(&student, &camera, &cfg, Some(&selection)).unwrap();
        let view = ViewPair {
            selection: &selection,
            teacher_view: &t_view,
            teacher_rays: &t_rays,
            student_view: &s_view,
            student_rays: &s_rays,
            segments: &segments,
        };
        let w = DistillationWeights::default();

        let all = total_loss(std::slice::from_ref(&view), DistillMode::RdcRsc, &w).unwrap();
        let r = all.report;
        assert!(r.rdc > 0.0 && r.sad > 0.0 && r.kl > 0.0 && r.silog > 0.0);
        assert_eq!(r.rays_used, selection.len());
        assert!(r.segments_used > 0);
        assert_relative_eq!(
            r.total,
            100.0 * r.rdc + 10.0 * r.sad + 10.0 * r.kl,
            epsilon = 1e-9
        );
        // All gradient channels are live.
        assert!(all.upstream[0].iter().any(|u| u.d_weights.is_some()));
        assert!(all.upstream[0].iter().any(|u| u.d_semantics.iter().any(|&d| d != 0.0)));

        let rdc_only = total_loss(std::slice::from_ref(&view), DistillMode::Rdc, &w).unwrap();
        assert_relative_eq!(rdc_only.report.total, 100.0 * r.rdc, epsilon = 1e-9);
        assert!(rdc_only.upstream[0].iter().all(|u| u.d_semantics.is_empty()));
        assert!(rdc_only.upstream[0].iter().all(|u| u.d_depth == 0.0));

        let sad_only = total_loss(std::slice::from_ref(&view), DistillMode::Sad, &w).unwrap();
        assert_relative_eq!(sad_only.report.total, 10.0 * r.sad, epsilon = 1e-9);
        assert!(sad_only.upstream[0].iter().all(|u| u.d_weights.is_none()));

        let rsc = total_loss(std::slice::from_ref(&view), DistillMode::Rsc, &w).unwrap();
        assert_relative_eq!(rsc.report.total, 10.0 * r.sad + 10.0 * r.kl, epsilon = 1e-9);

        let baseline = total_loss(std::slice::from_ref(&view), DistillMode::RdcMinus, &w).unwrap();
        assert_relative_eq!(baseline.report.total, 100.0 * r.silog, epsilon = 1e-9);
        assert!(baseline.upstream[0].iter().any(|u| u.d_depth != 0.0));
        assert!(baseline.upstream[0].iter().all(|u| u.d_weights.is_none()));

        // Identical teacher and student zero every component.
        let same = ViewPair {
            selection: &selection,
            teacher_view: &t_view,
            teacher_rays: &t_rays,
            student_view: &t_view,
            student_rays: &t_rays,
            segments: &segments,
        };
        let zero = total_loss(std::slice::from_ref(&same), DistillMode::RdcRsc, &w).unwrap();
        assert!(zero.report.total.abs() < 1e-10);
        for u in &zero.upstream[0] {
            assert!(u.d_weights.as_ref().unwrap().iter().all(|&g| g == 0.0));
            assert!(u.d_semantics.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn total_loss_validates_view_consistency() {
        let (teacher, student, camera, cfg, selection, segments) = tiny_views(37);
        let (t_view, t_rays) = render_view(&teacher, &camera, &cfg, Some(&selection)).unwrap();
        let (s_view, s_rays) = render_view(&student, &camera, &cfg, Some(&selection)).unwrap();
        let w = DistillationWeights::default();
        // Segment map of the wrong size.
        let bad_seg = grid_tiles(4, 4, 2).unwrap();
        let view = ViewPair {
            selection: &selection,
            teacher_view: &t_view,
            teacher_rays: &t_rays,
            student_view: &s_view,
            student_rays: &s_rays,
            segments: &bad_seg,
        };
        assert!(total_loss(std::slice::from_ref(&view), DistillMode::Rdc, &w).is_err());
        // Ray array shorter than the selection.
        let view = ViewPair {
            selection: &selection,
            teacher_view: &t_view,
            teacher_rays: &t_rays[1..],
            student_view: &s_view,
            student_rays: &s_rays,
            segments: &segments,
        };
        assert!(total_loss(std::slice::from_ref(&view), DistillMode::Rdc, &w).is_err());
        assert!(total_loss(&[], DistillMode::Rdc, &w).is_err());
    }
}
