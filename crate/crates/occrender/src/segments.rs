//! Image segmentation for segment-guided pooling: SLIC-style super-pixels,
//! regular tile fallbacks, per-segment average pooling, and persistence as
//! 16-bit PGM label images.

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::imageio::{load_pgm, save_pgm, GrayImage};

/// A dense segmentation of an image: every pixel carries a segment id in
/// `0..num_segments`, and every id occurs at least once. Ids are ordered by
/// first appearance in row-major scan order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentMap {
    width: usize,
    height: usize,
    num_segments: usize,
    labels: Vec<u32>,
}

impl SegmentMap {
    /// Validates a label image: compact ids (`0..M` all present), one label
    /// per pixel.
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        ensure!(width >= 1 && height >= 1, "segment map must be at least 1x1");
        ensure!(
            labels.len() == width * height,
            "label buffer has {} entries, expected {}",
            labels.len(),
            width * height
        );
        let max = *labels.iter().max().unwrap() as usize;
        let num_segments = max + 1;
        let mut seen = vec![false; num_segments];
        for &l in &labels {
            seen[l as usize] = true;
        }
        ensure!(
            seen.iter().all(|&s| s),
            "segment ids are not compact: some id in 0..{num_segments} is unused"
        );
        Ok(SegmentMap { width, height, num_segments, labels })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_segments(&self) -> usize {
        self.num_segments
    }

    /// Row-major per-pixel segment ids.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// Number of pixels in each segment.
    pub fn segment_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_segments];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }
}

/// True when every segment forms a single 4-connected region.
pub fn segments_connected(map: &SegmentMap) -> bool {
    let (w, h) = (map.width, map.height);
    let mut seen_component = vec![false; map.num_segments];
    let mut visited = vec![false; w * h];
    let mut stack = Vec::new();
    for start in 0..w * h {
        if visited[start] {
            continue;
        }
        let id = map.labels[start] as usize;
        if seen_component[id] {
            return false; // second component with the same id
        }
        seen_component[id] = true;
        visited[start] = true;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (u, v) = (p / w, p % w);
            let mut push = |q: usize| {
                if !visited[q] && map.labels[q] == id as u32 {
                    visited[q] = true;
                    stack.push(q);
                }
            };
            if u > 0 {
                push(p - w);
            }
            if u + 1 < h {
                push(p + w);
            }
            if v > 0 {
                push(p - 1);
            }
            if v + 1 < w {
                push(p + 1);
            }
        }
    }
    true
}

/// Per-segment means of a multi-channel pixel map, restricted to a pixel
/// mask when given. Segments with no (masked) pixel are dropped.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSegments {
    /// Kept segment ids, ascending.
    pub segment_ids: Vec<u32>,
    /// Pooled rows, `segment_ids.len() * channels`, aligned with `segment_ids`.
    pub rows: Vec<f64>,
    /// Number of contributing pixels per kept row.
    pub counts: Vec<usize>,
    /// Maps a segment id to its row index, `None` for dropped segments.
    pub row_of_segment: Vec<Option<usize>>,
    pub channels: usize,
}

/// Averages `values` (row-major pixels, channel innermost) over each segment.
/// With a mask, only masked pixels contribute and empty segments are dropped.
pub fn pool_segments(
    map: &SegmentMap,
    values: &[f64],
    channels: usize,
    mask: Option<&[bool]>,
) -> Result<PooledSegments> {
    ensure!(channels >= 1, "channels must be >= 1");
    let n = map.width * map.height;
    ensure!(
        values.len() == n * channels,
        "value buffer has {} entries, expected {} pixels x {channels} channels",
        values.len(),
        n
    );
    if let Some(m) = mask {
        ensure!(m.len() == n, "mask has {} entries, expected {n}", m.len());
    }
    let m = map.num_segments;
    let mut sums = vec![0.0f64; m * channels];
    let mut counts = vec![0usize; m];
    for p in 0..n {
        if let Some(mask) = mask {
            if !mask[p] {
                continue;
            }
        }
        let s = map.labels[p] as usize;
        counts[s] += 1;
        for c in 0..channels {
            sums[s * channels + c] += values[p * channels + c];
        }
    }
    let mut segment_ids = Vec::new();
    let mut rows = Vec::new();
    let mut kept_counts = Vec::new();
    let mut row_of_segment = vec![None; m];
    for s in 0..m {
        if counts[s] == 0 {
            continue;
        }
        row_of_segment[s] = Some(segment_ids.len());
        segment_ids.push(s as u32);
        kept_counts.push(counts[s]);
        for c in 0..channels {
            rows.push(sums[s * channels + c] / counts[s] as f64);
        }
    }
    ensure!(!segment_ids.is_empty(), "the mask excludes every pixel");
    Ok(PooledSegments { segment_ids, rows, counts: kept_counts, row_of_segment, channels })
}

/// Regular tiling fallback: `tile` x `tile` blocks (clipped at the image
/// edge), ids row-major over blocks.
pub fn grid_tiles(width: usize, height: usize, tile: usize) -> Result<SegmentMap> {
    ensure!(width >= 1 && height >= 1, "image must be at least 1x1");
    ensure!(tile >= 1, "tile size must be >= 1");
    let tiles_x = width.div_ceil(tile);
    let mut labels = Vec::with_capacity(width * height);
    for u in 0..height {
        for v in 0..width {
            labels.push(((u / tile) * tiles_x + v / tile) as u32);
        }
    }
    SegmentMap::new(width, height, labels)
}

/// SLIC super-pixels over a multi-channel feature image.
///
/// Cluster centers start on a regular grid with spacing `S = sqrt(W*H/k)`
/// and are refined for `iterations` rounds: each center claims pixels within
/// a 2S x 2S window under the distance
/// `D^2 = d_feature^2 + (compactness * d_spatial / S)^2`, then moves to the
/// mean of its members. A final scan merges fragments smaller than a quarter
/// of the nominal cell into their preceding neighbor, which also guarantees
/// 4-connectivity and compact ids. The algorithm is deterministic; `_seed`
/// is accepted for interface stability but unused.
pub fn slic(
    features: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    k: usize,
    compactness: f64,
    iterations: usize,
    _seed: u64,
) -> Result<SegmentMap> {
    ensure!(width >= 1 && height >= 1, "image must be at least 1x1");
    ensure!(channels >= 1, "channels must be >= 1");
    ensure!(
        features.len() == width * height * channels,
        "feature buffer has {} entries, expected {}",
        features.len(),
        width * height * channels
    );
    ensure!(features.iter().all(|f| f.is_finite()), "features must be finite");
    let n = width * height;
    ensure!(k >= 1 && k <= n, "segment count k must lie in 1..={n}, got {k}");
    ensure!(
        compactness.is_finite() && compactness > 0.0,
        "compactness must be positive, got {compactness}"
    );
    ensure!(iterations >= 1, "iterations must be >= 1");

    let s = ((n as f64) / k as f64).sqrt();
    let nx = ((width as f64 / s).round() as usize).max(1);
    let ny = ((height as f64 / s).round() as usize).max(1);
    let num_centers = nx * ny;

    // Center state: (row, col, features...).
    let mut center_pos = Vec::with_capacity(num_centers);
    let mut center_feat = vec![0.0f64; num_centers * channels];
    for i in 0..ny {
        for j in 0..nx {
            let cu = (i as f64 + 0.5) * height as f64 / ny as f64;
            let cv = (j as f64 + 0.5) * width as f64 / nx as f64;
            let pu = (cu.floor() as usize).min(height - 1);
            let pv = (cv.floor() as usize).min(width - 1);
            let idx = center_pos.len();
            center_pos.push((cu, cv));
            center_feat[idx * channels..(idx + 1) * channels]
                .copy_from_slice(&features[(pu * width + pv) * channels..][..channels]);
        }
    }

    // Initial assignment: the grid cell a pixel falls into.
    let mut labels: Vec<u32> = (0..n)
        .map(|p| {
            let (u, v) = (p / width, p % width);
            let i = (u * ny / height).min(ny - 1);
            let j = (v * nx / width).min(nx - 1);
            (i * nx + j) as u32
        })
        .collect();

    let window = (2.0 * s).ceil() as isize;
    let spatial_scale = compactness / s;
    let mut best = vec![f64::INFINITY; n];
    for _ in 0..iterations {
        best.fill(f64::INFINITY);
        for (ci, &(cu, cv)) in center_pos.iter().enumerate() {
            let cf = &center_feat[ci * channels..(ci + 1) * channels];
            let u0 = ((cu as isize) - window).max(0) as usize;
            let u1 = (((cu as isize) + window) as usize).min(height - 1);
            let v0 = ((cv as isize) - window).max(0) as usize;
            let v1 = (((cv as isize) + window) as usize).min(width - 1);
            for u in u0..=u1 {
                for v in v0..=v1 {
                    let p = u * width + v;
                    let mut d_feat = 0.0;
                    for (c, f) in cf.iter().enumerate() {
                        let diff = features[p * channels + c] - f;
                        d_feat += diff * diff;
                    }
                    let du = u as f64 - cu;
                    let dv = v as f64 - cv;
                    let d_sp = (du * du + dv * dv) * spatial_scale * spatial_scale;
                    let d = d_feat + d_sp;
                    if d < best[p] {
                        best[p] = d;
                        labels[p] = ci as u32;
                    }
                }
            }
        }
        // Move centers to the mean of their members.
        let mut pos_sum = vec![(0.0f64, 0.0f64); num_centers];
        let mut feat_sum = vec![0.0f64; num_centers * channels];
        let mut count = vec![0usize; num_centers];
        for p in 0..n {
            let ci = labels[p] as usize;
            count[ci] += 1;
            pos_sum[ci].0 += (p / width) as f64;
            pos_sum[ci].1 += (p % width) as f64;
            for c in 0..channels {
                feat_sum[ci * channels + c] += features[p * channels + c];
            }
        }
        for ci in 0..num_centers {
            if count[ci] == 0 {
                continue; // empty cluster keeps its previous center
            }
            let inv = 1.0 / count[ci] as f64;
            center_pos[ci] = (pos_sum[ci].0 * inv, pos_sum[ci].1 * inv);
            for c in 0..channels {
                center_feat[ci * channels + c] = feat_sum[ci * channels + c] * inv;
            }
        }
    }

    // Connectivity pass: renumber 4-connected regions in scan order, merging
    // fragments below min_size into the preceding neighbor region. Repeat
    // with a larger threshold in the unlikely case the segment count still
    // exceeds 2k.
    let mut min_size = (n / num_centers / 4).max(1);
    loop {
        let merged = enforce_connectivity(&labels, width, height, min_size);
        let map = SegmentMap::new(width, height, merged)?;
        if map.num_segments() <= 2 * k {
            return Ok(map);
        }
        min_size *= 2;
    }
}

/// Rebuilds labels so each output segment is one 4-connected region with at
/// least `min_size` pixels (except possibly the first), with compact ids in
/// first-appearance order.
fn enforce_connectivity(labels: &[u32], width: usize, height: usize, min_size: usize) -> Vec<u32> {
    let n = width * height;
    const UNSET: u32 = u32::MAX;
    let mut out = vec![UNSET; n];
    let mut next_id = 0u32;
    let mut region = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if out[start] != UNSET {
            continue;
        }
        // The most recently visited neighbor (left, then top) provides the
        // merge target for undersized regions.
        let (su, sv) = (start / width, start % width);
        let mut adjacent = None;
        if sv > 0 {
            adjacent = Some(out[start - 1]);
        } else if su > 0 {
            adjacent = Some(out[start - width]);
        }
        region.clear();
        stack.push(start);
        out[start] = next_id;
        while let Some(p) = stack.pop() {
            region.push(p);
            let (u, v) = (p / width, p % width);
            let mut visit = |q: usize| {
                if out[q] == UNSET && labels[q] == labels[start] {
                    out[q] = next_id;
                    stack.push(q);
                }
            };
            if u > 0 {
                visit(p - width);
            }
            if u + 1 < height {
                visit(p + width);
            }
            if v > 0 {
                visit(p - 1);
            }
            if v + 1 < width {
                visit(p + 1);
            }
        }
        match adjacent {
            Some(a) if region.len() < min_size => {
                for &p in &region {
                    out[p] = a;
                }
            }
            _ => next_id += 1,
        }
    }
    // Merging can leave gaps in the id sequence only when a region between
    // two kept ones was absorbed; compact by first appearance.
    let mut remap = vec![UNSET; next_id as usize];
    let mut compact_next = 0u32;
    for l in out.iter_mut() {
        let r = &mut remap[*l as usize];
        if *r == UNSET {
            *r = compact_next;
            compact_next += 1;
        }
        *l = *r;
    }
    out
}

/// Writes a segment map as a 16-bit binary PGM. The declared maxval is at
/// least 256 so samples are always two bytes wide.
pub fn save_segments(map: &SegmentMap, path: impl AsRef<Path>) -> Result<()> {
    ensure!(
        map.num_segments() <= u16::MAX as usize + 1,
        "{} segments exceed the 16-bit PGM range",
        map.num_segments()
    );
    let maxval = (map.num_segments() as u32 - 1).max(256) as u16;
    let img = GrayImage {
        width: map.width(),
        height: map.height(),
        maxval,
        pixels: map.labels().iter().map(|&l| l as u16).collect(),
    };
    save_pgm(&img, path)
}

/// Reads a segment map from a PGM label image (8- or 16-bit). Raw sample
/// values need not be compact; they are renumbered by first appearance.
pub fn load_segments(path: impl AsRef<Path>) -> Result<SegmentMap> {
    let path = path.as_ref();
    let img = load_pgm(path)?;
    let mut remap = vec![u32::MAX; img.maxval as usize + 1];
    let mut next = 0u32;
    let labels = img
        .pixels
        .iter()
        .map(|&p| {
            let slot = &mut remap[p as usize];
            if *slot == u32::MAX {
                *slot = next;
                next += 1;
            }
            *slot
        })
        .collect();
    SegmentMap::new(img.width, img.height, labels)
        .map_err(|e| Error::parse(path, e.to_string()))
}
