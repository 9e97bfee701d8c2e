//! Voxel-grid data model: a regular grid carrying per-voxel density and
//! per-class semantic logits, plus label grids, trilinear/nearest sampling,
//! mIoU evaluation, and a simple binary file format.
//!
//! Storage is x-major: voxel (ix, iy, iz) lives at `(ix * ny + iy) * nz + iz`,
//! and semantic channels are innermost (`voxel_index * num_classes + c`).
//! Field values are attached to voxel centers; trilinear interpolation is
//! therefore supported on the center lattice, which is inset half a voxel
//! from the grid's bounding box.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

/// Geometry of a regular voxel grid: integer dimensions, the world-space
/// position of the minimum corner, and the (cubic) voxel edge length in
/// meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub origin: [f64; 3],
    pub voxel_size: f64,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], origin: [f64; 3], voxel_size: f64) -> Result<Self> {
        ensure!(dims.iter().all(|&d| d >= 1), "grid dims must all be >= 1, got {dims:?}");
        ensure!(
            voxel_size.is_finite() && voxel_size > 0.0,
            "voxel_size must be a positive finite number, got {voxel_size}"
        );
        ensure!(origin.iter().all(|v| v.is_finite()), "grid origin must be finite, got {origin:?}");
        Ok(GridSpec { dims, origin, voxel_size })
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat storage index of voxel (ix, iy, iz). x-major, z innermost.
    #[inline]
    pub fn linear_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        debug_assert!(ix < self.dims[0] && iy < self.dims[1] && iz < self.dims[2]);
        (ix * self.dims[1] + iy) * self.dims[2] + iz
    }

    /// Inverse of [`linear_index`](Self::linear_index).
    #[inline]
    pub fn voxel_coords(&self, index: usize) -> [usize; 3] {
        let nz = self.dims[2];
        let ny = self.dims[1];
        [index / (ny * nz), (index / nz) % ny, index % nz]
    }

    /// World-space axis-aligned bounding box `(min, max)` of the full grid.
    pub fn aabb(&self) -> (Vector3<f64>, Vector3<f64>) {
        let min = Vector3::from(self.origin);
        let extent = Vector3::new(
            self.dims[0] as f64 * self.voxel_size,
            self.dims[1] as f64 * self.voxel_size,
            self.dims[2] as f64 * self.voxel_size,
        );
        (min, min + extent)
    }

    /// Continuous voxel coordinates of a world point. The center of voxel
    /// (i, j, k) maps to exactly (i, j, k); the grid AABB spans
    /// [-0.5, dims - 0.5] in these coordinates.
    pub fn world_to_grid(&self, p: Vector3<f64>) -> Vector3<f64> {
        (p - Vector3::from(self.origin)) / self.voxel_size - Vector3::repeat(0.5)
    }

    /// World-space center of voxel (ix, iy, iz).
    pub fn voxel_center(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        Vector3::from(self.origin)
            + Vector3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5) * self.voxel_size
    }
}

impl Default for GridSpec {
    /// An 80 m x 80 m x 6.4 m volume at 0.4 m resolution, centered on the
    /// x/y origin with z spanning -1 m to 5.4 m.
    fn default() -> Self {
        GridSpec { dims: [200, 200, 16], origin: [-40.0, -40.0, -1.0], voxel_size: 0.4 }
    }
}

/// Field interpolation scheme used when sampling between voxel centers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    /// Trilinear on the center lattice; zero outside it.
    Trilinear,
    /// Value of the nearest voxel center; covers the full grid AABB.
    Nearest,
}

/// Up to eight (voxel index, weight) pairs describing one interpolation
/// lookup. Weights are nonnegative and sum to 1; entries with weight zero
/// may repeat an index.
pub type CornerWeights = [(usize, f64); 8];

/// Trilinear corner decomposition of a world point, or `None` when the
/// point lies outside the center lattice (where fields read as zero).
pub fn trilinear_corners(spec: &GridSpec, p: Vector3<f64>) -> Option<CornerWeights> {
    let g = spec.world_to_grid(p);
    let mut base = [0usize; 3];
    let mut frac = [0.0f64; 3];
    for a in 0..3 {
        let c = g[a];
        let n = spec.dims[a];
        if !(0.0..=(n - 1) as f64).contains(&c) {
            return None;
        }
        // Clamp so the upper corner stays in range when c lands exactly on
        // the last center.
        let i0 = (c.floor() as usize).min(n.saturating_sub(2));
        base[a] = i0;
        frac[a] = c - i0 as f64;
    }
    let mut out = [(0usize, 0.0f64); 8];
    for (k, slot) in out.iter_mut().enumerate() {
        let mut idx = [0usize; 3];
        let mut w = 1.0;
        for a in 0..3 {
            let hi = (k >> a) & 1 == 1;
            idx[a] = base[a] + usize::from(hi && spec.dims[a] > 1);
            w *= if hi { frac[a] } else { 1.0 - frac[a] };
        }
        *slot = (spec.linear_index(idx[0], idx[1], idx[2]), w);
    }
    Some(out)
}

/// Index of the voxel whose center is nearest to `p`, or `None` when `p`
/// lies outside the grid AABB. Points inside the AABB but beyond the last
/// center clamp to the boundary voxel.
pub fn nearest_voxel(spec: &GridSpec, p: Vector3<f64>) -> Option<usize> {
    let rel = (p - Vector3::from(spec.origin)) / spec.voxel_size;
    let mut idx = [0usize; 3];
    for a in 0..3 {
        let n = spec.dims[a] as f64;
        if !(0.0..=n).contains(&rel[a]) {
            return None;
        }
        idx[a] = (rel[a].floor() as usize).min(spec.dims[a] - 1);
    }
    Some(spec.linear_index(idx[0], idx[1], idx[2]))
}

/// Dense voxel grid holding a nonnegative density field and per-class
/// semantic logits.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    spec: GridSpec,
    num_classes: usize,
    density: Vec<f64>,
    semantics: Vec<f64>,
}

impl VoxelGrid {
    /// Wraps raw field storage. `density` has one entry per voxel and must be
    /// nonnegative and finite; `semantics` has `num_voxels * num_classes`
    /// entries (class innermost) and must be finite.
    pub fn new(
        spec: GridSpec,
        num_classes: usize,
        density: Vec<f64>,
        semantics: Vec<f64>,
    ) -> Result<Self> {
        ensure!(num_classes >= 1, "num_classes must be >= 1, got {num_classes}");
        let n = spec.num_voxels();
        ensure!(
            density.len() == n,
            "density has {} entries but the grid has {} voxels",
            density.len(),
            n
        );
        ensure!(
            semantics.len() == n * num_classes,
            "semantics has {} entries, expected {} ({} voxels x {} classes)",
            semantics.len(),
            n * num_classes,
            n,
            num_classes
        );
        ensure!(
            density.iter().all(|v| v.is_finite() && *v >= 0.0),
            "density must be finite and nonnegative"
        );
        ensure!(semantics.iter().all(|v| v.is_finite()), "semantics must be finite");
        Ok(VoxelGrid { spec, num_classes, density, semantics })
    }

    /// All-zero fields: fully transparent space.
    pub fn zeros(spec: GridSpec, num_classes: usize) -> Result<Self> {
        let n = spec.num_voxels();
        VoxelGrid::new(spec, num_classes, vec![0.0; n], vec![0.0; n * num_classes])
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn semantics(&self) -> &[f64] {
        &self.semantics
    }

    /// Semantic logits of one voxel.
    pub fn voxel_semantics(&self, index: usize) -> &[f64] {
        &self.semantics[index * self.num_classes..(index + 1) * self.num_classes]
    }

    /// Samples density and semantics at a world point, writing the class
    /// vector into `sem_out` (length `num_classes`) and returning density.
    /// Outside the interpolation support both read as zero.
    pub fn sample_into(
        &self,
        p: Vector3<f64>,
        interpolation: Interpolation,
        sem_out: &mut [f64],
    ) -> f64 {
        debug_assert_eq!(sem_out.len(), self.num_classes);
        sem_out.fill(0.0);
        match interpolation {
            Interpolation::Trilinear => {
                let Some(corners) = trilinear_corners(&self.spec, p) else { return 0.0 };
                let mut sigma = 0.0;
                for (idx, w) in corners {
                    if w == 0.0 {
                        continue;
                    }
                    sigma += w * self.density[idx];
                    let sem = self.voxel_semantics(idx);
                    for (o, s) in sem_out.iter_mut().zip(sem) {
                        *o += w * s;
                    }
                }
                sigma
            }
            Interpolation::Nearest => {
                let Some(idx) = nearest_voxel(&self.spec, p) else { return 0.0 };
                sem_out.copy_from_slice(self.voxel_semantics(idx));
                self.density[idx]
            }
        }
    }

    /// Allocating convenience wrapper around [`sample_into`](Self::sample_into).
    pub fn sample(&self, p: Vector3<f64>, interpolation: Interpolation) -> (f64, Vec<f64>) {
        let mut sem = vec![0.0; self.num_classes];
        let sigma = self.sample_into(p, interpolation, &mut sem);
        (sigma, sem)
    }
}

/// Discrete per-voxel labels: class ids in `0..num_classes` plus the
/// reserved free-space label `num_classes`. Ground-truth grids may carry an
/// evaluation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelGrid {
    spec: GridSpec,
    num_classes: usize,
    labels: Vec<u16>,
    mask: Option<Vec<bool>>,
}

impl SemanticLabelGrid {
    pub fn new(
        spec: GridSpec,
        num_classes: usize,
        labels: Vec<u16>,
        mask: Option<Vec<bool>>,
    ) -> Result<Self> {
        ensure!(num_classes >= 1, "num_classes must be >= 1, got {num_classes}");
        ensure!(
            num_classes <= u16::MAX as usize,
            "num_classes {num_classes} exceeds the label storage range"
        );
        let n = spec.num_voxels();
        ensure!(labels.len() == n, "labels has {} entries, expected {}", labels.len(), n);
        ensure!(
            labels.iter().all(|&l| (l as usize) <= num_classes),
            "labels must lie in 0..={num_classes} (free space = {num_classes})"
        );
        if let Some(m) = &mask {
            ensure!(m.len() == n, "mask has {} entries, expected {}", m.len(), n);
        }
        Ok(SemanticLabelGrid { spec, num_classes, labels, mask })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// The reserved free-space label.
    pub fn free_label(&self) -> u16 {
        self.num_classes as u16
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn mask(&self) -> Option<&[bool]> {
        self.mask.as_deref()
    }
}

/// Hardens a continuous grid into labels: voxels with density at or above
/// `threshold` take their argmax class (ties break to the lowest id), the
/// rest become free space.
pub fn argmax_labels(grid: &VoxelGrid, threshold: f64) -> Result<SemanticLabelGrid> {
    ensure!(
        threshold.is_finite() && threshold >= 0.0,
        "threshold must be finite and nonnegative, got {threshold}"
    );
    let c = grid.num_classes();
    let free = c as u16;
    let labels = grid
        .density()
        .iter()
        .enumerate()
        .map(|(i, &sigma)| {
            if sigma >= threshold {
                let sem = grid.voxel_semantics(i);
                let mut best = 0usize;
                for (k, &v) in sem.iter().enumerate().skip(1) {
                    if v > sem[best] {
                        best = k;
                    }
                }
                best as u16
            } else {
                free
            }
        })
        .collect();
    SemanticLabelGrid::new(*grid.spec(), c, labels, None)
}

/// Per-class intersection-over-union plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    /// IoU per class id (free space last). Classes absent from both
    /// prediction and ground truth hold NaN and do not enter the mean.
    pub per_class: Vec<f64>,
    pub miou: f64,
}

/// Computes mean IoU of `pred` against `gt` over voxels (restricted to the
/// ground-truth mask when `use_mask` is set). The free-space label counts as
/// an ordinary class.
pub fn miou(pred: &SemanticLabelGrid, gt: &SemanticLabelGrid, use_mask: bool) -> Result<MiouReport> {
    ensure!(
        pred.spec() == gt.spec(),
        "prediction and ground truth grids differ in geometry: {:?} vs {:?}",
        pred.spec(),
        gt.spec()
    );
    ensure!(
        pred.num_classes() == gt.num_classes(),
        "prediction has {} classes, ground truth has {}",
        pred.num_classes(),
        gt.num_classes()
    );
    let mask = if use_mask {
        Some(gt.mask().ok_or_else(|| {
            Error::invalid("mask evaluation requested but the ground truth grid has no mask")
        })?)
    } else {
        None
    };

    let num_ids = pred.num_classes() + 1;
    let mut inter = vec![0u64; num_ids];
    let mut pred_count = vec![0u64; num_ids];
    let mut gt_count = vec![0u64; num_ids];
    let mut counted = 0u64;
    for i in 0..pred.labels().len() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        counted += 1;
        let p = pred.labels()[i] as usize;
        let g = gt.labels()[i] as usize;
        pred_count[p] += 1;
        gt_count[g] += 1;
        if p == g {
            inter[p] += 1;
        }
    }
    ensure!(counted > 0, "the evaluation mask excludes every voxel");

    let mut per_class = vec![f64::NAN; num_ids];
    let mut sum = 0.0;
    let mut present = 0usize;
    for k in 0..num_ids {
        let union = pred_count[k] + gt_count[k] - inter[k];
        if union == 0 {
            continue;
        }
        let iou = inter[k] as f64 / union as f64;
        per_class[k] = iou;
        sum += iou;
        present += 1;
    }
    // counted > 0 guarantees at least one class is present.
    Ok(MiouReport { per_class, miou: sum / present as f64 })
}

#[derive(Serialize, Deserialize)]
struct VxgHeader {
    dims: [usize; 3],
    origin: [f64; 3],
    voxel_size: f64,
    num_classes: usize,
    fields: Vec<String>,
}

/// Contents of a `.vxg` file: either continuous fields or discrete labels.
#[derive(Debug, Clone, PartialEq)]
pub enum VxgContent {
    Grid(VoxelGrid),
    Labels(SemanticLabelGrid),
}

fn write_vxg(path: &Path, header: &VxgHeader, payloads: &[&[f64]]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut head = serde_json::to_vec(header)
        .map_err(|e| Error::parse(path, format!("header encode failed: {e}")))?;
    head.push(b'\n');
    w.write_all(&head).map_err(|e| Error::io(path, e))?;
    for payload in payloads {
        for &v in *payload {
            w.write_all(&(v as f32).to_le_bytes()).map_err(|e| Error::io(path, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_vxg(path: &Path) -> Result<(VxgHeader, Vec<Vec<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut head = Vec::new();
    loop {
        let mut byte = [0u8; 1];
        let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(path, "missing newline after header"));
        }
        if byte[0] == b'\n' {
            break;
        }
        head.push(byte[0]);
        if head.len() > 1 << 20 {
            return Err(Error::parse(path, "header exceeds 1 MiB"));
        }
    }
    let header: VxgHeader = serde_json::from_slice(&head)
        .map_err(|e| Error::parse(path, format!("bad header: {e}")))?;
    let spec = GridSpec::new(header.dims, header.origin, header.voxel_size)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    if header.num_classes == 0 {
        return Err(Error::parse(path, "num_classes must be >= 1"));
    }
    let n = spec.num_voxels();
    let mut payloads = Vec::with_capacity(header.fields.len());
    for field in &header.fields {
        let len = match field.as_str() {
            "semantics" => n * header.num_classes,
            "density" | "labels" | "mask" => n,
            other => return Err(Error::parse(path, format!("unknown field {other:?}"))),
        };
        let mut bytes = vec![0u8; len * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::parse(path, format!("truncated field {field:?}: {e}")))?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        payloads.push(values);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::parse(path, "trailing bytes after final field"));
    }
    Ok((header, payloads))
}

/// Writes a continuous grid (fields `density`, `semantics`) to `path`.
pub fn save_voxel_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let header = VxgHeader {
        dims: grid.spec().dims,
        origin: grid.spec().origin,
        voxel_size: grid.spec().voxel_size,
        num_classes: grid.num_classes(),
        fields: vec!["density".into(), "semantics".into()],
    };
    write_vxg(path.as_ref(), &header, &[grid.density(), grid.semantics()])
}

/// Writes a label grid (field `labels`, plus `mask` when present) to `path`.
pub fn save_label_grid(grid: &SemanticLabelGrid, path: impl AsRef<Path>) -> Result<()> {
    let labels: Vec<f64> = grid.labels().iter().map(|&l| l as f64).collect();
    let mut fields = vec!["labels".to_string()];
    let mut payloads: Vec<Vec<f64>> = vec![labels];
    if let Some(mask) = grid.mask() {
        fields.push("mask".into());
        payloads.push(mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect());
    }
    let header = VxgHeader {
        dims: grid.spec().dims,
        origin: grid.spec().origin,
        voxel_size: grid.spec().voxel_size,
        num_classes: grid.num_classes(),
        fields,
    };
    let refs: Vec<&[f64]> = payloads.iter().map(|p| p.as_slice()).collect();
    write_vxg(path.as_ref(), &header, &refs)
}

/// Loads a `.vxg` file, dispatching on its field list.
pub fn load_vxg(path: impl AsRef<Path>) -> Result<VxgContent> {
    let path = path.as_ref();
    let (header, mut payloads) = read_vxg(path)?;
    let spec = GridSpec::new(header.dims, header.origin, header.voxel_size)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let fields: Vec<&str> = header.fields.iter().map(|s| s.as_str()).collect();
    match fields.as_slice() {
        ["density", "semantics"] => {
            let semantics = payloads.pop().unwrap();
            let density = payloads.pop().unwrap();
            let grid = VoxelGrid::new(spec, header.num_classes, density, semantics)
                .map_err(|e| Error::parse(path, e.to_string()))?;
            Ok(VxgContent::Grid(grid))
        }
        ["labels"] | ["labels", "mask"] => {
            let mask = if fields.len() == 2 {
                Some(payloads.pop().unwrap().into_iter().map(|v| v != 0.0).collect())
            } else {
                None
            };
            let labels = payloads
                .pop()
                .unwrap()
                .into_iter()
                .map(|v| {
                    let l = v.round();
                    if !(0.0..=header.num_classes as f64).contains(&l) {
                        Err(Error::parse(path, format!("label {v} out of range")))
                    } else {
                        Ok(l as u16)
                    }
                })
                .collect::<Result<Vec<u16>>>()?;
            let grid = SemanticLabelGrid::new(spec, header.num_classes, labels, mask)
                .map_err(|e| Error::parse(path, e.to_string()))?;
            Ok(VxgContent::Labels(grid))
        }
        other => Err(Error::parse(path, format!("unsupported field list {other:?}"))),
    }
}

/// Loads a `.vxg` that must contain continuous fields.
pub fn load_voxel_grid(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    match load_vxg(&path)? {
        VxgContent::Grid(g) => Ok(g),
        VxgContent::Labels(_) => Err(Error::parse(
            path.as_ref(),
            "expected a density/semantics grid but the file holds labels",
        )),
    }
}

/// Loads a `.vxg` that must contain labels.
pub fn load_label_grid(path: impl AsRef<Path>) -> Result<SemanticLabelGrid> {
    match load_vxg(&path)? {
        VxgContent::Labels(g) => Ok(g),
        VxgContent::Grid(_) => Err(Error::parse(
            path.as_ref(),
            "expected a label grid but the file holds density/semantics",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spec222() -> GridSpec {
        GridSpec::new([2, 2, 2], [0.0, 0.0, 0.0], 1.0).unwrap()
    }

    #[test]
    fn linear_index_is_x_major() {
        let spec = GridSpec::new([3, 4, 5], [0.0; 3], 1.0).unwrap();
        assert_eq!(spec.linear_index(0, 0, 0), 0);
        assert_eq!(spec.linear_index(0, 0, 1), 1);
        assert_eq!(spec.linear_index(0, 1, 0), 5);
        assert_eq!(spec.linear_index(1, 0, 0), 20);
        assert_eq!(spec.linear_index(2, 3, 4), 59);
        for i in 0..spec.num_voxels() {
            let [x, y, z] = spec.voxel_coords(i);
            assert_eq!(spec.linear_index(x, y, z), i);
        }
    }

    #[test]
    fn world_to_grid_centers() {
        let spec = GridSpec::new([4, 4, 4], [1.0, 2.0, 3.0], 0.5).unwrap();
        let g = spec.world_to_grid(spec.voxel_center(2, 0, 3));
        assert_relative_eq!(g.x, 2.0, max_relative = 1e-12);
        assert_relative_eq!(g.y, 0.0, max_relative = 1e-12);
        assert_relative_eq!(g.z, 3.0, max_relative = 1e-12);
    }

    /// Two-voxel grid along x with densities 2 and 4: the midpoint of the
    /// two centers must read exactly 3.
    #[test]
    fn trilinear_midpoint() {
        let spec = GridSpec::new([2, 1, 1], [0.0; 3], 1.0).unwrap();
        let density = vec![2.0, 4.0];
        let semantics = vec![1.0, 0.0, 0.0, 1.0];
        let grid = VoxelGrid::new(spec, 2, density, semantics).unwrap();
        let p = Vector3::new(1.0, 0.5, 0.5);
        let (sigma, sem) = grid.sample(p, Interpolation::Trilinear);
        assert_relative_eq!(sigma, 3.0, max_relative = 1e-12);
        assert_relative_eq!(sem[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(sem[1], 0.5, max_relative = 1e-12);
    }

    #[test]
    fn trilinear_outside_support_is_zero() {
        let grid = VoxelGrid::new(
            spec222(),
            1,
            vec![5.0; 8],
            vec![1.0; 8],
        )
        .unwrap();
        // Inside the AABB but outside the center lattice.
        let (sigma, sem) = grid.sample(Vector3::new(0.25, 0.25, 0.25), Interpolation::Trilinear);
        assert_eq!(sigma, 0.0);
        assert_eq!(sem[0], 0.0);
        // Same point under nearest interpolation reads voxel (0,0,0).
        let (sigma, _) = grid.sample(Vector3::new(0.25, 0.25, 0.25), Interpolation::Nearest);
        assert_eq!(sigma, 5.0);
        // Outside the AABB both read zero.
        let (sigma, _) = grid.sample(Vector3::new(-0.01, 1.0, 1.0), Interpolation::Nearest);
        assert_eq!(sigma, 0.0);
    }

    #[test]
    fn trilinear_exact_at_centers_and_lattice_edge() {
        let spec = GridSpec::new([3, 2, 2], [-1.0, 0.5, 2.0], 0.25).unwrap();
        let n = spec.num_voxels();
        let density: Vec<f64> = (0..n).map(|i| (i * 7 % 13) as f64 + 0.5).collect();
        let semantics: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let grid = VoxelGrid::new(spec, 1, density.clone(), semantics).unwrap();
        for ix in 0..3 {
            for iy in 0..2 {
                for iz in 0..2 {
                    let (sigma, _) =
                        grid.sample(spec.voxel_center(ix, iy, iz), Interpolation::Trilinear);
                    let want = density[spec.linear_index(ix, iy, iz)];
                    assert_relative_eq!(sigma, want, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_voxel_axis_supports_only_its_center_plane() {
        let spec = GridSpec::new([1, 1, 1], [0.0; 3], 2.0).unwrap();
        let grid = VoxelGrid::new(spec, 1, vec![7.0], vec![0.0]).unwrap();
        let (sigma, _) = grid.sample(Vector3::new(1.0, 1.0, 1.0), Interpolation::Trilinear);
        assert_eq!(sigma, 7.0);
        let (sigma, _) = grid.sample(Vector3::new(1.2, 1.0, 1.0), Interpolation::Trilinear);
        assert_eq!(sigma, 0.0);
        let (sigma, _) = grid.sample(Vector3::new(1.2, 1.0, 1.0), Interpolation::Nearest);
        assert_eq!(sigma, 7.0);
    }

    #[test]
    fn argmax_ties_break_low_and_threshold_applies() {
        let spec = GridSpec::new([2, 1, 1], [0.0; 3], 1.0).unwrap();
        let grid = VoxelGrid::new(spec, 3, vec![0.6, 0.4], vec![1.0, 1.0, 0.5, 0.0, 0.0, 9.0])
            .unwrap();
        let labels = argmax_labels(&grid, 0.5).unwrap();
        // Voxel 0 is occupied with a class 0/1 tie; voxel 1 falls below the
        // threshold and becomes free space (= 3).
        assert_eq!(labels.labels(), &[0, 3]);
    }

    #[test]
    fn argmax_invariant_to_per_voxel_logit_shift() {
        let spec = GridSpec::new([2, 2, 1], [0.0; 3], 1.0).unwrap();
        let density = vec![1.0, 0.0, 2.0, 3.0];
        let sem = vec![0.3, -0.1, 1.0, 2.0, -4.0, 0.25, 0.5, 0.5];
        let grid = VoxelGrid::new(spec, 2, density.clone(), sem.clone()).unwrap();
        let shifted: Vec<f64> = sem
            .chunks(2)
            .enumerate()
            .flat_map(|(i, ch)| ch.iter().map(move |v| v + 10.0 * i as f64 - 3.0))
            .collect();
        let grid2 = VoxelGrid::new(spec, 2, density, shifted).unwrap();
        assert_eq!(
            argmax_labels(&grid, 0.5).unwrap().labels(),
            argmax_labels(&grid2, 0.5).unwrap().labels()
        );
    }

    /// Four voxels, two classes plus free: hand-counted IoUs.
    /// gt   = [0, 0, 1, free], pred = [0, 1, 1, 1].
    /// class 0: inter 1, union 2 -> 0.5
    /// class 1: inter 1, union 3 -> 1/3
    /// free:    inter 0, union 1 -> 0
    #[test]
    fn miou_hand_example() {
        let spec = GridSpec::new([4, 1, 1], [0.0; 3], 1.0).unwrap();
        let gt = SemanticLabelGrid::new(spec, 2, vec![0, 0, 1, 2], None).unwrap();
        let pred = SemanticLabelGrid::new(spec, 2, vec![0, 1, 1, 1], None).unwrap();
        let report = miou(&pred, &gt, false).unwrap();
        assert_relative_eq!(report.per_class[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(report.per_class[1], 1.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(report.per_class[2], 0.0, max_relative = 1e-12);
        assert_relative_eq!(report.miou, (0.5 + 1.0 / 3.0) / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn miou_absent_class_is_nan_and_excluded() {
        let spec = GridSpec::new([2, 1, 1], [0.0; 3], 1.0).unwrap();
        let gt = SemanticLabelGrid::new(spec, 3, vec![0, 0], None).unwrap();
        let pred = SemanticLabelGrid::new(spec, 3, vec![0, 0], None).unwrap();
        let report = miou(&pred, &gt, false).unwrap();
        assert_eq!(report.per_class[0], 1.0);
        assert!(report.per_class[1].is_nan());
        assert!(report.per_class[2].is_nan());
        assert!(report.per_class[3].is_nan());
        assert_eq!(report.miou, 1.0);
    }

    #[test]
    fn miou_mask_restricts_counting() {
        let spec = GridSpec::new([3, 1, 1], [0.0; 3], 1.0).unwrap();
        let gt = SemanticLabelGrid::new(
            spec,
            1,
            vec![0, 0, 1],
            Some(vec![true, false, true]),
        )
        .unwrap();
        let pred = SemanticLabelGrid::new(spec, 1, vec![0, 1, 1], None).unwrap();
        let unmasked = miou(&pred, &gt, false).unwrap();
        let masked = miou(&pred, &gt, true).unwrap();
        // Masked: voxel 1 (a miss) drops out, leaving perfect agreement.
        assert_eq!(masked.miou, 1.0);
        assert!(unmasked.miou < 1.0);
    }

    #[test]
    fn miou_requires_matching_geometry() {
        let a = SemanticLabelGrid::new(spec222(), 1, vec![0; 8], None).unwrap();
        let spec_b = GridSpec::new([2, 2, 2], [0.0, 0.0, 1.0], 1.0).unwrap();
        let b = SemanticLabelGrid::new(spec_b, 1, vec![0; 8], None).unwrap();
        assert!(miou(&a, &b, false).is_err());
        assert!(miou(&a, &a, true).is_err()); // no mask present
    }

    #[test]
    fn vxg_round_trip_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.vxg");
        let spec = GridSpec::new([3, 2, 4], [-1.0, 0.0, 2.5], 0.25).unwrap();
        let n = spec.num_voxels();
        let density: Vec<f64> = (0..n).map(|i| (i as f64) * 0.125).collect();
        let semantics: Vec<f64> = (0..n * 3).map(|i| (i as f64) * 0.0625 - 1.0).collect();
        let grid = VoxelGrid::new(spec, 3, density, semantics).unwrap();
        save_voxel_grid(&grid, &path).unwrap();
        let back = load_voxel_grid(&path).unwrap();
        // All stored values are exactly representable in f32.
        assert_eq!(back, grid);
    }

    #[test]
    fn vxg_round_trip_labels_with_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.vxg");
        let spec = GridSpec::new([2, 2, 2], [0.0; 3], 0.4).unwrap();
        let labels = vec![0u16, 1, 2, 2, 1, 0, 2, 1];
        let mask = vec![true, false, true, true, true, false, true, true];
        let grid = SemanticLabelGrid::new(spec, 2, labels, Some(mask)).unwrap();
        save_label_grid(&grid, &path).unwrap();
        let back = load_label_grid(&path).unwrap();
        assert_eq!(back, grid);
        assert!(load_voxel_grid(&path).is_err());
    }

    #[test]
    fn vxg_truncated_payload_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.vxg");
        let grid = VoxelGrid::zeros(spec222(), 2).unwrap();
        save_voxel_grid(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        match load_vxg(&path) {
            Err(Error::Parse { .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn vxg_payload_is_x_major_f32_le() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.vxg");
        let spec = GridSpec::new([2, 2, 2], [0.0; 3], 1.0).unwrap();
        let mut density = vec![0.0; 8];
        density[spec.linear_index(1, 0, 0)] = 4.0; // flat index 4 in x-major order
        let grid = VoxelGrid::new(spec, 1, density, vec![0.0; 8]).unwrap();
        save_voxel_grid(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header_end = bytes.iter().position(|&b| b == b'\n').unwrap() + 1;
        let payload = &bytes[header_end..];
        assert_eq!(payload.len(), 8 * 4 + 8 * 4);
        let v4 = f32::from_le_bytes(payload[16..20].try_into().unwrap());
        assert_eq!(v4, 4.0);
        let v0 = f32::from_le_bytes(payload[0..4].try_into().unwrap());
        assert_eq!(v0, 0.0);
    }

    #[test]
    fn invalid_construction_is_rejected() {
        assert!(GridSpec::new([0, 1, 1], [0.0; 3], 1.0).is_err());
        assert!(GridSpec::new([1, 1, 1], [0.0; 3], 0.0).is_err());
        assert!(GridSpec::new([1, 1, 1], [f64::NAN, 0.0, 0.0], 1.0).is_err());
        let spec = spec222();
        assert!(VoxelGrid::new(spec, 1, vec![0.0; 7], vec![0.0; 8]).is_err());
        assert!(VoxelGrid::new(spec, 1, vec![-1.0; 8], vec![0.0; 8]).is_err());
        assert!(VoxelGrid::new(spec, 2, vec![0.0; 8], vec![0.0; 8]).is_err());
        assert!(SemanticLabelGrid::new(spec, 2, vec![3; 8], None).is_err());
        assert!(SemanticLabelGrid::new(spec, 2, vec![0; 8], Some(vec![true; 7])).is_err());
    }
}
