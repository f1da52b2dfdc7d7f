//! Point clouds, pillar voxelization, point decoration, and the
//! scatter/gather between pillar features and the BEV pseudo image.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::Tensor;
use crate::rng::Rng;

pub const PCL_MAGIC: &[u8; 4] = b"PCL1";
pub const RAW_DIM: usize = 4;
pub const DECORATED_DIM: usize = 9;

/// LiDAR returns as `[x, y, z, reflectance]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 4]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 4]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidArgument(format!("point {i} is not finite")));
        }
        Ok(PointCloud { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Little-endian `PCL1` binary: magic, u32 count, then `count * 4` f32.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 16 * self.points.len());
        out.extend_from_slice(PCL_MAGIC);
        out.extend_from_slice(&(self.points.len() as u32).to_le_bytes());
        for p in &self.points {
            for v in p {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < 8 || &buf[..4] != PCL_MAGIC {
            return Err(Error::Format("missing PCL1 header".into()));
        }
        let n = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let body = &buf[8..];
        if body.len() != n * 16 {
            return Err(Error::Format(format!(
                "PCL1 declares {n} points but carries {} bytes",
                body.len()
            )));
        }
        let points = body
            .chunks_exact(16)
            .map(|c| {
                let f = |k: usize| f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap()) as f64;
                [f(0), f(1), f(2), f(3)]
            })
            .collect();
        PointCloud::new(points)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,z,r")?;
        for p in &self.points {
            writeln!(w, "{},{},{},{}", p[0], p[1], p[2], p[3])?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut lines = BufReader::new(r).lines();
        let header = lines.next().transpose()?;
        if header.as_deref().map(str::trim) != Some("x,y,z,r") {
            return Err(Error::Format("CSV point cloud needs header x,y,z,r".into()));
        }
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format(format!("CSV line {}: {e}", i + 2)))?;
            if vals.len() != 4 {
                return Err(Error::Format(format!("CSV line {}: expected 4 fields", i + 2)));
            }
            points.push([vals[0], vals[1], vals[2], vals[3]]);
        }
        PointCloud::new(points)
    }

    /// Load binary or CSV, chosen by the `.csv` extension.
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            PointCloud::read_csv(std::fs::File::open(path)?)
        } else {
            PointCloud::from_bytes(&std::fs::read(path)?)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
            let f = std::io::BufWriter::new(std::fs::File::create(path)?);
            self.write_csv(f)
        } else {
            Ok(std::fs::write(path, self.to_bytes())?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PillarGridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub pillar_dx: f64,
    pub pillar_dy: f64,
    pub max_points_per_pillar: usize,
    pub max_pillars: usize,
}

impl Default for PillarGridSpec {
    fn default() -> Self {
        PillarGridSpec {
            x_min: 0.0,
            x_max: 40.0,
            y_min: -20.0,
            y_max: 20.0,
            pillar_dx: 0.5,
            pillar_dy: 0.5,
            max_points_per_pillar: 32,
            max_pillars: 2000,
        }
    }
}

fn integral_count(span: f64, step: f64) -> Option<usize> {
    let n = span / step;
    let r = n.round();
    ((n - r).abs() < 1e-9 && r >= 1.0).then_some(r as usize)
}

impl PillarGridSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.x_max > self.x_min
            && self.y_max > self.y_min
            && self.pillar_dx > 0.0
            && self.pillar_dy > 0.0
            && self.max_points_per_pillar > 0
            && self.max_pillars > 0
            && integral_count(self.x_max - self.x_min, self.pillar_dx).is_some()
            && integral_count(self.y_max - self.y_min, self.pillar_dy).is_some();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid pillar grid {self:?}")))
        }
    }

    /// Pseudo-image rows, one per pillar step along y.
    pub fn rows(&self) -> usize {
        integral_count(self.y_max - self.y_min, self.pillar_dy).unwrap_or(0)
    }

    /// Pseudo-image columns, one per pillar step along x.
    pub fn cols(&self) -> usize {
        integral_count(self.x_max - self.x_min, self.pillar_dx).unwrap_or(0)
    }

    pub fn in_range(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !self.in_range(x, y) {
            return None;
        }
        let r = (((y - self.y_min) / self.pillar_dy).floor() as usize).min(self.rows() - 1);
        let c = (((x - self.x_min) / self.pillar_dx).floor() as usize).min(self.cols() - 1);
        Some((r, c))
    }

    /// World `(x, y)` of a cell's geometric center.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.pillar_dx,
            self.y_min + (row as f64 + 0.5) * self.pillar_dy,
        )
    }

    /// Continuous pseudo-image coordinates of a world point at `stride`:
    /// cell `i` spans `[i, i + 1)`.
    pub fn image_coords(&self, x: f64, y: f64, stride: usize) -> (f64, f64) {
        let s = stride as f64;
        (
            (y - self.y_min) / (self.pillar_dy * s),
            (x - self.x_min) / (self.pillar_dx * s),
        )
    }
}

/// Dense `D x P x N` pillar tensor. `P` is the number of kept non-empty
/// pillars, in row-major cell order.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarTensor {
    pub dim: usize,
    pub n: usize,
    pub data: Vec<f64>,
    pub coords: Vec<(usize, usize)>,
    pub valid_counts: Vec<usize>,
}

impl PillarTensor {
    pub fn num_pillars(&self) -> usize {
        self.coords.len()
    }

    pub fn get(&self, d: usize, p: usize, k: usize) -> f64 {
        self.data[(d * self.num_pillars() + p) * self.n + k]
    }

    fn set(&mut self, d: usize, p: usize, k: usize, v: f64) {
        let np = self.num_pillars();
        self.data[(d * np + p) * self.n + k] = v;
    }

    /// The same values laid out as `[P * N, D]` rows for a per-point
    /// linear layer.
    pub fn point_rows(&self) -> Tensor {
        let (d, p, n) = (self.dim, self.num_pillars(), self.n);
        let mut out = vec![0.0; p * n * d];
        for di in 0..d {
            for pi in 0..p {
                for k in 0..n {
                    out[(pi * n + k) * d + di] = self.data[(di * p + pi) * n + k];
                }
            }
        }
        Tensor {
            shape: vec![p * n, d],
            data: out,
            grad: None,
        }
    }

    /// 1 for real points, 0 for padding, as a `[P * N]` vector.
    pub fn point_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.num_pillars() * self.n];
        for (p, &c) in self.valid_counts.iter().enumerate() {
            m[p * self.n..p * self.n + c].fill(1.0);
        }
        m
    }

    pub fn total_points(&self) -> usize {
        self.valid_counts.iter().sum()
    }
}

/// Group in-range points into pillars, subsample overfull pillars and
/// excess pillars with a seeded RNG, and zero-pad to `N` slots.
pub fn pillarize(cloud: &PointCloud, spec: &PillarGridSpec, seed: u64) -> PillarTensor {
    let cols = spec.cols();
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in cloud.points.iter().enumerate() {
        if let Some((r, c)) = spec.cell_of(p[0], p[1]) {
            buckets.entry(r * cols + c).or_default().push(i);
        }
    }
    let mut rng = Rng::seed(seed);
    let mut cells: Vec<usize> = buckets.keys().copied().collect();
    if cells.len() > spec.max_pillars {
        let k = spec.max_pillars;
        rng.shuffle_prefix(&mut cells, k);
        cells.truncate(k);
        cells.sort_unstable();
    }
    let n = spec.max_points_per_pillar;
    let np = cells.len();
    let mut t = PillarTensor {
        dim: RAW_DIM,
        n,
        data: vec![0.0; RAW_DIM * np * n],
        coords: cells.iter().map(|&c| (c / cols, c % cols)).collect(),
        valid_counts: vec![0; np],
    };
    for (p, cell) in cells.iter().enumerate() {
        let mut idx = buckets.remove(cell).unwrap_or_default();
        if idx.len() > n {
            rng.shuffle_prefix(&mut idx, n);
            idx.truncate(n);
        }
        t.valid_counts[p] = idx.len();
        for (k, &i) in idx.iter().enumerate() {
            for d in 0..RAW_DIM {
                t.set(d, p, k, cloud.points[i][d]);
            }
        }
    }
    t
}

/// Extend raw points to 9 channels: `x, y, z, r`, offsets to the pillar's
/// point mean, and `x, y` offsets to the pillar's geometric center.
pub fn decorate(t: &PillarTensor, spec: &PillarGridSpec) -> Result<PillarTensor> {
    if t.dim != RAW_DIM {
        return Err(Error::InvalidArgument(format!(
            "decorate expects {RAW_DIM}-dim points, got {}",
            t.dim
        )));
    }
    let np = t.num_pillars();
    let mut out = PillarTensor {
        dim: DECORATED_DIM,
        n: t.n,
        data: vec![0.0; DECORATED_DIM * np * t.n],
        coords: t.coords.clone(),
        valid_counts: t.valid_counts.clone(),
    };
    for p in 0..np {
        let cnt = t.valid_counts[p];
        if cnt == 0 {
            continue;
        }
        let mut mean = [0.0; 3];
        for (d, m) in mean.iter_mut().enumerate() {
            *m = (0..cnt).map(|k| t.get(d, p, k)).sum::<f64>() / cnt as f64;
        }
        let (cx, cy) = spec.cell_center(t.coords[p].0, t.coords[p].1);
        for k in 0..cnt {
            for d in 0..RAW_DIM {
                out.set(d, p, k, t.get(d, p, k));
            }
            for (d, m) in mean.iter().enumerate() {
                out.set(4 + d, p, k, t.get(d, p, k) - m);
            }
            out.set(7, p, k, t.get(0, p, k) - cx);
            out.set(8, p, k, t.get(1, p, k) - cy);
        }
    }
    Ok(out)
}

fn check_coords(coords: &[(usize, usize)], rows: usize, cols: usize) -> Result<()> {
    let mut seen = vec![false; rows * cols];
    for &(r, c) in coords {
        if r >= rows || c >= cols {
            return Err(Error::InvalidArgument(format!(
                "pillar coord ({r}, {c}) outside {rows}x{cols}"
            )));
        }
        if std::mem::replace(&mut seen[r * cols + c], true) {
            return Err(Error::DuplicateCoord(r, c));
        }
    }
    Ok(())
}

/// Place `[C, P]` pillar features into a zero `[C, rows, cols]` image.
pub fn scatter(features: &Tensor, coords: &[(usize, usize)], rows: usize, cols: usize) -> Result<Tensor> {
    if features.rank() != 2 || features.shape[1] != coords.len() {
        return Err(Error::ShapeMismatch {
            op: "scatter",
            left: features.shape.clone(),
            right: vec![coords.len()],
        });
    }
    check_coords(coords, rows, cols)?;
    let (c, p) = (features.shape[0], coords.len());
    let mut img = Tensor::zeros(&[c, rows, cols]);
    for ch in 0..c {
        for (j, &(r, col)) in coords.iter().enumerate() {
            img.data[(ch * rows + r) * cols + col] = features.data[ch * p + j];
        }
    }
    Ok(img)
}

/// Read `[C, P]` features back out of a `[C, rows, cols]` image.
pub fn gather(image: &Tensor, coords: &[(usize, usize)]) -> Result<Tensor> {
    if image.rank() != 3 {
        return Err(Error::ShapeMismatch {
            op: "gather",
            left: image.shape.clone(),
            right: vec![3],
        });
    }
    let (c, rows, cols) = (image.shape[0], image.shape[1], image.shape[2]);
    check_coords(coords, rows, cols)?;
    let p = coords.len();
    let mut out = Tensor::zeros(&[c, p]);
    for ch in 0..c {
        for (j, &(r, col)) in coords.iter().enumerate() {
            out.data[ch * p + j] = image.data[(ch * rows + r) * cols + col];
        }
    }
    Ok(out)
}
