//! Stage two: point-of-interest pooling, edge visibility, adaptive
//! point-wise attention, canonical edge aggregation, the refinement head,
//! and a rotated RoIAlign pooling baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_corners, corner_distances, dist, BBoxBEV, Point2, EDGE_CORNERS};
use crate::kernels::{Graph, ParamStore, Taps, Var};
use crate::pillars::PillarGridSpec;
use crate::rng::Rng;

/// Distances closer than this count as ties when picking the nearest
/// corner or edge.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeTag {
    Top,
    Right,
    Down,
    Left,
    Center,
}

impl EdgeTag {
    pub const EDGES: [EdgeTag; 4] = [EdgeTag::Top, EdgeTag::Right, EdgeTag::Down, EdgeTag::Left];

    pub fn index(self) -> usize {
        self as usize
    }
}

pub fn num_pois(n: usize) -> usize {
    5 + 4 * n
}

/// Index of the center PoI.
pub fn center_index(n: usize) -> usize {
    4 + 4 * n
}

/// The `5 + 4n` PoIs of a box: corners `p0..p3`, then `n` key-points per
/// edge (top, right, down, left; `j` ascending), then the center.
///
/// Key-point `j` of the edge from `pa` to `pb` is
/// `pa * j / (n + 1) + pb * (n + 1 - j) / (n + 1)`.
pub fn poi_positions(b: &BBoxBEV, n: usize) -> Vec<Point2> {
    let c = bev_corners(b);
    let mut out = Vec::with_capacity(num_pois(n));
    out.extend_from_slice(&c.p);
    let d = (n + 1) as f64;
    for &(a, e) in &EDGE_CORNERS {
        let (pa, pb) = (c.p[a], c.p[e]);
        for j in 1..=n {
            let (s, t) = (j as f64 / d, (n + 1 - j) as f64 / d);
            out.push([pa[0] * s + pb[0] * t, pa[1] * s + pb[1] * t]);
        }
    }
    out.push(b.center());
    out
}

/// Canonical tag of every PoI. Corner `k` carries the tag of the edge it
/// starts (p0 top, p1 right, p2 down, p3 left).
pub fn poi_tags(n: usize) -> Vec<EdgeTag> {
    let mut out = Vec::with_capacity(num_pois(n));
    out.extend(EdgeTag::EDGES);
    for e in EdgeTag::EDGES {
        out.extend(std::iter::repeat_n(e, n));
    }
    out.push(EdgeTag::Center);
    out
}

/// PoI indices lying on edge `e`, both corners included.
pub fn edge_members(e: usize, n: usize) -> Vec<usize> {
    let (a, b) = EDGE_CORNERS[e];
    let mut m = vec![a];
    m.extend(4 + e * n..4 + (e + 1) * n);
    m.push(b);
    m
}

fn argmin_with_ties(d: &[f64]) -> usize {
    let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
    d.iter().position(|&v| v - min < TIE_EPS).unwrap_or(0)
}

/// The two edges incident to the corner nearest the sensor (lowest corner
/// index on ties). A sensor inside or on the box sees all four edges.
pub fn visible_edges(b: &BBoxBEV, sensor: Point2) -> [bool; 4] {
    if b.contains(sensor, TIE_EPS) {
        return [true; 4];
    }
    let k = argmin_with_ties(&corner_distances(&bev_corners(b), sensor));
    let mut mask = [false; 4];
    mask[k] = true;
    mask[(k + 3) % 4] = true;
    mask
}

/// Per-PoI hard visibility: key-points follow their edge, corners are
/// visible when either incident edge is, the center always is.
pub fn poi_visibility(mask: &[bool; 4], n: usize) -> Vec<f64> {
    let mut v = Vec::with_capacity(num_pois(n));
    for k in 0..4 {
        v.push(f64::from(u8::from(mask[k] || mask[(k + 3) % 4])));
    }
    for &m in mask {
        v.extend(std::iter::repeat_n(f64::from(u8::from(m)), n));
    }
    v.push(1.0);
    v
}

/// Edge whose midpoint is nearest the sensor; it fills the first slot of
/// the aggregated feature and the others follow clockwise.
pub fn top_edge(b: &BBoxBEV, sensor: Point2) -> usize {
    let c = bev_corners(b);
    let d: Vec<f64> = (0..4)
        .map(|e| {
            let (p, q) = c.edge(e);
            dist([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0], sensor)
        })
        .collect();
    argmin_with_ties(&d)
}

/// Maps world BEV positions onto the backbone feature map.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmapFrame {
    pub grid: PillarGridSpec,
    pub stride: usize,
}

impl FmapFrame {
    /// Bilinear index coordinates (integer = cell center) of a point.
    pub fn index_coords(&self, p: Point2) -> (f64, f64) {
        let (r, c) = self.grid.image_coords(p[0], p[1], self.stride);
        (r - 0.5, c - 0.5)
    }

    pub fn rows(&self) -> usize {
        self.grid.rows() / self.stride
    }

    pub fn cols(&self) -> usize {
        self.grid.cols() / self.stride
    }
}

/// PoIs of `R` proposals sampled from one feature map. Rows of `features`
/// are proposal-major, `5 + 4n` per proposal.
#[derive(Debug, Clone)]
pub struct PoIBatch {
    pub n: usize,
    pub boxes: Vec<BBoxBEV>,
    pub positions: Vec<Point2>,
    pub visibility: Vec<f64>,
    pub masks: Vec<[bool; 4]>,
    pub features: Var,
    pub attention: Option<Var>,
}

impl PoIBatch {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// Bilinear PoI features for every box, all visibility flags set.
pub fn pool_pois(g: &mut Graph, fmap: Var, frame: &FmapFrame, boxes: &[BBoxBEV], n: usize) -> Result<PoIBatch> {
    let shape = g.value(fmap).shape.clone();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "pool_pois",
            left: shape,
            right: vec![3],
        });
    }
    let (h, w) = (shape[1], shape[2]);
    let mut positions = Vec::with_capacity(boxes.len() * num_pois(n));
    let mut taps = Taps::new();
    for b in boxes {
        for p in poi_positions(b, n) {
            let (r, c) = frame.index_coords(p);
            taps.push_row(&Taps::bilinear(r, c, h, w));
            positions.push(p);
        }
    }
    let features = g.sample_taps(fmap, taps)?;
    Ok(PoIBatch {
        n,
        boxes: boxes.to_vec(),
        visibility: vec![1.0; positions.len()],
        positions,
        masks: vec![[true; 4]; boxes.len()],
        features,
        attention: None,
    })
}

/// Zero the rows of PoIs on edges the sensor cannot see.
pub fn apply_visibility(g: &mut Graph, batch: &PoIBatch, sensor: Point2) -> Result<PoIBatch> {
    let masks: Vec<[bool; 4]> = batch.boxes.iter().map(|b| visible_edges(b, sensor)).collect();
    apply_visibility_masks(g, batch, masks)
}

pub fn apply_visibility_masks(g: &mut Graph, batch: &PoIBatch, masks: Vec<[bool; 4]>) -> Result<PoIBatch> {
    // compose with earlier flags so a second application changes nothing
    let visibility: Vec<f64> = masks
        .iter()
        .flat_map(|m| poi_visibility(m, batch.n))
        .zip(&batch.visibility)
        .map(|(a, b)| a * b)
        .collect();
    let features = g.scale_rows_const(batch.features, &visibility)?;
    Ok(PoIBatch {
        visibility,
        masks,
        features,
        ..batch.clone()
    })
}

/// Weight each PoI row by `sigmoid(W f + b)` with a shared `W [1, C]`.
pub fn adaptive_attention(g: &mut Graph, batch: &PoIBatch, w: Var, b: Var) -> Result<PoIBatch> {
    let logits = g.linear(batch.features, w, Some(b))?;
    let att = g.sigmoid(logits);
    let features = g.scale_rows(batch.features, att)?;
    Ok(PoIBatch {
        features,
        attention: Some(att),
        ..batch.clone()
    })
}

/// Max-pool each edge's visible PoIs and the center into `[R, 5C]`, edge
/// slots starting from the edge nearest the sensor and going clockwise.
pub fn aggregate(g: &mut Graph, batch: &PoIBatch, sensor: Point2) -> Result<Var> {
    let per = num_pois(batch.n);
    let mut groups = Vec::with_capacity(batch.len() * 5);
    for (r, b) in batch.boxes.iter().enumerate() {
        let base = r * per;
        let top = top_edge(b, sensor);
        for k in 0..4 {
            let e = (top + k) % 4;
            groups.push(
                edge_members(e, batch.n)
                    .into_iter()
                    .map(|i| base + i)
                    .filter(|&i| batch.visibility[i] != 0.0)
                    .collect(),
            );
        }
        groups.push(vec![base + center_index(batch.n)]);
    }
    let pooled = g.group_max(batch.features, &groups)?;
    let c = g.value(pooled).last_dim();
    g.reshape(pooled, &[batch.len(), 5 * c])
}

/// Which parts of the PoI path are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoiSwitches {
    pub visibility: bool,
    pub adaptive: bool,
}

/// PoI pooling through aggregation for a batch of proposals.
#[allow(clippy::too_many_arguments)]
pub fn poi_features(
    g: &mut Graph,
    fmap: Var,
    frame: &FmapFrame,
    boxes: &[BBoxBEV],
    n: usize,
    sensor: Point2,
    switches: PoiSwitches,
    store: &ParamStore,
) -> Result<Var> {
    let mut batch = pool_pois(g, fmap, frame, boxes, n)?;
    if switches.visibility {
        batch = apply_visibility(g, &batch, sensor)?;
    }
    if switches.adaptive {
        let w = g.param(store, "att.w")?;
        let b = g.param(store, "att.b")?;
        batch = adaptive_attention(g, &batch, w, b)?;
    }
    aggregate(g, &batch, sensor)
}

/// Rotated RoIAlign taps: `rows` bins along the box length, `cols` across
/// its width, a `k x k` grid of sub-samples per bin with `k = round(sqrt(s))`.
pub fn rroi_taps(boxes: &[BBoxBEV], frame: &FmapFrame, pooled: (usize, usize), samples_per_bin: usize) -> Taps {
    let (h, w) = (frame.rows(), frame.cols());
    let (rows, cols) = (pooled.0.max(1), pooled.1.max(1));
    let k = ((samples_per_bin as f64).sqrt().round() as usize).max(1);
    let weight = 1.0 / (k * k) as f64;
    let mut taps = Taps::new();
    let mut row = Vec::with_capacity(4 * k * k);
    for b in boxes {
        let (bl, bw) = (b.l / rows as f64, b.w / cols as f64);
        for i in 0..rows {
            for j in 0..cols {
                row.clear();
                for si in 0..k {
                    for sj in 0..k {
                        let u = -b.l / 2.0 + bl * (i as f64 + (si as f64 + 0.5) / k as f64);
                        let v = -b.w / 2.0 + bw * (j as f64 + (sj as f64 + 0.5) / k as f64);
                        let (r, c) = frame.index_coords(b.to_world([u, v]));
                        row.extend(Taps::bilinear(r, c, h, w).iter().map(|&(ix, t)| (ix, t * weight)));
                    }
                }
                taps.push_row(&row);
            }
        }
    }
    taps
}

/// Rotated RoIAlign features `[R, rows * cols * C]`.
pub fn rroi_align(
    g: &mut Graph,
    fmap: Var,
    frame: &FmapFrame,
    boxes: &[BBoxBEV],
    pooled: (usize, usize),
    samples_per_bin: usize,
) -> Result<Var> {
    let shape = g.value(fmap).shape.clone();
    if shape.len() != 3 || shape[1] != frame.rows() || shape[2] != frame.cols() {
        return Err(Error::ShapeMismatch {
            op: "rroi_align",
            left: shape,
            right: vec![frame.rows(), frame.cols()],
        });
    }
    let taps = rroi_taps(boxes, frame, pooled, samples_per_bin);
    let s = g.sample_taps(fmap, taps)?;
    g.reshape(s, &[boxes.len(), pooled.0.max(1) * pooled.1.max(1) * shape[0]])
}

/// Register the attention map and the refinement head.
pub fn init_params(store: &mut ParamStore, channels: usize, in_dim: usize, fc: usize, rng: &mut Rng) {
    store.init_const("att.w", &[1, channels], 0.0);
    store.init_const("att.b", &[1], 0.0);
    store.init_he("rcnn.fc1.w", &[fc, in_dim], in_dim, rng);
    store.init_const("rcnn.fc1.b", &[fc], 0.0);
    store.init_he("rcnn.fc2.w", &[fc, fc], fc, rng);
    store.init_const("rcnn.fc2.b", &[fc], 0.0);
    store.init_he("rcnn.cls.w", &[1, fc], fc, rng);
    store.init_const("rcnn.cls.b", &[1], -(99f64).ln());
    store.init_he("rcnn.reg.w", &[7, fc], fc, rng);
    if let Some(t) = store.get_mut("rcnn.reg.w") {
        t.data.iter_mut().for_each(|v| *v *= 0.1);
    }
    store.init_const("rcnn.reg.b", &[7], 0.0);
    store.init_he("rcnn.dir.w", &[2, fc], fc, rng);
    store.init_const("rcnn.dir.b", &[2], 0.0);
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub cls: Var,
    pub reg: Var,
    pub dir: Var,
}

/// FC, relu, FC, relu, then class `[R]`, residual `[R, 7]` and direction
/// `[R, 2]` branches.
pub fn refine_head(g: &mut Graph, agg: Var, store: &ParamStore) -> Result<HeadOutput> {
    let r = g.value(agg).shape[0];
    let lin = |g: &mut Graph, x: Var, name: &str| -> Result<Var> {
        let w = g.param(store, &format!("rcnn.{name}.w"))?;
        let b = g.param(store, &format!("rcnn.{name}.b"))?;
        g.linear(x, w, Some(b))
    };
    let h = lin(g, agg, "fc1")?;
    let h = g.relu(h);
    let h = lin(g, h, "fc2")?;
    let h = g.relu(h);
    let cls = lin(g, h, "cls")?;
    let cls = g.reshape(cls, &[r])?;
    Ok(HeadOutput {
        cls,
        reg: lin(g, h, "reg")?,
        dir: lin(g, h, "dir")?,
    })
}
