//! Oriented boxes in the bird's-eye view: corners, rotated IoU by convex
//! clipping, greedy rotated NMS, and the point/segment predicates the
//! visibility and occlusion code relies on.
//!
//! Box-local frame: the length `l` runs along local x and the width `w`
//! along local y. Corners are stored clockwise starting at the top-left
//! corner of the unrotated box.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point2 = [f64; 2];

/// Intersections smaller than this (m^2) count as empty.
pub const MIN_INTERSECTION_AREA: f64 = 1e-12;

/// Wrap an angle into (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let mut t = theta % (2.0 * PI);
    if t <= -PI {
        t += 2.0 * PI;
    } else if t > PI {
        t -= 2.0 * PI;
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox3D {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
}

impl BBox3D {
    pub fn new(x: f64, y: f64, z: f64, w: f64, l: f64, h: f64, theta: f64) -> Result<Self> {
        let vals = [x, y, z, w, l, h, theta];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite box {vals:?}")));
        }
        if w <= 0.0 || l <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "box extents must be positive, got w={w} l={l} h={h}"
            )));
        }
        Ok(BBox3D {
            x,
            y,
            z,
            w,
            l,
            h,
            theta: normalize_angle(theta),
        })
    }

    pub fn bev(&self) -> BBoxBEV {
        BBoxBEV {
            cx: self.x,
            cy: self.y,
            w: self.w,
            l: self.l,
            theta: self.theta,
        }
    }

    pub fn to_array(&self) -> [f64; 7] {
        [self.x, self.y, self.z, self.w, self.l, self.h, self.theta]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBoxBEV {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub l: f64,
    pub theta: f64,
}

impl BBoxBEV {
    pub fn new(cx: f64, cy: f64, w: f64, l: f64, theta: f64) -> Result<Self> {
        if ![cx, cy, w, l, theta].iter().all(|v| v.is_finite()) || w <= 0.0 || l <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "invalid BEV box cx={cx} cy={cy} w={w} l={l} theta={theta}"
            )));
        }
        Ok(BBoxBEV {
            cx,
            cy,
            w,
            l,
            theta: normalize_angle(theta),
        })
    }

    pub fn center(&self) -> Point2 {
        [self.cx, self.cy]
    }

    pub fn area(&self) -> f64 {
        self.w * self.l
    }

    /// Half of the box diagonal; every corner lies within this radius.
    pub fn radius(&self) -> f64 {
        0.5 * (self.w * self.w + self.l * self.l).sqrt()
    }

    /// World point expressed in the box frame (x along length).
    pub fn to_local(&self, p: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        let dx = p[0] - self.cx;
        let dy = p[1] - self.cy;
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn to_world(&self, q: Point2) -> Point2 {
        let (s, c) = self.theta.sin_cos();
        [self.cx + c * q[0] - s * q[1], self.cy + s * q[0] + c * q[1]]
    }

    /// Closed containment test with tolerance `eps` (meters).
    pub fn contains(&self, p: Point2, eps: f64) -> bool {
        let q = self.to_local(p);
        q[0].abs() <= 0.5 * self.l + eps && q[1].abs() <= 0.5 * self.w + eps
    }

    /// Strict interior test.
    pub fn contains_strictly(&self, p: Point2) -> bool {
        let q = self.to_local(p);
        q[0].abs() < 0.5 * self.l && q[1].abs() < 0.5 * self.w
    }
}

/// Box corners in clockwise order p0 (top-left), p1 (top-right),
/// p2 (bottom-right), p3 (bottom-left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerSet {
    pub p: [Point2; 4],
}

/// Edge `e` joins corners `EDGE_CORNERS[e]`: top, right, down, left.
pub const EDGE_CORNERS: [(usize, usize); 4] = [(0, 1), (1, 2), (2, 3), (3, 0)];

impl CornerSet {
    pub fn centroid(&self) -> Point2 {
        let mut c = [0.0; 2];
        for q in &self.p {
            c[0] += 0.25 * q[0];
            c[1] += 0.25 * q[1];
        }
        c
    }

    pub fn edge(&self, e: usize) -> (Point2, Point2) {
        let (a, b) = EDGE_CORNERS[e];
        (self.p[a], self.p[b])
    }

    /// Recover the box these corners came from.
    pub fn to_bev(&self) -> BBoxBEV {
        let c = self.centroid();
        let top = sub(self.p[1], self.p[0]);
        let right = sub(self.p[2], self.p[1]);
        BBoxBEV {
            cx: c[0],
            cy: c[1],
            l: norm(top),
            w: norm(right),
            theta: normalize_angle(top[1].atan2(top[0])),
        }
    }
}

pub fn bev_corners(b: &BBoxBEV) -> CornerSet {
    let hl = 0.5 * b.l;
    let hw = 0.5 * b.w;
    let local = [[-hl, hw], [hl, hw], [hl, -hw], [-hl, -hw]];
    CornerSet {
        p: local.map(|q| b.to_world(q)),
    }
}

pub fn corner_distances(corners: &CornerSet, sensor: Point2) -> [f64; 4] {
    corners.p.map(|q| dist(q, sensor))
}

pub(crate) fn sub(a: Point2, b: Point2) -> Point2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub(crate) fn norm(a: Point2) -> f64 {
    a[0].hypot(a[1])
}

pub fn dist(a: Point2, b: Point2) -> f64 {
    norm(sub(a, b))
}

fn cross(a: Point2, b: Point2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

/// Shoelace area of a simple polygon (absolute value).
pub fn polygon_area(poly: &[Point2]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let a = poly[i];
        let b = poly[(i + 1) % poly.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman: clip `subject` against the convex counter-clockwise
/// polygon `clip`.
fn clip_convex(subject: &[Point2], clip: &[Point2]) -> Vec<Point2> {
    let mut output: Vec<Point2> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let edge = sub(b, a);
        let side = |p: Point2| cross(edge, sub(p, a));
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let s_cur = side(cur);
            let s_prev = side(prev);
            if s_cur >= 0.0 {
                if s_prev < 0.0 {
                    output.push(line_point(prev, cur, s_prev, s_cur));
                }
                output.push(cur);
            } else if s_prev >= 0.0 {
                output.push(line_point(prev, cur, s_prev, s_cur));
            }
        }
    }
    output
}

fn line_point(p: Point2, q: Point2, sp: f64, sq: f64) -> Point2 {
    let t = sp / (sp - sq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn ccw_corners(b: &BBoxBEV) -> [Point2; 4] {
    let c = bev_corners(b).p;
    [c[3], c[2], c[1], c[0]]
}

/// Area of the intersection of two BEV boxes.
pub fn intersection_area(a: &BBoxBEV, b: &BBoxBEV) -> f64 {
    if dist(a.center(), b.center()) > a.radius() + b.radius() {
        return 0.0;
    }
    let poly = clip_convex(&ccw_corners(a), &ccw_corners(b));
    let area = polygon_area(&poly);
    if area < MIN_INTERSECTION_AREA {
        0.0
    } else {
        area
    }
}

fn box_key(b: &BBoxBEV) -> [f64; 5] {
    [b.cx, b.cy, b.w, b.l, b.theta]
}

/// Rotated BEV intersection-over-union in [0, 1].
///
/// The pair is put in a canonical order before clipping so the result is
/// bit-identical under argument swap.
pub fn rotated_iou(a: &BBoxBEV, b: &BBoxBEV) -> f64 {
    let (first, second) = match box_key(a)
        .iter()
        .zip(box_key(b).iter())
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
    {
        Some(std::cmp::Ordering::Greater) => (b, a),
        _ => (a, b),
    };
    let inter = intersection_area(first, second);
    if inter == 0.0 {
        return 0.0;
    }
    let union = first.area() + second.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Indices sorted by descending score; ties keep the lower index first.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    order
}

/// Greedy rotated non-maximum suppression. A box is dropped when its IoU
/// with an already kept box exceeds `iou_threshold`. Kept indices are
/// returned in descending score order.
pub fn rotated_nms(boxes: &[BBoxBEV], scores: &[f64], iou_threshold: f64) -> Result<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "rotated_nms",
            left: vec![boxes.len()],
            right: vec![scores.len()],
        });
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(format!("score {i} is not finite")));
    }
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        let suppressed = keep.iter().any(|&k| rotated_iou(&boxes[k], &boxes[i]) > iou_threshold);
        if !suppressed {
            keep.push(i);
        }
    }
    Ok(keep)
}

/// True when the open segment `a`-`b` passes through the strict interior
/// of the box.
pub fn segment_crosses_interior(a: Point2, b: Point2, bx: &BBoxBEV) -> bool {
    // Liang-Barsky in the box frame against the closed box, then check
    // the clipped parameter interval has positive length strictly inside.
    let p = bx.to_local(a);
    let q = bx.to_local(b);
    let d = sub(q, p);
    let hl = 0.5 * bx.l;
    let hw = 0.5 * bx.w;
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (pi, di, lim) in [(p[0], d[0], hl), (p[1], d[1], hw)] {
        // -lim < pi + t di < lim
        if di.abs() < 1e-15 {
            if pi.abs() >= lim {
                return false;
            }
            continue;
        }
        let ta = (-lim - pi) / di;
        let tb = (lim - pi) / di;
        let (lo, hi) = if ta < tb { (ta, tb) } else { (tb, ta) };
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    t1 - t0 > 1e-12
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn bev(cx: f64, cy: f64, w: f64, l: f64, t: f64) -> BBoxBEV {
        BBoxBEV::new(cx, cy, w, l, t).unwrap()
    }

    fn close(a: Point2, b: Point2, tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn corners_axis_aligned() {
        let c = bev_corners(&bev(0.0, 0.0, 2.0, 2.0, 0.0));
        let want = [[-1.0, 1.0], [1.0, 1.0], [1.0, -1.0], [-1.0, -1.0]];
        for (got, want) in c.p.iter().zip(want) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn corners_quarter_turn() {
        let c = bev_corners(&bev(0.0, 0.0, 2.0, 2.0, PI / 2.0));
        let want = [[-1.0, -1.0], [-1.0, 1.0], [1.0, 1.0], [1.0, -1.0]];
        for (got, want) in c.p.iter().zip(want) {
            assert!(close(*got, want, 1e-12), "{got:?} vs {want:?}");
        }
    }

    #[test]
    fn corners_translated() {
        let c = bev_corners(&bev(5.0, 3.0, 2.0, 4.0, 0.0));
        let want = [[3.0, 4.0], [7.0, 4.0], [7.0, 2.0], [3.0, 2.0]];
        for (got, want) in c.p.iter().zip(want) {
            assert!(close(*got, want, 1e-12));
        }
    }

    #[test]
    fn theta_normalized_on_construction() {
        let b = bev(0.0, 0.0, 1.0, 2.0, -PI);
        assert_eq!(b.theta, PI);
        let b = bev(0.0, 0.0, 1.0, 2.0, 3.0 * PI + 0.25);
        assert!((b.theta - (-PI + 0.25)).abs() < 1e-12);
        assert!(BBoxBEV::new(0.0, 0.0, 0.0, 1.0, 0.0).is_err());
        assert!(BBox3D::new(0.0, 0.0, 0.0, 1.0, 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = bev(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!((rotated_iou(&a, &a) - 1.0).abs() < 1e-12);
        let u = bev(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&u, &bev(10.0, 10.0, 1.0, 1.0, 0.0)), 0.0);
        let v = bev(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!((rotated_iou(&u, &v) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_half_turn_is_same_footprint() {
        let a = bev(1.0, 2.0, 1.5, 3.0, 0.3);
        let b = bev(1.0, 2.0, 1.5, 3.0, 0.3 + PI);
        assert!((rotated_iou(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        let a = bev(0.0, 0.0, 1.0, 1.0, 0.0);
        let b = bev(1.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_matches_monte_carlo_on_a_few_pairs() {
        let mut rng = Rng::seed(11);
        for _ in 0..20 {
            let a = bev(0.0, 0.0, rng.range(0.5, 3.0), rng.range(0.5, 5.0), rng.range(-PI, PI));
            let b = bev(
                rng.range(-1.5, 1.5),
                rng.range(-1.5, 1.5),
                rng.range(0.5, 3.0),
                rng.range(0.5, 5.0),
                rng.range(-PI, PI),
            );
            let mc = monte_carlo_iou(&a, &b, 200_000, &mut rng);
            assert!((rotated_iou(&a, &b) - mc).abs() < 0.01);
        }
    }

    fn monte_carlo_iou(a: &BBoxBEV, b: &BBoxBEV, n: usize, rng: &mut Rng) -> f64 {
        let pts: Vec<Point2> = bev_corners(a).p.into_iter().chain(bev_corners(b).p).collect();
        let (x0, x1) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
        let (y0, y1) = pts
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
        let (mut inter, mut uni) = (0usize, 0usize);
        for _ in 0..n {
            let p = [rng.range(x0, x1), rng.range(y0, y1)];
            let ia = a.contains(p, 0.0);
            let ib = b.contains(p, 0.0);
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
        inter as f64 / uni as f64
    }

    fn nms_reference(boxes: &[BBoxBEV], scores: &[f64], thr: f64) -> Vec<usize> {
        let n = boxes.len();
        let mut order: Vec<usize> = (0..n).collect();
        // selection sort: highest score, then lowest index
        for i in 0..n {
            let mut best = i;
            for j in i + 1..n {
                let (a, b) = (order[j], order[best]);
                if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                    best = j;
                }
            }
            order.swap(i, best);
        }
        let mut alive = vec![true; n];
        let mut out = Vec::new();
        for (rank, &i) in order.iter().enumerate() {
            if !alive[rank] {
                continue;
            }
            out.push(i);
            for (r2, &j) in order.iter().enumerate().skip(rank + 1) {
                if rotated_iou(&boxes[i], &boxes[j]) > thr {
                    alive[r2] = false;
                }
            }
        }
        out
    }

    #[test]
    fn nms_examples() {
        let u = bev(0.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_nms(&[u], &[0.3], 0.5).unwrap(), vec![0]);
        assert_eq!(rotated_nms(&[u, u], &[0.9, 0.8], 0.5).unwrap(), vec![0]);
        assert_eq!(rotated_nms(&[u, u], &[0.8, 0.9], 0.5).unwrap(), vec![1]);
        let three = [u, bev(0.5, 0.0, 1.0, 1.0, 0.0), bev(10.0, 0.0, 1.0, 1.0, 0.0)];
        assert_eq!(rotated_nms(&three, &[0.9, 0.8, 0.7], 0.3).unwrap(), vec![0, 2]);
        assert!(rotated_nms(&[], &[], 0.5).unwrap().is_empty());
        assert!(rotated_nms(&[u], &[], 0.5).is_err());
        assert!(rotated_nms(&[u], &[f64::NAN], 0.5).is_err());
    }

    #[test]
    fn nms_matches_reference_with_ties() {
        let mut rng = Rng::seed(5);
        for _ in 0..200 {
            let n = 1 + rng.below(25);
            let boxes: Vec<BBoxBEV> = (0..n)
                .map(|_| {
                    bev(
                        rng.range(0.0, 4.0),
                        rng.range(0.0, 4.0),
                        rng.range(0.5, 2.0),
                        rng.range(0.5, 3.0),
                        rng.range(-PI, PI),
                    )
                })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.below(5) as f64) / 4.0).collect();
            let thr = rng.range(0.1, 0.7);
            assert_eq!(
                rotated_nms(&boxes, &scores, thr).unwrap(),
                nms_reference(&boxes, &scores, thr)
            );
        }
    }

    #[test]
    fn corner_distance_examples() {
        let c = bev_corners(&bev(0.0, 0.0, 2.0, 2.0, 0.0));
        for d in corner_distances(&c, [0.0, 0.0]) {
            assert!((d - 2f64.sqrt()).abs() < 1e-12);
        }
        let c = bev_corners(&bev(10.0, 2.0, 2.0, 4.0, 0.0));
        let d = corner_distances(&c, [0.0, 0.0]);
        let want = [73f64.sqrt(), 153f64.sqrt(), 145f64.sqrt(), 65f64.sqrt()];
        for (g, w) in d.iter().zip(want) {
            assert!((g - w).abs() < 1e-12);
        }
        let d = corner_distances(&c, c.p[2]);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn segment_interior_predicate() {
        let b = bev(0.0, 0.0, 2.0, 2.0, 0.0);
        assert!(segment_crosses_interior([-5.0, 0.0], [5.0, 0.0], &b));
        assert!(!segment_crosses_interior([-5.0, 1.0], [5.0, 1.0], &b));
        assert!(!segment_crosses_interior([-5.0, 0.0], [-1.0, 0.0], &b));
        assert!(!segment_crosses_interior([-5.0, 5.0], [5.0, 5.0], &b));
    }

    proptest! {
        #[test]
        fn corners_round_trip(cx in -50.0..50.0f64, cy in -50.0..50.0f64, w in 0.1..5.0f64,
                              l in 0.1..8.0f64, t in -3.2..3.2f64) {
            let b = bev(cx, cy, w, l, t);
            let c = bev_corners(&b);
            let back = c.to_bev();
            prop_assert!((back.cx - b.cx).abs() < 1e-9 && (back.cy - b.cy).abs() < 1e-9);
            prop_assert!((back.w - b.w).abs() < 1e-9 && (back.l - b.l).abs() < 1e-9);
            prop_assert!(normalize_angle(back.theta - b.theta).abs() < 1e-9);
            let cen = c.centroid();
            prop_assert!((cen[0] - cx).abs() < 1e-9 && (cen[1] - cy).abs() < 1e-9);
        }

        #[test]
        fn iou_symmetric_and_rigid_invariant(
            ax in -3.0..3.0f64, ay in -3.0..3.0f64, aw in 0.3..3.0f64, al in 0.3..5.0f64, at in -3.2..3.2f64,
            bx in -3.0..3.0f64, by in -3.0..3.0f64, bw in 0.3..3.0f64, bl in 0.3..5.0f64, bt in -3.2..3.2f64,
            rot in -3.2..3.2f64, tx in -20.0..20.0f64, ty in -20.0..20.0f64,
        ) {
            let a = bev(ax, ay, aw, al, at);
            let b = bev(bx, by, bw, bl, bt);
            let iou = rotated_iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&iou));
            prop_assert_eq!(iou, rotated_iou(&b, &a));
            let flip = |x: &BBoxBEV| bev(x.cx, x.cy, x.w, x.l, x.theta + PI);
            prop_assert!((rotated_iou(&flip(&a), &flip(&b)) - iou).abs() < 1e-9);
            let (s, c) = rot.sin_cos();
            let mv = |x: &BBoxBEV| bev(c * x.cx - s * x.cy + tx, s * x.cx + c * x.cy + ty, x.w, x.l, x.theta + rot);
            prop_assert!((rotated_iou(&mv(&a), &mv(&b)) - iou).abs() < 1e-9);
        }
    }
}
