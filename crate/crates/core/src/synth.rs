//! Synthetic LiDAR scenes: boxes whose returns sit only on the edges the
//! sensor can see, thinning with distance and shadowed by nearer objects,
//! plus the per-edge density statistic those scenes are meant to exhibit.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_corners, dist, rotated_iou, segment_crosses_interior, BBox3D, BBoxBEV, Point2};
use crate::pillars::PointCloud;
use crate::rng::Rng;

pub const SENSOR: Point2 = [0.0, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Mean `(w, l, h)` in meters.
    pub mean: [f64; 3],
    pub sigma: [f64; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Region {
    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub num_objects_min: usize,
    pub num_objects_max: usize,
    pub classes: Vec<ClassSpec>,
    /// Objects are placed fully inside this region; clutter covers it.
    pub region: Region,
    /// No object comes closer than this to the sensor.
    pub sensor_clearance: f64,
    /// Returns per meter of edge at `reference_distance`.
    pub lambda: f64,
    pub reference_distance: f64,
    pub noise_sigma: f64,
    /// Ground returns per square meter.
    pub clutter_density: f64,
    /// Objects left with fewer returns are not labeled.
    pub min_points: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            num_objects_min: 3,
            num_objects_max: 8,
            classes: vec![ClassSpec {
                name: "vehicle".into(),
                mean: [1.9, 4.6, 1.7],
                sigma: [0.1, 0.1, 0.1],
            }],
            region: Region {
                x_min: 0.0,
                x_max: 40.0,
                y_min: -20.0,
                y_max: 20.0,
            },
            sensor_clearance: 2.0,
            lambda: 60.0,
            reference_distance: 15.0,
            noise_sigma: 0.03,
            clutter_density: 0.05,
            min_points: 5,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_objects_min > self.num_objects_max {
            return bad("num_objects_min exceeds num_objects_max".into());
        }
        if self.classes.is_empty() && self.num_objects_max > 0 {
            return bad("scene spec needs at least one class".into());
        }
        for c in &self.classes {
            if c.mean.iter().any(|&m| !(m > 0.0)) || c.sigma.iter().any(|&s| !(s >= 0.0)) {
                return bad(format!("class {} needs positive sizes and non-negative sigma", c.name));
            }
        }
        let r = &self.region;
        if !(r.x_max > r.x_min && r.y_max > r.y_min) {
            return bad("empty placement region".into());
        }
        for (k, v) in [
            ("lambda", self.lambda),
            ("noise_sigma", self.noise_sigma),
            ("clutter_density", self.clutter_density),
            ("sensor_clearance", self.sensor_clearance),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{k} must be non-negative"));
            }
        }
        if !(self.reference_distance > 0.0) {
            return bad("reference_distance must be positive".into());
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    /// Read a spec file: JSON when the extension is `.json`, TOML otherwise.
    /// Missing keys take their defaults; unknown keys are rejected.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let spec: SceneSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledScene {
    pub cloud: PointCloud,
    /// Boxes with their index into the spec's class list.
    pub gts: Vec<(BBox3D, usize)>,
    pub classes: Vec<String>,
    pub seed: u64,
}

fn poisson(rng: &mut Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).map(|p| p.sample(rng) as usize).unwrap_or(0)
}

/// True when an edge faces the sensor: the ray from the sensor to the edge
/// midpoint does not pass through the box.
pub fn edge_faces_sensor(b: &BBoxBEV, e: usize, sensor: Point2) -> bool {
    let (p, q) = bev_corners(b).edge(e);
    let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
    !segment_crosses_interior(sensor, mid, b)
}

fn place_objects(spec: &SceneSpec, rng: &mut Rng) -> Vec<(BBox3D, usize)> {
    let span = spec.num_objects_max - spec.num_objects_min;
    let count = spec.num_objects_min + rng.below(span + 1);
    let r = spec.region;
    let mut placed: Vec<(BBox3D, usize)> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..200 {
            let cls = rng.below(spec.classes.len());
            let c = &spec.classes[cls];
            let size: Vec<f64> = (0..3)
                .map(|k| (c.mean[k] + c.sigma[k] * rng.normal()).max(0.5 * c.mean[k]))
                .collect();
            let (w, l, h) = (size[0], size[1], size[2]);
            let rad = 0.5 * (w * w + l * l).sqrt();
            if r.x_max - r.x_min <= 2.0 * rad || r.y_max - r.y_min <= 2.0 * rad {
                break;
            }
            let x = rng.range(r.x_min + rad, r.x_max - rad);
            let y = rng.range(r.y_min + rad, r.y_max - rad);
            let theta = rng.range(-PI, PI);
            if dist([x, y], SENSOR) < spec.sensor_clearance + rad {
                continue;
            }
            let Ok(b) = BBox3D::new(x, y, h / 2.0, w, l, h, theta) else {
                continue;
            };
            let bev = b.bev();
            if placed.iter().all(|(o, _)| rotated_iou(&o.bev(), &bev) == 0.0) {
                placed.push((b, cls));
                break;
            }
        }
    }
    placed
}

fn occluded(p: Point2, own: Option<usize>, boxes: &[BBoxBEV]) -> bool {
    boxes
        .iter()
        .enumerate()
        .any(|(j, b)| Some(j) != own && segment_crosses_interior(SENSOR, p, b))
}

/// Generate one scene. The same `(spec, seed)` always yields the same
/// scene.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledScene> {
    spec.validate()?;
    let mut rng = Rng::seed(seed);
    let objects = place_objects(spec, &mut rng);
    let bevs: Vec<BBoxBEV> = objects.iter().map(|(b, _)| b.bev()).collect();
    let mut points = Vec::new();
    let mut counts = vec![0usize; objects.len()];
    for (i, (b, _)) in objects.iter().enumerate() {
        let corners = bev_corners(&bevs[i]);
        for e in 0..4 {
            if !edge_faces_sensor(&bevs[i], e, SENSOR) {
                continue;
            }
            let (p, q) = corners.edge(e);
            let len = dist(p, q);
            let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
            let mean = spec.lambda * len * spec.reference_distance / dist(mid, SENSOR).max(1e-6);
            for _ in 0..poisson(&mut rng, mean) {
                let t = rng.uniform();
                let xy = [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])];
                let z = rng.uniform() * b.h;
                let refl = rng.range(0.3, 0.9);
                if occluded(xy, Some(i), &bevs) {
                    continue;
                }
                let n = spec.noise_sigma;
                points.push([
                    xy[0] + n * rng.normal(),
                    xy[1] + n * rng.normal(),
                    z + n * rng.normal(),
                    refl,
                ]);
                counts[i] += 1;
            }
        }
    }
    let r = spec.region;
    for _ in 0..poisson(&mut rng, spec.clutter_density * r.area()) {
        let xy = [rng.range(r.x_min, r.x_max), rng.range(r.y_min, r.y_max)];
        let refl = rng.range(0.0, 0.3);
        let z = spec.noise_sigma * rng.normal();
        if bevs.iter().any(|b| b.contains(xy, 0.0)) || occluded(xy, None, &bevs) {
            continue;
        }
        points.push([xy[0], xy[1], z, refl]);
    }
    let gts = objects
        .into_iter()
        .zip(&counts)
        .filter(|(_, &c)| c >= spec.min_points)
        .map(|(o, _)| o)
        .collect();
    Ok(LabeledScene {
        cloud: PointCloud::new(points)?,
        gts,
        classes: spec.class_names(),
        seed,
    })
}

/// Fig.-1 style density shares of one object, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeDensity {
    /// Edge-band shares sorted descending.
    pub edges: [f64; 4],
    pub others: f64,
}

/// Part of the box a local point falls in: edge band 0..3 or 4 for the
/// interior. Overlapping bands go to the nearest edge, lower index on ties.
fn band_of(q: Point2, w: f64, l: f64, band: f64) -> usize {
    let (hl, hw) = (0.5 * l, 0.5 * w);
    // distance to top, right, down, left edges and their band widths
    let d = [hw - q[1], hl - q[0], q[1] + hw, q[0] + hl];
    let widths = [band * w, band * l, band * w, band * l];
    let mut best = 4;
    for e in 0..4 {
        if d[e] <= widths[e] && (best == 4 || d[e] < d[best]) {
            best = e;
        }
    }
    best
}

const AREA_GRID: usize = 200;

/// Fraction of the box area covered by each part under [`band_of`],
/// integrated on a fixed midpoint grid.
fn part_areas(w: f64, l: f64, band: f64) -> [f64; 5] {
    let mut cnt = [0usize; 5];
    for i in 0..AREA_GRID {
        for j in 0..AREA_GRID {
            let u = -0.5 * l + l * (i as f64 + 0.5) / AREA_GRID as f64;
            let v = -0.5 * w + w * (j as f64 + 0.5) / AREA_GRID as f64;
            cnt[band_of([u, v], w, l, band)] += 1;
        }
    }
    let total = (AREA_GRID * AREA_GRID) as f64;
    cnt.map(|c| c as f64 / total * w * l)
}

/// Objects with fewer than this many in-box points are skipped.
pub const MIN_STAT_POINTS: usize = 100;

/// Per-object normalized point density of the four edge bands and the
/// interior. Each band is `edge_band` times the box extent perpendicular to
/// its edge.
pub fn edge_density_stats(scene: &LabeledScene, edge_band: f64) -> Result<Vec<EdgeDensity>> {
    if !(edge_band > 0.0 && edge_band < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "edge_band {edge_band} outside (0, 0.5)"
        )));
    }
    let mut out = Vec::new();
    for (b, _) in &scene.gts {
        let bev = b.bev();
        let mut cnt = [0usize; 5];
        let mut total = 0;
        for p in &scene.cloud.points {
            if !bev.contains([p[0], p[1]], 1e-6) {
                continue;
            }
            let q = bev.to_local([p[0], p[1]]);
            let q = [
                q[0].clamp(-0.5 * bev.l, 0.5 * bev.l),
                q[1].clamp(-0.5 * bev.w, 0.5 * bev.w),
            ];
            cnt[band_of(q, bev.w, bev.l, edge_band)] += 1;
            total += 1;
        }
        if total < MIN_STAT_POINTS {
            continue;
        }
        let areas = part_areas(bev.w, bev.l, edge_band);
        let dens: Vec<f64> = (0..5).map(|k| cnt[k] as f64 / areas[k]).collect();
        let sum: f64 = dens.iter().sum();
        let mut edges = [0.0; 4];
        for k in 0..4 {
            edges[k] = 100.0 * dens[k] / sum;
        }
        edges.sort_by(|a, b| b.total_cmp(a));
        let others = 100.0 * dens[4] / sum;
        out.push(EdgeDensity { edges, others });
    }
    Ok(out)
}

/// One labeled or detected box as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub theta: f64,
    pub class: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl BoxRecord {
    pub fn new(b: &BBox3D, class: &str, score: Option<f64>) -> Self {
        BoxRecord {
            x: b.x,
            y: b.y,
            z: b.z,
            w: b.w,
            l: b.l,
            h: b.h,
            theta: b.theta,
            class: class.to_string(),
            score,
        }
    }

    pub fn bbox(&self) -> Result<BBox3D> {
        BBox3D::new(self.x, self.y, self.z, self.w, self.l, self.h, self.theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneLabels {
    pub boxes: Vec<BoxRecord>,
    pub seed: u64,
}

impl LabeledScene {
    pub fn labels(&self) -> SceneLabels {
        SceneLabels {
            boxes: self
                .gts
                .iter()
                .map(|(b, c)| BoxRecord::new(b, &self.classes[*c], None))
                .collect(),
            seed: self.seed,
        }
    }

    /// Write `<name>.pcl` and the `<name>.json` sidecar into `dir`.
    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.cloud.save(&dir.join(format!("{name}.pcl")))?;
        let json = serde_json::to_string_pretty(&self.labels())?;
        std::fs::write(dir.join(format!("{name}.json")), json)?;
        Ok(())
    }

    /// Read a bundle back. Class names are indexed in order of first use
    /// unless `classes` already lists them.
    pub fn load(dir: &Path, name: &str, classes: &[String]) -> Result<Self> {
        let cloud = PointCloud::load(&dir.join(format!("{name}.pcl")))?;
        let labels: SceneLabels = serde_json::from_str(&std::fs::read_to_string(dir.join(format!("{name}.json")))?)?;
        let mut names = classes.to_vec();
        let mut gts = Vec::with_capacity(labels.boxes.len());
        for r in &labels.boxes {
            let idx = match names.iter().position(|n| *n == r.class) {
                Some(i) => i,
                None => {
                    names.push(r.class.clone());
                    names.len() - 1
                }
            };
            gts.push((r.bbox()?, idx));
        }
        Ok(LabeledScene {
            cloud,
            gts,
            classes: names,
            seed: labels.seed,
        })
    }
}

/// Scene names (file stems with both `.pcl` and `.json`) in `dir`, sorted.
pub fn list_scenes(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path: PathBuf = entry?.path();
        if path.extension().is_some_and(|e| e == "pcl") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if dir.join(format!("{stem}.json")).exists() {
                    names.push(stem.to_string());
                }
            }
        }
    }
    names.sort();
    Ok(names)
}

pub fn load_dir(dir: &Path, classes: &[String]) -> Result<Vec<(String, LabeledScene)>> {
    list_scenes(dir)?
        .into_iter()
        .map(|n| LabeledScene::load(dir, &n, classes).map(|s| (n, s)))
        .collect()
}

/// Generate `count` scenes with seeds `seed, seed + 1, ...` into `dir` as
/// `scene_00000` and onwards.
pub fn generate_dataset(spec: &SceneSpec, count: usize, seed: u64, dir: &Path) -> Result<Vec<String>> {
    (0..count)
        .map(|i| {
            let name = format!("scene_{i:05}");
            generate_scene(spec, seed.wrapping_add(i as u64))?.save(dir, &name)?;
            Ok(name)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet(objects: usize) -> SceneSpec {
        SceneSpec {
            num_objects_min: objects,
            num_objects_max: objects,
            noise_sigma: 0.0,
            clutter_density: 0.0,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn zero_noise_points_on_facing_edges() {
        for seed in 0..20 {
            let s = generate_scene(&quiet(1), seed).unwrap();
            if s.gts.is_empty() {
                continue;
            }
            let b = s.gts[0].0.bev();
            let c = bev_corners(&b);
            for p in &s.cloud.points {
                let xy = [p[0], p[1]];
                let on_facing = (0..4).any(|e| {
                    let (a, q) = c.edge(e);
                    let cross = (q[0] - a[0]) * (xy[1] - a[1]) - (q[1] - a[1]) * (xy[0] - a[0]);
                    edge_faces_sensor(&b, e, SENSOR) && cross.abs() / dist(a, q) < 1e-9
                });
                assert!(on_facing, "seed {seed}: {xy:?}");
                assert!(p[2] >= 0.0 && p[2] <= s.gts[0].0.h);
            }
        }
    }

    #[test]
    fn determinism() {
        let spec = SceneSpec::default();
        let a = generate_scene(&spec, 9).unwrap();
        let b = generate_scene(&spec, 9).unwrap();
        assert_eq!(a.cloud.to_bytes(), b.cloud.to_bytes());
        assert_eq!(a.gts, b.gts);
        assert_ne!(a.cloud.to_bytes(), generate_scene(&spec, 10).unwrap().cloud.to_bytes());
    }

    #[test]
    fn default_scene_invariants() {
        let spec = SceneSpec::default();
        let mut sizes = Vec::new();
        for seed in 0..30 {
            let s = generate_scene(&spec, seed).unwrap();
            sizes.push(s.cloud.len());
            for (i, (a, _)) in s.gts.iter().enumerate() {
                assert!(a.x > 0.0 && a.x < 40.0 && a.y > -20.0 && a.y < 20.0);
                for (b, _) in &s.gts[i + 1..] {
                    assert!(rotated_iou(&a.bev(), &b.bev()) < 0.05);
                }
            }
        }
        let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
        assert!((1000.0..4000.0).contains(&mean), "mean points {mean}");
    }

    #[test]
    fn no_point_is_shadowed_by_another_box() {
        let spec = SceneSpec {
            noise_sigma: 0.0,
            ..SceneSpec::default()
        };
        for seed in 0..10 {
            let s = generate_scene(&spec, seed).unwrap();
            let bevs: Vec<BBoxBEV> = s.gts.iter().map(|(b, _)| b.bev()).collect();
            for p in &s.cloud.points {
                for b in &bevs {
                    if !b.contains([p[0], p[1]], 1e-6) {
                        assert!(!segment_crosses_interior(SENSOR, [p[0], p[1]], b));
                    }
                }
            }
        }
    }

    #[test]
    fn density_halves_with_distance() {
        // the same box with its rear face 10 m and 20 m away, seen head-on
        let spec = quiet(0);
        let mut totals = [0.0; 2];
        let mut means = [0.0; 2];
        for (k, d) in [10.0, 20.0].into_iter().enumerate() {
            let b = BBox3D::new(d + 2.3, 0.0, 0.85, 1.9, 4.6, 1.7, 0.0).unwrap().bev();
            means[k] = spec.lambda * 1.9 * spec.reference_distance / d;
            for seed in 0..100u64 {
                let mut rng = Rng::seed(seed);
                for e in 0..4 {
                    if edge_faces_sensor(&b, e, SENSOR) {
                        let (p, q) = bev_corners(&b).edge(e);
                        assert!((dist(p, q) - 1.9).abs() < 1e-12);
                        let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
                        let m = spec.lambda * dist(p, q) * spec.reference_distance / dist(mid, SENSOR);
                        totals[k] += poisson(&mut rng, m) as f64;
                    }
                }
            }
        }
        for k in 0..2 {
            let mean = totals[k] / 100.0;
            assert!(
                (mean - means[k]).abs() < 3.0 * (means[k] / 100.0).sqrt(),
                "{mean} vs {}",
                means[k]
            );
        }
        assert!((means[0] / means[1] - 2.0).abs() < 1e-12);
        let ratio = totals[0] / totals[1];
        // 3 sigma of the ratio of two Poisson totals
        let sd = ratio * (1.0 / totals[0] + 1.0 / totals[1]).sqrt();
        assert!((ratio - 2.0).abs() < 3.0 * sd, "{ratio}");
    }

    #[test]
    fn density_stats_examples() {
        let b = BBox3D::new(10.0, 0.0, 0.85, 2.0, 4.0, 1.7, 0.0).unwrap();
        // 100 points along the top edge (local y = +w/2)
        let pts: Vec<[f64; 4]> = (0..100).map(|i| [8.02 + 0.0396 * i as f64, 1.0, 0.5, 0.5]).collect();
        let scene = LabeledScene {
            cloud: PointCloud::new(pts).unwrap(),
            gts: vec![(b, 0)],
            classes: vec!["vehicle".into()],
            seed: 0,
        };
        let r = edge_density_stats(&scene, 0.1).unwrap();
        assert_eq!(r.len(), 1);
        assert!((r[0].edges[0] - 100.0).abs() < 1e-9);
        assert_eq!(&r[0].edges[1..], &[0.0; 3]);
        assert!(r[0].others.abs() < 1e-9);
        let few = LabeledScene {
            cloud: PointCloud::new(scene.cloud.points[..50].to_vec()).unwrap(),
            ..scene.clone()
        };
        assert!(edge_density_stats(&few, 0.1).unwrap().is_empty());
        assert!(edge_density_stats(&scene, 0.5).is_err());
    }

    #[test]
    fn zero_noise_scene_has_no_interior_density() {
        let s = generate_scene(&quiet(6), 4).unwrap();
        for d in edge_density_stats(&s, 0.1).unwrap() {
            assert!(d.others.abs() < 1e-9);
            assert!((d.edges.iter().sum::<f64>() + d.others - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_scene(&SceneSpec::default(), 3).unwrap();
        s.save(dir.path(), "a").unwrap();
        let back = LabeledScene::load(dir.path(), "a", &["vehicle".to_string()]).unwrap();
        assert_eq!(back.gts.len(), s.gts.len());
        for ((a, ca), (b, cb)) in back.gts.iter().zip(&s.gts) {
            assert_eq!(a, b);
            assert_eq!(ca, cb);
        }
        // points are stored as f32
        for (p, q) in back.cloud.points.iter().zip(&s.cloud.points) {
            for k in 0..4 {
                assert_eq!(p[k], q[k] as f32 as f64);
            }
        }
        assert_eq!(list_scenes(dir.path()).unwrap(), vec!["a".to_string()]);
    }

    #[test]
    fn spec_files_in_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("s.toml");
        std::fs::write(&t, "num_objects_min = 2\nnum_objects_max = 4\n").unwrap();
        let spec = SceneSpec::load(&t).unwrap();
        assert_eq!((spec.num_objects_min, spec.num_objects_max), (2, 4));
        assert_eq!(spec.classes, SceneSpec::default().classes);
        let j = dir.path().join("s.json");
        std::fs::write(&j, r#"{"lambda": 0.5}"#).unwrap();
        assert_eq!(SceneSpec::load(&j).unwrap().lambda, 0.5);
        std::fs::write(&t, "bogus = 1\n").unwrap();
        assert_eq!(SceneSpec::load(&t).unwrap_err().kind(), "config");
        std::fs::write(&t, "num_objects_min = 5\nnum_objects_max = 1\n").unwrap();
        assert_eq!(SceneSpec::load(&t).unwrap_err().kind(), "config");
    }
}
