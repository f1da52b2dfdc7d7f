//! Center-distance matching and nuScenes-style average precision.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox3D;
use crate::synth::BoxRecord;

/// Matching distances in meters.
pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
/// Recall grid resolution: grid points are `i / GRID` for `i = 0..=GRID`.
pub const GRID: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox3D,
    pub class: usize,
    pub score: f64,
}

/// Detections and ground truth of one scene.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneEval {
    pub dets: Vec<Detection>,
    pub gts: Vec<(BBox3D, usize)>,
}

fn center_dist(a: &BBox3D, b: &BBox3D) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Match one class across scenes at distance `d`.
///
/// Detections are taken in descending score (ties by scene, then input
/// order); each becomes a TP when an unmatched gt of its scene lies within
/// `d`, and is then matched to the nearest such gt. Returns TP flags in
/// processing order and the number of gts.
pub fn match_detections(scenes: &[SceneEval], class: usize, d: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = Vec::new();
    for (s, sc) in scenes.iter().enumerate() {
        for (i, det) in sc.dets.iter().enumerate() {
            if det.class == class {
                order.push((s, i));
            }
        }
    }
    order.sort_by(|a, b| {
        let (da, db) = (&scenes[a.0].dets[a.1], &scenes[b.0].dets[b.1]);
        db.score.total_cmp(&da.score).then(a.cmp(b))
    });
    let mut used: Vec<Vec<bool>> = scenes.iter().map(|s| vec![false; s.gts.len()]).collect();
    let num_gt = scenes.iter().flat_map(|s| &s.gts).filter(|g| g.1 == class).count();
    let tp = order
        .iter()
        .map(|&(s, i)| {
            let det = &scenes[s].dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, (g, c)) in scenes[s].gts.iter().enumerate() {
                if *c != class || used[s][j] {
                    continue;
                }
                let dist = center_dist(&det.bbox, g);
                if dist <= d && best.is_none_or(|(bd, _)| dist < bd) {
                    best = Some((dist, j));
                }
            }
            if let Some((_, j)) = best {
                used[s][j] = true;
                true
            } else {
                false
            }
        })
        .collect();
    (tp, num_gt)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApMode {
    /// Clip recall and precision at 0.1 and renormalize both.
    #[default]
    BothAxes,
    /// Clip recall at 0.1 only.
    RecallOnly,
}

/// Interpolated precision on the recall grid: `p[i]` is the best
/// precision among operating points with recall at least `i / GRID`.
pub fn interpolated_precision(tp: &[bool], num_gt: usize) -> Vec<f64> {
    let mut best_at = vec![0.0f64; GRID + 1];
    if num_gt == 0 {
        return best_at;
    }
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        let prec = hits as f64 / (k + 1) as f64;
        // largest grid index whose recall this point reaches
        let top = (hits * GRID) / num_gt;
        best_at[top] = best_at[top].max(prec);
    }
    for i in (0..GRID).rev() {
        best_at[i] = best_at[i].max(best_at[i + 1]);
    }
    best_at
}

/// Normalized area under the interpolated PR curve above 10% recall,
/// averaged over grid recalls `0.11 ..= 1.00`.
pub fn average_precision(tp: &[bool], num_gt: usize, mode: ApMode) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let p = interpolated_precision(tp, num_gt);
    let first = (MIN_RECALL * GRID as f64).round() as usize + 1;
    let vals = &p[first..];
    let sum: f64 = match mode {
        ApMode::BothAxes => vals
            .iter()
            .map(|&v| (v - MIN_PRECISION).max(0.0) / (1.0 - MIN_PRECISION))
            .sum(),
        ApMode::RecallOnly => vals.iter().sum(),
    };
    (sum / vals.len() as f64).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCell {
    pub class: String,
    pub threshold: f64,
    pub ap: f64,
    /// Interpolated precision at recall `i / 100`.
    pub precision: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cells: Vec<ApCell>,
    pub class_ap: Vec<(String, f64)>,
    pub map: f64,
    pub mode: ApMode,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,threshold,ap\n");
        for c in &self.cells {
            s.push_str(&format!("{},{},{}\n", c.class, c.threshold, c.ap));
        }
        s
    }
}

/// AP for every (class, threshold) cell and their mean.
pub fn map_report(scenes: &[SceneEval], classes: &[String], thresholds: &[f64], mode: ApMode) -> EvalReport {
    let mut cells = Vec::with_capacity(classes.len() * thresholds.len());
    let mut class_ap = Vec::with_capacity(classes.len());
    for (ci, name) in classes.iter().enumerate() {
        let mut sum = 0.0;
        for &d in thresholds {
            let (tp, n) = match_detections(scenes, ci, d);
            let ap = average_precision(&tp, n, mode);
            sum += ap;
            cells.push(ApCell {
                class: name.clone(),
                threshold: d,
                ap,
                precision: interpolated_precision(&tp, n),
            });
        }
        class_ap.push((
            name.clone(),
            if thresholds.is_empty() {
                0.0
            } else {
                sum / thresholds.len() as f64
            },
        ));
    }
    let map = if cells.is_empty() {
        0.0
    } else {
        cells.iter().map(|c| c.ap).sum::<f64>() / cells.len() as f64
    };
    EvalReport {
        cells,
        class_ap,
        map,
        mode,
    }
}

/// One line of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDetections {
    pub scene: String,
    pub detections: Vec<BoxRecord>,
}

pub fn write_detections<W: Write>(mut w: W, scenes: &[SceneDetections]) -> Result<()> {
    for s in scenes {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_detections<R: BufRead>(r: R) -> Result<Vec<SceneDetections>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SceneDetections =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("detections line {}: {e}", i + 1)))?;
        if let Some(bad) = s.detections.iter().find(|d| !d.score.is_some_and(f64::is_finite)) {
            return Err(Error::Format(format!(
                "detections line {}: missing or non-finite score {:?}",
                i + 1,
                bad.score
            )));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_detections(path: &Path) -> Result<Vec<SceneDetections>> {
    read_detections(std::io::BufReader::new(std::fs::File::open(path)?))
}
