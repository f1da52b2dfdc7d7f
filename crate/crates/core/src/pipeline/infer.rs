use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::eval::{map_report, ApMode, Detection, EvalReport, SceneDetections, SceneEval, THRESHOLDS};
use crate::pillars::PointCloud;
use crate::synth::{load_dir, BoxRecord, SceneLabels};

use super::model::{InferMode, Model};

/// A point cloud to run on, with the seed used for pillar subsampling.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudFile {
    pub name: String,
    pub cloud: PointCloud,
    pub seed: u64,
}

/// Every `*.pcl` or `*.csv` cloud in `dir`, sorted by name. The seed comes
/// from a `<name>.json` label sidecar when present, else 0.
pub fn load_clouds(dir: &Path) -> Result<Vec<CloudFile>> {
    let mut paths = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "pcl" || e == "csv") {
            paths.push(path);
        }
    }
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Format(format!("bad file name {}", p.display())))?
                .to_string();
            let sidecar = dir.join(format!("{name}.json"));
            let seed = if sidecar.exists() {
                serde_json::from_str::<SceneLabels>(&std::fs::read_to_string(&sidecar)?)?.seed
            } else {
                0
            };
            Ok(CloudFile {
                cloud: PointCloud::load(p)?,
                name,
                seed,
            })
        })
        .collect()
}

pub fn to_records(dets: &[Detection], classes: &[String]) -> Vec<BoxRecord> {
    dets.iter()
        .map(|d| BoxRecord::new(&d.bbox, &classes[d.class], Some(d.score)))
        .collect()
}

pub fn infer_clouds(model: &Model, clouds: &[CloudFile], mode: InferMode) -> Result<Vec<SceneDetections>> {
    clouds
        .iter()
        .map(|c| {
            let input = model.prepare(&c.cloud, c.seed)?;
            let dets = model.detect(&input, mode)?;
            Ok(SceneDetections {
                scene: c.name.clone(),
                detections: to_records(&dets, &model.cfg.classes),
            })
        })
        .collect()
}

/// Load a checkpoint and run it on every cloud in `dir`.
pub fn infer_dir(ckpt: &Path, dir: &Path, mode: InferMode) -> Result<Vec<SceneDetections>> {
    let model = Model::load(ckpt)?;
    infer_clouds(&model, &load_clouds(dir)?, mode)
}

/// Score a detections file against the labeled scenes in `gts_dir`.
///
/// Classes are those of the ground truth in order of first appearance;
/// detections of other classes are ignored. Scenes without a detections
/// line count as empty.
pub fn evaluate_detections(dets: &[SceneDetections], gts_dir: &Path, mode: ApMode) -> Result<EvalReport> {
    let scenes = load_dir(gts_dir, &[])?;
    let mut classes: Vec<String> = Vec::new();
    for (_, s) in &scenes {
        for (_, c) in &s.gts {
            if !classes.contains(&s.classes[*c]) {
                classes.push(s.classes[*c].clone());
            }
        }
    }
    let mut by_name: BTreeMap<&str, &SceneDetections> = BTreeMap::new();
    for d in dets {
        if by_name.insert(&d.scene, d).is_some() {
            return Err(Error::Format(format!(
                "scene `{}` appears twice in detections",
                d.scene
            )));
        }
    }
    if let Some(unknown) = by_name.keys().find(|k| !scenes.iter().any(|(n, _)| n == *k)) {
        return Err(Error::Format(format!("detections for unknown scene `{unknown}`")));
    }
    let mut evals = Vec::with_capacity(scenes.len());
    for (name, s) in &scenes {
        let gts = s
            .gts
            .iter()
            .map(|(b, c)| {
                (
                    *b,
                    classes.iter().position(|n| *n == s.classes[*c]).unwrap_or(usize::MAX),
                )
            })
            .collect();
        let mut found = Vec::new();
        if let Some(d) = by_name.get(name.as_str()) {
            for r in &d.detections {
                if let Some(class) = classes.iter().position(|n| *n == r.class) {
                    found.push(Detection {
                        bbox: r.bbox()?,
                        class,
                        score: r.score.unwrap_or(0.0),
                    });
                }
            }
        }
        evals.push(SceneEval { dets: found, gts });
    }
    Ok(map_report(&evals, &classes, &THRESHOLDS, mode))
}
