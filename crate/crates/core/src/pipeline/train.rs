use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{map_report, SceneEval, THRESHOLDS};
use crate::geometry::BBox3D;
use crate::kernels::{adam_step, lr_schedule, AdamState, Graph};
use crate::rng::Rng;
use crate::rpn::mean_anchor_sizes;
use crate::synth::{generate_scene, load_dir, LabeledScene};

use super::config::{DataConfig, PipelineConfig};
use super::model::{InferMode, LossBreakdown, Model, SceneInput, StageTargets};

/// Training and validation scenes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<LabeledScene>,
    pub val: Vec<LabeledScene>,
}

impl Dataset {
    /// `dir/train` and `dir/val` when both exist, otherwise every scene in
    /// `dir` is a training scene.
    pub fn from_dir(dir: &Path, classes: &[String]) -> Result<Dataset> {
        let (tr, va) = (dir.join("train"), dir.join("val"));
        let strip = |v: Vec<(String, LabeledScene)>| v.into_iter().map(|(_, s)| s).collect();
        if tr.is_dir() && va.is_dir() {
            return Ok(Dataset {
                train: strip(load_dir(&tr, classes)?),
                val: strip(load_dir(&va, classes)?),
            });
        }
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "dataset directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Dataset {
            train: strip(load_dir(dir, classes)?),
            val: Vec::new(),
        })
    }

    /// Training scenes use seeds `seed..seed + train_count`, validation
    /// scenes continue after them.
    pub fn generate(data: &DataConfig) -> Result<Dataset> {
        let gen = |from: usize, count: usize| -> Result<Vec<LabeledScene>> {
            (from..from + count)
                .map(|i| generate_scene(&data.scenes, data.seed.wrapping_add(i as u64)))
                .collect()
        };
        Ok(Dataset {
            train: gen(0, data.train_count)?,
            val: gen(data.train_count, data.val_count)?,
        })
    }

    pub fn from_config(cfg: &PipelineConfig) -> Result<Dataset> {
        match &cfg.data.dir {
            Some(dir) => Dataset::from_dir(dir, &cfg.classes),
            None => Dataset::generate(&cfg.data),
        }
    }
}

/// Ground truth re-indexed into the config's class list.
pub fn scene_gts(scene: &LabeledScene, classes: &[String]) -> Result<Vec<(BBox3D, usize)>> {
    scene
        .gts
        .iter()
        .map(|(b, c)| {
            let name = scene
                .classes
                .get(*c)
                .ok_or_else(|| Error::Format(format!("class index {c} out of range")))?;
            let idx = classes
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::Config(format!("class `{name}` is not in the config class list")))?;
            Ok((*b, idx))
        })
        .collect()
}

/// Fill in per-class mean anchor sizes from the training ground truth
/// unless the config lists them.
pub fn resolve_anchors(cfg: &PipelineConfig, train: &[LabeledScene]) -> Result<PipelineConfig> {
    let mut out = cfg.clone();
    if !out.anchors.is_empty() {
        return Ok(out);
    }
    let mut per_class: Vec<(String, Vec<BBox3D>)> = cfg.classes.iter().map(|c| (c.clone(), Vec::new())).collect();
    for s in train {
        for (b, c) in scene_gts(s, &cfg.classes)? {
            per_class[c].1.push(b);
        }
    }
    out.anchors = mean_anchor_sizes(&per_class)?;
    Ok(out)
}

/// A scene ready for the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub input: SceneInput,
    pub gts: Vec<(BBox3D, usize)>,
}

pub fn prepare_scenes(model: &Model, scenes: &[LabeledScene]) -> Result<Vec<Prepared>> {
    scenes
        .iter()
        .map(|s| {
            Ok(Prepared {
                input: model.prepare(&s.cloud, s.seed)?,
                gts: scene_gts(s, &model.cfg.classes)?,
            })
        })
        .collect()
}

/// mAP of both inference modes over prepared scenes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModeMaps {
    pub baseline: f64,
    pub full: Option<f64>,
}

pub fn evaluate(model: &Model, scenes: &[Prepared]) -> Result<ModeMaps> {
    let mut base = Vec::with_capacity(scenes.len());
    let mut full = Vec::with_capacity(scenes.len());
    for s in scenes {
        let (b, f) = model.detect_both(&s.input)?;
        base.push(SceneEval {
            dets: b,
            gts: s.gts.clone(),
        });
        if let Some(f) = f {
            full.push(SceneEval {
                dets: f,
                gts: s.gts.clone(),
            });
        }
    }
    let map = |v: &[SceneEval]| map_report(v, &model.cfg.classes, &THRESHOLDS, model.cfg.eval_mode).map;
    Ok(ModeMaps {
        baseline: map(&base),
        full: model.cfg.switches.second_stage.then(|| map(&full)),
    })
}

/// mAP of the mode the config trains for.
pub fn evaluate_mode(model: &Model, scenes: &[Prepared], mode: InferMode) -> Result<f64> {
    let m = evaluate(model, scenes)?;
    Ok(match (mode, m.full) {
        (InferMode::Full, Some(f)) => f,
        _ => m.baseline,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
    pub first_step_loss: LossBreakdown,
    pub mean_loss: LossBreakdown,
    pub val_map: Option<f64>,
    pub val_map_baseline: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub epochs: Vec<EpochLog>,
}

/// Joint two-stage training, one scene per step, single-threaded.
pub fn train(cfg: &PipelineConfig, data: &Dataset, on_epoch: &mut dyn FnMut(&EpochLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidArgument("no training scenes".into()));
    }
    let cfg = resolve_anchors(cfg, &data.train)?;
    let mut model = Model::init(cfg)?;
    let train_set = prepare_scenes(&model, &data.train)?;
    let val_set = prepare_scenes(&model, &data.val)?;
    let targets: Vec<StageTargets> = train_set.iter().map(|s| model.rpn_targets(&s.gts)).collect();
    let tc = model.cfg.train.clone();
    let total_steps = tc.epochs * train_set.len();
    let mut adam = AdamState::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut logs = Vec::with_capacity(tc.epochs);
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let mut rng = Rng::derive(tc.seed, 0x5eed_0000 + epoch as u64);
        let n = order.len();
        rng.shuffle_prefix(&mut order, n);
        let mut mean = LossBreakdown::default();
        let mut first = None;
        let mut lr = 0.0;
        for &i in &order {
            let (rate, beta1) = lr_schedule(step, total_steps, &tc.schedule);
            lr = rate;
            let mut g = Graph::new();
            let (loss, parts) = model.scene_loss(&mut g, &train_set[i].input, &train_set[i].gts, &targets[i])?;
            if !parts.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    breakdown: serde_json::to_string(&parts)?,
                });
            }
            g.backward(loss)?;
            let grads = g.param_grads(&model.store);
            adam_step(&mut model.store, &grads, &mut adam, rate, beta1, &tc.adam)?;
            first.get_or_insert(parts);
            mean.add(&parts);
            step += 1;
        }
        mean.scale(1.0 / n as f64);
        let maps = if tc.validate_each_epoch && !val_set.is_empty() {
            Some(evaluate(&model, &val_set)?)
        } else {
            None
        };
        let log = EpochLog {
            epoch,
            steps: n,
            lr,
            first_step_loss: first.unwrap_or_default(),
            mean_loss: mean,
            val_map: maps.map(|m| m.full.unwrap_or(m.baseline)),
            val_map_baseline: maps.map(|m| m.baseline),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(TrainOutcome { model, epochs: logs })
}

/// Train on a dataset directory and write `model.ckpt`, `config.toml` and
/// `train_log.jsonl` into `out`.
pub fn train_dir(cfg: &PipelineConfig, data_dir: &Path, out: &Path) -> Result<TrainOutcome> {
    let data = Dataset::from_dir(data_dir, &cfg.classes)?;
    std::fs::create_dir_all(out)?;
    let mut log = std::fs::File::create(out.join("train_log.jsonl"))?;
    let mut err = None;
    let outcome = train(cfg, &data, &mut |e| {
        let line = serde_json::to_string(e).map_err(Error::from);
        if let Err(x) = line.and_then(|l| writeln!(log, "{l}").map_err(Error::from)) {
            err.get_or_insert(x);
        }
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    outcome.model.save(out)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::checkpoint;
    use crate::pipeline::model::CHECKPOINT_FILE;
    use crate::synth::{Region, SceneSpec};

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.grid.x_max = 16.0;
        cfg.grid.y_min = -8.0;
        cfg.grid.y_max = 8.0;
        cfg.model.backbone_channels = vec![8, 8];
        cfg.model.pfn_channels = 8;
        cfg.model.fc_width = 16;
        cfg.proposals.pre_nms = 100;
        cfg.proposals.post_nms = 20;
        cfg.train.epochs = 2;
        cfg.data = DataConfig {
            scenes: SceneSpec {
                region: Region {
                    x_min: 0.0,
                    x_max: 16.0,
                    y_min: -8.0,
                    y_max: 8.0,
                },
                num_objects_min: 1,
                num_objects_max: 3,
                ..SceneSpec::default()
            },
            train_count: 4,
            val_count: 2,
            ..DataConfig::default()
        };
        cfg
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut cfg = tiny();
        cfg.train.epochs = 0;
        let data = Dataset::generate(&cfg.data).unwrap();
        let out = train(&cfg, &data, &mut |_| {}).unwrap();
        let fresh = Model::init(resolve_anchors(&cfg, &data.train).unwrap()).unwrap();
        assert_eq!(checkpoint::encode(&out.model.store), checkpoint::encode(&fresh.store));
        assert!(out.epochs.is_empty());
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data).unwrap();
        let a = train(&cfg, &data, &mut |_| {}).unwrap();
        let b = train(&cfg, &data, &mut |_| {}).unwrap();
        assert_eq!(checkpoint::encode(&a.model.store), checkpoint::encode(&b.model.store));
        assert_eq!(a.epochs, b.epochs);
        let mut other = cfg.clone();
        other.train.seed = 9;
        let c = train(&other, &data, &mut |_| {}).unwrap();
        assert_ne!(checkpoint::encode(&a.model.store), checkpoint::encode(&c.model.store));
    }

    #[test]
    fn epoch_logs_carry_validation_map() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data).unwrap();
        let mut seen = 0;
        let out = train(&cfg, &data, &mut |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        for e in &out.epochs {
            assert!(e.mean_loss.is_finite());
            let m = e.val_map.unwrap();
            assert!((0.0..=1.0).contains(&m));
            assert!(e.val_map_baseline.is_some());
        }
    }

    #[test]
    fn train_dir_writes_artifacts() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in data.train.iter().enumerate() {
            s.save(&dir.path().join("train"), &format!("s{i}")).unwrap();
        }
        for (i, s) in data.val.iter().enumerate() {
            s.save(&dir.path().join("val"), &format!("s{i}")).unwrap();
        }
        let out = dir.path().join("run");
        train_dir(&cfg, dir.path(), &out).unwrap();
        assert!(out.join(CHECKPOINT_FILE).exists());
        let saved = PipelineConfig::load(&out.join("config.toml")).unwrap();
        assert_eq!(saved.anchors.len(), 1);
        let log = std::fs::read_to_string(out.join("train_log.jsonl")).unwrap();
        assert_eq!(log.lines().count(), 2);
        Model::load(&out.join(CHECKPOINT_FILE)).unwrap();
    }

    #[test]
    fn unknown_class_is_a_config_error() {
        let cfg = PipelineConfig {
            classes: vec!["pedestrian".into()],
            ..tiny()
        };
        let data = Dataset::generate(&tiny().data).unwrap();
        assert_eq!(train(&cfg, &data, &mut |_| {}).unwrap_err().kind(), "config");
    }
}
