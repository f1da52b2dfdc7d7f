use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

use super::infer::CloudFile;
use super::model::{InferMode, Model, StageTimes, STAGE_NAMES};

/// Median per-stage wall time over repeats, in milliseconds. Each repeat
/// runs every scene once; stage times are summed over scenes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub stages_ms: BTreeMap<String, f64>,
    pub stage_sum_ms: f64,
    pub total_ms: f64,
    pub repeats: usize,
    pub scenes: usize,
}

impl BenchReport {
    /// `|sum of stages - end to end| / end to end`.
    pub fn accounting_error(&self) -> f64 {
        if self.total_ms > 0.0 {
            (self.stage_sum_ms - self.total_ms).abs() / self.total_ms
        } else {
            0.0
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn bench(model: &Model, clouds: &[CloudFile], repeats: usize) -> Result<BenchReport> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("bench needs at least one scene".into()));
    }
    let repeats = repeats.max(1);
    let mut per_stage: Vec<Vec<f64>> = vec![Vec::with_capacity(repeats); STAGE_NAMES.len()];
    let mut totals = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let mut sums = [0.0; 6];
        let mut total = 0.0;
        for c in clouds {
            let start = Instant::now();
            let input = model.prepare(&c.cloud, c.seed)?;
            let prep = start.elapsed().as_secs_f64();
            let mut times = StageTimes::default();
            model.detect_timed(&input, InferMode::Full, &mut times)?;
            total += start.elapsed().as_secs_f64();
            // pillarization belongs to pillar feature extraction
            sums[0] += prep;
            for (s, t) in sums.iter_mut().zip(times.0) {
                *s += t;
            }
        }
        for (k, s) in sums.iter().enumerate() {
            per_stage[k].push(1e3 * s);
        }
        totals.push(1e3 * total);
    }
    let mut stages_ms = BTreeMap::new();
    let mut stage_sum_ms = 0.0;
    for (name, v) in STAGE_NAMES.iter().zip(per_stage.iter_mut()) {
        let m = median(v);
        stage_sum_ms += m;
        stages_ms.insert(name.to_string(), m);
    }
    Ok(BenchReport {
        stages_ms,
        stage_sum_ms,
        total_ms: median(&mut totals),
        repeats,
        scenes: clouds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::PipelineConfig;
    use crate::rpn::AnchorSize;
    use crate::synth::{generate_scene, SceneSpec};

    #[test]
    fn six_stages_and_median_of_one() {
        let mut cfg = PipelineConfig::default();
        cfg.model.fc_width = 32;
        cfg.anchors = vec![AnchorSize {
            class: "vehicle".into(),
            w: 1.9,
            l: 4.6,
            h: 1.7,
            z: 0.85,
        }];
        let model = Model::init(cfg).unwrap();
        let s = generate_scene(&SceneSpec::default(), 3).unwrap();
        let clouds = vec![CloudFile {
            name: "a".into(),
            cloud: s.cloud,
            seed: 3,
        }];
        let r = bench(&model, &clouds, 1).unwrap();
        let keys: Vec<&str> = r.stages_ms.keys().map(String::as_str).collect();
        let mut want = STAGE_NAMES.to_vec();
        want.sort();
        assert_eq!(keys, want);
        assert_eq!(r.repeats, 1);
        assert!(r.stages_ms.values().all(|v| *v > 0.0));
        assert!(r.accounting_error() < 0.10, "{r:?}");
        assert!(bench(&model, &[], 1).is_err());
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
    }
}
