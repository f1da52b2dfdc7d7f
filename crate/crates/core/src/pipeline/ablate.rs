use serde::Serialize;

use crate::error::{Error, Result};

use super::config::{AblationGrid, AblationSwitches, PipelineConfig};
use super::model::InferMode;
use super::train::{evaluate_mode, prepare_scenes, train, Dataset};

/// Validation mAP of one switch combination over the grid seeds, in percent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub switches: AblationSwitches,
    pub seeds: Vec<u64>,
    pub maps: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train and evaluate every row with every seed on the same scenes.
/// `progress` sees each finished (row label, seed, mAP).
pub fn ablate(
    cfg: &PipelineConfig,
    grid: &AblationGrid,
    data: &Dataset,
    progress: &mut dyn FnMut(&str, u64, f64),
) -> Result<Vec<AblationRow>> {
    grid.validate()?;
    if data.val.is_empty() {
        return Err(Error::InvalidArgument("ablation needs validation scenes".into()));
    }
    let mut rows = Vec::with_capacity(grid.rows.len());
    for sw in &grid.rows {
        let mut maps = Vec::with_capacity(grid.seeds.len());
        for &seed in &grid.seeds {
            let mut c = cfg.clone();
            c.switches = *sw;
            c.train.seed = seed;
            c.train.validate_each_epoch = false;
            let out = train(&c, data, &mut |_| {})?;
            let val = prepare_scenes(&out.model, &data.val)?;
            let map = 100.0 * evaluate_mode(&out.model, &val, InferMode::Full)?;
            progress(&sw.label(), seed, map);
            maps.push(map);
        }
        let (mean, std) = mean_std(&maps);
        rows.push(AblationRow {
            label: sw.label(),
            switches: *sw,
            seeds: grid.seeds.clone(),
            maps,
            mean,
            std,
        });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let rroi = |s: &AblationSwitches| s.rroi.pooled().map_or("off".to_string(), |(a, b)| format!("{a}x{b}"));
    let mut s = String::from("row,poi_pool,vis_att,adp_att,second_stage,rroi,map_mean,map_std,seed_maps\n");
    for r in rows {
        let seeds: Vec<String> = r.maps.iter().map(|m| format!("{m:.4}")).collect();
        s.push_str(&format!(
            "{},{},{},{},{},{},{:.4},{:.4},{}\n",
            r.label,
            r.switches.poi_pool,
            r.switches.visibility,
            r.switches.adaptive,
            r.switches.second_stage,
            rroi(&r.switches),
            r.mean,
            r.std,
            seeds.join(";")
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::config::{DataConfig, RroiMode};
    use crate::synth::{Region, SceneSpec};

    fn tiny() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.grid.x_max = 16.0;
        cfg.grid.y_min = -8.0;
        cfg.grid.y_max = 8.0;
        cfg.model.backbone_channels = vec![8];
        cfg.model.pfn_channels = 8;
        cfg.model.fc_width = 16;
        cfg.proposals.pre_nms = 50;
        cfg.proposals.post_nms = 10;
        cfg.train.epochs = 1;
        cfg.data = DataConfig {
            scenes: SceneSpec {
                region: Region {
                    x_min: 0.0,
                    x_max: 16.0,
                    y_min: -8.0,
                    y_max: 8.0,
                },
                num_objects_min: 1,
                num_objects_max: 2,
                ..SceneSpec::default()
            },
            train_count: 2,
            val_count: 2,
            ..DataConfig::default()
        };
        cfg
    }

    #[test]
    fn single_row_grid_gives_single_row_table() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data).unwrap();
        let grid = AblationGrid {
            seeds: vec![0],
            rows: vec![AblationSwitches::full()],
        };
        let rows = ablate(&cfg, &grid, &data, &mut |_, _, _| {}).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].std, 0.0);
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), 2);
        assert!(csv
            .lines()
            .nth(1)
            .unwrap()
            .starts_with("poi_pool+vis+adp,true,true,true,true,off,"));
    }

    #[test]
    fn table_rows_include_baseline_and_rroi() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data).unwrap();
        let grid = AblationGrid {
            seeds: vec![0, 1],
            rows: AblationSwitches::table_rows(),
        };
        let mut calls = 0;
        let rows = ablate(&cfg, &grid, &data, &mut |_, _, _| calls += 1).unwrap();
        assert_eq!(calls, 14);
        let csv = ablation_csv(&rows);
        let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(labels[0], "baseline");
        assert!(csv.contains("rroi_4x4,false,false,false,true,4x4,"));
        assert!(csv.contains("rroi_8x4,false,false,false,true,8x4,"));
        for r in &rows {
            assert_eq!(r.maps.len(), 2);
            assert!(r.maps.iter().all(|m| (0.0..=100.0).contains(m)));
        }
    }

    #[test]
    fn invalid_row_rejected() {
        let cfg = tiny();
        let data = Dataset::generate(&cfg.data).unwrap();
        let mut bad = AblationSwitches::full();
        bad.rroi = RroiMode::R8x4;
        let grid = AblationGrid {
            seeds: vec![0],
            rows: vec![bad],
        };
        assert_eq!(
            ablate(&cfg, &grid, &data, &mut |_, _, _| {}).unwrap_err().kind(),
            "invalid_switches"
        );
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }
}
