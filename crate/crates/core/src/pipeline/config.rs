use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::ApMode;
use crate::kernels::{AdamConfig, OneCycle};
use crate::pillars::PillarGridSpec;
use crate::rpn::{AnchorSize, ProposalConfig};
use crate::synth::SceneSpec;
use crate::targets::{AssignmentConfig, LossWeights, Stage};

/// Rotated RoIAlign pooling used in place of PoI pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum RroiMode {
    #[default]
    #[serde(rename = "off")]
    Off,
    #[serde(rename = "4x4")]
    R4x4,
    #[serde(rename = "8x4")]
    R8x4,
}

impl RroiMode {
    /// Bins along the box length and across its width.
    pub fn pooled(self) -> Option<(usize, usize)> {
        match self {
            RroiMode::Off => None,
            RroiMode::R4x4 => Some((4, 4)),
            RroiMode::R8x4 => Some((8, 4)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSwitches {
    pub poi_pool: bool,
    pub visibility: bool,
    pub adaptive: bool,
    pub second_stage: bool,
    pub rroi: RroiMode,
}

impl Default for AblationSwitches {
    fn default() -> Self {
        AblationSwitches::full()
    }
}

impl AblationSwitches {
    pub fn full() -> Self {
        AblationSwitches {
            poi_pool: true,
            visibility: true,
            adaptive: true,
            second_stage: true,
            rroi: RroiMode::Off,
        }
    }

    /// RPN only.
    pub fn baseline() -> Self {
        AblationSwitches {
            poi_pool: false,
            visibility: false,
            adaptive: false,
            second_stage: false,
            rroi: RroiMode::Off,
        }
    }

    pub fn poi(visibility: bool, adaptive: bool) -> Self {
        AblationSwitches {
            visibility,
            adaptive,
            ..AblationSwitches::full()
        }
    }

    pub fn rroi(mode: RroiMode) -> Self {
        AblationSwitches {
            poi_pool: false,
            visibility: false,
            adaptive: false,
            second_stage: true,
            rroi: mode,
        }
    }

    /// The five PoI rows followed by the two RoIAlign rows.
    pub fn table_rows() -> Vec<AblationSwitches> {
        vec![
            AblationSwitches::baseline(),
            AblationSwitches::poi(false, false),
            AblationSwitches::poi(true, false),
            AblationSwitches::poi(false, true),
            AblationSwitches::full(),
            AblationSwitches::rroi(RroiMode::R4x4),
            AblationSwitches::rroi(RroiMode::R8x4),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSwitches(m.to_string()));
        if (self.visibility || self.adaptive) && !self.poi_pool {
            return bad("visibility and adaptive attention require poi_pool");
        }
        if self.poi_pool && self.rroi != RroiMode::Off {
            return bad("rroi and poi_pool are mutually exclusive");
        }
        let pooled = self.poi_pool || self.rroi != RroiMode::Off;
        if self.second_stage && !pooled {
            return bad("second_stage needs poi_pool or rroi");
        }
        if !self.second_stage && pooled {
            return bad("pooling switches require second_stage");
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        if !self.second_stage {
            return "baseline".into();
        }
        match self.rroi {
            RroiMode::R4x4 => return "rroi_4x4".into(),
            RroiMode::R8x4 => return "rroi_8x4".into(),
            RroiMode::Off => {}
        }
        let mut s = String::from("poi_pool");
        if self.visibility {
            s.push_str("+vis");
        }
        if self.adaptive {
            s.push_str("+adp");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Width of the per-point linear layer.
    pub pfn_channels: usize,
    /// Output widths of the 3x3 convolutions; the first one downsamples.
    pub backbone_channels: Vec<usize>,
    /// Stride of the first convolution, and so of the head grid.
    pub downsample: usize,
    /// Key-points per edge; 5 + 4n PoIs per proposal.
    pub n_keypoints: usize,
    pub fc_width: usize,
    pub rroi_samples_per_bin: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            pfn_channels: 16,
            backbone_channels: vec![32, 32, 32],
            downsample: 2,
            n_keypoints: 2,
            fc_width: 512,
            rroi_samples_per_bin: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Thresholds {
    pub fn assignment(&self, stage: Stage) -> AssignmentConfig {
        AssignmentConfig {
            pos_iou: self.pos_iou,
            neg_iou: self.neg_iou,
            stage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub rpn: LossWeights,
    pub infofocus: LossWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            rpn: LossWeights::default(),
            infofocus: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub final_nms: f64,
    pub score_floor: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            final_nms: 0.5,
            score_floor: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub schedule: OneCycle,
    /// Evaluate on the validation split after every epoch.
    pub validate_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            seed: 0,
            adam: AdamConfig::default(),
            schedule: OneCycle::default(),
            validate_each_epoch: true,
        }
    }
}

/// Where `ablate` gets its scenes: a directory with `train/` and `val/`,
/// or in-memory generation from `scenes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub dir: Option<PathBuf>,
    pub scenes: SceneSpec,
    pub train_count: usize,
    pub val_count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dir: None,
            scenes: SceneSpec::default(),
            train_count: 200,
            val_count: 50,
            seed: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub classes: Vec<String>,
    /// Per-class anchor sizes; empty means class means of the training set.
    pub anchors: Vec<AnchorSize>,
    /// BEV position of the sensor.
    pub sensor: [f64; 2],
    pub eval_mode: ApMode,
    pub grid: PillarGridSpec,
    pub model: ModelConfig,
    pub switches: AblationSwitches,
    pub loss: LossConfig,
    pub rpn_assign: Thresholds,
    pub infofocus_assign: Thresholds,
    pub proposals: ProposalConfig,
    pub inference: InferenceConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            classes: vec!["vehicle".into()],
            anchors: Vec::new(),
            sensor: [0.0, 0.0],
            eval_mode: ApMode::default(),
            grid: PillarGridSpec::default(),
            model: ModelConfig::default(),
            switches: AblationSwitches::default(),
            loss: LossConfig::default(),
            rpn_assign: Thresholds {
                pos_iou: 0.6,
                neg_iou: 0.45,
            },
            infofocus_assign: Thresholds {
                pos_iou: 0.6,
                neg_iou: 0.55,
            },
            proposals: ProposalConfig::default(),
            inference: InferenceConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.grid.validate()?;
        self.switches.validate()?;
        self.data.scenes.validate()?;
        if self.classes.is_empty() {
            return bad("at least one class is required".into());
        }
        if !self.anchors.is_empty() {
            let names: Vec<&String> = self.anchors.iter().map(|a| &a.class).collect();
            if names.len() != self.classes.len() || names.iter().zip(&self.classes).any(|(a, b)| *a != b) {
                return bad("anchors must list the classes in order".into());
            }
        }
        let m = &self.model;
        if m.pfn_channels == 0 || m.backbone_channels.is_empty() || m.backbone_channels.contains(&0) {
            return bad("model widths must be positive and the backbone non-empty".into());
        }
        if m.downsample == 0 || m.fc_width == 0 || m.rroi_samples_per_bin == 0 {
            return bad("downsample, fc_width and rroi_samples_per_bin must be positive".into());
        }
        if !self.grid.rows().is_multiple_of(m.downsample) || !self.grid.cols().is_multiple_of(m.downsample) {
            return bad(format!(
                "grid {}x{} is not divisible by downsample {}",
                self.grid.rows(),
                self.grid.cols(),
                m.downsample
            ));
        }
        self.rpn_assign.assignment(Stage::Rpn).validate()?;
        self.infofocus_assign.assignment(Stage::Infofocus).validate()?;
        let l = &self.loss;
        if !(l.focal_alpha >= 0.0 && l.focal_alpha <= 1.0 && l.focal_gamma >= 0.0) {
            return bad("focal_alpha must be in [0, 1] and focal_gamma non-negative".into());
        }
        for w in [l.rpn, l.infofocus] {
            if [w.cls, w.reg, w.dir].iter().any(|v| !(*v >= 0.0)) {
                return bad("loss weights must be non-negative".into());
            }
        }
        let p = &self.proposals;
        if p.pre_nms == 0 || p.post_nms == 0 || !(0.0..=1.0).contains(&p.nms_iou) {
            return bad("proposal caps must be positive and nms_iou in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.inference.final_nms) || !(self.inference.score_floor >= 0.0) {
            return bad("final_nms must be in [0, 1] and score_floor non-negative".into());
        }
        let s = &self.train.schedule;
        if [s.lr_start, s.lr_max, s.lr_final].iter().any(|v| !(*v >= 0.0))
            || !(0.0..=1.0).contains(&s.warmup_fraction)
            || !(0.0..1.0).contains(&s.beta_low)
            || !(0.0..1.0).contains(&s.beta_high)
        {
            return bad("invalid one-cycle schedule".into());
        }
        let a = &self.train.adam;
        if !(a.weight_decay >= 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta2)) {
            return bad("invalid adam settings".into());
        }
        if !self.sensor.iter().all(|v| v.is_finite()) {
            return bad("sensor position must be finite".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

/// Rows and seeds of an ablation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationSwitches>,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            seeds: vec![0, 1, 2],
            rows: AblationSwitches::table_rows(),
        }
    }
}

impl AblationGrid {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.rows.is_empty() {
            return Err(Error::Config(
                "ablation grid needs at least one seed and one row".into(),
            ));
        }
        self.rows.iter().try_for_each(AblationSwitches::validate)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let g: AblationGrid = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}
