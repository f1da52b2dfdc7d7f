use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{rotated_nms, BBox3D, BBoxBEV};
use crate::infofocus::{self, FmapFrame, HeadOutput, PoiSwitches};
use crate::kernels::{checkpoint, Graph, ParamStore, Tensor, Var};
use crate::pillars::{decorate, pillarize, PillarGridSpec, PointCloud, DECORATED_DIM};
use crate::rng::Rng;
use crate::rpn::{self, propose, AnchorSet, ProposalSet, RpnOutput, ORIENTATIONS};
use crate::targets::{assign, decode_with_direction, direction_target, encode, BoxResidual, Label, LossWeights, Stage};

use super::config::PipelineConfig;

/// Network input of one scene: decorated, normalized point rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneInput {
    /// `[P * N, 9]`.
    pub points: Tensor,
    /// 1 for real points, `[P * N]`.
    pub mask: Vec<f64>,
    /// Flat pseudo-image cell of every pillar.
    pub cells: Vec<usize>,
    pub pillars: usize,
    pub slots: usize,
}

/// Per-channel affine map applied to decorated points so that absolute
/// positions span roughly [-1, 1] and pillar offsets are in pillar units.
fn input_scaling(grid: &PillarGridSpec) -> ([f64; DECORATED_DIM], [f64; DECORATED_DIM]) {
    let hx = 0.5 * (grid.x_max - grid.x_min);
    let hy = 0.5 * (grid.y_max - grid.y_min);
    let shift = [grid.x_min + hx, grid.y_min + hy, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    let scale = [
        1.0 / hx,
        1.0 / hy,
        1.0,
        1.0,
        1.0 / grid.pillar_dx,
        1.0 / grid.pillar_dy,
        1.0,
        1.0 / grid.pillar_dx,
        1.0 / grid.pillar_dy,
    ];
    (shift, scale)
}

/// Pillarize, decorate and normalize a cloud.
pub fn prepare(cloud: &PointCloud, grid: &PillarGridSpec, seed: u64) -> Result<SceneInput> {
    let t = decorate(&pillarize(cloud, grid, seed), grid)?;
    let mask = t.point_mask();
    let mut points = t.point_rows();
    let (shift, scale) = input_scaling(grid);
    for (i, v) in points.data.iter_mut().enumerate() {
        let d = i % DECORATED_DIM;
        if mask[i / DECORATED_DIM] != 0.0 {
            *v = (*v - shift[d]) * scale[d];
        }
    }
    let cols = grid.cols();
    Ok(SceneInput {
        points,
        mask,
        cells: t.coords.iter().map(|&(r, c)| r * cols + c).collect(),
        pillars: t.num_pillars(),
        slots: t.n,
    })
}

/// Regression, classification and direction targets of one stage.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StageTargets {
    pub cls: Vec<f64>,
    pub cls_weight: Vec<f64>,
    pub reg: Vec<f64>,
    pub reg_weight: Vec<f64>,
    pub dir: Vec<usize>,
    pub dir_weight: Vec<f64>,
    pub n_pos: usize,
}

/// Class-wise assignment of `boxes` (each tagged with a class) against
/// the ground truth, then residual and direction targets for positives.
pub fn stage_targets(
    boxes: &[BBox3D],
    box_class: &[usize],
    gts: &[(BBox3D, usize)],
    num_classes: usize,
    cfg: &crate::targets::AssignmentConfig,
) -> StageTargets {
    let n = boxes.len();
    let mut t = StageTargets {
        cls: vec![0.0; n],
        cls_weight: vec![0.0; n],
        reg: vec![0.0; 7 * n],
        reg_weight: vec![0.0; n],
        dir: vec![0; n],
        dir_weight: vec![0.0; n],
        n_pos: 0,
    };
    for class in 0..num_classes {
        let idx: Vec<usize> = (0..n).filter(|&i| box_class[i] == class).collect();
        let subset: Vec<BBox3D> = idx.iter().map(|&i| boxes[i]).collect();
        let gt: Vec<BBox3D> = gts.iter().filter(|g| g.1 == class).map(|g| g.0).collect();
        for (label, &i) in assign(&subset, &gt, cfg).iter().zip(&idx) {
            match *label {
                Label::Positive(j) => {
                    t.cls[i] = 1.0;
                    t.cls_weight[i] = 1.0;
                    t.reg[7 * i..7 * i + 7].copy_from_slice(&encode(&gt[j], &boxes[i]).to_array());
                    t.reg_weight[i] = 1.0;
                    t.dir[i] = direction_target(gt[j].theta, boxes[i].theta);
                    t.dir_weight[i] = 1.0;
                    t.n_pos += 1;
                }
                Label::Negative => t.cls_weight[i] = 1.0,
                Label::Ignore => {}
            }
        }
    }
    t
}

/// Weighted components of one stage loss, already divided by the number
/// of positives, so they add up to the stage total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StageLoss {
    pub cls: f64,
    pub reg: f64,
    pub dir: f64,
    pub total: f64,
}

impl StageLoss {
    fn add(&mut self, o: &StageLoss) {
        self.cls += o.cls;
        self.reg += o.reg;
        self.dir += o.dir;
        self.total += o.total;
    }

    fn scale(&mut self, k: f64) {
        self.cls *= k;
        self.reg *= k;
        self.dir *= k;
        self.total *= k;
    }

    fn is_finite(&self) -> bool {
        [self.cls, self.reg, self.dir, self.total].iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rpn: StageLoss,
    pub infofocus: StageLoss,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, o: &LossBreakdown) {
        self.rpn.add(&o.rpn);
        self.infofocus.add(&o.infofocus);
        self.total += o.total;
    }

    pub fn scale(&mut self, k: f64) {
        self.rpn.scale(k);
        self.infofocus.scale(k);
        self.total *= k;
    }

    pub fn is_finite(&self) -> bool {
        self.rpn.is_finite() && self.infofocus.is_finite() && self.total.is_finite()
    }
}

/// Eq.-3 style stage loss on the graph.
pub fn stage_loss_var(
    g: &mut Graph,
    head: (Var, Var, Var),
    t: &StageTargets,
    w: &LossWeights,
    focal: (f64, f64),
) -> Result<(Var, StageLoss)> {
    let (cls, reg, dir) = head;
    let lc = g.focal_loss_sum(cls, t.cls.clone(), t.cls_weight.clone(), focal.0, focal.1)?;
    let lr = g.smooth_l1_sum(reg, t.reg.clone(), t.reg_weight.clone(), Some(6))?;
    let ld = g.softmax_ce_sum(dir, t.dir.clone(), t.dir_weight.clone())?;
    let k = 1.0 / t.n_pos.max(1) as f64;
    let parts = [(lc, w.cls * k), (lr, w.reg * k), (ld, w.dir * k)];
    let total = g.weighted_sum(&parts)?;
    let val = |g: &Graph, (v, c): (Var, f64)| c * g.value(v).item();
    let breakdown = StageLoss {
        cls: val(g, parts[0]),
        reg: val(g, parts[1]),
        dir: val(g, parts[2]),
        total: g.value(total).item(),
    };
    Ok((total, breakdown))
}

/// Which head produces the final boxes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferMode {
    Full,
    /// Decoded RPN proposals, no refinement.
    Baseline,
}

/// Wall time of the six inference stages, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimes(pub [f64; 6]);

pub const STAGE_NAMES: [&str; 6] = [
    "pillar_feature_extraction",
    "dcnn",
    "rpn",
    "proposal_generation",
    "poi_feature_extraction",
    "second_stage_head",
];

struct Lap(Instant);

impl Lap {
    fn split(&mut self) -> f64 {
        let now = Instant::now();
        let dt = now.duration_since(self.0).as_secs_f64();
        self.0 = now;
        dt
    }
}

/// Parameters plus everything needed to run them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: PipelineConfig,
    pub anchors: AnchorSet,
    pub store: ParamStore,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

impl Model {
    /// Fresh parameters for a config whose anchor sizes are resolved.
    pub fn init(cfg: PipelineConfig) -> Result<Model> {
        cfg.validate()?;
        if cfg.anchors.is_empty() {
            return Err(Error::Config("anchor sizes are not resolved".into()));
        }
        let anchors = AnchorSet::grid(&cfg.grid, cfg.model.downsample, &cfg.anchors)?;
        let mut rng = Rng::derive(cfg.train.seed, 0x1417);
        let store = init_params(&cfg, anchors.per_cell, &mut rng);
        Ok(Model { cfg, anchors, store })
    }

    /// Replace the parameters, checking names and shapes against the config.
    pub fn with_params(cfg: PipelineConfig, store: ParamStore) -> Result<Model> {
        let fresh = Model::init(cfg)?;
        let expected: Vec<(&String, &Vec<usize>)> = fresh.store.iter().map(|(n, t)| (n, &t.shape)).collect();
        let got: Vec<(&String, &Vec<usize>)> = store.iter().map(|(n, t)| (n, &t.shape)).collect();
        if expected != got {
            // report the first differing tensor, or the tensor counts
            let (left, right) = expected
                .iter()
                .zip(&got)
                .find(|(a, b)| a != b)
                .map(|(a, b)| (a.1.clone(), b.1.clone()))
                .unwrap_or_else(|| (vec![expected.len()], vec![got.len()]));
            return Err(Error::ShapeMismatch {
                op: "checkpoint",
                left,
                right,
            });
        }
        Ok(Model { store, ..fresh })
    }

    /// Write `model.ckpt` and `config.toml` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(CHECKPOINT_FILE), &self.store)?;
        self.cfg.save(&dir.join(CONFIG_FILE))
    }

    /// Load a checkpoint and the `config.toml` stored next to it.
    pub fn load(ckpt: &Path) -> Result<Model> {
        let dir = ckpt.parent().unwrap_or_else(|| Path::new("."));
        let cfg = PipelineConfig::load(&dir.join(CONFIG_FILE))?;
        Model::with_params(cfg, checkpoint::load(ckpt)?)
    }

    pub fn channels(&self) -> usize {
        *self.cfg.model.backbone_channels.last().unwrap_or(&0)
    }

    pub fn frame(&self) -> FmapFrame {
        FmapFrame {
            grid: self.cfg.grid,
            stride: self.cfg.model.downsample,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.classes.len()
    }

    /// Class of the anchor at flat index `i`.
    pub fn anchor_class(&self, i: usize) -> usize {
        (i % self.anchors.per_cell) / ORIENTATIONS.len()
    }

    pub fn prepare(&self, cloud: &PointCloud, seed: u64) -> Result<SceneInput> {
        prepare(cloud, &self.cfg.grid, seed)
    }

    /// Per-point linear layer, max over each pillar, scatter to `[C, H, W]`.
    pub fn pfn(&self, g: &mut Graph, input: &SceneInput) -> Result<Var> {
        let c = self.cfg.model.pfn_channels;
        let (h, w) = (self.cfg.grid.rows(), self.cfg.grid.cols());
        if input.pillars == 0 {
            return Ok(g.input(Tensor::zeros(&[c, h, w])));
        }
        let x = g.input(input.points.clone());
        let wv = g.param(&self.store, "pfn.w")?;
        let b = g.param(&self.store, "pfn.b")?;
        let y = g.linear(x, wv, Some(b))?;
        let y = g.relu(y);
        let mask: Vec<f64> = input.mask.iter().flat_map(|&m| std::iter::repeat_n(m, c)).collect();
        let y = g.mul_const(y, mask)?;
        let y = g.reshape(y, &[input.pillars, input.slots, c])?;
        let y = g.max_over_axis(y, 1)?;
        let y = g.transpose(y)?;
        g.scatter(y, &input.cells, h, w)
    }

    pub fn backbone(&self, g: &mut Graph, image: Var) -> Result<Var> {
        backbone(
            g,
            &self.store,
            image,
            self.cfg.model.backbone_channels.len(),
            self.cfg.model.downsample,
        )
    }

    pub fn rpn(&self, g: &mut Graph, fmap: Var) -> Result<RpnOutput> {
        rpn::rpn_forward(g, fmap, &self.store, &self.anchors)
    }

    /// Pooled per-proposal features `[R, D]` for the refinement head.
    pub fn pool(&self, g: &mut Graph, fmap: Var, boxes: &[BBoxBEV]) -> Result<Var> {
        let sw = self.cfg.switches;
        let frame = self.frame();
        match sw.rroi.pooled() {
            Some(pooled) => infofocus::rroi_align(g, fmap, &frame, boxes, pooled, self.cfg.model.rroi_samples_per_bin),
            None => infofocus::poi_features(
                g,
                fmap,
                &frame,
                boxes,
                self.cfg.model.n_keypoints,
                self.cfg.sensor,
                PoiSwitches {
                    visibility: sw.visibility,
                    adaptive: sw.adaptive,
                },
                &self.store,
            ),
        }
    }

    pub fn head(&self, g: &mut Graph, pooled: Var) -> Result<HeadOutput> {
        infofocus::refine_head(g, pooled, &self.store)
    }

    /// Proposals from the current RPN outputs, with the class of each.
    pub fn proposals(&self, g: &Graph, out: &RpnOutput) -> Result<(ProposalSet, Vec<usize>)> {
        let p = propose(
            &g.value(out.cls).data,
            &g.value(out.reg).data,
            &g.value(out.dir).data,
            &self.anchors,
            &self.cfg.proposals,
        )?;
        let classes = p.anchor_idx.iter().map(|&i| self.anchor_class(i)).collect();
        Ok((p, classes))
    }

    /// Anchor targets for a scene's ground truth.
    pub fn rpn_targets(&self, gts: &[(BBox3D, usize)]) -> StageTargets {
        let classes: Vec<usize> = (0..self.anchors.len()).map(|i| self.anchor_class(i)).collect();
        stage_targets(
            &self.anchors.anchors,
            &classes,
            gts,
            self.num_classes(),
            &self.cfg.rpn_assign.assignment(Stage::Rpn),
        )
    }

    /// Joint two-stage training loss of one scene.
    pub fn scene_loss(
        &self,
        g: &mut Graph,
        input: &SceneInput,
        gts: &[(BBox3D, usize)],
        rpn_targets: &StageTargets,
    ) -> Result<(Var, LossBreakdown)> {
        let focal = (self.cfg.loss.focal_alpha, self.cfg.loss.focal_gamma);
        let image = self.pfn(g, input)?;
        let fmap = self.backbone(g, image)?;
        let out = self.rpn(g, fmap)?;
        let (rpn_loss, rpn_parts) =
            stage_loss_var(g, (out.cls, out.reg, out.dir), rpn_targets, &self.cfg.loss.rpn, focal)?;
        if !self.cfg.switches.second_stage {
            let total = g.value(rpn_loss).item();
            return Ok((
                rpn_loss,
                LossBreakdown {
                    rpn: rpn_parts,
                    infofocus: StageLoss::default(),
                    total,
                },
            ));
        }
        let (props, classes) = self.proposals(g, &out)?;
        let t = stage_targets(
            &props.boxes,
            &classes,
            gts,
            self.num_classes(),
            &self.cfg.infofocus_assign.assignment(Stage::Infofocus),
        );
        let bev: Vec<BBoxBEV> = props.boxes.iter().map(BBox3D::bev).collect();
        let pooled = self.pool(g, fmap, &bev)?;
        let h = self.head(g, pooled)?;
        let (if_loss, if_parts) = stage_loss_var(g, (h.cls, h.reg, h.dir), &t, &self.cfg.loss.infofocus, focal)?;
        let total = g.weighted_sum(&[(rpn_loss, 1.0), (if_loss, 1.0)])?;
        let value = g.value(total).item();
        Ok((
            total,
            LossBreakdown {
                rpn: rpn_parts,
                infofocus: if_parts,
                total: value,
            },
        ))
    }

    /// Detections of one scene in both modes from a single backbone pass.
    /// The full-mode list is `None` when the second stage is disabled.
    pub fn detect_both(&self, input: &SceneInput) -> Result<(Vec<Detection>, Option<Vec<Detection>>)> {
        if input.pillars == 0 {
            let full = self.cfg.switches.second_stage.then(Vec::new);
            return Ok((Vec::new(), full));
        }
        let mut g = Graph::new();
        let image = self.pfn(&mut g, input)?;
        let fmap = self.backbone(&mut g, image)?;
        let out = self.rpn(&mut g, fmap)?;
        let (props, classes) = self.proposals(&g, &out)?;
        let base = self.finish(props.boxes.clone(), props.scores.clone(), classes.clone())?;
        if !self.cfg.switches.second_stage {
            return Ok((base, None));
        }
        let (boxes, scores) = self.refine(&mut g, fmap, &props)?;
        Ok((base, Some(self.finish(boxes, scores, classes)?)))
    }

    pub fn detect(&self, input: &SceneInput, mode: InferMode) -> Result<Vec<Detection>> {
        let mut times = StageTimes::default();
        self.detect_timed(input, mode, &mut times)
    }

    /// Run the detector and record the wall time of each stage.
    pub fn detect_timed(&self, input: &SceneInput, mode: InferMode, times: &mut StageTimes) -> Result<Vec<Detection>> {
        let mut lap = Lap(Instant::now());
        times.0 = [0.0; 6];
        if input.pillars == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let image = self.pfn(&mut g, input)?;
        times.0[0] = lap.split();
        let fmap = self.backbone(&mut g, image)?;
        times.0[1] = lap.split();
        let out = self.rpn(&mut g, fmap)?;
        times.0[2] = lap.split();
        let (props, classes) = self.proposals(&g, &out)?;
        if mode == InferMode::Baseline || !self.cfg.switches.second_stage {
            let dets = self.finish(props.boxes, props.scores, classes)?;
            times.0[3] = lap.split();
            return Ok(dets);
        }
        times.0[3] = lap.split();
        let bev: Vec<BBoxBEV> = props.boxes.iter().map(BBox3D::bev).collect();
        let pooled = self.pool(&mut g, fmap, &bev)?;
        times.0[4] = lap.split();
        let h = self.head(&mut g, pooled)?;
        let (boxes, scores) = decode_head(&g, &h, &props);
        let dets = self.finish(boxes, scores, classes)?;
        times.0[5] = lap.split();
        Ok(dets)
    }

    fn refine(&self, g: &mut Graph, fmap: Var, props: &ProposalSet) -> Result<(Vec<BBox3D>, Vec<f64>)> {
        let bev: Vec<BBoxBEV> = props.boxes.iter().map(BBox3D::bev).collect();
        let pooled = self.pool(g, fmap, &bev)?;
        let h = self.head(g, pooled)?;
        Ok(decode_head(g, &h, props))
    }

    /// Score floor, then class-wise rotated NMS; output sorted by score.
    fn finish(&self, boxes: Vec<BBox3D>, scores: Vec<f64>, classes: Vec<usize>) -> Result<Vec<Detection>> {
        let floor = self.cfg.inference.score_floor;
        let mut out = Vec::new();
        for class in 0..self.num_classes() {
            let idx: Vec<usize> = (0..boxes.len())
                .filter(|&i| classes[i] == class && scores[i] >= floor)
                .collect();
            let bev: Vec<BBoxBEV> = idx.iter().map(|&i| boxes[i].bev()).collect();
            let sc: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            for k in rotated_nms(&bev, &sc, self.cfg.inference.final_nms)? {
                let i = idx[k];
                out.push(Detection {
                    bbox: boxes[i],
                    class,
                    score: scores[i],
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(out)
    }
}

/// Refined boxes relative to their proposals and second-stage scores.
fn decode_head(g: &Graph, h: &HeadOutput, props: &ProposalSet) -> (Vec<BBox3D>, Vec<f64>) {
    let (cls, reg, dir) = (&g.value(h.cls).data, &g.value(h.reg).data, &g.value(h.dir).data);
    let boxes = props
        .boxes
        .iter()
        .enumerate()
        .map(|(r, p)| {
            let bin = usize::from(dir[2 * r + 1] > dir[2 * r]);
            decode_with_direction(&BoxResidual::from_slice(&reg[7 * r..7 * r + 7]), p, bin)
        })
        .collect();
    (boxes, cls.iter().map(|&z| rpn::sigmoid(z)).collect())
}

/// 3x3 convolutions with relu; the first one strided.
pub fn backbone(g: &mut Graph, store: &ParamStore, image: Var, layers: usize, downsample: usize) -> Result<Var> {
    let mut x = image;
    for i in 0..layers {
        let k = g.param(store, &format!("backbone.{i}.w"))?;
        let b = g.param(store, &format!("backbone.{i}.b"))?;
        let stride = if i == 0 { downsample } else { 1 };
        x = g.conv2d(x, k, Some(b), stride, 1)?;
        x = g.relu(x);
    }
    Ok(x)
}

/// Width of the pooled feature for the configured pooling.
pub fn pooled_dim(cfg: &PipelineConfig) -> usize {
    let c = *cfg.model.backbone_channels.last().unwrap_or(&0);
    match cfg.switches.rroi.pooled() {
        Some((r, k)) => r * k * c,
        None => 5 * c,
    }
}

/// Parameters in a fixed order: PFN, backbone, RPN heads, and the
/// second stage when enabled.
pub fn init_params(cfg: &PipelineConfig, per_cell: usize, rng: &mut Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let m = &cfg.model;
    store.init_he("pfn.w", &[m.pfn_channels, DECORATED_DIM], DECORATED_DIM, rng);
    store.init_const("pfn.b", &[m.pfn_channels], 0.0);
    let mut cin = m.pfn_channels;
    for (i, &c) in m.backbone_channels.iter().enumerate() {
        store.init_he(&format!("backbone.{i}.w"), &[c, cin, 3, 3], cin * 9, rng);
        store.init_const(&format!("backbone.{i}.b"), &[c], 0.0);
        cin = c;
    }
    rpn::init_head_params(&mut store, cin, per_cell, rng);
    if cfg.switches.second_stage {
        infofocus::init_params(&mut store, cin, pooled_dim(cfg), m.fc_width, rng);
    }
    store
}
