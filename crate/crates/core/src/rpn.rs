//! Stage one: the anchor grid, the 1x1 classification/regression/direction
//! heads, and proposal generation.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotated_nms, score_order, BBox3D, BBoxBEV};
use crate::kernels::{Graph, ParamStore, Var};
use crate::pillars::PillarGridSpec;
use crate::rng::Rng;
use crate::targets::{decode_with_direction, BoxResidual};

pub const ORIENTATIONS: [f64; 2] = [0.0, FRAC_PI_2];

/// Mean box size (and center height) of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSize {
    pub class: String,
    pub w: f64,
    pub l: f64,
    pub h: f64,
    pub z: f64,
}

/// Arithmetic mean of `w, l, h, z` for every class.
pub fn mean_anchor_sizes(classes: &[(String, Vec<BBox3D>)]) -> Result<Vec<AnchorSize>> {
    classes
        .iter()
        .map(|(name, boxes)| {
            if boxes.is_empty() {
                return Err(Error::EmptyClass(name.clone()));
            }
            let n = boxes.len() as f64;
            let mean = |f: fn(&BBox3D) -> f64| boxes.iter().map(f).sum::<f64>() / n;
            Ok(AnchorSize {
                class: name.clone(),
                w: mean(|b| b.w),
                l: mean(|b| b.l),
                h: mean(|b| b.h),
                z: mean(|b| b.z),
            })
        })
        .collect()
}

/// Dense anchors over the head grid, ordered row-major by cell, then by
/// class, then by orientation.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub anchors: Vec<BBox3D>,
    pub rows: usize,
    pub cols: usize,
    pub per_cell: usize,
}

impl AnchorSet {
    pub fn grid(spec: &PillarGridSpec, stride: usize, sizes: &[AnchorSize]) -> Result<Self> {
        spec.validate()?;
        if stride == 0 || !spec.rows().is_multiple_of(stride) || !spec.cols().is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "head stride {stride} does not divide the {}x{} grid",
                spec.rows(),
                spec.cols()
            )));
        }
        let (rows, cols) = (spec.rows() / stride, spec.cols() / stride);
        let (dx, dy) = (spec.pillar_dx * stride as f64, spec.pillar_dy * stride as f64);
        let mut anchors = Vec::with_capacity(rows * cols * sizes.len() * ORIENTATIONS.len());
        for r in 0..rows {
            for c in 0..cols {
                let x = spec.x_min + (c as f64 + 0.5) * dx;
                let y = spec.y_min + (r as f64 + 0.5) * dy;
                for s in sizes {
                    for &t in &ORIENTATIONS {
                        anchors.push(BBox3D::new(x, y, s.z, s.w, s.l, s.h, t)?);
                    }
                }
            }
        }
        Ok(AnchorSet {
            anchors,
            rows,
            cols,
            per_cell: sizes.len() * ORIENTATIONS.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Little-endian f64 dump of every anchor's seven fields.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.anchors
            .iter()
            .flat_map(|a| a.to_array())
            .flat_map(f64::to_le_bytes)
            .collect()
    }
}

/// Register the three head layers for a `channels`-wide feature map.
pub fn init_head_params(store: &mut ParamStore, channels: usize, per_cell: usize, rng: &mut Rng) {
    store.init_he("rpn.cls.w", &[per_cell, channels], channels, rng);
    // prior probability 0.01 keeps the initial focal loss from drowning in negatives
    store.init_const("rpn.cls.b", &[per_cell], -(99f64).ln());
    store.init_he("rpn.reg.w", &[7 * per_cell, channels], channels, rng);
    if let Some(t) = store.get_mut("rpn.reg.w") {
        t.data.iter_mut().for_each(|v| *v *= 0.1);
    }
    store.init_const("rpn.reg.b", &[7 * per_cell], 0.0);
    store.init_he("rpn.dir.w", &[2 * per_cell, channels], channels, rng);
    store.init_const("rpn.dir.b", &[2 * per_cell], 0.0);
}

/// Head outputs on the graph: `cls [A]`, `reg [A, 7]`, `dir [A, 2]`.
#[derive(Debug, Clone, Copy)]
pub struct RpnOutput {
    pub cls: Var,
    pub reg: Var,
    pub dir: Var,
}

/// Apply the 1x1 heads to a `[C, H, W]` feature map.
pub fn rpn_forward(g: &mut Graph, fmap: Var, store: &ParamStore, anchors: &AnchorSet) -> Result<RpnOutput> {
    let shape = g.value(fmap).shape.clone();
    if shape.len() != 3 || shape[1] != anchors.rows || shape[2] != anchors.cols {
        return Err(Error::ShapeMismatch {
            op: "rpn_forward",
            left: shape,
            right: vec![anchors.rows, anchors.cols],
        });
    }
    let hw = shape[1] * shape[2];
    let flat = g.reshape(fmap, &[shape[0], hw])?;
    let rows = g.transpose(flat)?;
    let a = anchors.len();
    let head = |g: &mut Graph, name: &str, width: usize| -> Result<Var> {
        let w = g.param(store, &format!("rpn.{name}.w"))?;
        let b = g.param(store, &format!("rpn.{name}.b"))?;
        let y = g.linear(rows, w, Some(b))?;
        if width == 1 {
            g.reshape(y, &[a])
        } else {
            g.reshape(y, &[a, width])
        }
    };
    Ok(RpnOutput {
        cls: head(g, "cls", 1)?,
        reg: head(g, "reg", 7)?,
        dir: head(g, "dir", 2)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProposalConfig {
    pub pre_nms: usize,
    pub nms_iou: f64,
    pub post_nms: usize,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        ProposalConfig {
            pre_nms: 1000,
            nms_iou: 0.5,
            post_nms: 300,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProposalSet {
    pub boxes: Vec<BBox3D>,
    pub scores: Vec<f64>,
    /// Anchor each proposal was decoded from.
    pub anchor_idx: Vec<usize>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Decode one anchor's regression and direction outputs.
pub fn decode_anchor(reg: &[f64], dir: &[f64], anchor: &BBox3D) -> BBox3D {
    let bin = usize::from(dir[1] > dir[0]);
    decode_with_direction(&BoxResidual::from_slice(reg), anchor, bin)
}

/// Top-`pre_nms` anchors by score, decoded, suppressed with rotated NMS,
/// and cut to `post_nms`.
pub fn propose(
    cls: &[f64],
    reg: &[f64],
    dir: &[f64],
    anchors: &AnchorSet,
    cfg: &ProposalConfig,
) -> Result<ProposalSet> {
    let a = anchors.len();
    if cls.len() != a || reg.len() != 7 * a || dir.len() != 2 * a {
        return Err(Error::ShapeMismatch {
            op: "propose",
            left: vec![cls.len(), reg.len(), dir.len()],
            right: vec![a, 7 * a, 2 * a],
        });
    }
    let scores: Vec<f64> = cls.iter().map(|&z| sigmoid(z)).collect();
    let mut top = score_order(&scores);
    top.truncate(cfg.pre_nms);
    let boxes: Vec<BBox3D> = top
        .iter()
        .map(|&i| decode_anchor(&reg[7 * i..7 * i + 7], &dir[2 * i..2 * i + 2], &anchors.anchors[i]))
        .collect();
    let bev: Vec<BBoxBEV> = boxes.iter().map(BBox3D::bev).collect();
    let top_scores: Vec<f64> = top.iter().map(|&i| scores[i]).collect();
    let mut keep = rotated_nms(&bev, &top_scores, cfg.nms_iou)?;
    keep.truncate(cfg.post_nms);
    Ok(ProposalSet {
        boxes: keep.iter().map(|&k| boxes[k]).collect(),
        scores: keep.iter().map(|&k| top_scores[k]).collect(),
        anchor_idx: keep.iter().map(|&k| top[k]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rotated_iou;
    use crate::kernels::Tensor;

    fn car(x: f64, y: f64) -> BBox3D {
        BBox3D::new(x, y, 0.8, 1.8, 4.2, 1.6, 0.0).unwrap()
    }

    fn one_class(boxes: Vec<BBox3D>) -> Vec<(String, Vec<BBox3D>)> {
        vec![("vehicle".to_string(), boxes)]
    }

    #[test]
    fn mean_sizes() {
        let b = BBox3D::new(0.0, 0.0, 0.75, 2.0, 4.0, 1.5, 0.0).unwrap();
        let s = mean_anchor_sizes(&one_class(vec![b])).unwrap();
        assert_eq!((s[0].w, s[0].l, s[0].h), (2.0, 4.0, 1.5));
        let b2 = BBox3D::new(0.0, 0.0, 0.75, 4.0, 4.0, 1.5, 0.0).unwrap();
        assert_eq!(mean_anchor_sizes(&one_class(vec![b, b2])).unwrap()[0].w, 3.0);
        let err = mean_anchor_sizes(&one_class(vec![])).unwrap_err();
        assert!(err.to_string().contains("vehicle"));
    }

    fn small_grid() -> (PillarGridSpec, Vec<AnchorSize>) {
        let spec = PillarGridSpec {
            x_max: 8.0,
            y_min: -4.0,
            y_max: 4.0,
            ..PillarGridSpec::default()
        };
        let sizes = mean_anchor_sizes(&one_class(vec![car(0.0, 0.0)])).unwrap();
        (spec, sizes)
    }

    #[test]
    fn anchor_layout() {
        let (spec, sizes) = small_grid();
        let a = AnchorSet::grid(&spec, 2, &sizes).unwrap();
        assert_eq!((a.rows, a.cols, a.len()), (8, 8, 128));
        assert_eq!((a.anchors[0].x, a.anchors[0].y, a.anchors[0].theta), (0.5, -3.5, 0.0));
        assert_eq!(a.anchors[1].theta, FRAC_PI_2);
        assert_eq!((a.anchors[2].x, a.anchors[2].y), (1.5, -3.5));
        assert_eq!((a.anchors[16].x, a.anchors[16].y), (0.5, -2.5));
        assert_eq!(a.to_bytes(), AnchorSet::grid(&spec, 2, &sizes).unwrap().to_bytes());
        assert!(AnchorSet::grid(&spec, 3, &sizes).is_err());
    }

    #[test]
    fn zero_heads_give_half_scores() {
        let (spec, sizes) = small_grid();
        let anchors = AnchorSet::grid(&spec, 2, &sizes).unwrap();
        let mut store = ParamStore::new();
        init_head_params(&mut store, 4, anchors.per_cell, &mut Rng::seed(1));
        for (_, t) in store.iter_mut() {
            t.data.fill(0.0);
        }
        let mut g = Graph::new();
        let f = g.input(Tensor::full(&[4, 8, 8], 0.3));
        let out = rpn_forward(&mut g, f, &store, &anchors).unwrap();
        assert_eq!(g.value(out.cls).shape, vec![128]);
        assert_eq!(g.value(out.reg).shape, vec![128, 7]);
        assert_eq!(g.value(out.dir).shape, vec![128, 2]);
        assert!(g.value(out.cls).data.iter().all(|&z| sigmoid(z) == 0.5));
        let bad = g.input(Tensor::zeros(&[4, 7, 8]));
        assert!(rpn_forward(&mut g, bad, &store, &anchors).is_err());
    }

    #[test]
    fn head_gradients_match_fd() {
        let (spec, sizes) = small_grid();
        let anchors = AnchorSet::grid(&spec, 2, &sizes).unwrap();
        let mut rng = Rng::seed(2);
        let mut store = ParamStore::new();
        init_head_params(&mut store, 3, anchors.per_cell, &mut rng);
        let fmap = Tensor::new(vec![3, 8, 8], (0..192).map(|_| rng.normal()).collect()).unwrap();
        let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
        let inputs: Vec<Tensor> = names.iter().map(|n| store.get(n).unwrap().clone()).collect();
        let err = crate::kernels::gradcheck::check(&inputs, 1e-5, |g, v| {
            let f = g.input(fmap.clone());
            let out = rpn_forward_with(g, f, v, &anchors)?;
            let c = g.sigmoid(out.cls);
            let parts = [(c, 1.0), (out.reg, 0.5), (out.dir, -0.25)];
            let sums: Vec<(Var, f64)> = parts.iter().map(|&(x, k)| (g.sum(x), k)).collect();
            g.weighted_sum(&sums)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    // Same computation as `rpn_forward`, taking the six head tensors as vars
    // in store order (cls.w, cls.b, reg.w, reg.b, dir.w, dir.b).
    fn rpn_forward_with(g: &mut Graph, fmap: Var, v: &[Var], anchors: &AnchorSet) -> Result<RpnOutput> {
        let shape = g.value(fmap).shape.clone();
        let flat = g.reshape(fmap, &[shape[0], shape[1] * shape[2]])?;
        let rows = g.transpose(flat)?;
        let a = anchors.len();
        let cls = g.linear(rows, v[0], Some(v[1]))?;
        let cls = g.reshape(cls, &[a])?;
        let reg = g.linear(rows, v[2], Some(v[3]))?;
        let reg = g.reshape(reg, &[a, 7])?;
        let dir = g.linear(rows, v[4], Some(v[5]))?;
        let dir = g.reshape(dir, &[a, 2])?;
        Ok(RpnOutput { cls, reg, dir })
    }

    fn brute_force(cls: &[f64], reg: &[f64], dir: &[f64], anchors: &AnchorSet) -> Vec<(usize, BBox3D)> {
        let scores: Vec<f64> = cls.iter().map(|&z| sigmoid(z)).collect();
        let mut idx: Vec<usize> = (0..cls.len()).collect();
        // plain selection sort, descending, lower index first on ties
        for i in 0..idx.len() {
            let mut best = i;
            for j in i + 1..idx.len() {
                let (a, b) = (idx[j], idx[best]);
                if scores[a] > scores[b] || (scores[a] == scores[b] && a < b) {
                    best = j;
                }
            }
            idx.swap(i, best);
        }
        idx.truncate(1000);
        let mut kept: Vec<(usize, BBox3D)> = Vec::new();
        for &i in &idx {
            let b = decode_anchor(&reg[7 * i..7 * i + 7], &dir[2 * i..2 * i + 2], &anchors.anchors[i]);
            if kept.iter().all(|(_, k)| rotated_iou(&k.bev(), &b.bev()) <= 0.5) {
                kept.push((i, b));
            }
        }
        kept.truncate(300);
        kept
    }

    #[test]
    fn propose_matches_brute_force() {
        let spec = PillarGridSpec {
            x_max: 30.0,
            y_min: -15.0,
            y_max: 15.0,
            ..PillarGridSpec::default()
        };
        let sizes = mean_anchor_sizes(&one_class(vec![car(0.0, 0.0)])).unwrap();
        let anchors = AnchorSet::grid(&spec, 2, &sizes).unwrap();
        assert_eq!(anchors.len(), 1800);
        let mut rng = Rng::seed(11);
        let a = anchors.len();
        // coarse logits so exact score ties occur
        let cls: Vec<f64> = (0..a).map(|_| (rng.range(-4.0, 4.0) * 4.0).round() / 4.0).collect();
        let reg: Vec<f64> = (0..7 * a).map(|_| 0.3 * rng.normal()).collect();
        let dir: Vec<f64> = (0..2 * a).map(|_| rng.normal()).collect();
        let p = propose(&cls, &reg, &dir, &anchors, &ProposalConfig::default()).unwrap();
        let want = brute_force(&cls, &reg, &dir, &anchors);
        assert!(p.len() <= 300);
        assert_eq!(p.anchor_idx, want.iter().map(|w| w.0).collect::<Vec<_>>());
        assert_eq!(p.boxes, want.iter().map(|w| w.1).collect::<Vec<_>>());
        assert!(p.scores.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                assert!(rotated_iou(&p.boxes[i].bev(), &p.boxes[j].bev()) <= 0.5);
            }
        }
    }

    #[test]
    fn propose_small_cases() {
        let anchors = AnchorSet {
            anchors: vec![car(2.0, 0.0), car(20.0, 0.0)],
            rows: 1,
            cols: 2,
            per_cell: 1,
        };
        let zeros7 = vec![0.0; 14];
        let p = propose(
            &[0.0, 0.0],
            &zeros7,
            &[0.0, 1.0, 0.0, 1.0],
            &anchors,
            &ProposalConfig::default(),
        )
        .unwrap();
        assert_eq!(p.anchor_idx, vec![0, 1]);
        let same = AnchorSet {
            anchors: vec![car(2.0, 0.0), car(2.0, 0.0)],
            ..anchors
        };
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let p = propose(
            &[logit(0.8), logit(0.9)],
            &zeros7,
            &[0.0, 1.0, 0.0, 1.0],
            &same,
            &ProposalConfig::default(),
        )
        .unwrap();
        assert_eq!(p.anchor_idx, vec![1]);
        assert!((p.scores[0] - 0.9).abs() < 1e-12);
    }
}
