//! Finite-difference check of the whole two-stage loss: backbone conv,
//! RPN heads and loss, PoI pooling with visibility and adaptive attention,
//! the refinement head and its loss, on a small fixed-size instance.

use crate::error::{Error, Result};
use crate::geometry::BBox3D;
use crate::kernels::gradcheck::{check, kernel_suite, GradCheck, FD_STEP};
use crate::kernels::{Graph, Tensor, Var};
use crate::rng::Rng;
use crate::rpn::AnchorSize;
use crate::targets::Stage;

use super::config::PipelineConfig;
use super::model::{stage_loss_var, stage_targets, Model, StageTargets};

/// Configurations closer than this to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: usize = 200;

/// 8 x 8 cells of 1 m, stride 1, C = 4, one proposal.
fn instance_config() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.grid.x_min = 0.0;
    cfg.grid.x_max = 8.0;
    cfg.grid.y_min = -4.0;
    cfg.grid.y_max = 4.0;
    cfg.grid.pillar_dx = 1.0;
    cfg.grid.pillar_dy = 1.0;
    cfg.sensor = [0.0, 0.0];
    cfg.model.pfn_channels = 4;
    cfg.model.backbone_channels = vec![4];
    cfg.model.downsample = 1;
    cfg.model.fc_width = 6;
    cfg.anchors = vec![AnchorSize {
        class: "vehicle".into(),
        w: 1.5,
        l: 3.0,
        h: 1.5,
        z: 0.75,
    }];
    cfg
}

struct Instance {
    model: Model,
    names: Vec<String>,
    inputs: Vec<Tensor>,
    proposal: BBox3D,
    rpn: StageTargets,
    second: StageTargets,
}

fn draw(rng: &mut Rng) -> Result<Instance> {
    let mut cfg = instance_config();
    cfg.train.seed = rng.next();
    let model = Model::init(cfg)?;
    let gt = BBox3D::new(
        rng.range(2.5, 5.5),
        rng.range(-1.5, 1.5),
        0.75,
        rng.range(1.3, 1.8),
        rng.range(2.6, 3.4),
        1.5,
        rng.range(-3.1, 3.1),
    )?;
    let jitter = |rng: &mut Rng, s: f64| s * rng.normal();
    let proposal = BBox3D::new(
        gt.x + jitter(rng, 0.2),
        gt.y + jitter(rng, 0.2),
        gt.z,
        gt.w * (1.0 + jitter(rng, 0.05)).abs(),
        gt.l * (1.0 + jitter(rng, 0.05)).abs(),
        gt.h,
        gt.theta + jitter(rng, 0.2),
    )?;
    let gts = [(gt, 0)];
    let rpn = model.rpn_targets(&gts);
    let second = stage_targets(
        &[proposal],
        &[0],
        &gts,
        1,
        &model.cfg.infofocus_assign.assignment(Stage::Infofocus),
    );
    let mut names = Vec::new();
    let mut image = Tensor::zeros(&[4, 8, 8]);
    image.data.iter_mut().for_each(|v| *v = rng.normal());
    let mut inputs = vec![image];
    for (name, t) in model.store.iter() {
        if name.starts_with("pfn.") {
            continue;
        }
        let mut t = t.clone();
        if name.starts_with("att.") || name.ends_with(".b") {
            t.data.iter_mut().for_each(|v| *v = 0.5 * rng.normal());
        }
        names.push(name.clone());
        inputs.push(t);
    }
    Ok(Instance {
        model,
        names,
        inputs,
        proposal,
        rpn,
        second,
    })
}

fn loss(inst: &Instance, g: &mut Graph, v: &[Var]) -> Result<Var> {
    for (name, var) in inst.names.iter().zip(&v[1..]) {
        g.bind_param(name, *var);
    }
    let m = &inst.model;
    let focal = (m.cfg.loss.focal_alpha, m.cfg.loss.focal_gamma);
    let fmap = m.backbone(g, v[0])?;
    let out = m.rpn(g, fmap)?;
    let (l1, _) = stage_loss_var(g, (out.cls, out.reg, out.dir), &inst.rpn, &m.cfg.loss.rpn, focal)?;
    let pooled = m.pool(g, fmap, &[inst.proposal.bev()])?;
    let h = m.head(g, pooled)?;
    let (l2, _) = stage_loss_var(g, (h.cls, h.reg, h.dir), &inst.second, &m.cfg.loss.infofocus, focal)?;
    g.weighted_sum(&[(l1, 1.0), (l2, 1.0)])
}

/// `configs` random instances of the composed loss, each redrawn until
/// every kink is at least [`KINK_MARGIN`] away.
pub fn composed_loss_check(configs: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = Rng::derive(seed, 0xc0_4205);
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        let mut picked = None;
        for _ in 0..MAX_DRAWS {
            let inst = draw(&mut rng)?;
            let mut g = Graph::new();
            let vars: Vec<Var> = inst.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
            loss(&inst, &mut g, &vars)?;
            if g.kink_margin() >= KINK_MARGIN {
                picked = Some(inst);
                break;
            }
        }
        let inst = picked.ok_or_else(|| Error::InvalidArgument("no kink-free composed instance found".into()))?;
        worst = worst.max(check(&inst.inputs, FD_STEP, |g, v| loss(&inst, g, v))?);
    }
    Ok(GradCheck {
        name: "two_stage_loss".into(),
        configs,
        max_rel_err: worst,
    })
}

/// Every kernel plus the composed loss.
pub fn full_suite(configs: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let mut out = kernel_suite(configs, seed)?;
    out.push(composed_loss_check(configs, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::gradcheck::REL_TOLERANCE;

    #[test]
    fn composed_loss_matches_finite_differences() {
        let r = composed_loss_check(5, 1).unwrap();
        assert!(r.max_rel_err < REL_TOLERANCE, "{r:?}");
    }

    #[test]
    fn instance_exercises_both_stages() {
        let mut rng = Rng::seed(4);
        let inst = draw(&mut rng).unwrap();
        assert!(inst.rpn.n_pos >= 1);
        assert!(inst.names.iter().any(|n| n == "att.w"));
        assert!(inst.names.iter().any(|n| n == "rcnn.fc1.w"));
        let mut g = Graph::new();
        let vars: Vec<Var> = inst.inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let l = loss(&inst, &mut g, &vars).unwrap();
        g.backward(l).unwrap();
        for (k, v) in vars.iter().enumerate() {
            let nz = g.grad(*v).is_some_and(|s| s.iter().any(|x| *x != 0.0));
            assert!(nz, "no gradient reaches input {k}");
        }
    }
}
