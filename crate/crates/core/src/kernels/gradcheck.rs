//! Central finite-difference checks for the graph kernels.
//!
//! The relative error of one input tensor is
//! `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|, 1e-8)`
//! and a check reports the worst value over all inputs and configurations.

use serde::Serialize;

use crate::error::Result;
use crate::kernels::graph::{Graph, Taps, Var};
use crate::kernels::tensor::Tensor;
use crate::rng::Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheck {
    pub name: String,
    pub configs: usize,
    pub max_rel_err: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOLERANCE
    }
}

fn forward_value<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let out = g.sum(out);
    Ok(g.value(out).item())
}

/// Relative error between backward and central differences of
/// `sum(build(inputs))`, taken over the gradient of all inputs together.
pub fn check<F>(inputs: &[Tensor], h: f64, build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars)?;
    let out = g.sum(out);
    g.backward(out)?;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut probe = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        match g.grad(*var) {
            Some(s) => analytic.extend_from_slice(s),
            None => analytic.extend(std::iter::repeat_n(0.0, inputs[k].len())),
        }
        for i in 0..inputs[k].len() {
            let orig = probe[k].data[i];
            probe[k].data[i] = orig + h;
            let fp = forward_value(&probe, &build)?;
            probe[k].data[i] = orig - h;
            let fm = forward_value(&probe, &build)?;
            probe[k].data[i] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

pub fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|x| x.abs()).fold(1e-8, f64::max);
    diff / scale
}

fn random(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = rng.normal());
    t
}

/// Random values bounded away from zero, for ops with a kink at 0.
fn random_off_zero(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| {
        let m = rng.range(0.05, 2.0);
        *v = if rng.uniform() < 0.5 { -m } else { m };
    });
    t
}

fn run<F>(name: &str, configs: usize, seed: u64, mut one: F) -> Result<GradCheck>
where
    F: FnMut(&mut Rng) -> Result<f64>,
{
    let mut rng = Rng::derive(
        seed,
        name.bytes()
            .fold(0u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64)),
    );
    let mut worst: f64 = 0.0;
    for _ in 0..configs {
        worst = worst.max(one(&mut rng)?);
    }
    Ok(GradCheck {
        name: name.to_string(),
        configs,
        max_rel_err: worst,
    })
}

/// Finite-difference check of every differentiable kernel, `configs`
/// random configurations each.
pub fn kernel_suite(configs: usize, seed: u64) -> Result<Vec<GradCheck>> {
    let h = FD_STEP;
    let mut out = Vec::new();
    out.push(run("linear", configs, seed, |rng| {
        let (m, i, o) = (1 + rng.below(4), 1 + rng.below(5), 1 + rng.below(4));
        let ins = [random(&[m, i], rng), random(&[o, i], rng), random(&[o], rng)];
        check(&ins, h, |g, v| g.linear(v[0], v[1], Some(v[2])))
    })?);
    out.push(run("conv2d", configs, seed, |rng| {
        let (cin, cout) = (1 + rng.below(2), 1 + rng.below(3));
        let (hh, ww) = (3 + rng.below(4), 3 + rng.below(4));
        let stride = 1 + rng.below(2);
        let pad = rng.below(2);
        let ins = [
            random(&[cin, hh, ww], rng),
            random(&[cout, cin, 3, 3], rng),
            random(&[cout], rng),
        ];
        check(&ins, h, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad))
    })?);
    out.push(run("relu", configs, seed, |rng| {
        let ins = [random_off_zero(&[2 + rng.below(6)], rng)];
        check(&ins, h, |g, v| Ok(g.relu(v[0])))
    })?);
    out.push(run("sigmoid", configs, seed, |rng| {
        let ins = [random(&[1 + rng.below(6)], rng)];
        check(&ins, h, |g, v| Ok(g.sigmoid(v[0])))
    })?);
    out.push(run("add", configs, seed, |rng| {
        let n = 1 + rng.below(6);
        let ins = [random(&[n], rng), random(&[n], rng)];
        check(&ins, h, |g, v| g.add(v[0], v[1]))
    })?);
    out.push(run("max_over_axis", configs, seed, |rng| {
        let shape = [1 + rng.below(3), 1 + rng.below(5), 1 + rng.below(3)];
        let axis = rng.below(3);
        let ins = [random(&shape, rng)];
        check(&ins, h, |g, v| g.max_over_axis(v[0], axis))
    })?);
    out.push(run("bilinear_sample", configs, seed, |rng| {
        let (c, hh, ww) = (1 + rng.below(3), 2 + rng.below(4), 2 + rng.below(4));
        let pts: Vec<(f64, f64)> = (0..1 + rng.below(5))
            .map(|_| (rng.range(-0.5, hh as f64 - 0.5), rng.range(-0.5, ww as f64 - 0.5)))
            .collect();
        let ins = [random(&[c, hh, ww], rng)];
        check(&ins, h, |g, v| g.bilinear_sample(v[0], &pts))
    })?);
    out.push(run("sample_taps", configs, seed, |rng| {
        let (c, hh, ww) = (1 + rng.below(3), 2 + rng.below(3), 2 + rng.below(3));
        let mut taps = Taps::new();
        for _ in 0..1 + rng.below(4) {
            let row: Vec<(usize, f64)> = (0..1 + rng.below(6))
                .map(|_| (rng.below(hh * ww), rng.normal()))
                .collect();
            taps.push_row(&row);
        }
        let ins = [random(&[c, hh, ww], rng)];
        check(&ins, h, |g, v| g.sample_taps(v[0], taps.clone()))
    })?);
    out.push(run("mul_const", configs, seed, |rng| {
        let n = 1 + rng.below(6);
        let c: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let ins = [random(&[n], rng)];
        check(&ins, h, |g, v| g.mul_const(v[0], c.clone()))
    })?);
    out.push(run("scale_rows", configs, seed, |rng| {
        let (n, c) = (1 + rng.below(4), 1 + rng.below(4));
        let ins = [random(&[n, c], rng), random(&[n, 1], rng)];
        check(&ins, h, |g, v| g.scale_rows(v[0], v[1]))
    })?);
    out.push(run("group_max", configs, seed, |rng| {
        let (n, c) = (2 + rng.below(5), 1 + rng.below(3));
        let groups: Vec<Vec<usize>> = (0..1 + rng.below(4))
            .map(|_| (0..rng.below(4)).map(|_| rng.below(n)).collect())
            .collect();
        let ins = [random(&[n, c], rng)];
        check(&ins, h, |g, v| g.group_max(v[0], &groups))
    })?);
    out.push(run("scatter", configs, seed, |rng| {
        let (hh, ww, c) = (2 + rng.below(3), 2 + rng.below(3), 1 + rng.below(3));
        let mut cells: Vec<usize> = (0..hh * ww).collect();
        let p = 1 + rng.below(hh * ww);
        rng.shuffle_prefix(&mut cells, p);
        cells.truncate(p);
        let ins = [random(&[c, p], rng)];
        check(&ins, h, |g, v| g.scatter(v[0], &cells, hh, ww))
    })?);
    out.push(run("transpose", configs, seed, |rng| {
        let ins = [random(&[1 + rng.below(4), 1 + rng.below(4)], rng)];
        check(&ins, h, |g, v| g.transpose(v[0]))
    })?);
    out.push(run("upsample2", configs, seed, |rng| {
        let ins = [random(&[1 + rng.below(2), 1 + rng.below(3), 1 + rng.below(3)], rng)];
        check(&ins, h, |g, v| g.upsample2(v[0]))
    })?);
    out.push(run("concat0", configs, seed, |rng| {
        let tail = 1 + rng.below(3);
        let ins = [
            random(&[1 + rng.below(3), tail], rng),
            random(&[1 + rng.below(3), tail], rng),
        ];
        check(&ins, h, |g, v| g.concat0(&[v[0], v[1]]))
    })?);
    out.push(run("reshape", configs, seed, |rng| {
        let (a, b) = (1 + rng.below(3), 1 + rng.below(3));
        let ins = [random(&[a, b], rng)];
        check(&ins, h, |g, v| g.reshape(v[0], &[a * b]))
    })?);
    out.push(run("gather_rows", configs, seed, |rng| {
        let (n, c) = (1 + rng.below(4), 1 + rng.below(3));
        let idx: Vec<usize> = (0..1 + rng.below(5)).map(|_| rng.below(n)).collect();
        let ins = [random(&[n, c], rng)];
        check(&ins, h, |g, v| g.gather_rows(v[0], &idx))
    })?);
    out.push(run("focal_loss", configs, seed, |rng| {
        let n = 1 + rng.below(6);
        let ys: Vec<f64> = (0..n).map(|_| rng.below(2) as f64).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.range(0.0, 2.0)).collect();
        let mut z = Tensor::zeros(&[n]);
        z.data.iter_mut().for_each(|v| *v = rng.range(-4.0, 4.0));
        check(&[z], h, |g, v| {
            g.focal_loss_sum(v[0], ys.clone(), ws.clone(), 0.25, 2.0)
        })
    })?);
    out.push(run("smooth_l1", configs, seed, |rng| {
        let n = 1 + rng.below(4);
        let k = 7;
        let target: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.range(0.0, 2.0)).collect();
        // keep the wrapped column away from its +-pi/2 seam
        let mut pred = Tensor::zeros(&[n, k]);
        for (i, v) in pred.data.iter_mut().enumerate() {
            *v = if i % k == 6 {
                target[i] + rng.range(-1.3, 1.3)
            } else {
                target[i] + rng.normal() * 2.0
            };
        }
        check(&[pred], h, |g, v| {
            g.smooth_l1_sum(v[0], target.clone(), ws.clone(), Some(6))
        })
    })?);
    out.push(run("softmax_ce", configs, seed, |rng| {
        let (n, k) = (1 + rng.below(4), 2 + rng.below(2));
        let labels: Vec<usize> = (0..n).map(|_| rng.below(k)).collect();
        let ws: Vec<f64> = (0..n).map(|_| rng.range(0.0, 2.0)).collect();
        let ins = [random(&[n, k], rng)];
        check(&ins, h, |g, v| g.softmax_ce_sum(v[0], labels.clone(), ws.clone()))
    })?);
    out.push(run("weighted_sum", configs, seed, |rng| {
        let coefs = [rng.normal(), rng.normal()];
        let ins = [random(&[1], rng), random(&[1], rng)];
        check(&ins, h, |g, v| g.weighted_sum(&[(v[0], coefs[0]), (v[1], coefs[1])]))
    })?);
    out.push(run("composed_linear_relu_max", configs, seed, |rng| {
        let (p, n, d, c) = (1 + rng.below(3), 2 + rng.below(3), 1 + rng.below(4), 1 + rng.below(4));
        let ins = [random(&[p, n, d], rng), random(&[c, d], rng), random(&[c], rng)];
        check(&ins, h, |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            let y = g.relu(y);
            g.max_over_axis(y, 1)
        })
    })?);
    Ok(out)
}
