use super::gradcheck::{check, kernel_suite, FD_STEP, REL_TOLERANCE};
use super::*;
use crate::rng::Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn linear_identity_and_hand_example() {
    let mut g = Graph::new();
    let x = g.input(t(&[2], &[1.0, 2.0]));
    let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let y = g.linear(x, eye, None).unwrap();
    assert_eq!(g.value(y).data, vec![1.0, 2.0]);

    let w = g.input(t(&[2, 2], &[1.0, 1.0, 0.0, 1.0]));
    let b = g.input(t(&[2], &[0.5, -0.5]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data, vec![3.5, 1.5]);
}

#[test]
fn linear_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[3]));
    let w = g.input(Tensor::zeros(&[2, 2]));
    let err = g.linear(x, w, None).unwrap_err().to_string();
    assert!(err.contains("[3]") && err.contains("[2, 2]"), "{err}");
}

#[test]
fn linear_weight_gradient_matches_fd() {
    let mut rng = Rng::seed(1);
    let x = Tensor::new(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).unwrap();
    let w = Tensor::new(vec![2, 4], (0..8).map(|_| rng.normal()).collect()).unwrap();
    let err = check(&[x, w], FD_STEP, |g, v| g.linear(v[0], v[1], None)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn conv_delta_kernel_is_identity() {
    let mut rng = Rng::seed(2);
    let x = Tensor::new(vec![1, 4, 5], (0..20).map(|_| rng.normal()).collect()).unwrap();
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data[4] = 1.0;
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let kv = g.input(k);
    let y = g.conv2d(xv, kv, None, 1, 1).unwrap();
    assert_eq!(g.value(y).shape, vec![1, 4, 5]);
    assert_eq!(g.value(y).data, x.data);
}

#[test]
fn conv_ones_sum_to_nine() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full(&[1, 3, 3], 1.0));
    let k = g.input(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(x, k, None, 1, 0).unwrap();
    assert_eq!(g.value(y).shape, vec![1, 1, 1]);
    assert_eq!(g.value(y).data, vec![9.0]);
    assert!(g.conv2d(x, k, None, 0, 0).is_err());
}

#[test]
fn conv_output_dims() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 7, 6]));
    let k = g.input(Tensor::zeros(&[3, 2, 3, 3]));
    let y = g.conv2d(x, k, None, 2, 1).unwrap();
    // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 3) / 2) + 1 = 3
    assert_eq!(g.value(y).shape, vec![3, 4, 3]);
}

#[test]
fn conv_gradient_matches_fd() {
    let mut rng = Rng::seed(3);
    let x = Tensor::new(vec![2, 5, 5], (0..50).map(|_| rng.normal()).collect()).unwrap();
    let k = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|_| rng.normal()).collect()).unwrap();
    let err = check(&[x, k], FD_STEP, |g, v| g.conv2d(v[0], v[1], None, 1, 1)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn activations() {
    let mut g = Graph::new();
    let x = g.input(t(&[3], &[-1.0, 2.0, 0.0]));
    let r = g.relu(x);
    assert_eq!(g.value(r).data, vec![0.0, 2.0, 0.0]);
    let s = g.sigmoid(x);
    assert_eq!(g.value(s).data[2], 0.5);
}

#[test]
fn max_ties_route_to_first_index() {
    let mut g = Graph::new();
    let x = g.leaf(t(&[3], &[3.0, 1.0, 3.0]), true);
    let m = g.max_over_axis(x, 0).unwrap();
    assert_eq!(g.value(m).data, vec![3.0]);
    assert_eq!(g.argmax(m).unwrap(), &[0]);
    g.backward(m).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn max_gradient_mass_conserved() {
    let mut rng = Rng::seed(4);
    let x = Tensor::new(vec![4, 6, 3], (0..72).map(|_| rng.normal()).collect()).unwrap();
    let mut g = Graph::new();
    let xv = g.leaf(x, true);
    let m = g.max_over_axis(xv, 1).unwrap();
    let s = g.sum(m);
    g.backward(s).unwrap();
    let gx = g.grad(xv).unwrap();
    assert_eq!(gx.iter().sum::<f64>(), 12.0);
    assert_eq!(gx.iter().filter(|v| **v != 0.0).count(), 12);
}

#[test]
fn bilinear_on_nodes_and_center() {
    let mut g = Graph::new();
    let f = g.input(t(&[1, 2, 2], &[0.0, 1.0, 2.0, 3.0]));
    let s = g
        .bilinear_sample(f, &[(0.5, 0.5), (1.0, 0.0), (0.0, 1.0), (-3.0, 9.0)])
        .unwrap();
    assert_eq!(g.value(s).data, vec![1.5, 2.0, 1.0, 1.0]);

    let mut rng = Rng::seed(5);
    let fm = Tensor::new(vec![3, 4, 5], (0..60).map(|_| rng.normal()).collect()).unwrap();
    let fv = g.input(fm.clone());
    let s = g.bilinear_sample(fv, &[(2.0, 3.0)]).unwrap();
    for c in 0..3 {
        assert_eq!(g.value(s).data[c], fm.data[c * 20 + 2 * 5 + 3]);
    }
}

#[test]
fn bilinear_gradient_matches_fd() {
    let mut rng = Rng::seed(6);
    let fm = Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.normal()).collect()).unwrap();
    let pts = [(0.3, 2.7), (3.0, 3.0), (1.5, 0.25)];
    let err = check(&[fm], FD_STEP, |g, v| g.bilinear_sample(v[0], &pts)).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn scatter_rejects_duplicates() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[2, 2]));
    assert!(matches!(
        g.scatter(x, &[3, 3], 2, 2),
        Err(crate::error::Error::DuplicateCoord(1, 1))
    ));
}

#[test]
fn composition_backward_is_chain_rule() {
    // conv -> relu -> bilinear, end to end against finite differences
    let mut rng = Rng::seed(7);
    let x = Tensor::new(vec![1, 5, 5], (0..25).map(|_| rng.normal()).collect()).unwrap();
    let k = Tensor::new(vec![2, 1, 3, 3], (0..18).map(|_| rng.normal()).collect()).unwrap();
    let err = check(&[x, k], FD_STEP, |g, v| {
        let y = g.conv2d(v[0], v[1], None, 1, 1)?;
        let y = g.relu(y);
        g.bilinear_sample(y, &[(1.3, 2.2), (3.7, 0.4)])
    })
    .unwrap();
    assert!(err < REL_TOLERANCE, "{err}");
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let mut rng = Rng::seed(8);
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![2, 6, 6], (0..72).map(|_| rng.normal()).collect()).unwrap());
        let k = g.input(Tensor::new(vec![3, 2, 3, 3], (0..54).map(|_| rng.normal()).collect()).unwrap());
        let y = g.conv2d(x, k, None, 2, 1).unwrap();
        g.value(y).data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(build(), build());
}

#[test]
fn suite_passes_on_a_few_configs() {
    for r in kernel_suite(10, 99).unwrap() {
        assert!(r.passed(), "{} rel err {}", r.name, r.max_rel_err);
    }
}
