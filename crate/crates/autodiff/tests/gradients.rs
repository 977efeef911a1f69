use cgc_autodiff::gradcheck::{
    analytic_gradients, check_gradients, numeric_gradient, relative_error, scalar_fn,
    standard_cases, CaseRng, DEFAULT_STEP,
};
use cgc_autodiff::{Graph, Tensor};

const SEEDS: u64 = 20;

#[test]
fn every_op_matches_central_differences() {
    for case in standard_cases() {
        for seed in 0..SEEDS {
            let err = case.max_error(seed).unwrap();
            assert!(err < 1e-5, "{} seed {seed}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn cube_first_and_second_derivative() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let y = x.mul(&x).unwrap().mul(&x).unwrap();
    let dy = y.backward(&[&x], true).unwrap().remove(0);
    assert_eq!(dy.item().unwrap(), 12.0);
    assert!(dy.requires_grad());
    let d2y = dy.backward(&[&x], true).unwrap().remove(0);
    assert_eq!(d2y.item().unwrap(), 12.0);
}

#[test]
fn square_derivative() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let d = x.mul(&x).unwrap().backward(&[&x], false).unwrap();
    assert_eq!(d[0].item().unwrap(), 6.0);
    assert!(!d[0].requires_grad());
}

#[test]
fn sum_gradient_is_all_ones() {
    let g = Graph::new();
    let x = g.param(Tensor::from_fn(vec![2, 3], |i| i as f64));
    let d = x.sum_all().backward(&[&x], false).unwrap();
    assert_eq!(d[0].value(), &Tensor::ones(vec![2, 3]));
}

#[test]
fn non_scalar_backward_is_rejected() {
    let g = Graph::new();
    let x = g.param(Tensor::zeros(vec![2]));
    assert!(x.relu().backward(&[&x], false).is_err());
}

#[test]
fn unreachable_target_gets_zeros() {
    let g = Graph::new();
    let x = g.param(Tensor::ones(vec![3]));
    let unused = g.param(Tensor::ones(vec![2, 2]));
    let c = g.constant(Tensor::ones(vec![4]));
    let d = x.sum_all().backward(&[&unused, &c], false).unwrap();
    assert_eq!(d[0].value(), &Tensor::zeros(vec![2, 2]));
    assert_eq!(d[1].value(), &Tensor::zeros(vec![4]));
}

#[test]
fn backward_leaves_forward_values_intact() {
    let g = Graph::new();
    let x = g.param(Tensor::from_fn(vec![4], |i| i as f64 - 1.5));
    let y = x.exp().mul(&x).unwrap().sum_all();
    let before = y.value().clone();
    let _ = y.backward(&[&x], true).unwrap();
    let _ = y.backward(&[&x], false).unwrap();
    assert_eq!(y.value(), &before);
    assert_eq!(x.value().data(), &[-1.5, -0.5, 0.5, 1.5]);
}

#[test]
fn create_graph_does_not_change_gradient_values() {
    for case in standard_cases() {
        for seed in 0..5 {
            let mut rng = CaseRng::new(seed);
            let inputs = (case.inputs)(&mut rng);
            let g = Graph::new();
            let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
            let refs: Vec<_> = vars.iter().collect();
            let out = (case.f)(&g, &vars).unwrap();
            let plain = out.backward(&refs, false).unwrap();
            let recorded = out.backward(&refs, true).unwrap();
            for (p, r) in plain.iter().zip(&recorded) {
                let diff = p.value().max_abs_diff(r.value()).unwrap();
                assert!(diff <= 1e-12, "{}: {diff:e}", case.name);
            }
        }
    }
}

#[test]
fn gradient_is_linear_in_outputs() {
    let mut rng = CaseRng::new(7);
    let x0 = rng.tensor(&[1, 2, 5, 5], -1.0, 1.0);
    let k0 = rng.tensor(&[3, 2, 3, 3], -1.0, 1.0);
    let g = Graph::new();
    let x = g.param(x0);
    let k = g.param(k0);
    let y = x.conv2d(&k, 1, 1).unwrap();
    let a = y.relu().mean_all().unwrap();
    let b = y.exp().sum_all();
    let both = a.add(&b).unwrap().backward(&[&x, &k], false).unwrap();
    let ga = a.backward(&[&x, &k], false).unwrap();
    let gb = b.backward(&[&x, &k], false).unwrap();
    for i in 0..2 {
        let sum = Tensor::new(
            ga[i].shape().to_vec(),
            ga[i].value().data().iter().zip(gb[i].value().data()).map(|(p, q)| p + q).collect(),
        )
        .unwrap();
        assert!(both[i].value().max_abs_diff(&sum).unwrap() <= 1e-10);
    }
}

#[test]
fn replay_is_bit_identical() {
    let run = || {
        let mut rng = CaseRng::new(3);
        let g = Graph::new();
        let x = g.param(rng.tensor(&[2, 1, 6, 6], -1.0, 1.0));
        let k = g.param(rng.tensor(&[4, 1, 3, 3], -1.0, 1.0));
        let y = x.conv2d(&k, 1, 1).unwrap().relu().avg_pool2d(2, 2).unwrap();
        let loss = y.square().mean_all().unwrap();
        let grads = loss.backward(&[&k], false).unwrap();
        (loss.value().clone(), grads[0].value().clone())
    };
    assert_eq!(run(), run());
}

#[test]
fn relu_mask_is_constant_under_double_backward() {
    let g = Graph::new();
    let x = g.param(Tensor::new(vec![4], vec![-2.0, -0.5, 0.7, 1.3]).unwrap());
    let y = x.relu().square().sum_all();
    let dx = y.backward(&[&x], true).unwrap().remove(0);
    assert_eq!(dx.value().data(), &[0.0, 0.0, 1.4, 2.6]);
    let d2 = dx.sum_all().backward(&[&x], false).unwrap().remove(0);
    assert_eq!(&d2.value().data()[..2], &[0.0, 0.0]);
    assert_eq!(&d2.value().data()[2..], &[2.0, 2.0]);
    // relu alone: gradient is the mask, whose own derivative is exactly zero
    let dm = x.relu().sum_all().backward(&[&x], true).unwrap().remove(0);
    let d2m = dm.sum_all().backward(&[&x], false).unwrap().remove(0);
    assert_eq!(d2m.value(), &Tensor::zeros(vec![4]));
}

/// Hessian-vector products via double backward against central differences
/// of the first gradient.
fn check_hvp<F>(f: F, inputs: &[Tensor], seed: u64) -> f64
where
    F: for<'g> Fn(&'g Graph, &[cgc_autodiff::Var<'g>]) -> cgc_autodiff::Result<cgc_autodiff::Var<'g>>,
{
    let mut rng = CaseRng::new(seed.wrapping_add(1000));
    let dirs: Vec<Tensor> = inputs.iter().map(|t| rng.tensor(t.shape(), -1.0, 1.0)).collect();
    // h(x) = sum_i <grad_i f(x), d_i>; its gradient is H d.
    let hvp_fn = scalar_fn(|g, v| {
        let out = f(g, v)?;
        let refs: Vec<_> = v.iter().collect();
        let grads = out.backward(&refs, true)?;
        let mut acc = g.constant(Tensor::scalar(0.0));
        for (gr, d) in grads.iter().zip(&dirs) {
            acc = acc.add(&gr.mul(&g.constant(d.clone()))?.sum_all())?;
        }
        Ok(acc)
    });
    let analytic = analytic_gradients(&hvp_fn, inputs).unwrap();
    let mut worst: f64 = 0.0;
    for which in 0..inputs.len() {
        let numeric = numeric_gradient(
            |probe| cgc_autodiff::gradcheck::eval_scalar(&hvp_fn, probe),
            inputs,
            which,
            DEFAULT_STEP,
        )
        .unwrap();
        worst = worst.max(relative_error(&analytic[which], &numeric));
    }
    worst
}

#[test]
fn second_derivative_of_relu_matmul_square_mean() {
    for seed in 0..10 {
        let mut rng = CaseRng::new(seed);
        let w = rng.tensor(&[3, 4], -1.0, 1.0);
        let x = rng.tensor(&[4, 5], -1.0, 1.0);
        let f = scalar_fn(|_g, v| v[0].matmul(&v[1])?.relu().square().mean_all());
        let err = check_hvp(f, &[w, x], seed);
        assert!(err < 1e-3, "seed {seed}: {err:e}");
    }
}

#[test]
fn second_order_through_conv_adjoints() {
    for seed in 0..10 {
        let mut rng = CaseRng::new(seed);
        let x = rng.tensor(&[2, 2, 5, 5], -1.0, 1.0);
        let k = rng.tensor(&[3, 2, 3, 3], -1.0, 1.0);
        let f = scalar_fn(|_g, v| {
            let y = v[0].conv2d(&v[1], 2, 1)?;
            y.square().mul(&y.exp())?.sum_all().mean_all()
        });
        let err = check_hvp(f, &[x, k], seed);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn second_order_through_maps_and_reductions() {
    for seed in 0..10 {
        let mut rng = CaseRng::new(seed);
        let x = rng.tensor(&[2, 4, 5], 0.5, 2.0);
        let f = scalar_fn(|_g, v| {
            let y = v[0].bilinear_resize(6, 3)?.hflip()?.sqrt()?;
            let n = y.square().sum(&[1, 2], true)?.sqrt()?;
            y.div(&n)?.log()?.sum_all().mean_all()
        });
        let err = check_hvp(f, &[x], seed);
        assert!(err < 1e-5, "seed {seed}: {err:e}");
    }
}

#[test]
fn first_order_avg_pool_and_resize_tight() {
    let f = scalar_fn(|g, v| {
        let r = g.constant(Tensor::from_fn(vec![1, 1, 3, 3], |i| (i as f64 * 0.7).cos()));
        v[0].avg_pool2d(2, 2)?.bilinear_resize(3, 3)?.mul(&r).map(|y| y.sum_all())
    });
    let mut rng = CaseRng::new(11);
    let x = rng.tensor(&[1, 1, 4, 4], -1.0, 1.0);
    let errs = check_gradients(&f, &[x], DEFAULT_STEP).unwrap();
    assert!(errs[0] < 1e-6);
}
