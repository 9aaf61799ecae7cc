use mixergan_core::gradcheck::{all_coords, check_gradients, primitive_checks};
use mixergan_core::graph::{gelu, Graph};
use mixergan_core::kernels::ConvGeom;
use mixergan_core::rng;
use mixergan_core::Tensor;
use rand::Rng;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, 7);
    Tensor::from_fn(shape, |_| r.random_range(-2.0..2.0))
}

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, report) in primitive_checks(11, 1e-5).unwrap() {
        assert!(report.max_rel_err < 1e-4, "{}: {:?}", name, report);
        assert!(report.checked > 0);
    }
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::eye(2));
    let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let y = g.matmul(i, a).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let r = g.constant(Tensor::from_rows(&[&[1.0, 2.0]]));
    let c = g.constant(Tensor::from_rows(&[&[3.0], &[4.0]]));
    let y = g.matmul(r, c).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 1]);
    assert_eq!(g.value(y).item(), 11.0);

    let err = g.matmul(a, r).unwrap_err().to_string();
    assert!(err.contains("[2, 2]") && err.contains("[1, 2]"), "{}", err);
}

#[test]
fn matmul_sum_gradient() {
    let inputs = [random(&[3, 4], 1), random(&[4, 2], 2)];
    let rep = check_gradients(&inputs, &all_coords(&inputs), 1e-5, |g, v| {
        let y = g.matmul(v[0], v[1])?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{:?}", rep);
}

#[test]
fn conv_examples() {
    let mut g = Graph::new();
    let x = random(&[2, 3, 5, 4], 3);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data_mut()[c * 3 + c] = 1.0;
    }
    let xv = g.constant(x.clone());
    let wv = g.constant(w);
    let y = g.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(g.value(y), &x);

    let ones = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = g.conv2d(ones, k, None, 1, 1).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);

    // kernel larger than the padded input
    let tiny = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let big = g.constant(Tensor::zeros(&[1, 1, 5, 5]));
    assert!(g.conv2d(tiny, big, None, 1, 1).is_err());
}

#[test]
fn conv_bias_is_per_channel() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
    let w = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
    let b = g.constant(Tensor::new(&[2], vec![0.5, -1.0]).unwrap());
    let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
}

#[test]
fn conv_gradients_tight() {
    let inputs = [random(&[1, 2, 5, 5], 4), random(&[2, 2, 3, 3], 5), random(&[2], 6)];
    let rep = check_gradients(&inputs, &all_coords(&inputs), 1e-5, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{:?}", rep);
}

// ⟨conv(x, w), y⟩ = ⟨x, conv_transpose(y, w)⟩ for geometries where the
// transposed output exactly matches the conv input.
#[test]
fn transposed_conv_is_adjoint() {
    for (i, &(size, k, stride, pad, output_pad)) in [(7, 3, 2, 1, 0), (8, 3, 2, 1, 1), (6, 4, 2, 1, 0), (5, 3, 1, 1, 0), (9, 5, 3, 2, 2)].iter().enumerate() {
        let geom = ConvGeom::new(k, stride, pad);
        let out = geom.conv_out(size).unwrap();
        assert_eq!(geom.transpose_out(out, output_pad), Some(size));
        let seed = 100 + i as u64 * 3;
        let x = random(&[2, 3, size, size], seed);
        let w = random(&[4, 3, k, k], seed + 1);
        let y = random(&[2, 4, out, out], seed + 2);
        let mut g = Graph::new();
        let (xv, wv, yv) = (g.constant(x.clone()), g.constant(w), g.constant(y.clone()));
        let cx = g.conv2d(xv, wv, None, stride, pad).unwrap();
        let ty = g.conv_transpose2d(yv, wv, None, stride, pad, output_pad).unwrap();
        let lhs = g.value(cx).dot(&y);
        let rhs = x.dot(g.value(ty));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(rhs.abs()), "{} vs {}", lhs, rhs);
    }
}

#[test]
fn transposed_conv_size() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[2, 1, 3, 3]));
    let y = g.conv_transpose2d(x, w, None, 2, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 7, 7]);
    let y = g.conv_transpose2d(x, w, None, 2, 1, 1).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 8, 8]);
    // output padding must be smaller than the stride
    assert!(g.conv_transpose2d(x, w, None, 2, 1, 2).is_err());
}

#[test]
fn transposed_conv_gradients_tight() {
    let inputs = [random(&[1, 2, 3, 3], 8), random(&[2, 3, 3, 3], 9), random(&[3], 10)];
    let rep = check_gradients(&inputs, &all_coords(&inputs), 1e-5, |g, v| {
        let y = g.conv_transpose2d(v[0], v[1], Some(v[2]), 2, 1, 0)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-6, "{:?}", rep);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let gamma = g.constant(Tensor::full(&[3], 1.0));
    let beta = g.constant(Tensor::zeros(&[3]));
    let x = g.constant(Tensor::from_rows(&[&[5.0, 5.0, 5.0]]));
    let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let gamma = g.constant(Tensor::full(&[2], 1.0));
    let beta = g.constant(Tensor::zeros(&[2]));
    let x = g.constant(Tensor::from_rows(&[&[1.0, 3.0]]));
    let y = g.layer_norm(x, gamma, beta, 1e-14).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + 1.0).abs() < 1e-12 && (d[1] - 1.0).abs() < 1e-12, "{:?}", d);
}

#[test]
fn layer_norm_gradients_including_affine() {
    let inputs = [random(&[4, 6], 12), random(&[6], 13), random(&[6], 14)];
    let r = random(&[4, 6], 15);
    let rep = check_gradients(&inputs, &all_coords(&inputs), 1e-5, |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        let rv = g.constant(r.clone());
        let p = g.mul(y, rv)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(rep.max_rel_err < 1e-5, "{:?}", rep);
}

#[test]
fn gelu_values() {
    assert_eq!(gelu(0.0), 0.0);
    assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
    assert!(gelu(-10.0).abs() < 1e-6);
    // Φ(x) from its series: odd terms of erf via the Maclaurin expansion
    let phi = |x: f64| {
        let z = x / std::f64::consts::SQRT_2;
        let mut term = z;
        let mut sum = z;
        for n in 1..60 {
            term *= -z * z / n as f64;
            sum += term / (2 * n + 1) as f64;
        }
        0.5 * (1.0 + 2.0 / std::f64::consts::PI.sqrt() * sum)
    };
    for x in [-2.0, -0.5, 0.3, 1.7] {
        assert!((gelu(x) - x * phi(x)).abs() < 1e-12, "{}", x);
    }
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let x = random(&[2, 3, 4], 20);
    let xv = g.constant(x.clone());
    let t = g.transpose(xv).unwrap();
    assert_eq!(g.shape(t), &[2, 4, 3]);
    let tt = g.transpose(t).unwrap();
    assert_eq!(g.value(tt), &x);

    let v = g.constant(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
    let m = g.mean(v);
    assert_eq!(g.value(m).item(), 2.0);

    let a = g.constant(Tensor::zeros(&[2, 2]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    assert!(g.add(a, b).is_err());
    assert!(g.sub(a, b).is_err());
    assert!(g.reshape(a, &[3]).is_err());
}

#[test]
fn mean_square_gradient_is_two_x_over_n() {
    let x = random(&[3, 5], 21);
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let s = g.square(xv);
    let m = g.mean(s);
    let grads = g.backward(m).unwrap();
    let n = x.numel() as f64;
    for (got, xi) in grads.get(xv).unwrap().data().iter().zip(x.data()) {
        assert!((got - 2.0 * xi / n).abs() < 1e-15);
    }
}

#[test]
fn unused_parameter_gets_exact_zero_gradient() {
    let mut g = Graph::new();
    let used = g.param(random(&[3], 22));
    let unused = g.param(random(&[2, 2], 23));
    let _side = g.square(unused);
    let l = g.sum(used);
    let grads = g.backward(l).unwrap();
    let z = grads.get_or_zeros(unused);
    assert_eq!(z.shape(), &[2, 2]);
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn gradient_accumulates_over_reuse() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    let z = g.add(y, x).unwrap();
    let grads = g.backward(z).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 7.0);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(x).is_err());
}

#[test]
fn identical_runs_are_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let x = g.param(random(&[1, 2, 6, 6], 30));
        let w = g.param(random(&[3, 2, 3, 3], 31));
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        let y = g.instance_norm(y, 1e-5).unwrap();
        let y = g.gelu(y);
        let l = g.mean(y);
        let grads = g.backward(l).unwrap();
        (g.value(l).item().to_bits(), grads.get_or_zeros(w).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    assert_eq!(run(), run());
}

#[test]
fn detached_values_stop_gradients() {
    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(2.0));
    let d = g.detach(x);
    let y = g.mul(d, x).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 2.0);
}
